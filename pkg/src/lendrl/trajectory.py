from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import date
from typing import IO

import numpy as np


@dataclass
class RateTrajectory:
    """Daily liquidity and borrow rate paths for one pool.

    ``source`` is ``"recorded"``, ``"rule_based"`` or ``"policy:<name>"``.
    """

    pool_id: str
    dates: list[date]
    liquidity_rate: np.ndarray
    borrow_rate: np.ndarray
    source: str

    def __post_init__(self) -> None:
        self.liquidity_rate = np.asarray(self.liquidity_rate, dtype=np.float64)
        self.borrow_rate = np.asarray(self.borrow_rate, dtype=np.float64)
        if not (len(self.dates) == len(self.liquidity_rate) == len(self.borrow_rate)):
            raise ValueError("trajectory series must have equal length")
        for a, b in zip(self.dates, self.dates[1:]):
            if b <= a:
                raise ValueError("trajectory dates must be strictly increasing")

    def __len__(self) -> int:
        return len(self.dates)

    def rate(self, rate_type: str) -> np.ndarray:
        if rate_type == "borrow":
            return self.borrow_rate
        if rate_type == "liquidity":
            return self.liquidity_rate
        raise KeyError(rate_type)

    def restrict(self, start: date, end: date) -> "RateTrajectory":
        """Days with ``start <= date <= end``."""
        idx = [i for i, d in enumerate(self.dates) if start <= d <= end]
        return RateTrajectory(
            self.pool_id,
            [self.dates[i] for i in idx],
            self.liquidity_rate[idx],
            self.borrow_rate[idx],
            self.source,
        )

    def to_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "borrow_rate", "liquidity_rate"])
        for d, b, lq in zip(self.dates, self.borrow_rate, self.liquidity_rate):
            w.writerow([d.isoformat(), repr(float(b)), repr(float(lq))])
