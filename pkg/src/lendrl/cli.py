"""Command-line pipeline: synth, preprocess, train, evaluate, report.

Stages communicate through files under the output directory::

    <out>/preprocess/<pool>/{features.csv,dataset.csv,dataset.json}
    <out>/train/<pool>/<algo>/{policy.ckpt,trainlog.csv}
    <out>/evaluate/<pool>/<algo>/{report.json,report.txt,volatility.csv,stress.csv,trajectories.csv}
    <out>/report/summary.md
    <out>/config.json      resolved configuration (reloadable)
    <out>/manifest.json    sha256 of every artifact

Flags override ``LENDRL_*`` environment variables, which override the
config file.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import date
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import __version__
from .agents import ALGORITHMS, TrainConfig, load_bundle, save_bundle, train
from .errors import ConfigError, InvalidValue, LendRLError, MissingArtifact, ParseError
from .evaluate import (
    DEFAULT_RATE_CAP,
    DEFAULT_STRESS_WINDOWS,
    EvalReport,
    StressWindow,
    evaluate,
    replay_policy,
    trajectories_csv,
)
from .ingest import DEFAULT_EPSILON, DEFAULT_WINDOW, FeatureSeries, build_feature_series, group_by_pool, parse_snapshots, snapshots_to_csv
from .mdp import RewardConfig, build_dataset, fit_normalization, load_dataset, save_dataset
from .ratecurve import KinkParams, baseline_trajectory, recorded_trajectory
from .synth import generate_snapshots

ENV_PREFIX = "LENDRL_"
FIXTURE_NAME = "synthetic_v2_weth.csv"
BASELINES = ("recorded", "rule_based")
EVAL_SPLITS = ("test", "all")


def fixture_path() -> Path:
    """Path of the bundled synthetic reserve history (1,007 days, one pool)."""
    return Path(str(resources.files("lendrl") / "data" / FIXTURE_NAME))


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class InputSpec:
    path: str
    pool: str | None = None  # keep only this pool's records when set


@dataclass(frozen=True)
class RunConfig:
    inputs: tuple[InputSpec, ...]
    schema: Mapping[str, str] = field(default_factory=dict)
    format: str | None = None
    window: int = DEFAULT_WINDOW
    epsilon: float = DEFAULT_EPSILON
    split: float = 0.8
    reward: RewardConfig = field(default_factory=RewardConfig)
    rate_curve: KinkParams = field(default_factory=KinkParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    stress_windows: tuple[StressWindow, ...] = DEFAULT_STRESS_WINDOWS
    rate_cap: float = DEFAULT_RATE_CAP
    baseline: str = "recorded"
    eval_split: str = "test"
    out: str = "out"
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "inputs": [{"path": i.path, "pool": i.pool} for i in self.inputs],
            "schema": dict(sorted(self.schema.items())),
            "format": self.format,
            "window": self.window,
            "epsilon": self.epsilon,
            "split": self.split,
            "reward": asdict(self.reward),
            "rate_curve": asdict(self.rate_curve),
            "train": self.train.to_dict(),
            "stress_windows": [w.to_dict() for w in self.stress_windows],
            "rate_cap": self.rate_cap,
            "baseline": self.baseline,
            "eval_split": self.eval_split,
            "out": self.out,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_TOP_FIELDS = {f.name for f in fields(RunConfig)}


def _number(d: Mapping, key: str, kind: type, default: Any) -> Any:
    if key not in d or d[key] is None:
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise InvalidValue(key, f"expected a number, got {v!r}")
    if kind is int:
        if float(v) != int(v):
            raise InvalidValue(key, f"expected an integer, got {v!r}")
        return int(v)
    if not math.isfinite(v):
        raise InvalidValue(key, "must be finite")
    return float(v)


def _sub(d: Mapping, key: str, cls: type, prefix: str) -> Any:
    raw = d.get(key) or {}
    if not isinstance(raw, Mapping):
        raise InvalidValue(key, "expected an object")
    known = {f.name for f in fields(cls)}
    for k in raw:
        if k not in known:
            raise InvalidValue(f"{prefix}.{k}", "unknown field")
    try:
        if cls is TrainConfig:
            return TrainConfig.from_dict(dict(raw))
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise InvalidValue(prefix, str(exc)) from exc


def _resolve(path: str, base: Path) -> str:
    p = Path(path).expanduser()
    return str(p if p.is_absolute() else (base / p).resolve())


def _inputs(raw: Any, base: Path) -> tuple[InputSpec, ...]:
    if raw is None:
        raise InvalidValue("inputs", "at least one input path is required")
    if isinstance(raw, str):
        items: list[InputSpec] = [InputSpec(raw)]
    elif isinstance(raw, Mapping):
        items = [InputSpec(str(p), str(pool)) for pool, p in raw.items()]
    elif isinstance(raw, list):
        items = []
        for i, entry in enumerate(raw):
            if isinstance(entry, str):
                items.append(InputSpec(entry))
            elif isinstance(entry, Mapping) and isinstance(entry.get("path"), str):
                pool = entry.get("pool")
                items.append(InputSpec(entry["path"], None if pool is None else str(pool)))
            else:
                raise InvalidValue(f"inputs[{i}]", "expected a path or {path, pool}")
    else:
        raise InvalidValue("inputs", "expected a path, a list, or a pool -> path object")
    if not items:
        raise InvalidValue("inputs", "at least one input path is required")
    return tuple(InputSpec(_resolve(i.path, base), i.pool) for i in items)


def config_from_dict(d: Mapping, base: Path | str = ".") -> RunConfig:
    """Validate a config mapping; relative paths resolve against ``base``."""
    base = Path(base).resolve()
    if not isinstance(d, Mapping):
        raise InvalidValue("<root>", "config must be a JSON object")
    for k in d:
        if k not in _TOP_FIELDS:
            raise InvalidValue(k, "unknown field")

    split = _number(d, "split", float, 0.8)
    if not 0.0 < split < 1.0:
        raise InvalidValue("split", f"must lie in (0, 1), got {split}")
    window = _number(d, "window", int, DEFAULT_WINDOW)
    if window < 2:
        raise InvalidValue("window", "must be at least 2")
    epsilon = _number(d, "epsilon", float, DEFAULT_EPSILON)
    if not epsilon > 0:
        raise InvalidValue("epsilon", "must be positive")
    rate_cap = _number(d, "rate_cap", float, DEFAULT_RATE_CAP)
    if not rate_cap > 0:
        raise InvalidValue("rate_cap", "must be positive")
    seed = _number(d, "seed", int, 0)
    if seed < 0:
        raise InvalidValue("seed", "must be non-negative")

    schema = d.get("schema") or {}
    if not isinstance(schema, Mapping) or not all(isinstance(v, str) for v in schema.values()):
        raise InvalidValue("schema", "expected an object of field -> column name")
    fmt = d.get("format")
    if fmt not in (None, "csv", "jsonl"):
        raise InvalidValue("format", "must be csv, jsonl or null")
    baseline = d.get("baseline", "recorded")
    if baseline not in BASELINES:
        raise InvalidValue("baseline", f"must be one of {BASELINES}")
    eval_split = d.get("eval_split", "test")
    if eval_split not in EVAL_SPLITS:
        raise InvalidValue("eval_split", f"must be one of {EVAL_SPLITS}")
    out = d.get("out", "out")
    if not isinstance(out, str) or not out:
        raise InvalidValue("out", "expected a directory path")

    windows: tuple[StressWindow, ...] = DEFAULT_STRESS_WINDOWS
    if d.get("stress_windows") is not None:
        if not isinstance(d["stress_windows"], list):
            raise InvalidValue("stress_windows", "expected a list")
        parsed = []
        for i, w in enumerate(d["stress_windows"]):
            try:
                parsed.append(StressWindow.from_dict(w))
            except (KeyError, TypeError, ValueError) as exc:
                raise InvalidValue(f"stress_windows[{i}]", str(exc)) from exc
        windows = tuple(parsed)

    train_cfg = _sub(d, "train", TrainConfig, "train")
    return RunConfig(
        inputs=_inputs(d.get("inputs"), base),
        schema=dict(schema),
        format=fmt,
        window=window,
        epsilon=epsilon,
        split=split,
        reward=_sub(d, "reward", RewardConfig, "reward"),
        rate_curve=_sub(d, "rate_curve", KinkParams, "rate_curve"),
        train=replace(train_cfg, seed=seed),
        stress_windows=windows,
        rate_cap=rate_cap,
        baseline=baseline,
        eval_split=eval_split,
        out=_resolve(out, base),
        seed=seed,
    )


def load_config(path: Path | str) -> RunConfig:
    """Read a JSON config file; defaults fill every absent optional field.

    The top-level ``seed`` also seeds training, replacing ``train.seed``.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(str(path), f"cannot read config: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from exc
    return config_from_dict(data, path.parent)


def default_config() -> RunConfig:
    """Configuration used when no config file is given: the bundled fixture."""
    return config_from_dict({"inputs": str(fixture_path())})


def apply_overrides(cfg: RunConfig, seed: int | None = None, steps: int | None = None,
                    algo: str | None = None, out: str | None = None) -> RunConfig:
    train_cfg = cfg.train
    if steps is not None:
        if steps < 0:
            raise InvalidValue("steps", "must be non-negative")
        train_cfg = replace(train_cfg, steps=steps)
    if algo is not None:
        try:
            train_cfg = replace(train_cfg, algorithm=algo)
        except ValueError as exc:
            raise InvalidValue("algo", str(exc)) from exc
    if seed is not None:
        if seed < 0:
            raise InvalidValue("seed", "must be non-negative")
        cfg = replace(cfg, seed=seed)
        train_cfg = replace(train_cfg, seed=seed)
    if out is not None:
        cfg = replace(cfg, out=str(Path(out).resolve()))
    return replace(cfg, train=train_cfg)


# ---------------------------------------------------------------- stages


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _to_text(writer) -> str:
    buf = io.StringIO()
    writer(buf)
    return buf.getvalue()


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def _pool_dirs(root: Path, stage: str, pools: Sequence[str] | None) -> list[str]:
    stage_dir = root / stage
    found = sorted(p.name for p in stage_dir.iterdir() if p.is_dir()) if stage_dir.is_dir() else []
    if pools:
        return [_safe(p) for p in pools]
    if not found:
        raise MissingArtifact(stage, stage_dir)
    return found


def load_snapshots(cfg: RunConfig) -> dict[str, list]:
    by_pool: dict[str, list] = {}
    for spec in cfg.inputs:
        try:
            data = Path(spec.path).read_bytes()
        except OSError as exc:
            raise MissingArtifact("input", spec.path) from exc
        for pool, snaps in group_by_pool(parse_snapshots(data, cfg.schema or None, cfg.format)).items():
            if spec.pool is None or pool == spec.pool:
                by_pool.setdefault(pool, []).extend(snaps)
    return by_pool


def run_preprocess(cfg: RunConfig, pools: Sequence[str] | None = None) -> list[Path]:
    root = Path(cfg.out)
    by_pool = load_snapshots(cfg)
    selected = sorted(by_pool) if not pools else list(pools)
    written = []
    for pool in selected:
        if pool not in by_pool:
            raise MissingArtifact("input", f"no records for pool {pool!r}")
        snaps = sorted(by_pool[pool], key=lambda s: s.timestamp_unix)
        series = build_feature_series(snaps, cfg.window, cfg.epsilon)
        ds = build_dataset(series, cfg.reward)
        train_size = int(math.floor(cfg.split * len(ds)))
        if train_size < 1:
            raise InvalidValue("split", f"leaves no training transitions for pool {pool!r}")
        ds = replace(ds, train_size=train_size)
        ds = replace(ds, norm_stats=fit_normalization(ds.train_split()))
        d = root / "preprocess" / _safe(pool)
        d.mkdir(parents=True, exist_ok=True)
        _write(d / "features.csv", _to_text(series.to_csv))
        save_dataset(ds, d / "dataset.csv", d / "dataset.json")
        written.append(d)
    return written


def _load_series(root: Path, pool_dir: str, cfg: RunConfig) -> FeatureSeries:
    path = root / "preprocess" / pool_dir / "features.csv"
    sidecar = json.loads(_require(root / "preprocess" / pool_dir / "dataset.json", "preprocess").read_text())
    with open(_require(path, "preprocess"), encoding="utf-8", newline="") as fh:
        return FeatureSeries.from_csv(fh, sidecar["pool_id"], cfg.window)


def _require(path: Path, stage: str) -> Path:
    if not path.is_file():
        raise MissingArtifact(stage, path)
    return path


def run_train(cfg: RunConfig, pools: Sequence[str] | None = None, log=None) -> list[Path]:
    root = Path(cfg.out)
    written = []
    for pool_dir in _pool_dirs(root, "preprocess", pools):
        d = root / "preprocess" / pool_dir
        ds = load_dataset(_require(d / "dataset.csv", "preprocess"), _require(d / "dataset.json", "preprocess"))
        if log:
            log(f"train {pool_dir} {cfg.train.algorithm}: {ds.train_size} transitions, {cfg.train.steps} steps")
        bundle, trainlog = train(ds.train_split(), cfg.train)
        out = root / "train" / pool_dir / cfg.train.algorithm
        out.mkdir(parents=True, exist_ok=True)
        save_bundle(bundle, out / "policy.ckpt")
        _write(out / "trainlog.csv", _to_text(trainlog.to_csv))
        written.append(out)
    return written


def run_evaluate(cfg: RunConfig, pools: Sequence[str] | None = None) -> list[Path]:
    root = Path(cfg.out)
    algo = cfg.train.algorithm
    written = []
    for pool_dir in _pool_dirs(root, "preprocess", pools):
        ckpt = _require(root / "train" / pool_dir / algo / "policy.ckpt", "train")
        series = _load_series(root, pool_dir, cfg)
        sidecar = json.loads((root / "preprocess" / pool_dir / "dataset.json").read_text())
        if cfg.eval_split == "test":
            # transition t starts at feature row t, so the held-out rows begin at train_size
            series = series.slice(int(sidecar["train_size"]), None)
        bundle = load_bundle(ckpt)
        recorded = recorded_trajectory(series)
        rule = baseline_trajectory(series, cfg.rate_curve)
        policy = replay_policy(bundle, series, cfg.rate_cap)
        base, other = (recorded, rule) if cfg.baseline == "recorded" else (rule, recorded)
        report = evaluate(base, policy, cfg.stress_windows, extra=(other,))
        out = root / "evaluate" / pool_dir / algo
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "report.json", report.to_json())
        _write(out / "report.txt", report.render())
        _write(out / "volatility.csv", _to_text(report.volatility_csv))
        _write(out / "stress.csv", _to_text(report.stress_csv))
        _write(out / "trajectories.csv", _to_text(lambda fh: trajectories_csv([recorded, rule, policy], fh)))
        written.append(out)
    return written


def run_report(cfg: RunConfig, pools: Sequence[str] | None = None) -> Path:
    root = Path(cfg.out)
    eval_dir = root / "evaluate"
    reports = sorted(eval_dir.glob("*/*/report.json")) if eval_dir.is_dir() else []
    if pools:
        keep = {_safe(p) for p in pools}
        reports = [r for r in reports if r.parent.parent.name in keep]
    if not reports:
        raise MissingArtifact("evaluate", eval_dir)
    parts = ["# Rate policy evaluation summary", ""]
    for path in reports:
        d = json.loads(path.read_text())
        report = EvalReport(**d)
        parts.append(f"Source: `evaluate/{path.parent.parent.name}/{path.parent.name}`")
        parts.append("")
        parts.append("```")
        parts.append(report.render().rstrip("\n"))
        parts.append("```")
        parts.append("")
    out = root / "report" / "summary.md"
    _write(out, "\n".join(parts))
    return out


def run_synth(path: Path, n_days: int, seed: int, pool: str) -> Path:
    snaps = generate_snapshots(n_days, seed=seed, pool_id=pool)
    _write(path, _to_text(lambda fh: snapshots_to_csv(snaps, fh)))
    return path


def write_manifest(root: Path) -> Path:
    entries = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            entries[p.relative_to(root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    out = root / "manifest.json"
    _write(out, json.dumps({"artifacts": entries, "version": __version__}, indent=2, sort_keys=True) + "\n")
    return out


STAGES = {
    "preprocess": run_preprocess,
    "train": run_train,
    "evaluate": run_evaluate,
    "report": run_report,
}


def run(subcommand: str, cfg: RunConfig, pools: Sequence[str] | None = None, log=None) -> None:
    """Run one stage (or ``pipeline``) and refresh the config echo and manifest."""
    root = Path(cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    _write(root / "config.json", cfg.to_json())
    order = list(STAGES) if subcommand == "pipeline" else [subcommand]
    for stage in order:
        if stage == "train":
            run_train(cfg, pools, log)
        else:
            STAGES[stage](cfg, pools)
        if log:
            log(f"{stage}: done")
    write_manifest(root)


# ---------------------------------------------------------------- entry point


def _env(name: str) -> str | None:
    v = os.environ.get(ENV_PREFIX + name)
    return v if v not in (None, "") else None


def _env_int(name: str) -> int | None:
    v = _env(name)
    if v is None:
        return None
    try:
        return int(v)
    except ValueError:
        raise InvalidValue(ENV_PREFIX + name, f"expected an integer, got {v!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (default: bundled synthetic fixture)")
    common.add_argument("--seed", type=int, help="seed for training and synthetic data")
    common.add_argument("--pool", action="append", help="restrict to this pool id (repeatable)")
    common.add_argument("--algo", choices=ALGORITHMS, help="training algorithm")
    common.add_argument("--steps", type=int, help="gradient steps")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="lendrl", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"lendrl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("preprocess", "build features and the transition dataset"),
        ("train", "train a policy on the preprocessed dataset"),
        ("evaluate", "replay the trained policy and compute metrics"),
        ("report", "merge evaluation reports into report/summary.md"),
        ("pipeline", "run preprocess, train, evaluate and report"),
    ]:
        sub.add_parser(name, parents=[common], help=help_text)
    synth = sub.add_parser("synth", parents=[common], help="write a synthetic reserve history CSV")
    synth.add_argument("--days", type=int, default=1007)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    log = lambda msg: print(msg, file=sys.stderr)  # noqa: E731
    try:
        seed = args.seed if args.seed is not None else _env_int("SEED")
        if args.command == "synth":
            out = Path(args.out or _env("OUT") or FIXTURE_NAME)
            pool = (args.pool or [_env("POOL") or "v2-WETH"])[0]
            run_synth(out, args.days, seed or 0, pool)
            log(f"wrote {out}")
            return 0
        config_path = args.config or _env("CONFIG")
        cfg = load_config(config_path) if config_path else default_config()
        cfg = apply_overrides(
            cfg,
            seed=seed,
            steps=args.steps if args.steps is not None else _env_int("STEPS"),
            algo=args.algo or _env("ALGO"),
            out=args.out or _env("OUT"),
        )
        pools = args.pool or ([_env("POOL")] if _env("POOL") else None)
        run(args.command, cfg, pools, log)
    except MissingArtifact as exc:
        log(f"error: {exc}")
        return 3
    except ConfigError as exc:
        log(f"config error: {exc}")
        return 2
    except LendRLError as exc:
        log(f"error: {type(exc).__name__}: {exc}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
