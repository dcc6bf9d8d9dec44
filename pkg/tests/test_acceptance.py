"""Acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line with the
measured values, then asserts. Tolerances and runtime budgets are pinned
below.
"""

from __future__ import annotations

import io
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from lendrl.agents import (
    Batch,
    TrainConfig,
    _init_bundle,
    _prepare,
    bc_loss,
    bellman_loss,
    cql_critic_loss,
    sample_batch,
    td3_target,
    td3bc_actor_loss,
    train,
)
from lendrl.cli import fixture_path, main
from lendrl.evaluate import (
    StressWindow,
    format_volatility_row,
    magnitude_distribution,
    rate_change_volatility,
    replay_policy,
    stress_report,
    volatility_comparison,
    volatility_table,
    FOOTER,
)
from lendrl.ingest import apr_to_apy, build_feature_series, parse_snapshots, rolling_stats
from lendrl.mdp import RewardConfig, TransitionDataset, build_dataset, compute_reward
from lendrl.neuralnet import grad_check, init_network
from lendrl.ratecurve import KinkParams, borrow_rate, recorded_trajectory
from lendrl.synth import generate_snapshots
from lendrl.trajectory import RateTrajectory

CURVE_TOL = 1e-12
REWARD_TOL = 1e-12
APY_TOL = 1e-7
ROLLING_TOL = 1e-12
GRAD_TOL = 1e-5
REDUCTION_TOL = 1e-10
BC_LOSS_TARGET = 1e-3
HEALTH_RATIO = 0.20
HEALTH_SMOOTHING = 500
STRESS_TOL = 1e-12

BUDGET_S = {1: 1, 2: 5, 4: 30, 5: 120, 8: 300, 10: 180}


@pytest.fixture
def record(capsys):
    def emit(n: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, f"criterion {n} ({title}) failed: {detail}"

    return emit


def fixture_dataset() -> TransitionDataset:
    snaps = parse_snapshots(fixture_path().read_bytes())
    return build_dataset(build_feature_series(snaps), RewardConfig())


def test_criterion_01_curve(record):
    t0 = time.perf_counter()
    p = KinkParams(r_base=0.0, u_star=0.8, slope1=0.04, slope2=0.75, reserve_factor=0.1)
    lower = p.r_base + p.u_star * p.slope1
    upper = p.r_base + p.u_star * p.slope1 + (p.u_star - p.u_star) * p.slope2
    gap = abs(lower - upper)
    grid = [borrow_rate(u, p) for u in np.linspace(0.0, 1.0, 1001)]
    monotone = all(a <= b for a, b in zip(grid, grid[1:]))
    points = [(0.0, 0.0), (0.8, 0.032), (1.0, 0.182)]
    point_err = max(abs(borrow_rate(u, p) - want) for u, want in points)
    elapsed = time.perf_counter() - t0
    ok = gap < CURVE_TOL and monotone and point_err < CURVE_TOL and elapsed < BUDGET_S[1]
    record(1, "curve correctness", ok,
           f"kink gap {gap:.1e}, monotone={monotone}, max point error {point_err:.1e}, {elapsed:.3f}s")


def test_criterion_02_reward_oracle(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(10_000):
        u, b, s = rng.uniform(0, 1), rng.uniform(0, 0.5), rng.uniform(0, 0.5)
        a = rng.normal(0, 0.02, size=2)
        alpha, beta, lam, gam = rng.uniform(0, 3, size=4)
        ut = rng.uniform(0.05, 0.95)
        cfg = RewardConfig(alpha, beta, lam, gam, ut)
        total, _ = compute_reward(u, b, s, a, cfg)
        oracle = -alpha * (u - ut) ** 2 - beta * b + beta * lam * s - gam * (a[1] ** 2 + a[0] ** 2)
        worst = max(worst, abs(total - oracle))
    cfg = RewardConfig(1.0, 0.5, 1.0, 0.1, 0.8)
    best = compute_reward(0.8, 0.0, 0.0, (0.0, 0.0), cfg)[0]
    grid_ok = all(compute_reward(u, 0.0, 0.0, (0.0, 0.0), cfg)[0] < best
                  for u in np.linspace(0, 1, 1001) if abs(u - 0.8) > 1e-12)
    elapsed = time.perf_counter() - t0
    ok = worst <= REWARD_TOL and grid_ok and elapsed < BUDGET_S[2]
    record(2, "reward oracle", ok, f"max |diff| {worst:.1e} over 10000 draws, argmax at U*={grid_ok}, {elapsed:.2f}s")


def test_criterion_03_preprocessing(record):
    apy_err = abs(apr_to_apy(0.05) - 0.0512675)
    m, v = rolling_stats([1.0, 2.0, 3.0], 3)
    roll_err = max(abs(m[2] - 2.0), abs(v[2] - math.sqrt(2 / 3)))
    series = build_feature_series(generate_snapshots(100, seed=11), window=7)
    n_trans = len(build_dataset(series, RewardConfig()))
    ok = apy_err <= APY_TOL and roll_err <= ROLLING_TOL and n_trans == 93
    record(3, "preprocessing oracles", ok,
           f"APY error {apy_err:.1e}, rolling error {roll_err:.1e}, N=100 n=7 -> {n_trans} transitions")


def test_criterion_04_grad_check(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(20):
        depth = int(rng.integers(1, 3))
        dims = [int(rng.integers(2, 7))] + [int(rng.integers(3, 9)) for _ in range(depth)] + [int(rng.integers(1, 4))]
        net = init_network(dims, ["identity", "tanh"][i % 2], seed=i)
        for b in net.biases:
            b[:] = rng.uniform(0.05, 0.3, size=b.shape) * rng.choice([-1, 1], size=b.shape)
        x = rng.normal(size=(3, dims[0]))
        x += np.where(np.abs(x) < 1e-3, 1e-2, 0.0)
        worst = max(worst, grad_check(net, x, tolerance=GRAD_TOL).max_rel_error)
    elapsed = time.perf_counter() - t0
    ok = worst < GRAD_TOL and elapsed < BUDGET_S[4]
    record(4, "gradient check", ok, f"max relative error {worst:.2e} over 20 nets, {elapsed:.2f}s")


def test_criterion_05_bc_convergence(record):
    rng = np.random.default_rng(5)
    n = 1000
    s = rng.normal(size=(n, 21))
    a = s @ (rng.normal(size=(21, 2)) / np.sqrt(21))
    dones = np.zeros(n)
    dones[-1] = 1
    ds = TransitionDataset(s, a, np.zeros(n), s, dones)
    t0 = time.perf_counter()
    _, log = train(ds, TrainConfig(algorithm="bc", steps=20_000, bc_learning_rate=3e-5))
    elapsed = time.perf_counter() - t0
    loss = log.series("actor_loss")
    below = np.flatnonzero(loss < BC_LOSS_TARGET)
    first = int(below[0]) if len(below) else None
    final = float(loss[-100:].mean())
    ok = first is not None and final < BC_LOSS_TARGET and elapsed < BUDGET_S[5]
    record(5, "BC convergence", ok,
           f"loss < 1e-3 first at step {first}, final 100-step mean {final:.2e}, {elapsed:.1f}s")


def test_criterion_06_reductions(record):
    ds = fixture_dataset()
    nds, stats = _prepare(ds)
    cfg = TrainConfig(td3bc_alpha=0.0, cql_alpha=0.0, hidden_dims=(64, 64))
    bundle, rng = _init_bundle(cfg, stats, with_critics=True)
    batch = sample_batch(nds, 256, rng)
    _, g = td3bc_actor_loss(batch, bundle, cfg)
    _, gb = bc_loss(bundle.actor, batch, cfg.action_bound)
    td3bc_gap = max(float(np.abs(x - y).max()) for x, y in zip(g.arrays(), gb.arrays()))

    y = td3_target(batch, bundle, cfg, np.random.default_rng(1))
    _, (g1, g2), _ = cql_critic_loss(batch, bundle, cfg, np.random.default_rng(2), y=y)
    _, r1 = bellman_loss(bundle.critic1, batch, y)
    _, r2 = bellman_loss(bundle.critic2, batch, y)
    cql_gap = max(float(np.abs(x - r).max()) for x, r in zip(g1.arrays() + g2.arrays(), r1.arrays() + r2.arrays()))

    _, log = train(ds, TrainConfig(algorithm="cql", steps=1000, hidden_dims=(64, 64)))
    pen = log.series("penalty")
    ok = td3bc_gap <= REDUCTION_TOL and cql_gap <= REDUCTION_TOL and len(pen) == 1000 and (pen >= 0).all()
    record(6, "reduction identities", ok,
           f"TD3-BC(alpha=0) vs BC grad gap {td3bc_gap:.1e}, CQL(alpha=0) vs Bellman grad gap {cql_gap:.1e}, "
           f"min CQL penalty over 1000 steps {pen.min():.3e}")


def test_criterion_07_td3_mechanics(record):
    ds = fixture_dataset()
    nds, stats = _prepare(ds)
    cfg = TrainConfig(hidden_dims=(32, 32))
    bundle, _ = _init_bundle(cfg, stats, with_critics=True)
    full = Batch(nds.states, nds.actions, nds.rewards, nds.next_states, np.ones(len(nds)))
    terminal_exact = bool((td3_target(full, bundle, cfg, np.random.default_rng(0)) == full.rewards).all())

    _, log = train(ds, TrainConfig(steps=101, policy_delay=2, hidden_dims=(16, 16)))
    cadence_ok = log.actor_updates == 101 // 2

    violations = 0
    rng = np.random.default_rng(7)
    for i in range(1000):
        b = sample_batch(nds, 64, rng)
        seed = 10_000 + i
        y = td3_target(b, bundle, cfg, np.random.default_rng(seed), "min")
        y1 = td3_target(b, bundle, cfg, np.random.default_rng(seed), "q1")
        y2 = td3_target(b, bundle, cfg, np.random.default_rng(seed), "q2")
        violations += int(((y > y1) | (y > y2)).any())
    ok = terminal_exact and cadence_ok and violations == 0
    record(7, "TD3 mechanics", ok,
           f"terminal y == r: {terminal_exact}, actor updates {log.actor_updates} for 101 steps, "
           f"twin-min violations {violations}/1000")


@pytest.mark.slow
def test_criterion_08_td3bc_health(record):
    ds = fixture_dataset()
    # (128, 128) keeps 20k steps inside the runtime budget; (256, 256) takes ~300 s alone
    cfg = TrainConfig(algorithm="td3bc", steps=20_000, hidden_dims=(128, 128))
    t0 = time.perf_counter()
    _, log = train(ds, cfg)
    elapsed = time.perf_counter() - t0
    c = log.series("critic_loss")
    smooth = np.convolve(c, np.ones(HEALTH_SMOOTHING) / HEALTH_SMOOTHING, mode="valid")
    ratio = float(smooth[-1] / smooth.max())
    ok = ratio < HEALTH_RATIO and elapsed < BUDGET_S[8]
    record(8, "TD3-BC training health", ok,
           f"{len(ds)} transitions, smoothed critic loss end/peak = {ratio:.3f} "
           f"(peak at step {int(smooth.argmax()) + HEALTH_SMOOTHING - 1}), {elapsed:.1f}s")


def test_criterion_09_evaluation(record):
    series = build_feature_series(generate_snapshots(200, seed=9))
    zero = replay_policy(lambda s, r: (0.0, 0.0), series)
    zero_vol = max(rate_change_volatility(zero.borrow_rate), rate_change_volatility(zero.liquidity_rate))

    rec = recorded_trajectory(series)
    cand = replay_policy(lambda s, r: (0.001 * s[3] - 0.0005, 0.002 * s[3] - 0.001), series)
    rows = stress_report(rec, cand, [StressWindow("full", rec.dates[0], rec.dates[-1])])
    glob = volatility_table(rec, cand)
    stress_gap = max(abs(r[k] - g[k]) for r, g in zip(rows, glob)
                     for k in ("baseline_std", "candidate_std", "percent_change"))

    rng = np.random.default_rng(99)
    conserved = 0
    for _ in range(100):
        n = int(rng.integers(2, 300))
        x = np.cumsum(rng.normal(0, 10.0 ** rng.uniform(-9, 0), size=n) * (rng.random(n) < 0.8))
        m = magnitude_distribution(x)
        conserved += int(sum(m["counts"]) + m["zero"] + m["below"] + m["above"] == n - 1)

    row = format_volatility_row("V2-WETH", "borrow", 3.31e-2, 3.33e-2)
    pct = volatility_comparison(3.31e-2, 3.33e-2)
    row_ok = row == "V2-WETH | Borrow Rate | 3.31E-02 | 3.33E-02 | +0.604%" and "+0.73%" in FOOTER
    ok = zero_vol == 0.0 and stress_gap <= STRESS_TOL and conserved == 100 and row_ok
    record(9, "evaluation metrics", ok,
           f"zero-policy volatility {zero_vol}, full-window gap {stress_gap:.1e}, "
           f"histograms conserved {conserved}/100, row '{row}' ({pct:.4f}%)")


def test_criterion_10_determinism(record, tmp_path):
    t0 = time.perf_counter()
    digests = []
    for name in ("a", "b"):
        out = tmp_path / name
        for stage in ("preprocess", "train", "evaluate"):
            rc = main([stage, "--out", str(out), "--algo", "td3bc", "--steps", "2000", "--seed", "17"])
            assert rc == 0
        manifest = json.loads((out / "manifest.json").read_text())["artifacts"]
        digests.append({k: v for k, v in manifest.items() if k != "config.json"})
    elapsed = time.perf_counter() - t0
    ckpt = "train/v2-WETH/td3bc/policy.ckpt"
    report = "evaluate/v2-WETH/td3bc/report.json"
    same = digests[0] == digests[1]
    ok = same and ckpt in digests[0] and report in digests[0] and elapsed < BUDGET_S[10]
    record(10, "end-to-end determinism", ok,
           f"{len(digests[0])} artifacts identical={same} (checkpoint {digests[0].get(ckpt, '?')[:12]}), "
           f"{elapsed:.1f}s for two runs")
