import io
import json
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lendrl.agents import TrainConfig, train
from lendrl.errors import BadBins, EmptySeries, EmptyWindow, SeriesTooShort, ZeroBaseline
from lendrl.evaluate import (
    DEFAULT_STRESS_WINDOWS,
    FOOTER,
    EvalReport,
    RuleBasedPolicy,
    StressWindow,
    evaluate,
    format_volatility_row,
    magnitude_distribution,
    rate_change_volatility,
    replay_policy,
    stress_report,
    trajectories_csv,
    volatility_comparison,
    volatility_table,
    yield_distribution,
)
from lendrl.ingest import FeatureSeries
from lendrl.ratecurve import KinkParams, baseline_trajectory, recorded_trajectory
from lendrl.trajectory import RateTrajectory

P = KinkParams(r_base=0.0, u_star=0.8, slope1=0.04, slope2=0.75, reserve_factor=0.1)


def zero_policy(state, rates):
    return 0.0, 0.0


def traj(values, source="x", start=date(2024, 1, 1)):
    v = np.asarray(values, dtype=float)
    return RateTrajectory("p", [start + timedelta(days=i) for i in range(len(v))], v / 2, v, source)


class TestReplay:
    def test_zero_policy_constant(self, synth_series):
        tr = replay_policy(zero_policy, synth_series)
        r0 = synth_series.rows[0]
        assert (tr.liquidity_rate == r0.liquidity_rate).all()
        assert (tr.borrow_rate == r0.variable_borrow_rate).all()
        assert rate_change_volatility(tr.borrow_rate) == 0.0

    def test_rule_based_matches_baseline(self, synth_series):
        base = baseline_trajectory(synth_series, P)
        tr = replay_policy(RuleBasedPolicy(P), synth_series,
                           initial_rates=(base.liquidity_rate[0], base.borrow_rate[0]))
        np.testing.assert_allclose(tr.borrow_rate, base.borrow_rate, rtol=0, atol=1e-15)
        np.testing.assert_allclose(tr.liquidity_rate, base.liquidity_rate, rtol=0, atol=1e-15)

    def test_clamped_at_zero(self, synth_series):
        tr = replay_policy(lambda s, r: (-1.0, -1.0), synth_series)
        assert (tr.borrow_rate[1:] == 0).all() and (tr.liquidity_rate[1:] == 0).all()

    def test_clamped_at_cap(self, synth_series):
        tr = replay_policy(lambda s, r: (1.0, 1.0), synth_series, rate_cap=0.5)
        assert tr.borrow_rate.max() == 0.5

    def test_empty(self):
        with pytest.raises(EmptySeries):
            replay_policy(zero_policy, FeatureSeries("p", []))

    def test_uses_state_of_landing_day(self, synth_series):
        seen = []
        replay_policy(lambda s, r: (seen.append(s.copy()), (0.0, 0.0))[1], synth_series)
        np.testing.assert_array_equal(np.array(seen), synth_series.matrix()[1:])

    def test_bundle(self, synth_series, synth_dataset):
        bundle, _ = train(synth_dataset, TrainConfig(algorithm="bc", steps=5, hidden_dims=(8, 8)))
        tr = replay_policy(bundle, synth_series)
        assert tr.source == "policy:bc" and len(tr) == len(synth_series)
        assert ((tr.borrow_rate >= 0) & (tr.borrow_rate <= 1)).all()

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.1, 10.0), st.integers(0, 1000))
    def test_scaling_property(self, k, seed):
        from lendrl.synth import generate_snapshots
        from lendrl.ingest import build_feature_series
        series = build_feature_series(generate_snapshots(30, seed=7))
        deltas = np.random.default_rng(seed).normal(0, 0.01, size=(len(series), 2))
        counter = iter(range(1, len(series)))
        base = replay_policy(lambda s, r, it=iter(range(1, len(series))): deltas[next(it)], series, rate_cap=None)
        scaled = replay_policy(lambda s, r, it=counter: k * deltas[next(it)], series, rate_cap=None)
        for rt in ("borrow", "liquidity"):
            assert rate_change_volatility(scaled.rate(rt)) == pytest.approx(k * rate_change_volatility(base.rate(rt)),
                                                                            rel=1e-9)


class TestVolatility:
    def test_constant(self):
        assert rate_change_volatility([0.03] * 10) == 0.0

    def test_arithmetic(self):
        assert rate_change_volatility([0.01, 0.02, 0.01]) == pytest.approx(0.01, abs=1e-15)

    def test_short(self):
        with pytest.raises(SeriesTooShort):
            rate_change_volatility([0.1])

    def test_comparison(self):
        assert volatility_comparison(0.02, 0.02) == 0.0
        assert volatility_comparison(3.31e-2, 3.33e-2) == pytest.approx(0.6042296, abs=1e-6)
        with pytest.raises(ZeroBaseline):
            volatility_comparison(0.0, 0.1)

    def test_row_format(self):
        row = format_volatility_row("V2-WETH", "borrow", 3.31e-2, 3.33e-2)
        assert row == "V2-WETH | Borrow Rate | 3.31E-02 | 3.33E-02 | +0.604%"
        assert "+0.73%" in FOOTER and "+0.604%" in FOOTER


class TestStress:
    def test_full_range_equals_global(self):
        rng = np.random.default_rng(0)
        a, b = traj(rng.random(50), "recorded"), traj(rng.random(50), "policy:x")
        w = StressWindow("all", a.dates[0], a.dates[-1])
        rows = stress_report(a, b, [w])
        glob = volatility_table(a, b)
        for r, g in zip(rows, glob):
            for key in ("baseline_std", "candidate_std", "percent_change"):
                assert abs(r[key] - g[key]) <= 1e-12

    def test_outside_range(self):
        a = traj(np.linspace(0, 1, 10))
        with pytest.raises(EmptyWindow):
            stress_report(a, a, [StressWindow("later", date(2030, 1, 1), date(2030, 2, 1))])

    def test_window_validation(self):
        with pytest.raises(ValueError):
            StressWindow("bad", date(2024, 2, 1), date(2024, 1, 1))

    def test_defaults(self):
        labels = [w.label for w in DEFAULT_STRESS_WINDOWS]
        assert labels[:3] == ["2022/2/1--2022/10/31", "2024/1/1--2024/12/31", "2024/4/1--2024/10/31"]
        assert DEFAULT_STRESS_WINDOWS[0].start == date(2022, 2, 1)
        assert DEFAULT_STRESS_WINDOWS[0].end == date(2022, 10, 31)
        assert any("FTX" in s for s in labels) and any("USDC" in s for s in labels)

    def test_window_round_trip(self):
        for w in DEFAULT_STRESS_WINDOWS:
            assert StressWindow.from_dict(w.to_dict()) == w


class TestMagnitude:
    def test_constant(self):
        m = magnitude_distribution([0.05] * 11)
        assert m["zero"] == 10 and sum(m["counts"]) == 0

    def test_decade_buckets(self):
        m = magnitude_distribution([0.0, 1e-3, 1.1e-2], edges=[-4, -3, -2, -1])
        assert m["counts"] == [0, 1, 1]

    def test_bad_bins(self):
        with pytest.raises(BadBins):
            magnitude_distribution([0, 1], edges=[-2, -3])
        with pytest.raises(BadBins):
            magnitude_distribution([0, 1], edges=[-2])

    @given(st.lists(st.floats(0, 2), min_size=2, max_size=60))
    def test_conservation(self, xs):
        m = magnitude_distribution(xs)
        assert sum(m["counts"]) + m["zero"] + m["below"] + m["above"] == len(xs) - 1


class TestYield:
    def test_constant(self):
        y = yield_distribution([0.04] * 7)["natural"]
        assert all(y[k] == pytest.approx(0.04, abs=1e-17) for k in ("q05", "q25", "q50", "q75", "q95"))

    def test_median(self):
        assert yield_distribution([1, 2, 3, 4, 5])["natural"]["q50"] == 3

    def test_zeros_excluded_from_log(self):
        y = yield_distribution([0.0, 0.01, 0.1])
        assert y["zero_count"] == 1 and y["log10"]["min"] == pytest.approx(-2)
        assert yield_distribution([0.0, 0.0])["log10"] is None

    def test_empty(self):
        with pytest.raises(EmptySeries):
            yield_distribution([])


class TestReport:
    def test_full_report(self, synth_series):
        rec = recorded_trajectory(synth_series)
        base = baseline_trajectory(synth_series, P)
        cand = replay_policy(RuleBasedPolicy(P), synth_series, source="policy:rule")
        windows = [StressWindow("all", rec.dates[0], rec.dates[-1]),
                   StressWindow("never", date(2001, 1, 1), date(2001, 2, 1))]
        rep = evaluate(rec, cand, windows, extra=(base,))
        assert rep.skipped_windows == ["never"]
        assert len(rep.stress) == 2 and len(rep.volatility) == 2
        assert set(rep.magnitude) == {"recorded", "policy:rule", "rule_based"}
        for m in rep.magnitude.values():
            assert m["total"] == len(synth_series) - 1
        d = json.loads(rep.to_json())
        assert EvalReport(**d).to_json() == rep.to_json()
        buf = io.StringIO()
        rep.volatility_csv(buf)
        assert buf.getvalue().splitlines()[0] == "asset,rate_type,baseline_std,candidate_std,percent_change"
        buf = io.StringIO()
        trajectories_csv([rec, cand], buf)
        assert len(buf.getvalue().splitlines()) == len(synth_series) + 1
        assert "Borrow Rate" in rep.render()
