import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from zclipkit.metrics import (
    CompareError,
    clip_fraction_curve,
    compare,
    excursion_count,
    mean_abs_diff,
    read_records,
    reference_pass,
    run_summary,
    sliding_normality,
    write_comparison,
    write_records,
)
from zclipkit.policies import FixedClip, NoClip, StepRecord, ZClip, run_policy
from zclipkit.synth import Spike, StreamSpec, drifting_example, generate


def _rec(step, clipped):
    return StepRecord(step, 1.0, 1.0, 0, 0, 0, clipped, 1.0)


@pytest.fixture(scope="module")
def spiky():
    return generate(StreamSpec(length=4000, seed=7, regime="spiky", spikes=(Spike(rate=0.01, magnitude=6.0),)))


class TestClipFraction:
    def test_none_clipped(self):
        assert all(f == 0 for _, f in clip_fraction_curve([_rec(i, False) for i in range(1, 50)], 10))

    def test_all_clipped(self):
        assert all(f == 1 for _, f in clip_fraction_curve([_rec(i, True) for i in range(1, 50)], 10))

    @given(st.lists(st.booleans(), min_size=1, max_size=200), st.integers(1, 40))
    def test_exact_rationals(self, flags, window):
        curve = clip_fraction_curve([_rec(i + 1, f) for i, f in enumerate(flags)], window)
        for t, (step, frac) in enumerate(curve):
            seen = flags[max(0, t + 1 - window) : t + 1]
            assert step == t + 1
            assert frac == float(Fraction(sum(seen), len(seen)))

    def test_rejects(self):
        with pytest.raises(ValueError):
            clip_fraction_curve([], 10)
        with pytest.raises(ValueError):
            clip_fraction_curve([_rec(1, True)], 0)

    def test_lower_threshold_clips_more_pointwise(self, spiky):
        low = clip_fraction_curve(run_policy(ZClip(z_thres=1.5), spiky), 500)
        high = clip_fraction_curve(run_policy(ZClip(z_thres=4.0), spiky), 500)
        assert all(a >= b for (_, a), (_, b) in zip(low[25:], high[25:]))


class TestCompare:
    def test_none_counts_raw_excursions(self, spiky):
        (summary,) = compare([NoClip()], spiky)
        assert summary.clip_fraction == 0
        assert summary.spike_count == excursion_count(spiky, ZClip())
        assert summary.spike_count > 10

    def test_zclip_removes_excursions(self, spiky):
        (summary,) = compare([ZClip()], spiky)
        assert summary.spike_count == 0
        assert summary.clip_fraction > 0

    def test_drifting_scenario(self):
        stream = generate(drifting_example())
        zs, fx = compare(["zclip:reciprocal:2.5:0.97", "fixed:1.0"], stream)
        late = len(stream) - len(stream) // 20
        zrec, _ = run_summary("zclip:reciprocal:2.5:0.97", stream)
        frec, _ = run_summary("fixed:1.0", stream)
        assert zrec[late].was_clipped and not frec[late].was_clipped
        assert zs.label == "zclip:reciprocal:2.5:0.97" and fx.label == "fixed:1.0"

    def test_deterministic_and_order_stable(self, spiky):
        a = compare([ZClip(), FixedClip(1.0)], spiky)
        b = compare([FixedClip(1.0), ZClip()], spiky)
        assert a[0] == b[1] and a[1] == b[0]

    def test_error_names_policy(self):
        with pytest.raises(CompareError, match="policy fixed:1.0"):
            compare([FixedClip(1.0)], [1.0, -1.0])

    def test_empty_stream(self):
        with pytest.raises(ValueError):
            compare([NoClip()], [])

    def test_reference_pass_skips_nonfinite(self):
        recs = reference_pass([1.0, math.nan, 2.0], ZClip(warmup=2))
        assert [r.step for r in recs] == [1, 3]

    def test_summary_json(self, spiky):
        _, s = run_summary(ZClip(), spiky, normality_window=135)
        d = json.loads(json.dumps(s.to_dict()))
        assert d["label"] == "zclip:reciprocal:2.5:0.97"
        assert d["mu_curve"][0] is None  # warm-up has no statistics yet
        assert len(d["normality_windows"]) == 4000 // 135


class TestNormality:
    def test_gaussian_windows_pass(self):
        stream = generate(StreamSpec(length=135 * 100, seed=0, noise_sd=0.1))
        wins = sliding_normality(stream)
        assert len(wins) == 100
        assert sum(w.p_like > 0.05 for w in wins) >= 90

    def test_heavy_early_segment_fails_more(self):
        stream = generate(StreamSpec(length=135 * 40, seed=1, noise="lognormal", heavy_tail_until=135 * 20))
        wins = sliding_normality(stream)
        early = sum(w.p_like < 0.05 for w in wins[:20])
        late = sum(w.p_like < 0.05 for w in wins[20:])
        assert early > late + 10

    def test_constant_stream_errors_per_window(self):
        wins = sliding_normality([1.0] * 300, 100)
        assert len(wins) == 3
        assert all(w.error and "zero-variance" in w.error for w in wins)

    def test_window_too_long(self):
        with pytest.raises(ValueError, match="exceeds"):
            sliding_normality([1.0] * 50, 135)

    def test_stride(self):
        wins = sliding_normality(np.random.default_rng(0).normal(size=200).tolist(), 100, stride=50)
        assert [(w.start, w.end) for w in wins] == [(0, 100), (50, 150), (100, 200)]


class TestSmoothness:
    def test_mean_abs_diff(self):
        assert mean_abs_diff([1.0, 2.0, 0.0, math.nan]) == 1.5
        assert mean_abs_diff([1.0]) == 0.0

    def test_higher_alpha_smoother(self, spiky):
        mads = [mean_abs_diff(run_summary(ZClip(alpha=a), spiky)[1].mu_curve) for a in (0.90, 0.95, 0.99)]
        assert mads[0] > mads[1] > mads[2]


class TestFiles:
    def test_records_roundtrip(self, tmp_path, spiky):
        recs = run_policy(ZClip(), spiky[:300]) + [
            StepRecord(301, math.inf, 0.0, math.nan, math.nan, math.nan, False, math.nan, math.nan, False)
        ]
        write_records(tmp_path / "r.csv", recs)
        back = read_records(tmp_path / "r.csv")
        assert len(back) == len(recs)
        for a, b in zip(recs, back):
            for f in ("step", "raw_norm", "clipped_norm", "mu", "sigma", "z", "update_value", "threshold"):
                x, y = getattr(a, f), getattr(b, f)
                assert (x == y) or (math.isnan(x) and math.isnan(y))
            assert (a.was_clipped, a.valid) == (b.was_clipped, b.valid)

    def test_bad_columns(self, tmp_path):
        (tmp_path / "r.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError, match="expected record columns"):
            read_records(tmp_path / "r.csv")

    def test_comparison_layout(self, tmp_path, spiky):
        write_comparison(tmp_path / "c.csv", compare([NoClip(), ZClip()], spiky))
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "policy,spike_count,final_loss,clip_fraction"
        assert len(lines) == 3
