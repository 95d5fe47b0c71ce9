import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tutormotion.analysis import (
    STAT_NAMES,
    MotionStats,
    ablation_report,
    act_stats,
    compute_stats,
    normalize_table,
    pairwise_distances,
    render_heatmaps,
)
from tutormotion.bvh import JointTrajectory

# reference normalized rows per act (amplitude, velocity, jerk, energy, range)
REFERENCE_ROWS = {
    "explain": (1.00, 1.00, 1.00, 1.00, 1.00),
    "checkin": (0.50, 0.50, 0.14, 0.07, 0.80),
    "challenge": (0.47, 0.47, 0.04, 0.02, 0.84),
    "neutral": (0.45, 0.45, 0.14, 0.04, 0.85),
    "praise": (0.34, 0.34, 0.03, 0.02, 0.90),
    "unclear": (0.61, 0.61, 0.04, 0.03, 0.53),
}


def line(v, fps, n=50, joints=1):
    t = np.arange(n) / fps
    p = np.zeros((n, joints, 3))
    p[:, :, 0] = (v * t)[:, None]
    return p


class TestOracles:
    def test_static_clip_is_all_zero(self):
        p = np.broadcast_to(np.random.default_rng(0).normal(size=(1, 4, 3)), (30, 4, 3))
        s = compute_stats(p, fps=30)
        assert s.as_array().tolist() == [0.0] * 5

    def test_exact_line(self):
        # positions 0.5 k are exact in binary, so every difference is exact too
        s = compute_stats(line(2.0, fps=4.0), fps=4.0)
        assert s.jerk == 0.0
        assert s.velocity == 2.0
        assert s.energy == 4.0
        assert s.amplitude == 0.5

    @pytest.mark.parametrize("v, fps", [(0.7, 30.0), (13.1, 120.0), (0.01, 25.0)])
    def test_general_line(self, v, fps):
        s = compute_stats(line(v, fps, joints=3), fps=fps)
        assert abs(s.velocity - v) < 1e-9
        assert s.jerk < 1e-6 * v * fps ** 2
        assert s.energy == pytest.approx(v * v, rel=1e-9)
        assert s.range == pytest.approx(v * 49 / fps, rel=1e-12)

    @pytest.mark.parametrize("A, f", [(1.0, 1.0), (3.0, 0.5), (0.2, 2.0)])
    def test_sinusoid_jerk(self, A, f):
        fps, w = 100.0, 2 * math.pi * f
        t = np.arange(int(4 * fps / f) + 1) / fps
        p = np.zeros((t.size, 1, 3))
        p[:, 0, 1] = A * np.sin(w * t)
        s = compute_stats(p, fps=fps)
        assert s.jerk == pytest.approx(A * w ** 3 / math.sqrt(2), rel=0.02)

    def test_trajectory_input_carries_fps(self):
        traj = JointTrajectory(line(1.0, 10.0), ("a",), fps=10.0)
        assert compute_stats(traj).velocity == pytest.approx(1.0)

    def test_range_modes(self):
        p = np.zeros((10, 2, 3))
        p[:, 0, 0] = np.arange(10)
        p[:, 1, 0] = 2 * np.arange(10)
        assert compute_stats(p, 1.0).range == pytest.approx(13.5)
        assert compute_stats(p, 1.0, range_mode="max").range == pytest.approx(18.0)

    def test_errors(self):
        with pytest.raises(ValueError):
            compute_stats(np.zeros((3, 1, 3)), 30)
        with pytest.raises(ValueError):
            compute_stats(np.zeros((10, 1, 3)), 0)
        with pytest.raises(ValueError):
            compute_stats(np.zeros((10, 1, 3)), 30, range_mode="median")


class TestInvariances:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 10.0))
    def test_scale_equivariance(self, seed, k):
        p = np.cumsum(np.random.default_rng(seed).normal(size=(40, 3, 3)), axis=0)
        a = compute_stats(p, 30).as_array()
        b = compute_stats(k * p, 30).as_array()
        np.testing.assert_allclose(b, a * np.array([k, k, k, k * k, k]), rtol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_time_reversal(self, seed):
        p = np.cumsum(np.random.default_rng(seed).normal(size=(40, 2, 3)), axis=0)
        a = compute_stats(p, 30)
        b = compute_stats(p[::-1], 30)
        for name in ("amplitude", "jerk", "energy", "range"):
            assert getattr(b, name) == pytest.approx(getattr(a, name), rel=1e-12)

    def test_normalized_table_scale_invariant(self):
        rng = np.random.default_rng(3)
        clips = {a: [np.cumsum(rng.normal(scale=s, size=(30, 2, 3)), axis=0)] for a, s in
                 (("explain", 2.0), ("praise", 0.5), ("neutral", 1.0))}
        t1 = normalize_table(act_stats(clips, 30))
        t2 = normalize_table(act_stats({a: [5 * c[0]] for a, c in clips.items()}, 30))
        np.testing.assert_allclose(t1.values, t2.values, rtol=1e-12)


class TestNormalization:
    def reference_raw(self):
        scale = np.array([3.7, 111.0, 4.2e4, 1.3e4, 61.0])
        return {a: MotionStats(*(np.array(r) * scale)) for a, r in REFERENCE_ROWS.items()}

    def test_every_column_max_is_one(self):
        t = normalize_table(self.reference_raw())
        np.testing.assert_allclose(t.values.max(axis=0), 1.0, rtol=0, atol=0)
        assert set(t.normalizer) == {"explain"}

    def test_checkin_row_reproduced(self):
        t = normalize_table(self.reference_raw())
        assert np.round(t.row("checkin"), 2).tolist() == [0.50, 0.50, 0.14, 0.07, 0.80]
        np.testing.assert_allclose(t.row("checkin"), REFERENCE_ROWS["checkin"], rtol=1e-14)
        for act, row in REFERENCE_ROWS.items():
            np.testing.assert_allclose(t.row(act), row, rtol=1e-14)

    def test_all_zero_column_warns(self):
        stats = {"a": (1, 1, 0, 1, 1), "b": (2, 2, 0, 2, 2)}
        with pytest.warns(RuntimeWarning, match="jerk"):
            t = normalize_table(stats)
        assert t.normalizer[2] is None and np.all(t.values[:, 2] == 0)

    def test_csv(self, tmp_path):
        normalize_table(self.reference_raw()).to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "act," + ",".join(STAT_NAMES)
        assert lines[2] == "checkin,0.500000,0.500000,0.140000,0.070000,0.800000"


class TestDistances:
    def reference(self):
        return normalize_table(REFERENCE_ROWS)

    def test_explain_praise(self):
        D = pairwise_distances(self.reference())
        i, j = D.acts.index("explain"), D.acts.index("praise")
        oracle = math.sqrt(2 * 0.66 ** 2 + 0.97 ** 2 + 0.98 ** 2 + 0.10 ** 2)
        assert oracle == pytest.approx(1.66808, abs=5e-6)
        assert D.D[i, j] == pytest.approx(oracle, rel=1e-12)

    def test_metric_properties(self):
        D = pairwise_distances(self.reference()).D
        assert np.all(np.diag(D) == 0) and np.array_equal(D, D.T)
        n = D.shape[0]
        for a in range(n):
            for b in range(n):
                assert np.all(D[a, b] <= D[a] + D[:, b] + 1e-12)

    def test_separation(self):
        dm = pairwise_distances(self.reference())
        n = len(dm.acts)
        assert dm.separation() == pytest.approx(dm.D.sum() / (n * (n - 1)))
        single = pairwise_distances(normalize_table({"x": (1, 1, 1, 1, 1)}))
        assert single.separation() == 0.0

    def test_heatmap_png(self, tmp_path):
        dm = pairwise_distances(self.reference())
        path = render_heatmaps([("reference", dm)], tmp_path / "h.png")
        assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        again = render_heatmaps([("reference", dm)], tmp_path / "h2.png")
        assert again.read_bytes() == path.read_bytes()


class TestAblationReport:
    def corpus(self, rng, spread):
        return {a: [np.cumsum(rng.normal(scale=1 + spread * k, size=(40, 2, 3)), axis=0)
                    for _ in range(3)] for k, a in enumerate(("explain", "neutral", "praise"))}

    def test_separated_corpus_wins(self, tmp_path):
        rng = np.random.default_rng(0)
        r = ablation_report(self.corpus(rng, 0.0), self.corpus(rng, 2.0), fps=30,
                            out_dir=tmp_path)
        assert r.conditioned_separation > r.baseline_separation
        assert r.separation_delta > 0
        for name in ("baseline_stats.csv", "conditioned_distances.csv", "separation.csv",
                     "distances.png"):
            assert (tmp_path / name).exists()

    def test_missing_acts_are_noted(self):
        rng = np.random.default_rng(1)
        base = self.corpus(rng, 0.0)
        cond = self.corpus(rng, 1.0)
        del cond["praise"]
        r = ablation_report(base, cond, fps=30)
        assert r.acts == ("explain", "neutral")
        assert any("praise" in n for n in r.notes)
