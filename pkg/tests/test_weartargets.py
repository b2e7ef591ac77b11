"""Wear-target derivation against brute-force summation oracles."""

import numpy as np
import pytest

from wearbench import weartargets as wt


def flat_curve(value, lo=0.0, hi=1350.0):
    d = np.linspace(lo, hi, 272)
    return wt.WearCurve(d, np.full_like(d, float(value)))


def oracle_targets(curve, spacing=0.1):
    """Dense brute-force zone statistics, independent of compute_targets."""
    lo, hi = curve.distance_um[0], curve.distance_um[-1]
    grid = np.arange(lo, hi + spacing / 2, spacing)
    vb = np.interp(grid, curve.distance_um, curve.vb_um)
    out = []
    for z in range(3):
        m = (grid >= 450.0 * z) & (grid <= 450.0 * (z + 1))
        out.append(vb[m].mean())
    for z in range(3):
        m = (grid >= 450.0 * z) & (grid <= 450.0 * (z + 1))
        out.append(vb[m].max())
    out.append(vb.mean())
    out.append(vb.max())
    return np.array(out)


def random_piecewise_curve(rng):
    """Random wear profile; knots at least 25 um apart so a dense sampling
    oracle resolves every peak well inside the 0.5 um tolerance."""
    end = 1350.0 + rng.uniform(10.0, 150.0)
    d = [0.0]
    while d[-1] < end:
        d.append(d[-1] + rng.uniform(25.0, 160.0))
    d = np.array(d[:-1])
    d = np.append(d[d <= end - 25.0], end)
    return wt.WearCurve(d, rng.uniform(0.0, 150.0, d.size))


class TestWearCurve:
    def test_decreasing_distances_rejected(self):
        with pytest.raises(wt.MeasurementError):
            wt.WearCurve(np.array([0.0, 5.0, 5.0]), np.zeros(3))

    def test_negative_vb_rejected(self):
        with pytest.raises(wt.MeasurementError):
            wt.WearCurve(np.array([0.0, 10.0]), np.array([1.0, -0.5]))


class TestAverageEdges:
    def test_four_identical_curves(self):
        c = flat_curve(12.0)
        avg = wt.average_edges([c] * 4)
        np.testing.assert_allclose(avg.vb_um, 12.0)

    def test_mean_of_constants(self):
        curves = [flat_curve(v) for v in (10, 20, 30, 40)]
        avg = wt.average_edges(curves)
        np.testing.assert_allclose(avg.vb_um, 25.0)

    def test_ramp_mean_oracle(self):
        d = np.linspace(0, 1350, 136)
        ramp_up = wt.WearCurve(d, np.linspace(0, 100, 136))
        flat100 = wt.WearCurve(d, np.full(136, 100.0))
        zero = wt.WearCurve(d, np.zeros(136))
        avg = wt.average_edges([ramp_up, flat100, zero, zero])
        # pointwise-mean oracle on the grid: (ramp + 100 + 0 + 0) / 4
        np.testing.assert_allclose(
            avg.vb_um, (avg.sample(avg.distance_um) * 0 + np.interp(
                avg.distance_um, d, np.linspace(0, 100, 136)) + 100.0) / 4)
        assert avg.vb_um[0] == pytest.approx(25.0)
        assert avg.vb_um[-1] == pytest.approx(50.0)

    def test_wrong_count_rejected(self):
        with pytest.raises(wt.MeasurementError):
            wt.average_edges([flat_curve(1.0)] * 3)

    def test_disjoint_spans_rejected(self):
        a = flat_curve(1.0, 0, 500)
        b = flat_curve(1.0, 900, 1400)
        with pytest.raises(wt.MeasurementError):
            wt.average_edges([a, a, b, b])

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        d = np.linspace(0, 1400, 141)
        curves = [wt.WearCurve(d, rng.uniform(0, 50, 141)) for _ in range(4)]
        base = wt.average_edges(curves)
        for perm in ([3, 2, 1, 0], [1, 3, 0, 2]):
            other = wt.average_edges([curves[i] for i in perm])
            np.testing.assert_array_equal(base.vb_um, other.vb_um)


class TestComputeTargets:
    def test_constant_curve(self):
        t = wt.compute_targets(flat_curve(100.0))
        np.testing.assert_allclose(t.as_array(), 100.0)

    def test_zone1_step_curve(self):
        # 50 um on zone 1, 0 elsewhere; direct summation oracle
        d = np.array([0.0, 449.9, 450.0, 1350.0])
        v = np.array([50.0, 50.0, 0.0, 0.0])
        t = wt.compute_targets(wt.WearCurve(d, v))
        assert t.vb_mean_zone[0] == pytest.approx(50.0, abs=0.5)
        assert t.vb_max_zone[0] == pytest.approx(50.0, abs=0.5)
        assert t.vb_mean_zone[1] == pytest.approx(0.0, abs=0.5)
        assert t.vb_mean_zone[2] == pytest.approx(0.0, abs=0.5)
        assert t.vb_mean == pytest.approx(50.0 / 3, abs=0.5)
        assert t.vb_max == pytest.approx(50.0, abs=0.5)

    def test_linear_ramp_closed_form(self):
        d = np.linspace(0, 1350, 1351)
        t = wt.compute_targets(wt.WearCurve(d, d / 10.0))
        assert t.vb_max == pytest.approx(135.0, abs=0.5)
        assert t.vb_mean == pytest.approx(67.5, abs=0.5)
        assert t.vb_max_zone[0] == pytest.approx(45.0, abs=0.5)

    def test_insufficient_coverage_rejected(self):
        with pytest.raises(wt.CoverageError):
            wt.compute_targets(flat_curve(5.0, 0, 1200))
        with pytest.raises(wt.CoverageError):
            wt.compute_targets(flat_curve(5.0, 100, 1400))

    def test_scaling_property(self):
        rng = np.random.default_rng(8)
        d = np.sort(rng.uniform(0, 1400, 60))
        d[0], d[-1] = 0.0, 1400.0
        v = rng.uniform(0, 80, 60)
        base = wt.compute_targets(wt.WearCurve(d, v)).as_array()
        scaled = wt.compute_targets(wt.WearCurve(d, 3.5 * v)).as_array()
        np.testing.assert_allclose(scaled, 3.5 * base, rtol=1e-12)

    def test_global_max_equals_zone_max_on_exact_span(self):
        rng = np.random.default_rng(15)
        for _ in range(20):
            d = np.unique(np.concatenate([[0.0, 1350.0], rng.uniform(0, 1350, 30)]))
            v = rng.uniform(0, 120, d.size)
            t = wt.compute_targets(wt.WearCurve(d, v))
            assert t.vb_max == pytest.approx(max(t.vb_max_zone), rel=1e-12)

    def test_invariant_ordering(self):
        rng = np.random.default_rng(16)
        for _ in range(20):
            d = np.unique(np.concatenate([[0.0, 1400.0], rng.uniform(0, 1400, 40)]))
            v = rng.uniform(0, 100, d.size)
            t = wt.compute_targets(wt.WearCurve(d, v))
            for z in range(3):
                assert t.vb_max_zone[z] >= t.vb_mean_zone[z]
            assert t.vb_max >= t.vb_mean
            assert t.vb_max >= max(t.vb_max_zone) - 1e-12
            assert min(t.as_array()) >= 0.0

    def test_matches_brute_force_oracle_on_random_piecewise_linear(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            curve = random_piecewise_curve(rng)
            got = wt.compute_targets(curve).as_array()
            want = oracle_targets(curve)
            np.testing.assert_allclose(got, want, atol=0.5)


class TestCsvRoundTrip:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(31)
        d = np.linspace(0, 1350, 136)
        curves = [wt.WearCurve(d, rng.uniform(0, 60, 136)) for _ in range(4)]
        path = tmp_path / "wear.csv"
        wt.write_edge_curves(path, curves)
        back = wt.read_edge_curves(path)
        assert len(back) == 4
        for a, b in zip(curves, back):
            np.testing.assert_array_equal(a.distance_um, b.distance_um)
            np.testing.assert_array_equal(a.vb_um, b.vb_um)
