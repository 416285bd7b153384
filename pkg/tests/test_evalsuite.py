import numpy as np
import pytest

from dismob.core import GridSpec, Trajectory
from dismob.errors import InsufficientDataError, InvalidInputError
from dismob.evalsuite import (LN2, Distribution, MetricReport, behavior_report,
                              decay_metrics, decay_rate, histogram, jsd, mape,
                              peak_intensity_slot, top_intensity_cells,
                              trajectory_statistics)
from dismob.physics import DecayParams
from dismob.synthworld import (DisasterScenario, WorldConfig, build_city_dataset,
                               make_city)

GRID = GridSpec(5, 5, 1.0, 48, 2, 30)


def dense_traj(user, locs, start=0):
    locs = np.asarray(locs)
    return Trajectory(user, np.arange(start, start + locs.size), locs)


@pytest.fixture(scope="module")
def toy_city():
    cfg = WorldConfig(GRID, 120, 0.9, 0.25, 0.6, seed=29, name="eval")
    city = make_city(cfg)
    epi = int(np.argmax(city.attractiveness))
    scen = DisasterScenario(epi, 0.8, 1.6, 20, 50, DecayParams(0.7, 0.12, 2.0))
    return build_city_dataset(cfg, scen)


class TestHistogram:
    def test_point_mass(self):
        d = histogram([2.5] * 10, np.linspace(0, 5, 6))
        assert d.mass[2] == pytest.approx(1.0, abs=1e-6)
        assert d.mass.sum() == pytest.approx(1.0, abs=1e-9)

    def test_out_of_range_clamps_to_end_bins(self):
        d = histogram([-10.0, 10.0], np.linspace(0, 1, 3))
        assert d.mass[0] == pytest.approx(0.5, abs=1e-6)
        assert d.mass[-1] == pytest.approx(0.5, abs=1e-6)

    def test_uniform_samples_near_uniform(self):
        rng = np.random.default_rng(0)
        d = histogram(rng.uniform(0, 1, 20_000), np.linspace(0, 1, 11))
        assert np.all(np.abs(d.mass - 0.1) < 0.02)

    def test_empty_rejected(self):
        with pytest.raises(InsufficientDataError):
            histogram([], np.linspace(0, 1, 3))

    def test_mass_always_normalized(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            vals = rng.normal(size=int(rng.integers(1, 50)))
            d = histogram(vals, np.linspace(-3, 3, 13))
            assert abs(d.mass.sum() - 1.0) < 1e-9


class TestJSD:
    def edges(self, n):
        return np.arange(n + 1, dtype=float)

    def dist(self, mass):
        mass = np.asarray(mass, dtype=float)
        return Distribution(self.edges(len(mass)), mass / mass.sum())

    def test_identical_is_zero(self):
        d = self.dist([0.3, 0.7])
        assert jsd(d, d) == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_is_ln2(self):
        a = histogram([0.5], np.array([0.0, 1.0, 2.0]))
        b = histogram([1.5], np.array([0.0, 1.0, 2.0]))
        assert jsd(a, b) == pytest.approx(LN2, abs=1e-4)

    def test_hand_computed_case(self):
        a = self.dist([0.5, 0.5])
        b = self.dist([0.25, 0.75])
        # independent direct evaluation: 0.5*KL(a||m) + 0.5*KL(b||m), m=(a+b)/2
        assert jsd(a, b) == pytest.approx(0.033822, abs=1e-4)
        assert jsd(a, b) == pytest.approx(0.03383, abs=1e-4)

    def test_symmetry_bounds_on_random_simplex(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(2, 12))
            a = self.dist(rng.dirichlet(np.ones(n)))
            b = self.dist(rng.dirichlet(np.ones(n)))
            v = jsd(a, b)
            assert v == pytest.approx(jsd(b, a), rel=1e-12)
            assert -1e-12 <= v <= LN2 + 1e-12

    def test_zero_iff_equal(self):
        rng = np.random.default_rng(3)
        a = self.dist(rng.dirichlet(np.ones(6)))
        b = self.dist(rng.dirichlet(np.ones(6)))
        assert jsd(a, b) > 0
        assert jsd(a, a) == pytest.approx(0.0, abs=1e-12)

    def test_edge_mismatch_rejected(self):
        a = self.dist([0.5, 0.5])
        b = Distribution(np.array([0.0, 2.0, 4.0]), np.array([0.5, 0.5]))
        with pytest.raises(InvalidInputError):
            jsd(a, b)


class TestMape:
    def test_identity_zero(self):
        v, excluded = mape([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert v == 0.0 and excluded == 0

    def test_ten_percent_scaling(self):
        truth = np.array([1.0, 2.0, 4.0])
        v, _ = mape(1.1 * truth, truth)
        assert v == pytest.approx(10.0, rel=1e-12)

    def test_matches_independent_evaluation(self):
        rng = np.random.default_rng(4)
        truth = rng.uniform(0.5, 2.0, size=20)
        pred = truth + rng.normal(0, 0.2, size=20)
        v, _ = mape(pred, truth)
        expected = 100.0 * np.mean(np.abs(pred - truth) / truth)
        assert v == pytest.approx(expected, rel=1e-12)

    def test_zero_truth_excluded_and_counted(self):
        v, excluded = mape([1.0, 5.0], [0.0, 4.0])
        assert excluded == 1
        assert v == pytest.approx(25.0)

    def test_all_zero_truth_rejected(self):
        with pytest.raises(InsufficientDataError):
            mape([1.0], [0.0])


class TestBehaviorReport:
    def test_identical_sets_all_zero(self, toy_city):
        real = toy_city.subset(toy_city.disaster, toy_city.test_users)
        report = behavior_report(real, real, GRID)
        for key, value in report.items():
            assert value == pytest.approx(0.0, abs=1e-9), key

    def test_translation_invariant_statistics(self, toy_city):
        # shifting every location one cell right leaves all four statistics
        # unchanged (distances, radii, durations and counts are relative)
        real = list(toy_city.subset(toy_city.disaster, toy_city.test_users))
        g_wide = GridSpec(5, 6, 1.0, 48, 2, 30)
        def shift(t):
            rows, cols = np.divmod(t.locs, GRID.cols)
            return Trajectory(t.user_id, t.slots, rows * g_wide.cols + cols + 1)
        moved = [shift(t) for t in real]
        orig = [Trajectory(t.user_id, t.slots, t.locs // GRID.cols * g_wide.cols
                           + t.locs % GRID.cols) for t in real]
        report = behavior_report(orig, moved, g_wide)
        for key, value in report.items():
            assert value == pytest.approx(0.0, abs=1e-9), key

    def test_invariant_to_relabeling_and_order(self, toy_city):
        real = list(toy_city.subset(toy_city.disaster, toy_city.test_users))
        gen = list(toy_city.subset(toy_city.disaster, toy_city.val_users))
        renamed = [Trajectory(f"x{i}", t.slots, t.locs)
                   for i, t in enumerate(reversed(gen))]
        a = behavior_report(real, gen, GRID)
        b = behavior_report(real, renamed, GRID)
        for key in a:
            assert a[key] == pytest.approx(b[key], rel=1e-12)

    def test_empty_sets_rejected(self, toy_city):
        with pytest.raises(InsufficientDataError):
            behavior_report([], list(toy_city.disaster), GRID)


class TestDecayMetrics:
    def test_identity_gives_zero_mapes(self, toy_city):
        rate, speed = decay_metrics(
            list(toy_city.disaster), list(toy_city.disaster), list(toy_city.normal),
            toy_city.field, GRID, homes=toy_city.homes,
        )
        assert rate == pytest.approx(0.0, abs=1e-9)
        assert speed == pytest.approx(0.0, abs=1e-9)

    def test_unsuppressed_generation_scores_near_hundred(self, toy_city):
        # "generated" set with no disaster response at all: the normal set
        rate, speed = decay_metrics(
            list(toy_city.normal), list(toy_city.disaster), list(toy_city.normal),
            toy_city.field, GRID, homes=toy_city.homes,
        )
        identity_rate, identity_speed = 0.0, 0.0
        assert rate > 60.0  # rate ~0 against a strongly positive real rate
        assert speed == pytest.approx(100.0, abs=1e-6)
        assert rate > identity_rate and speed > identity_speed

    def test_peak_slot_and_top_cells(self, toy_city):
        t_star = peak_intensity_slot(toy_city.field)
        assert t_star == toy_city.field.onset_slot
        cells = top_intensity_cells(toy_city.field, t_star)
        assert cells.size >= 1
        col = toy_city.field.intensity[:, t_star]
        assert col[cells].min() >= np.quantile(col, 0.9)

    def test_decay_rate_on_half_suppressed_flow(self, toy_city):
        from dismob.core import aggregate_out_of_home_flow, FlowMatrix
        normal_out = aggregate_out_of_home_flow(toy_city.normal, GRID, toy_city.homes)
        half = FlowMatrix(normal_out.counts * 0.5)
        assert decay_rate(half, normal_out, toy_city.field) == pytest.approx(0.5)


class TestMetricReport:
    def test_bounds_enforced(self):
        with pytest.raises(InvalidInputError):
            MetricReport(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)  # above ln 2
        with pytest.raises(InvalidInputError):
            MetricReport(0.0, 0.0, 0.0, 0.0, np.inf, 0.0)

    def test_valid_report_roundtrips(self):
        r = MetricReport(0.1, 0.2, 0.3, 0.4, 12.0, 8.0)
        d = r.as_dict()
        assert d["jsd_distance"] == 0.1 and d["mape_decay_speed"] == 8.0


class TestTrajectoryStatistics:
    def test_distance_is_per_day(self):
        # one user, two days: day 1 walks, day 2 stays put
        locs = np.concatenate([np.tile([0, 1], 24), np.full(48, 3)])
        stats = trajectory_statistics([dense_traj("u", locs)], GRID)
        assert len(stats["distance"]) == 2
        assert stats["distance"][0] > 0
        assert stats["distance"][1] == 0.0
        assert len(stats["radius"]) == 1  # radius is per trajectory
