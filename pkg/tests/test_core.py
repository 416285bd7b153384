import numpy as np
import pytest

from dismob.core import (GridSpec, Trajectory, DisasterField, FlowMatrix,
                         aggregate_flow, aggregate_out_of_home_flow, daily_locations,
                         filter_users, infer_home, per_day_slices, radius_of_gyration,
                         stay_durations, travel_distance)
from dismob.errors import InvalidInputError


def grid(rows=4, cols=5, days=2, cell_km=1.0):
    return GridSpec(rows, cols, cell_km, 48, days, 30)


def traj(user, slots, locs):
    return Trajectory(user, np.asarray(slots), np.asarray(locs))


def dense_traj(user, locs, start=0):
    locs = np.asarray(locs)
    return Trajectory(user, np.arange(start, start + locs.size), locs)


class TestGridSpec:
    def test_invariants(self):
        g = grid()
        assert g.n_cells == 20
        assert g.n_slots == 96

    def test_slot_minutes_must_fill_day(self):
        with pytest.raises(InvalidInputError):
            GridSpec(2, 2, 1.0, 48, 1, 29)

    def test_zero_area_rejected(self):
        with pytest.raises(InvalidInputError):
            GridSpec(0, 5, 1.0, 48, 1, 30)

    def test_cell_centers_row_major(self):
        g = grid()
        assert np.allclose(g.cell_center_km(0), [0.5, 0.5])
        assert np.allclose(g.cell_center_km(5), [0.5, 1.5])  # row 1, col 0
        assert g.cell_distance_km(0, 1) == pytest.approx(1.0)


class TestTrajectory:
    def test_rejects_gaps(self):
        with pytest.raises(InvalidInputError):
            traj("u", [0, 2], [1, 1])

    def test_rejects_decreasing(self):
        with pytest.raises(InvalidInputError):
            traj("u", [2, 1], [1, 1])

    def test_rejects_empty(self):
        with pytest.raises(InvalidInputError):
            traj("u", [], [])

    def test_validate_against_names_user(self):
        t = dense_traj("u42", [25])
        with pytest.raises(InvalidInputError, match="u42"):
            t.validate_against(grid())


class TestAggregateFlow:
    def test_empty_set_is_zero(self):
        f = aggregate_flow([], grid())
        assert f.total() == 0.0
        assert f.shape == (20, 96)

    def test_single_trajectory_counts(self):
        f = aggregate_flow([traj("u", [0, 1], [3, 3])], grid())
        assert f.counts[3, 0] == 1 and f.counts[3, 1] == 1
        assert f.total() == 2

    def test_total_mass_matches_bruteforce_recount(self):
        rng = np.random.default_rng(7)
        g = grid()
        trajs = []
        for i in range(50):
            n = int(rng.integers(1, g.n_slots + 1))
            start = int(rng.integers(0, g.n_slots - n + 1))
            trajs.append(traj(f"u{i}", np.arange(start, start + n),
                              rng.integers(0, g.n_cells, size=n)))
        f = aggregate_flow(trajs, g)
        # independent counting pass
        brute = {}
        for t in trajs:
            for s, l in zip(t.slots.tolist(), t.locs.tolist()):
                brute[(l, s)] = brute.get((l, s), 0) + 1
        assert f.total() == sum(len(t.slots) for t in trajs)
        for (l, s), c in brute.items():
            assert f.counts[l, s] == c

    def test_column_sums_equal_active_users(self):
        g = grid()
        trajs = [dense_traj(f"u{i}", np.zeros(g.n_slots, dtype=int)) for i in range(4)]
        f = aggregate_flow(trajs, g)
        assert np.all(f.counts.sum(axis=0) == 4)

    def test_out_of_range_names_user(self):
        with pytest.raises(InvalidInputError, match="bad"):
            aggregate_flow([traj("bad", [0], [99])], grid())


class TestTravelDistance:
    def test_stationary_is_zero(self):
        assert travel_distance(dense_traj("u", [3, 3, 3]), grid()) == 0.0

    def test_adjacent_cells(self):
        assert travel_distance(dense_traj("u", [0, 1]), grid()) == pytest.approx(1.0)

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(3)
        g = grid()
        locs = rng.integers(0, g.n_cells, size=5)
        t = dense_traj("u", locs)
        expected = 0.0
        for a, b in zip(locs[:-1], locs[1:]):
            ra, ca = divmod(int(a), g.cols)
            rb, cb = divmod(int(b), g.cols)
            expected += np.hypot(ra - rb, ca - cb) * g.cell_km
        assert travel_distance(t, g) == pytest.approx(expected, rel=1e-12)

    def test_translation_invariance(self):
        g = GridSpec(6, 6, 1.0, 48, 1, 30)
        locs = np.array([0, 1, 2, 8, 14])
        shifted = locs + 6 + 1  # one row down, one col right
        a = travel_distance(dense_traj("u", locs), g)
        b = travel_distance(dense_traj("v", shifted), g)
        assert a == pytest.approx(b)


class TestRadiusOfGyration:
    def test_single_location(self):
        assert radius_of_gyration(dense_traj("u", [7, 7]), grid()) == 0.0

    def test_symmetric_two_points(self):
        # cells 0 and 2 on one row: centers 1 km either side of the centroid
        r = radius_of_gyration(dense_traj("u", [0, 2]), grid())
        assert r == pytest.approx(1.0)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(11)
        g = grid()
        locs = rng.integers(0, g.n_cells, size=10)
        t = dense_traj("u", locs)
        pts = np.array([divmod(int(l), g.cols) for l in locs], dtype=float)
        pts = (pts[:, ::-1] + 0.5) * g.cell_km
        centroid = pts.mean(axis=0)
        rms = np.sqrt(np.mean(((pts - centroid) ** 2).sum(axis=1)))
        assert radius_of_gyration(t, g) == pytest.approx(rms, rel=1e-12)


class TestStayDurations:
    def test_single_run(self):
        assert stay_durations(dense_traj("u", [5, 5, 5])) == [3]

    def test_alternation(self):
        assert stay_durations(dense_traj("u", [1, 2, 1])) == [1, 1, 1]

    def test_durations_sum_to_length(self):
        rng = np.random.default_rng(5)
        locs = rng.integers(0, 4, size=48)
        assert sum(stay_durations(dense_traj("u", locs))) == 48


class TestDailyLocations:
    def test_all_day_single_cell(self):
        g = grid(days=1)
        assert daily_locations(dense_traj("u", np.full(48, 9, dtype=int)), g) == [1]

    def test_two_days(self):
        g = grid(days=2)
        locs = np.concatenate([np.array([1, 2] * 24), np.full(48, 3)])
        assert daily_locations(dense_traj("u", locs), g) == [2, 1]

    def test_matches_set_cardinality_oracle(self):
        rng = np.random.default_rng(9)
        g = grid(days=2)
        locs = rng.integers(0, g.n_cells, size=g.n_slots)
        t = dense_traj("u", locs)
        expected = [len(set(locs[:48].tolist())), len(set(locs[48:].tolist()))]
        assert daily_locations(t, g) == expected


class TestFilterUsers:
    def test_threshold_zero_is_identity(self):
        g = grid()
        trajs = [dense_traj("a", [0, 1, 2]), dense_traj("b", [3])]
        assert filter_users(trajs, g, 0) == trajs

    def test_four_records_filtered_at_threshold_five(self):
        g = grid()
        kept = filter_users([dense_traj("few", [0, 1, 2, 3])], g, 5)
        assert kept == []

    def test_matches_per_day_count_oracle(self):
        rng = np.random.default_rng(13)
        g = grid(days=2)
        trajs = []
        for i in range(30):
            n = int(rng.integers(1, g.n_slots + 1))
            start = int(rng.integers(0, g.n_slots - n + 1))
            trajs.append(traj(f"u{i}", np.arange(start, start + n),
                              rng.integers(0, g.n_cells, size=n)))
        kept = filter_users(trajs, g, 5)
        expected = []
        for t in trajs:
            per_day = {}
            for s in t.slots.tolist():
                per_day[s // 48] = per_day.get(s // 48, 0) + 1
            if all(v >= 5 for v in per_day.values()):
                expected.append(t.user_id)
        assert [t.user_id for t in kept] == expected

    def test_idempotent(self):
        rng = np.random.default_rng(17)
        g = grid(days=2)
        trajs = []
        for i in range(20):
            n = int(rng.integers(1, 20))
            start = int(rng.integers(0, g.n_slots - n + 1))
            trajs.append(traj(f"u{i}", np.arange(start, start + n),
                              rng.integers(0, g.n_cells, size=n)))
        once = filter_users(trajs, g, 5)
        twice = filter_users(once, g, 5)
        assert [t.user_id for t in once] == [t.user_id for t in twice]


class TestDisasterField:
    def test_rejects_nonzero_before_onset(self):
        bad = np.zeros((4, 10))
        bad[0, 1] = 1.0
        with pytest.raises(InvalidInputError):
            DisasterField(bad, onset_slot=3)

    def test_rejects_negative(self):
        with pytest.raises(InvalidInputError):
            DisasterField(-np.ones((2, 2)), onset_slot=0)


class TestHomesAndOutOfHome:
    def test_infer_home_prefers_night_mode(self):
        g = grid(days=1)
        locs = np.full(48, 2)
        locs[15:43] = 7  # day at work cell 7, nights at 2
        assert infer_home(dense_traj("u", locs), g) == 2

    def test_out_of_home_excludes_home_points(self):
        g = grid(days=1)
        locs = np.full(48, 2)
        locs[20:30] = 7
        f = aggregate_out_of_home_flow([dense_traj("u", locs)], g, {"u": 2})
        assert f.total() == 10
        assert f.counts[7].sum() == 10

    def test_per_day_slices_cover(self):
        g = grid(days=2)
        t = dense_traj("u", np.arange(96) % 20)
        pieces = per_day_slices(t, g)
        assert len(pieces) == 2
        assert sum(len(p) for p in pieces) == 96


class TestFlowMatrixType:
    def test_rejects_negative_counts(self):
        with pytest.raises(InvalidInputError):
            FlowMatrix(-np.ones((2, 2)))
