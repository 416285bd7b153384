import numpy as np
import pytest

from dismob.core import GridSpec, aggregate_out_of_home_flow
from dismob.errors import InvalidInputError
from dismob.physics import DecayParams, build_kernel, decay_ratio_matrix
from dismob.synthworld import (City, DisasterScenario, WorldConfig,
                               build_city_dataset, make_city, make_disaster,
                               make_splits, simulate_disaster, simulate_normal)

GRID = GridSpec(6, 6, 1.0, 48, 2, 30)


def world(seed=3, n_users=40, rho=0.3, **kw):
    defaults = dict(grid=GRID, n_users=n_users, home_work_fraction=0.85,
                    epr_rho=rho, epr_gamma=0.6, seed=seed, name="w")
    defaults.update(kw)
    return WorldConfig(**defaults)


def scenario(epicenter=14, truth=None, **kw):
    defaults = dict(epicenter=epicenter, peak_intensity=1.0, spatial_sigma_km=1.8,
                    onset_slot=20, duration_slots=50,
                    truth_decay=truth or DecayParams(0.6, 0.15, 2.0))
    defaults.update(kw)
    return DisasterScenario(**defaults)


class TestMakeCity:
    def test_single_cell_grid_normalizes(self):
        g = GridSpec(1, 1, 1.0, 48, 1, 30)
        city = make_city(world(grid=g, n_users=3))
        assert city.attractiveness.tolist() == [1.0]

    def test_deterministic_per_seed(self):
        a = make_city(world(seed=9))
        b = make_city(world(seed=9))
        assert np.array_equal(a.attractiveness, b.attractiveness)
        assert a.homes == b.homes and a.works == b.works

    def test_attractiveness_sums_to_one(self):
        city = make_city(world(grid=GridSpec(8, 8, 1.0, 48, 1, 30), seed=7))
        assert abs(city.attractiveness.sum() - 1.0) < 1e-12
        assert np.all(city.attractiveness > 0)

    def test_work_differs_from_home(self):
        city = make_city(world(n_users=60))
        assert all(city.works[u] != city.homes[u] for u in city.user_ids)


class TestMakeDisaster:
    def test_peak_at_epicenter_during_pulse(self):
        s = scenario(peak_intensity=2.5)
        field = make_disaster(s, GRID)
        assert field.intensity[s.epicenter, s.onset_slot] == pytest.approx(2.5)

    def test_zero_before_onset(self):
        field = make_disaster(scenario(), GRID)
        assert np.all(field.intensity[:, : scenario().onset_slot] == 0)

    def test_gaussian_falloff_at_sigma(self):
        s = scenario(epicenter=14, spatial_sigma_km=2.0, peak_intensity=3.0)
        field = make_disaster(s, GRID)
        # cell 16 is exactly 2 km from cell 14 (same row, two columns over)
        assert field.intensity[16, s.onset_slot] == pytest.approx(3.0 * np.exp(-0.5))

    def test_epicenter_outside_grid(self):
        with pytest.raises(InvalidInputError):
            make_disaster(scenario(epicenter=99), GRID)

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(InvalidInputError):
            scenario(spatial_sigma_km=0.0)


class TestSimulateNormal:
    def test_zero_exploration_stays_on_anchors(self):
        city = make_city(world(rho=0.0, n_users=10))
        for traj in simulate_normal(city):
            anchors = {city.homes[traj.user_id], city.works[traj.user_id]}
            assert set(traj.locs.tolist()) <= anchors

    def test_bit_identical_per_seed(self):
        cfg = world(seed=5, n_users=8)
        a = simulate_normal(make_city(cfg))
        b = simulate_normal(make_city(cfg))
        for ta, tb in zip(a, b):
            assert ta.user_id == tb.user_id
            assert np.array_equal(ta.locs, tb.locs)

    def test_dense_slot_coverage(self):
        city = make_city(world(n_users=5))
        for traj in simulate_normal(city):
            assert np.array_equal(traj.slots, np.arange(GRID.n_slots))

    def test_nights_at_home(self):
        city = make_city(world(n_users=6))
        night = GRID.is_night(np.arange(GRID.n_slots))
        for traj in simulate_normal(city):
            assert np.all(traj.locs[night] == city.homes[traj.user_id])

    def test_distinct_locations_grow_sublinearly(self):
        g = GridSpec(8, 8, 1.0, 48, 14, 30)
        cfg = world(grid=g, n_users=200, seed=31, rho=0.5)
        trajs = simulate_normal(make_city(cfg))
        mean_distinct = []
        for day in range(1, g.days + 1):
            upto = day * g.slots_per_day
            mean_distinct.append(
                np.mean([np.unique(t.locs[:upto]).size for t in trajs])
            )
        mean_distinct = np.array(mean_distinct)
        assert np.all(np.diff(mean_distinct) >= 0)  # monotone
        # concave growth: log-log slope clearly below linear
        days = np.arange(1, g.days + 1)
        slope = np.polyfit(np.log(days), np.log(mean_distinct), 1)[0]
        assert slope < 0.8


class TestSimulateDisaster:
    def test_zero_intensity_keeps_everything(self):
        city = make_city(world(n_users=8))
        normal = simulate_normal(city)
        s = scenario(peak_intensity=1e-12)
        # a numerically-zero field: H is 1 everywhere to double precision
        out = simulate_disaster(city, normal, s, GRID)
        for a, b in zip(normal, out):
            assert np.array_equal(a.locs, b.locs)

    def test_huge_k0_suppresses_everything_at_epicenter(self):
        city = make_city(world(n_users=30, seed=8))
        normal = simulate_normal(city)
        s = scenario(truth=DecayParams(1e12, 0.0, 2.0))
        out = simulate_disaster(city, normal, s, GRID)
        pulse = np.s_[s.onset_slot : s.onset_slot + s.duration_slots]
        for traj in out:
            home = city.homes[traj.user_id]
            near = traj.locs[pulse] == s.epicenter
            # all epicenter visits during the pulse are either home or removed
            assert np.all(traj.locs[pulse][near] == home) or not near.any()

    def test_never_moves_to_unvisited_cells(self):
        city = make_city(world(n_users=12, seed=10))
        normal = simulate_normal(city)
        out = simulate_disaster(city, normal, scenario(), GRID)
        for a, b in zip(normal, out):
            allowed = set(a.locs.tolist()) | {city.homes[a.user_id]}
            assert set(b.locs.tolist()) <= allowed

    def test_suppression_matches_closed_form(self):
        # Monte-Carlo check of the thinning law on a 2000-user world
        g = GridSpec(8, 8, 1.0, 48, 14, 30)
        cfg = world(grid=g, n_users=2000, seed=11, rho=0.4)
        city = make_city(cfg)
        normal = simulate_normal(city)
        truth = DecayParams(0.6, 0.15, 2.0)
        s = scenario(epicenter=27, truth=truth, peak_intensity=1.0,
                     spatial_sigma_km=2.0, onset_slot=48 * 2 + 20,
                     duration_slots=48 * 2)
        out = simulate_disaster(city, normal, s, g)
        field = make_disaster(s, g)
        H = decay_ratio_matrix(truth, build_kernel(g, truth.rho_km), field)
        f_norm = aggregate_out_of_home_flow(normal, g, city.homes)
        f_dis = aggregate_out_of_home_flow(out, g, city.homes)
        # pick the most-populated out-of-home cells during the pulse window
        probe = (f_norm.counts >= 50) & (H < 0.9)
        assert probe.sum() >= 10
        n = f_norm.counts[probe]
        kept = f_dis.counts[probe]
        h = H[probe]
        se = np.sqrt(np.maximum(h * (1 - h) / n, 1e-12))
        z = (kept / n - h) / se
        # each probe within 5 sigma, and the mean within 3 standard errors
        assert np.all(np.abs(z) < 5.0)
        assert abs(z.mean()) < 3.0 / np.sqrt(probe.sum())


class TestSplitsAndDataset:
    def test_splits_disjoint_and_cover(self):
        users = tuple(f"u{i}" for i in range(50))
        train, val, test = make_splits(users, seed=4)
        assert train | val | test == set(users)
        assert not (train & val) and not (train & test) and not (val & test)

    def test_build_city_dataset_consistent(self):
        ds = build_city_dataset(world(n_users=20, seed=6), scenario())
        assert len(ds.normal) == 20 and len(ds.disaster) == 20
        assert ds.field.onset_slot == 20
        assert set(ds.homes) == {t.user_id for t in ds.normal}

    def test_dataset_deterministic(self):
        a = build_city_dataset(world(n_users=10, seed=14), scenario())
        b = build_city_dataset(world(n_users=10, seed=14), scenario())
        for ta, tb in zip(a.disaster, b.disaster):
            assert np.array_equal(ta.locs, tb.locs)


class TestWorldConfigValidation:
    def test_bad_fraction(self):
        with pytest.raises(InvalidInputError):
            world(home_work_fraction=1.5)

    def test_bad_users(self):
        with pytest.raises(InvalidInputError):
            world(n_users=0)
