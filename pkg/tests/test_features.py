import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from stwind import features
from stwind.errors import DegenerateGeometryError, FeatureInputError, ValidationError
from stwind.features import (
    EARTH_ROTATION,
    GRAVITY,
    FeatureSpec,
    GeostrophicInputs,
    PlaneFit,
    build_candidates,
    fit_height_plane,
    geostrophic_components,
    geostrophic_wind,
    pacf_lag_order,
    pearson,
    pressure_differential,
    select_features,
    shifted,
)

from conftest import make_aligned_dataset


class TestPressureDifferential:
    def test_self_difference_is_zero(self):
        ds = make_aligned_dataset(n_steps=60)
        diff = pressure_differential(ds, "GRD0", "GRD0", 0)
        assert_allclose(diff, 0.0, atol=1e-12)

    def test_constant_offset(self):
        n = 50
        over = {
            ("GRD0", "PRESSURE"): np.full(n, 1010.0),
            ("GRD1", "PRESSURE"): np.full(n, 1000.0),
        }
        ds = make_aligned_dataset(n_steps=n, nwp_overrides=over)
        for d in (-3, 0, 4):
            diff = pressure_differential(ds, "GRD0", "GRD1", d)
            ok = np.isfinite(diff)
            assert_allclose(diff[ok], 10.0, atol=1e-12)

    def test_index_valued_series_pointwise(self):
        # brute-force evaluation of the definition over every t
        n = 40
        over = {
            ("GRD0", "PRESSURE"): np.zeros(n),
            ("GRD1", "PRESSURE"): np.arange(n, dtype=float),
        }
        ds = make_aligned_dataset(n_steps=n, nwp_overrides=over)
        d = 1
        diff = pressure_differential(ds, "GRD0", "GRD1", d)
        for t in range(n):
            if t + d < n:
                assert diff[t] == pytest.approx(0.0 - (t + d), abs=1e-12)
            else:
                assert np.isnan(diff[t])

    def test_antisymmetry_under_pair_and_lag_swap(self):
        ds = make_aligned_dataset(n_steps=80)
        d = 3
        ab = pressure_differential(ds, "GRD0", "GRD1", d)
        ba = pressure_differential(ds, "GRD1", "GRD0", -d)
        # ab(t) = -ba(t + d) wherever both are defined
        for t in range(80 - d):
            assert ab[t] == pytest.approx(-ba[t + d], abs=1e-12)

    def test_missing_pressure_errors(self):
        ds = make_aligned_dataset(n_steps=50, drop_vars=("PRESSURE",))
        with pytest.raises(FeatureInputError):
            pressure_differential(ds, "GRD0", "GRD1", 0)


class TestGeostrophicWind:
    def test_uniform_pressure_gives_zero(self):
        inputs = GeostrophicInputs(
            pressure_hpa=np.full(4, 1000.0),
            temperature_k=np.full(4, 285.0),
            lat_deg=np.full(4, 40.0),
            x_km=np.array([0.0, 50.0, 25.0, 10.0]),
            y_km=np.array([0.0, 10.0, 40.0, -30.0]),
        )
        # flat response surface: only least-squares round-off remains
        assert_allclose(geostrophic_wind(inputs), 0.0, atol=1e-9)

    def test_recovers_exact_plane(self):
        x = np.array([0.0, 40.0, 10.0, 30.0])
        y = np.array([0.0, 5.0, 35.0, -25.0])
        h = 5.0 + 2.0 * x - 3.0 * y
        plane = fit_height_plane(x, y, h)
        assert plane.c0 == pytest.approx(5.0, abs=1e-9)
        assert plane.c1 == pytest.approx(2.0, abs=1e-9)
        assert plane.c2 == pytest.approx(-3.0, abs=1e-9)
        # hand evaluation of the balance relation at 40 degrees
        lat = 40.0
        coef = 9.80665 / (2.0 * 7.2921e-5 * math.sin(math.radians(lat)))
        u, v = geostrophic_components(plane, lat)
        assert u == pytest.approx(-coef * (-3.0) * 1e-3, rel=1e-12)
        assert v == pytest.approx(coef * 2.0 * 1e-3, rel=1e-12)

    def test_speed_homogeneous_in_gradient(self):
        plane = PlaneFit(c0=1.0, c1=2.0, c2=-3.0, residual=0.0)
        doubled = PlaneFit(c0=1.0, c1=4.0, c2=-6.0, residual=0.0)
        u1, v1 = geostrophic_components(plane, 40.0)
        u2, v2 = geostrophic_components(doubled, 40.0)
        assert math.hypot(u2, v2) == pytest.approx(2.0 * math.hypot(u1, v1), rel=1e-12)

    def test_invariant_under_constant_height_shift(self):
        x = np.array([0.0, 40.0, 10.0, 30.0])
        y = np.array([0.0, 5.0, 35.0, -25.0])
        base = GeostrophicInputs(
            pressure_hpa=np.array([1010.0, 1005.0, 1012.0, 1008.0]),
            temperature_k=np.full(4, 285.0),
            lat_deg=np.full(4, 40.0),
            x_km=x,
            y_km=y,
        )
        lifted = GeostrophicInputs(
            pressure_hpa=base.pressure_hpa,
            temperature_k=base.temperature_k,
            lat_deg=base.lat_deg,
            x_km=x,
            y_km=y,
            base_height_m=np.full(4, 123.0),
        )
        assert_allclose(geostrophic_wind(lifted), geostrophic_wind(base), atol=1e-12)

    def test_collinear_stations_rejected(self):
        with pytest.raises(DegenerateGeometryError):
            fit_height_plane(
                np.array([0.0, 10.0, 20.0]), np.array([0.0, 5.0, 10.0]), np.zeros(3)
            )

    def test_equator_rejected(self):
        with pytest.raises(DegenerateGeometryError):
            GeostrophicInputs(
                pressure_hpa=np.full(3, 1000.0),
                temperature_k=np.full(3, 285.0),
                lat_deg=np.array([2.0, 40.0, 41.0]),
                x_km=np.array([0.0, 10.0, 0.0]),
                y_km=np.array([0.0, 0.0, 10.0]),
            )

    def test_constants(self):
        assert GRAVITY == 9.80665
        assert EARTH_ROTATION == 7.2921e-5


class TestCandidatePool:
    def test_full_inputs_give_eight_families(self):
        ds = make_aligned_dataset(n_steps=200)
        pool = build_candidates(ds)
        assert len(pool.family_names()) == 8
        assert "PRESSURE_DIFF" in pool.family_names()
        assert "GEOSTROPHIC" in pool.family_names()

    def test_missing_humidity_downgrades_with_warning(self, caplog):
        ds = make_aligned_dataset(n_steps=200, drop_vars=("HUMIDITY",))
        with caplog.at_level("WARNING"):
            pool = build_candidates(ds)
        assert len(pool.family_names()) == 7
        assert "HUMIDITY" not in pool.family_names()
        assert any("HUMIDITY" in m for m in caplog.messages)

    def test_too_few_grid_points_drops_geostrophic(self, caplog):
        ds = make_aligned_dataset(n_steps=200, n_nwp=2)
        with caplog.at_level("WARNING"):
            pool = build_candidates(ds)
        assert "GEOSTROPHIC" not in pool.family_names()

    def test_four_hour_lag_window(self):
        ds = make_aligned_dataset(n_steps=200)
        pool = build_candidates(ds)
        lags = pool.lags_for("WINDGUST")
        assert max(lags) == 24 and min(lags) == -24
        assert len([k for k in lags if k > 0]) == 24
        assert set(pool.lags_for("PRESSURE_DIFF")) == set(range(-6, 7))

    def test_most_distant_pair_chosen(self):
        ds = make_aligned_dataset(n_steps=100)
        pool = build_candidates(ds)
        ids = set(pool.diff_pair)
        # GRD0 (2,1) to GRD1 (51,16): hypot(49,15) ~ 51.2 km is the largest
        assert ids == {"GRD0", "GRD1"}


def rows_for(ds, t_lo, t_hi):
    rows = []
    target = []
    for site in ds.sites:
        obs = ds.observations[site.id]
        for t in range(t_lo, t_hi + 1):
            if obs.present[t]:
                rows.append((site.id, t))
                target.append(obs.values[t])
    return rows, np.array(target)


class TestSelectFeatures:
    def test_identical_candidate_selected_at_lag_zero(self):
        ds = make_aligned_dataset(n_steps=200)
        pool = build_candidates(ds)
        rows, _ = rows_for(ds, 30, 170)
        target = pool.values_at(FeatureSpec("WINDGUST", 0, "site"),
                                np.array([s for s, _ in rows]),
                                np.array([t for _, t in rows]))
        specs = select_features(pool, target, rows, threshold=0.6)
        by_var = {s.variable: s for s in specs}
        assert by_var["WINDGUST"].lag == 0
        assert by_var["WINDGUST"].correlation == pytest.approx(1.0, abs=1e-12)

    def test_shifted_candidate_selected_at_matching_lag(self, rng):
        # AR(1) target; one variable is the target shifted by 3 steps
        n = 400
        y = np.zeros(n)
        eps = rng.standard_normal(n)
        for t in range(1, n):
            y[t] = 0.8 * y[t - 1] + eps[t]
        probe = shifted(y, 3)  # probe(t) = y(t+3) -> best lag is -3
        probe[~np.isfinite(probe)] = 0.0
        over = {("GRD0", "WINDGUST"): probe, ("GRD1", "WINDGUST"): probe}
        obs = {"OBS0": y + 10.0, "OBS1": y + 10.0}
        ds = make_aligned_dataset(n_steps=n, nwp_overrides=over, obs_values=obs)
        pool = build_candidates(ds)
        rows, target = rows_for(ds, 30, n - 30)
        # brute-force oracle over every admissible lag
        site_ids = np.array([s for s, _ in rows])
        t_idx = np.array([t for _, t in rows])
        best_lag, best_r = None, -1.0
        for lag in range(-24, 25):
            col = pool.values_at(FeatureSpec("WINDGUST", lag, "site"), site_ids, t_idx)
            ok = np.isfinite(col)
            r = abs(pearson(col[ok], target[ok]))
            if r > best_r:
                best_lag, best_r = lag, r
        assert best_lag == -3
        specs = select_features(pool, target, rows, threshold=0.6)
        by_var = {s.variable: s for s in specs}
        assert by_var["WINDGUST"].lag == -3

    def test_all_below_threshold_gives_empty_set(self, rng):
        ds = make_aligned_dataset(n_steps=300)
        pool = build_candidates(ds)
        rows, _ = rows_for(ds, 30, 270)
        noise = rng.standard_normal(len(rows))
        specs = select_features(pool, noise, rows, threshold=0.6)
        assert specs == []

    def test_affine_invariance_of_selection(self):
        ds = make_aligned_dataset(n_steps=250)
        base_pool = build_candidates(ds)
        rows, target = rows_for(ds, 30, 220)
        base = select_features(base_pool, target, rows, threshold=0.3)

        over = {
            (sid, "WINDGUST"): -2.5 * ds.nwp[sid]["WINDGUST"] + 40.0
            for sid in ds.nwp
        }
        ds2 = make_aligned_dataset(n_steps=250, nwp_overrides=over)
        pool2 = build_candidates(ds2)
        scaled = select_features(pool2, target, rows, threshold=0.3)
        a = {s.variable: s.lag for s in base}
        b = {s.variable: s.lag for s in scaled}
        assert a == b
        ra = {s.variable: abs(s.correlation) for s in base}
        rb = {s.variable: abs(s.correlation) for s in scaled}
        for var in ra:
            assert rb[var] == pytest.approx(ra[var], abs=1e-12)

    def test_chosen_lag_dominates_family(self):
        ds = make_aligned_dataset(n_steps=250)
        pool = build_candidates(ds)
        rows, target = rows_for(ds, 30, 220)
        specs = select_features(pool, target, rows, threshold=0.2)
        site_ids = np.array([s for s, _ in rows])
        t_idx = np.array([t for _, t in rows])
        for spec in specs:
            chosen = abs(spec.correlation)
            for lag in pool.lags_for(spec.variable):
                col = pool.values_at(
                    FeatureSpec(spec.variable, lag, spec.scope), site_ids, t_idx
                )
                ok = np.isfinite(col) & np.isfinite(target)
                if ok.sum() < 30:
                    continue
                r = pearson(col[ok], target[ok])
                if r is None:
                    continue
                assert chosen >= abs(r) - 1e-12

    def test_zero_variance_candidate_excluded(self, caplog):
        n = 200
        over = {(f"GRD{k}", "HUMIDITY"): np.full(n, 55.0) for k in range(4)}
        ds = make_aligned_dataset(n_steps=n, nwp_overrides=over)
        pool = build_candidates(ds)
        rows, target = rows_for(ds, 30, 170)
        with caplog.at_level("WARNING"):
            specs = select_features(pool, target, rows, threshold=0.0)
        assert "HUMIDITY" not in {s.variable for s in specs}

    def test_future_lags_restricted_by_forecast_coverage(self):
        n = 200
        ds = make_aligned_dataset(n_steps=n)
        pool = build_candidates(ds)
        rows, target = rows_for(ds, 30, 150)
        target_rows = [(s.id, t) for s in ds.sites for t in range(151, 200)]
        specs = select_features(pool, target, rows, threshold=0.0, target_rows=target_rows)
        for spec in specs:
            assert 199 + spec.lag <= n - 1


class TestPacfLagOrder:
    def test_white_noise_floors_at_one(self):
        rng = np.random.default_rng(4)
        assert pacf_lag_order(rng.standard_normal(600)) == 1

    def test_ar2_recovered(self):
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            n = 500
            y = np.zeros(n)
            eps = rng.standard_normal(n)
            for t in range(2, n):
                y[t] = 0.5 * y[t - 1] + 0.3 * y[t - 2] + eps[t]
            hits += pacf_lag_order(y) == 2
        assert hits >= 90

    def test_ar1_recovered(self):
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            n = 500
            y = np.zeros(n)
            eps = rng.standard_normal(n)
            for t in range(1, n):
                y[t] = 0.9 * y[t - 1] + eps[t]
            hits += pacf_lag_order(y) == 1
        assert hits >= 90

    def test_short_series_falls_back(self, caplog):
        rng = np.random.default_rng(0)
        with caplog.at_level("WARNING"):
            order = pacf_lag_order(rng.standard_normal(50))
        assert order == 6

    def test_gaps_use_longest_run(self):
        rng = np.random.default_rng(1)
        values = rng.standard_normal(400)
        values[150] = np.nan  # longest run is 249 samples
        assert pacf_lag_order(values) >= 1


class TestFeatureSpecValidation:
    def test_lag_bound(self):
        with pytest.raises(ValidationError):
            FeatureSpec("WINDGUST", 25, "site")
