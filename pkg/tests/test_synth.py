import numpy as np
import pytest

from stwind import synth
from stwind.data import align, load_nwp, load_observations, load_sites
from stwind.errors import ValidationError


def read_bytes(path):
    return path.read_bytes()


class TestGenerate:
    def test_seeded_outputs_are_byte_identical(self, tmp_path):
        cfg = synth.SimulateConfig(days=1, n_sites=2, bias_add=0.5)
        a = tmp_path / "a"
        b = tmp_path / "b"
        paths_a = synth.generate(cfg, seed=7, out_dir=a)
        paths_b = synth.generate(cfg, seed=7, out_dir=b)
        for pa, pb in zip(paths_a, paths_b):
            assert read_bytes(pa) == read_bytes(pb)

    def test_different_seed_differs(self, tmp_path):
        cfg = synth.SimulateConfig(days=1)
        _, obs_a, _ = synth.generate(cfg, seed=1, out_dir=tmp_path / "a")
        _, obs_b, _ = synth.generate(cfg, seed=2, out_dir=tmp_path / "b")
        assert read_bytes(obs_a) != read_bytes(obs_b)

    def test_zero_bias_nwp_equals_smoothed_truth_at_knots(self, tmp_path):
        cfg = synth.SimulateConfig(days=1, bias_add=0.0, bias_mult=1.0, bias_shift_steps=0)
        truth = synth.simulate_truth(cfg, seed=5)
        synth.generate(cfg, seed=5, out_dir=tmp_path)
        nwp = load_nwp(tmp_path / "nwp.csv")
        first_grid = len(truth.obs_sites)
        smoothed = synth._smooth(truth.truth[first_grid], cfg.smooth_steps)
        knots = np.arange(0, truth.n_steps + 1, 6) + synth.PAD_STEPS
        by_id = {s.site.id: s for s in nwp}
        written = by_id[truth.grid_sites[0].id].variables["WIND_SPEED"]
        assert np.max(np.abs(written - smoothed[knots])) < 1e-6  # CSV rounding only

    def test_temporal_shift_moves_cross_correlation_peak(self, tmp_path):
        shift = 3
        cfg = synth.SimulateConfig(
            days=2, bias_add=0.0, bias_mult=1.0, bias_shift_steps=shift, delta=0.001
        )
        sites_p, obs_p, nwp_p = synth.generate(cfg, seed=11, out_dir=tmp_path)
        sites = load_sites(sites_p)
        obs = load_observations(obs_p, sites=sites)
        nwp = load_nwp(nwp_p, sites=sites)
        t0 = obs[0].grid.origin
        t1 = obs[0].grid.time_at(obs[0].grid.length - 1)
        ds = align(obs, nwp, (t0, t1))
        sid = ds.sites[0].id
        y = ds.observations[sid].values
        w = ds.nwp_for(sid)["WIND_SPEED"]

        def corr(a, b):
            a = a - a.mean()
            b = b - b.mean()
            return float(a @ b / np.sqrt((a @ a) * (b @ b)))

        lags = range(-12, 13)
        scores = []
        n = y.size
        for d in lags:
            if d >= 0:
                scores.append(corr(y[: n - d], w[d:]))
            else:
                scores.append(corr(y[-d:], w[: n + d]))
        best = list(lags)[int(np.argmax(scores))]
        assert abs(best - shift) <= 1

    def test_observations_nonnegative_and_loadable(self, synth_dataset):
        for sid, series in synth_dataset.observations.items():
            assert np.all(series.values[series.present] >= 0.0)

    def test_missing_fraction_produces_gaps(self, tmp_path):
        cfg = synth.SimulateConfig(days=1, missing_fraction=0.2)
        sites_p, obs_p, _ = synth.generate(cfg, seed=3, out_dir=tmp_path)
        sites = load_sites(sites_p)
        obs = load_observations(obs_p, sites=sites)
        frac = np.mean(~obs[0].present)
        assert 0.1 < frac < 0.3

    def test_validation(self):
        with pytest.raises(ValidationError):
            synth.SimulateConfig(days=0)
        with pytest.raises(ValidationError):
            synth.SimulateConfig(smooth_steps=4)
        with pytest.raises(ValidationError):
            synth.SimulateConfig(bias_shift_steps=99)

    def test_grid_sites_enable_geostrophic(self, synth_dataset):
        from stwind.features import build_candidates

        pool = build_candidates(synth_dataset)
        assert "GEOSTROPHIC" in pool.family_names()
        assert len(pool.family_names()) == 8
