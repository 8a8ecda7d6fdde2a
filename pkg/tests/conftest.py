import numpy as np
import pytest

from stwind import synth
from stwind.data import (
    TARGET_STEP,
    AlignedDataset,
    ObservationSeries,
    Projection,
    Site,
    TimeGrid,
    align,
    load_nwp,
    load_observations,
    load_sites,
    parse_timestamp,
)
from stwind.kernels import AdvectionParams, KernelParams


def pytest_terminal_summary(terminalreporter):
    """Print one PASS/FAIL line per acceptance criterion."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for tag in sorted(RESULTS, key=lambda s: int(s[1:])):
        terminalreporter.write_line(f"{tag:>4}  {RESULTS[tag]}")


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def kernel_params():
    adv = AdvectionParams(np.array([3.0, 1.0]), np.array([[0.4, 0.1], [0.1, 0.3]]))
    return KernelParams(
        alpha=1.5, lam=0.3, r_s=25.0, r_t=5.0, delta=0.05, advection=adv
    )


def random_advection(rng):
    mean = rng.normal(0.0, 4.0, size=2)
    a = rng.normal(0.0, 0.8, size=(2, 2))
    return AdvectionParams(mean=mean, cov=a @ a.T)


def random_kernel_params(rng):
    return KernelParams(
        alpha=float(rng.uniform(0.2, 3.0)),
        lam=float(rng.uniform(0.0, 1.0)),
        r_s=float(rng.uniform(5.0, 60.0)),
        r_t=float(rng.uniform(1.0, 12.0)),
        delta=float(rng.uniform(0.0, 0.3)),
        advection=random_advection(rng),
    )


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    """Small synthetic dataset (3 days, 2 sites, biased NWP) loaded end to end."""
    out = tmp_path_factory.mktemp("synth")
    cfg = synth.SimulateConfig(
        n_sites=2, days=3, bias_add=0.8, bias_mult=1.05, bias_shift_steps=2
    )
    sites_path, obs_path, nwp_path = synth.generate(cfg, seed=42, out_dir=out)
    sites = load_sites(sites_path)
    obs = load_observations(obs_path, sites=sites)
    nwp = load_nwp(nwp_path, sites=sites)
    t0 = obs[0].grid.origin
    t1 = obs[0].grid.time_at(obs[0].grid.length - 1)
    return align(obs, nwp, (t0, t1))


@pytest.fixture(scope="session")
def utc():
    return parse_timestamp


DEFAULT_NWP_VARS = ("WIND_SPEED", "U", "V", "PRESSURE", "TEMP", "WINDGUST", "HUMIDITY")


def make_aligned_dataset(
    n_steps=300,
    obs_values=None,
    nwp_overrides=None,
    drop_vars=(),
    n_nwp=4,
    seed=777,
):
    """Hand-built AlignedDataset: 2 observation sites, up to 4 NWP points.

    `obs_values` maps site id -> array; `nwp_overrides` maps (nwp_site, var)
    -> array.  Default series are smooth deterministic curves plus seeded
    noise so correlations are informative but not degenerate.
    """
    rng = np.random.default_rng(seed)
    proj = Projection(lat0=40.0, lon0=-73.0, bbox=(35.0, 45.0, -78.0, -68.0))

    def site(sid, x, y):
        lat, lon = proj.to_latlon(x, y)
        return Site(id=sid, lat=float(lat), lon=float(lon), x=x, y=y)

    obs_sites = (site("OBS0", 0.0, 0.0), site("OBS1", 50.0, 15.0))
    nwp_all = (
        site("GRD0", 2.0, 1.0),
        site("GRD1", 51.0, 16.0),
        site("GRD2", 25.0, 30.0),
        site("GRD3", 15.0, -20.0),
    )
    nwp_sites = nwp_all[:n_nwp]
    grid = TimeGrid(parse_timestamp("2024-01-01T00:00:00Z"), TARGET_STEP, n_steps)
    t = np.arange(n_steps, dtype=float)

    nwp = {}
    for k, s in enumerate(nwp_sites):
        base = 8.0 + 2.0 * np.sin(2 * np.pi * t / 144.0 + 0.3 * k)
        variables = {
            "WIND_SPEED": base + 0.1 * rng.standard_normal(n_steps),
            "U": 4.0 + np.sin(2 * np.pi * t / 200.0 + k),
            "V": 1.5 + np.cos(2 * np.pi * t / 260.0 + k),
            "PRESSURE": 1013.0 - 0.02 * s.y + 5.0 * np.sin(2 * np.pi * t / 500.0),
            "TEMP": 284.0 + 2.0 * np.sin(2 * np.pi * t / 144.0),
            "WINDGUST": 1.3 * base + 0.4,
            "HUMIDITY": 60.0 + 20.0 * np.sin(2 * np.pi * t / 310.0),
        }
        for var in drop_vars:
            variables.pop(var, None)
        for (sid, var), arr in (nwp_overrides or {}).items():
            if sid == s.id:
                variables[var] = np.asarray(arr, dtype=float)
        nwp[s.id] = variables

    observations = {}
    for i, s in enumerate(obs_sites):
        if obs_values and s.id in obs_values:
            values = np.asarray(obs_values[s.id], dtype=float)
            present = np.isfinite(values)
        else:
            src = nwp[nwp_sites[min(i, len(nwp_sites) - 1)].id]["WIND_SPEED"]
            values = src + 0.3 * rng.standard_normal(n_steps)
            values = np.clip(values, 0.0, None)
            present = np.ones(n_steps, dtype=bool)
        observations[s.id] = ObservationSeries(
            site=s, grid=grid, values=values, present=present
        )

    source = {"OBS0": nwp_sites[0].id, "OBS1": nwp_sites[min(1, len(nwp_sites) - 1)].id}
    units = {var: "x" for var in DEFAULT_NWP_VARS}
    return AlignedDataset(
        sites=obs_sites,
        nwp_sites=nwp_sites,
        grid=grid,
        observations=observations,
        nwp=nwp,
        source=source,
        units=units,
        projection=proj,
    )
