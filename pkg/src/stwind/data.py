"""Data ingestion and alignment.

Loads 10-min wind speed observations and hourly NWP series from CSV, projects
site coordinates onto a local tangent plane (km), downscales NWP variables to
the 10-min target grid with natural cubic splines, and packs everything into
an immutable AlignedDataset.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import (
    ConflictError,
    CoverageError,
    GridError,
    InsufficientDataError,
    ParseError,
    SchemaError,
    ValidationError,
)

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
TARGET_STEP = timedelta(minutes=10)
HOURLY_STEP = timedelta(hours=1)

#: NWP variables that must be present in every NWP file, with canonical units.
MANDATORY_NWP_VARIABLES = {
    "WIND_SPEED": "m/s",
    "U": "m/s",
    "V": "m/s",
    "PRESSURE": "hPa",
    "TEMP": "K",
}

#: Known optional variables and their canonical units.
OPTIONAL_NWP_VARIABLES = {
    "WINDGUST": "m/s",
    "HUMIDITY": "%",
    "SWDOWN": "W/m2",
    "LWUPB": "W/m2",
    "GLW": "W/m2",
    "SNOWNC": "mm",
    "DIF_FRAC": "-",
    "LANDMASK": "-",
    "LAKEMASK": "-",
    "PBLH": "m",
    "MDBZ": "dBZ",
}

KNOWN_NWP_VARIABLES = {**MANDATORY_NWP_VARIABLES, **OPTIONAL_NWP_VARIABLES}

#: Interpolated speed-like variables clamped at zero (spline overshoot).
NONNEGATIVE_NWP_VARIABLES = ("WIND_SPEED", "WINDGUST")


def parse_timestamp(text, line=None):
    """Parse an ISO-8601 UTC timestamp (trailing 'Z' accepted)."""
    try:
        ts = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    except ValueError as exc:
        raise ParseError(f"malformed timestamp {text!r}: {exc}", line=line) from None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts):
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _freeze(arr):
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Projection:
    """Equirectangular local tangent plane about a reference point, in km."""

    lat0: float
    lon0: float
    #: lat/lon box inside which the projection is considered valid.
    bbox: tuple[float, float, float, float]  # lat_min, lat_max, lon_min, lon_max

    def to_xy(self, lat, lon):
        kx = math.radians(1.0) * EARTH_RADIUS_KM * math.cos(math.radians(self.lat0))
        ky = math.radians(1.0) * EARTH_RADIUS_KM
        return ((np.asarray(lon) - self.lon0) * kx, (np.asarray(lat) - self.lat0) * ky)

    def to_latlon(self, x, y):
        kx = math.radians(1.0) * EARTH_RADIUS_KM * math.cos(math.radians(self.lat0))
        ky = math.radians(1.0) * EARTH_RADIUS_KM
        return (np.asarray(y) / ky + self.lat0, np.asarray(x) / kx + self.lon0)

    def contains(self, lat, lon):
        lat_min, lat_max, lon_min, lon_max = self.bbox
        return bool(
            np.all(lat >= lat_min)
            and np.all(lat <= lat_max)
            and np.all(lon >= lon_min)
            and np.all(lon <= lon_max)
        )


@dataclass(frozen=True)
class Site:
    id: str
    lat: float
    lon: float
    x: float = 0.0  # km, east
    y: float = 0.0  # km, north


def build_projection(sites, margin_deg=2.0):
    """Projection centred on the site centroid, bbox = site extent + margin."""
    lats = np.array([s.lat for s in sites], dtype=float)
    lons = np.array([s.lon for s in sites], dtype=float)
    bbox = (
        float(lats.min() - margin_deg),
        float(lats.max() + margin_deg),
        float(lons.min() - margin_deg),
        float(lons.max() + margin_deg),
    )
    return Projection(lat0=float(lats.mean()), lon0=float(lons.mean()), bbox=bbox)


def project_sites(sites, projection=None):
    """Return (projection, sites with x/y filled in)."""
    if projection is None:
        projection = build_projection(sites)
    projected = []
    for s in sites:
        x, y = projection.to_xy(s.lat, s.lon)
        projected.append(Site(id=s.id, lat=s.lat, lon=s.lon, x=float(x), y=float(y)))
    ids = [s.id for s in projected]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate site ids")
    for i, a in enumerate(projected):
        for b in projected[i + 1 :]:
            if math.hypot(a.x - b.x, a.y - b.y) <= 0.0:
                raise ValidationError(f"sites {a.id} and {b.id} coincide")
    return projection, projected


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid; index <-> timestamp is a bijection."""

    origin: datetime
    step: timedelta
    length: int

    def __post_init__(self):
        if self.step <= timedelta(0):
            raise ValidationError("grid step must be positive")
        if self.length < 1:
            raise ValidationError("grid length must be >= 1")

    def time_at(self, index):
        return self.origin + index * self.step

    def index_of(self, ts):
        delta = ts - self.origin
        steps, rem = divmod(delta, self.step)
        if rem != timedelta(0):
            raise GridError(f"{format_timestamp(ts)} is not on the grid")
        return int(steps)

    def times(self):
        return [self.origin + i * self.step for i in range(self.length)]

    def covers(self, other):
        return (
            self.index_of(other.origin) >= 0
            and self.index_of(other.time_at(other.length - 1)) <= self.length - 1
        )


@dataclass(frozen=True)
class ObservationSeries:
    """Wind speed at one site on a uniform grid; missingness is an explicit mask."""

    site: Site
    grid: TimeGrid
    values: np.ndarray  # m/s, NaN where missing
    present: np.ndarray  # bool, True where a value exists

    def __post_init__(self):
        if self.values.shape != (self.grid.length,) or self.present.shape != self.values.shape:
            raise ValidationError("observation arrays must match grid length")
        if np.any(self.values[self.present] < 0):
            raise ValidationError("negative wind speed")
        object.__setattr__(self, "values", _freeze(self.values))
        object.__setattr__(self, "present", _freeze(self.present))


@dataclass(frozen=True)
class NwpSeries:
    """Hourly NWP output at one grid point: named variables with unit tags."""

    site: Site
    grid: TimeGrid
    variables: dict[str, np.ndarray]
    units: dict[str, str]

    def __post_init__(self):
        for name, arr in self.variables.items():
            if arr.shape != (self.grid.length,):
                raise ValidationError(f"variable {name} does not cover the hourly grid")
            self.variables[name] = _freeze(arr)
            if name not in self.units:
                raise SchemaError(f"variable {name} has no unit tag")


@dataclass(frozen=True)
class ObsSchema:
    time_col: str = "timestamp"
    site_col: str = "site_id"
    value_col: str = "wind_speed_ms"


@dataclass(frozen=True)
class NwpSchema:
    time_col: str = "timestamp"
    site_col: str = "site_id"
    #: variable -> unit; merged over the known-variable table.
    units: dict[str, str] = field(default_factory=dict)


def _canonical_var(name):
    return name.strip().upper().replace(" ", "_")


def load_sites(path):
    """Read `site_id,lat,lon` CSV and return projected Site list."""
    sites = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"site_id", "lat", "lon"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise SchemaError(f"sites file must have columns {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                sites.append(Site(row["site_id"], float(row["lat"]), float(row["lon"])))
            except (TypeError, ValueError) as exc:
                raise ParseError(f"bad site row: {exc}", line=lineno) from None
    if not sites:
        raise ValidationError(f"no sites in {path}")
    _, projected = project_sites(sites)
    return projected


def load_observations(path, schema=None, sites=None):
    """Load 10-min observations; one ObservationSeries per site.

    Gaps become explicit missing entries on each site's min..max 10-min grid.
    """
    schema = schema or ObsSchema()
    site_map = {s.id: s for s in sites} if sites else {}
    per_site: dict[str, dict[datetime, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {schema.time_col, schema.site_col, schema.value_col}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise SchemaError(f"observation file must have columns {sorted(needed)}")
        for lineno, row in enumerate(reader, start=2):
            ts = parse_timestamp(row[schema.time_col], line=lineno)
            sid = row[schema.site_col].strip()
            raw = row[schema.value_col].strip()
            if raw == "":
                continue  # explicit gap row
            try:
                value = float(raw)
            except ValueError:
                raise ParseError(f"malformed wind speed {raw!r}", line=lineno) from None
            if value < 0:
                raise ValidationError(f"line {lineno}: negative wind speed {value}")
            bucket = per_site.setdefault(sid, {})
            if ts in bucket:
                raise ConflictError(
                    f"line {lineno}: duplicate ({sid}, {format_timestamp(ts)})"
                )
            bucket[ts] = value
    out = []
    for sid in sorted(per_site):
        stamps = sorted(per_site[sid])
        origin = stamps[0]
        for ts in stamps:
            if (ts - origin) % TARGET_STEP != timedelta(0):
                raise GridError(
                    f"site {sid}: {format_timestamp(ts)} not on the 10-min grid of "
                    f"{format_timestamp(origin)}"
                )
        length = (stamps[-1] - origin) // TARGET_STEP + 1
        grid = TimeGrid(origin, TARGET_STEP, length)
        values = np.full(length, np.nan)
        present = np.zeros(length, dtype=bool)
        for ts, value in per_site[sid].items():
            i = grid.index_of(ts)
            values[i] = value
            present[i] = True
        site = site_map.get(sid, Site(sid, 0.0, 0.0))
        out.append(ObservationSeries(site=site, grid=grid, values=values, present=present))
    return out


def load_nwp(path, schema=None, sites=None):
    """Load hourly NWP CSV; one NwpSeries per site with validated unit tags."""
    schema = schema or NwpSchema()
    site_map = {s.id: s for s in sites} if sites else {}
    rows: dict[str, dict[datetime, dict[str, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError("empty NWP file")
        columns = [c for c in reader.fieldnames if c not in (schema.time_col, schema.site_col)]
        var_by_col = {c: _canonical_var(c) for c in columns}
        present_vars = set(var_by_col.values())
        for mandatory in MANDATORY_NWP_VARIABLES:
            if mandatory not in present_vars:
                raise SchemaError(f"NWP file lacks mandatory variable {mandatory}")
        units = dict(KNOWN_NWP_VARIABLES)
        units.update(schema.units)
        for var in sorted(present_vars - set(KNOWN_NWP_VARIABLES)):
            if var not in schema.units:
                log.warning("unknown NWP variable %s kept with unit '?'", var)
                units[var] = "?"
        for var, unit in schema.units.items():
            if var in KNOWN_NWP_VARIABLES and unit != KNOWN_NWP_VARIABLES[var]:
                raise ValidationError(
                    f"variable {var} declared in {unit!r}, expected {KNOWN_NWP_VARIABLES[var]!r}"
                )
        for lineno, row in enumerate(reader, start=2):
            ts = parse_timestamp(row[schema.time_col], line=lineno)
            sid = row[schema.site_col].strip()
            bucket = rows.setdefault(sid, {})
            if ts in bucket:
                raise ConflictError(
                    f"line {lineno}: duplicate ({sid}, {format_timestamp(ts)})"
                )
            values = {}
            for col in columns:
                try:
                    values[var_by_col[col]] = float(row[col])
                except (TypeError, ValueError):
                    raise ParseError(
                        f"malformed value {row[col]!r} in column {col}", line=lineno
                    ) from None
            bucket[ts] = values
    out = []
    for sid in sorted(rows):
        stamps = sorted(rows[sid])
        if len(stamps) > 1:
            for prev, cur in zip(stamps, stamps[1:]):
                if cur - prev != HOURLY_STEP:
                    raise GridError(
                        f"site {sid}: spacing {cur - prev} between "
                        f"{format_timestamp(prev)} and {format_timestamp(cur)} is not hourly"
                    )
        grid = TimeGrid(stamps[0], HOURLY_STEP, len(stamps))
        variables = {
            var: np.array([rows[sid][ts][var] for ts in stamps])
            for var in sorted({v for ts in stamps for v in rows[sid][ts]})
        }
        site = site_map.get(sid, Site(sid, 0.0, 0.0))
        out.append(
            NwpSeries(
                site=site,
                grid=grid,
                variables=variables,
                units={v: units[v] for v in variables},
            )
        )
    return out


def spline_downscale(values, hourly_grid, target_grid):
    """Natural cubic spline through hourly knots, evaluated on a 10-min grid.

    Exact at the knots; the target grid must lie inside the hourly span.
    """
    values = np.asarray(values, dtype=float)
    if values.size < 4:
        raise InsufficientDataError(f"spline needs >= 4 hourly knots, got {values.size}")
    if np.any(~np.isfinite(values)):
        raise ValidationError("missing hourly values inside spline window")
    t0 = hourly_grid.origin
    knots_s = np.arange(hourly_grid.length) * hourly_grid.step.total_seconds()
    target_s = (
        np.arange(target_grid.length) * target_grid.step.total_seconds()
        + (target_grid.origin - t0).total_seconds()
    )
    if target_s[0] < knots_s[0] - 1e-9 or target_s[-1] > knots_s[-1] + 1e-9:
        raise CoverageError(
            f"target grid [{format_timestamp(target_grid.origin)}, "
            f"{format_timestamp(target_grid.time_at(target_grid.length - 1))}] extends "
            f"past hourly span ending {format_timestamp(hourly_grid.time_at(hourly_grid.length - 1))}"
        )
    spline = CubicSpline(knots_s, values, bc_type="natural")
    return spline(target_s)


@dataclass(frozen=True)
class AlignedDataset:
    """Observations and spline-downscaled NWP series on one 10-min grid.

    `nwp` holds the interpolated series for every NWP grid point; `source`
    maps each observation site to its nearest NWP grid point.
    """

    sites: tuple[Site, ...]
    nwp_sites: tuple[Site, ...]
    grid: TimeGrid
    observations: dict[str, ObservationSeries]
    nwp: dict[str, dict[str, np.ndarray]]
    source: dict[str, str]
    units: dict[str, str]
    projection: Projection

    def nwp_for(self, site_id):
        """Interpolated NWP variables assigned to an observation site."""
        return self.nwp[self.source[site_id]]

    def site_by_id(self, site_id):
        for s in self.sites:
            if s.id == site_id:
                return s
        raise KeyError(site_id)


def align(obs, nwp, window):
    """Clip everything to `window` (inclusive ends) on the shared 10-min grid.

    NWP variables are spline-downscaled; each observation site is assigned its
    nearest NWP grid point by projected distance.
    """
    if not obs:
        raise ValidationError("no observation series")
    if not nwp:
        raise ValidationError("no NWP series")
    t_start, t_end = window
    if t_end < t_start:
        raise ValidationError("window end precedes start")
    all_sites = [o.site for o in obs] + [n.site for n in nwp]
    projection, projected = project_sites(all_sites)
    proj_map = {s.id: s for s in projected}
    obs_sites = tuple(proj_map[o.site.id] for o in obs)
    nwp_sites = tuple(proj_map[n.site.id] for n in nwp)

    length = (t_end - t_start) // TARGET_STEP + 1
    grid = TimeGrid(t_start, TARGET_STEP, length)

    interp: dict[str, dict[str, np.ndarray]] = {}
    units: dict[str, str] = {}
    for series in nwp:
        span_start = series.grid.origin
        span_end = series.grid.time_at(series.grid.length - 1)
        if span_start > t_start or span_end < t_end:
            missing = []
            if span_start > t_start:
                missing.append(
                    f"[{format_timestamp(t_start)}, {format_timestamp(span_start)})"
                )
            if span_end < t_end:
                missing.append(f"({format_timestamp(span_end)}, {format_timestamp(t_end)}]")
            raise CoverageError(
                f"NWP site {series.site.id} does not cover {' and '.join(missing)}"
            )
        variables = {}
        for name, values in series.variables.items():
            downscaled = spline_downscale(values, series.grid, grid)
            if name in NONNEGATIVE_NWP_VARIABLES and np.any(downscaled < 0):
                log.warning(
                    "site %s: clamped %d negative interpolated %s values to 0",
                    series.site.id,
                    int(np.sum(downscaled < 0)),
                    name,
                )
                downscaled = np.maximum(downscaled, 0.0)
            variables[name] = _freeze(downscaled)
        interp[series.site.id] = variables
        units.update(series.units)

    source = {}
    for site in obs_sites:
        dists = [(math.hypot(site.x - g.x, site.y - g.y), g.id) for g in nwp_sites]
        source[site.id] = min(dists)[1]

    observations = {}
    for series in obs:
        values = np.full(length, np.nan)
        present = np.zeros(length, dtype=bool)
        src_first = series.grid.origin
        offset = (src_first - t_start) // TARGET_STEP
        if (src_first - t_start) % TARGET_STEP != timedelta(0):
            raise GridError(f"site {series.site.id}: observation grid offset from window")
        lo = max(0, offset)
        hi = min(length, offset + series.grid.length)
        if hi > lo:
            src = slice(lo - offset, hi - offset)
            values[lo:hi] = series.values[src]
            present[lo:hi] = series.present[src]
        observations[series.site.id] = ObservationSeries(
            site=proj_map[series.site.id], grid=grid, values=values, present=present
        )

    return AlignedDataset(
        sites=obs_sites,
        nwp_sites=nwp_sites,
        grid=grid,
        observations=observations,
        nwp=interp,
        source=source,
        units=units,
        projection=projection,
    )


def _array_to_list(arr):
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(arr, dtype=float)]


def dataset_to_json(ds):
    """Canonical JSON form; identical inputs give byte-identical output."""
    doc = {
        "grid": {
            "origin": format_timestamp(ds.grid.origin),
            "step_seconds": ds.grid.step.total_seconds(),
            "length": ds.grid.length,
        },
        "projection": {
            "lat0": ds.projection.lat0,
            "lon0": ds.projection.lon0,
            "bbox": list(ds.projection.bbox),
        },
        "sites": [
            {"id": s.id, "lat": s.lat, "lon": s.lon, "x_km": s.x, "y_km": s.y}
            for s in ds.sites
        ],
        "nwp_sites": [
            {"id": s.id, "lat": s.lat, "lon": s.lon, "x_km": s.x, "y_km": s.y}
            for s in ds.nwp_sites
        ],
        "source": dict(sorted(ds.source.items())),
        "units": dict(sorted(ds.units.items())),
        "observations": {
            sid: {
                "values": _array_to_list(series.values),
                "present": [bool(p) for p in series.present],
            }
            for sid, series in sorted(ds.observations.items())
        },
        "nwp": {
            sid: {var: _array_to_list(arr) for var, arr in sorted(variables.items())}
            for sid, variables in sorted(ds.nwp.items())
        },
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def dataset_from_json(text):
    doc = json.loads(text)
    grid = TimeGrid(
        parse_timestamp(doc["grid"]["origin"]),
        timedelta(seconds=doc["grid"]["step_seconds"]),
        int(doc["grid"]["length"]),
    )
    projection = Projection(
        lat0=doc["projection"]["lat0"],
        lon0=doc["projection"]["lon0"],
        bbox=tuple(doc["projection"]["bbox"]),
    )
    def mk_site(d):
        return Site(d["id"], d["lat"], d["lon"], d["x_km"], d["y_km"])

    sites = tuple(mk_site(d) for d in doc["sites"])
    nwp_sites = tuple(mk_site(d) for d in doc["nwp_sites"])
    site_map = {s.id: s for s in sites}
    observations = {}
    for sid, payload in doc["observations"].items():
        values = np.array(
            [np.nan if v is None else v for v in payload["values"]], dtype=float
        )
        present = np.array(payload["present"], dtype=bool)
        observations[sid] = ObservationSeries(
            site=site_map[sid], grid=grid, values=values, present=present
        )
    nwp = {
        sid: {
            var: _freeze(np.array([np.nan if v is None else v for v in arr], dtype=float))
            for var, arr in variables.items()
        }
        for sid, variables in doc["nwp"].items()
    }
    return AlignedDataset(
        sites=sites,
        nwp_sites=nwp_sites,
        grid=grid,
        observations=observations,
        nwp=nwp,
        source=doc["source"],
        units=doc["units"],
        projection=projection,
    )
