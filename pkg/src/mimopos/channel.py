"""Geometric multipath channel model for an uplink massive MIMO-OFDM system.

The base station carries a uniform planar array (UPA) with ``rows`` antennas
per column (vertical axis) and ``cols`` antennas per row (horizontal axis).
A mobile terminal transmits OFDM pilots over ``n_subcarriers`` tones; the
cyclic prefix truncates the usable delay spread to ``guard_len`` samples.

Propagation is modelled by single-bounce scattering: every scatterer in the
scene spawns one path whose arrival angles are fixed by the BS-to-scatterer
direction and whose delay follows the total terminal->scatterer->BS length.
Small-scale fading draws an independent complex normal gain per path.
"""

import json
from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299792458.0


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array layout.

    Attributes:
        rows: number of antennas along the vertical axis.
        cols: number of antennas along the horizontal axis.
        wavelength: carrier wavelength in metres.
        spacing_v: vertical element spacing in metres (default wavelength/2).
        spacing_h: horizontal element spacing in metres (default wavelength/2).
    """

    rows: int
    cols: int
    wavelength: float = 1.0
    spacing_v: float = None
    spacing_h: float = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array needs at least one element per axis")
        if self.wavelength <= 0:
            raise ValueError("wavelength must be positive")
        if self.spacing_v is None:
            object.__setattr__(self, "spacing_v", self.wavelength / 2)
        if self.spacing_h is None:
            object.__setattr__(self, "spacing_h", self.wavelength / 2)

    @property
    def n_antennas(self):
        return self.rows * self.cols


@dataclass(frozen=True)
class OFDMConfig:
    """OFDM numerology.

    Attributes:
        n_subcarriers: number of pilot subcarriers.
        guard_len: cyclic-prefix length in samples; delays at or beyond it
            are outside the model.
        sample_interval: baseband sample period in seconds.
    """

    n_subcarriers: int
    guard_len: int
    sample_interval: float

    def __post_init__(self):
        if self.n_subcarriers < 1:
            raise ValueError("n_subcarriers must be positive")
        if not 0 < self.guard_len <= self.n_subcarriers:
            raise ValueError("guard_len must lie in [1, n_subcarriers]")
        if self.sample_interval <= 0:
            raise ValueError("sample_interval must be positive")


@dataclass(frozen=True)
class PathParam:
    """One propagation path.

    elevation/azimuth are arrival angles at the BS in radians, ``delay`` is
    expressed in samples (may be fractional), ``power`` is the average gain
    power sigma^2 of the path.
    """

    elevation: float
    azimuth: float
    delay: float
    power: float


@dataclass
class PathSet:
    """Paths seen from one terminal position."""

    paths: list
    position: np.ndarray = None

    def __len__(self):
        return len(self.paths)

    def __iter__(self):
        return iter(self.paths)

    @property
    def elevations(self):
        return np.array([p.elevation for p in self.paths])

    @property
    def azimuths(self):
        return np.array([p.azimuth for p in self.paths])

    @property
    def delays(self):
        return np.array([p.delay for p in self.paths])

    @property
    def powers(self):
        return np.array([p.power for p in self.paths])


def steering_vertical(geom, elevation):
    """Vertical steering vector of length ``geom.rows``.

    Element m carries phase -2*pi*m*(d_v/wavelength)*cos(elevation).
    """
    m = np.arange(geom.rows)
    phase = -2j * np.pi * (geom.spacing_v / geom.wavelength) * np.cos(elevation)
    return np.exp(phase * m)


def steering_horizontal(geom, elevation, azimuth):
    """Horizontal steering vector of length ``geom.cols``.

    Element n carries phase -2*pi*n*(d_h/wavelength)*sin(elevation)*cos(azimuth).
    """
    n = np.arange(geom.cols)
    phase = (-2j * np.pi * (geom.spacing_h / geom.wavelength)
             * np.sin(elevation) * np.cos(azimuth))
    return np.exp(phase * n)


def steering(geom, elevation, azimuth):
    """Full UPA steering vector, Kronecker of vertical and horizontal.

    The antenna at row m / column n maps to index m * cols + n.
    """
    return np.kron(steering_vertical(geom, elevation),
                   steering_horizontal(geom, elevation, azimuth))


def sample_gains(paths, rng, size=None):
    """Draw complex normal path gains, CN(0, power) per path.

    Args:
        paths: PathSet (or any object with a ``powers`` array).
        rng: numpy Generator.
        size: if given, number of independent draws; the result is then
            shaped (size, n_paths) instead of (n_paths,).
    """
    powers = np.asarray(paths.powers, dtype=float)
    if np.any(powers < 0):
        raise ValueError("path powers must be non-negative")
    shape = (len(powers),) if size is None else (size, len(powers))
    scale = np.sqrt(powers / 2)
    return (rng.normal(size=shape) + 1j * rng.normal(size=shape)) * scale


def sfcrm(paths, gains, geom, ofdm):
    """Space-frequency channel response matrix, (n_antennas, n_subcarriers).

    Entry (i, l) is the response of antenna i on subcarrier l:
    sum over paths of gain * steering[i] * exp(-2j*pi*l*delay/n_subcarriers).

    ``gains`` may also be a batch of draws shaped (B, n_paths), in which case
    the result is (B, n_antennas, n_subcarriers).
    """
    gains = np.asarray(gains)
    if gains.shape[-1] != len(paths):
        raise ValueError("one gain per path required")
    steer = np.stack([steering(geom, p.elevation, p.azimuth) for p in paths])
    l = np.arange(ofdm.n_subcarriers)
    freq = np.exp(-2j * np.pi * np.outer(paths.delays, l) / ofdm.n_subcarriers)
    if gains.ndim == 1:
        return np.einsum("p,pi,pl->il", gains, steer, freq)
    return np.einsum("...p,pi,pl->...il", gains, steer, freq)


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by its lower and upper corners."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("box corners must be 3-vectors")
        if np.any(hi <= lo):
            raise ValueError("box is empty: hi must exceed lo on every axis")
        object.__setattr__(self, "lo", tuple(lo))
        object.__setattr__(self, "hi", tuple(hi))

    def contains(self, point):
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= np.asarray(self.lo) - 1e-9)
                    and np.all(p <= np.asarray(self.hi) + 1e-9))


@dataclass
class Scene:
    """Static propagation scene: BS location plus a fixed scatterer cloud.

    ``scatterers`` is an (S, 3) array of positions; ``gains_db`` the per
    scatterer large-scale gain in dB (log-normal shadowing across the
    cloud).  Path powers additionally decay with total length to the power
    ``pathloss_exponent``.
    """

    bs_position: np.ndarray
    scatterers: np.ndarray
    gains_db: np.ndarray
    bounds: Box
    pathloss_exponent: float = 2.0
    seed: int = None


def generate_scene(bounds, bs_position, n_scatterers, seed,
                   pathloss_exponent=2.0, margin=20.0, gain_std_db=6.0):
    """Draw a random scatterer cloud around the positioning area.

    Scatterers are placed uniformly in the area box expanded by ``margin``
    metres horizontally; vertically they span from the ground up to the top
    of the area plus the margin.  Their dB gains are zero-mean normal with
    standard deviation ``gain_std_db``.
    """
    if not isinstance(bounds, Box):
        bounds = Box(*bounds)
    if n_scatterers < 1:
        raise ValueError("need at least one scatterer")
    rng = np.random.default_rng(seed)
    lo = np.asarray(bounds.lo)
    hi = np.asarray(bounds.hi)
    region_lo = np.array([lo[0] - margin, lo[1] - margin, 0.0])
    region_hi = np.array([hi[0] + margin, hi[1] + margin, hi[2] + margin])
    scatterers = rng.uniform(region_lo, region_hi, size=(n_scatterers, 3))
    gains_db = rng.normal(0.0, gain_std_db, size=n_scatterers)
    return Scene(bs_position=np.asarray(bs_position, dtype=float),
                 scatterers=scatterers, gains_db=gains_db, bounds=bounds,
                 pathloss_exponent=pathloss_exponent, seed=seed)


def arrival_direction(scene, scatterer):
    """Elevation/azimuth of the BS arrival direction for one scatterer.

    Angles follow the array convention: elevation is measured from the
    vertical axis (arccos of the z component of the unit direction), azimuth
    from the horizontal array axis within the horizontal plane, both in
    [0, pi].  A perfectly vertical direction has no defined azimuth; pi/2
    (broadside) is returned in that case.
    """
    u = np.asarray(scatterer, dtype=float) - scene.bs_position
    dist = np.linalg.norm(u)
    if dist == 0:
        raise ValueError("scatterer coincides with the BS")
    u = u / dist
    elevation = np.arccos(np.clip(u[2], -1.0, 1.0))
    horiz = np.hypot(u[0], u[1])
    if horiz < 1e-12:
        return elevation, np.pi / 2
    azimuth = np.arccos(np.clip(u[1] / horiz, -1.0, 1.0))
    return elevation, azimuth


def paths_for_position(scene, position, ofdm, snap_delays=False):
    """Build the PathSet seen from one terminal position.

    Each scatterer contributes a path with delay (|pos - scat| + |scat - bs|)
    divided by c * sample_interval.  Paths whose delay falls outside the
    guard interval are dropped; powers combine the scatterer gain with a
    length^-pathloss_exponent decay and are normalised to sum to one.

    Args:
        scene: Scene instance.
        position: terminal position, inside ``scene.bounds``.
        ofdm: OFDMConfig, supplies the sample interval and guard length.
        snap_delays: round delays to the nearest integer sample (useful for
            on-grid studies).

    Raises:
        ValueError: position outside the scene bounds, or every path exceeds
            the guard interval.
    """
    position = np.asarray(position, dtype=float)
    if not scene.bounds.contains(position):
        raise ValueError(f"position {position} outside scene bounds")
    d_mt = np.linalg.norm(position - scene.scatterers, axis=1)
    d_bs = np.linalg.norm(scene.scatterers - scene.bs_position, axis=1)
    lengths = d_mt + d_bs
    delays = lengths / (SPEED_OF_LIGHT * ofdm.sample_interval)
    if snap_delays:
        delays = np.rint(delays)
    keep = np.flatnonzero(delays < ofdm.guard_len)
    if keep.size == 0:
        raise ValueError("all paths exceed the guard interval; "
                         "increase guard_len or shrink the scene")
    powers = (10.0 ** (scene.gains_db[keep] / 10.0)
              * lengths[keep] ** (-scene.pathloss_exponent))
    powers = powers / powers.sum()
    paths = []
    for j, idx in enumerate(keep):
        elevation, azimuth = arrival_direction(scene, scene.scatterers[idx])
        paths.append(PathParam(elevation=float(elevation),
                               azimuth=float(azimuth),
                               delay=float(delays[idx]),
                               power=float(powers[j])))
    return PathSet(paths=paths, position=position)


# ---------------------------------------------------------------------------
# scene (de)serialisation
# ---------------------------------------------------------------------------

def save_scene(scene, path):
    """Write a scene to JSON."""
    payload = {
        "bs_position": list(map(float, scene.bs_position)),
        "scatterers": [
            {"position": list(map(float, pos)), "gain_db": float(g)}
            for pos, g in zip(scene.scatterers, scene.gains_db)
        ],
        "bounds": {"lo": list(scene.bounds.lo), "hi": list(scene.bounds.hi)},
        "pathloss_exponent": float(scene.pathloss_exponent),
        "seed": scene.seed,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_scene(path):
    """Read a scene written by :func:`save_scene`."""
    with open(path) as fh:
        payload = json.load(fh)
    scatterers = np.array([s["position"] for s in payload["scatterers"]],
                          dtype=float)
    gains_db = np.array([s["gain_db"] for s in payload["scatterers"]],
                        dtype=float)
    return Scene(bs_position=np.asarray(payload["bs_position"], dtype=float),
                 scatterers=scatterers,
                 gains_db=gains_db,
                 bounds=Box(tuple(payload["bounds"]["lo"]),
                            tuple(payload["bounds"]["hi"])),
                 pathloss_exponent=float(payload["pathloss_exponent"]),
                 seed=payload.get("seed"))
