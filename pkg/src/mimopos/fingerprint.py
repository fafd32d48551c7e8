"""Angle-delay domain fingerprints of massive MIMO-OFDM channels.

The space-frequency response H (n_antennas x n_subcarriers) is mapped into
the angle-delay domain by unitary phase-shifted DFTs across the array axes
and a truncated DFT across frequency:

    G = (V_rows^H kron V_cols^H) @ H @ conj(F) / sqrt(rows*cols*n_subcarriers)

Averaging |G|^2 over small-scale fading yields the angle-delay channel
power matrix, the position fingerprint used throughout this package.  The
same averaging applied to |H|^2 gives the space-frequency power matrix,
kept as a baseline.  Closed forms exist for both because path gains are
independent and zero mean, so cross terms vanish in expectation.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .channel import sample_gains, sfcrm, steering

KIND_ANGLE_DELAY = "angle-delay"
KIND_SPACE_FREQ = "space-frequency"

_MAGIC = b"MPOSFPR\x00"
_FORMAT_VERSION = 1
_KIND_CODES = {KIND_ANGLE_DELAY: 0, KIND_SPACE_FREQ: 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def dft_phase_shifted(m):
    """Phase-shifted unitary DFT matrix of size m.

    Entry (i, j) is exp(-2j*pi*i*(j - m/2)/m) / sqrt(m).  The half-length
    column shift centres the angle grid on broadside; the matrix stays
    unitary because the shift is a per-row phase of modulus one.
    """
    if m < 1:
        raise ValueError("matrix size must be positive")
    i = np.arange(m)
    return np.exp(-2j * np.pi * np.outer(i, i - m / 2) / m) / np.sqrt(m)


def dft_truncated(n_rows, n_cols):
    """First n_cols columns of the n_rows-point unitary DFT matrix.

    Columns are orthonormal; the matrix is square-unitary when
    n_cols == n_rows.
    """
    if not 0 < n_cols <= n_rows:
        raise ValueError("need 0 < n_cols <= n_rows")
    i = np.arange(n_rows)
    j = np.arange(n_cols)
    return np.exp(-2j * np.pi * np.outer(i, j) / n_rows) / np.sqrt(n_rows)


def angle_domain_cir(vec, geom):
    """Transform array-indexed vectors into the angle domain.

    Applies (V_rows^H kron V_cols^H) to the trailing axis of ``vec``,
    which must have length rows*cols.
    """
    vec = np.asarray(vec)
    if vec.shape[-1] != geom.n_antennas:
        raise ValueError("trailing axis must match the antenna count")
    lead = vec.shape[:-1]
    t = vec.reshape(lead + (geom.rows, geom.cols))
    vm = dft_phase_shifted(geom.rows)
    vn = dft_phase_shifted(geom.cols)
    t = np.einsum("am,...mn->...an", vm.conj().T, t)
    t = np.einsum("bn,...an->...ab", vn.conj().T, t)
    return t.reshape(lead + (geom.n_antennas,))


def to_angle_delay(h, geom, ofdm):
    """Map space-frequency responses to the angle-delay domain.

    Args:
        h: array (..., n_antennas, n_subcarriers); leading axes are batch.
        geom: ArrayGeometry.
        ofdm: OFDMConfig; the delay axis is truncated to ``guard_len``.

    Returns:
        array (..., n_antennas, guard_len).
    """
    h = np.asarray(h)
    mn = geom.n_antennas
    nc = ofdm.n_subcarriers
    if h.shape[-2:] != (mn, nc):
        raise ValueError(
            f"expected trailing shape {(mn, nc)}, got {h.shape[-2:]}")
    lead = h.shape[:-2]
    vm = dft_phase_shifted(geom.rows)
    vn = dft_phase_shifted(geom.cols)
    f = dft_truncated(nc, ofdm.guard_len)
    t = h.reshape(lead + (geom.rows, geom.cols, nc))
    t = np.einsum("am,...mnl->...anl", vm.conj().T, t)
    t = np.einsum("bn,...anl->...abl", vn.conj().T, t)
    g = t @ f.conj()
    g = g / np.sqrt(mn * nc)
    return g.reshape(lead + (mn, ofdm.guard_len))


@dataclass
class Fingerprint:
    """A channel power matrix tagged with its domain and array split.

    ``matrix`` is (rows*cols, depth) for the angle-delay kind with depth
    equal to the guard length, or (rows*cols, n_subcarriers) for the
    space-frequency kind.  ``tensor`` exposes the (rows, cols, depth) view
    used by the 3D localisation network.
    """

    matrix: np.ndarray
    rows: int
    cols: int
    kind: str = KIND_ANGLE_DELAY

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.ndim != 2:
            raise ValueError("fingerprint matrix must be 2-D")
        if self.matrix.shape[0] != self.rows * self.cols:
            raise ValueError("leading axis must equal rows*cols")
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown fingerprint kind {self.kind!r}")

    @property
    def tensor(self):
        return self.matrix.reshape(self.rows, self.cols, -1)

    @property
    def total_power(self):
        return float(self.matrix.sum())


def fingerprint_tensor(matrix, rows, cols):
    """Reshape a (rows*cols, depth) power matrix to (rows, cols, depth)."""
    matrix = np.asarray(matrix)
    if matrix.shape[0] != rows * cols:
        raise ValueError("leading axis must equal rows*cols")
    return matrix.reshape(rows, cols, -1)


def _path_factors(paths, geom, ofdm):
    """Angle and delay transform factors, one row per path.

    Returns (angle, delay) with angle (n_paths, n_antennas) being the
    angle-domain steering vectors and delay (n_paths, guard_len) the
    delay-domain frequency signatures; the product
    angle[p, :, None] * delay[p, None, :] / sqrt(rows*cols*n_subcarriers)
    is the angle-delay response of path p at unit gain.
    """
    steer = np.stack([steering(geom, p.elevation, p.azimuth) for p in paths])
    ang = angle_domain_cir(steer, geom)
    l = np.arange(ofdm.n_subcarriers)
    freq = np.exp(-2j * np.pi * np.outer(paths.delays, l)
                  / ofdm.n_subcarriers)
    f = dft_truncated(ofdm.n_subcarriers, ofdm.guard_len)
    delay = freq @ f.conj()
    return ang, delay


def adcpm_exact(paths, geom, ofdm):
    """Closed-form angle-delay channel power matrix.

    With independent zero-mean gains the expectation of |G|^2 reduces to the
    power-weighted sum of the per-path |angle-delay response|^2; no fading
    realisations are needed.
    """
    if len(paths) == 0:
        raise ValueError("path set is empty")
    ang, delay = _path_factors(paths, geom, ofdm)
    scale = geom.n_antennas * ofdm.n_subcarriers
    per_path = (np.abs(ang[:, :, None]) ** 2
                * np.abs(delay[:, None, :]) ** 2) / scale
    matrix = np.einsum("p,pij->ij", paths.powers, per_path)
    return Fingerprint(matrix, geom.rows, geom.cols, KIND_ANGLE_DELAY)


def adcpm_mc(paths, geom, ofdm, n_samples, rng, chunk=2048):
    """Monte-Carlo angle-delay channel power matrix.

    Averages |G|^2 over ``n_samples`` independent gain draws.  Gains enter
    the angle-delay response linearly through fixed per-path factors, so
    each realisation is assembled directly in the transform domain; this is
    algebraically identical to transforming each space-frequency
    realisation, only cheaper.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    ang, delay = _path_factors(paths, geom, ofdm)
    scale = np.sqrt(geom.n_antennas * ofdm.n_subcarriers)
    acc = np.zeros((geom.n_antennas, ofdm.guard_len))
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        gains = sample_gains(paths, rng, size=n)
        g = np.einsum("sp,pi,pj->sij", gains, ang, delay) / scale
        acc += np.einsum("sij,sij->ij", g.real, g.real)
        acc += np.einsum("sij,sij->ij", g.imag, g.imag)
        done += n
    matrix = acc / n_samples
    return Fingerprint(matrix, geom.rows, geom.cols, KIND_ANGLE_DELAY)


def sfcpm_exact(paths, geom, ofdm):
    """Closed-form space-frequency channel power matrix.

    Every entry of a single-path response has unit modulus, so the exact
    expectation is flat: each entry equals the summed path power.  The
    matrix therefore carries no position information; discrimination in the
    space-frequency domain only appears in finite-sample averages, see
    :func:`sfcpm_mc`.
    """
    if len(paths) == 0:
        raise ValueError("path set is empty")
    matrix = np.full((geom.n_antennas, ofdm.n_subcarriers),
                     float(paths.powers.sum()))
    return Fingerprint(matrix, geom.rows, geom.cols, KIND_SPACE_FREQ)


def sfcpm_mc(paths, geom, ofdm, n_samples, rng, chunk=256):
    """Monte-Carlo space-frequency channel power matrix."""
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    steer = np.stack([steering(geom, p.elevation, p.azimuth) for p in paths])
    l = np.arange(ofdm.n_subcarriers)
    freq = np.exp(-2j * np.pi * np.outer(paths.delays, l)
                  / ofdm.n_subcarriers)
    acc = np.zeros((geom.n_antennas, ofdm.n_subcarriers))
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        gains = sample_gains(paths, rng, size=n)
        h = np.einsum("sp,pi,pl->sil", gains, steer, freq)
        acc += np.einsum("sil,sil->il", h.real, h.real)
        acc += np.einsum("sil,sil->il", h.imag, h.imag)
        done += n
    matrix = acc / n_samples
    return Fingerprint(matrix, geom.rows, geom.cols, KIND_SPACE_FREQ)


# ---------------------------------------------------------------------------
# sparsity structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SupportPoint:
    """Predicted fingerprint support of one path (fractional indices)."""

    row: float
    col: float
    delay: float
    power: float


def dirichlet(m, x):
    """Periodic sinc sin(m*x) / (m*sin(x)), with its removable singularity.

    At multiples of pi the ratio is evaluated by its limit
    cos(m*x)/cos(x), which is +-1.
    """
    x = np.asarray(x, dtype=float)
    sin_x = np.sin(x)
    singular = np.isclose(sin_x, 0.0, atol=1e-12)
    safe = np.where(singular, 1.0, sin_x)
    out = np.sin(m * x) / (m * safe)
    limit = np.cos(m * x) / np.cos(x)
    result = np.where(singular, limit, out)
    if result.ndim == 0:
        return float(result)
    return result


def predict_support(paths, geom):
    """Fractional fingerprint support of each path.

    The vertical angle index is rows/2 + rows*(d_v/wavelength)*cos(el), the
    horizontal index cols/2 + cols*(d_h/wavelength)*sin(el)*cos(az), and the
    delay index is the path delay in samples.  Power concentrates in a small
    window around these (generally non-integer) coordinates, collapsing to a
    single entry when all of them are integers.
    """
    points = []
    for p in paths:
        row = (geom.rows / 2 + geom.rows * (geom.spacing_v / geom.wavelength)
               * np.cos(p.elevation))
        col = (geom.cols / 2 + geom.cols * (geom.spacing_h / geom.wavelength)
               * np.sin(p.elevation) * np.cos(p.azimuth))
        points.append(SupportPoint(row=float(row), col=float(col),
                                   delay=float(p.delay), power=float(p.power)))
    return points


def concentration_fraction(fingerprint, supports, window=1):
    """Fraction of total power inside index windows around the supports.

    For each support the window spans +-``window`` bins around the rounded
    coordinates.  Angle axes wrap modulo the grid size (the DFT grid is
    circular); the delay axis is clipped to the guard interval.

    Args:
        fingerprint: Fingerprint (angle-delay kind).
        supports: iterable of SupportPoint.
        window: half-width in bins.
    """
    supports = list(supports)
    if not supports:
        raise ValueError("no support points given")
    if window < 0:
        raise ValueError("window must be non-negative")
    tensor = fingerprint.tensor
    rows, cols, depth = tensor.shape
    mask = np.zeros(tensor.shape, dtype=bool)
    offsets = np.arange(-window, window + 1)
    for s in supports:
        r = (int(np.round(s.row)) + offsets) % rows
        c = (int(np.round(s.col)) + offsets) % cols
        d = int(np.round(s.delay)) + offsets
        d = d[(d >= 0) & (d < depth)]
        if d.size == 0:
            continue
        mask[np.ix_(r, c, d)] = True
    total = tensor.sum()
    if total <= 0:
        raise ValueError("fingerprint has no power")
    return float(tensor[mask].sum() / total)


# ---------------------------------------------------------------------------
# measurement effects
# ---------------------------------------------------------------------------

def awgn_contaminate(h, snr_db, rng):
    """Add white complex Gaussian noise at the given SNR.

    The noise variance is set against the mean squared magnitude of ``h``
    so that 10*log10(signal power / noise power) == snr_db.
    """
    h = np.asarray(h)
    signal_power = float(np.mean(np.abs(h) ** 2))
    noise_power = signal_power * 10.0 ** (-snr_db / 10.0)
    noise = (rng.normal(size=h.shape) + 1j * rng.normal(size=h.shape))
    return h + noise * np.sqrt(noise_power / 2)


def denoise(matrix, alpha=0.02):
    """Zero all entries below alpha * max(matrix).

    A crude threshold denoiser for power matrices: noise spreads uniformly
    over the grid while the channel concentrates in few entries, so a small
    fraction of the peak separates them.
    """
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    matrix = np.asarray(matrix, dtype=float)
    return np.where(matrix >= alpha * matrix.max(), matrix, 0.0)


def measured_fingerprint(paths, geom, ofdm, n_samples, rng, kind=KIND_ANGLE_DELAY,
                         snr_db=None):
    """Estimate a fingerprint from simulated channel measurements.

    Draws ``n_samples`` fading realisations of the space-frequency response,
    optionally contaminates them with AWGN at ``snr_db``, and averages the
    squared magnitudes in the requested domain.  This is the online
    counterpart of the noise-free database fingerprints.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    if kind not in _KIND_CODES:
        raise ValueError(f"unknown fingerprint kind {kind!r}")
    if snr_db is None and kind == KIND_ANGLE_DELAY:
        return adcpm_mc(paths, geom, ofdm, n_samples, rng)
    if snr_db is None and kind == KIND_SPACE_FREQ:
        return sfcpm_mc(paths, geom, ofdm, n_samples, rng)
    gains = sample_gains(paths, rng, size=n_samples)
    h = sfcrm(paths, gains, geom, ofdm)
    h = awgn_contaminate(h, snr_db, rng)
    if kind == KIND_SPACE_FREQ:
        matrix = np.mean(np.abs(h) ** 2, axis=0)
        return Fingerprint(matrix, geom.rows, geom.cols, KIND_SPACE_FREQ)
    g = to_angle_delay(h, geom, ofdm)
    matrix = np.mean(np.abs(g) ** 2, axis=0)
    return Fingerprint(matrix, geom.rows, geom.cols, KIND_ANGLE_DELAY)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def _pack_fingerprint(fp):
    depth = fp.matrix.shape[1]
    header = _MAGIC + struct.pack("<II", _FORMAT_VERSION, 0)
    dims = struct.pack("<III", fp.rows, fp.cols, depth)
    kind = struct.pack("<B", _KIND_CODES[fp.kind])
    data = np.ascontiguousarray(fp.matrix, dtype="<f8").tobytes()
    return header + dims + kind + data


def _unpack_fingerprint(buf):
    if buf[:8] != _MAGIC:
        raise ValueError("not a fingerprint file (bad magic)")
    version, _ = struct.unpack_from("<II", buf, 8)
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported fingerprint format version {version}")
    rows, cols, depth = struct.unpack_from("<III", buf, 16)
    (kind_code,) = struct.unpack_from("<B", buf, 28)
    if kind_code not in _KIND_NAMES:
        raise ValueError(f"unknown fingerprint kind code {kind_code}")
    need = rows * cols * depth * 8
    data = buf[29:29 + need]
    if len(data) != need:
        raise ValueError("fingerprint file truncated")
    matrix = np.frombuffer(data, dtype="<f8").reshape(rows * cols, depth)
    return Fingerprint(matrix.copy(), rows, cols, _KIND_NAMES[kind_code]), 29 + need


def save_fingerprint(fp, path):
    """Write one fingerprint to the binary container format."""
    with open(path, "wb") as fh:
        fh.write(_pack_fingerprint(fp))


def load_fingerprint(path):
    """Read one fingerprint from the binary container format."""
    with open(path, "rb") as fh:
        buf = fh.read()
    fp, used = _unpack_fingerprint(buf)
    if used != len(buf):
        raise ValueError("trailing bytes after fingerprint record")
    return fp


def export_fingerprint_csv(fp, path):
    """Dump the power matrix as CSV, one angle index per row."""
    depth = fp.matrix.shape[1]
    cols = ",".join(f"d{j}" for j in range(depth))
    np.savetxt(path, fp.matrix, delimiter=",", header=cols, comments="",
               fmt="%.17g")
