"""End-to-end experiment pipeline: scenes to fingerprints to position error.

A single :class:`ExperimentConfig` pins every knob of a run — scene layout,
array/OFDM numerology, fingerprint construction, localisation method and
training hyper-parameters — and derives all randomness from one seed, so
repeated runs produce identical artefacts.

The reference (training) fingerprints are noise free: closed-form
angle-delay power matrices, or long noiseless Monte-Carlo averages for the
space-frequency kind, whose exact expectation is flat and carries no
position information.  Test fingerprints are always estimated from a finite
number of fading realisations, optionally noisy, which is what an online
system would measure.
"""

import json
import time
from dataclasses import dataclass, asdict, field, replace

import numpy as np

from .channel import (ArrayGeometry, Box, OFDMConfig, SPEED_OF_LIGHT,
                      generate_scene, paths_for_position, save_scene)
from .fingerprint import (KIND_ANGLE_DELAY, KIND_SPACE_FREQ, adcpm_exact,
                          adcpm_mc, denoise, dft_phase_shifted, dft_truncated,
                          measured_fingerprint, predict_support,
                          concentration_fraction, sfcpm_mc, to_angle_delay)
from .channel import PathParam, PathSet, sample_gains, sfcrm
from .network import CNNLocalizer
from .wknn import WKNNLocalizer, save_database


@dataclass(frozen=True)
class ExperimentConfig:
    """All knobs of one experiment; serialisable to/from JSON."""

    # scene
    area_lo: tuple = (-5.0, -5.0, 0.0)
    area_hi: tuple = (5.0, 5.0, 9.0)
    plane_heights: tuple = (1.5, 4.5, 7.5)
    bs_position: tuple = (-100.0, 0.0, 25.0)
    n_scatterers: int = 50
    pathloss_exponent: float = 2.0
    scatter_margin: float = 20.0
    scatter_gain_std_db: float = 6.0
    # array / OFDM
    rows: int = 4
    cols: int = 8
    carrier_frequency_hz: float = 2.0e9
    n_subcarriers: int = 128
    guard_len: int = 32
    sample_interval: float = 5.0e-8
    # fingerprints
    fingerprint_kind: str = KIND_ANGLE_DELAY
    n_realizations: int = 100
    db_realizations: int = 1000
    snr_db: float = None
    denoise_alpha: float = 0.02
    # dataset
    grid_spacing: float = 1.0
    n_test: int = 200
    # localisation
    method: str = "cnn3d"
    k_neighbors: int = 4
    epochs: int = 150
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    inception_base: int = 8
    branch_channels: int = 8
    merge_channels: int = 16
    seed: int = 1

    def __post_init__(self):
        for name in ("area_lo", "area_hi", "plane_heights", "bs_position"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.fingerprint_kind not in (KIND_ANGLE_DELAY, KIND_SPACE_FREQ):
            raise ValueError(f"unknown fingerprint kind "
                             f"{self.fingerprint_kind!r}")
        if self.method not in ("wknn", "cnn3d", "cnn2d"):
            raise ValueError(f"unknown method {self.method!r}")

    @property
    def wavelength(self):
        return SPEED_OF_LIGHT / self.carrier_frequency_hz

    def geometry(self):
        return ArrayGeometry(rows=self.rows, cols=self.cols,
                             wavelength=self.wavelength)

    def ofdm(self):
        return OFDMConfig(n_subcarriers=self.n_subcarriers,
                          guard_len=self.guard_len,
                          sample_interval=self.sample_interval)

    def area(self):
        return Box(self.area_lo, self.area_hi)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        return cls(**payload)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def config_digest(config):
    """Short stable digest of a config, for tagging artefacts."""
    import hashlib
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Fingerprints plus positions for one split."""

    tensors: np.ndarray      # (n, rows, cols, depth)
    positions: np.ndarray    # (n, 3)
    kind: str
    split: str

    def __len__(self):
        return self.tensors.shape[0]

    @property
    def matrices(self):
        n, r, c, d = self.tensors.shape
        return self.tensors.reshape(n, r * c, d)


def build_scene(config):
    return generate_scene(bounds=config.area(),
                          bs_position=config.bs_position,
                          n_scatterers=config.n_scatterers,
                          seed=config.seed,
                          pathloss_exponent=config.pathloss_exponent,
                          margin=config.scatter_margin,
                          gain_std_db=config.scatter_gain_std_db)


def reference_grid(config):
    """Reference-point positions: a regular grid on each height plane."""
    lo, hi = np.asarray(config.area_lo), np.asarray(config.area_hi)
    step = config.grid_spacing
    nx = int(round((hi[0] - lo[0]) / step)) + 1
    ny = int(round((hi[1] - lo[1]) / step)) + 1
    xs = np.linspace(lo[0], hi[0], nx)
    ys = np.linspace(lo[1], hi[1], ny)
    points = [(x, y, z) for z in config.plane_heights for y in ys for x in xs]
    return np.array(points)


def test_positions(config):
    """Uniformly random test positions on the height planes."""
    rng = np.random.default_rng([config.seed, 10])
    lo, hi = np.asarray(config.area_lo), np.asarray(config.area_hi)
    xy = rng.uniform(lo[:2], hi[:2], size=(config.n_test, 2))
    planes = np.asarray(config.plane_heights)
    z = planes[rng.integers(0, len(planes), size=config.n_test)]
    return np.column_stack([xy, z])


def reference_fingerprint(config, scene, position):
    """Noise-free database fingerprint for one reference point."""
    geom, ofdm = config.geometry(), config.ofdm()
    paths = paths_for_position(scene, position, ofdm)
    if config.fingerprint_kind == KIND_ANGLE_DELAY:
        return adcpm_exact(paths, geom, ofdm)
    rng = np.random.default_rng([config.seed, 11, _pos_key(position)])
    return sfcpm_mc(paths, geom, ofdm, config.db_realizations, rng)

def _pos_key(position):
    # stable non-negative integer from a position, for seeding streams
    return int(np.abs(np.asarray(position) * 4096).sum()) % (2 ** 31)


def training_dataset(config, scene):
    positions = reference_grid(config)
    tensors = np.stack([reference_fingerprint(config, scene, p).tensor
                        for p in positions])
    return Dataset(tensors=tensors, positions=positions,
                   kind=config.fingerprint_kind, split="train")


def test_dataset(config, scene, positions=None, snr_db="config"):
    """Measured fingerprints at random (or given) test positions.

    Each position gets its own random stream derived from the config seed
    and its index (but not the SNR), so datasets are reproducible, two
    methods evaluated on the same config see identical measurements, and an
    SNR sweep reuses the same channel and noise draws at every level —
    only the noise scale changes.
    """
    if snr_db == "config":
        snr_db = config.snr_db
    if positions is None:
        positions = test_positions(config)
    geom, ofdm = config.geometry(), config.ofdm()
    tensors = []
    for i, pos in enumerate(positions):
        paths = paths_for_position(scene, pos, ofdm)
        rng = np.random.default_rng([config.seed, 20, i])
        fp = measured_fingerprint(paths, geom, ofdm, config.n_realizations,
                                  rng, kind=config.fingerprint_kind,
                                  snr_db=snr_db)
        matrix = fp.matrix
        if snr_db is not None and config.fingerprint_kind == KIND_ANGLE_DELAY:
            matrix = denoise(matrix, config.denoise_alpha)
        tensors.append(matrix.reshape(geom.rows, geom.cols, -1))
    return Dataset(tensors=np.stack(tensors), positions=np.asarray(positions),
                   kind=config.fingerprint_kind, split="test")


def save_dataset(ds, path):
    rows, cols = ds.tensors.shape[1:3]
    from .wknn import FingerprintDatabase
    db = FingerprintDatabase(ds.tensors, ds.positions)
    save_database(db, path, rows, cols, ds.kind)


def load_dataset(path, split="train"):
    from .wknn import load_database
    db, (rows, cols, kind) = load_database(path)
    return Dataset(tensors=db.fingerprints, positions=db.positions,
                   kind=kind, split=split)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    method: str
    fingerprint_kind: str
    errors: np.ndarray
    latency_ms: float
    storage_bytes: int
    train_seconds: float
    history: list = field(default_factory=list)

    @property
    def mean_error(self):
        return float(self.errors.mean())

    def percentile(self, q):
        return float(np.quantile(self.errors, q / 100.0))

    def summary(self):
        return {
            "method": self.method,
            "fingerprint": self.fingerprint_kind,
            "n_test": int(self.errors.size),
            "mean_error_m": self.mean_error,
            "median_error_m": self.percentile(50),
            "p67_error_m": self.percentile(67),
            "p90_error_m": self.percentile(90),
            "max_error_m": float(self.errors.max()),
            "latency_ms_per_query": self.latency_ms,
            "storage_bytes": self.storage_bytes,
            "train_seconds": self.train_seconds,
        }


def _cnn_inputs(ds, method):
    # the 3-D net sees (rows, cols, depth) tensors, the 2-D net the flat
    # (rows*cols, depth) matrices
    if method == "cnn3d":
        return ds.tensors
    return ds.matrices


def fit_localizer(config, train_ds, method=None):
    """Train the configured localizer on a training dataset."""
    method = method or config.method
    if method == "wknn":
        model = WKNNLocalizer(n_neighbors=config.k_neighbors)
        model.fit(train_ds.tensors, train_ds.positions)
        return model
    if method in ("cnn3d", "cnn2d"):
        model = CNNLocalizer(kind=method, epochs=config.epochs,
                             batch_size=config.batch_size,
                             learning_rate=config.learning_rate,
                             weight_decay=config.weight_decay,
                             seed=config.seed,
                             inception_base=config.inception_base,
                             branch_channels=config.branch_channels,
                             merge_channels=config.merge_channels)
        model.fit(_cnn_inputs(train_ds, method), train_ds.positions)
        return model
    raise ValueError(f"unknown method {method!r}")


def _model_inputs(model, ds):
    if isinstance(model, WKNNLocalizer):
        return ds.tensors
    return _cnn_inputs(ds, model.kind)


def _measure_latency(model, ds, n_queries=32):
    """Median wall-clock per single-fingerprint query, in milliseconds."""
    X = _model_inputs(model, ds)
    n = min(n_queries, X.shape[0])
    model.predict(X[:1])  # warm up
    times = []
    for i in range(n):
        t0 = time.perf_counter()
        model.predict(X[i:i + 1])
        times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1e3)


def _measure_storage(model, workdir):
    import os
    if isinstance(model, WKNNLocalizer):
        path = os.path.join(workdir, "wknn_db.fpdb")
        rows, cols = model.db_.fingerprints.shape[1:3]
        save_database(model.db_, path, rows, cols, KIND_ANGLE_DELAY)
        return os.path.getsize(path)
    path = os.path.join(workdir, f"{model.kind}_model.json")
    manifest, blob = model.save(path)
    return os.path.getsize(manifest) + os.path.getsize(blob)


def evaluate(model, method, test_ds, workdir=None, train_seconds=0.0):
    X = _model_inputs(model, test_ds)
    pred = model.predict(X)
    errors = np.linalg.norm(pred - test_ds.positions, axis=1)
    latency = _measure_latency(model, test_ds)
    storage = _measure_storage(model, workdir) if workdir else 0
    history = list(getattr(model, "history_", []))
    return EvalResult(method=method, fingerprint_kind=test_ds.kind,
                      errors=errors, latency_ms=latency,
                      storage_bytes=storage, train_seconds=train_seconds,
                      history=history)


def run_method(config, train_ds, test_ds, method=None, workdir=None):
    method = method or config.method
    t0 = time.perf_counter()
    model = fit_localizer(config, train_ds, method)
    train_seconds = time.perf_counter() - t0
    return evaluate(model, method, test_ds, workdir=workdir,
                    train_seconds=train_seconds), model


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------

def write_cdf_csv(errors, path):
    """Sorted error CDF: columns error_m, cdf."""
    errors = np.sort(np.asarray(errors, dtype=float))
    n = errors.size
    with open(path, "w") as fh:
        fh.write("error_m,cdf\n")
        for i, e in enumerate(errors):
            fh.write(f"{e:.9g},{(i + 1) / n:.9g}\n")


def write_sweep_csv(rows, path):
    """SNR sweep table: columns method, fingerprint, snr_db, mean_error_m."""
    with open(path, "w") as fh:
        fh.write("method,fingerprint,snr_db,mean_error_m\n")
        for method, kind, snr, err in rows:
            fh.write(f"{method},{kind},{snr:.9g},{err:.9g}\n")


def compare_methods(config, methods=("wknn", "cnn3d"), workdir=None,
                    scene=None, train_ds=None, test_ds=None, echo=print):
    """Train and evaluate several methods on one shared dataset pair.

    Writes cdf_<method>.csv and report.json into ``workdir`` (if given) and
    returns {method: EvalResult}.
    """
    import os
    scene = scene or build_scene(config)
    train_ds = train_ds or training_dataset(config, scene)
    test_ds = test_ds or test_dataset(config, scene)
    results = {}
    for method in methods:
        result, _ = run_method(config, train_ds, test_ds, method=method,
                               workdir=workdir)
        results[method] = result
        if echo:
            s = result.summary()
            echo(f"{method}: mean {s['mean_error_m']:.3f} m, "
                 f"median {s['median_error_m']:.3f} m, "
                 f"p90 {s['p90_error_m']:.3f} m")
        if workdir:
            write_cdf_csv(result.errors, os.path.join(workdir,
                                                      f"cdf_{method}.csv"))
    if workdir:
        report = {
            "config_digest": config_digest(config),
            "config": config.to_dict(),
            "results": {m: r.summary() for m, r in results.items()},
        }
        with open(os.path.join(workdir, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return results


def snr_sweep(config, snrs=(4.0, 10.0, 20.0), methods=("wknn", "cnn3d"),
              kinds=(KIND_ANGLE_DELAY, KIND_SPACE_FREQ), workdir=None,
              echo=print):
    """Mean error versus SNR for each method/fingerprint combination.

    Models are trained once per (method, kind) on noise-free fingerprints
    and reused across SNRs; at each SNR all methods see the same measured
    test set, so differences are down to the estimator, not the draw.
    """
    import os
    scene = build_scene(config)
    positions = test_positions(config)
    rows = []
    for kind in kinds:
        kcfg = replace(config, fingerprint_kind=kind)
        train_ds = training_dataset(kcfg, scene)
        models = {m: fit_localizer(kcfg, train_ds, m) for m in methods}
        for snr in snrs:
            test_ds = test_dataset(kcfg, scene, positions=positions,
                                   snr_db=snr)
            for method in methods:
                pred = models[method].predict(
                    _model_inputs(models[method], test_ds))
                err = float(np.linalg.norm(
                    pred - test_ds.positions, axis=1).mean())
                rows.append((method, kind, float(snr), err))
                if echo:
                    echo(f"{method} / {kind} @ {snr:g} dB: "
                         f"mean {err:.3f} m")
    if workdir:
        write_sweep_csv(rows, os.path.join(workdir, "sweep.csv"))
    return rows


# ---------------------------------------------------------------------------
# numerical verification of the sparsity/concentration theory
# ---------------------------------------------------------------------------

# Fixed off-grid demonstration paths (elevation, azimuth, delay in samples,
# power).  Delays stay below the smallest guard interval of the dimension
# ladder, and the angles are chosen so the grid alignment improves along
# the ladder, making the concentration trend strictly visible.
DEMO_PATHS = PathSet(paths=[
    PathParam(2.247525889, 1.330073224, 8.051882690, 0.209060813),
    PathParam(0.722760798, 1.570907625, 13.040033266, 0.715170884),
    PathParam(1.210616128, 1.715997711, 2.187274212, 0.075768302),
])

# Dimension ladder (rows, cols, subcarriers); guard = subcarriers / 4.
DIMENSION_LADDER = ((4, 4, 64), (8, 8, 128), (16, 16, 256), (32, 32, 512))


def _ladder_geometries():
    for rows, cols, n_sub in DIMENSION_LADDER:
        geom = ArrayGeometry(rows=rows, cols=cols, wavelength=1.0)
        ofdm = OFDMConfig(n_subcarriers=n_sub, guard_len=n_sub // 4,
                          sample_interval=5e-8)
        yield geom, ofdm


def concentration_trend(paths=DEMO_PATHS, window=1):
    """In-window power fraction of the closed-form fingerprint per rung."""
    fractions = []
    for geom, ofdm in _ladder_geometries():
        fp = adcpm_exact(paths, geom, ofdm)
        supports = predict_support(paths, geom)
        fractions.append(concentration_fraction(fp, supports, window=window))
    return fractions


def verify_theory(echo=print):
    """Run the numeric checks behind the fingerprint construction.

    Returns a dict of measured values and booleans; ``echo`` (if not None)
    prints one line per check.
    """
    checks = {}

    # 1. transform unitarity / orthonormality
    residual = 0.0
    for m in range(1, 33):
        v = dft_phase_shifted(m)
        residual = max(residual, float(np.abs(v.conj().T @ v
                                              - np.eye(m)).max()))
    for n_sub, guard in ((64, 16), (128, 32), (256, 64), (512, 128)):
        f = dft_truncated(n_sub, guard)
        residual = max(residual, float(np.abs(f.conj().T @ f
                                              - np.eye(guard)).max()))
    checks["transform_unitarity_residual"] = residual
    checks["transform_unitarity_ok"] = residual <= 1e-10

    # 2. one-hot fingerprint for an on-grid path
    geom = ArrayGeometry(rows=8, cols=16, wavelength=1.0)
    ofdm = OFDMConfig(n_subcarriers=64, guard_len=16, sample_interval=5e-8)
    elevation = float(np.arccos(0.5))          # vertical index 6
    azimuth = float(np.arccos(0.375 / np.sin(elevation)))  # horizontal 11
    on_grid = PathSet(paths=[PathParam(elevation, azimuth, 5.0, 1.0)])
    fp = adcpm_exact(on_grid, geom, ofdm)
    peak = np.unravel_index(fp.matrix.argmax(), fp.matrix.shape)
    off_support = fp.matrix.copy()
    off_support[peak] = 0.0
    checks["one_hot_index"] = tuple(int(v) for v in peak)
    checks["one_hot_peak"] = float(fp.matrix[peak])
    checks["one_hot_leakage"] = float(off_support.max())
    checks["one_hot_ok"] = (peak == (6 * 16 + 11, 5)
                            and abs(fp.matrix[peak] - 1.0) <= 1e-9
                            and off_support.max() <= 1e-9)

    # 3. per-realisation power conservation (on-grid delays)
    cons_paths = PathSet(paths=[
        PathParam(1.2, 0.7, 3.0, 0.5),
        PathParam(0.9, 2.1, 7.0, 0.3),
        PathParam(1.7, 1.3, 11.0, 0.2),
    ])
    rng = np.random.default_rng(123)
    gains = sample_gains(cons_paths, rng, size=200)
    h = sfcrm(cons_paths, gains, geom, ofdm)
    g = to_angle_delay(h, geom, ofdm)
    totals_h = np.sum(np.abs(h) ** 2, axis=(1, 2)) / (geom.n_antennas
                                                      * ofdm.n_subcarriers)
    totals_g = np.sum(np.abs(g) ** 2, axis=(1, 2))
    rel = float(np.max(np.abs(totals_g - totals_h)
                       / np.maximum(totals_h, 1e-300)))
    checks["power_conservation_rel_err"] = rel
    checks["power_conservation_ok"] = rel <= 1e-9

    # 4. Monte-Carlo total power agrees with the closed form within 3 SE
    exact_total = adcpm_exact(cons_paths, geom, ofdm).total_power
    mc_totals = totals_g  # each realisation contributes one total
    se = float(mc_totals.std(ddof=1) / np.sqrt(mc_totals.size))
    gap = float(abs(mc_totals.mean() - exact_total))
    checks["mc_total_gap"] = gap
    checks["mc_total_se"] = se
    checks["mc_total_ok"] = gap <= 3 * se

    # 5. Monte-Carlo fingerprint converges at the 1/sqrt(n) rate
    exact = adcpm_exact(DEMO_PATHS, geom, ofdm).matrix
    exact_norm = float(np.linalg.norm(exact))
    errs = {}
    for n in (10_000, 100_000):
        mc = adcpm_mc(DEMO_PATHS, geom, ofdm, n,
                      np.random.default_rng(7)).matrix
        errs[n] = float(np.linalg.norm(mc - exact) / exact_norm)
    checks["mc_rel_err_1e4"] = errs[10_000]
    checks["mc_rel_err_1e5"] = errs[100_000]
    ratio = errs[10_000] / errs[100_000]
    checks["mc_err_ratio"] = ratio
    checks["mc_convergence_ok"] = (errs[10_000] <= 0.05
                                   and errs[100_000] <= 0.017
                                   and np.sqrt(10) / 2 <= ratio
                                   <= 2 * np.sqrt(10))

    # 6. concentration trend along the dimension ladder
    fractions = concentration_trend()
    checks["concentration_fractions"] = fractions
    checks["concentration_ok"] = (all(a <= b for a, b in zip(fractions,
                                                             fractions[1:]))
                                  and fractions[-1] >= 0.9)

    checks["all_ok"] = all(v for k, v in checks.items() if k.endswith("_ok"))
    if echo:
        for key in ("transform_unitarity", "one_hot", "power_conservation",
                    "mc_total", "mc_convergence", "concentration"):
            status = "PASS" if checks[f"{key}_ok"] else "FAIL"
            echo(f"[{status}] {key}")
    return checks
