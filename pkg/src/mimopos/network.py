"""Regression networks mapping channel power tensors to 3-D positions.

Two architectures share one layer vocabulary:

* ``cnn3d`` consumes the (rows, cols, delay) power tensor.  A two-branch
  refinement unit first correlates each angle axis with the delay axis
  (kernels elongated along delay, flat along one angle axis), then three
  inception stages with widening factors n in {1, 2, 4} aggregate features
  at several receptive fields before a global average and a linear head.
* ``cnn2d`` consumes the flat (rows*cols, depth) power matrix as a
  one-channel image.  Its stem/inception layout follows a reference design
  for 128x128 inputs; kernels, widths and pool sizes shrink proportionally
  for smaller inputs (see :func:`NetworkSpec.scaled_2d`).

All convolutions are stride-1, odd-kernel, zero-padded and bias-free;
down-sampling happens only in pooling layers with floor sizing.
"""

import json
import os
from dataclasses import dataclass, asdict, replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .nn import (Adam, AvgPool3D, BatchNorm3D, Conv3D, GlobalAvgPool, Linear,
                 MaxPool3D, Parallel, ReLU, Sequential, mse_l2_loss)

_MANIFEST_VERSION = 1


def _nearest_odd(x):
    return max(3, int(2 * round((x - 1) / 2) + 1))


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative, serialisable description of a localisation network.

    ``input_shape`` is the spatial shape (rows, cols, depth) of the
    one-channel input tensor; 2-D networks use depth 1.
    """

    kind: str
    input_shape: tuple
    # 3-D refinement unit
    branch_channels: int = 8
    branch_depth: int = 2
    branch_kernel_angle: int = 3
    branch_kernel_delay: int = 7
    branch_pool: tuple = (1, 1, 2)
    merge_channels: int = 16
    merge_pool: tuple = (1, 2, 2)
    mid_pool: tuple = (1, 1, 2)
    late_pool: tuple = (2, 2, 2)
    # inception stages (both kinds)
    inception_factors: tuple = (1, 2, 4)
    inception_base: int = 8
    # 2-D stem
    stem_channels: tuple = (32, 64, 128)
    stem_kernels: tuple = (15, 7, 5)
    stem_pool: int = 5
    final_pool_2d: int = 3
    # head and numerics
    n_outputs: int = 3
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.kind not in ("cnn3d", "cnn2d"):
            raise ValueError(f"unknown network kind {self.kind!r}")
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        for name in ("branch_pool", "merge_pool", "mid_pool", "late_pool",
                     "inception_factors", "stem_channels", "stem_kernels"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        return cls(**payload)

    @classmethod
    def scaled_2d(cls, rows, cols, reference=128, **overrides):
        """2-D spec with kernels/widths/pools scaled from the reference.

        The reference layout targets ``reference x reference`` inputs;
        smaller inputs shrink kernel extents (to the nearest odd value, at
        least 3), channel widths (at least 8) and pool sizes (at least 2)
        by the ratio min(rows, cols) / reference.  Inputs at or above the
        reference keep the reference layout.
        """
        s = min(1.0, min(rows, cols) / reference)
        spec = cls(
            kind="cnn2d",
            input_shape=(rows, cols, 1),
            stem_channels=tuple(max(8, round(c * s)) for c in (32, 64, 128)),
            stem_kernels=tuple(_nearest_odd(k * s) for k in (15, 7, 5)),
            stem_pool=max(2, round(5 * s)),
            final_pool_2d=max(2, round(3 * s)),
            inception_base=max(8, round(64 * s)),
        )
        return replace(spec, **overrides) if overrides else spec


def _cna(in_ch, out_ch, kernel, rng, dtype, name):
    """Convolution + batch normalisation + rectifier."""
    return Sequential([
        Conv3D(in_ch, out_ch, kernel, rng, dtype=dtype, name=f"{name}.conv"),
        BatchNorm3D(out_ch, dtype=dtype, name=f"{name}.bn"),
        ReLU(name=f"{name}.relu"),
    ], name=name)


def _inception(in_ch, width, rng, dtype, name, flat=False):
    """Four-branch inception stage, each branch ``width`` channels wide.

    Branches: 1x1 bottleneck; 1x1 then 3x3; 1x1 then two 3x3; padded 3x3
    average pool then 1x1.  ``flat`` collapses the third axis for 2-D use.
    """
    k1 = (1, 1, 1)
    k3 = (3, 3, 1) if flat else (3, 3, 3)
    b1 = Sequential([_cna(in_ch, width, k1, rng, dtype, f"{name}.b1x1")],
                    name=f"{name}.b1")
    b2 = Sequential([
        _cna(in_ch, width, k1, rng, dtype, f"{name}.b2r"),
        _cna(width, width, k3, rng, dtype, f"{name}.b2c"),
    ], name=f"{name}.b2")
    b3 = Sequential([
        _cna(in_ch, width, k1, rng, dtype, f"{name}.b3r"),
        _cna(width, width, k3, rng, dtype, f"{name}.b3c1"),
        _cna(width, width, k3, rng, dtype, f"{name}.b3c2"),
    ], name=f"{name}.b3")
    b4 = Sequential([
        AvgPool3D(k3, stride=(1, 1, 1), pad=True, name=f"{name}.b4pool"),
        _cna(in_ch, width, k1, rng, dtype, f"{name}.b4p"),
    ], name=f"{name}.b4")
    return Parallel([b1, b2, b3, b4], name=name)


def _build_3d(spec, rng, dtype):
    ka = spec.branch_kernel_angle
    kd = spec.branch_kernel_delay
    bc = spec.branch_channels
    branches = []
    for tag, kernel in (("row", (ka, 1, kd)), ("col", (1, ka, kd))):
        layers = []
        ch = 1
        for i in range(spec.branch_depth):
            layers.append(_cna(ch, bc, kernel, rng, dtype,
                               f"refine.{tag}{i + 1}"))
            ch = bc
        layers.append(MaxPool3D(spec.branch_pool, name=f"refine.{tag}pool"))
        branches.append(Sequential(layers, name=f"refine.{tag}"))
    layers = [
        Parallel(branches, name="refine"),
        _cna(2 * bc, spec.merge_channels, (3, 3, 3), rng, dtype, "merge"),
        MaxPool3D(spec.merge_pool, name="merge.pool"),
    ]
    ch = spec.merge_channels
    for i, factor in enumerate(spec.inception_factors, start=1):
        width = spec.inception_base * factor
        layers.append(_inception(ch, width, rng, dtype, f"incep{i}"))
        ch = 4 * width
        if i == 1:
            layers.append(MaxPool3D(spec.mid_pool, name="incep1.pool"))
    layers.append(MaxPool3D(spec.late_pool, name="late.pool"))
    layers.append(GlobalAvgPool(name="gap"))
    layers.append(Linear(ch, spec.n_outputs, rng, dtype=dtype, name="head"))
    return Sequential(layers, name="cnn3d")


def _build_2d(spec, rng, dtype):
    c1, c2, c3 = spec.stem_channels
    k1, k2, k3 = spec.stem_kernels
    p = spec.stem_pool
    layers = [
        _cna(1, c1, (k1, k1, 1), rng, dtype, "stem1"),
        MaxPool3D((p, p, 1), stride=(2, 2, 1), name="stem1.pool"),
        _cna(c1, c2, (k2, k2, 1), rng, dtype, "stem2"),
        _cna(c2, c3, (k3, k3, 1), rng, dtype, "stem3"),
        MaxPool3D((p, p, 1), stride=(2, 2, 1), name="stem3.pool"),
    ]
    ch = c3
    for i, factor in enumerate(spec.inception_factors, start=1):
        width = spec.inception_base * factor
        layers.append(_inception(ch, width, rng, dtype, f"incep{i}", flat=True))
        ch = 4 * width
        if i == 1:
            layers.append(MaxPool3D((p, p, 1), stride=(2, 2, 1),
                                    name="incep1.pool"))
    fp = spec.final_pool_2d
    layers.append(MaxPool3D((fp, fp, 1), stride=(2, 2, 1), name="late.pool"))
    layers.append(GlobalAvgPool(name="gap"))
    layers.append(Linear(ch, spec.n_outputs, rng, dtype=dtype, name="head"))
    return Sequential(layers, name="cnn2d")


class Network:
    """A built network: layer graph plus its spec."""

    def __init__(self, spec):
        self.spec = spec
        dtype = np.dtype(spec.dtype).type
        rng = np.random.default_rng(spec.seed)
        if spec.kind == "cnn3d":
            self.graph = _build_3d(spec, rng, dtype)
        else:
            self.graph = _build_2d(spec, rng, dtype)
        # validate the whole chain up front; layer names surface in errors
        self.output_shape = self.graph.output_shape(spec.input_shape + (1,))

    def params(self):
        return self.graph.params()

    def buffers(self):
        return self.graph.buffers()

    @property
    def n_params(self):
        return int(sum(p.size for p in self.params()))

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim == 4:
            x = x[..., None]
        if x.ndim != 5 or x.shape[1:] != self.spec.input_shape + (1,):
            raise ValueError(f"expected input shaped "
                             f"(batch, {self.spec.input_shape} + (1,)), "
                             f"got {x.shape}")
        return x.astype(self.spec.dtype, copy=False)

    def forward(self, x, train=False):
        return self.graph.forward(self._check_input(x), train=train)

    def predict(self, x, batch_size=64):
        """Inference-mode forward in batches; returns (n, n_outputs)."""
        x = self._check_input(x)
        outs = [self.graph.forward(x[i:i + batch_size], train=False)
                for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(outs, axis=0).astype(np.float64)

    def backward(self, grad):
        return self.graph.backward(grad)


def build_network(spec):
    return Network(spec)


def train_network(net, inputs, targets, epochs, batch_size,
                  learning_rate=1e-3, weight_decay=1e-4, seed=0,
                  callback=None):
    """Mini-batch Adam training; returns the list of per-epoch mean losses.

    The learning rate follows a half-cosine schedule from ``learning_rate``
    down to 2% of it over the epoch budget.  Inputs are shuffled each epoch
    with a dedicated stream derived from ``seed``.  Raises RuntimeError as
    soon as a batch loss turns non-finite.
    """
    inputs = net._check_input(inputs)
    targets = np.asarray(targets, dtype=np.float64)
    if not np.all(np.isfinite(inputs)):
        raise ValueError("training inputs must be finite")
    if not np.all(np.isfinite(targets)):
        raise ValueError("training targets must be finite")
    n = inputs.shape[0]
    if targets.shape != (n, net.spec.n_outputs):
        raise ValueError("targets must be (n_samples, n_outputs)")
    if not 1 <= batch_size:
        raise ValueError("batch_size must be positive")
    params = net.params()
    opt = Adam(params, learning_rate=learning_rate)
    shuffle = np.random.default_rng([seed, 1])
    history = []
    for epoch in range(epochs):
        floor = 0.02 * learning_rate
        opt.learning_rate = floor + (learning_rate - floor) * 0.5 * (
            1.0 + np.cos(np.pi * epoch / max(epochs - 1, 1)))
        order = shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            opt.zero_grad()
            pred = net.forward(inputs[batch], train=True)
            loss, grad = mse_l2_loss(pred, targets[batch], params=params,
                                     weight_decay=weight_decay)
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite loss at epoch {epoch} "
                                   f"batch {start // batch_size}")
            net.backward(grad.astype(pred.dtype, copy=False))
            opt.step()
            total += loss * len(batch)
        history.append(total / n)
        if callback is not None:
            callback(epoch, history[-1])
    return history


# ---------------------------------------------------------------------------
# serialisation: JSON manifest + little-endian binary blob
# ---------------------------------------------------------------------------

def _state_arrays(net):
    arrays = [(p.name, p.value) for p in net.params()]
    arrays += [(name, value) for name, value in net.buffers()]
    return arrays


def save_network(net, path, extra=None):
    """Write ``path`` (JSON manifest) and a sibling ``.bin`` blob.

    ``extra`` is an optional JSON-serialisable dict stored verbatim in the
    manifest (e.g. target scaling of an estimator wrapper).
    """
    path = str(path)
    blob_path = path[:-5] + ".bin" if path.endswith(".json") else path + ".bin"
    entries = []
    chunks = []
    offset = 0
    for name, value in _state_arrays(net):
        raw = np.ascontiguousarray(value, dtype=value.dtype.newbyteorder("<"))
        data = raw.tobytes()
        entries.append({"name": name, "shape": list(value.shape),
                        "dtype": str(value.dtype), "offset": offset,
                        "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format_version": _MANIFEST_VERSION,
        "spec": net.spec.to_dict(),
        "blob": blob_path.rsplit("/", 1)[-1],
        "arrays": entries,
        "n_params": net.n_params,
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    with open(blob_path, "wb") as fh:
        fh.write(b"".join(chunks))
    return path, blob_path


def load_network(path, with_extra=False):
    """Rebuild a network saved by :func:`save_network`, bit exact."""
    path = str(path)
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != _MANIFEST_VERSION:
        raise ValueError("unsupported model manifest version")
    spec = NetworkSpec.from_dict(manifest["spec"])
    net = Network(spec)
    blob_path = os.path.join(os.path.dirname(path), manifest["blob"])
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    arrays = dict((name, value) for name, value in _state_arrays(net))
    for entry in manifest["arrays"]:
        value = arrays.get(entry["name"])
        if value is None:
            raise ValueError(f"unknown array {entry['name']!r} in manifest")
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        loaded = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])
                               .newbyteorder("<")).reshape(entry["shape"])
        value[...] = loaded.astype(value.dtype, copy=False)
    if with_extra:
        return net, manifest.get("extra", {})
    return net


# ---------------------------------------------------------------------------
# estimator wrapper
# ---------------------------------------------------------------------------

class CNNLocalizer(BaseEstimator, RegressorMixin):
    """Convolutional position estimator over channel power tensors.

    Inputs to ``fit``/``predict`` are stacks of power tensors shaped
    (n, rows, cols, depth) for the 3-D network or (n, rows*cols, depth) for
    the 2-D network (a unit axis is appended).  Each sample is scale
    normalised, so estimates are invariant to transmit power; targets are
    standardised internally and predictions returned in metres.
    """

    def __init__(self, kind="cnn3d", epochs=150, batch_size=32,
                 learning_rate=1e-3, weight_decay=1e-4, seed=0,
                 inception_base=8, branch_channels=8, merge_channels=16,
                 spec_overrides=None):
        self.kind = kind
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.seed = seed
        self.inception_base = inception_base
        self.branch_channels = branch_channels
        self.merge_channels = merge_channels
        self.spec_overrides = spec_overrides

    def _normalise(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            X = X[..., None]
        if X.ndim != 4:
            raise ValueError("expected (n, rows, cols, depth) tensors")
        norms = np.sqrt((X.reshape(X.shape[0], -1) ** 2).sum(axis=1))
        if np.any(norms == 0):
            raise ValueError("all-zero fingerprint in the batch")
        scale = np.sqrt(X[0].size)
        return X / norms[:, None, None, None] * scale

    def _make_spec(self, shape):
        overrides = dict(self.spec_overrides or {})
        if self.kind == "cnn3d":
            spec = NetworkSpec(kind="cnn3d", input_shape=shape,
                               inception_base=self.inception_base,
                               branch_channels=self.branch_channels,
                               merge_channels=self.merge_channels,
                               seed=self.seed)
            return replace(spec, **overrides) if overrides else spec
        if self.kind == "cnn2d":
            return NetworkSpec.scaled_2d(shape[0], shape[1], seed=self.seed,
                                         **overrides)
        raise ValueError(f"unknown network kind {self.kind!r}")

    def fit(self, X, y):
        X = self._normalise(X)
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 2 or y.shape[0] != X.shape[0]:
            raise ValueError("targets must be (n_samples, 3)")
        self.target_mean_ = y.mean(axis=0)
        self.target_scale_ = y.std(axis=0) + 1e-9
        yn = (y - self.target_mean_) / self.target_scale_
        self.net_ = Network(self._make_spec(X.shape[1:4]))
        self.history_ = train_network(
            self.net_, X, yn, epochs=self.epochs,
            batch_size=min(self.batch_size, X.shape[0]),
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay, seed=self.seed)
        return self

    def predict(self, X):
        if not hasattr(self, "net_"):
            raise RuntimeError("fit the localizer before predicting")
        X = self._normalise(X)
        raw = self.net_.predict(X)
        return raw * self.target_scale_ + self.target_mean_

    def save(self, path):
        """Persist the fitted network plus the target scaling."""
        if not hasattr(self, "net_"):
            raise RuntimeError("fit the localizer before saving")
        extra = {
            "kind": self.kind,
            "target_mean": self.target_mean_.tolist(),
            "target_scale": self.target_scale_.tolist(),
        }
        return save_network(self.net_, path, extra=extra)

    @classmethod
    def load(cls, path):
        net, extra = load_network(path, with_extra=True)
        model = cls(kind=extra.get("kind", net.spec.kind))
        model.net_ = net
        model.target_mean_ = np.asarray(extra["target_mean"])
        model.target_scale_ = np.asarray(extra["target_scale"])
        model.history_ = []
        return model
