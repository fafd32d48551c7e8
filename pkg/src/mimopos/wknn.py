"""Fingerprint matching by weighted K-nearest-neighbour regression.

The database holds one noise-free fingerprint per reference point together
with its 3-D position.  A query fingerprint is compared against every entry
with a scale-free correlation similarity; the K best matches vote for the
position with similarity-proportional weights.
"""

import struct

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .fingerprint import (Fingerprint, _pack_fingerprint, _unpack_fingerprint)

_DB_MAGIC = b"MPOSFDB\x00"
_DB_VERSION = 1


def similarity(a, b):
    """Correlation similarity trace(A^T B) / (|A|_F |B|_F).

    Scale invariant in both arguments; equals 1 iff the matrices are
    positive multiples of each other, and stays in [0, 1] for non-negative
    inputs such as channel power matrices.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError("fingerprints must share a shape")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("similarity undefined for all-zero fingerprints")
    return float(a @ b / (na * nb))


def _flatten(X):
    X = np.asarray(X, dtype=float)
    if X.ndim < 2:
        raise ValueError("expected a batch of fingerprints")
    flat = X.reshape(X.shape[0], -1)
    if not np.all(np.isfinite(flat)):
        raise ValueError("fingerprints must be finite")
    return flat


def _normalise_rows(flat, what):
    norms = np.linalg.norm(flat, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"all-zero {what} fingerprint")
    return flat / norms[:, None]


class FingerprintDatabase:
    """Reference fingerprints with positions, ready for similarity search."""

    def __init__(self, fingerprints, positions):
        flat = _flatten(fingerprints)
        positions = np.asarray(positions, dtype=float)
        if positions.shape != (flat.shape[0], 3):
            raise ValueError("positions must be (n_entries, 3)")
        if flat.shape[0] == 0:
            raise ValueError("database is empty")
        self.fingerprints = np.asarray(fingerprints, dtype=float)
        self.positions = positions
        self._unit = _normalise_rows(flat, "database")

    def __len__(self):
        return self.fingerprints.shape[0]

    def query(self, fingerprints, k):
        """Top-k matches for each query.

        Returns (indices, similarities), both (n_queries, k), ordered by
        decreasing similarity.  Ties keep the lower database index.
        """
        if not 1 <= k <= len(self):
            raise ValueError(f"k must lie in [1, {len(self)}]")
        q = _normalise_rows(_flatten(fingerprints), "query")
        if q.shape[1] != self._unit.shape[1]:
            raise ValueError("query and database fingerprint sizes differ")
        sims = q @ self._unit.T
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        return order, np.take_along_axis(sims, order, axis=1)


def wknn_estimate(db, fingerprints, k=4):
    """Similarity-weighted average of the k best reference positions.

    Weights are the similarities normalised to sum to one; a degenerate
    all-zero weight row falls back to the unweighted mean of the k
    neighbours.
    """
    idx, sims = db.query(fingerprints, k)
    weights = np.clip(sims, 0.0, None)
    sums = weights.sum(axis=1, keepdims=True)
    flat_weight = np.full_like(weights, 1.0 / weights.shape[1])
    weights = np.where(sums > 0, weights / np.where(sums > 0, sums, 1.0),
                       flat_weight)
    return np.einsum("nk,nkd->nd", weights, db.positions[idx])


class WKNNLocalizer(BaseEstimator, RegressorMixin):
    """Weighted K-nearest-neighbour position estimator.

    Parameters:
        n_neighbors: number of reference points that vote.
    """

    def __init__(self, n_neighbors=4):
        self.n_neighbors = n_neighbors

    def fit(self, X, y):
        """Store the reference fingerprints X (n, ...) and positions y (n, 3)."""
        self.db_ = FingerprintDatabase(X, y)
        if not 1 <= self.n_neighbors <= len(self.db_):
            raise ValueError("n_neighbors must lie in [1, n_reference_points]")
        return self

    def predict(self, X):
        if not hasattr(self, "db_"):
            raise RuntimeError("fit the localizer before predicting")
        return wknn_estimate(self.db_, X, k=self.n_neighbors)


# ---------------------------------------------------------------------------
# database file format
# ---------------------------------------------------------------------------

def save_database(db, path, rows, cols, kind):
    """Write the database: count header, then fingerprint+position records."""
    out = [_DB_MAGIC, struct.pack("<II", _DB_VERSION, len(db))]
    for fp, pos in zip(db.fingerprints, db.positions):
        record = Fingerprint(fp.reshape(rows * cols, -1), rows, cols, kind)
        out.append(_pack_fingerprint(record))
        out.append(struct.pack("<3d", *pos))
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_database(path):
    """Read a database written by :func:`save_database`."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != _DB_MAGIC:
        raise ValueError("not a fingerprint database file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != _DB_VERSION:
        raise ValueError(f"unsupported database format version {version}")
    offset = 16
    fingerprints = []
    positions = []
    for _ in range(count):
        fp, used = _unpack_fingerprint(buf[offset:])
        offset += used
        pos = struct.unpack_from("<3d", buf, offset)
        offset += 24
        fingerprints.append(fp.tensor)
        positions.append(pos)
    if offset != len(buf):
        raise ValueError("trailing bytes after the last database record")
    meta = fp.rows, fp.cols, fp.kind
    return FingerprintDatabase(np.stack(fingerprints), np.array(positions)), meta
