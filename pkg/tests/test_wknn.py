import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from mimopos.wknn import (FingerprintDatabase, WKNNLocalizer, load_database,
                          save_database, similarity, wknn_estimate)


def make_db(n=20, shape=(4, 4, 8), seed=0):
    rng = np.random.default_rng(seed)
    fingerprints = rng.uniform(0.1, 1.0, size=(n,) + shape)
    positions = rng.uniform(-5.0, 5.0, size=(n, 3))
    return FingerprintDatabase(fingerprints, positions)


class TestSimilarity:
    def test_self_similarity_is_one(self, rng):
        a = rng.uniform(0.1, 1.0, size=(6, 7))
        assert similarity(a, a) == pytest.approx(1.0)

    @pytest.mark.parametrize("c", [0.1, 1.0, 10.0])
    def test_scale_invariance(self, rng, c):
        a = rng.uniform(0.1, 1.0, size=(6, 7))
        assert similarity(a, c * a) == pytest.approx(1.0, abs=1e-12)

    @given(scale=st.floats(min_value=1e-3, max_value=1e3),
           seed=st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_scale_invariance_generic(self, scale, seed):
        a = np.random.default_rng(seed).uniform(0.1, 1.0, size=12)
        assert similarity(a, scale * a) == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal_is_zero(self):
        a = np.array([1.0, 0.0])
        b = np.array([0.0, 1.0])
        assert similarity(a, b) == pytest.approx(0.0)

    def test_rejects_degenerate_inputs(self):
        with pytest.raises(ValueError):
            similarity(np.zeros(3), np.ones(3))
        with pytest.raises(ValueError):
            similarity(np.ones(3), np.ones(4))


class TestDatabase:
    def test_exact_match_returns_stored_position(self):
        db = make_db()
        idx, sims = db.query(db.fingerprints[7:8], k=1)
        assert idx[0, 0] == 7
        assert sims[0, 0] == pytest.approx(1.0)
        estimate = wknn_estimate(db, db.fingerprints[7:8], k=1)
        np.testing.assert_allclose(estimate[0], db.positions[7], atol=1e-12)

    def test_exact_match_error_is_zero_for_all_entries(self):
        db = make_db(n=12)
        estimates = wknn_estimate(db, db.fingerprints, k=1)
        errors = np.linalg.norm(estimates - db.positions, axis=1)
        assert errors.max() == 0.0

    def test_query_orders_by_similarity(self):
        db = make_db()
        idx, sims = db.query(db.fingerprints[:3], k=5)
        assert np.all(np.diff(sims, axis=1) <= 1e-12)

    def test_tie_prefers_lower_index(self):
        fingerprints = np.ones((4, 2, 2))
        positions = np.arange(12, dtype=float).reshape(4, 3)
        db = FingerprintDatabase(fingerprints, positions)
        idx, _ = db.query(np.ones((1, 2, 2)), k=2)
        np.testing.assert_array_equal(idx[0], [0, 1])

    def test_k_bounds(self):
        db = make_db(n=5)
        with pytest.raises(ValueError):
            db.query(db.fingerprints[:1], k=0)
        with pytest.raises(ValueError):
            db.query(db.fingerprints[:1], k=6)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            FingerprintDatabase(np.ones((3, 2, 2)), np.ones((2, 3)))
        db = make_db()
        with pytest.raises(ValueError):
            db.query(np.ones((1, 3, 3)), k=1)

    def test_rejects_zero_fingerprint(self):
        fingerprints = np.ones((3, 2, 2))
        fingerprints[1] = 0.0
        with pytest.raises(ValueError):
            FingerprintDatabase(fingerprints, np.zeros((3, 3)))


class TestEstimate:
    def test_two_equal_neighbours_average(self):
        fingerprints = np.stack([np.ones((2, 2)), np.ones((2, 2)),
                                 np.full((2, 2), [1.0, 0.0])])
        positions = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0],
                              [10.0, 10.0, 10.0]])
        db = FingerprintDatabase(fingerprints, positions)
        estimate = wknn_estimate(db, np.ones((1, 2, 2)), k=2)
        np.testing.assert_allclose(estimate[0], [1.0, 0.0, 0.0], atol=1e-12)

    def test_weights_proportional_to_similarity(self):
        # db entries chosen so query similarities are s and s/2
        a = np.array([1.0, 0.0])
        b = np.array([1.0, 1.0]) / np.sqrt(2)
        db = FingerprintDatabase(np.stack([a, b]),
                                 np.array([[0.0, 0, 0], [1.0, 0, 0]]))
        q = np.array([[1.0, 0.0]])
        idx, sims = db.query(q, k=2)
        expected_x = sims[0, 1] / sims[0].sum()
        estimate = wknn_estimate(db, q, k=2)
        assert estimate[0, 0] == pytest.approx(expected_x)


class TestLocalizer:
    def test_sklearn_protocol(self):
        model = WKNNLocalizer(n_neighbors=3)
        assert model.get_params() == {"n_neighbors": 3}
        cloned = clone(model)
        assert cloned.get_params() == {"n_neighbors": 3}

    def test_fit_predict_matches_functional_api(self):
        db = make_db()
        model = WKNNLocalizer(n_neighbors=4).fit(db.fingerprints,
                                                 db.positions)
        rng = np.random.default_rng(3)
        queries = db.fingerprints[:5] * rng.uniform(0.5, 2.0, size=(5, 1, 1, 1))
        np.testing.assert_allclose(model.predict(queries),
                                   wknn_estimate(db, queries, k=4),
                                   atol=1e-12)

    def test_predict_before_fit_raises(self):
        with pytest.raises(RuntimeError):
            WKNNLocalizer().predict(np.ones((1, 2, 2)))

    def test_neighbor_count_validated_at_fit(self):
        db = make_db(n=3)
        with pytest.raises(ValueError):
            WKNNLocalizer(n_neighbors=4).fit(db.fingerprints, db.positions)


class TestDatabaseFile:
    def test_round_trip_bit_exact(self, tmp_path):
        db = make_db(n=6, shape=(4, 8, 16))
        path = tmp_path / "ref.fpdb"
        save_database(db, path, rows=4, cols=8, kind="angle-delay")
        loaded, (rows, cols, kind) = load_database(path)
        assert (rows, cols, kind) == (4, 8, "angle-delay")
        assert loaded.fingerprints.tobytes() == db.fingerprints.tobytes()
        assert loaded.positions.tobytes() == db.positions.tobytes()

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fpdb"
        path.write_bytes(b"NOTADB\x00\x00" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_database(path)

    def test_rejects_trailing_garbage(self, tmp_path):
        db = make_db(n=2)
        path = tmp_path / "ref.fpdb"
        save_database(db, path, rows=4, cols=4, kind="angle-delay")
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(ValueError, match="trailing"):
            load_database(path)
