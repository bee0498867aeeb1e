import numpy as np
import pytest

from moesim.core import (
    ActivationMatrix,
    ConfigError,
    DimensionError,
    ModelShape,
    cosine_similarity,
)
from moesim.sketches import (
    EamcConfig,
    SketchCollection,
    build_eamc,
    kmeans,
    load_eamc,
    save_eamc,
)

SHAPE = ModelShape(num_layers=2, num_experts=4, top_k=2)


def brute_force_nearest(sketches, query):
    """Reference scan used as the independent oracle for match_nearest."""
    sims = [cosine_similarity(query, s) for s in sketches]
    best = max(range(len(sims)), key=lambda i: (sims[i], -i))
    return best, sims[best]


class TestKMeans:
    def test_k1_is_mean(self):
        vectors = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 3.0]])
        result = kmeans(vectors, k=1, seed=0)
        assert np.allclose(result.centroids[0], vectors.mean(axis=0))

    def test_k_equals_n_zero_objective(self):
        vectors = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        result = kmeans(vectors, k=3, seed=1)
        assert result.objective == pytest.approx(0.0, abs=1e-12)
        assert sorted(result.assignments.tolist()) == [0, 1, 2]

    def test_two_cluster_fixed_point(self):
        vectors = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])
        result = kmeans(vectors, k=2, seed=3)
        cents = sorted(result.centroids.tolist())
        assert np.allclose(cents, [[0.0, 0.5], [10.0, 10.5]])
        assert result.objective == pytest.approx(1.0, abs=1e-12)

    def test_k_reduced_to_n(self):
        vectors = np.array([[1.0, 0.0], [0.0, 1.0]])
        result = kmeans(vectors, k=5, seed=0)
        assert result.effective_k == 2
        assert result.centroids.shape[0] == 2

    def test_determinism(self):
        rng = np.random.default_rng(0)
        vectors = rng.random((40, 6))
        a = kmeans(vectors, k=4, seed=17)
        b = kmeans(vectors, k=4, seed=17)
        assert np.array_equal(a.centroids, b.centroids)
        assert np.array_equal(a.assignments, b.assignments)

    def test_objective_non_increasing_and_fixed_point(self):
        rng = np.random.default_rng(5)
        for trial in range(100):
            n = int(rng.integers(3, 25))
            d = int(rng.integers(2, 6))
            k = int(rng.integers(1, n + 1))
            vectors = rng.random((n, d))
            result = kmeans(vectors, k=k, seed=trial)
            history = result.objective_history
            assert all(
                later <= earlier + 1e-9
                for earlier, later in zip(history, history[1:])
            )
            # Lloyd fixed point: no point strictly closer to another centroid.
            for i, vec in enumerate(vectors):
                own = np.sum((vec - result.centroids[result.assignments[i]]) ** 2)
                dists = np.sum((result.centroids - vec) ** 2, axis=1)
                assert own <= dists.min() + 1e-9


class TestBuildEamc:
    def _matrices(self, rows_list):
        return [ActivationMatrix(SHAPE, rows) for rows in rows_list]

    def test_recent_mode_window(self):
        mats = self._matrices([
            [[1, 0, 0, 0], [0, 1, 0, 0]],
            [[0, 2, 0, 0], [0, 0, 2, 0]],
            [[0, 0, 3, 0], [0, 0, 0, 3]],
        ])
        coll = build_eamc(mats, EamcConfig(mode="recent", capacity=2))
        assert len(coll) == 2
        assert np.array_equal(coll.sketches[0], mats[1].to_sketch())
        assert np.array_equal(coll.sketches[1], mats[2].to_sketch())

    def test_kmeans_mode_single_centroid(self):
        mats = self._matrices([
            [[1, 0, 0, 0], [0, 1, 0, 0]],
            [[0, 2, 0, 0], [0, 0, 2, 0]],
        ])
        coll = build_eamc(mats, EamcConfig(mode="kmeans", capacity=1))
        assert len(coll) == 1

    def test_binarize_thresholds_before_normalize(self):
        mats = self._matrices([[[5, 0, 2, 0], [0, 0, 0, 0]]])
        coll = build_eamc(mats, EamcConfig(mode="recent", capacity=1,
                                           binarize=True))
        assert coll.sketches[0][:4].tolist() == [0.5, 0.0, 0.5, 0.0]

    def test_empty_input(self):
        with pytest.raises(ConfigError):
            build_eamc([], EamcConfig())


class TestMatchNearest:
    def test_single_sketch_any_query(self):
        coll = SketchCollection(np.array([[0.5, 0.5, 0, 0, 1, 0, 0, 0]]),
                                EamcConfig(capacity=1), SHAPE)
        idx, _ = coll.match_nearest(np.array([0, 0, 0, 1, 0, 0, 0, 1.0]))
        assert idx == 0

    def test_derived_similarity(self):
        shape = ModelShape(1, 3, 1)
        sketches = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        coll = SketchCollection(sketches, EamcConfig(capacity=2), shape)
        idx, sim = coll.match_nearest(np.array([0.9, 0.1, 0.0]))
        assert idx == 0
        assert sim == pytest.approx(0.9 / np.sqrt(0.82), abs=1e-9)

    def test_zero_query_tie_break(self):
        shape = ModelShape(1, 3, 1)
        sketches = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        coll = SketchCollection(sketches, EamcConfig(capacity=2), shape)
        assert coll.match_nearest(np.zeros(3)) == (0, 0.0)

    def test_dimension_mismatch(self):
        coll = SketchCollection(np.ones((1, 8)), EamcConfig(capacity=1), SHAPE)
        with pytest.raises(DimensionError):
            coll.match_nearest(np.ones(5))

    def test_agrees_with_brute_force(self):
        rng = np.random.default_rng(99)
        for _ in range(1000):
            n = int(rng.integers(1, 12))
            d = int(rng.integers(2, 10))
            sketches = rng.random((n, d))
            query = rng.random(d)
            shape = ModelShape(1, d, 1)
            coll = SketchCollection(sketches, EamcConfig(capacity=n), shape)
            got_idx, got_sim = coll.match_nearest(query)
            want_idx, want_sim = brute_force_nearest(sketches, query)
            assert got_idx == want_idx
            assert got_sim == pytest.approx(want_sim, abs=1e-9)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        mats = [ActivationMatrix(SHAPE, [[1, 2, 0, 0], [0, 0, 3, 1]])]
        coll = build_eamc(mats, EamcConfig(mode="recent", capacity=4, seed=9))
        path = tmp_path / "eamc.json"
        save_eamc(coll, path)
        loaded = load_eamc(path)
        assert np.array_equal(loaded.sketches, coll.sketches)
        assert loaded.config == coll.config
        assert loaded.shape == coll.shape

    def test_byte_identical_saves(self, tmp_path):
        mats = [ActivationMatrix(SHAPE, [[1, 2, 0, 0], [0, 0, 3, 1]])]
        coll = build_eamc(mats, EamcConfig(mode="recent", capacity=4))
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_eamc(coll, p1)
        save_eamc(coll, p2)
        assert p1.read_bytes() == p2.read_bytes()
