import numpy as np
import pytest

from core.cluster_init import (NegStats, check_bound, epsilon_profile, exemplar_lda, exemplar_scores, geometric_median,
                               init_lsm_from_clusters, init_mtl_from_clusters, kmeans, kmedians, kmedoids,
                               random_lsm_init, random_mtl_init, rank_based_init, rank_similarity, score_based_init,
                               score_similarity, similarity_to_distance)
from core.cluster_init import _split_farthest
from core.errors import NumericalError, ValidationError
from core.model import augment
from core.objective import LsmHyper, MtlHyper
from core.optim import SgdConfig, train_svm
from services.dataset_io import DatasetCollection, SynthConfig, synth_biased_collection
from tests.conftest import make_dataset

FOUR_POINTS = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])


def two_blobs(rng, n=10, spread=0.5):
    A = rng.normal(loc=(5.0, 0.0), scale=spread, size=(n, 2))
    B = rng.normal(loc=(-5.0, 0.0), scale=spread, size=(n, 2))
    return np.vstack([A, B]), np.array([0] * n + [1] * n)


def same_partition(a, b) -> bool:
    return np.array_equal(a, b) or np.array_equal(a, 1 - b)


def blob_dataset(rng, noise=0.05):
    pos = np.vstack([rng.normal(loc=(3.0, 3.0), scale=noise, size=(8, 2)),
                     rng.normal(loc=(-3.0, 3.0), scale=noise, size=(8, 2))])
    neg = rng.normal(loc=(0.0, -2.0), scale=0.5, size=(20, 2))
    return make_dataset(np.vstack([pos, neg]), [1] * 16 + [-1] * 20)


# --- k-means / k-medians ---

def test_kmeans_finds_two_groups():
    ci = kmeans(FOUR_POINTS, 2, seed=0)
    centers = sorted(map(tuple, ci.centers))
    np.testing.assert_allclose(centers, [(0.0, 0.5), (10.0, 0.5)])
    assert ci.distortion_sq == pytest.approx(1.0)
    assert ci.epsilon == pytest.approx(2.0)


def test_kmeans_one_cluster_is_centroid(rng):
    X = rng.normal(size=(9, 3))
    ci = kmeans(X, 1)
    np.testing.assert_allclose(ci.centers[0], X.mean(axis=0))


def test_kmeans_with_k_equal_to_n_has_zero_epsilon(rng):
    X = rng.normal(size=(5, 2))
    ci = kmeans(X, 5, seed=3)
    assert ci.epsilon == pytest.approx(0.0, abs=1e-12)
    assert sorted(ci.sizes) == [1] * 5


def test_kmeans_assignment_is_nearest_center(rng):
    X, _ = two_blobs(rng)
    ci = kmeans(X, 3, seed=1)
    d = ((X[:, None, :] - ci.centers[None, :, :]) ** 2).sum(axis=2)
    np.testing.assert_array_equal(ci.assignment, np.argmin(d, axis=1))
    assert ci.epsilon == pytest.approx(np.sum(np.linalg.norm(X - ci.centers[ci.assignment], axis=1)))


def test_kmeans_needs_enough_points():
    with pytest.raises(ValidationError):
        kmeans(FOUR_POINTS, 5)
    with pytest.raises(ValidationError):
        kmeans(FOUR_POINTS, 0)


def test_kmeans_repairs_duplicate_starts():
    X = np.array([[0.0], [0.0], [0.0], [5.0]])
    ci = kmeans(X, 2, seed=0, restarts=3)
    assert np.all(ci.sizes > 0)


def test_kmeans_is_deterministic(rng):
    X, _ = two_blobs(rng)
    a, b = kmeans(X, 3, seed=7), kmeans(X, 3, seed=7)
    np.testing.assert_array_equal(a.assignment, b.assignment)
    np.testing.assert_array_equal(a.centers, b.centers)


def test_kmedians_uses_the_median():
    ci = kmedians(np.array([[0.0], [0.0], [10.0]]), 1)
    assert ci.centers[0, 0] == pytest.approx(0.0, abs=1e-6)
    assert ci.epsilon == pytest.approx(10.0, abs=1e-6)
    assert kmeans(np.array([[0.0], [0.0], [10.0]]), 1).epsilon == pytest.approx(40.0 / 3.0)


def test_kmedians_never_worse_than_kmeans(rng):
    for seed in range(5):
        X = rng.normal(size=(15, 2))
        assert kmedians(X, 3, seed).epsilon <= kmeans(X, 3, seed).epsilon + 1e-9


def test_kmedians_on_duplicated_points():
    X = np.array([[1.0, 1.0]] * 3 + [[4.0, -2.0]] * 3)
    ci = kmedians(X, 2, seed=0)
    np.testing.assert_allclose(sorted(map(tuple, ci.centers)), [(1.0, 1.0), (4.0, -2.0)], atol=1e-9)
    assert ci.epsilon == pytest.approx(0.0, abs=1e-9)


def test_geometric_median_of_triangle_corner():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    np.testing.assert_allclose(geometric_median(X), [0.0, 0.0], atol=1e-7)


def test_epsilon_profile_distortion_shrinks_with_k(rng):
    X = rng.normal(size=(12, 2))
    profile = epsilon_profile(X, range(1, 13), seed=0, restarts=3)
    distortions = [profile[K].distortion_sq for K in range(1, 13)]
    assert all(b <= a + 1e-9 for a, b in zip(distortions, distortions[1:]))
    assert profile[12].epsilon == pytest.approx(0.0, abs=1e-12)


def test_epsilon_profile_epsilon_never_grows_with_k(rng):
    for _ in range(10):
        n = int(rng.integers(6, 20))
        X = rng.normal(size=(n, int(rng.integers(1, 4))))
        profile = epsilon_profile(X, range(1, n + 1), seed=int(rng.integers(1000)), restarts=2)
        eps = [profile[K].epsilon for K in range(1, n + 1)]
        assert all(b <= a + 1e-9 for a, b in zip(eps, eps[1:]))
        assert eps[-1] == pytest.approx(0.0, abs=1e-12)


def test_split_farthest_isolates_the_outlier():
    X = np.array([[0.0], [0.1], [0.2], [5.0], [10.0], [10.1]])
    previous = kmeans(X, 2, seed=0)
    split = _split_farthest(X, previous)
    assert split.K == 3
    assert np.sum(split.assignment == split.assignment[3]) == 1
    assert split.epsilon <= previous.epsilon
    assert split.distortion_sq <= previous.distortion_sq


# --- Exemplar-LDA and similarity clustering ---

def test_exemplar_lda_identity_covariance():
    stats = NegStats(np.zeros(3), np.eye(3), ridge=0.0)
    np.testing.assert_allclose(exemplar_lda([1.0, 0.0, 0.0], stats), [1.0, 0.0, 0.0])


def test_exemplar_lda_diagonal_covariance():
    stats = NegStats(np.zeros(2), np.diag([4.0, 1.0]), ridge=0.0)
    np.testing.assert_allclose(exemplar_lda([4.0, 1.0], stats), [1.0, 1.0])


def test_exemplar_lda_residual(rng):
    for _ in range(20):
        A = rng.normal(size=(4, 4))
        cov = A @ A.T + 0.1 * np.eye(4)
        mu = rng.normal(size=4)
        stats = NegStats(mu, cov, ridge=0.0)
        x = rng.normal(size=4)
        w = exemplar_lda(x, stats)
        assert np.linalg.norm(cov @ w - (x - mu)) <= 1e-8 * np.linalg.norm(x - mu)


def test_singular_covariance_without_ridge_fails():
    with pytest.raises(NumericalError):
        NegStats(np.zeros(2), np.zeros((2, 2)), ridge=0.0)


def test_default_ridge_scales_with_trace(rng):
    stats = NegStats.from_negatives(rng.normal(scale=2.0, size=(50, 3)))
    assert stats.ridge == pytest.approx(1e-3 * np.trace(stats.cov) / 3)


def test_exemplar_lda_dimension_check():
    with pytest.raises(ValidationError):
        exemplar_lda([1.0, 2.0, 3.0], NegStats(np.zeros(2), np.eye(2), ridge=0.0))


def test_score_similarity_is_symmetric(rng):
    X = rng.normal(size=(6, 2))
    S = exemplar_scores(X, NegStats.from_negatives(rng.normal(size=(30, 2))))
    sim = score_similarity(S)
    np.testing.assert_allclose(sim, sim.T)
    normalized, dist = similarity_to_distance(sim)
    np.testing.assert_allclose(np.diag(normalized), 1.0)
    np.testing.assert_allclose(np.diag(dist), 0.0)


def test_rank_similarity_overlaps():
    S = np.array([[0.0, 5.0, 1.0, 1.0],
                  [5.0, 0.0, 1.0, 1.0],
                  [5.0, 1.0, 0.0, 1.0],
                  [5.0, 1.0, 1.0, 0.0]])
    sim = rank_similarity(S, 1)
    assert sim[0, 1] == 0.0
    assert sim[2, 3] == 1.0
    np.testing.assert_allclose(sim, sim.T)
    np.testing.assert_allclose(np.diag(sim), 1.0)
    with pytest.raises(ValidationError):
        rank_similarity(S, 4)


def test_degenerate_similarity_is_rejected():
    with pytest.raises(ValidationError):
        similarity_to_distance(np.ones((3, 3)))


def test_kmedoids_on_a_line():
    x = np.array([0.0, 1.0, 10.0, 11.0])
    medoids, assignment = kmedoids(np.abs(x[:, None] - x[None, :]), 2, seed=0)
    assert len(medoids) == 2
    assert same_partition(assignment, np.array([0, 0, 1, 1]))


def test_score_based_init_recovers_blobs(rng):
    X, truth = two_blobs(rng)
    stats = NegStats.from_negatives(rng.normal(size=(40, 2)))
    ci = score_based_init(X, stats, 2, seed=0)
    assert same_partition(ci.assignment, truth)
    assert len(ci.medoids) == 2


def test_rank_based_init_recovers_blobs(rng):
    X, truth = two_blobs(rng)
    stats = NegStats.from_negatives(rng.normal(size=(40, 2)))
    ci = rank_based_init(X, stats, 2, n_top=8, seed=0)
    assert same_partition(ci.assignment, truth)


def test_score_based_init_singletons(rng):
    X, _ = two_blobs(rng, n=3)
    ci = score_based_init(X, NegStats.from_negatives(rng.normal(size=(40, 2))), len(X), seed=0)
    assert sorted(ci.sizes) == [1] * len(X)


# --- Model initialization ---

def test_init_lsm_from_one_dimensional_cluster():
    data = make_dataset([[2.0], [2.0], [-2.0], [-2.0]], [1, 1, -1, -1])
    ci = kmeans(data.positives, 1)
    model = init_lsm_from_clusters(ci, data, LsmHyper(K=1, lam=0.01), SgdConfig(epochs=50))
    w = model.weights[0]
    assert w[0] > 0
    assert w @ augment([2.0]) > 0
    assert w @ augment([-2.0]) < 0


def test_init_lsm_with_one_cluster_is_plain_svm(rng):
    data = make_dataset(np.vstack([rng.normal(loc=2.0, size=(6, 2)), rng.normal(loc=-2.0, size=(6, 2))]),
                        [1] * 6 + [-1] * 6)
    cfg = SgdConfig(epochs=20, seed=4)
    ci = kmeans(data.positives, 1)
    model = init_lsm_from_clusters(ci, data, LsmHyper(K=1, lam=0.5), cfg)
    plain = train_svm(augment(data.positives), augment(data.negatives), 2 * 0.5 / 12, cfg)
    np.testing.assert_array_equal(model.weights[0], plain)


def test_duplicate_clusters_give_duplicate_subclassifiers():
    X = np.array([[2.0, 2.0]] * 2 + [[-2.0, -2.0]] * 4)
    data = make_dataset(X, [1] * 2 + [-1] * 4)
    ci = kmeans(data.positives, 2, seed=0)
    model = init_lsm_from_clusters(ci, data, LsmHyper(K=2, lam=0.1), SgdConfig(epochs=5))
    np.testing.assert_array_equal(model.weights[0], model.weights[1])


def test_init_mtl_with_huge_rho_has_no_bias(biased_collection):
    pooled = np.vstack([ds.positives for ds in biased_collection])
    ci = kmeans(pooled, 2, seed=0)
    h = MtlHyper(K=2, C1=1.0, C2=1.0, rho=1e6)
    mt = init_mtl_from_clusters(ci, biased_collection, h, SgdConfig(epochs=5))
    assert (mt.K, mt.T, mt.dim) == (2, 3, 2)
    assert mt.max_bias_norm() < 1e-3


def test_init_mtl_without_dataset_bias_keeps_biases_small():
    coll = synth_biased_collection(SynthConfig(n_datasets=3, n_subcategories=2, dim=2, pos_per_cluster=30,
                                               neg_per_dataset=60, separation=5.0, bias_shift=0.0, seed=4))
    ci = kmeans(np.vstack([ds.positives for ds in coll]), 2, seed=0)
    mt = init_mtl_from_clusters(ci, coll, MtlHyper(K=2, C1=1.0, C2=1.0, rho=20.0), SgdConfig(epochs=10, seed=0))
    for t in range(mt.T):
        for k in range(mt.K):
            assert np.linalg.norm(mt.bias[t, k]) < 0.1 * np.linalg.norm(mt.shared[k])


def test_init_mtl_rejects_misaligned_clustering(biased_collection):
    ci = kmeans(biased_collection[0].positives, 2, seed=0)
    with pytest.raises(ValidationError):
        init_mtl_from_clusters(ci, biased_collection, MtlHyper(K=2, C1=1.0, C2=1.0, rho=1.0), SgdConfig(epochs=1))


def test_init_mtl_single_dataset(tiny_collection):
    coll = DatasetCollection((tiny_collection[0],))
    ci = kmeans(coll[0].positives, 2, seed=0)
    mt = init_mtl_from_clusters(ci, coll, MtlHyper(K=2, C1=1.0, C2=1.0, rho=1.0), SgdConfig(epochs=3))
    assert mt.T == 1


def test_random_inits_are_seeded():
    np.testing.assert_array_equal(random_lsm_init(2, 3, seed=1).weights, random_lsm_init(2, 3, seed=1).weights)
    mt = random_mtl_init(2, 4, 3, seed=1, scale=0.5)
    assert mt.bias.shape == (4, 2, 4)
    assert np.abs(mt.shared).max() < 5.0


# --- Bound check ---

def test_check_bound_holds_on_separated_blobs(rng):
    for _ in range(20):
        data = blob_dataset(rng)
        eps = kmeans(data.positives, 2).epsilon
        report = check_bound(data, 2, 10 * eps, seed=0, cfg=SgdConfig(epochs=20), n_samples=200)
        assert report.holds_right
        assert report.holds_left
        assert report.f_prime_star <= report.e_at_wf + 1e-6 <= report.f_star + 2e-6
        assert report.sandwich_upper_violations == 0


def test_check_bound_collapses_when_epsilon_is_zero():
    pos = [[3.0, 3.0]] * 4 + [[-3.0, 3.0]] * 4
    neg = [[0.0, -2.0], [1.0, -2.0], [-1.0, -2.0]]
    data = make_dataset(pos + neg, [1] * 8 + [-1] * 3)
    report = check_bound(data, 2, 1.0, seed=0, cfg=SgdConfig(epochs=20), n_samples=100)
    assert report.epsilon == pytest.approx(0.0, abs=1e-12)
    assert report.holds_left and report.holds_right
    assert report.sandwich_upper_violations == 0


def test_check_bound_reports_nonpositive_lower_lambda():
    data = blob_dataset(np.random.default_rng(0), noise=1.0)
    report = check_bound(data, 2, 1e-3, seed=0, cfg=SgdConfig(epochs=2), n_samples=10)
    assert report.f_prime_star is None
    assert report.holds_left is None
    assert report.holds_right
