"""
Initialization of latent subcategory models from clusterings of the positive examples.

K-means / K-medians give the partitions used by the initialization bound; the Exemplar-LDA
score- and rank-based similarities give alternative, non-Euclidean partitions via K-medoids.
"""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist

from core.errors import NumericalError, ValidationError
from core.model import LsmModel, MultiTaskModel, augment
from core.objective import (BoundInputs, LsmHyper, MtlHyper, Regularizer, eval_E, eval_S)
from core.optim import SgdConfig, minimize_F, train_mtl, train_svm
from services.dataset_io import Dataset, DatasetCollection

log = logging.getLogger(__name__)

LLOYD_MAX_ITER = 200
WEISZFELD_TOL = 1e-8
WEISZFELD_MAX_ITER = 500
KMEDOIDS_MAX_ITER = 100


@dataclass(frozen=True, eq=False)
class ClusterInit:
    centers: np.ndarray
    assignment: np.ndarray
    distortion_sq: float
    epsilon: float
    medoids: tuple | None = None

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.K)

    def bound_inputs(self) -> BoundInputs:
        return BoundInputs(augment(self.centers), self.assignment, self.epsilon, self.sizes)


def _as_points(positives) -> np.ndarray:
    X = np.asarray(positives, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    return X


def _make_init(X, centers, assignment, medoids=None) -> ClusterInit:
    residual = np.linalg.norm(X - centers[assignment], axis=1)
    return ClusterInit(centers, assignment, float(np.sum(residual ** 2)), float(np.sum(residual)), medoids)


def _check_k(X, K: int):
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    if len(X) < K:
        raise ValidationError(f"need at least K={K} points, got {len(X)}")


# --- K-means ---

def _repair_empty(X, centers, assignment, sq_dist):
    counts = np.bincount(assignment, minlength=len(centers))
    for k in np.flatnonzero(counts == 0):
        donors = counts[assignment] > 1
        own = np.where(donors, sq_dist[np.arange(len(X)), assignment], -np.inf)
        i = int(np.argmax(own))
        counts[assignment[i]] -= 1
        assignment[i] = k
        counts[k] = 1
        centers[k] = X[i]


def _cluster_means(X, assignment, K) -> np.ndarray:
    centers = np.zeros((K, X.shape[1]))
    for k in range(K):
        centers[k] = X[assignment == k].mean(axis=0)
    return centers


def _lloyd(X, centers, max_iter: int = LLOYD_MAX_ITER) -> tuple:
    centers = np.array(centers, dtype=float)
    K = len(centers)
    assignment = None
    for _ in range(max_iter):
        sq_dist = cdist(X, centers, "sqeuclidean")
        new_assignment = np.argmin(sq_dist, axis=1)
        _repair_empty(X, centers, new_assignment, sq_dist)
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        centers = _cluster_means(X, assignment, K)
    return centers, assignment


def kmeans(positives, K: int, seed: int = 0, restarts: int = 10) -> ClusterInit:
    """Lloyd's algorithm from `restarts` seeded random starts; the lowest squared distortion wins."""
    X = _as_points(positives)
    _check_k(X, K)
    rng = np.random.default_rng(seed)
    best = None
    for r in range(max(1, restarts)):
        start = X[rng.choice(len(X), size=K, replace=False)]
        centers, assignment = _lloyd(X, start)
        candidate = _make_init(X, centers, assignment)
        log.debug(f"k-means restart {r}: distortion_sq={candidate.distortion_sq:.6g}")
        if best is None or candidate.distortion_sq < best.distortion_sq:
            best = candidate
    log.info(f"k-means K={K}: distortion_sq={best.distortion_sq:.6g} epsilon={best.epsilon:.6g}")
    return best


def _split_farthest(X, previous: ClusterInit) -> ClusterInit:
    """Moves the point farthest from its center, among clusters of two or more, into a new singleton cluster."""
    residual = np.linalg.norm(X - previous.centers[previous.assignment], axis=1)
    movable = previous.sizes[previous.assignment] > 1
    i = int(np.argmax(np.where(movable, residual, -np.inf)))
    assignment = previous.assignment.copy()
    assignment[i] = previous.K
    return _make_init(X, _cluster_means(X, assignment, previous.K + 1), assignment)


def epsilon_profile(positives, ks, seed: int = 0, restarts: int = 10) -> dict:
    """
    K-means solutions for every K in `ks`. Each K also tries a warm start from the previous
    solution plus the point farthest from its center; the lower squared distortion is kept.
    A solution whose epsilon or distortion exceeds the previous K's is replaced by the previous
    clustering with its farthest point split off, so both are nonincreasing in K.
    """
    X = _as_points(positives)
    profile = {}
    previous = None
    for K in sorted(ks):
        best = kmeans(X, K, seed, restarts)
        if previous is not None and previous.K < K:
            centers = list(previous.centers)
            while len(centers) < K:
                d = cdist(X, np.array(centers), "sqeuclidean").min(axis=1)
                centers.append(X[int(np.argmax(d))])
            warm = _make_init(X, *_lloyd(X, np.array(centers)))
            if warm.distortion_sq < best.distortion_sq:
                best = warm
            if best.epsilon > previous.epsilon or best.distortion_sq > previous.distortion_sq:
                split = previous
                while split.K < K:
                    split = _split_farthest(X, split)
                log.debug(f"K={K}: k-means epsilon {best.epsilon:.6g} exceeds K={previous.K}; using a split")
                best = split
        profile[K] = best
        previous = best
    return profile


# --- K-medians ---

def geometric_median(X, tol: float = WEISZFELD_TOL, max_iter: int = WEISZFELD_MAX_ITER, start=None) -> np.ndarray:
    """Weiszfeld iterations from the better of `start` and the coordinate-wise median."""
    X = _as_points(X)
    cost = lambda y: float(np.sum(np.linalg.norm(X - y, axis=1)))
    y = np.median(X, axis=0)
    if start is not None and cost(start) < cost(y):
        y = np.array(start, dtype=float)
    best, best_cost = y, cost(y)
    for _ in range(max_iter):
        dist = np.maximum(np.linalg.norm(X - y, axis=1), 1e-12)
        weights = 1.0 / dist
        y_new = weights @ X / weights.sum()
        step = np.linalg.norm(y_new - y)
        y = y_new
        c = cost(y)
        if c < best_cost:
            best, best_cost = y, c
        if step < tol:
            break
    return best


def kmedians(positives, K: int, seed: int = 0, restarts: int = 10) -> ClusterInit:
    """
    Alternating nearest-center assignment and geometric-median update, warm-started from the
    best k-means solution so that epsilon never exceeds the k-means epsilon.
    """
    X = _as_points(positives)
    _check_k(X, K)
    start = kmeans(X, K, seed, restarts)
    centers, assignment = np.array(start.centers), np.array(start.assignment)
    best = start
    for _ in range(LLOYD_MAX_ITER):
        centers = np.array([geometric_median(X[assignment == k], start=centers[k]) for k in range(K)])
        candidate = _make_init(X, centers, assignment)
        if candidate.epsilon < best.epsilon:
            best = candidate
        dist = cdist(X, centers)
        new_assignment = np.argmin(dist, axis=1)
        _repair_empty(X, centers, new_assignment, dist)
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        candidate = _make_init(X, centers, assignment)
        if candidate.epsilon < best.epsilon:
            best = candidate
    log.info(f"k-medians K={K}: epsilon={best.epsilon:.6g} (k-means epsilon={start.epsilon:.6g})")
    return best


# --- Exemplar-LDA similarities ---

@dataclass(frozen=True, eq=False)
class NegStats:
    """Negative mean and covariance; the ridge makes (cov + ridge*I) positive definite."""
    mean: np.ndarray
    cov: np.ndarray
    ridge: float
    _factor: tuple = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (len(mean), len(mean)):
            raise ValidationError(f"covariance shape {cov.shape} does not match mean length {len(mean)}")
        try:
            factor = cho_factor(cov + self.ridge * np.eye(len(mean)))
        except LinAlgError as exc:
            raise NumericalError(f"negative covariance is not positive definite after ridge {self.ridge}: {exc}") from exc
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_factor", factor)

    @classmethod
    def from_negatives(cls, negatives, ridge: float | None = None) -> "NegStats":
        N = _as_points(negatives)
        if len(N) == 0:
            raise ValidationError("need at least one negative to estimate statistics")
        d = N.shape[1]
        cov = np.atleast_2d(np.cov(N, rowvar=False)) if len(N) > 1 else np.zeros((d, d))
        if ridge is None:
            trace = float(np.trace(cov))
            ridge = 1e-3 * trace / d if trace > 0 else 1e-3
        return cls(N.mean(axis=0), cov, ridge)

    def solve(self, rhs) -> np.ndarray:
        return cho_solve(self._factor, rhs)


def exemplar_lda(x_pos, stats: NegStats) -> np.ndarray:
    """w = (cov + ridge*I)^{-1} (x_pos - mu_N)."""
    x = np.atleast_1d(np.asarray(x_pos, dtype=float))
    if x.shape != stats.mean.shape:
        raise ValidationError(f"dimension mismatch: exemplar has shape {x.shape}, statistics {stats.mean.shape}")
    w = stats.solve(x - stats.mean)
    if not np.all(np.isfinite(w)):
        raise NumericalError("Exemplar-LDA solve produced non-finite weights")
    return w


def exemplar_scores(positives, stats: NegStats) -> np.ndarray:
    """S[i, j] = <w_i, x_j> where w_i is the Exemplar-LDA classifier of positive i."""
    X = _as_points(positives)
    W = stats.solve((X - stats.mean).T).T
    return W @ X.T


def score_similarity(scores) -> np.ndarray:
    S = np.asarray(scores, dtype=float)
    return (S + S.T) / 2.0


def rank_similarity(scores, n_top: int) -> np.ndarray:
    """
    Fraction of shared entries between the top-`n_top` lists of two exemplars, where each list
    ranks the other positives by decreasing score (ties by index).
    """
    S = np.asarray(scores, dtype=float)
    n = len(S)
    if not 1 <= n_top <= n - 1:
        raise ValidationError(f"n_top must lie in [1, {n - 1}], got {n_top}")
    members = np.zeros((n, n))
    for i in range(n):
        others = np.delete(np.arange(n), i)
        ranked = others[np.argsort(-S[i, others], kind="stable")]
        members[i, ranked[:n_top]] = 1.0
    sim = members @ members.T / n_top
    np.fill_diagonal(sim, 1.0)
    return sim


def similarity_to_distance(sim) -> tuple:
    """Returns (normalized similarity with unit diagonal, distance = 1 - normalized similarity)."""
    sim = np.asarray(sim, dtype=float)
    n = len(sim)
    if n == 1:
        return np.ones((1, 1)), np.zeros((1, 1))
    off = sim[~np.eye(n, dtype=bool)]
    top = off.max()
    if np.ptp(off) == 0 or top <= 0:
        raise ValidationError("degenerate similarity: all pairwise scores are equal or none is positive")
    normalized = sim / top
    np.fill_diagonal(normalized, 1.0)
    return normalized, 1.0 - normalized


def kmedoids(dist, K: int, seed: int = 0, max_iter: int = KMEDOIDS_MAX_ITER) -> tuple:
    """PAM-style best-swap search on a distance matrix. Returns (sorted medoid indices, assignment)."""
    D = np.asarray(dist, dtype=float)
    n = len(D)
    if not 1 <= K <= n:
        raise ValidationError(f"K must lie in [1, {n}], got {K}")
    rng = np.random.default_rng(seed)
    medoids = sorted(rng.choice(n, size=K, replace=False).tolist())
    cost = lambda meds: float(D[:, meds].min(axis=1).sum())
    current = cost(medoids)
    for _ in range(max_iter):
        best_cost, best_swap = current, None
        for slot in range(K):
            for o in range(n):
                if o in medoids:
                    continue
                trial = medoids[:slot] + [o] + medoids[slot + 1:]
                c = cost(trial)
                if c < best_cost - 1e-12:
                    best_cost, best_swap = c, (slot, o)
        if best_swap is None:
            break
        medoids[best_swap[0]] = best_swap[1]
        current = best_cost
    medoids = sorted(medoids)
    assignment = np.argmin(D[:, medoids], axis=1)
    assignment[medoids] = np.arange(K)
    return medoids, assignment


def _medoid_init(X, dist, K, seed) -> ClusterInit:
    medoids, assignment = kmedoids(dist, K, seed)
    return _make_init(X, X[medoids], assignment, tuple(medoids))


def score_based_init(positives, stats: NegStats, K: int, seed: int = 0) -> ClusterInit:
    X = _as_points(positives)
    _check_k(X, K)
    _, dist = similarity_to_distance(score_similarity(exemplar_scores(X, stats)))
    return _medoid_init(X, dist, K, seed)


def rank_based_init(positives, stats: NegStats, K: int, n_top: int = 20, seed: int = 0) -> ClusterInit:
    X = _as_points(positives)
    _check_k(X, K)
    log.info(f"Rank-based similarity: top-{n_top} overlap fraction")
    _, dist = similarity_to_distance(rank_similarity(exemplar_scores(X, stats), n_top))
    return _medoid_init(X, dist, K, seed)


# --- Model initialization from clusters ---

def init_lsm_from_clusters(ci: ClusterInit, data: Dataset, h: LsmHyper, cfg: SgdConfig, n_jobs: int = 1) -> LsmModel:
    """One linear SVM per cluster, separating that cluster's positives from all negatives."""
    P, N = augment(data.positives), augment(data.negatives)
    if len(ci.assignment) != len(P):
        raise ValidationError(f"clustering covers {len(ci.assignment)} positives, dataset has {len(P)}")
    if len(N) == 0:
        raise ValidationError(f"dataset '{data.id}' has no negatives")
    members = [P[ci.assignment == k] for k in range(ci.K)]
    for k, Pk in enumerate(members):
        if len(Pk) == 0:
            raise ValidationError(f"cluster {k} is empty")
    weights = Parallel(n_jobs=n_jobs)(
        delayed(train_svm)(Pk, N, 2.0 * h.lam / (len(Pk) + len(N)), cfg) for Pk in members
    )
    return LsmModel(np.vstack(weights))


def _cluster_collection(coll: DatasetCollection, pooled_assignment, k: int) -> DatasetCollection:
    datasets, offset = [], 0
    for ds in coll:
        n_pos = int(np.sum(ds.y == 1))
        in_k = pooled_assignment[offset:offset + n_pos] == k
        offset += n_pos
        pos = ds.positives[in_k]
        neg = ds.negatives
        if len(pos) + len(neg) == 0:
            raise ValidationError(f"dataset '{ds.id}' has no examples for cluster {k}")
        X = np.vstack([pos, neg])
        y = np.concatenate([np.ones(len(pos), dtype=int), -np.ones(len(neg), dtype=int)])
        datasets.append(Dataset(ds.id, X, y))
    return DatasetCollection(tuple(datasets))


def _train_cluster_debias(sub: DatasetCollection, h: MtlHyper, cfg: SgdConfig) -> MultiTaskModel:
    single = MtlHyper(K=1, C1=h.C1, C2=h.C2, rho=h.rho)
    mt, _ = train_mtl(sub, single, MultiTaskModel.zeros(1, len(sub), sub.dim), cfg)
    return mt


def init_mtl_from_clusters(ci: ClusterInit, coll: DatasetCollection, h: MtlHyper, cfg: SgdConfig,
                           n_jobs: int = 1) -> MultiTaskModel:
    """
    `ci` clusters the pooled positives of all datasets (collection order). For each cluster the
    K=1 undoing-bias problem is solved on that cluster's positives plus every negative of each dataset.
    """
    n_pos = sum(int(np.sum(ds.y == 1)) for ds in coll)
    if len(ci.assignment) != n_pos:
        raise ValidationError(f"clustering covers {len(ci.assignment)} positives, collection has {n_pos}")
    if ci.K != h.K:
        raise ValidationError(f"clustering has K={ci.K}, hyperparameters say K={h.K}")
    for k in range(ci.K):
        if not np.any(ci.assignment == k):
            raise ValidationError(f"cluster {k} has no positives in any dataset")
    subs = [_cluster_collection(coll, ci.assignment, k) for k in range(ci.K)]
    parts = Parallel(n_jobs=n_jobs)(delayed(_train_cluster_debias)(sub, h, cfg) for sub in subs)
    shared = np.vstack([mt.shared[0] for mt in parts])
    bias = np.stack([mt.bias[:, 0] for mt in parts], axis=1)
    return MultiTaskModel(shared, bias)


def random_lsm_init(K: int, dim: int, seed: int = 0, scale: float = 0.01) -> LsmModel:
    rng = np.random.default_rng(seed)
    return LsmModel(scale * rng.normal(size=(K, dim + 1)))


def random_mtl_init(K: int, T: int, dim: int, seed: int = 0, scale: float = 0.01) -> MultiTaskModel:
    rng = np.random.default_rng(seed)
    return MultiTaskModel(scale * rng.normal(size=(K, dim + 1)), scale * rng.normal(size=(T, K, dim + 1)))


# --- Bound verification ---

@dataclass(frozen=True)
class BoundReport:
    K: int
    lam: float
    epsilon: float
    distortion_sq: float
    f_prime_star: float | None
    e_at_wf: float
    f_star: float
    holds_left: bool | None
    holds_right: bool
    sandwich_samples: int
    sandwich_upper_violations: int
    sandwich_lower_violations: int

    def as_dict(self) -> dict:
        return asdict(self)


def check_bound(data: Dataset, K: int, lam: float, seed: int = 0, cfg: SgdConfig | None = None,
                n_samples: int = 1000, restarts: int = 10, tol: float = 1e-6) -> BoundReport:
    """
    Computes (F'*, E(w_F), F*) with F' using lam - 2*epsilon, all under the max-norm regularizer,
    and counts violations of S_{lam-eps} <= E_lam <= S_{lam+eps} on random weight draws.
    """
    data.require_both_classes()
    cfg = cfg or SgdConfig(seed=seed)
    ci = kmeans(data.positives, K, seed, restarts)
    bi = ci.bound_inputs()
    eps = ci.epsilon
    h = LsmHyper(K=K, lam=lam, reg=Regularizer.MAX_NORM)

    w_F, f_star = minimize_F(data, ci.assignment, h, LsmModel.zeros(K, data.dim), cfg)
    e_at_wf = eval_E(w_F, data, h)

    lam_low = lam - 2.0 * eps
    if lam_low > 0:
        h_low = LsmHyper(K=K, lam=lam_low, reg=Regularizer.MAX_NORM)
        _, f_prime = minimize_F(data, ci.assignment, h_low, w_F, cfg)
        holds_left = bool(f_prime <= e_at_wf + tol)
    else:
        log.warning(f"lambda - 2*epsilon = {lam_low:.6g} <= 0; only the right inequality is checked")
        f_prime, holds_left = None, None
    holds_right = bool(e_at_wf <= f_star + tol)

    rng = np.random.default_rng(seed)
    upper_violations = lower_violations = 0
    negatives = data.negatives
    for _ in range(n_samples):
        m = LsmModel(rng.normal(size=(K, data.dim + 1)))
        e = eval_E(m, data, h)
        if e > eval_S(m, bi, negatives, lam + eps) + tol:
            upper_violations += 1
        if eval_S(m, bi, negatives, lam - eps) > e + tol:
            lower_violations += 1

    report = BoundReport(K, lam, eps, ci.distortion_sq, f_prime, e_at_wf, f_star, holds_left, holds_right,
                         n_samples, upper_violations, lower_violations)
    log.info(f"Bound check K={K} lambda={lam:.6g} eps={eps:.6g}: F'*={f_prime} E(w_F)={e_at_wf:.6g} F*={f_star:.6g}")
    return report
