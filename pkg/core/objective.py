"""
Exact evaluators for the LSM objectives and the quantities of the K-means initialization bound.

Every evaluator sums in a fixed index order so repeated calls are bit-identical.
"""
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from core.errors import ValidationError
from core.model import LsmModel, MultiTaskModel, augment

log = logging.getLogger(__name__)


class Regularizer(str, Enum):
    SUM_SQ = "sum_sq"      # sum_k ||w_k||^2
    MAX_SQ = "max_sq"      # max_k ||w_k||^2
    MAX_NORM = "max_norm"  # max_k ||w_k||


@dataclass(frozen=True)
class LsmHyper:
    K: int
    lam: float
    reg: Regularizer = Regularizer.SUM_SQ
    neg_variant: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise ValidationError(f"K must be >= 1, got {self.K}")
        if self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        object.__setattr__(self, "reg", Regularizer(self.reg))


@dataclass(frozen=True)
class MtlHyper:
    K: int
    C1: float
    C2: float
    rho: float

    def __post_init__(self):
        if self.K < 1:
            raise ValidationError(f"K must be >= 1, got {self.K}")
        for name in ("C1", "C2", "rho"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass(frozen=True, eq=False)
class BoundInputs:
    """Cluster means (augmented), per-positive cluster index, epsilon = sum_i ||x_i - mu_{k_i}|| and sizes p_k."""
    means: np.ndarray
    assignment: np.ndarray
    epsilon: float
    sizes: np.ndarray

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValidationError("epsilon must be nonnegative")
        if int(np.sum(self.sizes)) != len(self.assignment):
            raise ValidationError("cluster sizes must sum to the number of positives")

    @classmethod
    def from_assignment(cls, positives, assignment, K: int | None = None) -> "BoundInputs":
        X = np.atleast_2d(np.asarray(positives, dtype=float))
        a = np.asarray(assignment, dtype=int)
        if len(a) != len(X):
            raise ValidationError("assignment length must match the number of positives")
        K = int(a.max()) + 1 if K is None else K
        means = np.zeros((K, X.shape[1]))
        sizes = np.bincount(a, minlength=K)
        for k in range(K):
            if sizes[k]:
                means[k] = X[a == k].mean(axis=0)
        epsilon = float(np.sum(np.linalg.norm(X - means[a], axis=1)))
        return cls(augment(means), a, epsilon, sizes)


# --- Building blocks ---

def hinge(z):
    """L(z) = max(0, 1 - z)."""
    return np.maximum(0.0, 1.0 - np.asarray(z, dtype=float))


def regularizer(W, kind: Regularizer) -> float:
    W = np.atleast_2d(W)
    kind = Regularizer(kind)
    if kind is Regularizer.SUM_SQ:
        return float(np.sum(W * W))
    sq = np.sum(W * W, axis=1)
    if kind is Regularizer.MAX_SQ:
        return float(sq.max())
    return float(np.sqrt(sq.max()))


def negative_term(W, N_aug, neg_variant: bool = False) -> float:
    """sum_i max_k L(-<w_k, x_i>), or sum_k sum_i L(-<w_k, x_i>) for the per-component variant."""
    S = np.atleast_2d(N_aug) @ np.atleast_2d(W).T
    if S.shape[0] == 0:
        return 0.0
    if neg_variant:
        return float(np.sum(hinge(-S)))
    # max_k L(-s_k) = L(-max_k s_k) since L is nonincreasing
    return float(np.sum(hinge(-S.max(axis=1))))


def _check_dim(m, dim: int):
    if m.dim != dim:
        raise ValidationError(f"dimension mismatch: model has d={m.dim}, data has d={dim}")


def _rows(m, X, what: str) -> np.ndarray:
    """`X` as an (n, d) float array matching the model's dimension; a single vector counts as one row."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.ndim != 2 or X.shape[1] != m.dim:
        raise ValidationError(f"dimension mismatch: model has d={m.dim}, {what} have shape {X.shape}")
    return X


# --- LSM objectives ---

def eval_E(m: LsmModel, data, h: LsmHyper) -> float:
    _check_dim(m, data.dim)
    P, N = augment(data.positives), augment(data.negatives)
    pos = float(np.sum(hinge(m.scores(P).max(axis=1)))) if len(P) else 0.0
    return pos + negative_term(m.weights, N, h.neg_variant) + h.lam * regularizer(m.weights, h.reg)


def check_partition(assignment, n_pos: int, K: int) -> np.ndarray:
    a = np.asarray(assignment)
    if a.shape != (n_pos,) or not np.issubdtype(a.dtype, np.integer):
        raise ValidationError(f"assignment must be {n_pos} integer cluster indices")
    if n_pos and (a.min() < 0 or a.max() >= K):
        raise ValidationError(f"assignment indices must lie in [0, {K})")
    return a


def eval_F(m: LsmModel, data, assignment, h: LsmHyper) -> float:
    """The convex objective with each positive tied to its assigned subclassifier."""
    _check_dim(m, data.dim)
    P, N = augment(data.positives), augment(data.negatives)
    a = check_partition(assignment, len(P), m.K)
    pos = float(np.sum(hinge(m.scores(P)[np.arange(len(P)), a]))) if len(P) else 0.0
    return pos + negative_term(m.weights, N, h.neg_variant) + h.lam * regularizer(m.weights, h.reg)


def eval_S(m: LsmModel, bi: BoundInputs, negs, lam: float) -> float:
    """Surrogate with every positive replaced by its cluster mean, using lam * max_k ||w_k||."""
    if bi.means.shape != m.weights.shape:
        raise ValidationError(f"dimension mismatch: means {bi.means.shape} vs weights {m.weights.shape}")
    N = augment(_rows(m, negs, "negatives"))
    mean_scores = np.sum(m.weights * bi.means, axis=1)
    pos = float(np.sum(bi.sizes * hinge(mean_scores)))
    return pos + negative_term(m.weights, N) + lam * regularizer(m.weights, Regularizer.MAX_NORM)


def pino_gap(m: LsmModel, bi: BoundInputs, positives, phi: float = 1.0) -> tuple:
    """
    (sum_k p_k L(<w_k, mu_k>) - phi*eps*max||w_k||,  sum_i min_k L(<w_k, x_i>),  ... + phi*eps*max||w_k||).

    The upper inequality holds for every model. The lower one needs each positive's best
    subclassifier to be the one of its own cluster (always true for K=1).
    """
    if bi.means.shape != m.weights.shape:
        raise ValidationError(f"dimension mismatch: means {bi.means.shape} vs weights {m.weights.shape}")
    P = augment(_rows(m, positives, "positives"))
    middle = float(np.sum(hinge(m.scores(P).max(axis=1))))
    base = float(np.sum(bi.sizes * hinge(np.sum(m.weights * bi.means, axis=1))))
    gap = phi * bi.epsilon * regularizer(m.weights, Regularizer.MAX_NORM)
    return base - gap, middle, base + gap


# --- Multitask objective ---

def _dataset_terms(shared, bias_t, ds) -> tuple:
    X = augment(ds.X)
    y = ds.y
    composed = (X @ (shared + bias_t).T).max(axis=1)
    world = (X @ shared.T).max(axis=1)
    return float(np.sum(hinge(y * composed))), float(np.sum(hinge(y * world)))


def eval_J(mt: MultiTaskModel, coll, h: MtlHyper) -> float:
    _check_dim(mt, coll.dim)
    if mt.T != len(coll):
        raise ValidationError(f"model has T={mt.T} bias sets, collection has {len(coll)} datasets")
    biased, world = 0.0, 0.0
    for t, ds in enumerate(coll):
        b, w = _dataset_terms(mt.shared, mt.bias[t], ds)
        biased += b
        world += w
    reg = float(np.sum(mt.shared * mt.shared)) + h.rho * float(np.sum(mt.bias * mt.bias))
    return h.C1 * biased + h.C2 * world + reg


def eval_single_task_debias(w0, V, coll, h: MtlHyper) -> float:
    """
    The K=1 undoing-bias objective on explicit vectors: w0 of shape (d+1,), V of shape (T, d+1).

        sum_t sum_i [C1 L(y <w0 + v_t, x>) + C2 L(y <w0, x>)] + ||w0||^2 + rho sum_t ||v_t||^2
    """
    w0 = np.asarray(w0, dtype=float)
    V = np.asarray(V, dtype=float)
    total = 0.0
    for t, ds in enumerate(coll):
        X = augment(ds.X)
        total += h.C1 * float(np.sum(hinge(ds.y * (X @ (w0 + V[t]))))) + h.C2 * float(np.sum(hinge(ds.y * (X @ w0))))
    return total + float(np.dot(w0, w0)) + h.rho * float(np.sum(V * V))
