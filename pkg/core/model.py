import logging
from dataclasses import dataclass

import numpy as np

from core.errors import ValidationError

log = logging.getLogger(__name__)


def augment(X) -> np.ndarray:
    """Appends the constant 1 so the bias lives in the last weight component: x -> (x, 1)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        return np.append(X, 1.0)
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LsmModel:
    """K linear subclassifiers over augmented inputs; `weights` has shape (K, d+1)."""
    weights: np.ndarray

    def __post_init__(self):
        W = _frozen(self.weights)
        if W.ndim != 2 or W.shape[0] < 1 or W.shape[1] < 2:
            raise ValidationError(f"LSM weights must have shape (K>=1, d+1>=2), got {W.shape}")
        if not np.all(np.isfinite(W)):
            raise ValidationError("LSM weights must be finite")
        object.__setattr__(self, "weights", W)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        """Raw feature dimension d (the weights carry d+1 components)."""
        return self.weights.shape[1] - 1

    @classmethod
    def zeros(cls, K: int, dim: int) -> "LsmModel":
        return cls(np.zeros((K, dim + 1)))

    def scaled(self, c: float) -> "LsmModel":
        return LsmModel(c * self.weights)

    def _check(self, X: np.ndarray):
        if X.shape[-1] != self.weights.shape[1]:
            raise ValidationError(
                f"dimension mismatch: augmented input has {X.shape[-1]} components, model expects {self.weights.shape[1]}"
            )

    def scores(self, X) -> np.ndarray:
        """All subclassifier responses; X is (n, d+1) augmented, result is (n, K)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self._check(X)
        return X @ self.weights.T


def score(m: LsmModel, x) -> tuple:
    """Returns (max_k <w_k, x>, argmax k); ties go to the lowest k."""
    s = m.scores(x)[0]
    k = int(np.argmax(s))
    return float(s[k]), k


def decision_values(m: LsmModel, X) -> np.ndarray:
    return m.scores(X).max(axis=1)


def predict(m: LsmModel, x) -> int:
    value, _ = score(m, x)
    return 1 if value > 0 else -1


def assign_clusters(m: LsmModel, positives) -> np.ndarray:
    """Index of the winning subclassifier for every positive (lowest index on ties)."""
    X = np.atleast_2d(np.asarray(positives, dtype=float))
    if X.shape[0] == 0:
        raise ValidationError("assign_clusters needs at least one positive")
    return np.argmax(m.scores(X), axis=1)


@dataclass(frozen=True, eq=False)
class MultiTaskModel:
    """
    Shared vectors w0^k with shape (K, d+1) and per-dataset bias vectors v_t^k with shape
    (T, K, d+1). The classifier of dataset t, component k is w0^k + v_t^k.
    """
    shared: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        W0, V = _frozen(self.shared), _frozen(self.bias)
        if W0.ndim != 2 or W0.shape[0] < 1:
            raise ValidationError(f"shared weights must have shape (K, d+1), got {W0.shape}")
        if V.ndim != 3 or V.shape[1:] != W0.shape:
            raise ValidationError(f"bias weights must have shape (T, {W0.shape[0]}, {W0.shape[1]}), got {V.shape}")
        if not (np.all(np.isfinite(W0)) and np.all(np.isfinite(V))):
            raise ValidationError("multitask weights must be finite")
        object.__setattr__(self, "shared", W0)
        object.__setattr__(self, "bias", V)

    @property
    def K(self) -> int:
        return self.shared.shape[0]

    @property
    def T(self) -> int:
        return self.bias.shape[0]

    @property
    def dim(self) -> int:
        return self.shared.shape[1] - 1

    @classmethod
    def zeros(cls, K: int, T: int, dim: int) -> "MultiTaskModel":
        return cls(np.zeros((K, dim + 1)), np.zeros((T, K, dim + 1)))

    def visual_world(self) -> LsmModel:
        return LsmModel(self.shared)

    def max_bias_norm(self) -> float:
        return float(np.linalg.norm(self.bias, axis=2).max())


def compose(mt: MultiTaskModel, t: int) -> LsmModel:
    """The dataset-t classifier with weights w0^k + v_t^k."""
    if not 0 <= t < mt.T:
        raise ValidationError(f"dataset index {t} out of range for T={mt.T}")
    return LsmModel(mt.shared + mt.bias[t])
