"""
Training engines: a Pegasos linear SVM, the subgradient of the multitask objective, SGD for the
multitask LSM (with the cooldown cache), a convex solver for F and alternating minimization.
"""
import logging
from dataclasses import dataclass

import numpy as np

from core.errors import NumericalError, ValidationError
from core.model import LsmModel, MultiTaskModel, assign_clusters, augment
from core.objective import LsmHyper, MtlHyper, Regularizer, eval_E, eval_F, eval_J

log = logging.getLogger(__name__)

SAMPLING_MODES = ("pooled", "dataset")


@dataclass(frozen=True)
class SgdConfig:
    epochs: int = 100
    eta0: float = 1.0
    seed: int = 0
    tol_weight_change: float = 1e-6
    cooldown_len: int = 5
    cooldown_enabled: bool = True
    sampling: str = "pooled"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.eta0 <= 0:
            raise ValidationError(f"eta0 must be positive, got {self.eta0}")
        if self.cooldown_len < 0:
            raise ValidationError("cooldown_len must be >= 0")
        if self.tol_weight_change < 0:
            raise ValidationError("tol_weight_change must be >= 0")
        if self.sampling not in SAMPLING_MODES:
            raise ValidationError(f"sampling must be one of {SAMPLING_MODES}, got '{self.sampling}'")
        if self.seed < 0:
            raise ValidationError("seed must be unsigned")


@dataclass(frozen=True)
class TraceRecord:
    epoch: int
    objective: float
    max_change: float
    skipped: int


@dataclass(frozen=True)
class OuterRecord:
    outer: int
    objective_F: float
    objective_E: float
    reassigned: int


class CooldownCache:
    """Per-(dataset, example) skip counters; a point with a positive counter is skipped and decremented."""

    def __init__(self, sizes, cooldown_len: int):
        self.cooldown_len = cooldown_len
        self.counters = [np.zeros(m, dtype=int) for m in sizes]

    def should_skip(self, t: int, i: int) -> bool:
        if self.counters[t][i] > 0:
            self.counters[t][i] -= 1
            return True
        return False

    def grant(self, t: int, i: int):
        self.counters[t][i] = self.cooldown_len


# --- Linear SVM ---

def train_svm(pos, neg, lam: float, cfg: SgdConfig) -> np.ndarray:
    """
    Pegasos on mean hinge loss + (lam/2)||w||^2 over augmented inputs.

    Steps are 1/(lam*n) with projection onto the ball of radius 1/sqrt(lam); the returned
    vector is the average of the iterates of the last epoch.
    """
    pos = np.atleast_2d(np.asarray(pos, dtype=float))
    neg = np.atleast_2d(np.asarray(neg, dtype=float))
    if pos.size == 0 or neg.size == 0:
        raise ValidationError("train_svm needs at least one positive and one negative example")
    if lam <= 0:
        raise ValidationError(f"train_svm needs lam > 0, got {lam}")
    X = np.vstack([pos, neg])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    n = len(y)

    rng = np.random.default_rng(cfg.seed)
    radius = 1.0 / np.sqrt(lam)
    w = np.zeros(X.shape[1])
    tail = np.zeros_like(w)
    step = 0
    for epoch in range(cfg.epochs):
        last_epoch = epoch == cfg.epochs - 1
        for i in rng.integers(n, size=n):
            step += 1
            eta = 1.0 / (lam * step)
            violated = y[i] * (X[i] @ w) < 1.0
            w *= 1.0 - eta * lam
            if violated:
                w += eta * y[i] * X[i]
            norm = np.linalg.norm(w)
            if norm > radius:
                w *= radius / norm
            if last_epoch:
                tail += w
    w = tail / n
    if not np.all(np.isfinite(w)):
        raise NumericalError("SVM solver produced non-finite weights")
    return w


# --- Multitask subgradient ---

def subgrad_J(mt: MultiTaskModel, x, y: int, t: int, h: MtlHyper) -> tuple:
    """
    Subgradient of the multitask objective at one sample (x, y) of dataset t.

    Returns (g_shared, g_bias) with shape (K, d+1) each; g_bias is the block of v_t^1..v_t^K.
    The regularizer enters as w0^k and rho*v_t^k.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (mt.shared.shape[1],):
        raise ValidationError(f"dimension mismatch: sample has shape {x.shape}, model expects ({mt.shared.shape[1]},)")
    if not 0 <= t < mt.T:
        raise ValidationError(f"dataset index {t} out of range for T={mt.T}")
    return _subgradient_blocks(mt.shared, mt.bias[t], x, y, h)


def _subgradient_blocks(W0, Vt, x, y: int, h: MtlHyper) -> tuple:
    s_world = W0 @ x
    s_biased = (W0 + Vt) @ x
    k_world = int(np.argmax(s_world))
    k_biased = int(np.argmax(s_biased))
    yx = y * x

    g_shared = np.empty_like(W0)
    g_bias = np.empty_like(Vt)
    K = W0.shape[0]
    for k in range(K):
        world_active = k == k_world and y * s_world[k] <= 1.0
        biased_active = k == k_biased and y * s_biased[k] <= 1.0
        if world_active and biased_active:
            g_shared[k] = -h.C1 * yx - h.C2 * yx + W0[k]
        elif world_active:
            g_shared[k] = -h.C2 * yx + W0[k]
        elif biased_active:
            g_shared[k] = -h.C1 * yx + W0[k]
        else:
            g_shared[k] = W0[k]

    for k in range(K):
        if k == k_biased and y * s_biased[k] <= 1.0:
            g_bias[k] = -h.C1 * yx + h.rho * Vt[k]
        else:
            g_bias[k] = h.rho * Vt[k]
    return g_shared, g_bias


def _well_classified(W0, Vt, x, y: int) -> bool:
    """At least two (w0^k, w0^k + v_t^k) pairs both classify the point correctly; for K=1 the single pair must."""
    world_ok = y * (W0 @ x) > 0.0
    biased_ok = y * ((W0 + Vt) @ x) > 0.0
    n_pairs = int(np.sum(world_ok & biased_ok))
    return n_pairs >= min(2, W0.shape[0])


def _draw_epoch(rng, sizes, sampling: str) -> tuple:
    sizes = np.asarray(sizes)
    total = int(sizes.sum())
    if sampling == "pooled":
        flat = rng.integers(total, size=total)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        ts = np.searchsorted(offsets, flat, side="right") - 1
        return ts, flat - offsets[ts]
    ts = rng.integers(len(sizes), size=total)
    return ts, np.floor(rng.random(total) * sizes[ts]).astype(int)


def train_mtl(coll, h: MtlHyper, init: MultiTaskModel, cfg: SgdConfig, track_objective: bool = True) -> tuple:
    """
    SGD on the multitask objective starting from `init`.

    Each step applies the per-sample subgradient scaled by eta_n = eta0 / (1 + n*eta0*sigma), where
    sigma is the smallest active regularization coefficient. Per block the step is capped at
    1/coefficient so the regularization part of a step never overshoots zero.
    Returns (model, trace) where trace has one TraceRecord per epoch.
    """
    if init.T != len(coll) or init.K != h.K or init.dim != coll.dim:
        raise ValidationError(
            f"init model (K={init.K}, T={init.T}, d={init.dim}) does not match "
            f"hyperparameters K={h.K} and collection T={len(coll)}, d={coll.dim}"
        )
    Xs = [augment(ds.X) for ds in coll]
    ys = [ds.y for ds in coll]
    sizes = [len(ds) for ds in coll]
    if cfg.sampling == "pooled":
        log.info("Sampling uniformly over pooled examples")

    W0 = np.array(init.shared)
    V = np.array(init.bias)
    sigma = min(1.0, h.rho) if h.rho > 0 else 1.0
    cap_bias = 1.0 / h.rho if h.rho > 0 else np.inf
    cache = CooldownCache(sizes, cfg.cooldown_len) if cfg.cooldown_enabled and cfg.cooldown_len > 0 else None
    rng = np.random.default_rng(cfg.seed)

    trace = []
    n = 0
    for epoch in range(1, cfg.epochs + 1):
        W0_start, V_start = W0.copy(), V.copy()
        skipped = 0
        ts, idx = _draw_epoch(rng, sizes, cfg.sampling)
        for t, i in zip(ts, idx):
            if cache is not None and cache.should_skip(t, i):
                skipped += 1
                continue
            x, y = Xs[t][i], int(ys[t][i])
            eta = cfg.eta0 / (1.0 + n * cfg.eta0 * sigma)
            n += 1
            g_shared, g_bias = _subgradient_blocks(W0, V[t], x, y, h)
            W0 -= min(eta, 1.0) * g_shared
            V[t] -= min(eta, cap_bias) * g_bias
            if cache is not None and _well_classified(W0, V[t], x, y):
                cache.grant(t, i)

        if not (np.all(np.isfinite(W0)) and np.all(np.isfinite(V))):
            raise NumericalError(f"multitask SGD diverged at epoch {epoch}")
        max_change = float(max(np.linalg.norm(W0 - W0_start, axis=1).max(),
                               np.linalg.norm(V - V_start, axis=2).max()))
        objective = eval_J(MultiTaskModel(W0, V), coll, h) if track_objective else float("nan")
        trace.append(TraceRecord(epoch, objective, max_change, skipped))
        log.debug(f"epoch {epoch}: J={objective:.6g} max_change={max_change:.3g} skipped={skipped}")
        if max_change < cfg.tol_weight_change:
            log.info(f"Converged after {epoch} epochs (max weight change {max_change:.3g})")
            break
    return MultiTaskModel(W0, V), trace


def train_lsm_sgd(coll, K: int, C: float, init: LsmModel, cfg: SgdConfig) -> tuple:
    """Single-LSM specialization of the multitask SGD (C1 = 0) on the pooled collection."""
    h = MtlHyper(K=K, C1=0.0, C2=C, rho=1.0)
    mt_init = MultiTaskModel(init.weights, np.zeros((len(coll),) + init.weights.shape))
    mt, trace = train_mtl(coll, h, mt_init, cfg)
    return mt.visual_world(), trace


# --- Convex solver for F with a fixed assignment ---

def _regularizer_grad(W, kind: Regularizer) -> np.ndarray:
    if kind is Regularizer.SUM_SQ:
        return 2.0 * W
    G = np.zeros_like(W)
    norms = np.linalg.norm(W, axis=1)
    k = int(np.argmax(norms))
    if kind is Regularizer.MAX_SQ:
        G[k] = 2.0 * W[k]
    elif norms[k] > 0:
        G[k] = W[k] / norms[k]
    return G


def minimize_F(data, assignment, h: LsmHyper, init: LsmModel, cfg: SgdConfig) -> tuple:
    """
    Stochastic subgradient descent on F/n with the positive assignment held fixed.
    Returns (best model, best F) over the starting point and every epoch end.
    """
    P, N = augment(data.positives), augment(data.negatives)
    a = np.asarray(assignment, dtype=int)
    X = np.vstack([P, N])
    is_pos = np.concatenate([np.ones(len(P), dtype=bool), np.zeros(len(N), dtype=bool)])
    n = len(X)
    reg_scale = h.lam / n
    sigma = (2.0 if h.reg is Regularizer.SUM_SQ else 1.0) * reg_scale

    W = np.array(init.weights)
    best_W, best_val = W.copy(), eval_F(init, data, a, h)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    for _ in range(cfg.epochs):
        for i in rng.integers(n, size=n):
            eta = cfg.eta0 / (1.0 + step * cfg.eta0 * sigma)
            step += 1
            G = reg_scale * _regularizer_grad(W, h.reg) if reg_scale > 0 else np.zeros_like(W)
            x = X[i]
            if is_pos[i]:
                k = a[i]
                if W[k] @ x < 1.0:
                    G[k] -= x
            else:
                s = W @ x
                if h.neg_variant:
                    G[s > -1.0] += x
                else:
                    k = int(np.argmax(s))
                    if s[k] > -1.0:
                        G[k] += x
            W -= eta * G
        if not np.all(np.isfinite(W)):
            raise NumericalError("F solver diverged")
        val = eval_F(LsmModel(W), data, a, h)
        if val < best_val:
            best_W, best_val = W.copy(), val
    return LsmModel(best_W), best_val


def _cluster_svms(model: LsmModel, data, assignment, h: LsmHyper, cfg: SgdConfig) -> LsmModel:
    P, N = augment(data.positives), augment(data.negatives)
    W = np.array(model.weights)
    for k in range(model.K):
        members = P[assignment == k]
        if len(members) == 0:
            continue
        W[k] = train_svm(members, N, 2.0 * h.lam / (len(members) + len(N)), cfg)
    return LsmModel(W)


def train_lsm_alternating(data, h: LsmHyper, init: LsmModel, max_outer: int, cfg: SgdConfig) -> tuple:
    """
    Alternating minimization: assign positives to their best subclassifier, then minimize F
    for that assignment. An update that does not lower F is rejected, so F never increases.
    Stops when the assignment is stable or after `max_outer` rounds.
    """
    if init.K != h.K:
        raise ValidationError(f"init has K={init.K} components, hyperparameters say K={h.K}")
    if max_outer < 1:
        raise ValidationError("max_outer must be >= 1")
    data.require_both_classes()
    P = augment(data.positives)
    use_svms = h.neg_variant and h.lam > 0

    model = init
    assignment = assign_clusters(model, P)
    trace = []
    for outer in range(1, max_outer + 1):
        f_before = eval_F(model, data, assignment, h)
        if use_svms:
            candidate = _cluster_svms(model, data, assignment, h, cfg)
        else:
            candidate, _ = minimize_F(data, assignment, h, model, cfg)
        f_after = eval_F(candidate, data, assignment, h)
        if f_after <= f_before:
            model = candidate
        else:
            f_after = f_before
        new_assignment = assign_clusters(model, P)
        reassigned = int(np.sum(new_assignment != assignment))
        trace.append(OuterRecord(outer, f_after, eval_E(model, data, h), reassigned))
        log.info(f"outer {outer}: F={f_after:.6g} E={trace[-1].objective_E:.6g} reassigned={reassigned}")
        if reassigned == 0:
            break
        assignment = new_assignment
    return model, trace
