"""
Experiment protocols: seen and unseen dataset evaluation, hyperparameter grid search and the
initialization comparison. Every protocol is deterministic given its seed.
"""
import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from core.cluster_init import init_mtl_from_clusters, kmeans, random_mtl_init
from core.errors import ValidationError
from core.model import LsmModel, MultiTaskModel, augment, compose, decision_values
from core.objective import MtlHyper, eval_J
from core.optim import SgdConfig, train_lsm_sgd, train_mtl
from experiments.metrics import average_precision
from services.dataset_io import Dataset, DatasetCollection, concatenate

log = logging.getLogger(__name__)

INIT_METHODS = ("kmeans", "random", "zeros")
K_SELECTION_MODES = ("validation", "test")
INIT_COMPARE_ROWS = ("random", "random+opt", "kmeans", "kmeans+opt")


@dataclass(frozen=True)
class ProtocolConfig:
    sgd: SgdConfig = field(default_factory=SgdConfig)
    init: str = "kmeans"
    init_scale: float = 0.01
    kmeans_restarts: int = 10
    n_jobs: int = 1

    def __post_init__(self):
        if self.init not in INIT_METHODS:
            raise ValidationError(f"init must be one of {INIT_METHODS}, got '{self.init}'")
        if self.init_scale < 0:
            raise ValidationError("init_scale must be >= 0")

    def with_seed(self, seed: int) -> "ProtocolConfig":
        return replace(self, sgd=replace(self.sgd, seed=seed))


def dataset_ap(model: LsmModel, ds: Dataset) -> float:
    return average_precision(decision_values(model, augment(ds.X)), ds.y).ap


# --- Training entry points shared by the protocols ---

def initial_model(coll: DatasetCollection, h: MtlHyper, pc: ProtocolConfig, init: str | None = None) -> MultiTaskModel:
    init = init or pc.init
    seed = pc.sgd.seed
    if init == "zeros":
        return MultiTaskModel.zeros(h.K, len(coll), coll.dim)
    if init == "random":
        return random_mtl_init(h.K, len(coll), coll.dim, seed, pc.init_scale)
    ci = kmeans(concatenate(list(coll)).positives, h.K, seed, pc.kmeans_restarts)
    return init_mtl_from_clusters(ci, coll, h, pc.sgd, pc.n_jobs)


def fit_debias(coll: DatasetCollection, h: MtlHyper, pc: ProtocolConfig, init: str | None = None) -> tuple:
    """Initializes and trains the multitask model; returns (model, trace)."""
    return train_mtl(coll, h, initial_model(coll, h, pc, init), pc.sgd)


def fit_aggregate(coll: DatasetCollection, K: int, C: float, pc: ProtocolConfig,
                  init: LsmModel | None = None) -> LsmModel:
    """A single LSM on the concatenation of all datasets (the C1 = 0 training path)."""
    pooled = DatasetCollection((concatenate(list(coll)),))
    if init is None:
        init = initial_model(pooled, MtlHyper(K=K, C1=0.0, C2=C, rho=1.0), pc).visual_world()
    model, _ = train_lsm_sgd(pooled, K, C, init, pc.sgd)
    return model


def fit_debias_with_aggregate(coll: DatasetCollection, h: MtlHyper, pc: ProtocolConfig) -> tuple:
    """
    The multitask model and its aggregate baseline, both trained from the same initial model.
    The baseline weighs its loss by C1 + C2, the objective the multitask one tends to as rho grows.
    """
    start = initial_model(coll, h, pc)
    mt, _ = train_mtl(coll, h, start, pc.sgd)
    aggregate = fit_aggregate(coll, h.K, h.C1 + h.C2, pc, start.visual_world())
    return mt, aggregate


# --- Seen datasets ---

@dataclass(frozen=True, eq=False)
class ProtocolReport:
    """AP table: one row per test dataset, one column per evaluated classifier."""
    table: pd.DataFrame

    @property
    def means(self) -> pd.Series:
        return self.table.mean(axis=0)

    def as_dict(self) -> dict:
        return {
            "rows": list(self.table.index),
            "columns": list(self.table.columns),
            "ap": [[float(v) for v in row] for row in self.table.to_numpy()],
            "mean": {c: float(v) for c, v in self.means.items()},
        }


def _check_paired(train: DatasetCollection, test: DatasetCollection):
    if train.ids != test.ids:
        raise ValidationError(f"train datasets {train.ids} and test datasets {test.ids} do not pair up")


def run_seen(train: DatasetCollection, test: DatasetCollection, h: MtlHyper, pc: ProtocolConfig) -> ProtocolReport:
    """
    Trains on every train split and tests on every test split: each composed classifier w_t, the
    visual-world classifier, the aggregate LSM and independent per-dataset LSMs.
    """
    _check_paired(train, test)
    log.info(f"Seen protocol: training the multitask model on {len(train)} datasets")
    mt, aggregate = fit_debias_with_aggregate(train, h, pc)
    log.info("Seen protocol: training independent per-dataset LSMs")
    independent = [fit_aggregate(DatasetCollection((ds,)), h.K, h.C1 + h.C2, pc) for ds in train]

    columns = [f"w_{ds_id}" for ds_id in train.ids] + ["visual_world", "aggregate", "independent"]
    rows = []
    for s, ds in enumerate(test):
        row = [dataset_ap(compose(mt, t), ds) for t in range(mt.T)]
        row += [dataset_ap(mt.visual_world(), ds), dataset_ap(aggregate, ds), dataset_ap(independent[s], ds)]
        rows.append(row)
    return ProtocolReport(pd.DataFrame(rows, index=test.ids, columns=columns))


# --- Unseen dataset ---

@dataclass(frozen=True)
class UnseenReport:
    heldout: str
    trained_on: tuple
    ap: dict
    improvement: dict

    def as_dict(self) -> dict:
        return {"heldout": self.heldout, "trained_on": list(self.trained_on), "ap": self.ap, "improvement_pct": self.improvement}


def _relative_improvement(ap: float, base: float) -> float:
    return 100.0 * (ap - base) / base if base > 0 else float("nan")


def run_unseen(train: DatasetCollection, test: DatasetCollection, heldout: int, h: MtlHyper,
               pc: ProtocolConfig) -> UnseenReport:
    """
    Leaves dataset `heldout` out of training and evaluates on all of its examples: the
    visual-world classifier against the aggregate LSM and the K=1 undoing-bias model.
    """
    _check_paired(train, test)
    if len(train) < 2:
        raise ValidationError("the unseen protocol needs at least two datasets")
    if not 0 <= heldout < len(train):
        raise ValidationError(f"held-out index {heldout} out of range for T={len(train)}")
    remaining = train.without(heldout)
    target = concatenate([train[heldout], test[heldout]], id=train[heldout].id)
    log.info(f"Unseen protocol: training on {remaining.ids}, testing on '{target.id}'")

    mt, aggregate = fit_debias_with_aggregate(remaining, h, pc)
    single = MtlHyper(K=1, C1=h.C1, C2=h.C2, rho=h.rho)
    mt_single, _ = fit_debias(remaining, single, pc)

    ap = {
        "visual_world": dataset_ap(mt.visual_world(), target),
        "aggregate": dataset_ap(aggregate, target),
        "debias_k1": dataset_ap(mt_single.visual_world(), target),
    }
    improvement = {
        "vs_aggregate": _relative_improvement(ap["visual_world"], ap["aggregate"]),
        "vs_debias_k1": _relative_improvement(ap["visual_world"], ap["debias_k1"]),
    }
    return UnseenReport(target.id, tuple(remaining.ids), ap, improvement)


# --- Grid search ---

def _default_c_exponents() -> tuple:
    return tuple(float(e) for e in np.arange(-9.0, 4.0 + 0.25, 0.5))


@dataclass(frozen=True)
class GridSpec:
    rho_exponents: tuple = tuple(range(-9, 5))
    c1_exponents: tuple = field(default_factory=_default_c_exponents)
    c2_exponents: tuple = field(default_factory=_default_c_exponents)
    k_values: tuple = tuple(range(1, 11))

    def __post_init__(self):
        for name in ("rho_exponents", "c1_exponents", "c2_exponents", "k_values"):
            if len(getattr(self, name)) == 0:
                raise ValidationError(f"grid axis {name} is empty")
        if min(self.k_values) < 1:
            raise ValidationError("grid K values must be >= 1")

    @property
    def size(self) -> int:
        return len(self.k_values) * len(self.rho_exponents) * len(self.c1_exponents) * len(self.c2_exponents)

    def points(self) -> list:
        """(K, C1, C2, rho) for every cell, in axis order."""
        return [
            (K, 10.0 ** c1, 10.0 ** c2, 10.0 ** r)
            for K, r, c1, c2 in itertools.product(self.k_values, self.rho_exponents, self.c1_exponents, self.c2_exponents)
        ]


def _mean_composed_ap(mt: MultiTaskModel, coll: DatasetCollection) -> float:
    return float(np.mean([dataset_ap(compose(mt, t), ds) for t, ds in enumerate(coll)]))


def _grid_cell(train, val, test, point, pc: ProtocolConfig) -> dict:
    K, C1, C2, rho = point
    mt, _ = fit_debias(train, MtlHyper(K=K, C1=C1, C2=C2, rho=rho), pc)
    row = {"K": K, "C1": C1, "C2": C2, "rho": rho, "val_ap": _mean_composed_ap(mt, val)}
    if test is not None:
        row["test_ap"] = _mean_composed_ap(mt, test)
    return row


def select_best(table: pd.DataFrame, k_selection: str = "validation") -> dict:
    """
    Highest validation AP; ties go to smaller K, then smaller rho, then grid order. In "test" mode
    (C1, C2, rho) are picked per K on validation and K itself by test AP.
    """
    if table.empty:
        raise ValidationError("grid table is empty")
    if k_selection not in K_SELECTION_MODES:
        raise ValidationError(f"k_selection must be one of {K_SELECTION_MODES}, got '{k_selection}'")
    ranked = table.assign(_order=np.arange(len(table)))
    ranked = ranked.sort_values(["val_ap", "K", "rho", "_order"], ascending=[False, True, True, True], kind="mergesort")
    if k_selection == "validation":
        best = ranked.iloc[0]
    else:
        if "test_ap" not in table.columns:
            raise ValidationError("test-set K selection needs test AP in the grid table")
        per_k = ranked.groupby("K", sort=True).head(1)
        best = per_k.sort_values(["test_ap", "K"], ascending=[False, True], kind="mergesort").iloc[0]
    return {"K": int(best["K"]), "C1": float(best["C1"]), "C2": float(best["C2"]), "rho": float(best["rho"]),
            "val_ap": float(best["val_ap"])}


def grid_search(train: DatasetCollection, val: DatasetCollection, grid: GridSpec, pc: ProtocolConfig,
                test: DatasetCollection | None = None, k_selection: str = "validation") -> tuple:
    """Exhaustive sweep; returns (best point, full table in grid order)."""
    _check_paired(train, val)
    if k_selection == "test" and test is None:
        raise ValidationError("test-set K selection needs a test collection")
    if k_selection == "test":
        log.info("K is selected on the test split; (C1, C2, rho) on validation")
    points = grid.points()
    log.info(f"Grid search over {len(points)} cells with n_jobs={pc.n_jobs}")
    rows = Parallel(n_jobs=pc.n_jobs)(delayed(_grid_cell)(train, val, test, p, pc) for p in points)
    table = pd.DataFrame(rows)
    return select_best(table, k_selection), table


# --- Initialization comparison ---

@dataclass(frozen=True, eq=False)
class InitCompareReport:
    ap_mean: pd.DataFrame
    ap_std: pd.DataFrame
    objective_mean: pd.Series
    objective_std: pd.Series
    runs: int

    def cells(self) -> pd.DataFrame:
        """mean±std strings (AP in percent), one row per initialization."""
        return (self.ap_mean * 100).round(1).astype(str) + "±" + (self.ap_std * 100).round(1).astype(str)

    def as_dict(self) -> dict:
        return {
            "runs": self.runs,
            "rows": list(self.ap_mean.index),
            "columns": list(self.ap_mean.columns),
            "ap_mean": [[float(v) for v in row] for row in self.ap_mean.to_numpy()],
            "ap_std": [[float(v) for v in row] for row in self.ap_std.to_numpy()],
            "objective_mean": {k: float(v) for k, v in self.objective_mean.items()},
            "objective_std": {k: float(v) for k, v in self.objective_std.items()},
        }


def _init_compare_run(train, test, h: MtlHyper, pc: ProtocolConfig) -> dict:
    out = {}
    for init in ("random", "kmeans"):
        start = initial_model(train, h, pc, init)
        trained, _ = train_mtl(train, h, start, pc.sgd, track_objective=False)
        for name, model in ((init, start), (f"{init}+opt", trained)):
            out[name] = ([dataset_ap(compose(model, t), ds) for t, ds in enumerate(test)], eval_J(model, train, h))
    return out


def init_compare(train: DatasetCollection, test: DatasetCollection, h: MtlHyper, pc: ProtocolConfig,
                 runs: int = 30) -> InitCompareReport:
    """
    Random versus k-means initialization, with and without optimization, over `runs` seeds
    (seed, seed+1, ...). Reports mean and std of each dataset's AP and of the final objective.
    """
    _check_paired(train, test)
    if runs < 1:
        raise ValidationError("runs must be >= 1")
    base = pc.sgd.seed
    results = Parallel(n_jobs=pc.n_jobs)(
        delayed(_init_compare_run)(train, test, h, pc.with_seed(base + r)) for r in range(runs)
    )
    aps = {row: np.array([res[row][0] for res in results]) for row in INIT_COMPARE_ROWS}
    objectives = {row: np.array([res[row][1] for res in results]) for row in INIT_COMPARE_ROWS}
    columns = list(test.ids)
    ap_mean = pd.DataFrame([aps[r].mean(axis=0) for r in INIT_COMPARE_ROWS], index=INIT_COMPARE_ROWS, columns=columns)
    ap_std = pd.DataFrame([aps[r].std(axis=0) for r in INIT_COMPARE_ROWS], index=INIT_COMPARE_ROWS, columns=columns)
    obj_mean = pd.Series({r: objectives[r].mean() for r in INIT_COMPARE_ROWS})
    obj_std = pd.Series({r: objectives[r].std() for r in INIT_COMPARE_ROWS})
    log.info(f"Init comparison over {runs} runs: final objective means {obj_mean.to_dict()}")
    return InitCompareReport(ap_mean, ap_std, obj_mean, obj_std, runs)
