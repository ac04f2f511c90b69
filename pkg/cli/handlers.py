"""
One handler per subcommand. A handler computes everything first, writes its side files last and
returns the `results` payload of the run's results document.
"""
import logging
from pathlib import Path

import numpy as np

from config import RunConfig
from core.cluster_init import check_bound, epsilon_profile, init_lsm_from_clusters, kmeans, random_lsm_init
from core.errors import ValidationError
from core.model import LsmModel, augment, decision_values
from core.objective import eval_E
from core.optim import train_lsm_alternating
from core.patchsel import load_patches, load_records, measure_patches, select_patches
from experiments.metrics import average_precision
from experiments.protocols import fit_debias, grid_search, init_compare, run_seen, run_unseen
from reporting import reporting_manager
from services.dataset_io import (SplitSpec, concatenate, load_collection, save_collection, split_collection,
                                 synth_biased_collection)

log = logging.getLogger(__name__)


def _require(cfg: RunConfig, name: str) -> str:
    value = getattr(cfg, name)
    if not value:
        raise ValidationError(f"--{name.replace('_', '-')} is required for '{cfg.subcommand}'")
    return value


def _load(cfg: RunConfig):
    return load_collection(_require(cfg, "data"))


def _out(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out) / name


def _trace_rows(trace) -> list:
    return reporting_manager.trace_frame(trace).to_dict(orient="records")


def synth_command(cfg: RunConfig) -> dict:
    coll = synth_biased_collection(cfg.synth_config())
    target = _out(cfg, "data")
    save_collection(coll, target)
    return {
        "path": str(target),
        "dim": coll.dim,
        "datasets": [
            {"id": ds.id, "n": len(ds), "n_pos": int(np.sum(ds.y == 1)), "n_neg": int(np.sum(ds.y == -1))}
            for ds in coll
        ],
    }


def train_lsm_command(cfg: RunConfig) -> dict:
    """Alternating minimization of a single LSM on the pooled collection."""
    data = concatenate(list(_load(cfg)))
    data.require_both_classes()
    h, sgd = cfg.lsm_hyper(), cfg.sgd_config()
    if cfg.init == "kmeans" and h.lam > 0:
        ci = kmeans(data.positives, h.K, cfg.seed, cfg.restarts)
        init = init_lsm_from_clusters(ci, data, h, sgd, cfg.n_jobs)
    elif cfg.init == "zeros":
        init = LsmModel.zeros(h.K, data.dim)
    else:
        if cfg.init == "kmeans":
            log.warning("k-means initialization trains per-cluster SVMs and needs lambda > 0; using random init")
        init = random_lsm_init(h.K, data.dim, cfg.seed, cfg.init_scale)

    model, trace = train_lsm_alternating(data, h, init, cfg.max_outer, sgd)
    ap = average_precision(decision_values(model, augment(data.X)), data.y).ap
    reporting_manager.save_model(_out(cfg, "lsm.model"), model)
    return {
        "K": h.K,
        "objective_E": eval_E(model, data, h),
        "train_ap": ap,
        "outer": [{"outer": r.outer, "objective_F": r.objective_F, "objective_E": r.objective_E,
                   "reassigned": r.reassigned} for r in trace],
    }


def train_debias_command(cfg: RunConfig) -> dict:
    coll = _load(cfg)
    model, trace = fit_debias(coll, cfg.mtl_hyper(), cfg.protocol_config())
    reporting_manager.save_model(_out(cfg, "debias.model"), model)
    reporting_manager.write_trace(_out(cfg, "debias.trace"), trace)
    return {
        "K": model.K,
        "T": model.T,
        "final_objective": trace[-1].objective,
        "max_bias_norm": model.max_bias_norm(),
        "trace": _trace_rows(trace),
    }


def init_compare_command(cfg: RunConfig) -> dict:
    train, test = split_collection(_load(cfg), cfg.split_spec())
    report = init_compare(train, test, cfg.mtl_hyper(), cfg.protocol_config(), cfg.runs)
    reporting_manager.write_table(_out(cfg, "init_compare.csv"), report.cells())
    return {**report.as_dict(), "cells": report.cells().to_dict(orient="index")}


def bound_check_command(cfg: RunConfig) -> dict:
    data = concatenate(list(_load(cfg)))
    report = check_bound(data, cfg.k, cfg.lam, cfg.seed, cfg.sgd_config(), cfg.n_samples, cfg.restarts)
    profile = epsilon_profile(data.positives, range(1, cfg.k + 1), cfg.seed, cfg.restarts)
    return {**report.as_dict(), "epsilon_by_k": {str(K): ci.epsilon for K, ci in profile.items()}}


def eval_seen_command(cfg: RunConfig) -> dict:
    train, test = split_collection(_load(cfg), cfg.split_spec())
    report = run_seen(train, test, cfg.mtl_hyper(), cfg.protocol_config())
    reporting_manager.write_table(_out(cfg, "eval_seen.csv"), report.table)
    return report.as_dict()


def eval_unseen_command(cfg: RunConfig) -> dict:
    train, test = split_collection(_load(cfg), cfg.split_spec())
    return run_unseen(train, test, cfg.heldout, cfg.mtl_hyper(), cfg.protocol_config()).as_dict()


def grid_command(cfg: RunConfig) -> dict:
    """Splits off a test part first, then a validation part of the remainder, both with `split`."""
    trainval, test = split_collection(_load(cfg), cfg.split_spec())
    train, val = split_collection(trainval, SplitSpec(train_fraction=cfg.split, seed=cfg.seed + 1))
    best, table = grid_search(train, val, cfg.grid_spec(), cfg.protocol_config(), test, cfg.k_selection)
    reporting_manager.write_table(_out(cfg, "grid.csv"), table, index=False)
    return {"best": best, "k_selection": cfg.k_selection, "cells": len(table)}


def patch_select_command(cfg: RunConfig) -> dict:
    pool = load_patches(_require(cfg, "patches"))
    pos = load_records(_require(cfg, "pos_records"))
    neg = load_records(_require(cfg, "neg_records"))
    measures = measure_patches(pool, pos, neg, cfg.use_spatial, cfg.n_jobs)
    selected = select_patches(pool, pos, neg, cfg.n_select, cfg.strategy, cfg.seed, cfg.use_spatial, cfg.n_jobs)
    return {
        "strategy": cfg.strategy,
        "use_spatial": cfg.use_spatial,
        "measures": [{"patch_id": p.patch_id, "rep": rep, "disc": disc} for p, (rep, disc) in zip(pool, measures)],
        "selected": [p.patch_id for p in selected],
    }


COMMANDS = {
    "synth": synth_command,
    "train-lsm": train_lsm_command,
    "train-debias": train_debias_command,
    "init-compare": init_compare_command,
    "bound-check": bound_check_command,
    "eval-seen": eval_seen_command,
    "eval-unseen": eval_unseen_command,
    "grid": grid_command,
    "patch-select": patch_select_command,
}
