import numpy as np
import pandas as pd
import pytest

from core.errors import ValidationError
from core.objective import MtlHyper
from core.optim import SgdConfig
from experiments.protocols import (INIT_COMPARE_ROWS, GridSpec, ProtocolConfig, fit_aggregate, fit_debias_with_aggregate,
                                   grid_search, init_compare, initial_model, run_seen, run_unseen, select_best)
from services.dataset_io import (Dataset, DatasetCollection, SplitSpec, SynthConfig, split_collection,
                                 synth_biased_collection)

H = MtlHyper(K=2, C1=1.0, C2=1.0, rho=1.0)


@pytest.fixture
def splits(tiny_collection):
    return split_collection(tiny_collection, SplitSpec(0.75, seed=0))


@pytest.fixture
def quick() -> ProtocolConfig:
    return ProtocolConfig(sgd=SgdConfig(epochs=3), init="random")


def grid_table(rows) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=["K", "C1", "C2", "rho", "val_ap"])


def synth_splits(seed: int, bias_shift: float) -> tuple:
    coll = synth_biased_collection(SynthConfig(n_datasets=3, n_subcategories=2, dim=2, pos_per_cluster=30,
                                               neg_per_dataset=60, separation=5.0, bias_shift=bias_shift, seed=seed))
    return split_collection(coll, SplitSpec(0.75, seed=seed))


def tilted_splits(seed: int) -> tuple:
    """
    A large dataset whose positives lean towards +e2, a small one leaning towards -e2 and a
    held-out dataset like the small one. Negatives sit at the origin everywhere.
    """
    rng = np.random.default_rng(seed)

    def part(id, n, pos_mean):
        X = np.vstack([rng.normal(pos_mean, 0.5, size=(n, 2)), rng.normal(0.0, 0.5, size=(n, 2))])
        return Dataset(id, X, np.concatenate([np.ones(n, dtype=int), -np.ones(n, dtype=int)]))

    coll = DatasetCollection((part("big", 200, [1.0, 2.0]), part("small", 20, [1.0, -2.0]),
                              part("target", 50, [1.0, -2.0])))
    return split_collection(coll, SplitSpec(0.75, seed=seed))


# --- Configuration ---

def test_protocol_config_validation():
    with pytest.raises(ValidationError):
        ProtocolConfig(init="spectral")
    assert ProtocolConfig().with_seed(9).sgd.seed == 9


@pytest.mark.parametrize("init", ["zeros", "random", "kmeans"])
def test_initial_model_shapes(tiny_collection, init):
    mt = initial_model(tiny_collection, H, ProtocolConfig(sgd=SgdConfig(epochs=2)), init)
    assert (mt.K, mt.T, mt.dim) == (2, 2, tiny_collection.dim)


def test_zero_init_has_no_bias(tiny_collection):
    mt = initial_model(tiny_collection, H, ProtocolConfig(init="zeros"))
    assert mt.max_bias_norm() == 0.0


def test_fit_aggregate_returns_a_single_lsm(tiny_collection, quick):
    model = fit_aggregate(tiny_collection, 2, 1.0, quick)
    assert model.K == 2
    assert model.dim == tiny_collection.dim


# --- Seen and unseen protocols ---

def test_seen_report_shape(splits, quick):
    train, test = splits
    report = run_seen(train, test, H, quick)
    T = len(train)
    assert report.table.shape == (T, T + 3)
    assert list(report.table.columns) == ["w_ds0", "w_ds1", "visual_world", "aggregate", "independent"]
    assert list(report.table.index) == test.ids
    assert np.all((report.table.to_numpy() >= 0) & (report.table.to_numpy() <= 1))
    doc = report.as_dict()
    assert set(doc["mean"]) == set(report.table.columns)


def test_seen_needs_paired_collections(splits, quick):
    train, test = splits
    with pytest.raises(ValidationError):
        run_seen(train, train.without(0), H, quick)


def test_unseen_trains_on_the_remaining_dataset(splits, quick):
    train, test = splits
    report = run_unseen(train, test, 1, H, quick)
    assert report.heldout == "ds1"
    assert report.trained_on == ("ds0",)
    assert set(report.ap) == {"visual_world", "aggregate", "debias_k1"}
    assert set(report.as_dict()["improvement_pct"]) == {"vs_aggregate", "vs_debias_k1"}


def test_unseen_argument_checks(splits, quick):
    train, test = splits
    with pytest.raises(ValidationError):
        run_unseen(train, test, 2, H, quick)
    with pytest.raises(ValidationError):
        run_unseen(train.without(0), test.without(0), 0, H, quick)


def test_seen_without_dataset_bias_matches_the_aggregate():
    train, test = synth_splits(2, bias_shift=0.0)
    pc = ProtocolConfig(sgd=SgdConfig(epochs=20), kmeans_restarts=3)
    means = run_seen(train, test, MtlHyper(K=2, C1=1.0, C2=1.0, rho=10.0), pc).means
    assert abs(means["visual_world"] - means["aggregate"]) <= 0.02


def test_huge_rho_removes_the_bias_and_matches_the_aggregate():
    h = MtlHyper(K=2, C1=1.0, C2=1.0, rho=1e6)
    for seed in range(5):
        train, test = synth_splits(seed, bias_shift=3.0)
        pc = ProtocolConfig(sgd=SgdConfig(epochs=30, seed=seed), kmeans_restarts=3)
        report = run_unseen(train, test, 0, h, pc)
        assert abs(report.ap["visual_world"] - report.ap["aggregate"]) <= 0.01
    mt, aggregate = fit_debias_with_aggregate(train, h, pc)
    assert mt.max_bias_norm() < 1e-3
    assert aggregate.K == mt.K


def test_debiasing_beats_the_aggregate_on_an_unseen_dataset():
    h = MtlHyper(K=1, C1=0.1, C2=0.1, rho=1.0)
    wins = 0
    for seed in range(10):
        train, test = tilted_splits(seed)
        sgd = SgdConfig(epochs=20, seed=seed, sampling="dataset", cooldown_enabled=False, tol_weight_change=0.0)
        report = run_unseen(train, test, 2, h, ProtocolConfig(sgd=sgd, init="zeros"))
        wins += report.ap["visual_world"] >= report.ap["aggregate"]
    assert wins >= 8


# --- Grid search ---

def test_default_grid_axes():
    grid = GridSpec()
    assert len(grid.rho_exponents) == 14
    assert len(grid.c1_exponents) == 27
    assert len(grid.c2_exponents) == 27
    assert len(grid.k_values) == 10
    assert grid.c1_exponents[0] == -9.0 and grid.c1_exponents[-1] == 4.0
    assert grid.size == 10 * 14 * 27 * 27


def test_grid_points_are_powers_of_ten():
    grid = GridSpec(rho_exponents=(0,), c1_exponents=(-1.0,), c2_exponents=(0.5,), k_values=(3,))
    assert grid.points() == [(3, 0.1, 10.0 ** 0.5, 1.0)]
    with pytest.raises(ValidationError):
        GridSpec(k_values=())


def test_select_best_prefers_higher_validation_ap():
    table = grid_table([(1, 1.0, 1.0, 1.0, 0.7), (5, 1.0, 1.0, 1.0, 0.9)])
    assert select_best(table)["K"] == 5


def test_select_best_tie_rules():
    table = grid_table([
        (2, 1.0, 1.0, 1.0, 0.8),
        (1, 1.0, 1.0, 10.0, 0.8),
        (1, 5.0, 1.0, 1.0, 0.8),
        (1, 3.0, 1.0, 1.0, 0.8),
    ])
    best = select_best(table)
    assert (best["K"], best["rho"], best["C1"]) == (1, 1.0, 5.0)


def test_select_best_on_test_split():
    table = grid_table([
        (1, 1.0, 1.0, 1.0, 0.9),
        (1, 2.0, 1.0, 1.0, 0.5),
        (2, 1.0, 1.0, 1.0, 0.6),
        (2, 4.0, 1.0, 1.0, 0.7),
    ]).assign(test_ap=[0.5, 0.99, 0.1, 0.8])
    best = select_best(table, "test")
    assert (best["K"], best["C1"]) == (2, 4.0)
    with pytest.raises(ValidationError):
        select_best(table.drop(columns="test_ap"), "test")
    with pytest.raises(ValidationError):
        select_best(table.iloc[:0])


def test_grid_search_table(splits, quick):
    train, val = splits
    grid = GridSpec(rho_exponents=(0,), c1_exponents=(0.0,), c2_exponents=(0.0, 1.0), k_values=(1, 2))
    best, table = grid_search(train, val, grid, quick)
    assert len(table) == grid.size
    assert list(table[["K", "C2"]].itertuples(index=False, name=None)) == [(1, 1.0), (1, 10.0), (2, 1.0), (2, 10.0)]
    assert best["val_ap"] == pytest.approx(table["val_ap"].max())


def test_grid_search_test_selection_needs_a_test_split(splits, quick):
    train, val = splits
    with pytest.raises(ValidationError):
        grid_search(train, val, GridSpec(k_values=(1,)), quick, k_selection="test")


# --- Initialization comparison ---

def test_init_compare_shape(splits):
    train, test = splits
    pc = ProtocolConfig(sgd=SgdConfig(epochs=2), kmeans_restarts=2)
    report = init_compare(train, test, H, pc, runs=2)
    assert list(report.ap_mean.index) == list(INIT_COMPARE_ROWS)
    assert report.ap_mean.shape == (4, len(test))
    assert report.ap_std.shape == (4, len(test))
    assert all("±" in cell for cell in report.cells().to_numpy().ravel())
    assert report.as_dict()["runs"] == 2


def test_init_compare_needs_runs(splits, quick):
    train, test = splits
    with pytest.raises(ValidationError):
        init_compare(train, test, H, quick, runs=0)


def test_kmeans_init_beats_random_init(biased_collection):
    train, test = split_collection(biased_collection, SplitSpec(0.75, seed=0))
    wins, objectives = 0, {"kmeans+opt": [], "random+opt": []}
    for seed in range(30):
        pc = ProtocolConfig(sgd=SgdConfig(epochs=20, seed=seed), kmeans_restarts=3)
        report = init_compare(train, test, H, pc, runs=1)
        ap = report.ap_mean.mean(axis=1)
        wins += ap["kmeans+opt"] >= ap["random+opt"]
        for row in objectives:
            objectives[row].append(report.objective_mean[row])
    assert wins >= 24
    assert np.mean(objectives["kmeans+opt"]) <= np.mean(objectives["random+opt"])
