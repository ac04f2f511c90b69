"""
Loading, saving, splitting and synthesizing multi-dataset feature collections.

Dataset file format (UTF-8, one example per line, 1-based feature indices):

    #dim 5
    +1 1:0.25 3:1.5
    -1 2:-0.75

`#dim D` is an optional header that fixes the dimension; other `#` lines are comments.
A collection is a directory of `*.ds` files, one dataset per file, id = file stem.
"""
import io
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.datasets import load_svmlight_file

from core.errors import DataFormatError, ValidationError
from core.textio import decode_lines

log = logging.getLogger(__name__)

DATASET_SUFFIX = ".ds"


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """An ordered, immutable set of labeled feature vectors sharing one dimension."""
    id: str
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        y = np.array(self.y, dtype=int).reshape(-1)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValidationError(f"dataset '{self.id}' must be a nonempty 2-D feature matrix")
        if X.shape[0] != y.shape[0]:
            raise ValidationError(f"dataset '{self.id}': {X.shape[0]} feature rows but {y.shape[0]} labels")
        if not np.all(np.isin(y, (-1, 1))):
            raise ValidationError(f"dataset '{self.id}': label not ±1")
        if not np.all(np.isfinite(X)):
            raise ValidationError(f"dataset '{self.id}': non-finite feature value")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def positives(self) -> np.ndarray:
        return self.X[self.y == 1]

    @property
    def negatives(self) -> np.ndarray:
        return self.X[self.y == -1]

    @property
    def examples(self) -> tuple:
        return tuple(LabeledExample(x, int(label)) for x, label in zip(self.X, self.y))

    def require_both_classes(self):
        if not np.any(self.y == 1) or not np.any(self.y == -1):
            raise ValidationError(f"dataset '{self.id}' needs at least one positive and one negative example")

    def subset(self, indices, id: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        return Dataset(id or self.id, self.X[indices], self.y[indices])


@dataclass(frozen=True, eq=False)
class DatasetCollection:
    datasets: tuple
    dim: int = field(default=-1)

    def __post_init__(self):
        datasets = tuple(self.datasets)
        if not datasets:
            raise ValidationError("a collection needs at least one dataset")
        dims = {ds.dim for ds in datasets}
        if len(dims) != 1:
            raise ValidationError(f"datasets disagree on dimension: {sorted(dims)}")
        ids = [ds.id for ds in datasets]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"dataset ids must be unique, got {ids}")
        dim = dims.pop()
        if self.dim not in (-1, dim):
            raise ValidationError(f"collection dim {self.dim} does not match dataset dim {dim}")
        object.__setattr__(self, "datasets", datasets)
        object.__setattr__(self, "dim", dim)

    def __len__(self) -> int:
        return len(self.datasets)

    def __getitem__(self, t: int) -> Dataset:
        return self.datasets[t]

    def __iter__(self):
        return iter(self.datasets)

    @property
    def ids(self) -> list:
        return [ds.id for ds in self.datasets]

    def without(self, t: int) -> "DatasetCollection":
        if not 0 <= t < len(self):
            raise ValidationError(f"dataset index {t} out of range for T={len(self)}")
        return DatasetCollection(tuple(ds for s, ds in enumerate(self.datasets) if s != t))


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.seed < 0:
            raise ValidationError("split seed must be unsigned")


@dataclass(frozen=True)
class SynthConfig:
    n_datasets: int = 3
    n_subcategories: int = 2
    dim: int = 2
    pos_per_cluster: int = 50
    neg_per_dataset: int = 100
    separation: float = 4.0
    bias_shift: float = 0.0
    noise: float = 1.0
    background_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_datasets", "n_subcategories", "dim", "pos_per_cluster", "neg_per_dataset"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("noise", "background_scale"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("separation", "bias_shift"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.bias_shift > 0 and self.dim < self.n_datasets - 1:
            raise ValidationError(f"bias_shift > 0 needs dim >= n_datasets - 1, got dim={self.dim}")
        if self.seed < 0:
            raise ValidationError("seed must be unsigned")


# --- Parsing ---

def _parse_label(token: str, path, lineno: int) -> int:
    try:
        label = int(token)
    except ValueError:
        raise DataFormatError(f"malformed label '{token}'", path, lineno) from None
    if label not in (-1, 1):
        raise DataFormatError("label not ±1", path, lineno)
    return label


@dataclass(frozen=True)
class _ScannedFile:
    """What the line scan learns about a dataset file before it is parsed."""
    path: Path
    raw: bytes
    header_dim: int
    max_index: int
    data_lines: tuple  # (lineno, text) of each example line, in file order


def _feature_index(token: str, path, lineno: int) -> int:
    idx_str, sep, _ = token.partition(":")
    try:
        idx = int(idx_str)
    except ValueError:
        raise DataFormatError(f"malformed feature '{token}'", path, lineno) from None
    if not sep:
        raise DataFormatError(f"malformed feature '{token}'", path, lineno)
    if idx < 1:
        raise DataFormatError(f"feature index {idx} must be >= 1", path, lineno)
    return idx


def _scan_file(path: Path) -> _ScannedFile:
    """Checks encoding, the `#dim` header, labels and duplicate indices; values are left to the parser."""
    raw = path.read_bytes()
    header_dim, max_index, data_lines = None, 0, []
    for lineno, text in decode_lines(raw, path):
        line = text.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "dim":
                if len(parts) != 2 or not parts[1].isdigit() or int(parts[1]) <= 0:
                    raise DataFormatError(f"malformed header '{line}'", path, lineno)
                header_dim = int(parts[1])
            continue
        tokens = line.split("#", 1)[0].split()
        _parse_label(tokens[0], path, lineno)
        seen = set()
        for tok in tokens[1:]:
            idx = _feature_index(tok, path, lineno)
            if idx in seen:
                raise DataFormatError(f"duplicate index {idx}", path, lineno)
            seen.add(idx)
            max_index = max(max_index, idx)
        data_lines.append((lineno, line))
    if not data_lines:
        raise DataFormatError("empty dataset file", path)
    if header_dim is not None and header_dim < max_index:
        raise DataFormatError(f"#dim {header_dim} is smaller than max index {max_index}", path)
    return _ScannedFile(path, raw, header_dim, max_index, tuple(data_lines))


def _svmlight(source: bytes, dim: int):
    return load_svmlight_file(io.BytesIO(source), n_features=dim, dtype=np.float64, zero_based=False)


def _parse_file(scanned: _ScannedFile, dim: int):
    """Parses a scanned file as svmlight data with `dim` features; returns dense (X, y)."""
    try:
        X, y = _svmlight(scanned.raw, dim)
    except ValueError as exc:
        # locate the first line the parser rejects on its own
        for lineno, line in scanned.data_lines:
            try:
                _svmlight(line.encode("utf-8") + b"\n", dim)
            except ValueError as line_exc:
                raise DataFormatError(f"malformed line: {line_exc}", scanned.path, lineno) from None
        raise DataFormatError(f"malformed dataset: {exc}", scanned.path) from None
    X = X.toarray()
    bad_rows = np.flatnonzero(~np.all(np.isfinite(X), axis=1))
    if bad_rows.size:
        raise DataFormatError("non-finite feature value", scanned.path, scanned.data_lines[bad_rows[0]][0])
    return X, y.astype(int)


def load_collection(path) -> DatasetCollection:
    """Loads every `*.ds` file of a directory, in lexicographic file order."""
    directory = Path(path)
    if not directory.is_dir():
        raise FileNotFoundError(f"collection directory not found: {directory}")
    files = sorted(directory.glob(f"*{DATASET_SUFFIX}"), key=lambda p: p.name)
    if not files:
        raise DataFormatError("no dataset files found", directory)

    scanned = [_scan_file(f) for f in files]
    dim = max(s.header_dim if s.header_dim is not None else s.max_index for s in scanned)
    if dim == 0:
        raise DataFormatError("collection has no features", directory)

    datasets = []
    for s in scanned:
        X, y = _parse_file(s, dim)
        datasets.append(Dataset(s.path.stem, X, y))
        log.debug(f"Loaded dataset '{s.path.stem}' with {len(y)} examples from {s.path}")
    log.info(f"Loaded collection of {len(datasets)} datasets (d={dim}) from {directory}")
    return DatasetCollection(tuple(datasets))


def _format_dataset(ds: Dataset) -> str:
    lines = [f"#dim {ds.dim}"]
    for x, label in zip(ds.X, ds.y):
        feats = [f"{j + 1}:{float(v)!r}" for j, v in enumerate(x) if v != 0.0]
        lines.append(" ".join(["+1" if label == 1 else "-1"] + feats))
    return "\n".join(lines) + "\n"


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_collection(coll: DatasetCollection, path):
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    for ds in coll:
        atomic_write_text(directory / f"{ds.id}{DATASET_SUFFIX}", _format_dataset(ds))
    log.info(f"Saved {len(coll)} datasets to {directory}")


# --- Splitting and pooling ---

def _train_count(n: int, fraction: float) -> int:
    return int(np.floor(fraction * n + 0.5))


def split_train_val(ds: Dataset, spec: SplitSpec) -> tuple:
    """Stratified, seeded split. Both halves keep the input order of their examples."""
    rng = np.random.default_rng(spec.seed)
    train_idx = []
    for label in (1, -1):
        idx = np.flatnonzero(ds.y == label)
        n_train = _train_count(len(idx), spec.train_fraction)
        if n_train < 1 or n_train > len(idx) - 1:
            raise ValidationError(
                f"dataset '{ds.id}' has {len(idx)} examples of class {label:+d}; "
                f"too few for a {spec.train_fraction:.2f} split with both halves nonempty"
            )
        train_idx.extend(rng.permutation(idx)[:n_train].tolist())
    train_mask = np.zeros(len(ds), dtype=bool)
    train_mask[train_idx] = True
    return ds.subset(np.flatnonzero(train_mask)), ds.subset(np.flatnonzero(~train_mask))


def split_collection(coll: DatasetCollection, spec: SplitSpec) -> tuple:
    halves = [split_train_val(ds, spec) for ds in coll]
    return (DatasetCollection(tuple(h[0] for h in halves)),
            DatasetCollection(tuple(h[1] for h in halves)))


def concatenate(datasets, id: str = "aggregate") -> Dataset:
    datasets = list(datasets)
    return Dataset(id, np.vstack([ds.X for ds in datasets]), np.concatenate([ds.y for ds in datasets]))


# --- Synthetic biased collections ---

def shift_vectors(n: int, dim: int, magnitude: float, rng) -> np.ndarray:
    """
    n dataset shifts in R^dim whose pairwise distances all equal `magnitude`.
    With dim >= n every shift also has norm `magnitude` (pairwise angles of 60 degrees);
    with dim == n - 1 they are the vertices of a centred regular simplex.
    """
    if magnitude == 0.0:
        return np.zeros((n, dim))
    if dim >= n:
        gram = 0.5 * magnitude ** 2 * (np.eye(n) + np.ones((n, n)))
    elif dim == n - 1:
        gram = 0.5 * magnitude ** 2 * (np.eye(n) - np.ones((n, n)) / n)
    else:
        raise ValidationError(f"{n} equidistant dataset shifts need dim >= {n - 1}, got {dim}")
    eigval, eigvec = np.linalg.eigh(gram)
    keep = eigval > 1e-12 * eigval.max()
    coords = eigvec[:, keep] * np.sqrt(eigval[keep])
    basis, _ = np.linalg.qr(rng.normal(size=(dim, coords.shape[1])))
    return coords @ basis.T


def synth_biased_collection(cfg: SynthConfig) -> DatasetCollection:
    """
    Positives come from `n_subcategories` Gaussian clusters; every cluster of dataset t is shifted
    by the same dataset vector from `shift_vectors`, so any two datasets' positive means sit
    `bias_shift` apart. Negatives come from a zero-mean background Gaussian shared by all datasets.
    """
    rng = np.random.default_rng(cfg.seed)
    directions = rng.normal(size=(cfg.n_subcategories, cfg.dim))
    centers = cfg.separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    shifts = shift_vectors(cfg.n_datasets, cfg.dim, cfg.bias_shift, rng)

    datasets = []
    for t in range(cfg.n_datasets):
        pos = np.vstack([
            centers[k] + shifts[t] + cfg.noise * rng.normal(size=(cfg.pos_per_cluster, cfg.dim))
            for k in range(cfg.n_subcategories)
        ])
        neg = cfg.background_scale * rng.normal(size=(cfg.neg_per_dataset, cfg.dim))
        X = np.vstack([pos, neg])
        y = np.concatenate([np.ones(len(pos), dtype=int), -np.ones(len(neg), dtype=int)])
        order = rng.permutation(len(y))
        datasets.append(Dataset(f"ds{t}", X[order], y[order]))
    log.info(
        f"Synthesized {cfg.n_datasets} datasets: K_true={cfg.n_subcategories}, d={cfg.dim}, "
        f"bias_shift={cfg.bias_shift}, noise={cfg.noise}, seed={cfg.seed}"
    )
    return DatasetCollection(tuple(datasets))
