"""
Subcategory-aware discriminative patches over precomputed detection records.

A patch p = (weights, rel_pos) scores an image by its best-responding candidate placement z
(appearance) and by the overlap of z with the placement predicted from the object box (spatial).
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from core.cluster_init import kmeans
from core.errors import DataFormatError, ValidationError
from core.optim import SgdConfig, train_svm
from core.textio import read_lines

log = logging.getLogger(__name__)

NMS_THRESHOLD = 0.5
SELECTION_STRATEGIES = ("combined", "representation", "random")


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValidationError(f"box width and height must be positive, got w={self.w} h={self.h}")
        if not all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise ValidationError("box coordinates must be finite")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple:
        return (self.x, self.y, self.w, self.h)


def iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def project_rel_pos(r: Box, b: Box) -> Box:
    """Places a normalized box r inside the object box b."""
    return Box(b.x + r.x * b.w, b.y + r.y * b.h, r.w * b.w, r.h * b.h)


@dataclass(frozen=True, eq=False)
class PatchModel:
    patch_id: str
    weights: np.ndarray
    rel_pos: Box

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        r = self.rel_pos
        if not (0.0 <= r.x <= 1.0 and 0.0 <= r.y <= 1.0 and r.w <= 1.0 and r.h <= 1.0):
            raise ValidationError(f"patch '{self.patch_id}': relative position {r.as_tuple()} outside [0,1]^2 x (0,1]^2")


@dataclass(frozen=True, eq=False)
class DetectionRecord:
    """One image x = (i, b): the object box and every candidate placement with its feature vector."""
    image_id: str
    object_box: Box
    candidates: tuple
    features: np.ndarray

    def __post_init__(self):
        F = np.atleast_2d(np.array(self.features, dtype=float))
        if len(self.candidates) == 0:
            raise ValidationError(f"image '{self.image_id}' has no candidate placements")
        if F.shape[0] != len(self.candidates):
            raise ValidationError(f"image '{self.image_id}': {len(self.candidates)} candidates but {F.shape[0]} feature rows")
        F.setflags(write=False)
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "features", F)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class PatchScores:
    appearance: float
    spatial: float
    combined: float
    best_candidate: int


def _normalize(value: float, bounds) -> float:
    lo, hi = bounds
    return (value - lo) / (hi - lo) if hi > lo else 0.0


def _best_candidate(rec: DetectionRecord, p: PatchModel) -> tuple:
    if rec.dim != len(p.weights):
        raise ValidationError(f"dimension mismatch: image '{rec.image_id}' has {rec.dim}-d features, patch '{p.patch_id}' has {len(p.weights)}")
    responses = rec.features @ p.weights
    z = int(np.argmax(responses))
    return z, float(responses[z])


def patch_score(rec: DetectionRecord, p: PatchModel, bounds=None, use_spatial: bool = True) -> PatchScores:
    """
    Appearance is the best candidate response, spatial is IoU between that candidate and the
    projected relative position. With `bounds=(lo, hi)` the appearance entering the combined score
    is min-max normalized; without bounds it enters raw.
    """
    z, appearance = _best_candidate(rec, p)
    spatial = iou(rec.candidates[z], project_rel_pos(p.rel_pos, rec.object_box))
    normalized = appearance if bounds is None else _normalize(appearance, bounds)
    combined = normalized + (spatial if use_spatial else 0.0)
    return PatchScores(appearance, spatial, combined, z)


def score_records(recs, p: PatchModel, use_spatial: bool = True) -> list:
    """Scores of `p` on every record, appearance normalized over this record set."""
    appearances = [_best_candidate(rec, p)[1] for rec in recs]
    bounds = (min(appearances), max(appearances))
    return [patch_score(rec, p, bounds, use_spatial) for rec in recs]


def representation_measure(p: PatchModel, recs, use_spatial: bool = True) -> float:
    """Mean combined score over the subcategory's images."""
    if not recs:
        raise ValidationError("representation measure needs at least one record")
    return math.fsum(s.combined for s in score_records(recs, p, use_spatial)) / len(recs)


def discrimination_measure(p: PatchModel, pos_recs, neg_recs, use_spatial: bool = True) -> float:
    """
    Median retrieval rank of the subcategory's images within the mixed set, divided by their count.
    Ranks are 1-based by decreasing combined score, ties by input order. Lower is better.
    """
    if not pos_recs:
        raise ValidationError("discrimination measure needs at least one subcategory record")
    if not neg_recs:
        raise ValidationError("discrimination measure needs at least one negative record")
    mixed = list(pos_recs) + list(neg_recs)
    combined = np.array([s.combined for s in score_records(mixed, p, use_spatial)])
    order = np.argsort(-combined, kind="stable")
    ranks = np.empty(len(mixed))
    ranks[order] = np.arange(1, len(mixed) + 1)
    return float(np.median(ranks[:len(pos_recs)])) / len(pos_recs)


def _measure_patch(p, pos_recs, neg_recs, use_spatial) -> tuple:
    return representation_measure(p, pos_recs, use_spatial), discrimination_measure(p, pos_recs, neg_recs, use_spatial)


def measure_patches(pool, pos_recs, neg_recs, use_spatial: bool = True, n_jobs: int = 1) -> list:
    """(rep, disc) for every patch, in pool order."""
    return Parallel(n_jobs=n_jobs)(delayed(_measure_patch)(p, pos_recs, neg_recs, use_spatial) for p in pool)


def select_patches(pool, pos_recs, neg_recs, n: int, strategy: str = "combined", seed: int = 0,
                   use_spatial: bool = True, n_jobs: int = 1) -> list:
    """
    Top-n patches by rep - disc ("combined"), by rep alone ("representation"), or a seeded random
    draw ("random"). Ties keep pool order.
    """
    pool = list(pool)
    if strategy not in SELECTION_STRATEGIES:
        raise ValidationError(f"strategy must be one of {SELECTION_STRATEGIES}, got '{strategy}'")
    if not 1 <= n <= len(pool):
        raise ValidationError(f"cannot select {n} patches from a pool of {len(pool)}")
    if strategy == "random":
        rng = np.random.default_rng(seed)
        return [pool[i] for i in rng.permutation(len(pool))[:n]]

    log.info("Appearance scores are min-max normalized per patch over each record set")
    measures = measure_patches(pool, pos_recs, neg_recs, use_spatial, n_jobs)
    if strategy == "representation":
        keys = np.array([rep for rep, _ in measures])
    else:
        keys = np.array([rep - disc for rep, disc in measures])
    order = np.argsort(-keys, kind="stable")
    return [pool[i] for i in order[:n]]


# --- Calibration ---

@dataclass(frozen=True, eq=False)
class CalibrationModel:
    """Linear weights over [monolithic, patch_1..patch_n] score channels plus a trailing bias."""
    weights: np.ndarray

    @property
    def n_channels(self) -> int:
        return len(self.weights) - 1

    def score(self, channels) -> np.ndarray:
        C = np.atleast_2d(np.asarray(channels, dtype=float))
        if C.shape[1] != self.n_channels:
            raise ValidationError(f"expected {self.n_channels} score channels, got {C.shape[1]}")
        return C @ self.weights[:-1] + self.weights[-1]


def calibrate(patch_scores, monolithic_scores, labels, lam: float, cfg: SgdConfig) -> CalibrationModel:
    """Linear SVM on per-image score vectors [monolithic, patch_1, ..., patch_n]."""
    P = np.atleast_2d(np.asarray(patch_scores, dtype=float))
    m = np.asarray(monolithic_scores, dtype=float).reshape(-1, 1)
    y = np.asarray(labels)
    if P.shape[0] != len(m) or len(y) != len(m):
        raise ValidationError(f"score matrix rows ({P.shape[0]}), monolithic scores ({len(m)}) and labels ({len(y)}) must agree")
    if not np.all(np.isin(y, (-1, 1))):
        raise ValidationError("labels must be +1 or -1")
    if np.all(y == 1) or np.all(y == -1):
        raise ValidationError("calibration needs both positive and negative images")
    channels = np.hstack([m, P])
    X = np.hstack([channels, np.ones((len(channels), 1))])
    return CalibrationModel(train_svm(X[y == 1], X[y == -1], lam, cfg))


# --- Bounding-box pooling ---

class PoolMethod(str, Enum):
    NMS = "nms"
    MEDIAN = "median"
    KMEANS = "kmeans"


def _median_box(boxes) -> Box:
    A = np.array([b.as_tuple() for b in boxes])
    lower = np.sort(A, axis=0)[(len(A) - 1) // 2]
    return Box(*(float(v) for v in lower))


def _nms(predicted, threshold: float) -> list:
    order = sorted(range(len(predicted)), key=lambda i: -predicted[i][1])
    kept = []
    for i in order:
        box = predicted[i][0]
        if all(iou(box, other) < threshold for other in kept):
            kept.append(box)
    return kept


def pool_boxes(predicted, method, k: int | None = None, threshold: float = NMS_THRESHOLD, seed: int = 0) -> list:
    """
    Combines scored predictions: greedy NMS, the coordinate-wise (lower) median box, or k-means on
    box centers with one median box per cluster. Identical output boxes are reported once.
    """
    predicted = list(predicted)
    if not predicted:
        raise ValidationError("pool_boxes needs at least one predicted box")
    method = PoolMethod(method)
    if method is PoolMethod.NMS:
        return _nms(predicted, threshold)
    boxes = [b for b, _ in predicted]
    if method is PoolMethod.MEDIAN:
        return [_median_box(boxes)]

    if k is None or not 1 <= k <= len(boxes):
        raise ValidationError(f"k must lie in [1, {len(boxes)}] for k-means pooling, got {k}")
    centers = np.array([[b.x + b.w / 2.0, b.y + b.h / 2.0] for b in boxes])
    assignment = kmeans(centers, k, seed).assignment
    out = []
    for c in range(k):
        members = [b for b, a in zip(boxes, assignment) if a == c]
        if members:
            box = _median_box(members)
            if box not in out:
                out.append(box)
    return out


# --- Record files ---

def _floats(tokens, path, lineno) -> list:
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise DataFormatError(f"malformed number: {exc}", path, lineno) from exc


def _box(values, path, lineno) -> Box:
    try:
        return Box(*values)
    except ValidationError as exc:
        raise DataFormatError(str(exc), path, lineno) from exc


def load_records(path) -> list:
    """
    Detection records, one line per placement: `image_id candidate_id f_1 ... f_D x y w h`,
    plus one `image_id object x y w h` line giving each image's object box.
    """
    path = Path(path)
    objects, candidates, order = {}, {}, []
    dim = None
    for lineno, raw in read_lines(path):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        image_id, cand_id = tokens[0], tokens[1] if len(tokens) > 1 else None
        if image_id not in objects and image_id not in candidates:
            order.append(image_id)
        if cand_id == "object":
            if len(tokens) != 6:
                raise DataFormatError("object line needs exactly x y w h", path, lineno)
            if image_id in objects:
                raise DataFormatError(f"duplicate object box for image '{image_id}'", path, lineno)
            objects[image_id] = _box(_floats(tokens[2:], path, lineno), path, lineno)
            continue
        if len(tokens) < 7:
            raise DataFormatError("candidate line needs at least one feature and x y w h", path, lineno)
        values = _floats(tokens[2:], path, lineno)
        feats, box = values[:-4], _box(values[-4:], path, lineno)
        if dim is None:
            dim = len(feats)
        elif len(feats) != dim:
            raise DataFormatError(f"expected {dim} features, got {len(feats)}", path, lineno)
        candidates.setdefault(image_id, []).append((box, feats))

    records = []
    for image_id in order:
        if image_id not in objects:
            raise DataFormatError(f"image '{image_id}' has no object box", path)
        if image_id not in candidates:
            raise DataFormatError(f"image '{image_id}' has no candidate placements", path)
        boxes, feats = zip(*candidates[image_id])
        records.append(DetectionRecord(image_id, objects[image_id], boxes, np.array(feats)))
    if not records:
        raise DataFormatError("no detection records", path)
    log.info(f"Loaded {len(records)} detection records from {path}")
    return records


def load_patches(path) -> list:
    """Patch models, one per line: `patch_id rx ry rw rh w_1 ... w_D`."""
    path = Path(path)
    patches, ids = [], set()
    for lineno, raw in read_lines(path):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) < 6:
            raise DataFormatError("patch line needs an id, rx ry rw rh and at least one weight", path, lineno)
        if tokens[0] in ids:
            raise DataFormatError(f"duplicate patch id '{tokens[0]}'", path, lineno)
        values = _floats(tokens[1:], path, lineno)
        try:
            patches.append(PatchModel(tokens[0], values[4:], Box(*values[:4])))
        except ValidationError as exc:
            raise DataFormatError(str(exc), path, lineno) from exc
        ids.add(tokens[0])
    if not patches:
        raise DataFormatError("no patches", path)
    if len({len(p.weights) for p in patches}) != 1:
        raise DataFormatError("patches have differing weight dimensions", path)
    return patches
