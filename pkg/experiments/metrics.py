import logging
from dataclasses import dataclass

import numpy as np

from core.errors import ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ApResult:
    ap: float
    precision: np.ndarray
    recall: np.ndarray


def average_precision(scores, labels) -> ApResult:
    """
    All-points average precision: the mean, over positives, of the precision at each positive's
    position in the ranking by decreasing score (ties keep input order).
    """
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if len(s) != len(y):
        raise ValidationError(f"{len(s)} scores but {len(y)} labels")
    if not np.all(np.isin(y, (-1, 1))):
        raise ValidationError("labels must be +1 or -1")
    if not np.all(np.isfinite(s)):
        raise ValidationError("scores must be finite")
    n_pos = int(np.sum(y == 1))
    if n_pos == 0:
        raise ValidationError("average precision needs at least one positive")

    order = np.argsort(-s, kind="stable")
    hits = (y[order] == 1).astype(float)
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(s) + 1)
    recall = tp / n_pos
    ap = float(np.sum(precision * hits) / n_pos)
    return ApResult(ap, precision, recall)
