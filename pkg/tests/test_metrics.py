import itertools

import numpy as np
import pytest

from core.errors import ValidationError
from experiments.metrics import average_precision


def brute_force_ap(scores, labels) -> float:
    ranked = [labels[i] for i in sorted(range(len(scores)), key=lambda i: (-scores[i], i))]
    hits, total = 0, 0.0
    for rank, label in enumerate(ranked, start=1):
        if label == 1:
            hits += 1
            total += hits / rank
    return total / hits


@pytest.mark.parametrize("scores, labels, expected", [
    ([3.0, 2.0, 1.0], [1, 1, -1], 1.0),
    ([3.0, 2.0, 1.0], [-1, 1, -1], 0.5),
    ([3.0, 2.0, 1.0], [1, -1, 1], 5.0 / 6.0),
    ([1.0, 1.0], [-1, 1], 0.5),
])
def test_known_values(scores, labels, expected):
    assert average_precision(scores, labels).ap == pytest.approx(expected)


def test_precision_recall_curves():
    result = average_precision([3.0, 2.0, 1.0], [1, -1, 1])
    np.testing.assert_allclose(result.precision, [1.0, 0.5, 2.0 / 3.0])
    np.testing.assert_allclose(result.recall, [0.5, 0.5, 1.0])


def test_matches_brute_force(rng):
    for _ in range(1000):
        n = int(rng.integers(2, 13))
        scores = rng.integers(0, 4, size=n).astype(float)
        labels = rng.choice([-1, 1], size=n)
        labels[0] = 1
        expected = brute_force_ap(list(scores), list(labels))
        assert average_precision(scores, labels).ap == pytest.approx(expected, abs=1e-12)


def test_every_ordering_of_a_small_ranking(rng):
    labels = [1, -1, 1, -1]
    for perm in itertools.permutations(range(4)):
        scores = [float(4 - p) for p in perm]
        assert 0.0 < average_precision(scores, labels).ap <= 1.0


def test_invariant_to_monotone_transforms(rng):
    scores = rng.normal(size=30)
    labels = rng.choice([-1, 1], size=30)
    labels[0] = 1
    base = average_precision(scores, labels).ap
    assert average_precision(np.exp(scores), labels).ap == pytest.approx(base)
    assert average_precision(3.0 * scores - 7.0, labels).ap == pytest.approx(base)


def test_input_checks():
    with pytest.raises(ValidationError):
        average_precision([1.0, 2.0], [-1, -1])
    with pytest.raises(ValidationError):
        average_precision([1.0, 2.0], [1, 0])
    with pytest.raises(ValidationError):
        average_precision([1.0], [1, -1])
    with pytest.raises(ValidationError):
        average_precision([np.nan, 1.0], [1, -1])
