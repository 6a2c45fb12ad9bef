from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milaed.errors import AllZeroScores, AllZeroWeights, EmptyResults, NoReferenceLabel, ShapeMismatch
from milaed.evalfuse import (
    TagResult,
    confusion_csv,
    confusion_matrix,
    fuse,
    metrics_report,
    micro_prf,
    threshold_decisions,
    validation_weights,
)


def brute_force_vote(decisions, weights):
    """Cell-by-cell weighted vote in exact fractions, coded without numpy reductions.

    Votes within a 2**-40 relative band of half the total are ties.
    """
    ws = [Fraction(float(w)) for w in weights]
    total = sum(ws) * (1 - Fraction(1, 2**40))
    n_clips, n_classes = len(decisions[0]), len(decisions[0][0])
    out = [[0] * n_classes for _ in range(n_clips)]
    for c in range(n_clips):
        for n in range(n_classes):
            mass = Fraction(0)
            for m, d in enumerate(decisions):
                if d[c][n]:
                    mass += ws[m]
            out[c][n] = 1 if mass >= total / 2 else 0
    return out


def random_ensemble(rng):
    n_models = int(rng.integers(1, 6))
    shape = (int(rng.integers(1, 21)), int(rng.integers(1, 18)))
    decisions = [rng.integers(0, 2, shape) for _ in range(n_models)]
    weights = rng.random(n_models)
    if rng.random() < 0.3:
        # exact ties: small dyadic weights
        weights = rng.integers(0, 4, n_models) / 4.0
        if not weights.any():
            weights[0] = 0.25
    return decisions, weights


def test_fuse_example():
    d = [np.array([[1]]), np.array([[0]]), np.array([[1]])]
    assert fuse(d, [0.5, 0.3, 0.2])[0, 0] == 1
    assert fuse(d, [0.25, 0.5, 0.25])[0, 0] == 1  # exactly half -> positive
    assert fuse(d, [0.2, 0.61, 0.19])[0, 0] == 0
    assert fuse(d, [0.2, 0.6, 0.2])[0, 0] == 0
    # decimal tie that float addition does not reproduce exactly
    assert fuse(d[:1] + [np.array([[0]]), np.array([[0]])], [0.3, 0.1, 0.2])[0, 0] == 1


def test_fuse_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        decisions, weights = random_ensemble(rng)
        expected = brute_force_vote([d.tolist() for d in decisions], weights)
        np.testing.assert_array_equal(fuse(decisions, weights), expected)


def test_fuse_unanimity_and_single_member():
    rng = np.random.default_rng(1)
    d = rng.integers(0, 2, (7, 5))
    np.testing.assert_array_equal(fuse([d, d, d], [0.1, 0.7, 0.2]), d)
    np.testing.assert_array_equal(fuse([d], [1e-9]), d)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.floats(1e-6, 1e6))
def test_fuse_scale_invariance(seed, c):
    decisions, weights = random_ensemble(np.random.default_rng(seed))
    np.testing.assert_array_equal(fuse(decisions, weights), fuse(decisions, np.asarray(weights) * c))


def test_fuse_errors():
    d = np.zeros((2, 3))
    with pytest.raises(AllZeroWeights):
        fuse([d, d], [0.0, 0.0])
    with pytest.raises(AllZeroWeights):
        fuse([d, d], [-1.0, 2.0])
    with pytest.raises(ShapeMismatch):
        fuse([d, np.zeros((2, 4))], [1, 1])
    with pytest.raises(ShapeMismatch):
        fuse([d, d], [1])


def test_validation_weights():
    np.testing.assert_array_equal(validation_weights([0.3, 0.3]), [0.5, 0.5])
    np.testing.assert_allclose(validation_weights([0.6, 0.2, 0.2]), [0.6, 0.2, 0.2], rtol=1e-15)
    np.testing.assert_allclose(validation_weights([1.2, 0.4]), validation_weights([0.3, 0.1]), rtol=1e-15)
    with pytest.raises(AllZeroScores):
        validation_weights([0, 0])


def _r(pred, ref, scores=None, cid="c"):
    return TagResult(cid, np.array(pred), np.array(ref), None if scores is None else np.array(scores))


def test_micro_prf_examples():
    m = micro_prf([_r([1, 1], [1, 0])])
    assert (m["precision"], m["recall"]) == (0.5, 1.0)
    assert m["f1"] == pytest.approx(2 / 3)
    assert micro_prf([_r([1, 0], [1, 0]), _r([0, 1], [0, 1])])["f1"] == 1.0
    none = micro_prf([_r([0, 0], [1, 0])])
    assert none == {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    with pytest.raises(EmptyResults):
        micro_prf([])
    with pytest.raises(ShapeMismatch):
        _r([1], [1, 0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_micro_prf_symmetry_and_bounds(seed):
    rng = np.random.default_rng(seed)
    p, r = rng.integers(0, 2, (6, 4)), rng.integers(0, 2, (6, 4))
    a = micro_prf([_r(x, y) for x, y in zip(p, r)])
    b = micro_prf([_r(y, x) for x, y in zip(p, r)])
    assert a["precision"] == b["recall"] and a["recall"] == b["precision"]
    assert a["f1"] == pytest.approx(b["f1"], abs=1e-15)
    assert all(0 <= v <= 1 for v in a.values())


def test_threshold_is_inclusive():
    np.testing.assert_array_equal(threshold_decisions([0.5, 0.4999, 0.7], 0.5), [1, 0, 1])


def test_report_per_class():
    rep = metrics_report([_r([1, 0], [1, 0]), _r([1, 1], [0, 1])], ["a", "b"])
    assert rep["per_class"]["a"] == {"precision": 0.5, "recall": 1.0, "f1": pytest.approx(2 / 3), "support": 1}
    assert rep["per_class"]["b"]["f1"] == 1.0
    assert rep["n_clips"] == 2
    assert list(rep["per_class"]) == ["a", "b"]


def test_confusion_matrix():
    rs = [_r([1, 0, 0], [1, 0, 0], [0.9, 0.1, 0.2]), _r([0, 1, 0], [0, 1, 0], [0.1, 0.8, 0.2]),
          _r([0, 0, 1], [0, 1, 1], [0.1, 0.3, 0.9])]
    cm = confusion_matrix(rs)
    np.testing.assert_array_equal(cm, [[1, 0, 0], [0, 1, 1], [0, 0, 0]])
    assert cm.sum() == 3
    all_last = [_r([0, 0, 1], ref, [0, 0, 1]) for ref in ([1, 0, 0], [0, 1, 0], [0, 0, 1])]
    cm = confusion_matrix(all_last)
    assert np.count_nonzero(cm[:, :2]) == 0 and cm[:, 2].sum() == 3
    with pytest.raises(NoReferenceLabel):
        confusion_matrix([_r([1, 0], [0, 0], [1, 0])])


def test_confusion_csv():
    text = confusion_csv(np.array([[2, 0], [1, 3]]), ["Car alarm", "Car"])
    assert text.splitlines() == ["reference\\predicted,Car alarm,Car", "Car alarm,2,0", "Car,1,3"]
