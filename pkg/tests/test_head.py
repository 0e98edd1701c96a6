"""Classification head, majority voting, and evaluation metrics."""

import json

import numpy as np
import pytest

from emgmoe.errors import DataError, ShapeError
from emgmoe.head import (
    EvalReport,
    classify_patch,
    confusion_and_accuracy,
    init_head_params,
    majority_vote,
    roc_auc,
)
from emgmoe.tensor import Tensor


# ---------------------------------------------------------------------------
# classification head


def test_zero_projection_gives_uniform(rng):
    params = init_head_params(rng, 6, 4)
    params.projection.data[:] = 0.0
    probs = classify_patch(Tensor(rng.standard_normal((3, 6))), params).data
    assert np.allclose(probs, 0.25, atol=1e-12)


def test_probs_normalized(rng):
    params = init_head_params(rng, 6, 4)
    probs = classify_patch(Tensor(rng.standard_normal((5, 6))), params).data
    assert np.all(np.abs(probs.sum(axis=1) - 1.0) < 1e-12)
    assert np.all(probs > 0.0)


def test_argmax_invariant_to_logit_scale(rng):
    params = init_head_params(rng, 6, 4)
    z = Tensor(rng.standard_normal((8, 6)))
    base = classify_patch(z, params).data.argmax(axis=1)
    params.projection.data *= 7.3
    params.bias.data *= 7.3
    scaled = classify_patch(z, params).data.argmax(axis=1)
    assert np.array_equal(base, scaled)


def test_single_patch_squeeze(rng):
    params = init_head_params(rng, 6, 4)
    probs = classify_patch(Tensor(rng.standard_normal(6)), params)
    assert probs.shape == (4,)


# ---------------------------------------------------------------------------
# majority voting


def onehotish(votes, classes=3, strength=0.9):
    probs = np.full((len(votes), classes), (1.0 - strength) / (classes - 1))
    for i, v in enumerate(votes):
        probs[i, v] = strength
    return probs


def test_modal_vote_wins():
    probs = onehotish([1, 1, 2])
    assert majority_vote(probs, np.zeros(3, dtype=int)) == {0: 1}


def test_tie_breaks_on_summed_probability():
    probs = np.array([[0.1, 0.6, 0.3], [0.1, 0.2, 0.7]])
    # one vote each for classes 1 and 2; summed probs favor 2
    assert majority_vote(probs, np.zeros(2, dtype=int)) == {0: 2}


def test_tie_breaks_on_lowest_index_last():
    probs = np.array([[0.1, 0.5, 0.4], [0.1, 0.4, 0.5]])
    # exact tie in votes and in summed probability -> lowest class index
    assert majority_vote(probs, np.zeros(2, dtype=int)) == {0: 1}


def test_vote_groups_by_source():
    probs = onehotish([0, 0, 2, 2, 2, 1])
    sids = np.array([7, 7, 7, 9, 9, 9])
    assert majority_vote(probs, sids) == {7: 0, 9: 2}


def test_vote_requires_matching_lengths():
    with pytest.raises(ShapeError):
        majority_vote(onehotish([0, 1]), np.zeros(3, dtype=int))


# ---------------------------------------------------------------------------
# confusion and accuracy


def test_perfect_predictions():
    labels = np.repeat(np.arange(4), 3)
    confusion, total, balanced = confusion_and_accuracy(labels, labels, 4)
    assert np.array_equal(confusion, np.eye(4, dtype=int) * 3)
    assert total == 1.0 and balanced == 1.0


def test_chance_level_all_one_class():
    labels = np.repeat(np.arange(8), 5)
    preds = np.zeros_like(labels)
    _, total, balanced = confusion_and_accuracy(preds, labels, 8)
    assert abs(total - 0.125) < 1e-12
    assert abs(balanced - 0.125) < 1e-12


def test_hand_counted_example():
    labels = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2, 2])
    preds = np.array([0, 0, 1, 1, 0, 2, 2, 2, 0, 1])
    confusion, total, balanced = confusion_and_accuracy(preds, labels, 3)
    assert confusion[0].tolist() == [2, 1, 0]
    assert confusion[1].tolist() == [1, 1, 0]
    assert confusion[2].tolist() == [1, 1, 3]
    assert abs(total - 0.6) < 1e-12
    assert abs(balanced - (2 / 3 + 1 / 2 + 3 / 5) / 3) < 1e-12


def test_label_validation():
    with pytest.raises(DataError):
        confusion_and_accuracy([0, 1], [0, 5], 3)
    with pytest.raises(DataError):
        confusion_and_accuracy([0, 9], [0, 1], 3)
    with pytest.raises(ShapeError):
        confusion_and_accuracy([0, 1, 2], [0, 1], 3)


# ---------------------------------------------------------------------------
# ROC / AUC


def scores_for(s):
    """One-column score matrix for binary one-vs-rest checks on class 1."""
    out = np.zeros((len(s), 2))
    out[:, 1] = s
    return out


def test_auc_perfect_separation():
    labels = np.array([0, 0, 0, 1, 1])
    auc, points = roc_auc(scores_for([0.1, 0.2, 0.3, 0.8, 0.9]), labels, 1)
    assert auc == 1.0
    assert points[0] == (0.0, 0.0) and points[-1] == (1.0, 1.0)


def test_auc_all_tied_scores():
    labels = np.array([0, 1, 0, 1])
    auc, _ = roc_auc(scores_for([0.5, 0.5, 0.5, 0.5]), labels, 1)
    assert abs(auc - 0.5) < 1e-12


def test_auc_absent_class():
    labels = np.zeros(4, dtype=int)
    auc, points = roc_auc(scores_for([0.1, 0.2, 0.3, 0.4]), labels, 1)
    assert auc is None and points == []


def test_auc_random_scores_near_half():
    vals = []
    for seed in range(10):
        r = np.random.default_rng(seed)
        labels = (r.random(1000) < 0.5).astype(int)
        auc, _ = roc_auc(scores_for(r.random(1000)), labels, 1)
        vals.append(auc)
    assert abs(np.mean(vals) - 0.5) < 0.05


def test_auc_matches_sklearn(rng):
    sklearn_metrics = pytest.importorskip("sklearn.metrics")
    labels = (rng.random(200) < 0.4).astype(int)
    s = rng.random(200)
    s[::7] = 0.5  # inject ties to exercise the correction
    auc, _ = roc_auc(scores_for(s), labels, 1)
    want = sklearn_metrics.roc_auc_score(labels, s)
    assert abs(auc - want) < 1e-12


def test_auc_monotone_transform_invariance(rng):
    labels = (rng.random(100) < 0.5).astype(int)
    s = rng.random(100)
    a1, _ = roc_auc(scores_for(s), labels, 1)
    a2, _ = roc_auc(scores_for(np.exp(3.0 * s)), labels, 1)
    assert abs(a1 - a2) < 1e-12


# ---------------------------------------------------------------------------
# report serialization


def make_report():
    return EvalReport(
        confusion=np.array([[2, 0], [1, 3]]),
        per_class_auc=[0.9, None],
        total_accuracy=5 / 6,
        balanced_accuracy=0.875,
        patch_accuracy=0.8,
        patch_balanced_accuracy=0.79,
        param_count=1234,
        flop_count=5678,
        roc_points={0: [(0.0, 0.0), (0.5, 1.0), (1.0, 1.0)]},
    )


def test_report_json_round_trip():
    payload = json.loads(make_report().to_json())
    assert payload["confusion"] == [[2, 0], [1, 3]]
    assert payload["per_class_auc"] == [0.9, None]
    assert payload["param_count"] == 1234


def test_report_csv_emission(tmp_path):
    report = make_report()
    cpath, rpath = tmp_path / "confusion.csv", tmp_path / "roc.csv"
    report.write_csv(cpath, rpath)
    lines = cpath.read_text().strip().splitlines()
    assert lines[1].startswith("0,2,0")
    roc_lines = rpath.read_text().strip().splitlines()
    assert roc_lines[0] == "class,fpr,tpr"
    assert len(roc_lines) == 4
