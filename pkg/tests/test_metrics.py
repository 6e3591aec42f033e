import numpy as np
import pytest

from ecgcl.metrics import MetricsLog, binary_auc, distance_split, macro_auc, per_class_auc


def brute_force_auc(scores, positives):
    pos, neg = scores[positives], scores[~positives]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_rank_auc_matches_pairwise_count():
    rng = np.random.default_rng(0)
    done = 0
    while done < 200:
        n = int(rng.integers(2, 51))
        y = rng.random(n) < 0.5
        if y.all() or not y.any():
            continue
        # coarse scores so ties actually occur
        s = np.round(rng.standard_normal(n), 1)
        assert abs(binary_auc(s, y) - brute_force_auc(s, y)) < 1e-12
        done += 1


def test_perfect_and_shuffled_rankings():
    y = np.array([0, 0, 1, 1, 1])
    assert binary_auc([0.1, 0.2, 0.3, 0.4, 0.9], y.astype(bool)) == 1.0
    rng = np.random.default_rng(1)
    s, labels = rng.random(10_000), rng.random(10_000) < 0.5
    assert abs(binary_auc(s, labels) - 0.5) < 0.05


def test_macro_auc_multiclass_and_multilabel():
    scores = np.eye(3)[[0, 1, 2, 0]] + 0.01
    assert macro_auc(scores, [0, 1, 2, 0]) == 1.0
    multi = np.array([[1, 0], [1, 1], [0, 1], [0, 0]], bool)
    s = np.array([[0.9, 0.1], [0.8, 0.7], [0.2, 0.9], [0.1, 0.2]])
    assert macro_auc(s, multi) == 1.0


def test_per_class_auc_skips_single_class_columns():
    aucs, skipped = per_class_auc(np.random.default_rng(2).random((4, 3)), [0, 0, 1, 1])
    assert set(aucs) == {0, 1} and skipped == 1
    with pytest.raises(ValueError):
        macro_auc(np.ones((3, 2)), np.ones((3, 2), bool))


def test_distance_split_counts_and_means():
    reps = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0]])
    intra, inter, summary = distance_split(reps, ["a", "a", "b"], bins=5)
    np.testing.assert_allclose(intra, [1.0])
    assert summary["intra_count"] == 1 and summary["inter_count"] == 2
    assert summary["inter_mean"] == pytest.approx((10 + np.sqrt(101)) / 2)
    assert sum(summary["hist_intra"]) + sum(summary["hist_inter"]) == 3


def test_metrics_log_csv_and_order():
    m = MetricsLog()
    m.log(1, "train", "loss", 0.5)
    m.log(2, "train", "loss", 0.25)
    assert m.series("train", "loss") == [0.5, 0.25]
    assert m.to_csv().splitlines()[0] == "epoch,split,metric,value"
    with pytest.raises(ValueError):
        m.log(1, "val", "auc", 0.7)
    m.summary["x"] = np.float64(1.5)
    assert '"x": 1.5' in m.summary_json()
