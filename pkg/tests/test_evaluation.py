import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stainstyle.data import Dataset, synth_tile
from stainstyle.evaluation import (
    MetricsError,
    comparison_report,
    confusion_metrics,
    evaluate,
    roc_auc,
)
from stainstyle.networks import build_classifier


def pairwise_auc(scores, labels):
    """O(n^2) oracle: fraction of (pos, neg) pairs ranked correctly, ties half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_fixtures():
    assert roc_auc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0]) == 0.75
    assert pairwise_auc([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0]) == 0.75
    assert roc_auc([0.4] * 6, [1, 0, 1, 0, 1, 0]) == 0.5


def test_auc_matches_pairwise_oracle_exactly():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        # coarse grid forces ties
        scores = rng.integers(0, 10, n) / 10.0
        assert roc_auc(scores, labels) == pairwise_auc(scores, labels)


def test_auc_single_class_error():
    with pytest.raises(MetricsError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(MetricsError):
        roc_auc([0.1, 0.2, 0.3], [1, 0])


scores_labels = st.integers(2, 40).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(-60, 60), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda ls: 0 < sum(ls) < len(ls)),
    )
)


@settings(max_examples=200)
@given(scores_labels)
def test_auc_monotone_invariance_and_complement(data):
    scores, labels = np.array(data[0]), np.array(data[1])
    auc = roc_auc(scores, labels)
    assert roc_auc(np.exp(scores / 10.0) * 3 + 1, labels) == pytest.approx(auc, abs=1e-12)
    assert roc_auc(scores, 1 - labels) + auc == pytest.approx(1.0, abs=1e-12)


def test_confusion_fixtures():
    assert tuple(confusion_metrics([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])) == (1.0, 1.0, 1.0)
    cm = confusion_metrics([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0], 0.5)
    assert (cm.tp, cm.fp, cm.fn, cm.tn) == (1, 1, 1, 1)
    assert tuple(cm) == (0.5, 0.5, 0.5)


def test_confusion_all_negative_warns():
    with pytest.warns(RuntimeWarning):
        cm = confusion_metrics([0.1, 0.2, 0.3, 0.4], [1, 0, 1, 0], 0.9)
    assert cm.precision == 0.0
    assert "precision" in cm.zero_division


@given(scores_labels)
def test_confusion_threshold_extremes(data):
    scores = 1 / (1 + np.exp(-np.array(data[0]) / 10))
    labels = np.array(data[1])
    assert confusion_metrics(scores, labels, 0.0).recall == 1.0
    with pytest.warns(RuntimeWarning):
        assert confusion_metrics(scores, labels, 1.01).specificity == 1.0


# --------------------------------------------------------------------------- #
# evaluate / comparison
# --------------------------------------------------------------------------- #

@pytest.fixture(scope="module")
def small_setup():
    from stainstyle.data import default_styles

    style = default_styles()[0]
    ds = Dataset(tuple(synth_tile(style, i % 2, 16, i, "A") for i in range(12)), "test")
    clf = build_classifier(16, 2, 4, seed=0)
    return clf, ds


def test_evaluate_identity_equivalences(small_setup):
    clf, ds = small_setup
    a = evaluate(clf, ds)
    b = evaluate(clf, ds, lambda t: t.copy(), method_name="identity")
    assert a == b
    assert a.n_samples == 12
    for v in (a.auc, a.precision, a.recall, a.specificity):
        assert 0 <= v <= 1


def test_evaluate_single_class_error(small_setup):
    clf, ds = small_setup
    one_class = Dataset(tuple(t for t in ds.tiles if t.label == 1), "test")
    with pytest.raises(MetricsError):
        evaluate(clf, one_class)


def test_evaluate_shape_mismatch(small_setup):
    clf, ds = small_setup
    with pytest.raises(MetricsError):
        evaluate(clf, ds, lambda t: np.zeros((32, 32, 3)))


def test_comparison_single_identity(small_setup):
    clf, ds = small_setup
    table = comparison_report(clf, ds, {"identity": None})
    assert table.rows == [evaluate(clf, ds)]
    assert not table.errors


def test_comparison_error_annotation(small_setup):
    clf, ds = small_setup

    def broken(tile):
        raise RuntimeError("boom")

    table = comparison_report(clf, ds, {"identity": None, "broken": broken, "dark": lambda t: t * 0.5})
    assert [r.method_name for r in table.rows] == sorted(
        ["identity", "dark"], key=lambda m: -table.auc(m)
    )
    assert "boom" in table.errors["broken"]
    text = table.render()
    assert "broken" in text and "error" in text and "tile-level" in text
    assert any(row.get("error") for row in table.to_json())
    aucs = [r.auc for r in table.rows]
    assert aucs == sorted(aucs, reverse=True)
