import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volnet.errors import ShapeError, SingleClassError
from volnet.metrics import (
    auc,
    confusion,
    evaluate_scores,
    format_table,
    mean_report,
    read_report_csv,
    summary,
    write_report_csv,
)

from oracles import pairwise_auc


def random_instance(rng, n):
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    # coarse grid so ties are common
    scores = rng.integers(0, max(2, n // 4), n) / max(2, n // 4)
    return scores, labels


def test_confusion_examples():
    assert confusion([0.9, 0.1], [1, 0]) == (1, 0, 1, 0)
    assert confusion([0.5, 0.5, 0.5], [1, 0, 1]) == (2, 1, 0, 0)
    with pytest.raises(ShapeError):
        confusion([0.1, 0.2], [1])
    with pytest.raises(ShapeError):
        confusion([], [])


def test_confusion_matches_loop_oracle():
    rng = np.random.default_rng(0)
    scores, labels = rng.uniform(size=20), rng.integers(0, 2, 20)
    tp = fp = tn = fn = 0
    for s, y in zip(scores, labels):
        if s >= 0.5:
            tp, fp = tp + (y == 1), fp + (y == 0)
        else:
            fn, tn = fn + (y == 1), tn + (y == 0)
    assert confusion(scores, labels) == (tp, fp, tn, fn)


def test_summary_formulas():
    assert summary(1, 0, 1, 0) == (1.0, 1.0, 1.0)
    acc, sen, spe = summary(0, 2, 3, 0)
    assert acc == 3 / 5 and sen is None and spe == 3 / 5
    assert summary(2, 0, 0, 0)[2] is None
    assert summary(7, 2, 5, 1) == ((7 + 5) / 15, 7 / 8, 5 / 7)


def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.4] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    with pytest.raises(SingleClassError):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_pairwise_oracle_exactly():
    rng = np.random.default_rng(1)
    sizes = np.linspace(2, 1000, 100).astype(int)
    for n in sizes:
        scores, labels = random_instance(rng, int(n))
        assert auc(scores, labels) == pairwise_auc(scores, labels)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=2, max_size=60, unique=True), st.integers(0, 2**32 - 1))
def test_auc_symmetry_and_monotone_invariance(scores, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, len(scores))
    labels[0], labels[1] = 0, 1
    s = np.array(scores, dtype=np.float64)
    a = auc(s, labels)
    assert a + auc(s, 1 - labels) == pytest.approx(1.0, abs=1e-12)
    # integer-valued cubic, exact in float64, so strictly increasing after rounding too
    assert auc(s**3 + 5 * s - 2, labels) == a


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 50))
def test_confusion_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    s, y = rng.uniform(size=n), rng.integers(0, 2, n)
    perm = rng.permutation(n)
    assert confusion(s, y) == confusion(s[perm], y[perm])
    rep = evaluate_scores(s, y)
    assert rep.total == n and rep.acc == (rep.tp + rep.tn) / n


def test_report_single_class_auc_undefined():
    rep = evaluate_scores([0.2, 0.7], [1, 1])
    assert rep.auc is None and rep.spe is None and rep.sen == 0.5


def test_table_and_csv(tmp_path):
    # formatting fixture: a published row, not a computed result
    fixture = {"ResNet18 sMRI AD vs NC": {"ACC": 0.8603, "SEN": 0.8594, "SPE": 0.8611, "AUC": None}}
    table = format_table(fixture)
    lines = table.splitlines()
    assert lines[0].split() == ["run", "ACC", "SEN", "SPE", "AUC"]
    assert lines[1].split()[-4:] == ["86.03", "85.94", "86.11", "n/a"]
    rows = {"run_a": evaluate_scores([0.9, 0.2, 0.6], [1, 0, 0]).row()}
    rows["mean"] = mean_report([evaluate_scores([0.9, 0.2, 0.6], [1, 0, 0]), evaluate_scores([0.9, 0.2], [1, 0])])
    path = tmp_path / "report.csv"
    write_report_csv(path, rows)
    assert read_report_csv(path) == rows
    assert rows["mean"]["ACC"] == pytest.approx((2 / 3 + 1) / 2)
