import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mann_whitney, youden_scan
from xraykit.metrics import (
    DegenerateLabels,
    EmptyInput,
    LabelMetrics,
    MetricsReport,
    auc,
    build_report,
    confusion,
    load_thresholds,
    prf1,
    roc_auc,
    roc_curve,
    save_thresholds,
    youden_threshold,
)


def test_roc_perfect_separation():
    c = roc_curve([0.9, 0.1], [1, 0])
    assert [(t, f) for _, t, f in c.points] == [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]


def test_roc_inverted():
    c = roc_curve([0.1, 0.9], [1, 0])
    assert (0.0, 1.0) in [(t, f) for _, t, f in c.points]


def test_roc_ties_collapse():
    c = roc_curve([0.4] * 4, [1, 0, 1, 0])
    assert [(t, f) for _, t, f in c.points] == [(0.0, 0.0), (1.0, 1.0)]


def test_roc_invariants():
    rng = np.random.default_rng(0)
    s = rng.integers(0, 6, 40) / 5
    y = rng.integers(0, 2, 40)
    c = roc_curve(s, y)
    assert np.all(np.diff(c.tpr) >= 0) and np.all(np.diff(c.fpr) >= 0)
    assert (c.tpr[0], c.fpr[0]) == (0, 0) and (c.tpr[-1], c.fpr[-1]) == (1, 1)
    assert np.all(np.diff(c.thresholds) < 0)


def test_roc_degenerate():
    with pytest.raises(DegenerateLabels):
        roc_curve([0.2, 0.3], [1, 1])


def test_auc_examples():
    assert roc_auc([0.9, 0.1], [1, 0]) == 1.0
    assert roc_auc([0.5] * 6, [1, 0, 1, 0, 1, 1]) == 0.5
    assert roc_auc([0.8, 0.6, 0.4, 0.2], [1, 0, 1, 0]) == 0.75


instances = st.integers(2, 50).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 8).map(lambda k: k / 8), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n),
    )
).filter(lambda t: 0 < sum(t[1]) < len(t[1]))


@settings(max_examples=100, deadline=None)
@given(instances)
def test_auc_equals_mann_whitney(inst):
    s, y = inst
    assert abs(roc_auc(s, y) - mann_whitney(s, y)) <= 1e-9


def test_youden_examples():
    assert youden_threshold(roc_curve([0.9, 0.1], [1, 0])) == (0.9, 1.0)
    assert youden_threshold(roc_curve([0.3] * 3, [1, 0, 1])) == (0.3, 0.0)
    t, j = youden_threshold(roc_curve([0.9, 0.8, 0.4, 0.3], [1, 1, 0, 1]))
    assert t == 0.8 and j == pytest.approx(2 / 3, abs=1e-15)


def test_youden_tie_prefers_low_fpr_then_high_threshold():
    # thresholds 0.9 (TPR .5, FPR 0) and 0.5 (TPR 1, FPR .5) both give J = 0.5
    t, j = youden_threshold(roc_curve([0.9, 0.5, 0.5, 0.1], [1, 1, 0, 0]))
    assert (t, j) == (0.9, 0.5)


@settings(max_examples=100, deadline=None)
@given(instances)
def test_youden_matches_scan(inst):
    s, y = inst
    t, j = youden_threshold(roc_curve(s, y))
    best = youden_scan(s, y)
    assert j == float(best)
    tp, fp, tn, fn = confusion(s, y, t)
    assert Fraction(tp, tp + fn) - Fraction(fp, fp + tn) == best


@settings(max_examples=60, deadline=None)
@given(instances)
def test_monotone_transform_invariance(inst):
    s, y = inst
    s = np.asarray(s)
    f = lambda v: v**3 / 2 + 0.25  # noqa: E731  strictly increasing on [0, 1]
    a = roc_curve(s, y)
    b = roc_curve(f(s), y)
    assert auc(a) == auc(b)
    ta, ja = youden_threshold(a)
    tb, jb = youden_threshold(b)
    assert ja == jb
    assert tb == f(ta)


def test_confusion_examples():
    s, y = [0.3, 0.7, 0.2, 0.9], [0, 1, 1, 0]
    tp, fp, tn, fn = confusion(s, y, 0.0)
    assert tn == fn == 0
    tp, fp, tn, fn = confusion(s, y, 0.95)
    assert tp == fp == 0
    assert confusion([0.9, 0.2], [1, 0], 0.5) == (1, 0, 1, 0)


@settings(max_examples=60)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=30), st.floats(0, 1))
def test_confusion_partition(pairs, t):
    s, y = zip(*pairs)
    assert sum(confusion(s, y, t)) == len(pairs)


def test_prf1_zero_conventions():
    assert prf1(0, 0, 5, 3) == (0.0, 0.0, 0.0)
    assert prf1(0, 2, 5, 0) == (0.0, 0.0, 0.0)


def test_prf1_table5_first_row():
    p, r, f = prf1(795, 0, 10, 205)
    assert (p, r) == (1.0, 0.795) and f == pytest.approx(0.886, abs=5e-4)


@settings(max_examples=100)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_bounds(tp, fp, tn, fn):
    p, r, f = prf1(tp, fp, tn, fn)
    assert 0 <= f <= 1
    assert min(p, r) - 1e-12 <= f <= max(p, r) + 1e-12
    assert f <= min(2 * p, 2 * r) + 1e-12
    assert min(p, r) <= (p + r) / 2


def test_report_perfect_label_auto_threshold():
    rep = build_report([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0], ["A"])
    r = rep.rows[0]
    assert (r.precision, r.recall, r.f1, r.auc) == (1.0, 1.0, 1.0, 1.0)


def test_report_means_from_table5_rows():
    rows = [
        LabelMetrics(n, 0.7, 0.5, 0, 0, 0, 0, p, r, f)
        for n, (p, r, f) in zip("ABCDE", [(1.0, 0.795, 0.886), (0.999, 0.502, 0.668), (1.0, 0.676, 0.807),
                                          (1.0, 0.352, 0.521), (1.0, 0.441, 0.612)])
    ]
    rep = MetricsReport(rows)
    assert rep.mean_recall == pytest.approx(0.553, abs=5e-4)
    assert rep.mean_f1 == pytest.approx(0.6988, abs=1e-12)
    assert "0.699" in rep.render().splitlines()[-1]


def test_report_single_class_label_excluded_from_mean_auc():
    S = np.array([[0.9, 0.9], [0.1, 0.2], [0.8, 0.4]])
    Y = np.array([[1, 1], [0, 1], [1, 1]])
    with pytest.warns(UserWarning, match="only one class"):
        rep = build_report(S, Y, ["A", "B"], thresholds=0.5)
    assert rep.rows[1].auc is None
    assert rep.mean_auc == rep.rows[0].auc


def test_report_mask_drops_entries():
    S = np.array([[0.9], [0.1], [0.95]])
    Y = np.array([[1], [0], [0]])
    rep = build_report(S, Y, ["A"], thresholds=0.5, mask=np.array([[1], [1], [0]]))
    assert rep.rows[0].fp == 0 and rep.rows[0].auc == 1.0


def test_report_empty():
    with pytest.raises(EmptyInput):
        build_report(np.empty((0, 1)), np.empty((0, 1)), ["A"])


def test_report_json_and_render_layout():
    rep = build_report([0.9, 0.8, 0.2, 0.1], [1, 0, 1, 0], ["A"], thresholds={"A": 0.5})
    js = json.loads(json.dumps(rep.to_json()))
    assert js["labels"][0]["threshold"] == 0.5
    lines = rep.render().splitlines()
    assert lines[0].split()[0] == "Label" and lines[-1].startswith("Mean value")


def test_threshold_file_round_trip(tmp_path):
    th = {"Atelectasis": 0.31, "Edema": 0.5}
    save_thresholds(th, tmp_path / "t.json")
    assert load_thresholds(tmp_path / "t.json") == th
