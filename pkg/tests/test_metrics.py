from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avmtl.errors import ContractError
from avmtl.metrics import (
    MetricReport, au_report, binary_f1_per_class, composite_score, exact_match_accuracy_au,
    expr_f1_and_accuracy, expr_report, threshold_au, total_accuracy_au,
)

from oracles import confusion_f1, confusion_multiclass


def test_threshold_boundary():
    assert threshold_au(np.array([[0.5, 0.4999]])).tolist() == [[1, 0]]
    assert threshold_au(np.full((1, 12), 0.7)).tolist() == [[1] * 12]
    assert threshold_au(np.array([[0.6]]), threshold=0.65).tolist() == [[0]]


def test_binary_f1_examples():
    labels = np.random.default_rng(0).integers(0, 2, (20, 12))
    assert binary_f1_per_class(labels, labels).tolist() == [1.0] * 12
    f1 = binary_f1_per_class(np.array([[1], [0], [1]]), np.array([[1], [1], [0]]))
    assert f1.tolist() == [0.5]
    zeros = np.zeros((4, 2), int)
    assert binary_f1_per_class(zeros, zeros).tolist() == [1.0, 1.0]
    assert binary_f1_per_class(zeros, zeros, empty_score=0.0).tolist() == [0.0, 0.0]
    # no true positive but some errors scores 0
    assert binary_f1_per_class(np.array([[1], [0]]), np.array([[0], [1]])).tolist() == [0.0]
    with pytest.raises(ContractError):
        binary_f1_per_class(np.zeros((2, 12)), np.zeros((3, 12)))


def test_total_accuracy_examples():
    y = np.random.default_rng(1).integers(0, 2, (2, 12))
    assert total_accuracy_au(y, y) == 1.0
    assert total_accuracy_au(1 - y, y) == 0.0
    wrong = y.copy()
    wrong[0, 0] ^= 1
    wrong[1, 3] ^= 1
    wrong[1, 11] ^= 1
    assert total_accuracy_au(wrong, y) == 0.875
    assert exact_match_accuracy_au(wrong, y) == 0.0
    with pytest.raises(ContractError):
        total_accuracy_au(y[:1], y)


def test_expression_examples():
    f1, acc = expr_f1_and_accuracy(np.arange(7), np.arange(7))
    assert f1.mean() == 1.0 and acc == 1.0
    _, acc = expr_f1_and_accuracy([0, 0], [0, 1])
    assert acc == 0.5
    f1, _ = expr_f1_and_accuracy([0, 1, 1], [0, 1, 0])
    assert f1[2:].tolist() == [1.0] * 5
    f1, _ = expr_f1_and_accuracy([0, 1, 1], [0, 1, 0], empty_score=0.0)
    assert f1[2:].tolist() == [0.0] * 5
    with pytest.raises(ContractError):
        expr_f1_and_accuracy([7], [0])


@pytest.mark.parametrize("task, f1, acc, expected", [
    ("au", 0.545, 0.879, 0.712),
    ("expression", 0.402, 0.630, 0.477),
    ("au", 0.40, 0.22, 0.31),
    ("expression", 0.30, 0.50, 0.366),
])
def test_composite_reproduces_reported_tables(task, f1, acc, expected):
    assert abs(composite_score(task, f1, acc) - expected) <= 5e-3


def test_composite_exact_arithmetic():
    assert composite_score("au", 0.0, 0.0) == 0.0
    assert composite_score("expression", 0.402, 0.630) == pytest.approx(0.47724, abs=1e-12)
    assert composite_score("expression", 0.30, 0.50) == pytest.approx(0.366, abs=1e-12)
    with pytest.raises(ContractError):
        composite_score("va", 0.5, 0.5)


@settings(max_examples=200, deadline=None)
@given(task=st.sampled_from(["au", "expression"]), f=st.floats(0, 1), a=st.floats(0, 1),
       df=st.floats(0, 1), da=st.floats(0, 1))
def test_composite_monotone(task, f, a, df, da):
    assert composite_score(task, min(f + df, 1), min(a + da, 1)) >= composite_score(task, f, a)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 1000), empty=st.sampled_from([0.0, 1.0]))
def test_binary_f1_matches_confusion_oracle(seed, n, empty):
    rng = np.random.default_rng(seed)
    rate = rng.uniform(0, 1, 12)  # includes near-empty columns
    labels = (rng.random((n, 12)) < rate * rng.uniform(0, 1)).astype(int)
    preds = (rng.random((n, 12)) < rate).astype(int)
    ours = binary_f1_per_class(preds, labels, empty)
    assert np.max(np.abs(ours - confusion_f1(preds, labels, empty))) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 1000))
def test_expression_metrics_match_confusion_oracle(seed, n):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 8))  # restricting classes exercises the degenerate rule
    labels = rng.integers(0, k, n)
    preds = rng.integers(0, k, n)
    f1, acc = expr_f1_and_accuracy(preds, labels)
    ref_f1, ref_acc = confusion_multiclass(preds, labels, 7)
    assert np.max(np.abs(f1 - ref_f1)) <= 1e-12
    assert abs(acc - ref_acc) <= 1e-12


def test_report_fields_consistent_and_serialisable():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 2, (50, 12))
    p = rng.integers(0, 2, (50, 12))
    rep = au_report(p, y)
    assert rep.macro_f1 == pytest.approx(np.mean(rep.per_class_f1), abs=1e-15)
    assert rep.composite == composite_score("au", rep.macro_f1, rep.total_accuracy)
    assert rep.counts["frames"] == 50
    assert MetricReport.from_json(rep.to_json()) == rep
    ex = expr_report(rng.integers(0, 7, 30), rng.integers(0, 7, 30), videos=2)
    assert ex.counts == {"frames": 30, "videos": 2}
    assert len(ex.per_class_f1) == 7
    row = ex.csv_row().strip().split(",")
    assert len(row) == len(ex.csv_header()) and row[0] == "expression"
    assert float(row[3]) == pytest.approx(ex.composite, abs=1e-6)
