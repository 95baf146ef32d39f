import numpy as np
import pytest

import oracles
from cliffordm.metrics import (
    THRESHOLD_GRID,
    best_threshold,
    binary_auc,
    evaluate,
    f1_at,
    f1opt,
    macro_auc,
    macro_f1_at,
    per_class_auc,
)

S4 = [0.9, 0.8, 0.3, 0.1]


def test_auc_examples():
    assert binary_auc(S4, [1, 1, 0, 0]) == 1.0
    assert binary_auc(S4, [1, 0, 1, 0]) == 0.75
    assert binary_auc(S4, [1, 1, 1, 1]) is None
    assert binary_auc(S4, [0, 0, 0, 0]) is None
    assert binary_auc([0.5, 0.5], [1, 0]) == 0.5
    with pytest.raises(ValueError):
        binary_auc([], [])


def test_macro_auc_examples():
    labels = np.array([[1, 1], [1, 0], [0, 1], [0, 0]])
    scores = np.array([[0.9, 0.9], [0.8, 0.8], [0.3, 0.3], [0.1, 0.1]])
    assert macro_auc(scores, labels) == pytest.approx((1.0 + 0.75) / 2)
    same = np.column_stack([S4, S4, S4])
    lab = np.column_stack([[1, 0, 1, 0]] * 3)
    assert macro_auc(same, lab) == 0.75
    perfect_and_chance = np.array([[0.9, 0.5], [0.8, 0.5], [0.3, 0.5], [0.1, 0.5]])
    assert macro_auc(perfect_and_chance, np.array([[1, 1], [1, 0], [0, 1], [0, 0]])) == 0.75


def test_macro_auc_skips_degenerate_and_errors_when_all_are():
    scores = np.array([[0.9, 0.2], [0.1, 0.3]])
    assert macro_auc(scores, np.array([[1, 1], [0, 1]])) == 1.0
    with pytest.raises(ValueError):
        macro_auc(scores, np.array([[1, 1], [1, 1]]))


def test_auc_matches_pairwise_oracle_on_random_batches():
    r = np.random.default_rng(0)
    for trial in range(200):
        B = int(r.integers(2, 60))
        # coarse scores force plenty of ties
        scores = np.round(r.random((B, 8)), int(r.integers(1, 3)))
        labels = (r.random((B, 8)) < r.uniform(0.1, 0.9)).astype(int)
        for c, got in enumerate(per_class_auc(scores, labels)):
            ref = oracles.pairwise_auc(scores[:, c], labels[:, c])
            if ref is None:
                assert got is None
            else:
                assert abs(got - ref) <= 1e-12


def test_auc_invariant_under_monotone_transforms():
    r = np.random.default_rng(1)
    for _ in range(50):
        s = r.uniform(0.01, 0.99, 40)
        y = (r.random(40) < 0.4).astype(int)
        base = binary_auc(s, y)
        if base is None:
            continue
        assert binary_auc(np.log(s / (1 - s)), y) == base
        assert binary_auc(3.0 * s + 7.0, y) == base
        assert binary_auc(s**3, y) == base


def test_metrics_permutation_invariant():
    r = np.random.default_rng(2)
    scores, labels = r.random((50, 8)), (r.random((50, 8)) < 0.3).astype(int)
    perm = r.permutation(50)
    a, b = evaluate(scores, labels), evaluate(scores[perm], labels[perm])
    assert a.to_dict() == b.to_dict()


def test_f1_examples():
    assert f1_at([0.9, 0.1], [1, 0], 0.5)[2] == 1.0
    assert f1_at([0.1, 0.2], [1, 0], 0.5) == (0.0, 0.0, 0.0)
    assert f1_at([0.1, 0.2], [0, 0], 0.5) == (0.0, 0.0, 0.0)
    p, rec, f = f1_at([0.2, 0.4, 0.6, 0.8], [0, 0, 1, 1], 0.40)
    assert (p, rec) == (2 / 3, 1.0) and f == pytest.approx(0.8, abs=1e-15)


def test_grid():
    assert len(THRESHOLD_GRID) == 16
    assert THRESHOLD_GRID[0] == 0.10 and THRESHOLD_GRID[-1] == 0.85
    assert [round(t, 2) for t in oracles.GRID] == list(THRESHOLD_GRID)


def test_f1opt_examples():
    assert best_threshold([0.2, 0.4, 0.6, 0.8], [0, 0, 1, 1]) == (0.45, 1.0)
    for B, p in [(10, 3), (7, 7), (5, 1)]:
        labels = [1] * p + [0] * (B - p)
        t, f = best_threshold([0.5] * B, labels)
        assert t == 0.10 and f == pytest.approx(2 * p / (p + B), abs=1e-15)
        assert (t, f) == oracles.f1opt_enumerate([0.5] * B, labels)


def test_f1opt_matches_enumeration_oracle_exactly():
    r = np.random.default_rng(3)
    for _ in range(200):
        B = int(r.integers(1, 40))
        s = np.round(r.random(B), 2)
        y = (r.random(B) < 0.4).astype(int)
        assert best_threshold(s, y) == oracles.f1opt_enumerate(s, y)


def test_f1opt_dominates_fixed_threshold():
    r = np.random.default_rng(4)
    for _ in range(100):
        scores, labels = r.random((30, 8)), (r.random((30, 8)) < 0.3).astype(int)
        per, macro = f1opt(scores, labels)
        for c, (_, f) in enumerate(per):
            assert f >= f1_at(scores[:, c], labels[:, c], 0.5)[2]
        assert macro >= macro_f1_at(scores, labels, 0.5)


def test_report_contents():
    r = np.random.default_rng(5)
    scores, labels = r.random((20, 8)), (r.random((20, 8)) < 0.4).astype(int)
    labels[:, 7] = 0
    rep = evaluate(scores, labels, class_names=list("NDGCAHMO"))
    assert rep.per_class_auc[7] is None and rep.num_degenerate == 1
    assert rep.macro_auc == pytest.approx(np.mean([a for a in rep.per_class_auc if a is not None]))
    assert all(t in THRESHOLD_GRID for t in rep.thresholds)
    assert rep.num_samples == 20 and rep.class_names[0] == "N"
    assert '"macro_auc"' in rep.to_json()


def test_batch_validation():
    with pytest.raises(ValueError):
        evaluate(np.ones((2, 3)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        evaluate(np.array([[np.nan]]), np.array([[1]]))
    with pytest.raises(ValueError):
        evaluate(np.ones((1, 1)), np.array([[2]]))
    with pytest.raises(ValueError):
        evaluate(np.ones((0, 8)), np.ones((0, 8)))
