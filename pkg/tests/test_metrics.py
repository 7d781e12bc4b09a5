import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twinpp.metrics import confusion, evaluate, f1_plus, macro_prf, mae, mae_plus


def brute_prf(preds, truth, K):
    """Per-class scores from raw pair counting, no matrix involved."""
    out = []
    for k in range(K):
        tp = sum(1 for p, t in zip(preds, truth) if p == k and t == k)
        pp = sum(1 for p in preds if p == k)
        ap = sum(1 for t in truth if t == k)
        prec = tp / pp if pp else 0.0
        rec = tp / ap if ap else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out.append((prec, rec, f1))
    return out


labels = st.integers(1, 6).flatmap(
    lambda K: st.tuples(st.just(K), st.lists(st.tuples(st.integers(0, K - 1),
                                                       st.integers(0, K - 1)), max_size=60)))


def test_confusion_hand_count():
    np.testing.assert_array_equal(confusion([0, 1, 1], [0, 0, 1], 2).counts, [[1, 1], [0, 1]])


def test_confusion_perfect_and_empty():
    np.testing.assert_array_equal(confusion([0, 1, 2, 2], [0, 1, 2, 2], 3).counts,
                                  np.diag([1, 1, 2]))
    np.testing.assert_array_equal(confusion([], [], 3).counts, np.zeros((3, 3)))


def test_confusion_rejects_mismatch():
    with pytest.raises(ValueError, match="length"):
        confusion([0, 1], [0], 2)
    with pytest.raises(ValueError):
        confusion([2], [0], 2)


def test_prf_hand_computation():
    r = macro_prf(np.array([[1, 1], [0, 1]]))
    np.testing.assert_allclose(r.precision, [1.0, 0.5])
    np.testing.assert_allclose(r.recall, [0.5, 1.0])
    np.testing.assert_allclose(r.f1, [2 / 3, 2 / 3])
    assert r.macro_f1 == pytest.approx(2 / 3, abs=1e-15)


def test_prf_diagonal_and_empty_class():
    r = macro_prf(np.diag([3, 4]))
    assert r.macro_precision == r.macro_recall == r.macro_f1 == 1.0
    r = macro_prf(np.array([[2, 0, 0], [0, 2, 0], [0, 0, 0]]))
    assert (r.precision[2], r.recall[2], r.f1[2]) == (0.0, 0.0, 0.0)
    assert r.macro_f1 == pytest.approx(2 / 3)


@given(labels)
def test_prf_matches_pair_counting(case):
    K, pairs = case
    preds = [p for p, _ in pairs]
    truth = [t for _, t in pairs]
    cm = confusion(preds, truth, K)
    assert cm.total == len(pairs)
    r = macro_prf(cm)
    for k, (p, rc, f) in enumerate(brute_prf(preds, truth, K)):
        assert r.precision[k] == pytest.approx(p, abs=1e-12)
        assert r.recall[k] == pytest.approx(rc, abs=1e-12)
        assert r.f1[k] == pytest.approx(f, abs=1e-12)
    assert 0.0 <= r.macro_f1 <= 1.0


def test_mae_examples():
    assert mae([1, 3], [2, 5]) == 1.5
    assert mae([4.0, 2.5], [4.0, 2.5]) == 0.0
    with pytest.raises(ValueError):
        mae([], [])


@given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100)), min_size=1, max_size=30),
       st.randoms(use_true_random=False))
def test_mae_paired_permutation(pairs, rnd):
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    a = mae([p for p, _ in pairs], [t for _, t in pairs])
    b = mae([p for p, _ in shuffled], [t for _, t in shuffled])
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_f1_plus_empty_subset_is_undefined():
    r = f1_plus([0, 1], [0, 1], [0.0, 10.0], [3.0, 5.0], 2)
    assert r.value is None and r.count == 0 and not r.defined


def test_f1_plus_perfect():
    r = f1_plus([0, 1, 1], [0, 1, 1], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 2)
    assert r.value == 1.0 and r.count == 3


def test_f1_plus_threshold_is_strict():
    r = f1_plus([0, 1], [0, 1], [3.0, 0.0], [0.0, 2.999], 2)
    assert r.count == 1


@given(labels, st.integers(0, 10_000))
def test_f1_plus_matches_manual_filter(case, seed):
    K, pairs = case
    rng = np.random.default_rng(seed)
    n = len(pairs)
    pg, tg = rng.uniform(0, 8, n), rng.uniform(0, 8, n)
    preds = [p for p, _ in pairs]
    truth = [t for _, t in pairs]
    r = f1_plus(preds, truth, pg, tg, K)
    kept = [i for i in range(n) if abs(pg[i] - tg[i]) < 3.0]
    assert r.count == len(kept)
    if not kept:
        assert r.value is None
        return
    expected = np.mean([f for _, _, f in brute_prf([preds[i] for i in kept],
                                                   [truth[i] for i in kept], K)])
    assert r.value == pytest.approx(expected, abs=1e-12)


@given(labels, st.integers(0, 10_000))
def test_infinite_threshold_is_plain_macro_f1(case, seed):
    K, pairs = case
    if not pairs:
        return
    rng = np.random.default_rng(seed)
    preds = [p for p, _ in pairs]
    truth = [t for _, t in pairs]
    gaps = rng.uniform(0, 1e6, (2, len(pairs)))
    r = f1_plus(preds, truth, gaps[0], gaps[1], K, threshold=math.inf)
    assert r.value == macro_prf(confusion(preds, truth, K)).macro_f1


def test_mae_plus_examples():
    r = mae_plus([1, 0], [0, 1], [1.0, 2.0], [3.0, 4.0])
    assert r.value is None and r.count == 0
    r = mae_plus([0, 1], [0, 1], [1.0, 2.0], [3.0, 7.0])
    assert r.value == mae([1.0, 2.0], [3.0, 7.0]) and r.count == 2
    # half right: samples 0 and 2, errors 1 and 4
    r = mae_plus([0, 1, 1, 0], [0, 0, 1, 1], [2.0, 9.0, 5.0, 0.0], [1.0, 0.0, 1.0, 0.0])
    assert r.value == 2.5 and r.count == 2


@given(labels, st.integers(0, 10_000))
def test_mae_plus_bounded_by_worst_error(case, seed):
    _, pairs = case
    rng = np.random.default_rng(seed)
    n = len(pairs)
    pg, tg = rng.uniform(0, 8, n), rng.uniform(0, 8, n)
    r = mae_plus([p for p, _ in pairs], [t for _, t in pairs], pg, tg)
    if r.defined:
        assert r.value <= np.max(np.abs(pg - tg)) + 1e-12


def test_evaluate_report_layout():
    rep = evaluate(["ticket", "error"], ["ticket", "PRT", "CNG"],
                   [0, 1, 1], [0, 1, 0], [0, 1, 2], [0, 2, 0],
                   [1.0, 5.0, 2.0], [1.5, 4.0, 9.0])
    d = json.loads(rep.to_json())
    assert d["n_samples"] == 3 and d["mae"] == pytest.approx((0.5 + 1.0 + 7.0) / 3)
    assert set(d["sub"]["per_class"]) == {"ticket", "PRT", "CNG"}
    assert d["main"]["f1_plus_count"] == 2 and d["main"]["mae_plus_count"] == 2
    rows = rep.sub.to_csv().splitlines()
    assert rows[0] == "class,precision,recall,f1,support" and rows[-1].startswith("macro,")
    assert len(rows) == 1 + 3 + 1
    cm = rep.main.confusion.to_csv().splitlines()
    assert cm[0] == "truth\\pred,ticket,error" and cm[1] == "ticket,1,1"
    with pytest.raises(ValueError):
        evaluate(["a"], ["a"], [], [], [], [], [], [])
