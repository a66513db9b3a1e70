import math

import numpy as np
import pytest

from protomil import diffmath as dm
from protomil.prototypes import (PrototypeBank, condition, cosine_scores, diversity_loss,
                                 select_topk, sparse_attend, topk_count)


@pytest.mark.parametrize("n,k,kmin,expected", [(100, 12, 60, 8), (1000, 12, 60, 60), (5, 8, 60, 1),
                                               (1, 1, 60, 1), (24, 12, 1, 1)])
def test_topk_count(n, k, kmin, expected):
    assert topk_count(n, k, kmin) == expected
    assert topk_count(n, k, kmin) == max(1, min(kmin, n // k))


def test_topk_count_proportion():
    assert topk_count(100, 12, strategy="proportion", proportion=0.5) == math.floor(0.5 * 100 / 12)
    assert topk_count(5, 8, strategy="proportion", proportion=0.5) == 1
    with pytest.raises(ValueError):
        topk_count(10, 2, strategy="trainable")


def test_cosine_scores_basic():
    eye = dm.tensor(np.eye(2))
    P = dm.tensor([[1.0, 0.0]])
    H = dm.tensor([[3.0, 0.0], [0.0, 2.0], [0.0, 0.0]])
    np.testing.assert_allclose(cosine_scores(P, H, eye, eye).data, [[1.0, 0.0, 0.0]], atol=1e-15)


def test_cosine_self_match_is_row_max():
    rng = np.random.default_rng(0)
    H = rng.normal(size=(6, 4))
    eye = dm.tensor(np.eye(4))
    s = cosine_scores(dm.tensor(H[[2]]), dm.tensor(H), eye, eye).data[0]
    assert s[2] == pytest.approx(1.0, abs=1e-12)
    assert s.argmax() == 2


def test_sparse_attend_example():
    w, idx = sparse_attend(dm.tensor([[2.0, 1.0, 0.0]]), 2)
    e = np.exp([2.0, 1.0])
    np.testing.assert_allclose(w.data[0], [e[0] / e.sum(), e[1] / e.sum(), 0.0], atol=1e-15)
    np.testing.assert_allclose(w.data[0], [0.7311, 0.2689, 0.0], atol=5e-5)
    np.testing.assert_array_equal(idx, [[0, 1]])


def test_sparse_attend_uniform_and_onehot():
    w, _ = sparse_attend(dm.tensor(np.zeros((1, 5))), 5)
    np.testing.assert_allclose(w.data, np.full((1, 5), 0.2), atol=1e-15)
    w, _ = sparse_attend(dm.tensor([[0.1, 0.7, 0.3]]), 1)
    np.testing.assert_array_equal(w.data, [[0.0, 1.0, 0.0]])


def test_topk_ties_go_to_lower_index():
    np.testing.assert_array_equal(select_topk(np.array([[0.5, 0.9, 0.5, 0.9]]), 3), [[1, 3, 0]])


def test_sparse_attend_too_many():
    with pytest.raises(ValueError):
        sparse_attend(dm.tensor(np.zeros((1, 3))), 4)


def test_attention_invariants_random():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n, k = int(rng.integers(1, 40)), int(rng.integers(1, 6))
        sims = rng.uniform(-1, 1, size=(k, n))
        kim = topk_count(n, k, 5)
        w, idx = sparse_attend(dm.tensor(sims), kim)
        np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-9)
        assert ((w.data > 0).sum(axis=1) == kim).all()
        assert (w.data >= 0).all()
        for r in range(k):
            top = set(np.argsort(-sims[r], kind="stable")[:kim])
            assert set(np.flatnonzero(w.data[r])) == top


def test_condition_examples():
    w = dm.tensor([[0.5, 0.5, 0.0]])
    H = dm.tensor([[2.0, 0.0], [0.0, 2.0], [9.0, 9.0]])
    np.testing.assert_array_equal(condition(w, H).data, [[1.0, 1.0]])
    np.testing.assert_array_equal(condition(dm.tensor([[0.0, 0.0, 1.0]]), H).data, [[9.0, 9.0]])


def test_diversity_examples():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 5)))
    assert diversity_loss(q[:3]).item() < 1e-12
    same = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert diversity_loss(same).item() == 0.5
    assert diversity_loss(np.array([[0.3, 0.4]])).item() == 0.0


def test_diversity_forms_differ_by_k_squared():
    P = np.random.default_rng(2).normal(size=(4, 6))
    supp = diversity_loss(P, "supp").item()
    main = diversity_loss(P, "main").item()
    assert main == pytest.approx(16 * supp, rel=1e-12)


def test_diversity_zero_iff_orthonormal_gram():
    P = np.random.default_rng(3).normal(size=(3, 5))
    assert diversity_loss(P).item() > 1e-6
    with pytest.raises(ValueError):
        diversity_loss(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        diversity_loss(np.ones((2, 2)), "other")


def bank(k=3, d=4, **kw):
    return PrototypeBank(k, d, rng=np.random.default_rng(0), **kw)


def test_ema_examples():
    b = bank(k=1, d=1)
    b.P.data[...] = 1.0
    assert b.ema_update(np.zeros((1, 1)))
    assert b.P.data[0, 0] == pytest.approx(0.95, abs=1e-15)
    b.P.data[...] = 0.3
    b.ema_update(np.full((1, 1), 0.3))
    assert b.P.data[0, 0] == 0.3


def test_ema_contraction_and_bounds():
    b = bank()
    target = np.random.default_rng(4).normal(size=(3, 4))
    dist = np.linalg.norm(b.P.data - target)
    for _ in range(5):
        old = b.P.data.copy()
        b.ema_update(target)
        new = np.linalg.norm(b.P.data - target)
        assert new / dist == pytest.approx(0.95, abs=1e-12)
        lo, hi = np.minimum(old, target), np.maximum(old, target)
        assert ((b.P.data >= lo - 1e-15) & (b.P.data <= hi + 1e-15)).all()
        dist = new


def test_ema_uses_epoch_mean_and_resets():
    b = bank(k=2, d=3)
    H = [dm.tensor(np.random.default_rng(i).normal(size=(6, 3))) for i in range(3)]
    conds = [b.forward_bag(h, train=True)[0].data for h in H]
    b.forward_bag(H[0], train=False)  # eval bags are not accumulated
    assert b.accum_count == 3
    old = b.P.data.copy()
    assert b.ema_update()
    np.testing.assert_allclose(b.P.data, 0.95 * old + 0.05 * np.mean(conds, axis=0), atol=1e-14)
    assert b.accum_count == 0


def test_ema_noop_without_bags(caplog):
    b = bank()
    old = b.P.data.copy()
    assert b.ema_update() is False
    np.testing.assert_array_equal(b.P.data, old)
    assert "skipped" in caplog.text


def test_bank_validation():
    with pytest.raises(ValueError):
        PrototypeBank(0, 4)
    with pytest.raises(ValueError):
        PrototypeBank(2, 4, ema_beta=1.0)


def test_forward_bag_single_instance():
    b = bank(k=1, d=3)
    H = dm.tensor([[0.2, -1.0, 3.0]])
    cond, rec = b.forward_bag(H)
    np.testing.assert_array_equal(rec.weights, [[1.0]])
    np.testing.assert_array_equal(cond.data, H.data)


def test_forward_bag_convexity_and_record():
    b = bank(k=3, d=4, k_min=4)
    H = np.random.default_rng(5).normal(size=(20, 4))
    cond, rec = b.forward_bag(dm.tensor(H))
    assert rec.k_im == 4 and rec.selected.shape == (3, 4)
    for r in range(3):
        sel = H[rec.selected[r]]
        assert (cond.data[r] >= sel.min(axis=0) - 1e-12).all()
        assert (cond.data[r] <= sel.max(axis=0) + 1e-12).all()


def test_forward_bag_permutation_invariance():
    b = bank(k=2, d=4, k_min=3)
    H = np.random.default_rng(6).normal(size=(9, 4))
    perm = np.random.default_rng(7).permutation(9)
    c1, r1 = b.forward_bag(dm.tensor(H))
    c2, r2 = b.forward_bag(dm.tensor(H[perm]))
    np.testing.assert_allclose(c1.data, c2.data, atol=1e-14)
    np.testing.assert_allclose(r1.sims[:, perm], r2.sims, atol=1e-14)


def test_duplicate_instance_bag_unchanged():
    b = bank(k=2, d=4, k_min=3)
    H = np.random.default_rng(8).normal(size=(8, 4))
    c1, r1 = b.forward_bag(dm.tensor(H))
    # k_im doubles from 3 to 6 when every instance appears twice
    b.k_min = 6
    c2, r2 = b.forward_bag(dm.tensor(np.repeat(H, 2, axis=0)))
    assert (r1.k_im, r2.k_im) == (3, 6)
    np.testing.assert_allclose(c1.data, c2.data, atol=1e-14)


def test_prototype_grad_check_with_frozen_topk():
    b = bank(k=2, d=3, k_min=3)
    H = dm.tensor(np.random.default_rng(9).normal(size=(7, 3)), requires_grad=True, name="H")
    target = np.random.default_rng(10).normal(size=(2, 3))
    _, rec = b.forward_bag(H)
    fn = lambda: dm.sum(b.forward_bag(H, index=rec.selected)[0] * dm.tensor(target)) + diversity_loss(b.P)
    res = dm.grad_check(fn, b.parameters() + [H], rel_tol=1e-3)
    assert res["passed"], res["max_rel_err"]
