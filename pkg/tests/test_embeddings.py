"""Scoring models, analytic gradients, negative sampling, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fedscrub.data import Triple
from fedscrub.embeddings import (EmbeddingTable, batch_grads, batch_scores,
                                 grad_score, init_embeddings, load_table,
                                 sample_negatives, save_table, score_complex,
                                 score_transe)

from conftest import fd_grad, rel_err

# rounded elements keep h+r-t comfortably away from float underflow
vec = arrays(np.float64, 4,
             elements=st.floats(-3, 3, allow_nan=False).map(lambda x: round(x, 3)))


def test_init_deterministic():
    a = init_embeddings(5, 3, 8, seed=11)
    b = init_embeddings(5, 3, 8, seed=11)
    assert np.array_equal(a.entities, b.entities)
    assert np.array_equal(a.relations, b.relations)


def test_init_within_bound():
    table = init_embeddings(50, 10, 16, seed=0)
    bound = 6.0 / np.sqrt(16)
    for m in (table.entities, table.relations):
        assert np.all(m >= -bound) and np.all(m <= bound)


def test_complex_rows_are_real_half_then_imag_half():
    # row [re0, re1, im0, im1] must behave like the complex vector it encodes
    rng = np.random.default_rng(3)
    h, r, t = rng.standard_normal((3, 4))
    as_c = lambda v: v[:2] + 1j * v[2:]
    expected = np.real(np.sum(as_c(h) * as_c(r) * np.conj(as_c(t))))
    assert score_complex(h, r, t) == pytest.approx(expected, rel=1e-12)


def test_init_complex_requires_even_dim():
    with pytest.raises(ValueError):
        init_embeddings(3, 2, 5, seed=0, model_kind="complex")


def test_transe_exact_translation_scores_zero():
    assert score_transe([1, 0], [0, 1], [1, 1], "l1") == 0.0
    assert score_transe([1, 0], [0, 1], [1, 1], "l2") == 0.0


def test_transe_l1_hand_value():
    assert score_transe([1, 2], [0, 1], [0, 0], "l1") == -4.0


def test_transe_l2_hand_value():
    assert score_transe([0, 0], [0, 0], [3, -4], "l2") == -5.0


def test_transe_rejects_dim_mismatch():
    with pytest.raises(ValueError):
        score_transe([1, 2], [1], [0, 0])


def test_complex_identity_hand_value():
    one = [1.0, 0.0]   # 1 + 0i in split storage
    assert score_complex(one, one, one) == 1.0


def test_complex_hand_values():
    # (1+i) * 2 * conj(i) and i * i * conj(1)
    assert score_complex([1, 1], [2, 0], [0, 1]) == 2.0
    assert score_complex([0, 1], [0, 1], [1, 0]) == -1.0


@given(vec, vec, vec)
def test_transe_score_nonpositive(h, r, t):
    for norm in ("l1", "l2"):
        s = score_transe(h, r, t, norm)
        assert s <= 0.0
        if np.array_equal(np.asarray(h) + r, np.asarray(t)):
            assert s == 0.0
        else:
            assert s < 0.0


@given(vec, vec, vec)
def test_complex_conjugate_symmetry(h, r, t):
    conj_r = np.concatenate([r[:2], -r[2:]])
    assert score_complex(h, r, t) == pytest.approx(
        score_complex(t, conj_r, h), rel=1e-9, abs=1e-9)


def test_grad_transe_l2_zero_at_exact_translation():
    dh, dr, dt = grad_score("transe", [1, 0], [0, 1], [1, 1], "l2")
    assert not dh.any() and not dr.any() and not dt.any()


def test_grad_complex_hand_value():
    # d/dh Re(h * r * conj(t)) at h = r = t = 1 is (1, 0)
    dh, _, _ = grad_score("complex", [1, 0], [1, 0], [1, 0])
    assert np.allclose(dh, [1.0, 0.0])


@pytest.mark.parametrize("model,norm", [("transe", "l2"), ("complex", "l1")])
def test_grad_matches_finite_differences(model, norm):
    rng = np.random.default_rng(17)
    score = score_transe if model == "transe" else lambda h, r, t, _n: score_complex(h, r, t)
    for _ in range(10):
        h, r, t = rng.standard_normal((3, 6))
        dh, dr, dt = grad_score(model, h, r, t, norm)
        assert rel_err(dh, fd_grad(lambda v: score(v, r, t, norm), h)) < 1e-4
        assert rel_err(dr, fd_grad(lambda v: score(h, v, t, norm), r)) < 1e-4
        assert rel_err(dt, fd_grad(lambda v: score(h, r, v, norm), t)) < 1e-4


def test_grad_transe_l1_away_from_kinks():
    rng = np.random.default_rng(23)
    count = 0
    while count < 10:
        h, r, t = rng.standard_normal((3, 6))
        if np.min(np.abs(h + r - t)) < 1e-3:   # kinks break the FD oracle
            continue
        count += 1
        dh, dr, dt = grad_score("transe", h, r, t, "l1")
        assert rel_err(dh, fd_grad(lambda v: score_transe(v, r, t, "l1"), h)) < 1e-4
        assert rel_err(dr, fd_grad(lambda v: score_transe(h, v, t, "l1"), r)) < 1e-4
        assert rel_err(dt, fd_grad(lambda v: score_transe(h, r, v, "l1"), t)) < 1e-4


def test_batch_scores_match_scalar_and_order():
    rng = np.random.default_rng(5)
    eh, er, et = rng.standard_normal((3, 7, 6))
    for model, norm in (("transe", "l1"), ("transe", "l2"), ("complex", "l1")):
        s = batch_scores(model, norm, eh, er, et)
        single = score_transe if model == "transe" else lambda h, r, t, _n: score_complex(h, r, t)
        for i in range(7):
            assert s[i] == pytest.approx(single(eh[i], er[i], et[i], norm), rel=1e-12)
        perm = rng.permutation(7)
        assert np.array_equal(batch_scores(model, norm, eh[perm], er[perm], et[perm]),
                              s[perm])


def test_batch_grads_match_single():
    rng = np.random.default_rng(9)
    eh, er, et = rng.standard_normal((3, 5, 4))
    for model in ("transe", "complex"):
        dh, dr, dt = batch_grads(model, "l2", eh, er, et)
        for i in range(5):
            sh, sr, st_ = grad_score(model, eh[i], er[i], et[i], "l2")
            assert np.allclose(dh[i], sh) and np.allclose(dr[i], sr) and np.allclose(dt[i], st_)


def test_negatives_forced_with_two_entities():
    nb = sample_negatives(Triple(0, 0, 1), 1, 2, seed=4)
    corrupted = nb.corrupted[0]
    changed_head = corrupted.head != 0
    if changed_head:
        assert corrupted.head == 1 and corrupted.tail == 1
    else:
        assert corrupted.tail == 0 and corrupted.head == 0


def test_negatives_differ_in_exactly_one_slot():
    pos = Triple(3, 1, 7)
    nb = sample_negatives(pos, 200, 10, seed=8)
    for neg in nb.corrupted:
        assert neg.relation == pos.relation
        changed = (neg.head != pos.head) + (neg.tail != pos.tail)
        assert changed == 1
        assert 0 <= neg.head < 10 and 0 <= neg.tail < 10


def test_negative_side_coin_is_fair():
    nb = sample_negatives(Triple(0, 0, 1), 10_000, 50, seed=12)
    heads = sum(neg.head != 0 for neg in nb.corrupted)
    assert abs(heads / 10_000 - 0.5) < 0.02


def test_table_checkpoint_roundtrip(tmp_path):
    table = init_embeddings(6, 4, 8, seed=2, model_kind="complex")
    save_table(table, tmp_path / "ckpt")
    back = load_table(tmp_path / "ckpt")
    assert back.model_kind == "complex"
    assert np.allclose(back.entities, table.entities, rtol=1e-8, atol=1e-12)
    assert np.allclose(back.relations, table.relations, rtol=1e-8, atol=1e-12)


def test_table_rejects_nonfinite():
    with pytest.raises(ValueError):
        EmbeddingTable(np.array([[np.inf, 0.0]]), np.zeros((1, 2)), "transe")
