import numpy as np
import pytest
import torch

from mixtea_kg import EntityMapping
from mixtea_pseudo import (
    PseudoMapError, VoteWeight, bdv_fuse, dump_pseudo_matrix, mdr_rectify, one_hot_argmax, pseudo_loss,
    threshold_self_training, update_beta, vote_statistics,
)


def _brute_argmax(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best


def _brute_bdv(m_st, m_ts, beta):
    n, k = m_st.shape
    p = np.zeros((n, k))
    for i in range(n):
        p[i, _brute_argmax(m_st[i])] += beta
    for j in range(k):
        p[_brute_argmax(m_ts[j]), j] += 1.0 - beta
    return p


def _brute_mdr(p):
    n, k = p.shape
    out = np.zeros_like(p)
    for i in range(n):
        for j in range(k):
            if p[i, j] > 0:
                out[i, j] = p[i, j] / (sum(p[i, :]) + sum(p[:, j]) - p[i, j])
    return out


def _fixtures(count=1000, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n, k = rng.integers(1, 9, size=2)
        # small integer grid so that ties actually occur
        m_st = rng.integers(0, 4, size=(n, k)).astype(float)
        m_ts = rng.integers(0, 4, size=(k, n)).astype(float)
        yield m_st, m_ts, float(rng.uniform(0.0, 1.0))


def test_bdv_matches_brute_force():
    for m_st, m_ts, beta in _fixtures():
        p = bdv_fuse(m_st, m_ts, beta)
        assert np.array_equal(p, _brute_bdv(m_st, m_ts, beta))
        allowed = np.array([0.0, beta, 1.0 - beta, 1.0])
        assert np.isclose(p[..., None], allowed).any(axis=-1).all()


def test_mdr_matches_brute_force():
    for m_st, m_ts, beta in _fixtures(seed=1):
        p = bdv_fuse(m_st, m_ts, beta)
        rect = mdr_rectify(p)
        assert np.allclose(rect, _brute_mdr(p), rtol=0, atol=1e-12)
        assert (rect <= p + 1e-15).all()
        assert ((rect >= 0) & (rect <= 1)).all()


def test_mdr_worked_example():
    rect = mdr_rectify(np.array([[1.0, 0.0], [0.5, 0.5]]))
    assert rect[0, 0] == pytest.approx(2 / 3, abs=1e-15)
    assert rect[0, 1] == 0.0
    assert rect[1, 0] == pytest.approx(0.25, abs=1e-15)
    assert rect[1, 1] == pytest.approx(0.5, abs=1e-15)


def test_mdr_leaves_unique_mutual_votes_at_one():
    assert np.array_equal(mdr_rectify(np.eye(3)), np.eye(3))


def test_mdr_rejects_bad_input():
    with pytest.raises(PseudoMapError, match=r"\[0, 1\]"):
        mdr_rectify(np.array([[1.5]]))


def test_bdv_mutual_and_split_votes():
    m_st = np.array([[0.9, 0.1], [0.2, 0.3]])
    m_ts = np.array([[0.8, 0.7], [0.6, 0.1]])
    p = bdv_fuse(m_st, m_ts, beta=0.7)
    assert np.allclose(p, [[1.0, 0.3], [0.0, 0.7]])


def test_bdv_shape_and_beta_checks():
    with pytest.raises(PseudoMapError, match="transpose"):
        bdv_fuse(np.ones((2, 3)), np.ones((2, 3)), 0.5)
    with pytest.raises(PseudoMapError):
        bdv_fuse(np.ones((2, 2)), np.ones((2, 2)), 1.5)


def test_one_hot_argmax_ties_lowest_column():
    assert np.array_equal(one_hot_argmax(np.array([[1.0, 3.0, 3.0]])), np.array([[0.0, 1.0, 0.0]]))


def test_update_beta():
    assert update_beta(0.6, 0.2).beta == pytest.approx(0.75)
    assert update_beta(0.0, 0.0) == VoteWeight(0.5)
    assert update_beta(0.0, 0.4).beta == 0.0
    with pytest.raises(PseudoMapError):
        update_beta(-0.1, 0.5)


def test_pseudo_loss_value_and_gradient_target():
    m = torch.tensor([[0.2, -0.1], [0.5, 0.4]], dtype=torch.float64, requires_grad=True)
    p = np.array([[1.0, 0.0], [0.3, 0.7]])
    loss = pseudo_loss(m, p)
    target = torch.softmax(torch.as_tensor(p), dim=1)
    expected = -(target * torch.log_softmax(m.detach(), dim=1)).sum()
    assert float(loss) == pytest.approx(float(expected), abs=1e-12)
    loss.backward()
    assert m.grad is not None
    # gradient of CE w.r.t. logits is softmax(m) - target, row by row
    assert torch.allclose(m.grad, torch.softmax(m.detach(), dim=1) - target)


def test_pseudo_loss_temperatures():
    m = torch.zeros(1, 2, dtype=torch.float64, requires_grad=True)
    p = np.array([[1.0, 0.0]])
    sharp = pseudo_loss(m, p, target_temperature=0.01)
    assert float(sharp) == pytest.approx(np.log(2.0), abs=1e-9)
    with pytest.raises(PseudoMapError, match="shape"):
        pseudo_loss(m, np.ones((2, 2)))


def test_threshold_self_training_is_strict():
    sims = np.array([[0.95, 0.1], [0.9, 0.3], [0.2, 0.91]])
    pairs = threshold_self_training(sims, 0.9, source_ids=[10, 11, 12], target_ids=[20, 21])
    assert pairs == [EntityMapping(10, 20), EntityMapping(12, 21)]
    with pytest.raises(PseudoMapError):
        threshold_self_training(sims, 0.0)


def test_vote_statistics():
    m_st = np.array([[0.9, 0.1, 0.0], [0.1, 0.2, 0.8], [0.3, 0.2, 0.1]])
    m_ts = np.array([[0.9, 0.1, 0.2], [0.1, 0.7, 0.3], [0.2, 0.6, 0.1]])
    p_tilde = mdr_rectify(bdv_fuse(m_st, m_ts, 0.5))
    stats = vote_statistics(m_st, m_ts, p_tilde, truth={0: 0, 1: 1, 2: 2})
    assert stats["mutual"] == 2
    assert stats["single"] == 2
    assert stats["mutual_precision"] == 0.5
    assert stats["mean_confidence"] == pytest.approx(0.5)


def test_vote_statistics_ignores_beta():
    # with beta = 1 every source->target vote is worth 1, but only two of them are mutual
    m_st = np.array([[0.9, 0.1, 0.0], [0.1, 0.2, 0.8], [0.3, 0.2, 0.1]])
    m_ts = np.array([[0.9, 0.1, 0.2], [0.1, 0.7, 0.3], [0.2, 0.6, 0.1]])
    p = bdv_fuse(m_st, m_ts, 1.0)
    assert int((p == 1.0).sum()) == 3
    assert vote_statistics(m_st, m_ts, p)["mutual"] == 2
    with pytest.raises(PseudoMapError, match="transpose"):
        vote_statistics(np.ones((2, 3)), np.ones((2, 3)))


def test_dump_pseudo_matrix(tmp_path):
    path = tmp_path / "pseudo.tsv"
    n = dump_pseudo_matrix(np.array([[0.0, 0.5], [1.0, 0.0]]), str(path), source_ids=[3, 4], target_ids=[7, 8])
    assert n == 2
    assert path.read_text(encoding="utf-8").splitlines() == ["3\t8\t0.500000", "4\t7\t1.000000"]


def test_mdr_with_beta_zero_leaves_unvoted_rows_empty():
    # beta = 0: only target->source votes count; rows 1 and 2 get none
    m_st = np.array([[0.9, 0.1], [0.8, 0.2], [0.7, 0.3]])
    m_ts = np.array([[0.9, 0.1, 0.0], [0.8, 0.1, 0.1]])
    p = bdv_fuse(m_st, m_ts, 0.0)
    assert np.array_equal(p, [[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    rect = mdr_rectify(p)
    assert np.allclose(rect, [[0.5, 0.5], [0.0, 0.0], [0.0, 0.0]], rtol=0, atol=1e-15)


def test_pseudo_loss_skips_rows_without_votes():
    m = torch.tensor([[0.2, -0.1], [0.5, 0.4], [0.3, 0.9]], dtype=torch.float64, requires_grad=True)
    p = np.array([[1.0, 0.0], [0.0, 0.0], [0.3, 0.7]])
    loss = pseudo_loss(m, p)
    kept = [0, 2]
    target = torch.softmax(torch.as_tensor(p[kept]), dim=1)
    expected = -(target * torch.log_softmax(m.detach()[kept], dim=1)).sum()
    assert float(loss) == pytest.approx(float(expected), abs=1e-12)
    loss.backward()
    assert torch.equal(m.grad[1], torch.zeros(2, dtype=torch.float64))


def test_pseudo_loss_without_any_vote_is_zero():
    m = torch.tensor([[0.2, -0.1], [0.5, 0.4]], dtype=torch.float64, requires_grad=True)
    loss = pseudo_loss(m, np.zeros((2, 2)), temperature=0.05)
    assert float(loss) == 0.0
    loss.backward()
    assert torch.equal(m.grad, torch.zeros(2, 2, dtype=torch.float64))


def test_pseudo_loss_is_shift_invariant_per_row(rng):
    m = torch.as_tensor(rng.uniform(-1.0, 1.0, size=(4, 5)))
    shift = torch.as_tensor(rng.normal(size=(4, 1)))
    p = mdr_rectify(bdv_fuse(m.numpy(), m.numpy().T, 0.5))
    base = pseudo_loss(m, p, temperature=0.5, target_temperature=0.1)
    shifted = pseudo_loss(m + shift, p, temperature=0.5, target_temperature=0.1)
    assert float(shifted) == pytest.approx(float(base), abs=1e-12)


def test_bdv_swapping_directions_transposes_at_half_beta():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(1, 9))
        m = rng.integers(0, 4, size=(n, n)).astype(float)
        assert np.array_equal(bdv_fuse(m.T, m, 0.5), bdv_fuse(m, m.T, 0.5).T)


def test_mdr_keeps_entries_that_face_no_competition():
    for m_st, m_ts, beta in _fixtures(count=300, seed=2):
        p = bdv_fuse(m_st, m_ts, beta)
        rect = mdr_rectify(p)
        denom = p.sum(axis=1, keepdims=True) + p.sum(axis=0, keepdims=True) - p
        for i, j in zip(*np.nonzero(p)):
            alone = np.count_nonzero(p[i]) == 1 and np.count_nonzero(p[:, j]) == 1
            if alone:
                assert rect[i, j] == pytest.approx(p[i, j], abs=1e-12)
            # equality holds exactly when the competing mass sums to 1 - P_ij
            kept = np.isclose(rect[i, j] / p[i, j], 1.0, rtol=0, atol=1e-12)
            assert kept == np.isclose(denom[i, j], 1.0, rtol=0, atol=1e-12)


def test_mdr_can_keep_a_contested_single_vote():
    # row 0 votes t0 alone; t0's reverse vote goes to row 1, so column 0 holds 0.5 + 0.5
    p = np.array([[0.5, 0.0], [0.5, 1.0]])
    assert mdr_rectify(p)[0, 0] == 0.5


def test_threshold_self_training_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n, k = rng.integers(1, 7, size=2)
        sims = np.round(rng.uniform(-1.0, 1.0, size=(n, k)), 1)
        threshold = float(rng.choice([0.1, 0.5, 0.9, 1.0]))
        expected = []
        for i in range(n):
            j = _brute_argmax(sims[i])
            if sims[i, j] > threshold:
                expected.append(EntityMapping(i, j))
        assert threshold_self_training(sims, threshold) == expected
