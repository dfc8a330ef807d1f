import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from mixtea_diff import DTYPE, record_op, row_log_softmax, row_softmax
from mixtea_kg import EntityMapping

logger = logging.getLogger(__name__)


class PseudoMapError(ValueError):
    """Invalid input to pseudo-mapping generation."""


@dataclass(frozen=True)
class VoteWeight:
    """beta: weight of the source->target vote in BDV."""

    beta: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise PseudoMapError(f"beta must lie in [0, 1], got {self.beta}")


def _as_matrix(m, name: str) -> np.ndarray:
    if torch.is_tensor(m):
        m = m.detach().cpu().numpy()
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise PseudoMapError(f"{name}: expected non-empty 2-D matrix, got shape {arr.shape}")
    return arr


def one_hot_argmax(m) -> np.ndarray:
    """One 1 per row at the row maximum; ties go to the lowest column."""
    m = _as_matrix(m, "one_hot_argmax")
    out = np.zeros_like(m)
    out[np.arange(m.shape[0]), np.argmax(m, axis=1)] = 1.0
    return out


def bdv_fuse(m_st, m_ts, beta: float) -> np.ndarray:
    """
    Bi-directional voting: P = beta * g(M_st) + (1 - beta) * g(M_ts)^T.

    Entries are 1 for mutual votes, beta / 1-beta for single-direction votes, 0 otherwise.
    """
    m_st = _as_matrix(m_st, "bdv_fuse")
    m_ts = _as_matrix(m_ts, "bdv_fuse")
    if m_ts.shape != m_st.shape[::-1]:
        raise PseudoMapError(f"bdv_fuse: M_ts shape {m_ts.shape} is not the transpose of M_st shape {m_st.shape}")
    beta = VoteWeight(beta).beta
    return beta * one_hot_argmax(m_st) + (1.0 - beta) * one_hot_argmax(m_ts).T


def update_beta(hit1_st: float, hit1_ts: float) -> VoteWeight:
    """beta = h_st / (h_st + h_ts); 0.5 before any direction scores."""
    if hit1_st < 0 or hit1_ts < 0:
        raise PseudoMapError(f"update_beta: Hit@1 scores must be >= 0, got {hit1_st}, {hit1_ts}")
    total = hit1_st + hit1_ts
    if total == 0:
        return VoteWeight(0.5)
    return VoteWeight(hit1_st / total)


def mdr_rectify(p) -> np.ndarray:
    """
    Matching-diversity rectification: P~_ij = P_ij / (sum P_i: + sum P_:j - P_ij).

    Zero entries stay zero, so a row without vote mass (beta = 0 leaves every
    row that received no reverse vote empty) comes back all zero.
    """
    p = _as_matrix(p, "mdr_rectify")
    if (p < 0).any() or (p > 1).any():
        raise PseudoMapError("mdr_rectify: entries must lie in [0, 1]")
    row = p.sum(axis=1, keepdims=True)
    empty = int((row <= 0).sum())
    if empty:
        logger.debug("mdr_rectify: %d of %d rows carry no vote mass", empty, p.shape[0])
    col = p.sum(axis=0, keepdims=True)
    denom = row + col - p
    out = np.zeros_like(p)
    np.divide(p, denom, out=out, where=p > 0)
    return out


def pseudo_loss(m_stu: torch.Tensor, p_tilde, temperature: float = 1.0,
                target_temperature: float = 1.0) -> torch.Tensor:
    """
    L_u = sum_i CE(softmax(M_stu_i / tau), softmax(P~_i / tau_p)).

    The target side is a constant; gradients reach the student only. Rows of P~
    without any vote are skipped; if no row has one the loss is a zero that
    still belongs to the student's graph.
    """
    target = torch.as_tensor(_as_matrix(p_tilde, "pseudo_loss"), dtype=DTYPE)
    if tuple(m_stu.shape) != tuple(target.shape):
        raise PseudoMapError(f"pseudo_loss: shape mismatch {tuple(m_stu.shape)} vs {tuple(target.shape)}")
    voted = (target > 0).any(dim=1)
    if not bool(voted.any()):
        return record_op("pseudo_loss", (m_stu,), m_stu.sum() * 0.0)
    if not bool(voted.all()):
        rows = torch.nonzero(voted).reshape(-1)
        target, m_stu = target.index_select(0, rows), m_stu.index_select(0, rows)
    with torch.no_grad():
        target_dist = row_softmax(target, target_temperature)
    log_p = row_log_softmax(m_stu, temperature)
    return record_op("pseudo_loss", (m_stu,), -(target_dist * log_p).sum())


def threshold_self_training(m, threshold: float, source_ids: Optional[Sequence[int]] = None,
                            target_ids: Optional[Sequence[int]] = None) -> List[EntityMapping]:
    """
    Plain self-training proposals: (i, argmax_j M_ij) whenever that similarity exceeds threshold.

    Row/column indices are mapped through source_ids/target_ids when given.
    """
    if not 0.0 < threshold <= 1.0:
        raise PseudoMapError(f"threshold must lie in (0, 1], got {threshold}")
    m = _as_matrix(m, "threshold_self_training")
    best = np.argmax(m, axis=1)
    best_sim = m[np.arange(m.shape[0]), best]
    pairs = []
    for i in np.nonzero(best_sim > threshold)[0]:
        s = int(source_ids[i]) if source_ids is not None else int(i)
        t = int(target_ids[best[i]]) if target_ids is not None else int(best[i])
        pairs.append(EntityMapping(s, t))
    return pairs


def vote_statistics(m_st, m_ts, p_tilde: Optional[np.ndarray] = None,
                    truth: Optional[Dict[int, int]] = None) -> Dict[str, float]:
    """
    Summary of one round of bi-directional votes.

    A vote is mutual when g(M_st) and g(M_ts)^T both mark the same cell, whatever
    beta is. truth maps row index -> correct column index, for rows whose
    counterpart is known.
    """
    votes_st = one_hot_argmax(m_st) > 0
    votes_ts = one_hot_argmax(m_ts).T > 0
    if votes_ts.shape != votes_st.shape:
        raise PseudoMapError(
            f"vote_statistics: M_ts shape {votes_ts.shape[::-1]} is not the transpose of M_st shape {votes_st.shape}"
        )
    both = votes_st & votes_ts
    mutual = int(both.sum())
    stats = {"mutual": mutual, "single": int((votes_st ^ votes_ts).sum())}
    if p_tilde is not None:
        nz = p_tilde[p_tilde > 0]
        stats["mean_confidence"] = float(nz.mean()) if nz.size else 0.0
    if truth:
        rows = np.fromiter(truth.keys(), dtype=np.int64)
        cols = np.fromiter(truth.values(), dtype=np.int64)
        hit = both[rows, cols]
        stats["mutual_precision"] = float(hit.sum() / mutual) if mutual else 0.0
    return stats


def dump_pseudo_matrix(p, path: str, source_ids: Optional[Sequence[int]] = None,
                       target_ids: Optional[Sequence[int]] = None) -> int:
    """Write nonzero entries as `i\\tj\\tconfidence`; returns the number of lines."""
    p = _as_matrix(p, "dump_pseudo_matrix")
    rows, cols = np.nonzero(p)
    with open(path, "w", encoding="utf-8") as f:
        for i, j in zip(rows, cols):
            s = source_ids[i] if source_ids is not None else i
            t = target_ids[j] if target_ids is not None else j
            f.write(f"{int(s)}\t{int(t)}\t{p[i, j]:.6f}\n")
    logger.debug("wrote %d pseudo mappings to %s", len(rows), path)
    return len(rows)
