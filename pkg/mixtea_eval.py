import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from mixtea_encoder import ModelParams, encode
from mixtea_kg import AlignmentDataset, GraphIndex

logger = logging.getLogger(__name__)

DIRECTIONS = ("st", "ts")
TOP_N = 10


class EvaluationError(ValueError):
    """Invalid evaluation input."""


@dataclass(frozen=True)
class RankingResult:
    """
    Per query entity: candidate ids by descending cosine similarity and the 1-based
    rank of its true counterpart. `order` may be truncated to the first columns.
    """

    source_ids: np.ndarray
    order: np.ndarray
    ranks: np.ndarray

    def __len__(self):
        return len(self.ranks)


@dataclass(frozen=True)
class MetricsReport:
    hits1: float
    hits5: float
    mrr: float
    direction: str
    split: str
    count: int = 0
    rankings: Optional[RankingResult] = field(default=None, repr=False, compare=False)

    def as_line(self) -> str:
        """Machine-readable one-liner."""
        return (f"split={self.split}\tdirection={self.direction}\tcount={self.count}\t"
                f"hits1={self.hits1:.6f}\thits5={self.hits5:.6f}\tmrr={self.mrr:.6f}")

    def as_table(self) -> str:
        arrow = "source->target" if self.direction == "st" else "target->source"
        return "\n".join([
            f"=== MixTEA eval: {self.split} ({arrow}, {self.count} queries) ===",
            f"Hits@1  {self.hits1:.4f}",
            f"Hits@5  {self.hits5:.4f}",
            f"MRR     {self.mrr:.4f}",
        ])


def _normalize(rows: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if (norms == 0).any():
        raise EvaluationError(f"zero-norm {what} embedding at row {int(np.argmax(norms[:, 0] == 0))}")
    return rows / norms


def rank_targets(source_rows: np.ndarray, target_rows: np.ndarray, true_index: Optional[Sequence[int]] = None,
                 source_ids: Optional[Sequence[int]] = None, target_ids: Optional[Sequence[int]] = None,
                 keep: Optional[int] = None) -> RankingResult:
    """
    Rank every target row for every source row by cosine similarity.

    Ties are broken by the lower target id. true_index[i] is the column of the
    counterpart of source row i (defaults to i).

    Args:
        source_rows: (n, d) query embeddings
        target_rows: (m, d) candidate embeddings
        true_index: column of each query's counterpart
        source_ids / target_ids: ids reported in the result (default: row numbers)
        keep: keep only the first `keep` columns of each ordering

    Returns:
        RankingResult
    """
    source_rows = np.asarray(source_rows, dtype=np.float64)
    target_rows = np.asarray(target_rows, dtype=np.float64)
    if source_rows.ndim != 2 or target_rows.ndim != 2 or source_rows.shape[1] != target_rows.shape[1]:
        raise EvaluationError(f"rank_targets: incompatible shapes {source_rows.shape} / {target_rows.shape}")
    n, m = source_rows.shape[0], target_rows.shape[0]
    if n == 0 or m == 0:
        raise EvaluationError("rank_targets: empty query or candidate set")
    true_index = np.arange(n) if true_index is None else np.asarray(true_index, dtype=np.int64)
    source_ids = np.arange(n) if source_ids is None else np.asarray(source_ids, dtype=np.int64)
    target_ids = np.arange(m) if target_ids is None else np.asarray(target_ids, dtype=np.int64)

    sims = _normalize(source_rows, "source") @ _normalize(target_rows, "target").T
    ids = np.broadcast_to(target_ids, sims.shape)
    order = np.lexsort((ids, -sims), axis=1)
    if keep is not None:
        order = order[:, :keep]

    true_sim = sims[np.arange(n), true_index][:, None]
    true_id = target_ids[true_index][:, None]
    ranks = 1 + (sims > true_sim).sum(axis=1) + ((sims == true_sim) & (ids < true_id)).sum(axis=1)
    return RankingResult(source_ids, target_ids[order], ranks.astype(np.int64))


def hits_at_k(rankings, k: int) -> float:
    if k < 1:
        raise EvaluationError(f"k must be >= 1, got {k}")
    ranks = _ranks(rankings)
    return float((ranks <= k).mean())


def mrr(rankings) -> float:
    ranks = _ranks(rankings)
    return float((1.0 / ranks).mean())


def _ranks(rankings) -> np.ndarray:
    ranks = rankings.ranks if isinstance(rankings, RankingResult) else np.asarray(rankings, dtype=np.float64)
    if len(ranks) == 0:
        raise EvaluationError("empty test set")
    return np.asarray(ranks, dtype=np.float64)


def split_rows(embeddings: np.ndarray, dataset: AlignmentDataset, split: str, direction: str):
    """(query rows, candidate rows, query ids, candidate ids) for one split and direction."""
    if direction not in DIRECTIONS:
        raise EvaluationError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    mappings = dataset.split(split)
    if not mappings:
        raise EvaluationError(f"split {split!r} is empty")
    src = np.array([m.source for m in mappings], dtype=np.int64)
    tgt = np.array([m.target for m in mappings], dtype=np.int64)
    src_rows = embeddings[src]
    tgt_rows = embeddings[tgt + dataset.target_offset]
    if direction == "st":
        return src_rows, tgt_rows, src, tgt
    return tgt_rows, src_rows, tgt, src


def evaluate(params: ModelParams, dataset: AlignmentDataset, split: str = "test", direction: str = "st",
             index: Optional[GraphIndex] = None, embeddings: Optional[np.ndarray] = None) -> MetricsReport:
    """
    Encode, restrict to the split's mappings and rank counterparts among the split's candidates.

    Pass precomputed `embeddings` to skip encoding.
    """
    if embeddings is None:
        index = index or GraphIndex.from_dataset(dataset)
        with torch.no_grad():
            embeddings = encode(params, index).numpy()
    query, cand, query_ids, cand_ids = split_rows(embeddings, dataset, split, direction)
    rankings = rank_targets(query, cand, source_ids=query_ids, target_ids=cand_ids, keep=TOP_N)
    return MetricsReport(
        hits1=hits_at_k(rankings, 1),
        hits5=hits_at_k(rankings, 5),
        mrr=mrr(rankings),
        direction=direction,
        split=split,
        count=len(rankings),
        rankings=rankings,
    )


def dump_rankings(rankings: RankingResult, path: str, top: int = TOP_N) -> int:
    """Write `source_id\\ttrue_rank\\ttop_ids` lines (top ids comma-separated)."""
    with open(path, "w", encoding="utf-8") as f:
        for sid, rank, row in zip(rankings.source_ids, rankings.ranks, rankings.order):
            f.write(f"{int(sid)}\t{int(rank)}\t{','.join(str(int(t)) for t in row[:top])}\n")
    return len(rankings)
