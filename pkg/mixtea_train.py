import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from mixtea_diff import AdamState, DiffCoreError, GradientTape, adam_step, cosine_sim_matrix, row_l2_distance
from mixtea_encoder import EncoderConfig, ModelParams, encode
from mixtea_eval import evaluate
from mixtea_kg import AlignmentDataset, EntityMapping, GraphIndex
from mixtea_pseudo import (
    PseudoMapError, VoteWeight, bdv_fuse, mdr_rectify, pseudo_loss, threshold_self_training, update_beta,
    vote_statistics,
)

logger = logging.getLogger(__name__)

MODES = ("mixtea", "supervised_only", "self_training_baseline")
TRUNCATION = 1.25


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss or an unrecoverable numeric error."""


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 2.0
    momentum: float = 0.9
    neg_samples: int = 10
    lambda_max: float = 1.0
    ramp_epochs: int = 50
    epochs: int = 200
    lr: float = 0.005
    seed: int = 0
    validation_interval: int = 10
    neg_refresh_interval: int = 10
    pseudo_interval: int = 1
    temperature: float = 1.0
    target_temperature: float = 1.0
    patience: int = 0
    mode: str = "mixtea"
    threshold: float = 0.9
    no_rel: bool = False
    no_lu: bool = False
    no_bdv: bool = False
    no_mdr: bool = False

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.neg_samples < 1:
            raise ValueError(f"neg_samples must be >= 1, got {self.neg_samples}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("validation_interval", "neg_refresh_interval", "pseudo_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0 or self.ramp_epochs < 0 or self.patience < 0:
            raise ValueError("epochs, ramp_epochs and patience must be >= 0")

    @property
    def uses_pseudo_loss(self) -> bool:
        return self.mode == "mixtea" and not self.no_lu


@dataclass(frozen=True)
class NegativeSet:
    """
    Global entity ids. For positive i:
    (pos_source[i], neg_target[i, j]) and (neg_source[i, j], pos_target[i]) are its negatives.
    """

    pos_source: np.ndarray
    pos_target: np.ndarray
    neg_source: np.ndarray
    neg_target: np.ndarray


@dataclass
class EpochRecord:
    epoch: int
    loss_a: float
    loss_u: float
    lam: float
    beta: float
    valid_hit1_st: Optional[float] = None
    valid_hit1_ts: Optional[float] = None


@dataclass
class TrainResult:
    student: ModelParams
    teacher: ModelParams
    history: List[EpochRecord]
    beta: VoteWeight
    pseudo_stats: List[Dict[str, float]] = field(default_factory=list)
    pseudo_matrix: Optional[np.ndarray] = None
    stopped_epoch: Optional[int] = None


def mapping_array(mappings: Sequence[EntityMapping], target_offset: int) -> np.ndarray:
    """(n, 2) array of global (source, target) ids."""
    if not mappings:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array([(m.source, m.target + target_offset) for m in mappings], dtype=np.int64)


def _nearest_candidates(emb: np.ndarray, queries: np.ndarray, pool: np.ndarray, width: int) -> np.ndarray:
    """For each query id, the `width` most cosine-similar pool ids other than itself."""
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    unit = emb / np.where(norms > 0, norms, 1.0)
    sims = unit[queries] @ unit[pool].T
    sims[pool[None, :] == queries[:, None]] = -np.inf
    order = np.argsort(-sims, axis=1, kind="stable")
    return pool[order[:, :width]]


def sample_negatives(embeddings: np.ndarray, positives: np.ndarray, k: int, seed: int,
                     source_pool: np.ndarray, target_pool: np.ndarray) -> NegativeSet:
    """
    Truncated nearest-neighbour negatives: each side of a positive is replaced by k
    entities drawn uniformly from its ceil(1.25k) cosine-nearest neighbours in the
    same KG. Draws are without replacement unless fewer than k candidates exist.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    if len(positives) == 0:
        empty = np.zeros((0, k), dtype=np.int64)
        return NegativeSet(positives[:, 0].copy(), positives[:, 1].copy(), empty, empty.copy())
    rng = np.random.default_rng(seed)
    width = int(math.ceil(TRUNCATION * k))

    def corrupt(queries, pool):
        cands = _nearest_candidates(embeddings, queries, pool, min(width, len(pool) - 1))
        if cands.shape[1] == 0:
            raise ValueError("negative sampling needs at least two entities per KG")
        replace_ = cands.shape[1] < k
        return np.stack([rng.choice(row, size=k, replace=replace_) for row in cands]).astype(np.int64)

    neg_target = corrupt(positives[:, 1], np.asarray(target_pool, dtype=np.int64))
    neg_source = corrupt(positives[:, 0], np.asarray(source_pool, dtype=np.int64))
    return NegativeSet(positives[:, 0].copy(), positives[:, 1].copy(), neg_source, neg_target)


def margin_loss(embeddings: torch.Tensor, positives: np.ndarray, negatives: NegativeSet, margin: float) -> torch.Tensor:
    """sum over (positive, negative) pairs of [d(pos) + margin - d(neg)]_+ with L2 distance."""
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    if not (np.array_equal(positives[:, 0], negatives.pos_source)
            and np.array_equal(positives[:, 1], negatives.pos_target)):
        raise ValueError("margin_loss: negatives were sampled for a different positive set")
    n, k = negatives.neg_target.shape
    if n == 0:
        return embeddings.sum() * 0.0

    def rows(ids):
        return embeddings.index_select(0, torch.as_tensor(np.asarray(ids).reshape(-1), dtype=torch.long))

    pos = row_l2_distance(rows(positives[:, 0]), rows(positives[:, 1]))
    src_rep = np.repeat(positives[:, 0], k)
    tgt_rep = np.repeat(positives[:, 1], k)
    neg_t = row_l2_distance(rows(src_rep), rows(negatives.neg_target)).reshape(n, k)
    neg_s = row_l2_distance(rows(negatives.neg_source), rows(tgt_rep)).reshape(n, k)
    loss = torch.relu(pos + margin - neg_t).sum() + torch.relu(pos + margin - neg_s).sum()
    return loss


def ema_update(teacher: ModelParams, student: ModelParams, momentum: float) -> ModelParams:
    """teacher <- m * teacher + (1 - m) * student, elementwise, in place."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    with torch.no_grad():
        for name, t in teacher.items():
            s = student[name]
            if t.shape != s.shape:
                raise ValueError(f"ema_update: shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
            t.mul_(momentum).add_(s.detach(), alpha=1.0 - momentum)
    return teacher


def ramp_up(epoch: int, ramp_epochs: int, lambda_max: float) -> float:
    """Gaussian ramp lambda_max * exp(-5 (1 - t)^2), t = min(epoch / ramp_epochs, 1)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if ramp_epochs == 0:
        return float(lambda_max)
    t = min(epoch / ramp_epochs, 1.0)
    return float(lambda_max * math.exp(-5.0 * (1.0 - t) ** 2))


def _validate(params: ModelParams, dataset: AlignmentDataset, index: GraphIndex):
    with torch.no_grad():
        emb = encode(params, index).numpy()
    st = evaluate(params, dataset, "valid", "st", embeddings=emb)
    ts = evaluate(params, dataset, "valid", "ts", embeddings=emb)
    return st.hits1, ts.hits1


def train(dataset: AlignmentDataset, encoder_config: EncoderConfig, config: TrainConfig,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None, progress: bool = False) -> TrainResult:
    """
    Mixture-teaching training loop; returns the final student.

    Per epoch: encode student (and teacher when pseudo mappings are due), margin loss
    on labeled (plus self-training) mappings, BDV + MDR pseudo mapping matrix from the
    teacher, pseudo-mapping CE loss, one Adam step on L_a + lambda * L_u, EMA update.
    Every validation_interval epochs the teacher is validated in both directions and
    beta is refreshed.
    """
    if config.no_rel and encoder_config.use_relations:
        encoder_config = replace(encoder_config, use_relations=False)
    index = GraphIndex.from_dataset(dataset)
    student = ModelParams.initialize(encoder_config, dataset.num_entities, dataset.num_relations, config.seed)
    teacher = student.clone(requires_grad=False)
    adam = AdamState(student.tensors, lr=config.lr)

    offset = dataset.target_offset
    labeled = mapping_array(dataset.train, offset)
    positives = labeled
    source_pool = np.arange(dataset.source_kg.num_entities, dtype=np.int64)
    target_pool = np.arange(dataset.target_kg.num_entities, dtype=np.int64) + offset
    unl_src = np.asarray(dataset.unlabeled_source, dtype=np.int64)
    unl_tgt = np.asarray(dataset.unlabeled_target, dtype=np.int64) + offset
    unl_src_t = torch.as_tensor(unl_src, dtype=torch.long)
    unl_tgt_t = torch.as_tensor(unl_tgt, dtype=torch.long)
    truth = _pseudo_truth(dataset, unl_src, unl_tgt)
    has_valid = len(dataset.valid) > 0

    beta = VoteWeight(1.0 if config.no_bdv else 0.5)
    negatives: Optional[NegativeSet] = None
    p_tilde: Optional[np.ndarray] = None
    pseudo_stats: List[Dict[str, float]] = []
    history: List[EpochRecord] = []
    best_hit1, rounds_without_gain, stopped = -1.0, 0, None

    logger.info("training %s: %d epochs, %d labeled mappings, %d/%d unlabeled entities",
                config.mode, config.epochs, len(labeled), len(unl_src), len(unl_tgt))
    epochs = tqdm(range(config.epochs), desc="MixTEA", disable=not progress)
    for epoch in epochs:
        try:
            with GradientTape(student.tensors) as tape:
                emb_stu = encode(student, index)

                if config.mode == "self_training_baseline" and epoch > 0 and epoch % config.pseudo_interval == 0:
                    positives = _self_training_positives(emb_stu, labeled, unl_src, unl_tgt, config.threshold)
                    negatives = None
                if negatives is None or epoch % config.neg_refresh_interval == 0:
                    negatives = sample_negatives(emb_stu.detach().numpy(), positives, config.neg_samples,
                                                 config.seed + epoch, source_pool, target_pool)
                    logger.debug("epoch %d: resampled negatives for %d positives", epoch + 1, len(positives))
                loss_a = margin_loss(emb_stu, positives, negatives, config.margin)

                lam = ramp_up(epoch, config.ramp_epochs, config.lambda_max)
                loss_u = torch.zeros((), dtype=emb_stu.dtype)
                if config.uses_pseudo_loss and len(unl_src) and len(unl_tgt):
                    if p_tilde is None or epoch % config.pseudo_interval == 0:
                        p_tilde, stats = _teacher_pseudo_matrix(teacher, index, unl_src_t, unl_tgt_t,
                                                                beta.beta, config.no_mdr, truth)
                        pseudo_stats.append({"epoch": epoch + 1, **stats})
                        logger.debug("epoch %d: pseudo mappings %s", epoch + 1, stats)
                    m_stu = cosine_sim_matrix(emb_stu.index_select(0, unl_src_t), emb_stu.index_select(0, unl_tgt_t))
                    loss_u = pseudo_loss(m_stu, p_tilde, config.temperature, config.target_temperature)

                total = loss_a + lam * loss_u
                if not bool(torch.isfinite(total)):
                    raise TrainingAborted(
                        f"non-finite loss at epoch {epoch + 1}: L_a={float(loss_a)}, L_u={float(loss_u)}, lambda={lam}"
                    )
            grads = tape.gradient(total)
            adam_step(student.tensors, grads, adam)
            ema_update(teacher, student, config.momentum)
        except (DiffCoreError, PseudoMapError) as e:
            raise TrainingAborted(f"numeric failure at epoch {epoch + 1}: {e}") from e

        record = EpochRecord(epoch + 1, loss_a.detach().item(), loss_u.detach().item(), lam, beta.beta)
        if has_valid and ((epoch + 1) % config.validation_interval == 0 or epoch + 1 == config.epochs):
            record.valid_hit1_st, record.valid_hit1_ts = _validate(teacher, dataset, index)
            if not config.no_bdv:
                beta = update_beta(record.valid_hit1_st, record.valid_hit1_ts)
            stu_st, stu_ts = _validate(student, dataset, index)
            logger.info(
                "epoch %d: L_a=%.4f L_u=%.4f lambda=%.4f beta=%.3f teacher valid Hit@1 st=%.4f ts=%.4f, student st=%.4f ts=%.4f",
                record.epoch, record.loss_a, record.loss_u, lam, beta.beta,
                record.valid_hit1_st, record.valid_hit1_ts, stu_st, stu_ts,
            )
            if config.patience:
                if stu_st > best_hit1:
                    best_hit1, rounds_without_gain = stu_st, 0
                else:
                    rounds_without_gain += 1
        history.append(record)
        if on_epoch:
            on_epoch(record)
        if config.patience and rounds_without_gain >= config.patience:
            stopped = epoch + 1
            logger.info("early stop at epoch %d (no validation gain in %d rounds)", stopped, config.patience)
            break

    return TrainResult(student, teacher, history, beta, pseudo_stats, p_tilde, stopped)


def _teacher_pseudo_matrix(teacher: ModelParams, index: GraphIndex, unl_src: torch.Tensor, unl_tgt: torch.Tensor,
                           beta: float, no_mdr: bool, truth: Dict[int, int]):
    with torch.no_grad():
        emb = encode(teacher, index)
        m_tea = cosine_sim_matrix(emb.index_select(0, unl_src), emb.index_select(0, unl_tgt)).numpy()
    p = bdv_fuse(m_tea, m_tea.T, beta)
    p_tilde = p if no_mdr else mdr_rectify(p)
    return p_tilde, vote_statistics(m_tea, m_tea.T, p_tilde, truth)


def _self_training_positives(emb: torch.Tensor, labeled: np.ndarray, unl_src: np.ndarray, unl_tgt: np.ndarray,
                             threshold: float) -> np.ndarray:
    with torch.no_grad():
        sims = cosine_sim_matrix(emb[torch.as_tensor(unl_src)], emb[torch.as_tensor(unl_tgt)]).numpy()
    proposals = threshold_self_training(sims, threshold, unl_src, unl_tgt)
    logger.debug("self-training proposed %d pseudo mappings", len(proposals))
    if not proposals:
        return labeled
    extra = np.array([(p.source, p.target) for p in proposals], dtype=np.int64)
    return np.concatenate([labeled, extra])


def _pseudo_truth(dataset: AlignmentDataset, unl_src: np.ndarray, unl_tgt: np.ndarray) -> Dict[int, int]:
    """Row -> column of the known counterpart among unlabeled entities (valid + test links)."""
    offset = dataset.target_offset
    row_of = {int(e): i for i, e in enumerate(unl_src)}
    col_of = {int(e): j for j, e in enumerate(unl_tgt)}
    truth = {}
    for m in tuple(dataset.valid) + tuple(dataset.test):
        i, j = row_of.get(m.source), col_of.get(m.target + offset)
        if i is not None and j is not None:
            truth[i] = j
    return truth
