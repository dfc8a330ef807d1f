import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch

from mixtea_diff import (
    DTYPE, DiffCoreError, record_op, concat_columns, elu, leaky_relu, matmul,
    row_softmax, segment_mean, segment_mean_flat, xavier_init,
)
from mixtea_kg import GraphIndex

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    entity_dim: int = 256
    relation_dim: int = 128
    num_layers: int = 2
    use_relations: bool = True

    def __post_init__(self):
        if self.entity_dim <= 0 or self.relation_dim <= 0:
            raise ValueError(f"embedding dims must be positive, got d_e={self.entity_dim}, d_r={self.relation_dim}")
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")

    @property
    def num_features(self) -> int:
        """|K|: one per GAT layer plus r+ and r- unless relations are ablated."""
        return self.num_layers + (2 if self.use_relations else 0)

    @property
    def output_dim(self) -> int:
        return self.num_layers * self.entity_dim + (2 * self.relation_dim if self.use_relations else 0)


class ModelParams:
    """
    All trainable tensors of one encoder, keyed by stable names:

        entity_emb            (num_entities, d_e)
        relation_emb          (num_relations, d_r)
        gat_weight.<l>        (d_e, d_e)
        attn_vector.<l>       (2*d_e, 1)
        fusion_logits         (1, |K|)
    """

    def __init__(self, config: EncoderConfig, tensors: Dict[str, torch.Tensor]):
        self.config = config
        self.tensors = tensors
        self._check_shapes()

    @classmethod
    def initialize(cls, config: EncoderConfig, num_entities: int, num_relations: int, seed: int) -> "ModelParams":
        tensors = {
            "entity_emb": xavier_init(num_entities, config.entity_dim, seed),
            "relation_emb": xavier_init(max(num_relations, 1), config.relation_dim, seed + 1),
        }
        for layer in range(config.num_layers):
            tensors[f"gat_weight.{layer}"] = xavier_init(config.entity_dim, config.entity_dim, seed + 2 + 2 * layer)
            tensors[f"attn_vector.{layer}"] = xavier_init(2 * config.entity_dim, 1, seed + 3 + 2 * layer)
        tensors["fusion_logits"] = torch.zeros(1, config.num_features, dtype=DTYPE)
        for t in tensors.values():
            t.requires_grad_(True)
        return cls(config, tensors)

    def _check_shapes(self):
        c = self.config
        expected = {
            "relation_emb": (None, c.relation_dim),
            "entity_emb": (None, c.entity_dim),
            "fusion_logits": (1, c.num_features),
        }
        for layer in range(c.num_layers):
            expected[f"gat_weight.{layer}"] = (c.entity_dim, c.entity_dim)
            expected[f"attn_vector.{layer}"] = (2 * c.entity_dim, 1)
        missing = set(expected) - set(self.tensors)
        if missing:
            raise DiffCoreError(f"missing parameter tensors: {sorted(missing)}")
        for name, (rows, cols) in expected.items():
            shape = tuple(self.tensors[name].shape)
            if len(shape) != 2 or (rows is not None and shape[0] != rows) or shape[1] != cols:
                raise DiffCoreError(f"parameter {name} has shape {shape}, expected ({rows}, {cols})")

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def clone(self, requires_grad: bool = True) -> "ModelParams":
        tensors = {n: t.detach().clone().requires_grad_(requires_grad) for n, t in self.tensors.items()}
        return ModelParams(self.config, tensors)

    def detached(self) -> Dict[str, torch.Tensor]:
        return {n: t.detach() for n, t in self.tensors.items()}


def gat_layer(h_prev: torch.Tensor, index: GraphIndex, weight: torch.Tensor, attn: torch.Tensor) -> torch.Tensor:
    """
    One single-head GAT layer over the joint graph.

    z = H W;  e_ij = LeakyReLU(a^T [z_i ; z_j]);  alpha_i. = softmax over N_i;
    h_i = ELU(sum_j alpha_ij z_j)
    """
    if h_prev.shape[0] != index.num_entities:
        raise DiffCoreError(f"gat_layer: {h_prev.shape[0]} rows for {index.num_entities} entities")
    dim = weight.shape[1]
    if attn.shape != (2 * dim, 1):
        raise DiffCoreError(f"gat_layer: attention vector shape {tuple(attn.shape)}, expected ({2 * dim}, 1)")
    if np.bincount(index.edge_dst, minlength=index.num_entities).min(initial=1) == 0:
        raise RuntimeError("gat_layer: entity with empty neighbor list (self-loop missing)")

    z = matmul(h_prev, weight)
    alpha = _edge_attention(z, index, attn)
    dst = torch.as_tensor(index.edge_dst, dtype=torch.long)
    src = torch.as_tensor(index.edge_src, dtype=torch.long)
    agg = torch.zeros_like(z).index_add(0, dst, alpha.unsqueeze(1) * z.index_select(0, src))
    return record_op("gat_layer", (h_prev, weight, attn), elu(agg))


def _edge_attention(z: torch.Tensor, index: GraphIndex, attn: torch.Tensor) -> torch.Tensor:
    """alpha per edge, normalized over each destination's neighbor set."""
    dim = z.shape[1]
    dst = torch.as_tensor(index.edge_dst, dtype=torch.long)
    src = torch.as_tensor(index.edge_src, dtype=torch.long)
    score_dst = matmul(z, attn[:dim])
    score_src = matmul(z, attn[dim:])
    logits = leaky_relu(score_dst.index_select(0, dst) + score_src.index_select(0, src)).squeeze(1)

    seg_max = torch.full((index.num_entities,), -torch.inf, dtype=logits.dtype)
    seg_max = seg_max.scatter_reduce(0, dst, logits.detach(), reduce="amax", include_self=True)
    weights = torch.exp(logits - seg_max.index_select(0, dst))
    denom = torch.zeros(index.num_entities, dtype=logits.dtype).index_add(0, dst, weights)
    return weights / denom.index_select(0, dst)


def attention_weights(h_prev: torch.Tensor, index: GraphIndex, weight: torch.Tensor, attn: torch.Tensor) -> np.ndarray:
    """alpha per edge (aligned with index.edge_dst/edge_src), for inspection."""
    with torch.no_grad():
        return _edge_attention(h_prev @ weight, index, attn).numpy()


def relation_features(relation_emb: torch.Tensor, out_relations, in_relations) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Mean outward (H^{r+}) and inward (H^{r-}) relation embeddings per entity.

    Accepts either per-entity id lists or a GraphIndex (for the latter pass it as
    both arguments).
    """
    if isinstance(out_relations, GraphIndex):
        idx = out_relations
        h_out = segment_mean_flat(relation_emb, idx.out_rel_entity, idx.out_rel_id, idx.num_entities)
        h_in = segment_mean_flat(relation_emb, idx.in_rel_entity, idx.in_rel_id, idx.num_entities)
        return h_out, h_in
    return segment_mean(relation_emb, out_relations), segment_mean(relation_emb, in_relations)


def fuse(features: Sequence[torch.Tensor], fusion_logits: torch.Tensor) -> torch.Tensor:
    """Concatenate softmax(w)_k * feature_k in order."""
    if fusion_logits.dim() == 1:
        fusion_logits = fusion_logits.unsqueeze(0)
    if len(features) != fusion_logits.shape[1]:
        raise DiffCoreError(f"fuse: {len(features)} features for {fusion_logits.shape[1]} fusion weights")
    w = row_softmax(fusion_logits)
    return concat_columns([w[0, k] * f for k, f in enumerate(features)])


def encode(params: ModelParams, index: GraphIndex) -> torch.Tensor:
    """Final embeddings for every entity, rows in global id order."""
    c = params.config
    h = params["entity_emb"]
    if h.shape[0] != index.num_entities:
        raise DiffCoreError(f"encode: entity_emb has {h.shape[0]} rows, graph has {index.num_entities} entities")
    features: List[torch.Tensor] = []
    for layer in range(c.num_layers):
        h = gat_layer(h, index, params[f"gat_weight.{layer}"], params[f"attn_vector.{layer}"])
        features.append(h)
    if c.use_relations:
        if params["relation_emb"].shape[0] < index.num_relations:
            raise DiffCoreError(
                f"encode: relation_emb has {params['relation_emb'].shape[0]} rows, graph uses {index.num_relations}"
            )
        h_out, h_in = relation_features(params["relation_emb"], index, index)
        features.extend([h_out, h_in])
    return fuse(features, params["fusion_logits"])
