import csv
import logging
import os
from typing import Iterable, List, Optional, Sequence

import torch

from mixtea_encoder import EncoderConfig, ModelParams

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mixtea-checkpoint"
CHECKPOINT_VERSION = 1
METRICS_HEADER = ["epoch", "loss_a", "loss_u", "lambda", "beta", "valid_hit1_st", "valid_hit1_ts"]


class CheckpointError(RuntimeError):
    """Checkpoint missing, unreadable or incompatible with the dataset."""


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.10g}"


class MixTEAUtils:
    """Run-directory helper shared by the train and eval commands."""

    def __init__(self, output_dir: str = "output"):
        self.output_dir = output_dir
        os.makedirs(self.output_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def write_lines(self, name: str, lines: Iterable[str]) -> str:
        path = self.path(name)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for line in lines:
                f.write(line + "\n")
        return path

    def write_manifest(self, lines: Sequence[str]) -> str:
        """The manifest is a config file: rerunning `train --config run_manifest` reproduces the run."""
        return self.write_lines("run_manifest", ["# effective configuration (defaults + config file + flags)", *lines])

    def write_metrics(self, history) -> str:
        path = self.path("metrics.csv")
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            for r in history:
                writer.writerow([r.epoch, _fmt(r.loss_a), _fmt(r.loss_u), _fmt(r.lam), _fmt(r.beta),
                                 _fmt(r.valid_hit1_st), _fmt(r.valid_hit1_ts)])
        return path

    def write_report(self, reports, name: str = "report.txt") -> str:
        """Human tables followed by one machine line per report."""
        lines: List[str] = []
        for report in reports:
            lines.extend([report.as_table(), ""])
        lines.extend(report.as_line() for report in reports)
        return self.write_lines(name, lines)

    def save_checkpoint(self, params: ModelParams, name: str = "checkpoint") -> str:
        path = self.path(name)
        c = params.config
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "encoder": {"entity_dim": c.entity_dim, "relation_dim": c.relation_dim,
                        "num_layers": c.num_layers, "use_relations": c.use_relations},
            "tensors": {n: t.detach().clone() for n, t in params.items()},
        }, path)
        logger.info("saved checkpoint %s", path)
        return path


def load_checkpoint(path: str, num_entities: Optional[int] = None, num_relations: Optional[int] = None) -> ModelParams:
    """
    Load a checkpoint written by MixTEAUtils.save_checkpoint.

    When entity/relation counts are given, the embedding tables must match them.
    """
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu")
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a MixTEA checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')} (expected {CHECKPOINT_VERSION})")

    tensors = payload["tensors"]
    expected_rows = {"entity_emb": num_entities, "relation_emb": num_relations}
    for name, rows in expected_rows.items():
        if rows is not None and name in tensors and tensors[name].shape[0] != rows:
            raise CheckpointError(
                f"tensor {name} has {tensors[name].shape[0]} rows, dataset needs {rows}"
            )
    try:
        return ModelParams(EncoderConfig(**payload["encoder"]), tensors)
    except ValueError as e:
        raise CheckpointError(f"incompatible checkpoint {path}: {e}") from e
