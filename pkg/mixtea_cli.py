#!/usr/bin/env python3
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence

import click
import networkx as nx
import numpy as np

from mixtea_encoder import EncoderConfig
from mixtea_eval import DIRECTIONS, EvaluationError, MetricsReport, dump_rankings, evaluate
from mixtea_kg import (
    ENT_LINKS, FOLD_DIR, SOURCE_TRIPLES, SPLIT_FILES, TARGET_TRIPLES, KGFormatError, build_dataset,
)
from mixtea_pseudo import dump_pseudo_matrix
from mixtea_train import MODES, TrainConfig, TrainingAborted, train
from mixtea_utils import CheckpointError, MixTEAUtils, load_checkpoint

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
ABLATIONS = ("no_rel", "no_lu", "no_bdv", "no_mdr")


class ConfigError(ValueError):
    """Bad configuration file, flag or value."""


@dataclass(frozen=True)
class RunConfig:
    """
    Effective configuration of one run.

    Search ranges used for tuning (recorded here, no sweep tooling):
    num_layers 1-4, momentum {0.9, 0.99, 0.999}, margin {1, 2, 3},
    neg_samples {10, 20, 30}, entity_dim {128, 256}.
    """

    dataset_dir: str
    output_dir: str
    fold: int = 1
    mode: str = "mixtea"
    entity_dim: int = 256
    relation_dim: int = 128
    num_layers: int = 2
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
    threshold: float = 0.9
    no_rel: bool = False
    no_lu: bool = False
    no_bdv: bool = False
    no_mdr: bool = False
    dump_pseudo: bool = False

    @classmethod
    def INPUT_TYPES(cls):
        return {
            "required": {
                "dataset_dir": ("STRING", {"default": ""}),
                "output_dir": ("STRING", {"default": "output"}),
            },
            "optional": {
                "fold": ("INT", {"default": 1, "min": 1, "max": 100}),
                "mode": (list(MODES), {"default": "mixtea"}),
                "entity_dim": ("INT", {"default": 256, "min": 1, "max": 4096}),
                "relation_dim": ("INT", {"default": 128, "min": 1, "max": 4096}),
                "num_layers": ("INT", {"default": 2, "min": 1, "max": 8}),
                "margin": ("FLOAT", {"default": 2.0, "min": 1e-6, "max": 100.0}),
                "momentum": ("FLOAT", {"default": 0.9, "min": 0.0, "max": 0.999999}),
                "neg_samples": ("INT", {"default": 10, "min": 1, "max": 1000}),
                "lambda_max": ("FLOAT", {"default": 1.0, "min": 0.0, "max": 1000.0}),
                "ramp_epochs": ("INT", {"default": 50, "min": 0, "max": 100000}),
                "epochs": ("INT", {"default": 200, "min": 0, "max": 100000}),
                "lr": ("FLOAT", {"default": 0.005, "min": 1e-9, "max": 10.0}),
                "seed": ("INT", {"default": 0, "min": 0, "max": 2**31 - 1}),
                "validation_interval": ("INT", {"default": 10, "min": 1, "max": 100000}),
                "neg_refresh_interval": ("INT", {"default": 10, "min": 1, "max": 100000}),
                "pseudo_interval": ("INT", {"default": 1, "min": 1, "max": 100000}),
                "temperature": ("FLOAT", {"default": 1.0, "min": 1e-6, "max": 1000.0}),
                "target_temperature": ("FLOAT", {"default": 1.0, "min": 1e-6, "max": 1000.0}),
                "patience": ("INT", {"default": 0, "min": 0, "max": 100000}),
                # self_training_baseline only
                "threshold": ("FLOAT", {"default": 0.9, "min": 1e-6, "max": 1.0}),
                "no_rel": ("BOOLEAN", {"default": False}),
                "no_lu": ("BOOLEAN", {"default": False}),
                "no_bdv": ("BOOLEAN", {"default": False}),
                "no_mdr": ("BOOLEAN", {"default": False}),
                "dump_pseudo": ("BOOLEAN", {"default": False}),
            },
        }

    @classmethod
    def schema(cls) -> Dict[str, tuple]:
        types = cls.INPUT_TYPES()
        return {**types["required"], **types["optional"]}

    @classmethod
    def from_values(cls, values: Dict[str, str]) -> "RunConfig":
        """Parse raw string values (config file + flags) against the schema."""
        schema = cls.schema()
        unknown = sorted(set(values) - set(schema))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        parsed = {}
        for key, (kind, opts) in schema.items():
            raw = values.get(key)
            parsed[key] = opts["default"] if raw is None else _parse_value(key, kind, opts, raw)
        if not parsed["dataset_dir"]:
            raise ConfigError("dataset_dir is required")
        if parsed["mode"] != "self_training_baseline" and parsed["threshold"] != schema["threshold"][1]["default"]:
            logger.warning("threshold=%s is ignored outside mode = self_training_baseline", parsed["threshold"])
        return cls(**parsed)

    def to_lines(self) -> List[str]:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return lines

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.entity_dim, self.relation_dim, self.num_layers, use_relations=not self.no_rel)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})


def _parse_value(key: str, kind, opts: dict, raw: str):
    raw = raw.strip()
    try:
        if isinstance(kind, list):
            if raw not in kind:
                raise ConfigError(f"{key}: expected one of {kind}, got {raw!r}")
            return raw
        if kind == "STRING":
            return raw
        if kind == "BOOLEAN":
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        value = int(raw) if kind == "INT" else float(raw)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    if not opts["min"] <= value <= opts["max"]:
        raise ConfigError(f"{key}: {value} outside [{opts['min']}, {opts['max']}]")
    return value


def load_config_file(path: str) -> Dict[str, str]:
    """Read `key = value` lines; `#` starts a comment."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            values[key] = value
    return values


def resolve_config(config_path: Optional[str], overrides: Dict[str, Optional[str]],
                   ablate: Sequence[str] = ()) -> RunConfig:
    """defaults < config file < flags (ablation flags last)."""
    values = load_config_file(config_path) if config_path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    for name in ablate:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
        values[name] = "true"
    return RunConfig.from_values(values)


def _summary(title: str, rows: Sequence[tuple]) -> str:
    width = max(len(k) for k, _ in rows)
    return "\n".join([f"=== {title} ===", *(f"{k.ljust(width)}  {v}" for k, v in rows)])


def cmd_train(config_path: Optional[str], overrides: Dict[str, Optional[str]], ablate: Sequence[str] = (),
              progress: bool = True) -> int:
    config = resolve_config(config_path, overrides, ablate)
    try:
        train_config = config.train_config()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    utils = MixTEAUtils(config.output_dir)
    utils.write_manifest(config.to_lines())

    dataset = build_dataset(config.dataset_dir, config.fold)
    result = train(dataset, config.encoder_config(), train_config, progress=progress)

    utils.save_checkpoint(result.student)
    utils.write_metrics(result.history)
    reports = [evaluate(result.student, dataset, "test", direction) for direction in DIRECTIONS]
    utils.write_report(reports)
    dump_rankings(reports[0].rankings, utils.path("rankings.tsv"))
    if config.dump_pseudo and result.pseudo_matrix is not None:
        dump_pseudo_matrix(result.pseudo_matrix, utils.path("pseudo_mappings.tsv"),
                           dataset.unlabeled_source, dataset.unlabeled_target)

    st = reports[0]
    click.echo(_summary("MixTEA train: summary", [
        ("mode", config.mode + "".join(f" +{a}" for a in ABLATIONS if getattr(config, a))),
        ("epochs run", str(len(result.history))),
        ("final beta", f"{result.beta.beta:.3f}"),
        ("test Hits@1", f"{st.hits1:.4f}"),
        ("test Hits@5", f"{st.hits5:.4f}"),
        ("test MRR", f"{st.mrr:.4f}"),
        ("output", config.output_dir),
    ]))
    return EXIT_OK


def cmd_eval(checkpoint: str, dataset_dir: str, fold: int = 1, split: str = "test", direction: str = "st",
             output_dir: Optional[str] = None) -> MetricsReport:
    dataset = build_dataset(dataset_dir, fold)
    params = load_checkpoint(checkpoint, dataset.num_entities, dataset.num_relations)
    report = evaluate(params, dataset, split, direction)
    utils = MixTEAUtils(output_dir or os.path.dirname(os.path.abspath(checkpoint)))
    utils.write_report([report], name=f"eval_{split}_{direction}.txt")
    dump_rankings(report.rankings, utils.path(f"rankings_{split}_{direction}.tsv"))
    click.echo(report.as_table())
    click.echo(report.as_line())
    return report


def cmd_gen_synthetic(n_entities: int, n_relations: int, avg_degree: float, seed: int, out_dir: str,
                      train_ratio: float = 0.2, valid_ratio: float = 0.1, folds: int = 5) -> str:
    """
    Random KG plus an id-permuted isomorphic copy, in OpenEA layout.

    The true alignment is the generating permutation (ent_links).
    """
    if n_entities < 3 or n_relations < 1 or folds < 1:
        raise ConfigError(f"degenerate sizes: n_entities={n_entities}, n_relations={n_relations}, folds={folds}")
    n_edges = int(round(n_entities * avg_degree / 2))
    if avg_degree <= 0 or n_edges > n_entities * (n_entities - 1) // 2:
        raise ConfigError(f"average degree {avg_degree} impossible for {n_entities} entities")
    n_train = int(round(n_entities * train_ratio))
    n_valid = int(round(n_entities * valid_ratio))
    if n_train < 1 or n_valid < 0 or n_train + n_valid >= n_entities:
        raise ConfigError(f"split ratios {train_ratio}/{valid_ratio} leave no train or test links")

    rng = np.random.default_rng(seed)
    graph = nx.gnm_random_graph(n_entities, n_edges, seed=seed)
    for node in sorted(nx.isolates(graph)):
        other = int(rng.integers(n_entities - 1))
        graph.add_edge(node, other if other < node else other + 1)

    triples = []
    for u, v in sorted(graph.edges()):
        h, t = (u, v) if rng.random() < 0.5 else (v, u)
        triples.append((h, int(rng.integers(n_relations)), t))

    ent_perm = rng.permutation(n_entities)
    rel_perm = rng.permutation(n_relations)

    def src_ent(e):
        return f"http://kg1.example/entity/{e}"

    def tgt_ent(e):
        return f"http://kg2.example/entity/{ent_perm[e]}"

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, SOURCE_TRIPLES), "w", encoding="utf-8") as f:
        for h, r, t in triples:
            f.write(f"{src_ent(h)}\thttp://kg1.example/relation/{r}\t{src_ent(t)}\n")
    with open(os.path.join(out_dir, TARGET_TRIPLES), "w", encoding="utf-8") as f:
        for h, r, t in sorted(triples, key=lambda x: (ent_perm[x[0]], ent_perm[x[2]], rel_perm[x[1]])):
            f.write(f"{tgt_ent(h)}\thttp://kg2.example/relation/{rel_perm[r]}\t{tgt_ent(t)}\n")

    links = [f"{src_ent(e)}\t{tgt_ent(e)}" for e in range(n_entities)]
    with open(os.path.join(out_dir, ENT_LINKS), "w", encoding="utf-8") as f:
        f.write("\n".join(links) + "\n")
    for fold in range(1, folds + 1):
        order = rng.permutation(n_entities)
        parts = (order[:n_train], order[n_train:n_train + n_valid], order[n_train + n_valid:])
        fold_dir = os.path.join(out_dir, FOLD_DIR, str(fold))
        os.makedirs(fold_dir, exist_ok=True)
        for name, part in zip(SPLIT_FILES, parts):
            with open(os.path.join(fold_dir, name), "w", encoding="utf-8") as f:
                f.writelines(links[e] + "\n" for e in part)

    click.echo(_summary("MixTEA gen-synthetic", [
        ("entities/side", str(n_entities)),
        ("relations/side", str(n_relations)),
        ("triples/side", str(len(triples))),
        ("splits", f"{n_train}/{n_valid}/{n_entities - n_train - n_valid} x {folds} folds"),
        ("output", out_dir),
    ]))
    return out_dir


def _schema_options(func):
    """One `--key value` option per schema key."""
    for key in reversed(list(RunConfig.schema())):
        func = click.option(f"--{key.replace('_', '-')}", key, default=None, metavar="VALUE",
                            help=f"override `{key}`")(func)
    return func


@click.group()
@click.option("--log-level", default="INFO", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"]))
def cli(log_level):
    """MixTEA semi-supervised entity alignment."""
    logging.basicConfig(level=getattr(logging, log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="key = value config file (a run_manifest works too)")
@click.option("--ablate", multiple=True, type=click.Choice(ABLATIONS), help="ablation variant, repeatable")
@click.option("--quiet", is_flag=True, help="no progress bar")
@_schema_options
def train_command(config_path, ablate, quiet, **overrides):
    """Train a model and write checkpoint, metrics.csv, report.txt and run_manifest."""
    return cmd_train(config_path, overrides, ablate, progress=not quiet)


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--dataset-dir", required=True, type=click.Path(file_okay=False))
@click.option("--fold", default=1, type=int)
@click.option("--split", default="test", type=click.Choice(["train", "valid", "test"]))
@click.option("--direction", default="st", type=click.Choice(DIRECTIONS))
@click.option("--output-dir", default=None, type=click.Path(file_okay=False))
def eval_command(checkpoint, dataset_dir, fold, split, direction, output_dir):
    """Evaluate a checkpoint on one split and direction."""
    cmd_eval(checkpoint, dataset_dir, fold, split, direction, output_dir)
    return EXIT_OK


@cli.command("gen-synthetic")
@click.option("--n-entities", default=100, type=int)
@click.option("--n-relations", default=10, type=int)
@click.option("--avg-degree", default=5.0, type=float)
@click.option("--seed", default=0, type=int)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--train-ratio", default=0.2, type=float)
@click.option("--valid-ratio", default=0.1, type=float)
@click.option("--folds", default=5, type=int)
def gen_synthetic_command(n_entities, n_relations, avg_degree, seed, out_dir, train_ratio, valid_ratio, folds):
    """Write a synthetic isomorphic KG pair in OpenEA layout."""
    cmd_gen_synthetic(n_entities, n_relations, avg_degree, seed, out_dir, train_ratio, valid_ratio, folds)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Exit codes: 0 success, 1 usage/config error, 2 runtime failure."""
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name="mixtea",
                          standalone_mode=False)
        return result if isinstance(result, int) else EXIT_OK
    except (click.ClickException, click.Abort, ConfigError) as e:
        message = e.format_message() if isinstance(e, click.ClickException) else str(e)
        click.echo(f"usage error: {message}", err=True)
        return EXIT_USAGE
    except (KGFormatError, CheckpointError, EvaluationError, TrainingAborted, OSError, ValueError) as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
