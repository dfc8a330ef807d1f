import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# OpenEA V1 file names
SOURCE_TRIPLES = "rel_triples_1"
TARGET_TRIPLES = "rel_triples_2"
ENT_LINKS = "ent_links"
FOLD_DIR = "721_5fold"
SPLIT_FILES = ("train_links", "valid_links", "test_links")


class KGFormatError(ValueError):
    """Malformed or inconsistent OpenEA input."""


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


@dataclass(frozen=True)
class EntityMapping:
    source: int
    target: int


@dataclass
class UriTable:
    """URI <-> dense id table, ids handed out in first-appearance order."""

    uris: List[str] = field(default_factory=list)
    ids: Dict[str, int] = field(default_factory=dict)

    def add(self, uri: str) -> int:
        idx = self.ids.get(uri)
        if idx is None:
            idx = len(self.uris)
            self.ids[uri] = idx
            self.uris.append(uri)
        return idx

    def __len__(self):
        return len(self.uris)


@dataclass(frozen=True)
class KnowledgeGraph:
    """
    One KG with the incidence structures the encoder reads.

    Entity ids are local to this KG (0..n-1); relation ids live in the joint
    relation space shared by the source and target KG, so a target KG carries
    `relation_offset` = number of source relations.
    """

    name: str
    entity_uris: Tuple[str, ...]
    relation_uris: Tuple[str, ...]
    triples: Tuple[Triple, ...]
    neighbor_index: Tuple[Tuple[int, ...], ...]
    out_relations: Tuple[Tuple[int, ...], ...]
    in_relations: Tuple[Tuple[int, ...], ...]
    relation_offset: int = 0

    @property
    def num_entities(self) -> int:
        return len(self.entity_uris)

    @property
    def num_relations(self) -> int:
        return len(self.relation_uris)

    def entity_id(self, uri: str) -> int:
        try:
            return self.entity_ids()[uri]
        except KeyError:
            raise KGFormatError(f"unknown entity URI in {self.name}: {uri}") from None

    def entity_ids(self) -> Dict[str, int]:
        lookup = self.__dict__.get("_lookup")
        if lookup is None:
            lookup = {uri: i for i, uri in enumerate(self.entity_uris)}
            object.__setattr__(self, "_lookup", lookup)
        return lookup

    def to_triple_lines(self) -> List[str]:
        """Serialize back to OpenEA `h\\tr\\tt` lines."""
        lines = []
        for t in self.triples:
            rel_uri = self.relation_uris[t.relation - self.relation_offset]
            lines.append(f"{self.entity_uris[t.head]}\t{rel_uri}\t{self.entity_uris[t.tail]}")
        return lines


@dataclass(frozen=True)
class AlignmentDataset:
    source_kg: KnowledgeGraph
    target_kg: KnowledgeGraph
    train: Tuple[EntityMapping, ...]
    valid: Tuple[EntityMapping, ...]
    test: Tuple[EntityMapping, ...]
    unlabeled_source: Tuple[int, ...]
    unlabeled_target: Tuple[int, ...]

    @property
    def num_entities(self) -> int:
        return self.source_kg.num_entities + self.target_kg.num_entities

    @property
    def num_relations(self) -> int:
        return self.source_kg.num_relations + self.target_kg.num_relations

    @property
    def target_offset(self) -> int:
        """Offset of target entities in the joint entity id space."""
        return self.source_kg.num_entities

    def split(self, name: str) -> Tuple[EntityMapping, ...]:
        if name not in ("train", "valid", "test"):
            raise KGFormatError(f"unknown split: {name}")
        return getattr(self, name)


@dataclass(frozen=True)
class GraphIndex:
    """
    Joint (source + target) index arrays in global entity ids.

    edge_dst[i] aggregates from edge_src[i]; self-loops included.
    out_rel_entity/out_rel_id list (entity, relation) incidences with duplicates.
    """

    num_entities: int
    num_relations: int
    edge_dst: np.ndarray
    edge_src: np.ndarray
    out_rel_entity: np.ndarray
    out_rel_id: np.ndarray
    in_rel_entity: np.ndarray
    in_rel_id: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: AlignmentDataset) -> "GraphIndex":
        return cls.from_graphs(dataset.source_kg, dataset.target_kg)

    @classmethod
    def from_graphs(cls, *graphs: KnowledgeGraph) -> "GraphIndex":
        dst, src, out_e, out_r, in_e, in_r = [], [], [], [], [], []
        offset = 0
        num_relations = 0
        for kg in graphs:
            for e in range(kg.num_entities):
                for nb in kg.neighbor_index[e]:
                    dst.append(offset + e)
                    src.append(offset + nb)
                for r in kg.out_relations[e]:
                    out_e.append(offset + e)
                    out_r.append(r)
                for r in kg.in_relations[e]:
                    in_e.append(offset + e)
                    in_r.append(r)
            offset += kg.num_entities
            num_relations = max(num_relations, kg.relation_offset + kg.num_relations)

        def arr(values):
            return np.asarray(values, dtype=np.int64)

        return cls(offset, num_relations, arr(dst), arr(src), arr(out_e), arr(out_r), arr(in_e), arr(in_r))


def _read_lines(path: str) -> List[str]:
    if not os.path.isfile(path):
        raise KGFormatError(f"missing file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return f.read().splitlines()


def _split_fields(line: str, path: str, lineno: int, expected: int) -> List[str]:
    parts = line.split("\t")
    if len(parts) != expected or any(not p.strip() for p in parts):
        raise KGFormatError(
            f"{path}:{lineno}: expected {expected} tab-separated fields, got {len(parts)}: {line!r}"
        )
    return [p.strip() for p in parts]


def parse_triples(path: str, relation_offset: int = 0) -> Tuple[List[Triple], UriTable, UriTable]:
    """
    Parse an OpenEA relation-triple file.

    Args:
        path: file with `head\\trelation\\ttail` per line
        relation_offset: added to every relation id (joint relation space)

    Returns:
        (triples, entity table, relation table); ids are dense in first-appearance order
    """
    entities, relations = UriTable(), UriTable()
    triples = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        h, r, t = _split_fields(line, path, lineno, 3)
        hid = entities.add(h)
        rid = relations.add(r)
        tid = entities.add(t)
        triples.append(Triple(hid, relation_offset + rid, tid))
    if not triples:
        raise KGFormatError(f"empty triple file: {path}")
    return triples, entities, relations


def parse_links(path: str, uri_tables: Tuple[Dict[str, int], Dict[str, int]]) -> List[EntityMapping]:
    """Parse `source_uri\\ttarget_uri` lines; order and duplicates are preserved."""
    source_ids, target_ids = uri_tables
    mappings = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        s, t = _split_fields(line, path, lineno, 2)
        if s not in source_ids:
            raise KGFormatError(f"{path}:{lineno}: unresolvable source URI: {s}")
        if t not in target_ids:
            raise KGFormatError(f"{path}:{lineno}: unresolvable target URI: {t}")
        mappings.append(EntityMapping(source_ids[s], target_ids[t]))
    return mappings


def build_graph(name: str, triples: Sequence[Triple], entities: UriTable, relations: UriTable,
                relation_offset: int = 0) -> KnowledgeGraph:
    n = len(entities)
    neighbors = [{e} for e in range(n)]
    out_rel: List[List[int]] = [[] for _ in range(n)]
    in_rel: List[List[int]] = [[] for _ in range(n)]
    for t in triples:
        neighbors[t.head].add(t.tail)
        neighbors[t.tail].add(t.head)
        out_rel[t.head].append(t.relation)
        in_rel[t.tail].append(t.relation)
    return KnowledgeGraph(
        name=name,
        entity_uris=tuple(entities.uris),
        relation_uris=tuple(relations.uris),
        triples=tuple(triples),
        neighbor_index=tuple(tuple(sorted(nb)) for nb in neighbors),
        out_relations=tuple(tuple(r) for r in out_rel),
        in_relations=tuple(tuple(r) for r in in_rel),
        relation_offset=relation_offset,
    )


def load_graph(path: str, name: Optional[str] = None, relation_offset: int = 0) -> KnowledgeGraph:
    triples, entities, relations = parse_triples(path, relation_offset)
    return build_graph(name or os.path.basename(path), triples, entities, relations, relation_offset)


def _check_disjoint(splits: Dict[str, List[EntityMapping]]):
    names = list(splits)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            src = {m.source for m in splits[a]} & {m.source for m in splits[b]}
            tgt = {m.target for m in splits[a]} & {m.target for m in splits[b]}
            if src or tgt:
                raise KGFormatError(
                    f"overlapping splits {a}/{b}: {len(src)} shared source, {len(tgt)} shared target entities"
                )


def build_dataset(directory: str, fold: int = 1) -> AlignmentDataset:
    """
    Load an OpenEA V1 dataset directory and one of its 721_5fold splits.

    Args:
        directory: dataset root holding rel_triples_1/2 and 721_5fold/
        fold: 1-based fold index

    Returns:
        AlignmentDataset with unlabeled sets = all entities outside the train split
    """
    if fold < 1:
        raise KGFormatError(f"fold index must be >= 1, got {fold}")
    fold_path = os.path.join(directory, FOLD_DIR, str(fold))
    if not os.path.isdir(fold_path):
        raise KGFormatError(f"fold {fold} not found: {fold_path}")

    source = load_graph(os.path.join(directory, SOURCE_TRIPLES), "source")
    target = load_graph(os.path.join(directory, TARGET_TRIPLES), "target", relation_offset=source.num_relations)
    tables = (source.entity_ids(), target.entity_ids())

    splits = {name.split("_")[0]: parse_links(os.path.join(fold_path, name), tables) for name in SPLIT_FILES}
    _check_disjoint(splits)

    train_src = {m.source for m in splits["train"]}
    train_tgt = {m.target for m in splits["train"]}
    dataset = AlignmentDataset(
        source_kg=source,
        target_kg=target,
        train=tuple(splits["train"]),
        valid=tuple(splits["valid"]),
        test=tuple(splits["test"]),
        unlabeled_source=tuple(e for e in range(source.num_entities) if e not in train_src),
        unlabeled_target=tuple(e for e in range(target.num_entities) if e not in train_tgt),
    )
    logger.info(
        "loaded %s fold %d: %d/%d entities, %d/%d triples, splits %d/%d/%d",
        directory, fold, source.num_entities, target.num_entities,
        len(source.triples), len(target.triples),
        len(dataset.train), len(dataset.valid), len(dataset.test),
    )
    return dataset
