"""Index layout of a graph for message passing: rows, relation types and directed messages."""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from scene_graph.main import FrameSceneGraph, Vocabulary
from video_graph.main import GLOBAL_ROOT, ROOT_LINK, SYNTHETIC_ROOT, NodeRef, VideoGraph, select_human_root

ROOT_LINK_KIND = -1
HOMOGENEOUS_RELATION = "edge"


class EncoderError(ValueError):
    """Base class for encoder configuration and layout failures."""


class UnmappedPredicate(EncoderError):
    pass


class NoHumanInFrame(EncoderError):
    pass


@dataclass(frozen=True)
class RelationSchema:
    """Relation types seen by the encoder; root links map to ``root_link``."""

    names: Tuple[str, ...]
    predicate_relation: Tuple[int, ...]
    root_link: int

    @property
    def count(self) -> int:
        return len(self.names)

    @classmethod
    def per_predicate(cls, vocab: Vocabulary) -> "RelationSchema":
        n = vocab.num_predicates
        return cls(tuple(vocab.predicate_classes) + (ROOT_LINK,), tuple(range(n)), n)

    @classmethod
    def homogeneous(cls, vocab: Vocabulary) -> "RelationSchema":
        return cls((HOMOGENEOUS_RELATION,), (0,) * vocab.num_predicates, 0)

    @classmethod
    def from_families(cls, vocab: Vocabulary, families: Dict[str, Sequence[str]]) -> "RelationSchema":
        names = list(families)
        if ROOT_LINK in names:
            raise EncoderError(f"'{ROOT_LINK}' is reserved and cannot name a predicate family")
        owner: Dict[str, int] = {}
        for r, family in enumerate(names):
            for predicate in families[family]:
                vocab.predicate_index(predicate)
                if predicate in owner:
                    raise EncoderError(f"Predicate {predicate!r} assigned to families "
                                       f"{names[owner[predicate]]!r} and {family!r}")
                owner[predicate] = r
        unmapped = [p for p in vocab.predicate_classes if p not in owner]
        if unmapped:
            raise UnmappedPredicate(f"Predicates without a family: {unmapped}")
        return cls(tuple(names) + (ROOT_LINK,),
                   tuple(owner[p] for p in vocab.predicate_classes), len(names))


@dataclass
class RelationMessages:
    """Directed messages dst ← src of one relation type (two per undirected edge)."""

    dst: np.ndarray
    src: np.ndarray
    # predicate index, or ROOT_LINK_KIND for root links
    edge_kind: np.ndarray
    incident: np.ndarray

    @property
    def count(self) -> int:
        return int(self.dst.size)


@dataclass
class GraphLayout:
    refs: List[NodeRef]
    entity_rows: np.ndarray
    entity_classes: np.ndarray
    entity_geometry: np.ndarray
    root_row: Optional[int]
    placeholder_rows: np.ndarray
    relations: List[RelationMessages]
    isolated: np.ndarray
    human_rows: np.ndarray
    frame_of_row: np.ndarray

    @property
    def node_count(self) -> int:
        return len(self.refs)

    @property
    def frame_count(self) -> int:
        return int(self.human_rows.size)

    def row_of(self, ref: NodeRef) -> int:
        return self.refs.index(NodeRef(*ref))

    @property
    def assembly_order(self) -> np.ndarray:
        """Row r of the node matrix is row assembly_order[r] of [entities; root; placeholders]."""
        order = np.empty(self.node_count, dtype=np.int64)
        order[self.entity_rows] = np.arange(self.entity_rows.size)
        offset = self.entity_rows.size
        if self.root_row is not None:
            order[self.root_row] = offset
            offset += 1
        order[self.placeholder_rows] = offset + np.arange(self.placeholder_rows.size)
        return order


def _geometry(bbox: Tuple[float, float, float, float]) -> List[float]:
    x, y, w, h = bbox
    return [x, y, w, h, w * h]


def _assemble(refs: List[NodeRef], frames: Sequence[FrameSceneGraph], human_ids: Sequence[int],
              links: Sequence[Tuple[NodeRef, NodeRef]], schema: RelationSchema) -> GraphLayout:
    row = {ref: i for i, ref in enumerate(refs)}
    entity_rows, classes, geometry = [], [], []
    placeholders = []
    frame_of_row = np.full(len(refs), -1, dtype=np.int64)
    for ref in refs:
        if ref == GLOBAL_ROOT:
            continue
        frame_of_row[row[ref]] = ref.frame
        if ref.node_id == SYNTHETIC_ROOT:
            placeholders.append(row[ref])
            continue
        node = frames[ref.frame].node(ref.node_id)
        entity_rows.append(row[ref])
        classes.append(node.class_index)
        geometry.append(_geometry(node.bbox))

    per_relation: List[Tuple[List[int], List[int], List[int]]] = [([], [], []) for _ in schema.names]

    def add(r: int, a: int, b: int, kind: int) -> None:
        dst, src, kinds = per_relation[r]
        dst.extend((a, b))
        src.extend((b, a))
        kinds.extend((kind, kind))

    for i, frame in enumerate(frames):
        for edge in frame.edges:
            add(schema.predicate_relation[edge.predicate_index],
                row[NodeRef(i, edge.subject_id)], row[NodeRef(i, edge.object_id)], edge.predicate_index)
    for human, root in links:
        add(schema.root_link, row[human], row[root], ROOT_LINK_KIND)

    relations = []
    touched = np.zeros(len(refs), dtype=bool)
    for dst, src, kinds in per_relation:
        dst_arr = np.asarray(dst, dtype=np.int64)
        touched[dst_arr] = True
        relations.append(RelationMessages(dst_arr, np.asarray(src, dtype=np.int64),
                                          np.asarray(kinds, dtype=np.int64), np.unique(dst_arr)))

    root_row = row.get(GLOBAL_ROOT)
    return GraphLayout(
        refs=refs,
        entity_rows=np.asarray(entity_rows, dtype=np.int64),
        entity_classes=np.asarray(classes, dtype=np.int64),
        entity_geometry=np.asarray(geometry, dtype=np.float64).reshape(-1, 5),
        root_row=root_row,
        placeholder_rows=np.asarray(placeholders, dtype=np.int64),
        relations=relations,
        isolated=np.flatnonzero(~touched),
        human_rows=np.asarray([row[NodeRef(i, h)] for i, h in enumerate(human_ids)], dtype=np.int64),
        frame_of_row=frame_of_row,
    )


def layout_video_graph(vg: VideoGraph, schema: RelationSchema) -> GraphLayout:
    refs = vg.node_refs()
    links = [(NodeRef(i, h), GLOBAL_ROOT) for i, h in vg.root_edges]
    return _assemble(refs, vg.frames, vg.human_root_ids, links, schema)


def layout_frame_graph(frame: FrameSceneGraph, vocab: Vocabulary, schema: RelationSchema) -> GraphLayout:
    """Layout of one frame on its own: no global root, no root links."""
    human = select_human_root(frame, vocab)
    if human is None:
        raise NoHumanInFrame(f"Frame {frame.frame_id} has no human node to read out")
    refs = [NodeRef(0, n.node_id) for n in frame.nodes]
    return _assemble(refs, [frame], [human], [], schema)
