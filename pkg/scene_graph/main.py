#!/usr/bin/env python3
"""
Scene Graph Core
Frame-level scene-graph data model, vocabularies and JSON parsing.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, NamedTuple, Optional, Tuple, Union

logger = logging.getLogger(__name__)

BBOX_EPSILON = 1e-6
DEFAULT_HUMAN_CLASSES = ("person",)


class SceneGraphError(ValueError):
    """Base class for scene-graph validation failures."""


class MalformedDocument(SceneGraphError):
    pass


class DuplicateClass(SceneGraphError):
    pass


class UnknownHumanClass(SceneGraphError):
    pass


class UnknownClass(SceneGraphError):
    pass


class UnknownPredicate(UnknownClass):
    pass


class DanglingEdge(SceneGraphError):
    pass


class DuplicateNodeId(SceneGraphError):
    pass


class MalformedBBox(SceneGraphError):
    pass


class SelfLoopEdge(SceneGraphError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Ordered object and predicate classes; index = position in the list."""

    object_classes: Tuple[str, ...]
    predicate_classes: Tuple[str, ...]
    human_class_names: FrozenSet[str] = frozenset(DEFAULT_HUMAN_CLASSES)
    _object_index: Dict[str, int] = field(init=False, repr=False, compare=False)
    _predicate_index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for kind, names in (("object", self.object_classes), ("predicate", self.predicate_classes)):
            seen = set()
            for name in names:
                if name in seen:
                    raise DuplicateClass(f"Duplicate {kind} class: {name!r}")
                seen.add(name)
        missing = sorted(set(self.human_class_names) - set(self.object_classes))
        if missing:
            raise UnknownHumanClass(f"Human classes not in object classes: {missing}")
        object.__setattr__(self, "_object_index", {n: i for i, n in enumerate(self.object_classes)})
        object.__setattr__(self, "_predicate_index", {n: i for i, n in enumerate(self.predicate_classes)})

    @property
    def num_objects(self) -> int:
        return len(self.object_classes)

    @property
    def num_predicates(self) -> int:
        return len(self.predicate_classes)

    @property
    def root_class_index(self) -> int:
        """Reserved class index of the video-level global root."""
        return len(self.object_classes)

    @property
    def human_class_indices(self) -> FrozenSet[int]:
        return frozenset(self._object_index[n] for n in self.human_class_names)

    def object_index(self, name: str) -> int:
        try:
            return self._object_index[name]
        except KeyError:
            raise UnknownClass(f"Unknown object class: {name!r}") from None

    def predicate_index(self, name: str) -> int:
        try:
            return self._predicate_index[name]
        except KeyError:
            raise UnknownPredicate(f"Unknown predicate: {name!r}") from None

    def is_human(self, class_index: int) -> bool:
        return 0 <= class_index < len(self.object_classes) and \
            self.object_classes[class_index] in self.human_class_names

    def to_doc(self) -> Dict[str, Any]:
        return {
            "objects": list(self.object_classes),
            "predicates": list(self.predicate_classes),
            "human_classes": sorted(self.human_class_names),
        }


@dataclass(frozen=True)
class EntityNode:
    """One detected entity: class index plus a normalized (x, y, w, h) box."""

    node_id: int
    class_index: int
    bbox: Tuple[float, float, float, float]

    @property
    def area(self) -> float:
        return self.bbox[2] * self.bbox[3]


@dataclass(frozen=True)
class RelationEdge:
    # Triplet order is annotation metadata; message passing treats edges as undirected.
    subject_id: int
    predicate_index: int
    object_id: int


@dataclass(frozen=True)
class FrameSceneGraph:
    frame_id: str
    nodes: Tuple[EntityNode, ...]
    edges: Tuple[RelationEdge, ...]

    def node(self, node_id: int) -> EntityNode:
        for node in self.nodes:
            if node.node_id == node_id:
                return node
        raise KeyError(node_id)

    @property
    def node_ids(self) -> Tuple[int, ...]:
        return tuple(n.node_id for n in self.nodes)


class FrameStats(NamedTuple):
    node_count: int
    edge_count: int
    human_count: int


def parse_vocabulary(doc: Union[Dict[str, Any], str, Path]) -> Vocabulary:
    """Build a Vocabulary from a parsed JSON document (or a path to one)."""
    if isinstance(doc, (str, Path)):
        doc = _read_json(Path(doc))
    if not isinstance(doc, dict):
        raise MalformedDocument("Vocabulary document must be a JSON object")

    objects = _string_list(doc, "objects")
    predicates = _string_list(doc, "predicates")
    humans = _string_list(doc, "human_classes") if "human_classes" in doc else list(DEFAULT_HUMAN_CLASSES)

    vocab = Vocabulary(tuple(objects), tuple(predicates), frozenset(humans))
    logger.debug(f"Vocabulary: {vocab.num_objects} objects, {vocab.num_predicates} predicates")
    return vocab


def parse_frame_graph(doc: Dict[str, Any], vocab: Vocabulary) -> FrameSceneGraph:
    """Validate a frame document and resolve class names to indices.

    Boxes are normalized by the optional ``width``/``height`` keys; without
    them the coordinates must already lie in [0, 1].
    """
    if not isinstance(doc, dict):
        raise MalformedDocument("Frame document must be a JSON object")
    frame_id = doc.get("frame_id")
    if not isinstance(frame_id, str):
        raise MalformedDocument("Frame document needs a string 'frame_id'")

    missing = [key for key in ("objects", "relationships") if key not in doc]
    if missing:
        raise MalformedDocument(f"Frame {frame_id}: missing required key(s) {missing}")
    objects = doc["objects"]
    relationships = doc["relationships"]
    if not isinstance(objects, list) or not isinstance(relationships, list):
        raise MalformedDocument(f"Frame {frame_id}: 'objects' and 'relationships' must be arrays")

    scale = _image_scale(doc, frame_id)

    nodes: List[EntityNode] = []
    seen_ids = set()
    for position, obj in enumerate(objects):
        if not isinstance(obj, dict):
            raise MalformedDocument(f"Frame {frame_id}: object #{position} is not an object")
        node_id = obj.get("id")
        if not _is_int(node_id) or node_id < 0:
            raise MalformedDocument(f"Frame {frame_id}: object #{position} needs a non-negative integer 'id'")
        if node_id in seen_ids:
            raise DuplicateNodeId(f"Frame {frame_id}: duplicate node id {node_id}")
        seen_ids.add(node_id)
        label = obj.get("label")
        if not isinstance(label, str):
            raise MalformedDocument(f"Frame {frame_id}: object {node_id} needs a string 'label'")
        class_index = vocab.object_index(label)
        bbox = _parse_bbox(obj.get("bbox"), scale, f"Frame {frame_id}, node {node_id}")
        nodes.append(EntityNode(node_id, class_index, bbox))

    edges: List[RelationEdge] = []
    for position, rel in enumerate(relationships):
        if not isinstance(rel, dict):
            raise MalformedDocument(f"Frame {frame_id}: relationship #{position} is not an object")
        subject_id, object_id = rel.get("subject"), rel.get("object")
        if not _is_int(subject_id) or not _is_int(object_id):
            raise MalformedDocument(f"Frame {frame_id}: relationship #{position} needs integer endpoints")
        for endpoint in (subject_id, object_id):
            if endpoint not in seen_ids:
                raise DanglingEdge(f"Frame {frame_id}: relationship #{position} references absent node {endpoint}")
        if subject_id == object_id:
            raise SelfLoopEdge(f"Frame {frame_id}: relationship #{position} is a self-loop on node {subject_id}")
        predicate = rel.get("predicate")
        if not isinstance(predicate, str):
            raise MalformedDocument(f"Frame {frame_id}: relationship #{position} needs a string 'predicate'")
        edges.append(RelationEdge(subject_id, vocab.predicate_index(predicate), object_id))

    return FrameSceneGraph(frame_id, tuple(nodes), tuple(edges))


def serialize_frame_graph(g: FrameSceneGraph, vocab: Vocabulary) -> Dict[str, Any]:
    """Inverse of parse_frame_graph (boxes are written normalized)."""
    return {
        "frame_id": g.frame_id,
        "objects": [
            {"id": n.node_id, "label": vocab.object_classes[n.class_index], "bbox": list(n.bbox)}
            for n in g.nodes
        ],
        "relationships": [
            {"subject": e.subject_id, "predicate": vocab.predicate_classes[e.predicate_index], "object": e.object_id}
            for e in g.edges
        ],
    }


def frame_stats(g: FrameSceneGraph, vocab: Vocabulary) -> FrameStats:
    humans = sum(1 for n in g.nodes if vocab.is_human(n.class_index))
    return FrameStats(len(g.nodes), len(g.edges), humans)


def _read_json(path: Path) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise MalformedDocument(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from e
    except OSError as e:
        raise MalformedDocument(f"{path}: {e}") from e


def _string_list(doc: Dict[str, Any], key: str) -> List[str]:
    value = doc.get(key)
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise MalformedDocument(f"'{key}' must be an array of strings")
    return value


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _image_scale(doc: Dict[str, Any], frame_id: str) -> Optional[Tuple[float, float]]:
    if "width" not in doc and "height" not in doc:
        return None
    width, height = doc.get("width"), doc.get("height")
    if not isinstance(width, (int, float)) or not isinstance(height, (int, float)) or width <= 0 or height <= 0:
        raise MalformedBBox(f"Frame {frame_id}: 'width' and 'height' must both be positive numbers")
    return float(width), float(height)


def _parse_bbox(raw: Any, scale: Optional[Tuple[float, float]], where: str) -> Tuple[float, float, float, float]:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4 or \
            not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
        raise MalformedBBox(f"{where}: bbox must be [x, y, w, h]")
    x, y, w, h = (float(v) for v in raw)
    if scale is not None:
        x, w = x / scale[0], w / scale[0]
        y, h = y / scale[1], h / scale[1]
    if not all(math.isfinite(v) for v in (x, y, w, h)):
        raise MalformedBBox(f"{where}: bbox has non-finite values")
    if w <= 0 or h <= 0:
        raise MalformedBBox(f"{where}: bbox width and height must be positive")
    if x < 0 or y < 0 or x + w > 1 + BBOX_EPSILON or y + h > 1 + BBOX_EPSILON:
        raise MalformedBBox(f"{where}: bbox {[x, y, w, h]} lies outside the normalized image")
    return x, y, w, h

