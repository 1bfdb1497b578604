#!/usr/bin/env python3
"""
Video Graph Builder
Links per-frame scene graphs through their human nodes to a single global root.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import networkx as nx

from scene_graph.main import EntityNode, FrameSceneGraph, RelationEdge, Vocabulary

logger = logging.getLogger(__name__)

SYNTHETIC_ROOT = -1
ROOT_LINK = "root-link"

CACHE_MAGIC = b"GHRG"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sBI")


class VideoGraphError(ValueError):
    """Base class for video-graph failures."""


class AllFramesSkipped(VideoGraphError):
    pass


class InvalidClipLength(VideoGraphError):
    pass


class UnknownNode(VideoGraphError):
    pass


class CacheFormatError(VideoGraphError):
    pass


class NoHumanPolicy(str, Enum):
    SKIP = "skip"
    SYNTHETIC_ROOT = "synthetic"


class NodeRef(NamedTuple):
    """Address of a node: (retained frame index, node id)."""

    frame: int
    node_id: int


GLOBAL_ROOT = NodeRef(-1, -1)


@dataclass(frozen=True)
class VideoGraph:
    video_id: str
    frames: Tuple[FrameSceneGraph, ...]
    # node_id of each retained frame's human root, SYNTHETIC_ROOT for placeholders
    human_root_ids: Tuple[int, ...]
    root_edges: Tuple[Tuple[int, int], ...]
    root_class_index: int
    skipped_frame_ids: Tuple[str, ...] = ()

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def synthetic_frames(self) -> Tuple[int, ...]:
        return tuple(i for i, h in enumerate(self.human_root_ids) if h == SYNTHETIC_ROOT)

    @property
    def node_count(self) -> int:
        """Σ|N_i| + 1, counting synthetic placeholders as members of their frame."""
        return sum(len(f.nodes) for f in self.frames) + len(self.synthetic_frames) + 1

    @property
    def edge_count(self) -> int:
        return sum(len(f.edges) for f in self.frames) + len(self.root_edges)

    def node_refs(self) -> List[NodeRef]:
        """All nodes in encoder row order: each frame's nodes, its placeholder, then the global root."""
        refs: List[NodeRef] = []
        for i, frame in enumerate(self.frames):
            refs.extend(NodeRef(i, n.node_id) for n in frame.nodes)
            if self.human_root_ids[i] == SYNTHETIC_ROOT:
                refs.append(NodeRef(i, SYNTHETIC_ROOT))
        refs.append(GLOBAL_ROOT)
        return refs

    def human_refs(self) -> List[NodeRef]:
        return [NodeRef(i, h) for i, h in enumerate(self.human_root_ids)]

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_node(GLOBAL_ROOT, kind="root", class_index=self.root_class_index)
        for i, frame in enumerate(self.frames):
            for node in frame.nodes:
                graph.add_node(NodeRef(i, node.node_id), kind="entity", class_index=node.class_index)
            if self.human_root_ids[i] == SYNTHETIC_ROOT:
                graph.add_node(NodeRef(i, SYNTHETIC_ROOT), kind="synthetic", class_index=None)
            for edge in frame.edges:
                graph.add_edge(NodeRef(i, edge.subject_id), NodeRef(i, edge.object_id),
                               predicate=edge.predicate_index)
        for frame_index, human in self.root_edges:
            graph.add_edge(NodeRef(frame_index, human), GLOBAL_ROOT, predicate=ROOT_LINK)
        return graph


@dataclass(frozen=True)
class ClipPlan:
    clip_length: int
    clips: Tuple[Tuple[int, ...], ...]


def select_human_root(g: FrameSceneGraph, vocab: Vocabulary) -> Optional[int]:
    """Largest-area human node (ties: smallest node_id), or None when the frame has no human."""
    humans = [n for n in g.nodes if vocab.is_human(n.class_index)]
    if not humans:
        return None
    best = min(humans, key=lambda n: (-n.area, n.node_id))
    return best.node_id


def build_video_graph(frames: Sequence[FrameSceneGraph], vocab: Vocabulary,
                      no_human_policy: Union[NoHumanPolicy, str] = NoHumanPolicy.SKIP,
                      video_id: str = "video") -> VideoGraph:
    """Assemble the human-rooted video-level graph from frames in temporal order."""
    policy = NoHumanPolicy(no_human_policy)
    if not frames:
        raise VideoGraphError(f"Video {video_id}: at least one frame is required")

    kept: List[FrameSceneGraph] = []
    roots: List[int] = []
    skipped: List[str] = []
    for frame in frames:
        human = select_human_root(frame, vocab)
        if human is None:
            if policy is NoHumanPolicy.SKIP:
                skipped.append(frame.frame_id)
                continue
            human = SYNTHETIC_ROOT
        kept.append(frame)
        roots.append(human)

    if not kept:
        raise AllFramesSkipped(f"Video {video_id}: no frame contains a human node")
    if skipped:
        logger.warning(f"Video {video_id}: skipped {len(skipped)} frame(s) without a human node")

    return VideoGraph(
        video_id=video_id,
        frames=tuple(kept),
        human_root_ids=tuple(roots),
        root_edges=tuple((i, h) for i, h in enumerate(roots)),
        root_class_index=vocab.root_class_index,
        skipped_frame_ids=tuple(skipped),
    )


def plan_clip_windows(n_frames: int, clip_length: int) -> ClipPlan:
    if not isinstance(clip_length, int) or clip_length < 1:
        raise InvalidClipLength(f"clip_length must be a positive integer, got {clip_length!r}")
    if n_frames < 1:
        raise VideoGraphError("Cannot plan clips over zero frames")
    clips = []
    for c in range(math.ceil(n_frames / clip_length)):
        window = list(range(c * clip_length, min((c + 1) * clip_length, n_frames)))
        window.extend([window[-1]] * (clip_length - len(window)))
        clips.append(tuple(window))
    return ClipPlan(clip_length, tuple(clips))


def plan_clips(vg: VideoGraph, clip_length: int) -> ClipPlan:
    """Contiguous windows of clip_length frames; the last one repeats its final frame."""
    return plan_clip_windows(vg.frame_count, clip_length)


def bfs_distance(vg: VideoGraph, a: NodeRef, b: NodeRef, graph: Optional[nx.Graph] = None) -> Optional[int]:
    """Shortest undirected path length between two nodes; None when unreachable."""
    graph = graph if graph is not None else vg.to_networkx()
    for ref in (a, b):
        if ref not in graph:
            raise UnknownNode(f"Video {vg.video_id}: no node {tuple(ref)}")
    try:
        return nx.shortest_path_length(graph, NodeRef(*a), NodeRef(*b))
    except nx.NetworkXNoPath:
        return None


def save_video_graph(vg: VideoGraph, path: Union[str, Path]) -> None:
    payload = json.dumps(_graph_to_doc(vg), separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, len(payload)))
        f.write(payload)


def load_video_graph(path: Union[str, Path]) -> VideoGraph:
    raw = Path(path).read_bytes()
    if len(raw) < _CACHE_HEADER.size:
        raise CacheFormatError(f"{path}: file too short for a GHRG header")
    magic, version, length = _CACHE_HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise CacheFormatError(f"{path}: unsupported GHRG version {version}")
    if len(raw) != _CACHE_HEADER.size + length:
        raise CacheFormatError(f"{path}: expected {length} payload bytes, found {len(raw) - _CACHE_HEADER.size}")
    try:
        doc = json.loads(raw[_CACHE_HEADER.size:].decode("utf-8"))
        return _graph_from_doc(doc)
    except (ValueError, KeyError, TypeError) as e:
        raise CacheFormatError(f"{path}: corrupt payload ({e})") from e


def _graph_to_doc(vg: VideoGraph) -> Dict[str, Any]:
    return {
        "video_id": vg.video_id,
        "root_class_index": vg.root_class_index,
        "frames": [
            {
                "frame_id": f.frame_id,
                "nodes": [[n.node_id, n.class_index, *n.bbox] for n in f.nodes],
                "edges": [[e.subject_id, e.predicate_index, e.object_id] for e in f.edges],
            }
            for f in vg.frames
        ],
        "human_root_ids": list(vg.human_root_ids),
        "root_edges": [list(e) for e in vg.root_edges],
        "skipped_frame_ids": list(vg.skipped_frame_ids),
    }


def _graph_from_doc(doc: Dict[str, Any]) -> VideoGraph:
    frames = tuple(
        FrameSceneGraph(
            f["frame_id"],
            tuple(EntityNode(int(n[0]), int(n[1]), (n[2], n[3], n[4], n[5])) for n in f["nodes"]),
            tuple(RelationEdge(int(e[0]), int(e[1]), int(e[2])) for e in f["edges"]),
        )
        for f in doc["frames"]
    )
    return VideoGraph(
        video_id=doc["video_id"],
        frames=frames,
        human_root_ids=tuple(int(h) for h in doc["human_root_ids"]),
        root_edges=tuple((int(i), int(h)) for i, h in doc["root_edges"]),
        root_class_index=int(doc["root_class_index"]),
        skipped_frame_ids=tuple(doc["skipped_frame_ids"]),
    )
