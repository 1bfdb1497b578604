# Scene Graph Core Module
from scene_graph.main import (
    DanglingEdge,
    DuplicateClass,
    DuplicateNodeId,
    EntityNode,
    FrameSceneGraph,
    FrameStats,
    MalformedBBox,
    MalformedDocument,
    RelationEdge,
    SceneGraphError,
    SelfLoopEdge,
    UnknownClass,
    UnknownHumanClass,
    UnknownPredicate,
    Vocabulary,
    frame_stats,
    parse_frame_graph,
    parse_vocabulary,
    serialize_frame_graph,
)
