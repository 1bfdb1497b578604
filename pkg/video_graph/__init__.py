# Video Graph Module
from video_graph.main import (
    GLOBAL_ROOT,
    ROOT_LINK,
    SYNTHETIC_ROOT,
    AllFramesSkipped,
    CacheFormatError,
    ClipPlan,
    InvalidClipLength,
    NodeRef,
    NoHumanPolicy,
    UnknownNode,
    VideoGraph,
    VideoGraphError,
    bfs_distance,
    build_video_graph,
    load_video_graph,
    plan_clip_windows,
    plan_clips,
    save_video_graph,
)
