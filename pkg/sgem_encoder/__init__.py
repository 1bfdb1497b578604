# Scene Graph Encoding Module
from .layout import (
    EncoderError,
    GraphLayout,
    NoHumanInFrame,
    RelationMessages,
    RelationSchema,
    UnmappedPredicate,
    layout_frame_graph,
    layout_video_graph,
)
from .main import (
    AttentionEntry,
    EncodedVideo,
    EncoderKind,
    FrameReadout,
    HumanAttention,
    RelationGrouping,
    SceneGraphEncoder,
    SgemConfig,
    aggregate_human_roots,
    build_schema,
)
