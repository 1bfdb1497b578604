# Tensor Engine Module
from .main import (
    EmptyInput,
    FiniteCheck,
    GradTape,
    IndexOutOfRange,
    NoTape,
    NotScalar,
    ShapeMismatch,
    Tensor,
    TensorError,
    active_tape,
    add,
    backward,
    check_finite,
    concat,
    default_dtype,
    elu,
    embedding_lookup,
    kink_log,
    leaky_relu,
    matmul,
    maximum,
    mean,
    mul,
    precision,
    relu,
    reshape,
    scale,
    segment_softmax,
    segment_sum,
    softmax_cross_entropy,
    sub,
    sum,
    tensor,
    zeros,
)
from .params import ParameterSet
from .checkpoint import (
    BadMagic,
    CheckpointError,
    MissingTensor,
    TruncatedCheckpoint,
    UnexpectedTensor,
    VersionMismatch,
    load_checkpoint,
    read_checkpoint,
    read_metadata,
    save_checkpoint,
)
from .gradcheck import GradCheckReport, grad_check, relative_error
