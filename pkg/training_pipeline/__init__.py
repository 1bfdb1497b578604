# Training Pipeline Module
from .main import (
    CATEGORIES,
    DatasetError,
    DatasetItem,
    EpochLog,
    EvalReport,
    MissingEmbedding,
    MissingVideo,
    ModelPredictor,
    NonFiniteLoss,
    QaDataset,
    QaSample,
    SplitLeakage,
    TrainConfig,
    TrainingError,
    TrainResult,
    UnknownAnswer,
    UnknownCategory,
    build_report,
    config_fingerprint,
    evaluate,
    load_dataset,
    load_dataset_dir,
    load_model_checkpoint,
    model_config_for,
    model_from_checkpoint,
    save_model_checkpoint,
    train,
)
from .model import GhrVqaModel, HeadKind, ModelConfig
from .optim import Adam, clip_global_norm
from .synthetic import (
    RuleBasedOracle,
    SyntheticConfigError,
    ToyProblem,
    generate_synthetic,
    synthetic_vocabulary,
    toy_problem,
)
