#!/usr/bin/env python3
"""
Training Pipeline
Dataset assembly, per-sample gradient accumulation with Adam, per-category
evaluation and checkpointing.
"""

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

import tensor_engine as te
from question_encoding.main import QuestionEmbedding, load_embeddings, toy_embed
from scene_graph.main import SceneGraphError, Vocabulary, parse_frame_graph, parse_vocabulary
from sgem_encoder.main import EncoderKind
from tensor_engine import GradTape, check_finite
from tensor_engine.checkpoint import load_checkpoint, read_metadata, save_checkpoint
from video_graph.main import NoHumanPolicy, VideoGraph, build_video_graph

from .model import GhrVqaModel, HeadKind, ModelConfig
from .optim import Adam, clip_global_norm

logger = logging.getLogger(__name__)

CATEGORIES = ("obj-rel", "rel-action", "obj-action", "superlative", "sequencing",
              "exists", "duration", "activity", "other")
DEFAULT_CATEGORY = "other"
EVAL_FRACTION = 0.2
TRAIN_SEED_STRIDE = 100003

LOSS_LOG = "loss_log.csv"
FINAL_CHECKPOINT = "final.ghrc"
BEST_CHECKPOINT = "best.ghrc"
EVAL_REPORT = "eval_report.json"


class DatasetError(ValueError):
    """Base class for dataset assembly failures."""


class MissingVideo(DatasetError):
    pass


class UnknownAnswer(DatasetError):
    pass


class UnknownCategory(DatasetError):
    pass


class SplitLeakage(DatasetError):
    pass


class MissingEmbedding(DatasetError):
    pass


class TrainingError(ValueError):
    pass


class NonFiniteLoss(TrainingError):
    pass


@dataclass(frozen=True)
class QaSample:
    qa_id: str
    video_id: str
    question_text: str
    answer_index: int
    category: str


@dataclass(frozen=True)
class DatasetItem:
    sample: QaSample
    video: VideoGraph
    question: QuestionEmbedding


@dataclass
class QaDataset:
    vocab: Vocabulary
    answers: List[str]
    train: List[DatasetItem]
    eval: List[DatasetItem]
    d_q: int

    @property
    def num_answers(self) -> int:
        return len(self.answers)

    def split(self, name: str) -> List[DatasetItem]:
        if name not in ("train", "eval"):
            raise DatasetError(f"Unknown split {name!r}; expected 'train' or 'eval'")
        return self.train if name == "train" else self.eval


class TrainConfig(BaseModel):
    learning_rate: float = Field(1e-3, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    batch_size: int = Field(8, ge=1)
    epochs: int = Field(200, ge=1)
    seed: int = Field(7, ge=0)
    clip_norm: float = Field(5.0, gt=0.0)
    head: HeadKind = HeadKind.CRN
    encoder: EncoderKind = EncoderKind.HETEDGEGAT
    threads: int = Field(1, ge=1)
    no_human_policy: NoHumanPolicy = NoHumanPolicy.SKIP


class EvalReport(BaseModel):
    overall_accuracy: float
    per_category_accuracy: Dict[str, float]
    per_category_count: Dict[str, int]
    per_category_correct: Dict[str, int]
    total: int
    correct: int
    config_fingerprint: str = ""
    wall_clock_seconds: float = 0.0


class EpochLog(NamedTuple):
    epoch: int
    loss: float
    train_acc: float
    eval_acc: Optional[float]


@dataclass
class TrainResult:
    log: List[EpochLog]
    best_epoch: int
    report: Optional[EvalReport]


def model_config_for(train_config: TrainConfig, base: Optional[ModelConfig] = None) -> ModelConfig:
    """Apply the run's head/encoder ablation switches to a model config."""
    base = base or ModelConfig()
    sgem = base.sgem.model_copy(update={"encoder": train_config.encoder})
    return base.model_copy(update={"head": train_config.head, "sgem": sgem})


def config_fingerprint(*configs: BaseModel) -> str:
    blob = json.dumps([c.model_dump(mode="json") for c in configs], sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from e
    except OSError as e:
        raise DatasetError(f"{path}: {e}") from e


def load_video_document(path: Path, vocab: Vocabulary,
                        no_human_policy: NoHumanPolicy = NoHumanPolicy.SKIP) -> VideoGraph:
    doc = _read_json(path)
    if not isinstance(doc, dict) or not isinstance(doc.get("video_id"), str) or not isinstance(doc.get("frames"), list):
        raise DatasetError(f"{path}: video document needs 'video_id' and a 'frames' array")
    try:
        frames = [parse_frame_graph(f, vocab) for f in doc["frames"]]
        return build_video_graph(frames, vocab, no_human_policy, doc["video_id"])
    except (SceneGraphError, ValueError) as e:
        raise DatasetError(f"{path}: {e}") from e


def load_videos(video_dir: Union[str, Path], vocab: Vocabulary,
                no_human_policy: NoHumanPolicy = NoHumanPolicy.SKIP) -> Dict[str, VideoGraph]:
    videos: Dict[str, VideoGraph] = {}
    for path in sorted(Path(video_dir).glob("*.json")):
        vg = load_video_document(path, vocab, no_human_policy)
        if vg.video_id in videos:
            raise DatasetError(f"{path}: duplicate video_id {vg.video_id!r}")
        videos[vg.video_id] = vg
    return videos


def load_answers(path: Union[str, Path]) -> List[str]:
    answers = _read_json(Path(path))
    if not isinstance(answers, list) or not all(isinstance(a, str) for a in answers):
        raise DatasetError(f"{path}: answers file must be a JSON array of strings")
    if len(set(answers)) != len(answers):
        raise DatasetError(f"{path}: duplicate answers")
    if len(answers) < 2:
        raise DatasetError(f"{path}: need at least 2 answers, got {len(answers)}")
    return answers


def load_qa_samples(path: Union[str, Path], answers: Sequence[str]) -> List[QaSample]:
    answer_index = {a: i for i, a in enumerate(answers)}
    samples: List[QaSample] = []
    seen = set()
    defaulted = 0
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            where = f"{path}:{lineno}"
            for key in ("qa_id", "video_id", "question", "answer"):
                if not isinstance(row.get(key), str):
                    raise DatasetError(f"{where}: missing string field '{key}'")
            if row["qa_id"] in seen:
                raise DatasetError(f"{where}: duplicate qa_id {row['qa_id']!r}")
            seen.add(row["qa_id"])
            if row["answer"] not in answer_index:
                raise UnknownAnswer(f"{where}: answer {row['answer']!r} is not in the answer list")
            category = row.get("category")
            if category is None:
                category = DEFAULT_CATEGORY
                defaulted += 1
            elif category not in CATEGORIES:
                raise UnknownCategory(f"{where}: unknown category {category!r}")
            samples.append(QaSample(row["qa_id"], row["video_id"], row["question"],
                                    answer_index[row["answer"]], category))
    if defaulted:
        logger.warning(f"{defaulted} QA sample(s) without a category were assigned '{DEFAULT_CATEGORY}'")
    return samples


def resolve_split(video_ids: Iterable[str], split_path: Optional[Union[str, Path]],
                  known_videos: Iterable[str]) -> Tuple[set, set]:
    used = sorted(set(video_ids))
    if split_path is None:
        n_eval = int(len(used) * EVAL_FRACTION)
        cut = len(used) - n_eval
        return set(used[:cut]), set(used[cut:])
    doc = _read_json(Path(split_path))
    if not isinstance(doc, dict) or not isinstance(doc.get("train"), list) or not isinstance(doc.get("eval"), list):
        raise DatasetError(f"{split_path}: split manifest needs 'train' and 'eval' arrays")
    train, evaluation = set(doc["train"]), set(doc["eval"])
    leaked = sorted(train & evaluation)
    if leaked:
        raise SplitLeakage(f"{split_path}: videos in both splits: {leaked}")
    known = set(known_videos)
    unknown = sorted((train | evaluation) - known)
    if unknown:
        raise MissingVideo(f"{split_path}: split lists unknown videos: {unknown}")
    return train, evaluation


def load_dataset(video_dir: Union[str, Path], qa_path: Union[str, Path],
                 embeddings: Optional[Union[str, Path]], vocab: Union[Vocabulary, str, Path],
                 answers_path: Union[str, Path], split_path: Optional[Union[str, Path]] = None,
                 d_q: int = 768, no_human_policy: NoHumanPolicy = NoHumanPolicy.SKIP) -> QaDataset:
    """Assemble train/eval items; ``embeddings=None`` uses the toy hash embedder."""
    if not isinstance(vocab, Vocabulary):
        try:
            vocab = parse_vocabulary(vocab)
        except SceneGraphError as e:
            raise DatasetError(str(e)) from e
    answers = load_answers(answers_path)
    videos = load_videos(video_dir, vocab, no_human_policy)
    samples = load_qa_samples(qa_path, answers)

    missing = sorted({s.video_id for s in samples} - set(videos))
    if missing:
        raise MissingVideo(f"{qa_path}: QA samples reference unknown videos: {missing}")

    precomputed = load_embeddings(embeddings, d_q) if embeddings is not None else None
    train_ids, eval_ids = resolve_split((s.video_id for s in samples), split_path, videos)

    train, evaluation = [], []
    for sample in samples:
        if precomputed is not None:
            if sample.qa_id not in precomputed:
                raise MissingEmbedding(f"{embeddings}: no embedding for qa_id {sample.qa_id!r}")
            question = precomputed[sample.qa_id]
        else:
            question = toy_embed(sample.question_text, d_q, sample.qa_id)
        item = DatasetItem(sample, videos[sample.video_id], question)
        if sample.video_id in train_ids:
            train.append(item)
        elif sample.video_id in eval_ids:
            evaluation.append(item)
        else:
            raise DatasetError(f"{split_path}: video {sample.video_id!r} is in neither split")

    logger.info(f"Dataset: {len(videos)} videos, {len(train)} train / {len(evaluation)} eval samples, "
                f"{len(answers)} answers")
    return QaDataset(vocab, answers, train, evaluation, d_q)


def load_dataset_dir(data_dir: Union[str, Path], d_q: int = 768,
                     no_human_policy: NoHumanPolicy = NoHumanPolicy.SKIP) -> QaDataset:
    """Standard layout: vocab.json, answers.json, qa.jsonl, videos/, optional split.json and embeddings.ghrq."""
    root = Path(data_dir)
    if not root.is_dir():
        raise DatasetError(f"{root}: data directory not found")
    split = root / "split.json"
    embeddings = root / "embeddings.ghrq"
    return load_dataset(root / "videos", root / "qa.jsonl", embeddings if embeddings.exists() else None,
                        root / "vocab.json", root / "answers.json", split if split.exists() else None,
                        d_q, no_human_policy)


def build_report(predictions: Sequence[int], items: Sequence[DatasetItem], fingerprint: str = "",
                 wall_clock: float = 0.0) -> EvalReport:
    counts = {c: 0 for c in CATEGORIES}
    correct = {c: 0 for c in CATEGORIES}
    for predicted, item in zip(predictions, items):
        counts[item.sample.category] += 1
        correct[item.sample.category] += int(predicted == item.sample.answer_index)
    present = [c for c in CATEGORIES if counts[c]]
    total, hits = sum(counts.values()), sum(correct.values())
    return EvalReport(
        overall_accuracy=hits / total if total else 0.0,
        per_category_accuracy={c: correct[c] / counts[c] for c in present},
        per_category_count={c: counts[c] for c in present},
        per_category_correct={c: correct[c] for c in present},
        total=total,
        correct=hits,
        config_fingerprint=fingerprint,
        wall_clock_seconds=wall_clock,
    )


def _map(fn: Callable, items: Sequence, threads: int) -> List:
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def evaluate(items: Sequence[DatasetItem], predictor, fingerprint: str = "", threads: int = 1) -> EvalReport:
    """Argmax accuracy overall and per category; ``predictor`` maps a DatasetItem to an answer index."""
    start = time.perf_counter()
    predict = predictor if callable(predictor) else predictor.predict_item
    predictions = _map(predict, list(items), threads)
    return build_report(predictions, items, fingerprint, time.perf_counter() - start)


class ModelPredictor:
    """Adapts GhrVqaModel to ``evaluate`` (deterministic subsets)."""

    def __init__(self, model: GhrVqaModel):
        self.model = model

    def predict_item(self, item: DatasetItem) -> int:
        return self.model.predict(item.video, item.question.vector)


def _sample_step(model: GhrVqaModel, item: DatasetItem, subset_seed: int) -> Tuple[float, bool, Dict[str, np.ndarray]]:
    with GradTape():
        logits = model.forward(item.video, item.question.vector, subset_seed)
        loss = te.softmax_cross_entropy(logits, [item.sample.answer_index])
    grads = te.backward(loss)
    named = {}
    for name, t in model.params.items():
        g = grads.get(t)
        if g is not None:
            named[name] = g
    hit = int(np.argmax(logits.data[0])) == item.sample.answer_index
    return loss.item(), hit, named


def _check_step(loss: float, grads: Dict[str, np.ndarray], epoch: int) -> None:
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"epoch {epoch}: loss is {loss}")
    for name, g in grads.items():
        check = check_finite(g)
        if not check:
            raise NonFiniteLoss(f"epoch {epoch}: gradient of {name} has {check.value} at flat index {check.index}")


def _write_log(path: Path, log: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss", "train_acc", "eval_acc"])
        for row in log:
            writer.writerow([row.epoch, f"{row.loss:.6f}", f"{row.train_acc:.6f}",
                             "" if row.eval_acc is None else f"{row.eval_acc:.6f}"])


def checkpoint_metadata(model: GhrVqaModel, dataset: QaDataset, config: TrainConfig) -> Dict[str, Any]:
    return {
        "model": model.config.model_dump(mode="json"),
        "train": config.model_dump(mode="json"),
        "vocab": dataset.vocab.to_doc(),
        "answers": list(dataset.answers),
        "fingerprint": config_fingerprint(model.config, config),
    }


def train(dataset: QaDataset, model: GhrVqaModel, config: TrainConfig,
          out_dir: Optional[Union[str, Path]] = None) -> TrainResult:
    """Adam over per-sample gradients averaged per batch, with global-norm clipping.

    The written report scores the eval split, or the train split when the
    dataset has no eval samples; per-epoch train accuracy goes to the loss log.
    """
    if not dataset.train:
        raise TrainingError("Training split is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    optimizer = Adam(model.params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    fingerprint = config_fingerprint(model.config, config)
    metadata = checkpoint_metadata(model, dataset, config)
    predictor = ModelPredictor(model)

    log: List[EpochLog] = []
    best_score, best_epoch = -1.0, 0
    items = dataset.train
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(items))
        losses, hits = [], 0
        for start in range(0, len(order), config.batch_size):
            batch = [int(i) for i in order[start:start + config.batch_size]]
            results = _map(lambda i: _sample_step(model, items[i], epoch * TRAIN_SEED_STRIDE + i),
                           batch, config.threads)
            summed: Dict[str, np.ndarray] = {}
            for loss, hit, grads in results:
                _check_step(loss, grads, epoch)
                losses.append(loss)
                hits += int(hit)
                for name, g in grads.items():
                    summed[name] = summed[name] + g if name in summed else g.copy()
            averaged = {name: g / len(batch) for name, g in summed.items()}
            clipped, norm = clip_global_norm(averaged, config.clip_norm)
            optimizer.step(clipped)

        eval_acc = None
        if dataset.eval:
            eval_acc = evaluate(dataset.eval, predictor, fingerprint, config.threads).overall_accuracy
        row = EpochLog(epoch, float(np.mean(losses)), hits / len(items), eval_acc)
        log.append(row)
        eval_text = "n/a" if eval_acc is None else f"{eval_acc:.4f}"
        logger.info(f"epoch {epoch}: loss {row.loss:.4f} train_acc {row.train_acc:.4f} eval_acc {eval_text}")

        score = eval_acc if eval_acc is not None else row.train_acc
        if score > best_score:
            best_score, best_epoch = score, epoch
            if out is not None:
                save_checkpoint(out / BEST_CHECKPOINT, model.params, {**metadata, "epoch": epoch})

    for name, t in model.params.items():
        check = check_finite(t)
        if not check:
            raise NonFiniteLoss(f"parameter {name} became non-finite at flat index {check.index}")

    report = None
    if out is not None:
        save_checkpoint(out / FINAL_CHECKPOINT, model.params, {**metadata, "epoch": config.epochs})
        _write_log(out / LOSS_LOG, log)
        # held-out split when there is one, else the training split
        split_name = "eval" if dataset.eval else "train"
        report = evaluate(dataset.split(split_name), predictor, fingerprint, config.threads)
        (out / EVAL_REPORT).write_text(report.model_dump_json(indent=2), encoding="utf-8")
        logger.info(f"Wrote {LOSS_LOG}, {FINAL_CHECKPOINT} and {EVAL_REPORT} ({split_name} split, "
                    f"{report.total} samples) under {out}")
    return TrainResult(log, best_epoch, report)


def save_model_checkpoint(path: Union[str, Path], model: GhrVqaModel,
                          metadata: Optional[Dict[str, Any]] = None) -> Path:
    return save_checkpoint(path, model.params, metadata)


def load_model_checkpoint(path: Union[str, Path], model: GhrVqaModel) -> GhrVqaModel:
    load_checkpoint(path, model.params)
    return model


def model_from_checkpoint(path: Union[str, Path], seed: int = 0) -> GhrVqaModel:
    """Rebuild a model from a checkpoint's metadata sidecar, then load its tensors."""
    metadata = read_metadata(path)
    if metadata is None:
        raise TrainingError(f"{path}: no metadata sidecar; cannot infer the model configuration")
    vocab = parse_vocabulary(metadata["vocab"])
    model = GhrVqaModel(vocab, len(metadata["answers"]), ModelConfig.model_validate(metadata["model"]), seed)
    return load_model_checkpoint(path, model)
