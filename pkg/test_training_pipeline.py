#!/usr/bin/env python3
"""
Tests for dataset assembly, the synthetic generator, training, evaluation and checkpoints.
"""

import csv
import dataclasses
import json
import logging
import math
import os

import numpy as np
import pytest

from hierarchical_crn import CrnConfig
from question_encoding import QuestionEmbedding, write_embeddings
from sgem_encoder import SgemConfig
from tensor_engine import MissingTensor, ShapeMismatch, grad_check
from training_pipeline import (
    CATEGORIES,
    DatasetItem,
    MissingEmbedding,
    MissingVideo,
    ModelPredictor,
    NonFiniteLoss,
    QaDataset,
    QaSample,
    RuleBasedOracle,
    SplitLeakage,
    SyntheticConfigError,
    TrainConfig,
    UnknownAnswer,
    UnknownCategory,
    build_report,
    evaluate,
    generate_synthetic,
    load_dataset_dir,
    load_model_checkpoint,
    model_from_checkpoint,
    save_model_checkpoint,
    toy_problem,
    train,
)
from training_pipeline.main import BEST_CHECKPOINT, EVAL_REPORT, FINAL_CHECKPOINT, LOSS_LOG, EvalReport
from training_pipeline.model import GhrVqaModel, HeadKind, ModelConfig
from video_graph import build_video_graph

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

D_Q = 16
SMALL_MODEL = ModelConfig(
    sgem=SgemConfig(d_node=8, d_edge=4, heads=2, d_head=4),
    crn=CrnConfig(d=8),
    d_q=D_Q,
)


def create_sample_dataset(root, **overrides):
    """Five 3-frame videos over a 5-class vocabulary, 3 answers."""
    options = dict(seed=3, n_videos=5, frames_per_video=3, n_objects=5, n_predicates=3, n_answers=3)
    options.update(overrides)
    generate_synthetic(root, **options)
    return root


def rewrite_qa(root, edit):
    path = root / "qa.jsonl"
    rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
    edit(rows)
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")


@pytest.fixture(scope="module")
def reference_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    generate_synthetic(root, seed=7)
    return root


# Synthetic data

def test_generator_is_byte_deterministic(tmp_path):
    a = create_sample_dataset(tmp_path / "a")
    b = create_sample_dataset(tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    c = create_sample_dataset(tmp_path / "c", seed=4)
    assert any((a / rel).read_bytes() != (c / rel).read_bytes() for rel in files)


def test_generator_layout(reference_dir):
    dataset = load_dataset_dir(reference_dir, d_q=D_Q)
    assert len(list((reference_dir / "videos").glob("*.json"))) == 50
    assert dataset.num_answers == 8
    assert len(dataset.train) == 40
    assert len(dataset.eval) == 10
    assert {item.video.frame_count for item in dataset.train} == {8}
    assert {item.sample.category for item in dataset.train} <= set(CATEGORIES)


@pytest.mark.parametrize("overrides", [
    dict(n_answers=1),
    dict(n_answers=5, n_objects=5),
    dict(cross_frame=True, frames_per_video=2),
    dict(n_videos=0),
])
def test_generator_rejects_bad_configs(tmp_path, overrides):
    with pytest.raises(SyntheticConfigError):
        create_sample_dataset(tmp_path, **overrides)


@pytest.mark.parametrize("cross_frame", [False, True])
def test_rule_based_oracle_is_perfect(tmp_path, cross_frame):
    root = create_sample_dataset(tmp_path, n_videos=40, frames_per_video=6, n_objects=8, n_predicates=4,
                                 n_answers=5, cross_frame=cross_frame)
    dataset = load_dataset_dir(root, d_q=D_Q)
    oracle = RuleBasedOracle(dataset.vocab, dataset.answers)
    report = evaluate(dataset.train + dataset.eval, oracle)
    assert report.overall_accuracy == 1.0
    assert report.total == 40


# Loading

def test_split_leakage(tmp_path):
    root = create_sample_dataset(tmp_path)
    (root / "split.json").write_text(json.dumps({"train": ["video0000", "video0001"], "eval": ["video0001"]}))
    with pytest.raises(SplitLeakage, match="video0001"):
        load_dataset_dir(root, d_q=D_Q)


def test_split_with_unknown_video(tmp_path):
    root = create_sample_dataset(tmp_path)
    (root / "split.json").write_text(json.dumps({"train": ["video0000", "ghost"], "eval": []}))
    with pytest.raises(MissingVideo, match="ghost"):
        load_dataset_dir(root, d_q=D_Q)


def test_qa_referencing_missing_video(tmp_path):
    root = create_sample_dataset(tmp_path)
    (root / "videos" / "video0002.json").unlink()
    with pytest.raises(MissingVideo, match="video0002"):
        load_dataset_dir(root, d_q=D_Q)


def test_unknown_answer_names_the_line(tmp_path):
    root = create_sample_dataset(tmp_path)
    rewrite_qa(root, lambda rows: rows[2].update(answer="spaceship"))
    with pytest.raises(UnknownAnswer, match=r"qa.jsonl:3"):
        load_dataset_dir(root, d_q=D_Q)


def test_unknown_category(tmp_path):
    root = create_sample_dataset(tmp_path)
    rewrite_qa(root, lambda rows: rows[0].update(category="bogus"))
    with pytest.raises(UnknownCategory):
        load_dataset_dir(root, d_q=D_Q)


def test_missing_category_becomes_other(tmp_path):
    root = create_sample_dataset(tmp_path)
    rewrite_qa(root, lambda rows: rows[0].pop("category"))
    dataset = load_dataset_dir(root, d_q=D_Q)
    first = next(item for item in dataset.train + dataset.eval if item.sample.qa_id == "qa0000")
    assert first.sample.category == "other"


def test_default_split_holds_out_last_fifth(tmp_path):
    root = create_sample_dataset(tmp_path)
    (root / "split.json").unlink()
    dataset = load_dataset_dir(root, d_q=D_Q)
    assert [item.sample.video_id for item in dataset.eval] == ["video0004"]
    assert len(dataset.train) == 4


def test_precomputed_embeddings(tmp_path):
    root = create_sample_dataset(tmp_path)
    vectors = {f"qa{i:04d}": np.full(D_Q, float(i), dtype=np.float32) for i in range(5)}
    write_embeddings(root / "embeddings.ghrq", vectors)
    dataset = load_dataset_dir(root, d_q=D_Q)
    for item in dataset.train + dataset.eval:
        assert np.array_equal(item.question.vector, vectors[item.sample.qa_id])

    del vectors["qa0003"]
    write_embeddings(root / "embeddings.ghrq", vectors)
    with pytest.raises(MissingEmbedding, match="qa0003"):
        load_dataset_dir(root, d_q=D_Q)


# Evaluation

def test_constant_predictor_and_report_recomposition(reference_dir):
    dataset = load_dataset_dir(reference_dir, d_q=D_Q)
    items = dataset.train + dataset.eval
    report = evaluate(items, lambda item: 0, fingerprint="abc")
    # answers cycle over 8 classes across 50 videos: index 0 appears 7 times
    assert report.overall_accuracy == pytest.approx(7 / 50)
    assert abs(report.overall_accuracy - 1 / 8) < 0.03
    assert sum(report.per_category_correct.values()) == report.correct
    assert sum(report.per_category_count.values()) == report.total == 50
    for category, count in report.per_category_count.items():
        assert report.per_category_accuracy[category] == report.per_category_correct[category] / count
    assert report.config_fingerprint == "abc"


def test_threaded_evaluation_matches_serial(tmp_path):
    dataset = load_dataset_dir(create_sample_dataset(tmp_path), d_q=D_Q)
    model = GhrVqaModel(dataset.vocab, dataset.num_answers, SMALL_MODEL, seed=1)
    items = dataset.train + dataset.eval
    serial = evaluate(items, ModelPredictor(model))
    threaded = evaluate(items, ModelPredictor(model), threads=3)
    assert serial.per_category_correct == threaded.per_category_correct


def test_empty_report():
    report = build_report([], [])
    assert report.total == 0
    assert report.overall_accuracy == 0.0


# Training

def _small_run(root, epochs=2, **train_overrides):
    dataset = load_dataset_dir(root, d_q=D_Q)
    model = GhrVqaModel(dataset.vocab, dataset.num_answers, SMALL_MODEL, seed=5)
    config = TrainConfig(epochs=epochs, batch_size=2, seed=11, **train_overrides)
    return dataset, model, config


def test_zero_learning_rate_leaves_parameters_unchanged(tmp_path):
    dataset, model, config = _small_run(create_sample_dataset(tmp_path), learning_rate=0.0)
    before = model.params.state_dict()
    train(dataset, model, config)
    for name, value in before.items():
        assert np.array_equal(model.params[name].data, value), name


def test_training_writes_outputs(tmp_path):
    dataset, model, config = _small_run(create_sample_dataset(tmp_path / "data"), epochs=3)
    out = tmp_path / "run"
    result = train(dataset, model, config, out)
    assert len(result.log) == 3
    assert 1 <= result.best_epoch <= 3
    for name in (FINAL_CHECKPOINT, BEST_CHECKPOINT, LOSS_LOG, EVAL_REPORT):
        assert (out / name).exists(), name

    with open(out / LOSS_LOG, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch", "loss", "train_acc", "eval_acc"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]

    report = EvalReport.model_validate_json((out / EVAL_REPORT).read_text(encoding="utf-8"))
    assert report.total == len(dataset.eval)

    restored = model_from_checkpoint(out / FINAL_CHECKPOINT)
    for item in dataset.train + dataset.eval:
        assert restored.predict(item.video, item.question.vector) == model.predict(item.video, item.question.vector)


def test_report_falls_back_to_train_split(tmp_path):
    dataset, model, config = _small_run(create_sample_dataset(tmp_path / "data"))
    train_only = dataclasses.replace(dataset, eval=[])
    result = train(train_only, model, config, tmp_path / "run")
    assert result.report.total == len(dataset.train)
    assert all(row.eval_acc is None for row in result.log)
    expected = evaluate(dataset.train, ModelPredictor(model))
    assert result.report.per_category_correct == expected.per_category_correct


def test_training_is_deterministic(tmp_path):
    root = create_sample_dataset(tmp_path / "data")
    runs = []
    for name, threads in (("one", 1), ("two", 1), ("threaded", 2)):
        dataset, model, config = _small_run(root, epochs=2, threads=threads)
        runs.append(train(dataset, model, config, tmp_path / name))
    assert runs[0].log == runs[1].log == runs[2].log
    final = (tmp_path / "one" / FINAL_CHECKPOINT).read_bytes()
    assert final == (tmp_path / "two" / FINAL_CHECKPOINT).read_bytes()
    assert final == (tmp_path / "threaded" / FINAL_CHECKPOINT).read_bytes()


def test_memorizes_a_single_sample():
    toy = toy_problem(seed=0)
    config = ModelConfig(sgem=SgemConfig(d_node=16, d_edge=8, heads=2, d_head=8),
                         crn=CrnConfig(d=16, clip_length=3), d_q=8)
    model = GhrVqaModel(toy.model.vocab, 3, config, seed=0)
    sample = QaSample("qa0", toy.video.video_id, "what is the person holding", toy.answer, "obj-rel")
    item = DatasetItem(sample, toy.video, QuestionEmbedding("qa0", toy.question))
    dataset = QaDataset(toy.model.vocab, ["cup", "table", "person"], [item], [], 8)

    result = train(dataset, model, TrainConfig(learning_rate=1e-2, epochs=200, batch_size=1, seed=0))
    assert result.log[0].loss == pytest.approx(math.log(3), rel=0.1)
    assert result.log[-1].loss < 0.01
    assert result.log[-1].train_acc == 1.0


def test_initial_loss_is_near_uniform(reference_dir):
    dataset = load_dataset_dir(reference_dir)
    model = GhrVqaModel(dataset.vocab, dataset.num_answers, ModelConfig(), seed=7)
    losses = [model.loss(item.video, item.question.vector, item.sample.answer_index).item()
              for item in dataset.train + dataset.eval]
    assert abs(np.mean(losses) - math.log(8)) < 0.1 * math.log(8)


def test_non_finite_parameters_stop_training(tmp_path):
    dataset, model, config = _small_run(create_sample_dataset(tmp_path))
    model.params["head.b2"].data[0, 0] = np.nan
    with pytest.raises(NonFiniteLoss):
        train(dataset, model, config)


def test_mlp_checkpoint_cannot_load_into_crn_model(tmp_path, vocab):
    mlp = GhrVqaModel(vocab, 3, SMALL_MODEL.model_copy(update={"head": HeadKind.MLP}), seed=0)
    crn = GhrVqaModel(vocab, 3, SMALL_MODEL, seed=0)
    path = save_model_checkpoint(tmp_path / "mlp.ghrc", mlp)
    with pytest.raises(MissingTensor, match=r"crn\."):
        load_model_checkpoint(path, crn)


def test_question_width_must_match_model(vocab, person_cup_frame):
    model = GhrVqaModel(vocab, 3, SMALL_MODEL, seed=0)
    with pytest.raises(ShapeMismatch):
        model.forward(build_video_graph([person_cup_frame], vocab), np.zeros(D_Q + 1))


@pytest.mark.parametrize("head,encoder", [("crn", "hetedgegat"), ("mlp", "hetedgegat"), ("crn", "gine")])
def test_end_to_end_gradients(head, encoder):
    toy = toy_problem(seed=0, head=head, encoder=encoder)
    report = grad_check(toy.loss, toy.model.params)
    assert report.passed, f"max relative error {report.max_rel_error:.2e} at {report.worst_param}"
    assert report.checked > 0


# Acceptance runs

@pytest.mark.slow
def test_reference_training_reaches_high_accuracy(reference_dir, tmp_path):
    dataset = load_dataset_dir(reference_dir)
    model = GhrVqaModel(dataset.vocab, dataset.num_answers, ModelConfig(), seed=7)
    train(dataset, model, TrainConfig(threads=int(os.getenv("GHR_THREADS", "4"))), tmp_path)
    assert evaluate(dataset.train, ModelPredictor(model)).overall_accuracy >= 0.95


@pytest.mark.slow
def test_hierarchy_beats_baseline_on_cross_frame_questions(tmp_path):
    root = tmp_path / "cross"
    generate_synthetic(root, seed=7, cross_frame=True)
    dataset = load_dataset_dir(root)
    scores = {}
    for head in ("crn", "mlp"):
        accuracies = []
        for seed in (0, 1, 2):
            model = GhrVqaModel(dataset.vocab, dataset.num_answers, ModelConfig(head=head), seed=seed)
            train(dataset, model, TrainConfig(head=head, seed=seed), tmp_path / f"{head}{seed}")
            accuracies.append(evaluate(dataset.train, ModelPredictor(model)).overall_accuracy)
        scores[head] = float(np.mean(accuracies))
    logger.info(f"cross-frame train accuracy: {scores}")
    assert scores["crn"] >= scores["mlp"]
