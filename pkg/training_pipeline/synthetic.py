"""Seeded synthetic scene-graph QA datasets and a rule-based answer oracle."""

import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from hierarchical_crn.main import CrnConfig
from question_encoding.main import toy_embed
from scene_graph.main import Vocabulary, parse_frame_graph
from sgem_encoder.main import SgemConfig
from video_graph.main import VideoGraph, build_video_graph

from .main import CATEGORIES, EVAL_FRACTION, DatasetError, DatasetItem
from .model import GhrVqaModel, ModelConfig

logger = logging.getLogger(__name__)

HUMAN_CLASS = "person"
OBJECT_NAMES = ("cup", "table", "phone", "book", "laptop", "chair", "door", "bag", "towel", "food",
                "shoe", "pillow", "blanket", "window", "bottle", "box", "shelf", "mirror", "broom", "sofa")
PREDICATE_NAMES = ("holding", "touching", "looking at", "wearing", "sitting on", "leaning on",
                   "carrying", "drinking from", "eating", "opening", "closing", "covered by")

SIMPLE_QUESTION = re.compile(r"^what is the person (?P<p>.+)\?$")
CROSS_FRAME_QUESTION = re.compile(r"^what was the person (?P<p1>.+) after (?P<p2>.+)\?$")


class SyntheticConfigError(DatasetError):
    pass


@dataclass
class SyntheticSummary:
    out_dir: Path
    videos: int
    frames: int
    questions: int
    train_videos: int
    eval_videos: int
    answers: List[str]


def _names(pool: Tuple[str, ...], count: int, stem: str) -> List[str]:
    names = list(pool[:count])
    names.extend(f"{stem}{i}" for i in range(len(names), count))
    return names


def synthetic_vocabulary(n_objects: int, n_predicates: int) -> Vocabulary:
    """``n_objects`` classes including the human class, ``n_predicates`` predicates."""
    return Vocabulary(tuple([HUMAN_CLASS] + _names(OBJECT_NAMES, n_objects - 1, "object")),
                      tuple(_names(PREDICATE_NAMES, n_predicates, "relation")),
                      frozenset({HUMAN_CLASS}))


def _box(rng: np.random.Generator, low: float, high: float) -> List[float]:
    # Four decimals; the origin is rounded down so the box stays inside the image.
    w, h = (round(float(v), 4) for v in rng.uniform(low, high, size=2))
    x, y = (math.floor(float(rng.uniform(0.0, 1.0 - s)) * 1e4) / 1e4 for s in (w, h))
    return [x, y, w, h]


class _FrameWriter:
    def __init__(self, video_id: str, index: int, rng: np.random.Generator):
        self.rng = rng
        self.doc: Dict[str, Any] = {"frame_id": f"{video_id}-f{index}", "objects": [], "relationships": []}
        self._add_object(HUMAN_CLASS, _box(rng, 0.4, 0.6))

    def _add_object(self, label: str, bbox: List[float]) -> int:
        node_id = len(self.doc["objects"])
        self.doc["objects"].append({"id": node_id, "label": label, "bbox": bbox})
        return node_id

    def link(self, label: str, predicate: Optional[str]) -> None:
        node_id = self._add_object(label, _box(self.rng, 0.05, 0.3))
        if predicate is not None:
            self.doc["relationships"].append({"subject": 0, "predicate": predicate, "object": node_id})


def _validate(n_videos: int, frames: int, n_objects: int, n_predicates: int, n_answers: int,
              cross_frame: bool) -> None:
    if min(n_videos, frames, n_objects, n_predicates) < 1:
        raise SyntheticConfigError("videos, frames, objects and predicates must all be >= 1")
    if not 2 <= n_answers <= n_objects - 1:
        raise SyntheticConfigError(f"answers must satisfy 2 <= K <= objects-1 = {n_objects - 1}, got {n_answers}")
    if cross_frame and (frames < 3 or n_predicates < 2):
        raise SyntheticConfigError("--cross-frame needs at least 3 frames and 2 predicates")


def _simple_video(video_id: str, frames: int, vocab: Vocabulary, answer: str,
                  rng: np.random.Generator) -> Tuple[List[Dict[str, Any]], str]:
    predicates = list(vocab.predicate_classes)
    target = predicates[int(rng.integers(len(predicates)))]
    others = [p for p in predicates if p != target]
    distractors = [c for c in vocab.object_classes if c != HUMAN_CLASS]
    evidence = int(rng.integers(frames))
    docs = []
    for f in range(frames):
        writer = _FrameWriter(video_id, f, rng)
        n_extra = int(rng.integers(1, 4)) - (1 if f == evidence else 0)
        if f == evidence:
            writer.link(answer, target)
        for _ in range(n_extra):
            label = distractors[int(rng.integers(len(distractors)))]
            writer.link(label, others[int(rng.integers(len(others)))] if others else None)
        docs.append(writer.doc)
    return docs, f"what is the person {target}?"


def _cross_frame_video(video_id: str, frames: int, vocab: Vocabulary, answer: str,
                       rng: np.random.Generator) -> Tuple[List[Dict[str, Any]], str]:
    predicates = list(vocab.predicate_classes)
    first, second = (predicates[int(i)] for i in rng.choice(len(predicates), size=2, replace=False))
    others = [p for p in predicates if p not in (first, second)]
    distractors = [c for c in vocab.object_classes if c != HUMAN_CLASS]
    decoys = [c for c in distractors if c != answer]
    anchor = int(rng.integers(1, frames - 1))
    before = int(rng.integers(0, anchor))
    after = int(rng.integers(anchor + 1, frames))
    docs = []
    for f in range(frames):
        writer = _FrameWriter(video_id, f, rng)
        if f == before:
            writer.link(decoys[int(rng.integers(len(decoys)))], first)
        elif f == anchor:
            writer.link(distractors[int(rng.integers(len(distractors)))], second)
        elif f == after:
            writer.link(answer, first)
        else:
            label = distractors[int(rng.integers(len(distractors)))]
            writer.link(label, others[int(rng.integers(len(others)))] if others else None)
        docs.append(writer.doc)
    return docs, f"what was the person {first} after {second}?"


def _dump(path: Path, doc: Any) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def generate_synthetic(out_dir: Union[str, Path], seed: int = 7, n_videos: int = 50, frames_per_video: int = 8,
                       n_objects: int = 10, n_predicates: int = 5, n_answers: int = 8,
                       cross_frame: bool = False) -> SyntheticSummary:
    """Write a dataset directory whose answers are a deterministic function of the graphs.

    Answers cycle over the first K non-human classes so the answer distribution
    is balanced; categories cycle over the question taxonomy.
    """
    _validate(n_videos, frames_per_video, n_objects, n_predicates, n_answers, cross_frame)
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    vocab = synthetic_vocabulary(n_objects, n_predicates)
    answers = [c for c in vocab.object_classes if c != HUMAN_CLASS][:n_answers]
    rng = np.random.default_rng(seed)
    make_video = _cross_frame_video if cross_frame else _simple_video

    qa_rows = []
    video_ids = []
    for v in range(n_videos):
        video_id = f"video{v:04d}"
        answer = answers[v % n_answers]
        frames, question = make_video(video_id, frames_per_video, vocab, answer, rng)
        _dump(out / "videos" / f"{video_id}.json", {"video_id": video_id, "frames": frames})
        qa_rows.append({"qa_id": f"qa{v:04d}", "video_id": video_id, "question": question,
                        "answer": answer, "category": CATEGORIES[v % (len(CATEGORIES) - 1)]})
        video_ids.append(video_id)

    n_eval = int(n_videos * EVAL_FRACTION)
    split = {"train": video_ids[:n_videos - n_eval], "eval": video_ids[n_videos - n_eval:]}
    _dump(out / "vocab.json", vocab.to_doc())
    _dump(out / "answers.json", answers)
    _dump(out / "split.json", split)
    with open(out / "qa.jsonl", "w", encoding="utf-8") as f:
        for row in qa_rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    logger.info(f"Generated {n_videos} synthetic videos ({frames_per_video} frames each) under {out}")
    return SyntheticSummary(out, n_videos, n_videos * frames_per_video, len(qa_rows),
                            len(split["train"]), len(split["eval"]), answers)


class RuleBasedOracle:
    """Answers synthetic questions by scanning the human's outgoing edges frame by frame."""

    def __init__(self, vocab: Vocabulary, answers: List[str]):
        self.vocab = vocab
        self.answer_index = {a: i for i, a in enumerate(answers)}

    def _human_links(self, vg: VideoGraph, frame: int) -> List[Tuple[str, str]]:
        g = vg.frames[frame]
        human = vg.human_root_ids[frame]
        return [(self.vocab.predicate_classes[e.predicate_index],
                 self.vocab.object_classes[g.node(e.object_id).class_index])
                for e in g.edges if e.subject_id == human]

    def answer(self, question: str, vg: VideoGraph) -> Optional[str]:
        match = CROSS_FRAME_QUESTION.match(question)
        if match:
            first, second = match.group("p1"), match.group("p2")
            anchor = next((f for f in range(vg.frame_count)
                           if any(p == second for p, _ in self._human_links(vg, f))), None)
            if anchor is None:
                return None
            for f in range(anchor + 1, vg.frame_count):
                for predicate, label in self._human_links(vg, f):
                    if predicate == first:
                        return label
            return None
        match = SIMPLE_QUESTION.match(question)
        if match:
            for f in range(vg.frame_count):
                for predicate, label in self._human_links(vg, f):
                    if predicate == match.group("p"):
                        return label
        return None

    def predict_item(self, item: DatasetItem) -> int:
        label = self.answer(item.sample.question_text, item.video)
        return self.answer_index.get(label, -1)


@dataclass
class ToyProblem:
    """A 2-frame video with a tiny model, small enough for exhaustive finite differences."""

    model: GhrVqaModel
    video: VideoGraph
    question: np.ndarray
    answer: int

    def loss(self):
        return self.model.loss(self.video, self.question, self.answer)


def toy_problem(seed: int = 0, head: str = "crn", encoder: str = "hetedgegat") -> ToyProblem:
    vocab = Vocabulary(("person", "cup", "table"), ("holding", "touching"), frozenset({"person"}))
    frames = [
        {"frame_id": "toy-0",
         "objects": [{"id": 0, "label": "person", "bbox": [0.1, 0.1, 0.5, 0.6]},
                     {"id": 1, "label": "cup", "bbox": [0.4, 0.5, 0.1, 0.1]},
                     {"id": 2, "label": "table", "bbox": [0.2, 0.6, 0.6, 0.3]}],
         "relationships": [{"subject": 0, "predicate": "holding", "object": 1},
                           {"subject": 1, "predicate": "touching", "object": 2}]},
        {"frame_id": "toy-1",
         "objects": [{"id": 0, "label": "table", "bbox": [0.3, 0.5, 0.5, 0.4]},
                     {"id": 1, "label": "person", "bbox": [0.2, 0.1, 0.4, 0.7]},
                     {"id": 2, "label": "person", "bbox": [0.7, 0.2, 0.1, 0.2]}],
         "relationships": [{"subject": 1, "predicate": "touching", "object": 0},
                           {"subject": 2, "predicate": "holding", "object": 0}]},
    ]
    video = build_video_graph([parse_frame_graph(f, vocab) for f in frames], vocab, video_id="toy")
    config = ModelConfig(
        sgem=SgemConfig(d_node=6, d_edge=4, heads=2, d_head=3, encoder=encoder),
        crn=CrnConfig(d=5, clip_length=3),
        d_q=8,
        head=head,
    )
    model = GhrVqaModel(vocab, 3, config, seed)
    question = toy_embed("what is the person holding", 8).vector
    return ToyProblem(model, video, question, answer=1)
