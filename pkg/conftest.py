"""Shared pytest fixtures for the GHR-VQA test suite."""

import os
from contextlib import contextmanager

import numpy as np
import pytest

from scene_graph.main import Vocabulary, parse_frame_graph
from video_graph.main import build_video_graph

RUN_SLOW = os.getenv("GHR_RUN_SLOW") == "1"

# reference material only
collect_ignore = ["examples"]


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance runs (set GHR_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="set GHR_RUN_SLOW=1 to run acceptance training")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def vocab():
    return Vocabulary(("person", "cup", "table", "phone"), ("holding", "touching"), frozenset({"person"}))


def make_frame_doc(frame_id, objects, relationships=()):
    """objects: (id, label, bbox) triples; relationships: (subject, predicate, object)."""
    return {
        "frame_id": frame_id,
        "objects": [{"id": i, "label": label, "bbox": list(bbox)} for i, label, bbox in objects],
        "relationships": [{"subject": s, "predicate": p, "object": o} for s, p, o in relationships],
    }


@pytest.fixture
def frame_doc():
    return make_frame_doc


@pytest.fixture
def person_cup_frame(vocab):
    doc = make_frame_doc("f0", [(0, "person", (0.1, 0.1, 0.5, 0.6)), (1, "cup", (0.5, 0.6, 0.1, 0.1))],
                         [(0, "holding", 1)])
    return parse_frame_graph(doc, vocab)


def random_frame_doc(rng, vocab, frame_id, max_nodes=6, human_edge=True):
    """A frame whose node 0 is its only human, plus random undirected edges."""
    n = int(rng.integers(2, max_nodes + 1))
    others = [c for c in vocab.object_classes if c not in vocab.human_class_names]
    objects = []
    for i in range(n):
        label = "person" if i == 0 else others[int(rng.integers(len(others)))]
        w, h = float(rng.uniform(0.05, 0.45)), float(rng.uniform(0.05, 0.45))
        objects.append((i, label, (float(rng.uniform(0, 1 - w)), float(rng.uniform(0, 1 - h)), w, h)))
    edges = []
    if human_edge:
        edges.append((0, vocab.predicate_classes[int(rng.integers(vocab.num_predicates))], int(rng.integers(1, n))))
    for _ in range(int(rng.integers(0, n + 1))):
        a, b = (int(v) for v in rng.choice(n, size=2, replace=False))
        edges.append((a, vocab.predicate_classes[int(rng.integers(vocab.num_predicates))], b))
    return make_frame_doc(frame_id, objects, edges)


@pytest.fixture
def random_doc():
    return random_frame_doc


@pytest.fixture
def random_video():
    def build(rng, vocab, max_frames=3, max_nodes=6, human_edge=True, video_id="v"):
        frames = [parse_frame_graph(random_frame_doc(rng, vocab, f"{video_id}-{i}", max_nodes, human_edge), vocab)
                  for i in range(int(rng.integers(1, max_frames + 1)))]
        return build_video_graph(frames, vocab, video_id=video_id)
    return build


@contextmanager
def float64_params(params):
    """Hold parameter values in float64 for the duration of the block."""
    originals = {name: t.data for name, t in params.items()}
    for _, t in params.items():
        t.data = t.data.astype(np.float64)
    try:
        yield params
    finally:
        for name, t in params.items():
            t.data = originals[name]


@pytest.fixture
def as_float64():
    return float64_params
