#!/usr/bin/env python3
"""
Hierarchical Conditional Relation Network
Clip-level and video-level CRN units over per-frame human embeddings,
conditioned on the projected question, followed by the answer decoder.
"""

import itertools
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

import tensor_engine as te
from tensor_engine import ParameterSet, Tensor
from video_graph.main import ClipPlan

logger = logging.getLogger(__name__)

VIDEO_UNIT_ID = 0
EVAL_SUBSET_SEED = 0
# answer logits start near zero, so an untrained head predicts close to uniform
HEAD_OUTPUT_GAIN = 0.1


class CrnError(ValueError):
    """Base class for reasoning-head failures."""


class InvalidOrder(CrnError):
    pass


class CrnConfig(BaseModel):
    d: int = Field(32, ge=1)
    orders: Optional[List[int]] = None
    k_max: int = Field(4, ge=1)
    subsets_per_order: int = Field(3, ge=1)
    clip_length: int = Field(4, ge=1)
    hidden: Optional[int] = Field(None, ge=1)

    @field_validator("orders")
    @classmethod
    def _positive_orders(cls, value):
        if value is not None:
            if not value or any(k < 1 for k in value):
                raise ValueError(f"orders must be a non-empty list of positive integers, got {value}")
            value = sorted(set(value))
        return value

    @property
    def hidden_width(self) -> int:
        return self.hidden or self.d

    def orders_for(self, n: int) -> List[int]:
        """Relation orders a unit of arity n uses, ascending; orders above n are dropped."""
        if self.orders is not None:
            return [k for k in self.orders if k <= n]
        return list(range(1, max(1, min(n - 1, self.k_max)) + 1))


def sample_subsets(n: int, k: int, t: int, seed: int, unit_id: int) -> List[Tuple[int, ...]]:
    """``t`` distinct k-subsets of range(n), or all of them when C(n, k) ≤ t."""
    if not 1 <= k <= n:
        raise InvalidOrder(f"relation order k={k} needs 1 <= k <= n={n}")
    if t < 1:
        raise InvalidOrder(f"subset count t must be positive, got {t}")
    if math.comb(n, k) <= t:
        return list(itertools.combinations(range(n), k))
    rng = np.random.default_rng([seed, unit_id, n, k])
    chosen = set()
    while len(chosen) < t:
        chosen.add(tuple(sorted(int(i) for i in rng.choice(n, size=k, replace=False))))
    return sorted(chosen)


def _register_mlp(params: ParameterSet, prefix: str, d_in: int, hidden: int, d_out: int,
                  output_gain: float = 1.0) -> None:
    params.matrix(f"{prefix}.w1", d_in, hidden)
    params.bias(f"{prefix}.b1", hidden)
    params.matrix(f"{prefix}.w2", hidden, d_out, output_gain)
    params.bias(f"{prefix}.b2", d_out)


def _mlp(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    hidden = te.elu(te.add(te.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return te.add(te.matmul(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def decode_answer(video_vector: Tensor, q_projected: Tensor, params: ParameterSet) -> Tensor:
    """[1 × d], [1 × d] → [1 × K] logits from concat(v, q, v⊙q) through a 2-layer ELU MLP."""
    if video_vector.shape != q_projected.shape:
        raise te.ShapeMismatch(f"decode_answer: video {video_vector.shape} vs question {q_projected.shape}")
    fused = te.concat([video_vector, q_projected, te.mul(video_vector, q_projected)], axis=1)
    return _mlp(fused, params, "head")


def mlp_baseline_head(aggregate: Tensor, q: Tensor, params: ParameterSet) -> Tensor:
    """Summed human-root embedding ‖ projected question → 2-layer ELU MLP → [1 × K] logits."""
    projected = te.matmul(q, params["mlp.proj.question"])
    return _mlp(te.concat([aggregate, projected], axis=1), params, "head")


class MlpBaselineHead:
    """Registers the baseline head: question projection plus head.{w1,b1,w2,b2}."""

    def __init__(self, params: ParameterSet, d_in: int, d_q: int, config: CrnConfig, num_answers: int):
        self.params = params
        params.matrix("mlp.proj.question", d_q, config.d)
        _register_mlp(params, "head", d_in + config.d, config.hidden_width, num_answers, HEAD_OUTPUT_GAIN)

    def forward(self, aggregate: Tensor, q: Tensor) -> Tensor:
        return mlp_baseline_head(aggregate, q, self.params)


class HierarchicalReasoner:
    """Two-level CRN stack (clip, video) with the question as the shared condition."""

    def __init__(self, params: ParameterSet, d_in: int, d_q: int, config: CrnConfig, num_answers: int):
        if num_answers < 2:
            raise CrnError(f"answer decoder needs K >= 2, got {num_answers}")
        self.params = params
        self.config = config
        d, hidden = config.d, config.hidden_width
        params.matrix("crn.proj.frame", d_in, d)
        params.matrix("crn.proj.question", d_q, d)
        for level in ("clip", "video"):
            _register_mlp(params, f"crn.{level}.g", 2 * d, hidden, d)
            _register_mlp(params, f"crn.{level}.p", 2 * d, hidden, d)
        clip_orders = len(config.orders_for(config.clip_length))
        if clip_orders == 0:
            raise InvalidOrder(f"no configured order fits clip_length={config.clip_length}: {config.orders}")
        params.matrix("crn.clip_out_proj", clip_orders * d, d)
        _register_mlp(params, "head", 3 * d, hidden, num_answers, HEAD_OUTPUT_GAIN)

    def project_question(self, q: Tensor) -> Tensor:
        return te.matmul(q, self.params["crn.proj.question"])

    def _relation_features(self, x: Tensor, subsets: Sequence[Tuple[int, ...]], level: str) -> Tensor:
        """g over a batch of same-size subsets: MLP([mean ‖ max]) → [t × d]."""
        k = len(subsets[0])
        members = np.asarray(subsets, dtype=np.int64)
        owner = np.repeat(np.arange(len(subsets)), k)
        mean = te.scale(te.segment_sum(te.embedding_lookup(x, members.reshape(-1)), owner, len(subsets)), 1.0 / k)
        peak = te.embedding_lookup(x, members[:, 0])
        for j in range(1, k):
            peak = te.maximum(peak, te.embedding_lookup(x, members[:, j]))
        return _mlp(te.concat([mean, peak], axis=1), self.params, f"crn.{level}.g")

    def crn_unit(self, x: Tensor, condition: Tensor, level: str, seed: int, unit_id: int) -> List[Tensor]:
        """One [1 × d] vector per relation order k ≤ n, ascending in k."""
        n = x.shape[0] if x.ndim == 2 else 0
        if n < 1:
            raise te.EmptyInput(f"crn_unit ({level}) needs at least one input vector")
        outputs = []
        for k in self.config.orders_for(n):
            subsets = sample_subsets(n, k, self.config.subsets_per_order, seed, unit_id)
            relations = self._relation_features(x, subsets, level)
            tiled = te.embedding_lookup(condition, np.zeros(len(subsets), dtype=np.int64))
            fused = _mlp(te.concat([relations, tiled], axis=1), self.params, f"crn.{level}.p")
            outputs.append(te.mean(fused, axis=0, keepdims=True))
        return outputs

    def hierarchy_forward(self, frame_embeddings: Tensor, clip_plan: ClipPlan, q_projected: Tensor,
                          seed: int = EVAL_SUBSET_SEED) -> Tensor:
        """[n_frames × d_in] → [1 × d] video vector."""
        n_frames = frame_embeddings.shape[0]
        covered = {i for clip in clip_plan.clips for i in clip}
        if covered != set(range(n_frames)):
            raise CrnError(f"clip plan covers frames {sorted(covered)}, embeddings have {n_frames} rows")
        frames = te.matmul(frame_embeddings, self.params["crn.proj.frame"])
        clip_vectors = []
        for c, window in enumerate(clip_plan.clips):
            clip_input = te.embedding_lookup(frames, list(window))
            orders = self.crn_unit(clip_input, q_projected, "clip", seed, c + 1)
            clip_vectors.append(te.matmul(te.concat(orders, axis=1), self.params["crn.clip_out_proj"]))
        video_orders = self.crn_unit(te.concat(clip_vectors, axis=0), q_projected, "video", seed, VIDEO_UNIT_ID)
        if not video_orders:
            raise InvalidOrder(f"no configured order fits a video of {len(clip_vectors)} clip(s): {self.config.orders}")
        return te.mean(te.concat(video_orders, axis=0), axis=0, keepdims=True)

    def decode_answer(self, video_vector: Tensor, q_projected: Tensor) -> Tensor:
        return decode_answer(video_vector, q_projected, self.params)

    def forward(self, frame_embeddings: Tensor, clip_plan: ClipPlan, q: Tensor,
                seed: int = EVAL_SUBSET_SEED) -> Tensor:
        q_projected = self.project_question(q)
        return self.decode_answer(self.hierarchy_forward(frame_embeddings, clip_plan, q_projected, seed), q_projected)
