"""End-to-end model: SGEM encoder followed by the CRN hierarchy or the MLP baseline."""

import logging
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

import tensor_engine as te
from hierarchical_crn.main import CrnConfig, HierarchicalReasoner, MlpBaselineHead
from scene_graph.main import Vocabulary
from sgem_encoder.layout import GraphLayout
from sgem_encoder.main import SceneGraphEncoder, SgemConfig, aggregate_human_roots
from tensor_engine import ParameterSet, Tensor
from video_graph.main import VideoGraph, plan_clips

logger = logging.getLogger(__name__)


class HeadKind(str, Enum):
    CRN = "crn"
    MLP = "mlp"


class ModelConfig(BaseModel):
    sgem: SgemConfig = Field(default_factory=SgemConfig)
    crn: CrnConfig = Field(default_factory=CrnConfig)
    d_q: int = Field(768, ge=1)
    head: HeadKind = HeadKind.CRN


class GhrVqaModel:
    """Owns one ParameterSet shared by the encoder and the selected head."""

    def __init__(self, vocab: Vocabulary, num_answers: int, config: Optional[ModelConfig] = None, seed: int = 0):
        self.vocab = vocab
        self.num_answers = num_answers
        self.config = config or ModelConfig()
        self.params = ParameterSet(seed)
        self.encoder = SceneGraphEncoder(self.params, vocab, self.config.sgem)
        d_in = self.config.sgem.d_out
        if self.config.head is HeadKind.CRN:
            self.head = HierarchicalReasoner(self.params, d_in, self.config.d_q, self.config.crn, num_answers)
        else:
            self.head = MlpBaselineHead(self.params, d_in, self.config.d_q, self.config.crn, num_answers)
        self._layouts: Dict[str, Tuple[VideoGraph, GraphLayout]] = {}
        logger.info(f"Model: {self.config.sgem.encoder.value} encoder + {self.config.head.value} head, "
                    f"{len(self.params)} tensors / {self.params.element_count} weights")

    def layout(self, vg: VideoGraph) -> GraphLayout:
        cached = self._layouts.get(vg.video_id)
        if cached is None or cached[0] is not vg:
            cached = (vg, self.encoder.layout(vg))
            self._layouts[vg.video_id] = cached
        return cached[1]

    def forward(self, vg: VideoGraph, question: np.ndarray, subset_seed: int = 0) -> Tensor:
        """[1 × K] logits for one (video, question) pair."""
        question = np.asarray(question).reshape(1, -1)
        if question.shape[1] != self.config.d_q:
            raise te.ShapeMismatch(f"question embedding has dim {question.shape[1]}, model expects {self.config.d_q}")
        frames, _ = self.encoder.encode_video_graph(vg, self.layout(vg))
        q = te.tensor(question)
        if self.config.head is HeadKind.CRN:
            plan = plan_clips(vg, self.config.crn.clip_length)
            return self.head.forward(frames, plan, q, subset_seed)
        return self.head.forward(aggregate_human_roots(frames), q)

    def loss(self, vg: VideoGraph, question: np.ndarray, answer: int, subset_seed: int = 0) -> Tensor:
        return te.softmax_cross_entropy(self.forward(vg, question, subset_seed), [answer])

    def predict(self, vg: VideoGraph, question: np.ndarray) -> int:
        return int(np.argmax(self.forward(vg, question).data[0]))
