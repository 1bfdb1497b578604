#!/usr/bin/env python3
"""
Scene Graph Encoding Module
Multi-head, per-relation edge graph attention over the human-rooted video graph.

Each layer computes, for every node j and relation r incident to j,

    Θ_s[r]·n_j + ‖_h Σ_k α[j,r,k,h] · (Θ_v[r,h]·n_k + Θ_e[r,h]·e_jk)

with α the per-destination softmax of LeakyReLU(a[r,h] · [Θ_v n_j ‖ Θ_v n_k ‖ Θ_e e_jk]),
and sums the per-relation results. Nodes without any edge pass through the
self transform of relation 0.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

import tensor_engine as te
from scene_graph.main import FrameSceneGraph, Vocabulary
from tensor_engine import ParameterSet, Tensor
from video_graph.main import NodeRef, VideoGraph

from .layout import (
    ROOT_LINK_KIND,
    EncoderError,
    GraphLayout,
    RelationMessages,
    RelationSchema,
    layout_frame_graph,
    layout_video_graph,
)

logger = logging.getLogger(__name__)

DEFAULT_RELATION = 0


class EncoderKind(str, Enum):
    HETEDGEGAT = "hetedgegat"
    EDGEGAT = "edgegat"
    GINE = "gine"


class RelationGrouping(str, Enum):
    PER_PREDICATE = "per_predicate"
    FAMILIES = "families"


class FrameReadout(str, Enum):
    HUMAN_ROOT = "human_root"
    NODE_SUM = "node_sum"


class SgemConfig(BaseModel):
    d_node: int = Field(64, ge=1)
    d_edge: int = Field(32, ge=1)
    heads: int = Field(4, ge=1)
    d_head: int = Field(16, ge=1)
    n_layers: int = Field(2, ge=1)
    leaky_slope: float = Field(0.2, gt=0.0, lt=1.0)
    relation_grouping: RelationGrouping = RelationGrouping.PER_PREDICATE
    families: Optional[Dict[str, List[str]]] = None
    use_bbox_features: bool = True
    encoder: EncoderKind = EncoderKind.HETEDGEGAT
    frame_readout: FrameReadout = FrameReadout.HUMAN_ROOT
    inter_layer_activation: bool = True

    @model_validator(mode="after")
    def _families_present(self):
        if self.relation_grouping is RelationGrouping.FAMILIES and not self.families:
            raise ValueError("relation_grouping 'families' needs a non-empty 'families' mapping")
        return self

    @property
    def d_out(self) -> int:
        return self.heads * self.d_head

    def layer_width(self, layer: int) -> int:
        return self.d_node if layer == 0 else self.d_out


class EncodedVideo(NamedTuple):
    frame_embeddings: Tensor
    node_embeddings: Tensor


@dataclass
class AttentionEntry:
    relation: str
    head: int
    neighbor: NodeRef
    neighbor_class: Optional[int]
    weight: float


@dataclass
class HumanAttention:
    frame: int
    human: NodeRef
    entries: List[AttentionEntry] = field(default_factory=list)


def build_schema(vocab: Vocabulary, config: SgemConfig) -> RelationSchema:
    if config.encoder is not EncoderKind.HETEDGEGAT:
        return RelationSchema.homogeneous(vocab)
    if config.relation_grouping is RelationGrouping.FAMILIES:
        return RelationSchema.from_families(vocab, config.families)
    return RelationSchema.per_predicate(vocab)


class SceneGraphEncoder:
    """Registers the encoder's parameters in ``params`` and runs the forward pass."""

    def __init__(self, params: ParameterSet, vocab: Vocabulary, config: Optional[SgemConfig] = None):
        self.params = params
        self.vocab = vocab
        self.config = config or SgemConfig()
        self.schema = build_schema(vocab, self.config)
        self._register()

    def _register(self) -> None:
        cfg, p = self.config, self.params
        p.embedding("sgem.embed.object", self.vocab.num_objects, cfg.d_node)
        p.embedding("sgem.embed.predicate", max(self.vocab.num_predicates, 1), cfg.d_edge)
        p.embedding("sgem.embed.root", 1, cfg.d_node)
        p.embedding("sgem.embed.root_link", 1, cfg.d_edge)
        if cfg.use_bbox_features:
            p.matrix("sgem.bbox_proj", 5, cfg.d_node)
        for layer in range(cfg.n_layers):
            d_in = cfg.layer_width(layer)
            if cfg.encoder is EncoderKind.GINE:
                prefix = f"sgem.layer{layer}.gine"
                p.constant(f"{prefix}.eps", (1, 1))
                p.matrix(f"{prefix}.edge_proj", cfg.d_edge, d_in)
                p.matrix(f"{prefix}.w1", d_in, cfg.d_out)
                p.bias(f"{prefix}.b1", cfg.d_out)
                p.matrix(f"{prefix}.w2", cfg.d_out, cfg.d_out)
                p.bias(f"{prefix}.b2", cfg.d_out)
                continue
            for r in range(self.schema.count):
                p.matrix(f"sgem.layer{layer}.rel{r}.theta_s", d_in, cfg.d_out)
                for h in range(cfg.heads):
                    prefix = f"sgem.layer{layer}.rel{r}.head{h}"
                    p.matrix(f"{prefix}.theta_v", d_in, cfg.d_head)
                    p.matrix(f"{prefix}.theta_e", cfg.d_edge, cfg.d_head)
                    p.matrix(f"{prefix}.attn", 3 * cfg.d_head, 1)

    def relation_param_names(self, relation: int) -> List[str]:
        return [n for n in self.params.names() if f".rel{relation}." in n] + \
            (["sgem.embed.root_link"] if relation == self.schema.root_link else [])

    def layout(self, vg: VideoGraph) -> GraphLayout:
        return layout_video_graph(vg, self.schema)

    def init_node_features(self, layout: GraphLayout) -> Tensor:
        """[N × d_node]: class embedding (+ projected box), root embedding, zero placeholders."""
        p = self.params
        blocks = []
        if layout.entity_rows.size:
            feats = te.embedding_lookup(p["sgem.embed.object"], layout.entity_classes)
            if self.config.use_bbox_features:
                feats = te.add(feats, te.matmul(te.tensor(layout.entity_geometry), p["sgem.bbox_proj"]))
            blocks.append(feats)
        if layout.root_row is not None:
            blocks.append(p["sgem.embed.root"])
        if layout.placeholder_rows.size:
            blocks.append(te.zeros((layout.placeholder_rows.size, self.config.d_node)))
        stacked = te.concat(blocks, axis=0)
        return te.embedding_lookup(stacked, layout.assembly_order)

    def edge_features(self) -> Tensor:
        """Predicate embeddings followed by the root-link embedding (row index -1 → last)."""
        p = self.params
        return te.concat([p["sgem.embed.predicate"], p["sgem.embed.root_link"]], axis=0)

    def _edge_rows(self, messages: RelationMessages) -> np.ndarray:
        table_rows = self.params["sgem.embed.predicate"].shape[0]
        return np.where(messages.edge_kind == ROOT_LINK_KIND, table_rows, messages.edge_kind)

    def attention_coefficients(self, layer: int, relation: int, head: int, node_feats: Tensor,
                               edge_feats: Tensor, messages: RelationMessages) -> Tensor:
        """α per directed message of ``relation``; sums to 1 over each destination's messages."""
        prefix = f"sgem.layer{layer}.rel{relation}.head{head}"
        theta_v = self.params[f"{prefix}.theta_v"]
        query = te.matmul(te.embedding_lookup(node_feats, messages.dst), theta_v)
        key = te.matmul(te.embedding_lookup(node_feats, messages.src), theta_v)
        edge = te.matmul(edge_feats, self.params[f"{prefix}.theta_e"])
        return self._alpha(prefix, query, key, edge, messages)

    def _alpha(self, prefix: str, query: Tensor, key: Tensor, edge: Tensor, messages: RelationMessages) -> Tensor:
        scores = te.matmul(te.concat([query, key, edge], axis=1), self.params[f"{prefix}.attn"])
        scores = te.leaky_relu(te.reshape(scores, (messages.count,)), self.config.leaky_slope)
        return te.segment_softmax(scores, messages.dst)

    def edge_gat_layer(self, layer: int, node_feats: Tensor, layout: GraphLayout,
                       trace: Optional[Dict[Tuple[int, int], np.ndarray]] = None) -> Tensor:
        cfg, p = self.config, self.params
        n = layout.node_count
        if node_feats.shape != (n, cfg.layer_width(layer)):
            raise te.ShapeMismatch(f"layer {layer} expects node features [{n} × {cfg.layer_width(layer)}], "
                                   f"got {node_feats.shape}")
        if cfg.encoder is EncoderKind.GINE:
            return self._gine_layer(layer, node_feats, layout)

        edge_table = self.edge_features()
        terms: List[Tensor] = []
        if layout.isolated.size:
            own = te.embedding_lookup(node_feats, layout.isolated)
            own = te.matmul(own, p[f"sgem.layer{layer}.rel{DEFAULT_RELATION}.theta_s"])
            terms.append(te.segment_sum(own, layout.isolated, n))

        for r, messages in enumerate(layout.relations):
            if messages.count == 0:
                continue
            own = te.matmul(te.embedding_lookup(node_feats, messages.incident), p[f"sgem.layer{layer}.rel{r}.theta_s"])
            terms.append(te.segment_sum(own, messages.incident, n))

            edge_feats = te.embedding_lookup(edge_table, self._edge_rows(messages))
            src_feats = te.embedding_lookup(node_feats, messages.src)
            dst_feats = te.embedding_lookup(node_feats, messages.dst)
            heads = []
            for h in range(cfg.heads):
                prefix = f"sgem.layer{layer}.rel{r}.head{h}"
                theta_v = p[f"{prefix}.theta_v"]
                key = te.matmul(src_feats, theta_v)
                edge = te.matmul(edge_feats, p[f"{prefix}.theta_e"])
                alpha = self._alpha(prefix, te.matmul(dst_feats, theta_v), key, edge, messages)
                if trace is not None:
                    trace[(r, h)] = alpha.data.copy()
                weighted = te.mul(te.add(key, edge), te.reshape(alpha, (messages.count, 1)))
                heads.append(te.segment_sum(weighted, messages.dst, n))
            terms.append(te.concat(heads, axis=1))

        out = terms[0]
        for term in terms[1:]:
            out = te.add(out, term)
        return out

    def _gine_layer(self, layer: int, node_feats: Tensor, layout: GraphLayout) -> Tensor:
        p = self.params
        prefix = f"sgem.layer{layer}.gine"
        n = layout.node_count
        combined = te.mul(node_feats, te.add(p[f"{prefix}.eps"], 1.0))
        messages = layout.relations[0]
        if messages.count:
            edge_feats = te.embedding_lookup(self.edge_features(), self._edge_rows(messages))
            incoming = te.relu(te.add(te.embedding_lookup(node_feats, messages.src),
                                      te.matmul(edge_feats, p[f"{prefix}.edge_proj"])))
            combined = te.add(combined, te.segment_sum(incoming, messages.dst, n))
        hidden = te.relu(te.add(te.matmul(combined, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return te.add(te.matmul(hidden, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _run_layers(self, layout: GraphLayout, trace: Optional[Dict] = None) -> Tensor:
        h = self.init_node_features(layout)
        last = self.config.n_layers - 1
        for layer in range(self.config.n_layers):
            h = self.edge_gat_layer(layer, h, layout, trace if layer == last else None)
            if layer < last and self.config.inter_layer_activation:
                h = te.elu(h)
        return h

    def readout(self, node_embeddings: Tensor, layout: GraphLayout) -> Tensor:
        if self.config.frame_readout is FrameReadout.NODE_SUM:
            members = np.flatnonzero(layout.frame_of_row >= 0)
            return te.segment_sum(te.embedding_lookup(node_embeddings, members),
                                  layout.frame_of_row[members], layout.frame_count)
        return te.embedding_lookup(node_embeddings, layout.human_rows)

    def encode_video_graph(self, vg: VideoGraph, layout: Optional[GraphLayout] = None) -> EncodedVideo:
        layout = layout or self.layout(vg)
        nodes = self._run_layers(layout)
        return EncodedVideo(self.readout(nodes, layout), nodes)

    def encode_frame_graph(self, frame: FrameSceneGraph) -> EncodedVideo:
        """Encode one frame with no global root; readout is its human root."""
        layout = layout_frame_graph(frame, self.vocab, self.schema)
        nodes = self._run_layers(layout)
        return EncodedVideo(self.readout(nodes, layout), nodes)

    def attention_report(self, vg: VideoGraph) -> List[HumanAttention]:
        """Final-layer attention weights on each frame's human root, per relation and head."""
        if self.config.encoder is EncoderKind.GINE:
            raise EncoderError("The GINE encoder has no attention weights to report")
        layout = self.layout(vg)
        trace: Dict[Tuple[int, int], np.ndarray] = {}
        self._run_layers(layout, trace)

        classes = {int(row): int(c) for row, c in zip(layout.entity_rows, layout.entity_classes)}
        if layout.root_row is not None:
            classes[layout.root_row] = vg.root_class_index
        reports = []
        for frame, human_row in enumerate(layout.human_rows):
            report = HumanAttention(frame, layout.refs[human_row])
            for (r, h), alpha in sorted(trace.items()):
                messages = layout.relations[r]
                for m in np.flatnonzero(messages.dst == human_row):
                    src = int(messages.src[m])
                    report.entries.append(AttentionEntry(self.schema.names[r], h, layout.refs[src],
                                                         classes.get(src), float(alpha[m])))
            reports.append(report)
        return reports


def aggregate_human_roots(frame_embeddings: Tensor) -> Tensor:
    """Sum over frames: [n_frames × d_out] → [1 × d_out]."""
    if frame_embeddings.ndim != 2 or frame_embeddings.shape[0] < 1:
        raise te.EmptyInput(f"aggregate_human_roots needs ≥1 frame, got shape {frame_embeddings.shape}")
    return te.sum(frame_embeddings, axis=0, keepdims=True)
