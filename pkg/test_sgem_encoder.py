#!/usr/bin/env python3
"""
Tests for the edge graph attention encoder over human-rooted video graphs.
"""

import logging

import numpy as np
import pytest
from pydantic import ValidationError

import tensor_engine as te
from scene_graph import parse_frame_graph
from sgem_encoder import (
    EncoderError,
    RelationSchema,
    SceneGraphEncoder,
    SgemConfig,
    UnmappedPredicate,
    aggregate_human_roots,
    build_schema,
)
from tensor_engine import ParameterSet, grad_check
from video_graph import GLOBAL_ROOT, SYNTHETIC_ROOT, NodeRef, build_video_graph

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

SMALL = dict(d_node=8, d_edge=4, heads=2, d_head=4, n_layers=2)


def create_encoder(vocab, seed=0, **overrides):
    config = SgemConfig(**{**SMALL, **overrides})
    return SceneGraphEncoder(ParameterSet(seed), vocab, config)


def leaky(x, slope=0.2):
    return x if x > 0 else slope * x


def oracle_encode(encoder, vg):
    """Dense per-node loop over the video graph, written independently of the layout code."""
    cfg, vocab, schema = encoder.config, encoder.vocab, encoder.schema
    p = {name: t.data.astype(np.float64) for name, t in encoder.params.items()}
    refs = vg.node_refs()
    row = {ref: i for i, ref in enumerate(refs)}

    x = np.zeros((len(refs), cfg.d_node))
    for ref in refs:
        if ref == GLOBAL_ROOT:
            x[row[ref]] = p["sgem.embed.root"][0]
        elif ref.node_id != SYNTHETIC_ROOT:
            node = vg.frames[ref.frame].node(ref.node_id)
            bx, by, bw, bh = node.bbox
            x[row[ref]] = p["sgem.embed.object"][node.class_index]
            if cfg.use_bbox_features:
                x[row[ref]] += np.array([bx, by, bw, bh, bw * bh]) @ p["sgem.bbox_proj"]

    edges = []
    for i, frame in enumerate(vg.frames):
        for e in frame.edges:
            edges.append((row[NodeRef(i, e.subject_id)], row[NodeRef(i, e.object_id)],
                          schema.predicate_relation[e.predicate_index], p["sgem.embed.predicate"][e.predicate_index]))
    for i, h in vg.root_edges:
        edges.append((row[NodeRef(i, h)], row[GLOBAL_ROOT], schema.root_link, p["sgem.embed.root_link"][0]))

    for layer in range(cfg.n_layers):
        out = np.zeros((len(refs), cfg.d_out))
        for j in range(len(refs)):
            neighbors = {}
            for a, b, r, vec in edges:
                if a == j:
                    neighbors.setdefault(r, []).append((b, vec))
                if b == j:
                    neighbors.setdefault(r, []).append((a, vec))
            if not neighbors:
                out[j] = x[j] @ p[f"sgem.layer{layer}.rel0.theta_s"]
                continue
            for r, items in neighbors.items():
                out[j] += x[j] @ p[f"sgem.layer{layer}.rel{r}.theta_s"]
                for h in range(cfg.heads):
                    prefix = f"sgem.layer{layer}.rel{r}.head{h}"
                    tv, tev, attn = p[f"{prefix}.theta_v"], p[f"{prefix}.theta_e"], p[f"{prefix}.attn"][:, 0]
                    query = x[j] @ tv
                    scores, values = [], []
                    for k, vec in items:
                        key, edge = x[k] @ tv, vec @ tev
                        scores.append(leaky(float(np.concatenate([query, key, edge]) @ attn), cfg.leaky_slope))
                        values.append(key + edge)
                    weights = np.exp(np.array(scores) - max(scores))
                    weights /= weights.sum()
                    for w, v in zip(weights, values):
                        out[j, h * cfg.d_head:(h + 1) * cfg.d_head] += w * v
        if layer < cfg.n_layers - 1:
            out = np.where(out > 0, out, np.expm1(np.minimum(out, 0.0)))
        x = out
    return x[[row[ref] for ref in vg.human_refs()]]


def test_matches_dense_oracle_on_random_graphs(vocab, random_video, as_float64):
    rng = np.random.default_rng(21)
    for trial in range(20):
        encoder = create_encoder(vocab, seed=trial)
        vg = random_video(rng, vocab, max_frames=3, video_id=f"v{trial}")
        expected = oracle_encode(encoder, vg)

        single = encoder.encode_video_graph(vg).frame_embeddings.data
        assert single.shape == (vg.frame_count, encoder.config.d_out)
        assert np.abs(single - expected).max() < 1e-6

        with as_float64(encoder.params), te.precision(np.float64):
            double = encoder.encode_video_graph(vg).frame_embeddings.data
        assert np.abs(double - expected).max() < 1e-6


def test_parameter_names(vocab):
    encoder = create_encoder(vocab)
    names = set(encoder.params.names())
    # holding, touching, root-link
    assert encoder.schema.count == 3
    for layer in range(2):
        for r in range(3):
            assert f"sgem.layer{layer}.rel{r}.theta_s" in names
            for h in range(2):
                assert f"sgem.layer{layer}.rel{r}.head{h}.attn" in names
    assert encoder.params["sgem.layer0.rel0.theta_s"].shape == (8, 8)
    assert encoder.params["sgem.layer1.rel0.head0.theta_v"].shape == (8, 4)
    assert encoder.params["sgem.layer0.rel1.head1.attn"].shape == (12, 1)
    assert "sgem.embed.root_link" in encoder.relation_param_names(encoder.schema.root_link)


def test_attention_sums_to_one_and_single_neighbor_gets_all(vocab, random_video):
    rng = np.random.default_rng(4)
    for trial in range(10):
        encoder = create_encoder(vocab, seed=trial)
        vg = random_video(rng, vocab, video_id=f"v{trial}")
        for report in encoder.attention_report(vg):
            totals = {}
            for entry in report.entries:
                totals[(entry.relation, entry.head)] = totals.get((entry.relation, entry.head), 0.0) + entry.weight
                if entry.relation == "root-link":
                    # the global root is the only root-link neighbour of a human
                    assert entry.neighbor == GLOBAL_ROOT
                    assert entry.weight == pytest.approx(1.0, abs=1e-7)
            for total in totals.values():
                assert total == pytest.approx(1.0, abs=1e-6)


def test_zero_attention_vector_gives_uniform_weights(vocab, frame_doc):
    encoder = create_encoder(vocab, n_layers=1)
    for name in encoder.params.names():
        if name.endswith(".attn"):
            encoder.params[name].data[:] = 0.0
    doc = frame_doc("f", [(0, "person", (0.1, 0.1, 0.5, 0.6)), (1, "cup", (0.6, 0.1, 0.1, 0.1)),
                          (2, "table", (0.6, 0.5, 0.3, 0.3)), (3, "phone", (0.0, 0.8, 0.1, 0.1))],
                    [(0, "holding", 1), (0, "holding", 2), (3, "holding", 0)])
    vg = build_video_graph([parse_frame_graph(doc, vocab)], vocab)
    entries = [e for e in encoder.attention_report(vg)[0].entries if e.relation == "holding"]
    assert len(entries) == 3 * 2
    for entry in entries:
        assert entry.weight == pytest.approx(1.0 / 3.0, abs=1e-7)


def _identity_encoder(vocab):
    encoder = create_encoder(vocab, d_node=2, d_edge=2, heads=1, d_head=2, n_layers=1, use_bbox_features=False)
    p = encoder.params
    for name in p.names():
        p[name].data[:] = 0.0
    p["sgem.embed.object"].data[vocab.object_index("person")] = [1.0, 0.0]
    p["sgem.embed.object"].data[vocab.object_index("cup")] = [0.0, 2.0]
    for r in range(encoder.schema.count):
        p[f"sgem.layer0.rel{r}.theta_s"].data[:] = np.eye(2)
        p[f"sgem.layer0.rel{r}.head0.theta_v"].data[:] = np.eye(2)
    return encoder


def test_identity_parameters_sum_self_and_neighbor(vocab, person_cup_frame):
    encoder = _identity_encoder(vocab)
    out = encoder.encode_frame_graph(person_cup_frame)
    assert out.node_embeddings.data.tolist() == [[1.0, 2.0], [1.0, 2.0]]
    assert out.frame_embeddings.data.tolist() == [[1.0, 2.0]]


def test_isolated_node_uses_default_self_transform(vocab, frame_doc):
    encoder = create_encoder(vocab, n_layers=1)
    frame = parse_frame_graph(frame_doc("f", [(0, "person", (0.1, 0.2, 0.3, 0.4))]), vocab)
    p = {name: t.data.astype(np.float64) for name, t in encoder.params.items()}
    features = p["sgem.embed.object"][0] + np.array([0.1, 0.2, 0.3, 0.4, 0.12]) @ p["sgem.bbox_proj"]
    expected = features @ p["sgem.layer0.rel0.theta_s"]
    out = encoder.encode_frame_graph(frame).node_embeddings.data
    assert np.allclose(out[0], expected, atol=1e-5)


def test_initial_features(vocab, frame_doc):
    encoder = create_encoder(vocab)
    frames = [
        parse_frame_graph(frame_doc("a", [(0, "cup", (0.1, 0.1, 0.2, 0.2))]), vocab),
        parse_frame_graph(frame_doc("b", [(4, "person", (0, 0, 0.5, 0.5))]), vocab),
    ]
    vg = build_video_graph(frames, vocab, no_human_policy="synthetic")
    layout = encoder.layout(vg)
    x = encoder.init_node_features(layout).data
    p = encoder.params
    assert x.shape == (4, 8)
    assert np.array_equal(x[layout.row_of(GLOBAL_ROOT)], p["sgem.embed.root"].data[0])
    assert not x[layout.row_of(NodeRef(0, SYNTHETIC_ROOT))].any()
    expected = p["sgem.embed.object"].data[vocab.object_index("person")] + np.array([0, 0, 0.5, 0.5, 0.25]) @ p["sgem.bbox_proj"].data
    assert np.allclose(x[layout.row_of(NodeRef(1, 4))], expected, atol=1e-6)


def _permuted(doc, order):
    """Same frame with node ids relabelled and objects listed in a different order."""
    relabel = {obj["id"]: 10 + new for new, obj in enumerate(doc["objects"])}
    objects = [dict(doc["objects"][i], id=relabel[doc["objects"][i]["id"]]) for i in order]
    relationships = [{"subject": relabel[r["subject"]], "predicate": r["predicate"], "object": relabel[r["object"]]}
                     for r in doc["relationships"]]
    return dict(doc, objects=objects, relationships=relationships[::-1])


def test_frame_embedding_is_invariant_to_node_relabelling(vocab, random_doc, as_float64):
    rng = np.random.default_rng(13)
    for trial in range(50):
        encoder = create_encoder(vocab, seed=trial)
        docs = [random_doc(rng, vocab, f"v{trial}-{i}") for i in range(int(rng.integers(1, 4)))]
        shuffled = [_permuted(d, rng.permutation(len(d["objects"]))) for d in docs]
        with as_float64(encoder.params), te.precision(np.float64):
            a = encoder.encode_video_graph(build_video_graph([parse_frame_graph(d, vocab) for d in docs], vocab))
            b = encoder.encode_video_graph(build_video_graph([parse_frame_graph(d, vocab) for d in shuffled], vocab))
        assert np.abs(a.frame_embeddings.data - b.frame_embeddings.data).max() < 1e-6, trial


def test_frames_are_isolated_when_root_links_are_silenced(vocab, random_video, as_float64):
    rng = np.random.default_rng(8)
    for trial in range(10):
        encoder = create_encoder(vocab, seed=trial)
        for name in encoder.relation_param_names(encoder.schema.root_link):
            encoder.params[name].data[:] = 0.0
        vg = random_video(rng, vocab, max_frames=4, video_id=f"v{trial}", human_edge=True)
        with as_float64(encoder.params), te.precision(np.float64):
            joint = encoder.encode_video_graph(vg).frame_embeddings.data
            alone = np.concatenate([encoder.encode_frame_graph(f).frame_embeddings.data for f in vg.frames])
        assert np.abs(joint - alone).max() < 1e-9


def _two_frame_docs(frame_doc, human_box):
    return [
        frame_doc("a", [(0, "person", (0.1, 0.1, 0.4, 0.5)), (1, "cup", (0.6, 0.6, 0.1, 0.1))], [(0, "holding", 1)]),
        frame_doc("b", [(0, "person", human_box), (1, "table", (0.5, 0.5, 0.4, 0.4))], [(0, "touching", 1)]),
    ]


@pytest.mark.parametrize("n_layers,changes", [(1, False), (2, True)])
def test_cross_frame_influence_needs_two_layers(vocab, frame_doc, as_float64, n_layers, changes):
    encoder = create_encoder(vocab, seed=5, n_layers=n_layers)
    with as_float64(encoder.params), te.precision(np.float64):
        outs = []
        for box in ((0.1, 0.1, 0.3, 0.3), (0.2, 0.3, 0.6, 0.5)):
            frames = [parse_frame_graph(d, vocab) for d in _two_frame_docs(frame_doc, box)]
            outs.append(encoder.encode_video_graph(build_video_graph(frames, vocab)).frame_embeddings.data[0])
    difference = np.abs(outs[0] - outs[1]).max()
    if changes:
        assert difference > 1e-6
    else:
        assert difference < 1e-12


def test_single_frame_video_shape(vocab, person_cup_frame):
    encoder = create_encoder(vocab)
    out = encoder.encode_video_graph(build_video_graph([person_cup_frame], vocab))
    assert out.frame_embeddings.shape == (1, 8)
    assert out.node_embeddings.shape == (3, 8)


def test_node_sum_readout(vocab, frame_doc):
    encoder = create_encoder(vocab, frame_readout="node_sum")
    frames = [parse_frame_graph(d, vocab) for d in _two_frame_docs(frame_doc, (0.1, 0.1, 0.3, 0.3))]
    vg = build_video_graph(frames, vocab)
    out = encoder.encode_video_graph(vg)
    nodes = out.node_embeddings.data
    assert np.allclose(out.frame_embeddings.data[0], nodes[0] + nodes[1], atol=1e-6)
    assert np.allclose(out.frame_embeddings.data[1], nodes[2] + nodes[3], atol=1e-6)


def test_encoder_variants(vocab, person_cup_frame):
    vg = build_video_graph([person_cup_frame, person_cup_frame], vocab)

    edgegat = create_encoder(vocab, encoder="edgegat")
    assert edgegat.schema.names == ("edge",)
    assert not edgegat.params.with_prefix("sgem.layer0.rel1.")
    assert edgegat.encode_video_graph(vg).frame_embeddings.shape == (2, 8)

    gine = create_encoder(vocab, encoder="gine")
    assert "sgem.layer1.gine.eps" in gine.params
    assert not gine.params.with_prefix("sgem.layer0.rel")
    assert gine.encode_video_graph(vg).frame_embeddings.shape == (2, 8)
    with pytest.raises(EncoderError):
        gine.attention_report(vg)


def test_predicate_families(vocab):
    families = {"contact": ["holding", "touching"]}
    schema = build_schema(vocab, SgemConfig(relation_grouping="families", families=families))
    assert schema.names == ("contact", "root-link")
    assert schema.predicate_relation == (0, 0)
    with pytest.raises(UnmappedPredicate):
        RelationSchema.from_families(vocab, {"contact": ["holding"]})
    with pytest.raises(ValidationError):
        SgemConfig(relation_grouping="families")


@pytest.mark.parametrize("encoder_kind", ["hetedgegat", "gine"])
def test_encoder_gradients(vocab, person_cup_frame, frame_doc, encoder_kind):
    encoder = create_encoder(vocab, seed=2, d_node=4, d_edge=3, heads=2, d_head=2, encoder=encoder_kind)
    frames = [person_cup_frame] + [parse_frame_graph(d, vocab) for d in _two_frame_docs(frame_doc, (0, 0, 0.3, 0.3))]
    vg = build_video_graph(frames, vocab)
    weights = np.random.default_rng(0).normal(size=(3, 4))

    def loss():
        frame_embeddings = encoder.encode_video_graph(vg).frame_embeddings
        return te.sum(frame_embeddings * te.tensor(weights))

    report = grad_check(loss, encoder.params)
    assert report.passed, f"max relative error {report.max_rel_error:.2e} at {report.worst_param}"


def test_aggregate_human_roots():
    total = aggregate_human_roots(te.tensor([[1.0, 2.0], [3.0, 4.0]]))
    assert total.data.tolist() == [[4.0, 6.0]]
    with pytest.raises(te.EmptyInput):
        aggregate_human_roots(te.zeros((0, 2)))
