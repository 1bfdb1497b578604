#!/usr/bin/env python3
"""
GHR-VQA Pipeline
Command-line entry point: graph building, synthetic data, training, evaluation,
gradient checking and graph inspection.
"""

import argparse
import logging
import os
import sys
from itertools import combinations
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel

from scene_graph.main import Vocabulary, parse_vocabulary
from sgem_encoder.main import EncoderKind
from tensor_engine import ShapeMismatch
from tensor_engine.gradcheck import GradCheckReport, grad_check
from training_pipeline.main import (
    EVAL_REPORT,
    EvalReport,
    ModelPredictor,
    NonFiniteLoss,
    TrainConfig,
    TrainResult,
    config_fingerprint,
    evaluate,
    load_dataset_dir,
    load_video_document,
    model_config_for,
    model_from_checkpoint,
    train,
)
from training_pipeline.model import GhrVqaModel, HeadKind, ModelConfig
from training_pipeline.synthetic import RuleBasedOracle, generate_synthetic, toy_problem
from video_graph.main import NoHumanPolicy, VideoGraph, bfs_distance, load_video_graph, save_video_graph

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

RESOLVED_CONFIG = "resolved_config.json"


class ConfigError(ValueError):
    pass


class GradCheckFailed(ArithmeticError):
    pass


class CliConfig(BaseModel):
    command: str
    options: Dict[str, Any]


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """YAML (or JSON) mapping whose keys mirror the command's flags."""
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"{path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid config ({e})") from e
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return doc


def resolve_train_config(args: argparse.Namespace) -> Dict[str, Any]:
    doc = load_config_file(args.config)
    model_doc = doc.pop("model", {}) or {}
    unknown = sorted(set(doc) - set(TrainConfig.model_fields))
    if unknown:
        raise ConfigError(f"{args.config}: unknown config keys {unknown}")
    flags = {
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "epochs": args.epochs,
        "seed": args.seed,
        "clip_norm": args.clip_norm,
        "head": args.head,
        "encoder": args.encoder,
        "threads": args.threads,
        "no_human_policy": args.no_human,
    }
    doc.update({k: v for k, v in flags.items() if v is not None})
    if args.d_q is not None:
        model_doc["d_q"] = args.d_q
    train_config = TrainConfig.model_validate(doc)
    model_config = model_config_for(train_config, ModelConfig.model_validate(model_doc))
    return {"train": train_config, "model": model_config}


class GhrVqaPipeline:
    """Runs one subcommand at a time; results print, diagnostics log."""

    def __init__(self, threads: int = 1):
        self.threads = threads

    def echo_config(self, command: str, options: Dict[str, Any], out_dir: Optional[Path] = None) -> CliConfig:
        resolved = CliConfig(command=command, options=options)
        text = resolved.model_dump_json(indent=2)
        print(f"⚙️  Resolved config:\n{text}")
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / RESOLVED_CONFIG).write_text(text + "\n", encoding="utf-8")
        return resolved

    def build_graphs(self, videos: Path, vocab_path: Path, out: Path, no_human: NoHumanPolicy) -> List[VideoGraph]:
        vocab = parse_vocabulary(vocab_path)
        out.mkdir(parents=True, exist_ok=True)
        paths = sorted(videos.glob("*.json"))
        if not paths:
            raise ConfigError(f"{videos}: no video documents (*.json) found")
        graphs = []
        for path in paths:
            vg = load_video_document(path, vocab, no_human)
            save_video_graph(vg, out / f"{vg.video_id}.ghrg")
            print(f"  - {vg.video_id}: {vg.frame_count} frames, {vg.node_count} nodes, {vg.edge_count} edges, "
                  f"{len(vg.skipped_frame_ids)} skipped")
            graphs.append(vg)
        return graphs

    def train(self, data: Path, out: Path, train_config: TrainConfig, model_config: ModelConfig) -> TrainResult:
        dataset = load_dataset_dir(data, model_config.d_q, train_config.no_human_policy)
        model = GhrVqaModel(dataset.vocab, dataset.num_answers, model_config, train_config.seed)
        return train(dataset, model, train_config, out)

    def evaluate(self, data: Path, checkpoint: Path, split: str) -> EvalReport:
        model = model_from_checkpoint(checkpoint)
        dataset = load_dataset_dir(data, model.config.d_q)
        if dataset.vocab != model.vocab or dataset.num_answers != model.num_answers:
            raise ShapeMismatch(
                f"checkpoint was trained for {model.vocab.num_objects} objects, {model.vocab.num_predicates} "
                f"predicates and {model.num_answers} answers; dataset has {dataset.vocab.num_objects}, "
                f"{dataset.vocab.num_predicates} and {dataset.num_answers}")
        return evaluate(dataset.split(split), ModelPredictor(model), config_fingerprint(model.config), self.threads)

    def grad_check(self, seed: int, head: HeadKind, encoder: EncoderKind) -> GradCheckReport:
        problem = toy_problem(seed, head.value, encoder.value)
        return grad_check(problem.loss, problem.model.params)

    def inspect(self, graph_path: Path, vocab: Optional[Vocabulary], no_human: NoHumanPolicy) -> VideoGraph:
        if graph_path.suffix == ".ghrg":
            return load_video_graph(graph_path)
        if vocab is None:
            raise ConfigError("inspecting a JSON video document needs --vocab (or --attention with a checkpoint)")
        return load_video_document(graph_path, vocab, no_human)


def _label(vocab: Optional[Vocabulary], class_index: Optional[int]) -> str:
    if class_index is None:
        return "<placeholder>"
    if vocab is None:
        return f"class{class_index}"
    if class_index == vocab.root_class_index:
        return "<root>"
    return vocab.object_classes[class_index]


def _predicate(vocab: Optional[Vocabulary], index: int) -> str:
    return vocab.predicate_classes[index] if vocab is not None else f"predicate{index}"


def print_graph(vg: VideoGraph, vocab: Optional[Vocabulary]) -> None:
    print(f"\n🎬 Video {vg.video_id}: {vg.frame_count} frames, {vg.node_count} nodes, {vg.edge_count} edges")
    for i, frame in enumerate(vg.frames):
        print(f"  Frame {i} ({frame.frame_id}), human root {vg.human_root_ids[i]}")
        for node in frame.nodes:
            print(f"    node {node.node_id}: {_label(vocab, node.class_index)} bbox={list(node.bbox)}")
        for edge in frame.edges:
            print(f"    edge {edge.subject_id} -{_predicate(vocab, edge.predicate_index)}-> {edge.object_id}")
    graph = vg.to_networkx()
    humans = vg.human_refs()
    if len(humans) > 1:
        print("  Human-to-human distances:")
        for a, b in combinations(humans, 2):
            print(f"    frame {a.frame} ↔ frame {b.frame}: {bfs_distance(vg, a, b, graph)}")


def print_attention(model: GhrVqaModel, vg: VideoGraph) -> None:
    vocab = model.vocab
    print("\n🔎 Final-layer attention on human roots:")
    for report in model.encoder.attention_report(vg):
        print(f"  Frame {report.frame} human {report.human.node_id}")
        for entry in report.entries:
            print(f"    {entry.relation:<16} head {entry.head}  ← {_label(vocab, entry.neighbor_class)} "
                  f"(node {entry.neighbor.node_id})  α={entry.weight:.4f}")


def print_report(report: EvalReport) -> None:
    print(f"\n📊 Overall accuracy: {report.overall_accuracy:.4f} ({report.correct}/{report.total})")
    for category, accuracy in report.per_category_accuracy.items():
        print(f"  {category:<12} {accuracy:.4f}  (n={report.per_category_count[category]})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="GHR-VQA: human-rooted scene-graph reasoning for video QA")
    parser.add_argument("--log-level", default=None, help="Logging level (default: $GHR_LOG_LEVEL or INFO)")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads (default: $GHR_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graphs", help="Assemble video-level graphs from frame annotations")
    p.add_argument("--videos", required=True, help="Directory of video JSON documents")
    p.add_argument("--vocab", required=True, help="Vocabulary JSON file")
    p.add_argument("--out", required=True, help="Output directory for .ghrg files")
    p.add_argument("--no-human", choices=[e.value for e in NoHumanPolicy], default=NoHumanPolicy.SKIP.value)

    p = sub.add_parser("gen-synthetic", help="Generate a synthetic scene-graph QA dataset")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--videos", type=int, default=50)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--objects", type=int, default=10)
    p.add_argument("--predicates", type=int, default=5)
    p.add_argument("--answers", type=int, default=8)
    p.add_argument("--cross-frame", action="store_true", help="Questions needing the order of two frames")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="Train end-to-end and write checkpoints, loss log and report")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="YAML/JSON file whose keys mirror these flags")
    p.add_argument("--head", choices=[e.value for e in HeadKind])
    p.add_argument("--encoder", choices=[e.value for e in EncoderKind])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--d-q", type=int)
    p.add_argument("--no-human", choices=[e.value for e in NoHumanPolicy])

    p = sub.add_parser("eval", help="Evaluate a checkpoint on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "eval"], default="eval")

    p = sub.add_parser("grad-check", help="Finite-difference check of the full model on a 2-frame toy sample")
    p.add_argument("--scale", choices=["tiny"], default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--head", choices=[e.value for e in HeadKind], default=HeadKind.CRN.value)
    p.add_argument("--encoder", choices=[e.value for e in EncoderKind], default=EncoderKind.HETEDGEGAT.value)

    p = sub.add_parser("inspect", help="Print a video graph, its human roots and their distances")
    p.add_argument("--graph", required=True, help=".ghrg cache or video JSON document")
    p.add_argument("--vocab", help="Vocabulary JSON (for labels / JSON documents)")
    p.add_argument("--attention", metavar="CHECKPOINT", help="Also print final-layer attention from a checkpoint")
    p.add_argument("--no-human", choices=[e.value for e in NoHumanPolicy], default=NoHumanPolicy.SKIP.value)
    return parser


def _configure_logging(level: Optional[str]) -> None:
    name = (level or os.getenv("GHR_LOG_LEVEL") or "INFO").upper()
    if not isinstance(logging.getLevelName(name), int):
        raise ConfigError(f"Unknown log level {name!r}")
    logging.basicConfig(level=name, format='%(asctime)s - %(levelname)s - %(message)s')
    logging.getLogger().setLevel(name)


def _dispatch(args: argparse.Namespace, pipeline: GhrVqaPipeline) -> int:
    if args.command == "build-graphs":
        options = {"videos": args.videos, "vocab": args.vocab, "out": args.out, "no_human": args.no_human}
        pipeline.echo_config(args.command, options)
        graphs = pipeline.build_graphs(Path(args.videos), Path(args.vocab), Path(args.out), NoHumanPolicy(args.no_human))
        skipped = sum(len(g.skipped_frame_ids) for g in graphs)
        print(f"\n✅ Built {len(graphs)} video graphs "
              f"({sum(g.node_count for g in graphs)} nodes, {sum(g.edge_count for g in graphs)} edges, "
              f"{sum(g.frame_count for g in graphs)} frames, {skipped} frames skipped)")
        print(f"📁 Output directory: {args.out}")
        return EXIT_OK

    if args.command == "gen-synthetic":
        options = {k: getattr(args, k) for k in ("seed", "videos", "frames", "objects", "predicates",
                                                 "answers", "cross_frame", "out")}
        pipeline.echo_config(args.command, options)
        summary = generate_synthetic(args.out, args.seed, args.videos, args.frames, args.objects,
                                     args.predicates, args.answers, args.cross_frame)
        dataset = load_dataset_dir(args.out, d_q=8)
        oracle = RuleBasedOracle(dataset.vocab, dataset.answers)
        oracle_report = evaluate(dataset.train + dataset.eval, oracle)
        print(f"\n✅ Generated {summary.videos} videos, {summary.frames} frames, {summary.questions} questions "
              f"({summary.train_videos} train / {summary.eval_videos} eval videos, K={len(summary.answers)})")
        print(f"🧮 Rule-based oracle accuracy: {oracle_report.overall_accuracy:.4f}")
        print(f"📁 Output directory: {args.out}")
        return EXIT_OK

    if args.command == "train":
        configs = resolve_train_config(args)
        out = Path(args.out)
        pipeline.echo_config(args.command, {"data": args.data, "out": args.out,
                                            "train": configs["train"].model_dump(mode="json"),
                                            "model": configs["model"].model_dump(mode="json")}, out)
        pipeline.threads = configs["train"].threads
        result = pipeline.train(Path(args.data), out, configs["train"], configs["model"])
        last = result.log[-1]
        print(f"\n🎉 Training finished: final loss {last.loss:.4f}, train acc {last.train_acc:.4f}, "
              f"best epoch {result.best_epoch}")
        if result.report is not None:
            print_report(result.report)
        print(f"📁 Output directory: {args.out} ({EVAL_REPORT}, loss log, checkpoints)")
        return EXIT_OK

    if args.command == "eval":
        pipeline.echo_config(args.command, {"data": args.data, "checkpoint": args.checkpoint, "split": args.split})
        report = pipeline.evaluate(Path(args.data), Path(args.checkpoint), args.split)
        print_report(report)
        print(report.model_dump_json(indent=2))
        return EXIT_OK

    if args.command == "grad-check":
        pipeline.echo_config(args.command, {"scale": args.scale, "seed": args.seed,
                                            "head": args.head, "encoder": args.encoder})
        report = pipeline.grad_check(args.seed, HeadKind(args.head), EncoderKind(args.encoder))
        verdict = "PASS" if report.passed else "FAIL"
        print(f"\n🧪 Gradient check {verdict}: max relative error {report.max_rel_error:.3e} "
              f"(tolerance {report.tolerance:g}) over {report.checked} elements, "
              f"{report.skipped_kinks} skipped at kinks; worst {report.worst_param}[{report.worst_index}]")
        if not report.passed:
            raise GradCheckFailed(f"max relative error {report.max_rel_error:.3e} in {report.worst_param}")
        return EXIT_OK

    if args.command == "inspect":
        pipeline.echo_config(args.command, {"graph": args.graph, "vocab": args.vocab,
                                            "attention": args.attention, "no_human": args.no_human})
        model = model_from_checkpoint(args.attention) if args.attention else None
        vocab = parse_vocabulary(args.vocab) if args.vocab else (model.vocab if model else None)
        vg = pipeline.inspect(Path(args.graph), vocab, NoHumanPolicy(args.no_human))
        print_graph(vg, vocab)
        if model is not None:
            print_attention(model, vg)
        return EXIT_OK

    raise ConfigError(f"Unknown command {args.command!r}")


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the command and map failures to exit codes."""
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        _configure_logging(args.log_level)
        threads = args.threads if args.threads is not None else int(os.getenv("GHR_THREADS", "1"))
        if threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {threads}")
        if getattr(args, "command", None) == "train" and args.threads is None and os.getenv("GHR_THREADS"):
            args.threads = threads
        return _dispatch(args, GhrVqaPipeline(threads))
    except (NonFiniteLoss, GradCheckFailed, ArithmeticError) as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except (ValueError, OSError, KeyError) as e:
        logger.error(f"Validation failed: {e}")
        return EXIT_VALIDATION
    except Exception as e:
        logger.error(f"Pipeline failed: {e}")
        return EXIT_FAILURE


def main(argv: Optional[Sequence[str]] = None):
    """Main CLI interface for the pipeline."""
    code = run(argv)
    if code != EXIT_OK:
        sys.exit(code)


if __name__ == "__main__":
    main()
