"""Command-line pipeline: every stage reads and writes the documented files.

Subcommands: simulate, build-graph, graph-metrics, predict-next, prep,
train, calibrate, detect, eval, grad-check. Exit codes: 0 success, 1
domain error (bad data, missing file), 2 usage error. Each run prints its
resolved configuration to stderr; AMNAR_SEED overrides any seed argument.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data, detection, evaluation, graph as graphmod, prediction, \
    reconstruction, synthetic
from .errors import AmnarError, ConfigError, FormatError

Q_DEFAULT = 0.85
TAU_DEFAULT = 0.6
EPOCHS_DEFAULT = 200
BATCH_DEFAULT = 8
LR0_DEFAULT = 0.001


def _resolve_seed(seed):
    env = os.environ.get("AMNAR_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"AMNAR_SEED must be an integer, got {env!r}")
    return seed


def _announce(command, **resolved):
    print(json.dumps({"command": command, **resolved}, default=str), file=sys.stderr)


def _video_ids(args, segments_by_video):
    if args.manifest:
        with open(args.manifest, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        if args.split not in manifest:
            raise FormatError(args.manifest, f"missing split {args.split!r}")
        return [v for v in manifest[args.split] if v in segments_by_video]
    return sorted(segments_by_video)


def _load_video(features_dir, video_id, segments, frame_labels=None):
    features = data.load_features(Path(features_dir) / f"{video_id}.amnf")
    return data.VideoRecord(id=video_id, features=features, segments=segments,
                            frame_labels=frame_labels)


def _write_samples(path, samples):
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps({
                "video": s.video, "context_end": int(s.context_end),
                "target_class": int(s.target_class),
                "target_feature": [float(x) for x in s.target_feature]}) + "\n")


def _read_samples(path, features_dir):
    features_cache = {}
    samples = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(path, f"line {lineno}: invalid JSON ({e.msg})") from e
            video = row["video"]
            if video not in features_cache:
                features_cache[video] = data.load_features(
                    Path(features_dir) / f"{video}.amnf")
            end = int(row["context_end"])
            samples.append(data.TrainingSample(
                context=features_cache[video][:end],
                target_class=int(row["target_class"]),
                target_feature=np.asarray(row["target_feature"], dtype=np.float64),
                video=video, context_end=end))
    return samples


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_simulate(args):
    with open(args.config, "r", encoding="utf-8") as f:
        cfg = synthetic.SynthConfig.from_dict(json.load(f))
    seed = _resolve_seed(args.seed)
    if seed is not None:
        cfg = synthetic.SynthConfig.from_dict({**cfg.to_dict(), "seed": seed})
    _announce("simulate", config=cfg.to_dict(), out=args.out)
    ds = synthetic.emit_dataset(cfg, args.out)
    print(json.dumps({"train": len(ds.train), "test": len(ds.test),
                      "classes": ds.graph.num_classes,
                      "edges": len(ds.graph.edges)}))
    return 0


def _cmd_build_graph(args):
    segments = data.read_segments(args.segments, source=args.source)
    ids = _video_ids(args, segments)
    sequences = [[s.label for s in segments[v] if s.label != data.BACKGROUND]
                 for v in ids]
    g = graphmod.build_task_graph(sequences, num_classes=args.num_classes)
    graphmod.save_graph(args.out, g)
    _announce("build-graph", segments=args.segments, source=args.source,
              videos=len(ids), num_classes=g.num_classes, out=args.out)
    print(json.dumps({"num_classes": g.num_classes, "edges": len(g.edges)}))
    return 0


def _cmd_graph_metrics(args):
    g = graphmod.load_graph(args.graph)
    segments = data.read_segments(args.segments, source=args.source)
    ids = _video_ids(args, segments)
    sequences = [[s.label for s in segments[v] if s.label != data.BACKGROUND]
                 for v in ids]
    stats = graphmod.transition_stats(sequences)
    metrics = graphmod.graph_metrics(g, stats)
    _announce("graph-metrics", graph=args.graph, segments=args.segments,
              source=args.source, videos=len(ids))
    doc = {"non_deterministic_ratio": metrics.non_deterministic_ratio,
           "avg_valid_next": metrics.avg_valid_next,
           "avg_max_transfer_prob": metrics.avg_max_transfer_prob}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1)
            f.write("\n")
    print(json.dumps(doc))
    return 0


def _cmd_predict_next(args):
    g = graphmod.load_graph(args.graph)
    executed = [int(x) for x in args.executed.split(",") if x.strip() != ""]
    _announce("predict-next", graph=args.graph, executed=executed)
    candidates = prediction.valid_next_actions(g, executed)
    print(json.dumps(sorted(candidates)))
    return 0


def _cmd_prep(args):
    strategy = "gt" if args.gt_only else "pred" if args.pred_only else "hybrid"
    gt = data.read_segments(args.segments, source="gt")
    pred = data.read_segments(args.segments, source="pred")
    frame_labels = data.read_frame_labels(args.frame_labels) if args.frame_labels else {}
    ids = _video_ids(args, gt)
    _announce("prep", segments=args.segments, strategy=strategy, tau=args.tau,
              videos=len(ids), out=args.out)
    samples = []
    for video_id in ids:
        video = _load_video(args.features_dir, video_id, gt[video_id],
                            frame_labels.get(video_id))
        samples.extend(data.build_training_samples(
            video, gt[video_id], pred.get(video_id), tau=args.tau,
            strategy=strategy))
    _write_samples(args.out, samples)
    print(json.dumps({"samples": len(samples)}))
    return 0


def _cmd_train(args):
    seed = _resolve_seed(args.seed)
    samples = _read_samples(args.samples, args.features_dir)
    if not samples:
        raise ConfigError(f"no samples in {args.samples}")
    dim = samples[0].target_feature.shape[0]
    config = reconstruction.ReconstructorConfig(
        dim=dim, conv_layers=args.conv_layers, attn_window=args.window,
        heads=args.heads)
    _announce("train", samples=len(samples), dim=dim, epochs=args.epochs,
              batch=args.batch, lr0=args.lr0, seed=seed, out=args.out)
    model = reconstruction.train(samples, config, epochs=args.epochs,
                                 batch_size=args.batch, lr0=args.lr0, seed=seed)
    reconstruction.save_model(args.out, model)
    final = reconstruction.dataset_loss(model.params, model.centers, samples)
    print(json.dumps({"samples": len(samples), "final_mean_loss": final}))
    return 0


def _cmd_calibrate(args):
    model = reconstruction.load_model(args.model)
    samples = _read_samples(args.samples, args.features_dir)
    _announce("calibrate", model=args.model, samples=len(samples), q=args.q,
              out=args.out)
    distances = detection.calibration_distances(model, samples)
    table = detection.calibrate(distances, q=args.q)
    detection.save_thresholds(args.out, table)
    print(json.dumps({"classes": len(table.thresholds),
                      "global": table.global_threshold}))
    return 0


def _cmd_detect(args):
    model = reconstruction.load_model(args.model)
    g = graphmod.load_graph(args.graph)
    table = detection.load_thresholds(args.thresholds)
    segments = data.read_segments(args.segments, source=args.source)
    ids = _video_ids(args, segments)
    _announce("detect", graph=args.graph, model=args.model, source=args.source,
              videos=len(ids), missing_threshold=args.missing_threshold,
              jobs=args.jobs, out=args.out)

    def run(video_id):
        video = _load_video(args.features_dir, video_id, segments[video_id])
        return detection.detect_video(video, model, g, table,
                                      missing_threshold=args.missing_threshold)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            per_video = list(pool.map(run, ids))
    else:
        per_video = [run(v) for v in ids]
    verdicts = [v for group in per_video for v in group]
    detection.save_verdicts(args.out, verdicts)
    print(json.dumps({"videos": len(ids), "verdicts": len(verdicts),
                      "flagged": sum(v.is_error for v in verdicts)}))
    return 0


def _cmd_eval(args):
    verdicts = detection.load_verdicts(args.verdicts)
    spans = data.read_error_spans(args.errors) if args.errors else {}
    g = graphmod.load_graph(args.graph) if args.graph else None
    _announce("eval", verdicts=len(verdicts), errors=args.errors,
              graph=args.graph, min_overlap=args.min_overlap)
    report = evaluation.evaluate(verdicts, spans, g, min_overlap=args.min_overlap)
    if args.out:
        evaluation.write_report(args.out, report)
    if args.svg:
        with open(args.svg, "w", encoding="utf-8") as f:
            f.write(evaluation.render_timeline_svg(verdicts, spans))
    print(json.dumps(report.to_dict()))
    return 0


def _cmd_grad_check(args):
    seed = _resolve_seed(args.seed)
    rng = np.random.default_rng(seed)
    config = reconstruction.ReconstructorConfig(dim=args.dim)
    _announce("grad-check", dim=args.dim, frames=args.frames, seed=seed)
    worst = 0.0
    # resample instances that sit on a rectifier kink, where finite
    # differences are not a valid reference
    for _ in range(32):
        params = reconstruction.init_params(config, rng)
        params.res_w += rng.normal(0.0, 0.3, params.res_w.shape)
        centers = data.ClusterCenters({0: rng.normal(0.0, 1.0, args.dim)}, {0: 1})
        sample = data.TrainingSample(
            context=rng.normal(0.0, 1.0, (args.frames, args.dim)),
            target_class=0, target_feature=rng.normal(0.0, 1.0, args.dim))
        if reconstruction.kink_margin(sample, params, centers) < 1e-3:
            continue
        worst = reconstruction.gradient_check(sample, params, centers)
        break
    print(json.dumps({"max_relative_error": worst}))
    return 0 if worst < 1e-4 else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_manifest(p):
    p.add_argument("--manifest", help="manifest.json restricting the video set")
    p.add_argument("--split", default="train", choices=["train", "test"],
                   help="manifest split to use")


def build_parser():
    parser = argparse.ArgumentParser(prog="amnar", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("build-graph", help="build a task graph from sequences")
    p.add_argument("--segments", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source", default="gt", choices=["gt", "pred"])
    p.add_argument("--num-classes", type=int, default=None)
    _add_manifest(p)
    p.set_defaults(func=_cmd_build_graph)

    p = sub.add_parser("graph-metrics", help="branching metrics of a task graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--segments", required=True)
    p.add_argument("--source", default="gt", choices=["gt", "pred"])
    p.add_argument("--out", default=None)
    _add_manifest(p)
    p.set_defaults(func=_cmd_graph_metrics)

    p = sub.add_parser("predict-next", help="valid next actions for a history")
    p.add_argument("--graph", required=True)
    p.add_argument("--executed", required=True,
                   help="comma-separated labels, e.g. 0,1,8,2,5,4,5")
    p.set_defaults(func=_cmd_predict_next)

    p = sub.add_parser("prep", help="curate training samples from segments")
    p.add_argument("--features-dir", required=True)
    p.add_argument("--segments", required=True)
    p.add_argument("--frame-labels", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=TAU_DEFAULT)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--gt-only", action="store_true",
                      help="train on ground-truth segments only")
    mode.add_argument("--pred-only", action="store_true",
                      help="train on raw predicted segments only")
    _add_manifest(p)
    p.set_defaults(func=_cmd_prep)

    p = sub.add_parser("train", help="train the reconstruction model")
    p.add_argument("--samples", required=True)
    p.add_argument("--features-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=EPOCHS_DEFAULT)
    p.add_argument("--batch", type=int, default=BATCH_DEFAULT)
    p.add_argument("--lr0", type=float, default=LR0_DEFAULT)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--conv-layers", type=int, default=5)
    p.add_argument("--window", type=int, default=32)
    p.add_argument("--heads", type=int, default=2)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("calibrate", help="per-class thresholds from normal samples")
    p.add_argument("--model", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--features-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--q", type=float, default=Q_DEFAULT)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("detect", help="flag erroneous segments in videos")
    p.add_argument("--features-dir", required=True)
    p.add_argument("--segments", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--thresholds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source", default="pred", choices=["gt", "pred"])
    p.add_argument("--missing-threshold", default="global",
                   choices=["global", "error"])
    p.add_argument("--jobs", type=int, default=1)
    _add_manifest(p)
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("eval", help="score verdicts against error annotations")
    p.add_argument("--verdicts", required=True)
    p.add_argument("--errors", default=None)
    p.add_argument("--graph", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--svg", default=None)
    p.add_argument("--min-overlap", type=float, default=0.5)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("grad-check", help="verify backprop against finite differences")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AmnarError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
