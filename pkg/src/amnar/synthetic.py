"""Deterministic synthetic benchmark for the full detection pipeline.

Generates branching task graphs, normal executions (frame features around
well-separated class centers, plus a per-video context drift that is
readable from the frames themselves), and test videos with injected
errors. A noisy copy of each segment stream stands in for an upstream
segmentation model.

Everything is reproducible at byte level from the config seed: every video
draws from its own seed-sequence child, so generation order and worker
count cannot change the output.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (BACKGROUND, ActionSegment, ErrorSpan, VideoRecord, save_features,
                   write_error_spans, write_frame_labels, write_segments)
from .errors import ConfigError
from .graph import TaskGraph, save_graph
from .prediction import valid_next_actions

_ERROR_KINDS = ("deviation", "modification", "addition", "omission")


@dataclass
class SynthConfig:
    seed: int = 0
    n_classes: int = 6
    dim: int = 8
    branching: float = 2.0
    layer_width: int | None = None
    segment_frames: tuple = (6, 12)
    background_frames: tuple = (3, 6)
    center_spacing: float = 6.0
    noise_sigma: float = 0.15
    drift_amplitude: float = 1.2
    drift_dims: int = 1
    n_train: int = 40
    n_test: int = 40
    error_rates: dict = field(default_factory=lambda: {
        "deviation": 0.6, "modification": 0.3, "addition": 0.3, "omission": 0.15})
    deviation_margin: float = 2.0
    mislabel_rate: float = 0.05
    boundary_jitter: int = 2

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.dim <= self.drift_dims:
            raise ConfigError("dim must exceed drift_dims")
        if self.center_spacing <= 0:
            raise ConfigError("center_spacing must be positive")
        if self.branching < 1:
            raise ConfigError("branching must be >= 1")
        for kind, rate in self.error_rates.items():
            if kind not in _ERROR_KINDS:
                raise ConfigError(f"unknown error kind {kind!r}")
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"rate for {kind} outside [0, 1]")
        if not 0.0 <= self.mislabel_rate <= 1.0:
            raise ConfigError("mislabel_rate outside [0, 1]")

    def to_dict(self):
        doc = asdict(self)
        doc["segment_frames"] = list(self.segment_frames)
        doc["background_frames"] = list(self.background_frames)
        return doc

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        for key in ("segment_frames", "background_frames"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


@dataclass
class SynthDataset:
    graph: TaskGraph
    train: list
    test: list


def _rng(cfg, *key):
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=key))


def class_centers(cfg) -> dict:
    """Fixed class centers, orthogonal when the feature dim allows it.

    Centers occupy the first dim - drift_dims coordinates; the remaining
    coordinates are reserved for the context drift, so drift and class
    identity never mix.
    """
    usable = cfg.dim - cfg.drift_dims
    centers = {}
    if cfg.n_classes <= usable:
        for c in range(cfg.n_classes):
            vec = np.zeros(cfg.dim)
            vec[c] = cfg.center_spacing
            centers[c] = vec
    else:
        rng = _rng(cfg, 9)
        for c in range(cfg.n_classes):
            g = rng.normal(size=usable)
            vec = np.zeros(cfg.dim)
            vec[:usable] = cfg.center_spacing * g / np.linalg.norm(g)
            centers[c] = vec
    return centers


def sample_drift(cfg, rng) -> np.ndarray:
    drift = np.zeros(cfg.dim)
    drift[cfg.dim - cfg.drift_dims:] = rng.uniform(
        -cfg.drift_amplitude, cfg.drift_amplitude, size=cfg.drift_dims)
    return drift


def sample_graph(cfg, rng=None) -> TaskGraph:
    """Layered DAG with the start node wired to the first layer.

    Each node connects to floor(branching) or ceil(branching) nodes of the
    next layer (expected value = branching); nodes left unreachable get one
    extra incoming edge.
    """
    if rng is None:
        rng = _rng(cfg, 0)
    width = cfg.layer_width or max(1, round(cfg.branching))
    layers = [list(range(i, min(i + width, cfg.n_classes)))
              for i in range(0, cfg.n_classes, width)]
    edges = [(cfg.n_classes, node) for node in layers[0]]
    lo = int(np.floor(cfg.branching))
    frac = cfg.branching - lo
    for cur, nxt in zip(layers, layers[1:]):
        covered = set()
        for u in cur:
            k = min(len(nxt), lo + (1 if rng.random() < frac else 0))
            targets = rng.choice(nxt, size=max(k, 1), replace=False)
            for v in sorted(int(t) for t in targets):
                edges.append((u, v))
                covered.add(v)
        for v in nxt:
            if v not in covered:
                u = cur[int(rng.integers(len(cur)))]
                edges.append((u, v))
    return TaskGraph.from_edges(edges, num_classes=cfg.n_classes,
                                start_node=cfg.n_classes)


def generate_normal_video(graph, cfg, rng, video_id="video", centers=None,
                          drift=None) -> VideoRecord:
    """Sample one correct execution: a topological walk emitting noisy frames.

    Each step picks uniformly among the current node's successors. Frames
    are class center + per-video drift + Gaussian noise; a leading
    background segment gives the first action a non-empty context.
    """
    if centers is None:
        centers = class_centers(cfg)
    if drift is None:
        drift = sample_drift(cfg, rng)
    lo, hi = cfg.background_frames
    blocks = [(BACKGROUND, drift + rng.normal(0.0, cfg.noise_sigma,
                                              (int(rng.integers(lo, hi + 1)), cfg.dim)))]
    node = graph.start_node
    lo, hi = cfg.segment_frames
    while True:
        succ = graph.successors(node)
        if not succ:
            break
        node = int(succ[int(rng.integers(len(succ)))])
        length = int(rng.integers(lo, hi + 1))
        frames = centers[node] + drift + rng.normal(0.0, cfg.noise_sigma, (length, cfg.dim))
        blocks.append((node, frames))
    return _assemble(video_id, blocks, [])


def _assemble(video_id, blocks, pending_spans):
    """blocks: (label, frames) or (label, frames, kind). Spans come out sorted."""
    segments, labels, spans = [], [], list(pending_spans)
    t = 0
    arrays = []
    for block in blocks:
        label, frames = block[0], block[1]
        kind = block[2] if len(block) > 2 else None
        n = frames.shape[0]
        segments.append(ActionSegment(int(label), t, t + n))
        labels.extend([int(label)] * n)
        arrays.append(frames)
        if kind:
            spans.append(ErrorSpan(t, t + n, kind))
        t += n
    features = np.vstack(arrays) if arrays else np.zeros((0, 1))
    spans.sort(key=lambda s: (s.st, s.ed, s.kind))
    return VideoRecord(id=video_id, features=features, segments=segments,
                       frame_labels=np.asarray(labels, dtype=np.int64),
                       error_spans=spans)


def inject_errors(video, cfg, rng, *, graph, centers=None, drift=None,
                  deviation_margin=None) -> VideoRecord:
    """Apply each configured error kind (at most once) to a normal video.

    deviation: displace one segment's frames by the margin, label kept.
    modification: swap one segment's frames for a class that is not a valid
    next action there, label kept. addition: insert a segment of a
    not-currently-valid class. omission: drop a segment, recording a
    zero-length span at the junction. Each kind targets a distinct segment.
    """
    if centers is None:
        centers = class_centers(cfg)
    if drift is None:
        drift = np.zeros(cfg.dim)
    margin = cfg.deviation_margin if deviation_margin is None else deviation_margin
    usable = cfg.dim - cfg.drift_dims

    blocks = [[seg.label, video.features[seg.st:seg.ed].copy(), None]
              for seg in video.segments]
    used = set()

    def pick_action(exclude_injected=False):
        pool = [i for i, b in enumerate(blocks)
                if b[0] != BACKGROUND and id(b) not in used
                and not (exclude_injected and b[2] is not None)]
        if not pool:
            return None
        i = pool[int(rng.integers(len(pool)))]
        used.add(id(blocks[i]))
        return i

    def executed_before(i):
        return [b[0] for b in blocks[:i] if b[0] != BACKGROUND]

    decisions = {kind: rng.random() < cfg.error_rates.get(kind, 0.0)
                 for kind in _ERROR_KINDS}

    if decisions["deviation"]:
        i = pick_action()
        if i is not None:
            g = rng.normal(size=usable)
            shift = np.zeros(cfg.dim)
            shift[:usable] = margin * g / np.linalg.norm(g)
            blocks[i][1] = blocks[i][1] + shift
            blocks[i][2] = "deviation"

    if decisions["modification"]:
        i = pick_action()
        if i is not None:
            valid = valid_next_actions(graph, executed_before(i))
            others = [c for c in range(cfg.n_classes)
                      if c not in valid and c != blocks[i][0]]
            if others:
                swap = others[int(rng.integers(len(others)))]
                shape = blocks[i][1].shape
                blocks[i][1] = centers[swap] + drift + rng.normal(
                    0.0, cfg.noise_sigma, shape)
                blocks[i][2] = "modification"

    if decisions["addition"]:
        anchors = [i for i, b in enumerate(blocks) if b[0] != BACKGROUND]
        if anchors:
            j = anchors[int(rng.integers(len(anchors)))]
            executed = executed_before(j + 1)
            valid = valid_next_actions(graph, executed)
            others = [c for c in range(cfg.n_classes)
                      if c not in valid and c not in executed]
            if others:
                extra = others[int(rng.integers(len(others)))]
                lo, hi = cfg.segment_frames
                length = int(rng.integers(lo, hi + 1))
                frames = centers[extra] + drift + rng.normal(
                    0.0, cfg.noise_sigma, (length, cfg.dim))
                blocks.insert(j + 1, [extra, frames, "addition"])

    pending = []
    if decisions["omission"]:
        i = pick_action(exclude_injected=True)
        if i is not None:
            del blocks[i]
            junction = sum(b[1].shape[0] for b in blocks[:i])
            pending.append(ErrorSpan(junction, junction, "omission"))

    return _assemble(video.id, [tuple(b) for b in blocks], pending)


def asm_perturb(video, cfg, rng) -> list:
    """Noisy copy of a video's segments: jittered boundaries, some mislabels.

    Interior boundaries move by up to boundary_jitter frames, clamped so
    every segment keeps at least one frame; action labels flip to a random
    other class with probability mislabel_rate.
    """
    segs = video.segments
    bounds = [segs[0].st] + [s.ed for s in segs]
    if cfg.boundary_jitter:
        for k in range(1, len(bounds) - 1):
            d = int(rng.integers(-cfg.boundary_jitter, cfg.boundary_jitter + 1))
            bounds[k] = min(max(bounds[k] + d, bounds[k - 1] + 1), bounds[k + 1] - 1)
    out = []
    for k, seg in enumerate(segs):
        label = seg.label
        if label != BACKGROUND and rng.random() < cfg.mislabel_rate:
            others = [c for c in range(cfg.n_classes) if c != label]
            label = others[int(rng.integers(len(others)))]
        out.append(ActionSegment(int(label), int(bounds[k]), int(bounds[k + 1])))
    return out


def make_dataset(cfg) -> SynthDataset:
    """Graph plus normal training videos and error-injected test videos."""
    graph = sample_graph(cfg, _rng(cfg, 0))
    centers = class_centers(cfg)
    train, test = [], []
    for i in range(cfg.n_train):
        rng = _rng(cfg, 1, i)
        drift = sample_drift(cfg, rng)
        train.append(generate_normal_video(graph, cfg, rng, f"train_{i:03d}",
                                           centers=centers, drift=drift))
    for i in range(cfg.n_test):
        rng = _rng(cfg, 2, i)
        drift = sample_drift(cfg, rng)
        video = generate_normal_video(graph, cfg, rng, f"test_{i:03d}",
                                      centers=centers, drift=drift)
        test.append(inject_errors(video, cfg, rng, graph=graph, centers=centers,
                                  drift=drift))
    return SynthDataset(graph=graph, train=train, test=test)


def emit_dataset(cfg, out_dir) -> SynthDataset:
    """Write a full dataset to disk in the documented file formats.

    Layout: graph.json, features/<video>.amnf, segments.jsonl (gt + pred
    rows), frame_labels.jsonl, errors.jsonl, manifest.json, config.json.
    Identical configs produce byte-identical directories.
    """
    ds = make_dataset(cfg)
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    save_graph(out / "graph.json", ds.graph)

    videos = ds.train + ds.test
    seg_rows = []
    labels_by_video = {}
    spans_by_video = {}
    for idx, video in enumerate(sorted(videos, key=lambda v: v.id)):
        save_features(out / "features" / f"{video.id}.amnf", video.features)
        labels_by_video[video.id] = video.frame_labels
        for seg in video.segments:
            seg_rows.append((video.id, seg, "gt"))
        pred = asm_perturb(video, cfg, _rng(cfg, 3, idx))
        for seg in pred:
            seg_rows.append((video.id, seg, "pred"))
        if video.error_spans:
            spans_by_video[video.id] = video.error_spans
    write_segments(out / "segments.jsonl", seg_rows)
    write_frame_labels(out / "frame_labels.jsonl", labels_by_video)
    write_error_spans(out / "errors.jsonl", spans_by_video)
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump({"train": [v.id for v in ds.train],
                   "test": [v.id for v in ds.test]}, f, indent=1)
        f.write("\n")
    with open(out / "config.json", "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=1)
        f.write("\n")
    return ds
