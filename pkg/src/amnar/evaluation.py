"""Scoring of detection output against ground-truth error annotations.

A verdict's segment counts as ground-truth erroneous when an error span
covers more than half of it (the fraction is configurable). The headline
accuracy is balanced over erroneous and normal segments so that rare
errors are not drowned out; the plain (unbalanced) accuracy is reported
alongside it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import UndefinedMetricError
from .graph import nondeterministic_nodes


@dataclass
class EvalReport:
    eda: float
    eda_plain: float
    auc: float | None
    nondet_frame_acc: float | None
    counts: dict
    per_video: dict

    def to_dict(self):
        return {"eda": self.eda, "eda_plain": self.eda_plain, "auc": self.auc,
                "nondet_frame_acc": self.nondet_frame_acc,
                "counts": self.counts, "per_video": self.per_video}


def segment_is_error(st, ed, spans, min_overlap=0.5) -> bool:
    """True when some error span covers more than min_overlap of [st, ed)."""
    length = ed - st
    for span in spans:
        if min(ed, span.ed) - max(st, span.st) > min_overlap * length:
            return True
    return False


def _verdict_pairs(verdicts, spans_by_video, min_overlap):
    pairs = []
    for v in verdicts:
        spans = spans_by_video.get(v.video, [])
        gt = segment_is_error(v.segment.st, v.segment.ed, spans, min_overlap)
        pairs.append((v, gt))
    return pairs


def eda(verdicts, spans_by_video, *, balanced=True, min_overlap=0.5) -> float:
    """Segment-level detection accuracy.

    Balanced: mean of the recalls on erroneous and normal segments, which
    degenerates to plain recall when only one kind is present. Unbalanced:
    plain fraction of correctly judged segments.
    """
    pairs = _verdict_pairs(verdicts, spans_by_video, min_overlap)
    if not pairs:
        raise UndefinedMetricError("no segments to score")
    if not balanced:
        return sum(v.is_error == gt for v, gt in pairs) / len(pairs)
    recalls = []
    for kind in (True, False):
        group = [(v, gt) for v, gt in pairs if gt == kind]
        if group:
            recalls.append(sum(v.is_error == gt for v, gt in group) / len(group))
    return sum(recalls) / len(recalls)


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative.

    Ties count one half, which equals the trapezoidal area under the ROC
    curve. Computed from average ranks in O(n log n).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs both positive and negative labels")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(labels.size, dtype=np.float64)
    s = scores[order]
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s[j] == s[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)  # average of 1-based ranks i+1..j
        i = j
    pos_rank_sum = float(ranks[labels].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def nondet_frame_accuracy(verdicts, spans_by_video, graph, *, min_overlap=0.5) -> float:
    """Frame-wise verdict correctness, restricted to non-deterministic actions.

    A frame is ground-truth erroneous when it lies inside an error span;
    the prediction for every frame of a segment is that segment's flag.
    Only segments whose class is non-deterministic in the graph count.
    """
    nondet = nondeterministic_nodes(graph)
    correct = 0
    total = 0
    for v in verdicts:
        if v.segment.label not in nondet:
            continue
        spans = spans_by_video.get(v.video, [])
        for t in range(v.segment.st, v.segment.ed):
            gt = any(span.st <= t < span.ed for span in spans)
            correct += v.is_error == gt
            total += 1
    if total == 0:
        raise UndefinedMetricError("no frames belong to non-deterministic actions")
    return correct / total


def evaluate(verdicts, spans_by_video, graph=None, *, min_overlap=0.5) -> EvalReport:
    """Assemble the full report; metrics undefined on this input become None."""
    pairs = _verdict_pairs(verdicts, spans_by_video, min_overlap)
    if not pairs:
        raise UndefinedMetricError("no segments to score")
    try:
        auc = roc_auc([v.score for v, _ in pairs], [gt for _, gt in pairs])
    except UndefinedMetricError:
        auc = None
    nondet = None
    if graph is not None:
        try:
            nondet = nondet_frame_accuracy(verdicts, spans_by_video, graph,
                                           min_overlap=min_overlap)
        except UndefinedMetricError:
            pass
    per_video: dict[str, dict] = {}
    for v, gt in pairs:
        stats = per_video.setdefault(v.video, {"segments": 0, "errors": 0, "correct": 0})
        stats["segments"] += 1
        stats["errors"] += int(gt)
        stats["correct"] += int(v.is_error == gt)
    for stats in per_video.values():
        stats["accuracy"] = stats.pop("correct") / stats["segments"]
    n_err = sum(gt for _, gt in pairs)
    return EvalReport(
        eda=eda(verdicts, spans_by_video, balanced=True, min_overlap=min_overlap),
        eda_plain=eda(verdicts, spans_by_video, balanced=False, min_overlap=min_overlap),
        auc=auc,
        nondet_frame_acc=nondet,
        counts={"segments": len(pairs), "error_segments": n_err,
                "normal_segments": len(pairs) - n_err},
        per_video=dict(sorted(per_video.items())),
    )


def write_report(path, report) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=1)
        f.write("\n")


# ---------------------------------------------------------------------------
# timeline rendering
# ---------------------------------------------------------------------------

_ROW_H = 22
_GAP = 8
_LEFT = 120


def render_timeline_svg(verdicts, spans_by_video, scale=2.0) -> str:
    """Per-video segment timeline as a static SVG string.

    Segments are green when judged normal and red when flagged; ground
    truth error spans are drawn as a hatched band above each row.
    """
    by_video: dict[str, list] = {}
    for v in verdicts:
        by_video.setdefault(v.video, []).append(v)
    videos = sorted(by_video)
    width = _LEFT + 10 + scale * max(
        (v.segment.ed for vs in by_video.values() for v in vs), default=0)
    height = _GAP + len(videos) * (_ROW_H + _GAP)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
             f'height="{height}" font-family="monospace" font-size="11">']
    y = _GAP
    for video in videos:
        parts.append(f'<text x="4" y="{y + 15}">{video}</text>')
        for span in spans_by_video.get(video, []):
            x, w = _LEFT + scale * span.st, max(scale * (span.ed - span.st), 2.0)
            parts.append(f'<rect x="{x:.1f}" y="{y}" width="{w:.1f}" height="5" '
                         f'fill="#b45" ><title>{span.kind}</title></rect>')
        for v in by_video[video]:
            color = "#c33" if v.is_error else "#3a5"
            x = _LEFT + scale * v.segment.st
            w = scale * len(v.segment)
            parts.append(
                f'<rect x="{x:.1f}" y="{y + 6}" width="{w:.1f}" height="{_ROW_H - 6}" '
                f'fill="{color}" stroke="#222"><title>label {v.segment.label} '
                f'd_min {v.d_min:.3f} score {v.score:.3f}</title></rect>')
        y += _ROW_H + _GAP
    parts.append("</svg>")
    return "\n".join(parts)
