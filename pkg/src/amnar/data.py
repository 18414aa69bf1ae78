"""Data model, file formats, feature aggregation, and training-sample curation.

Frame features live in N x D float64 matrices (one row per frame). On disk
they are stored as 32-bit floats in a small binary container; all arithmetic
is done in 64-bit. Action classes are integer ids 0..S-1; the background
class is the reserved id -1.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidSegmentError

BACKGROUND = -1

_MAGIC = b"AMNF"
_VERSION = 1
_HEADER = struct.Struct("<4sHII")  # magic, version, n_frames, dim


@dataclass(frozen=True)
class ActionSegment:
    """A labeled half-open frame interval [st, ed)."""

    label: int
    st: int
    ed: int

    def __post_init__(self):
        if self.st < 0 or self.ed < self.st:
            raise InvalidSegmentError(f"bad segment bounds [{self.st}, {self.ed})")

    def __len__(self):
        return self.ed - self.st


@dataclass(frozen=True)
class ErrorSpan:
    """An annotated error region [st, ed) with its error kind."""

    st: int
    ed: int
    kind: str


@dataclass
class VideoRecord:
    """One recording: frame features plus segment and error annotations.

    segments must be sorted by start frame and pairwise disjoint;
    frame_labels, when present, has one label per feature row.
    """

    id: str
    features: np.ndarray
    segments: list[ActionSegment]
    frame_labels: np.ndarray | None = None
    error_spans: list[ErrorSpan] = field(default_factory=list)

    def __post_init__(self):
        n = self.features.shape[0]
        prev_ed = 0
        for seg in self.segments:
            if seg.st < prev_ed or seg.ed > n:
                raise InvalidSegmentError(
                    f"video {self.id}: segment [{seg.st}, {seg.ed}) overlaps or exceeds {n} frames"
                )
            prev_ed = seg.ed
        if self.frame_labels is not None and len(self.frame_labels) != n:
            raise InvalidSegmentError(
                f"video {self.id}: {len(self.frame_labels)} frame labels for {n} frames"
            )


@dataclass
class ClusterCenters:
    """Per-class mean action feature and the sample count behind each mean."""

    centers: dict[int, np.ndarray]
    counts: dict[int, int]

    def __contains__(self, label):
        return label in self.centers

    def __getitem__(self, label):
        return self.centers[label]

    @property
    def dim(self):
        return next(iter(self.centers.values())).shape[0] if self.centers else 0


@dataclass
class TrainingSample:
    """Context frames up to the previous segment's end, plus the target action."""

    context: np.ndarray
    target_class: int
    target_feature: np.ndarray
    video: str = ""
    context_end: int = 0


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def save_features(path, matrix) -> None:
    """Write a frame-feature matrix to the binary container (float32 payload)."""
    m = np.ascontiguousarray(matrix, dtype=np.float32)
    if m.ndim != 2:
        raise FormatError(path, f"feature matrix must be 2-D, got {m.ndim}-D")
    if m.size and not np.isfinite(m).all():
        raise FormatError(path, "refusing to write non-finite feature values")
    n, d = m.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, n, d))
        f.write(m.tobytes())


def load_features(path) -> np.ndarray:
    """Read a feature file, returning an N x D float64 matrix.

    Raises FormatError (with the byte offset) on bad magic, truncation,
    or non-finite payload values.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(path, f"truncated header ({len(raw)} bytes)", offset=0)
    magic, version, n, d = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError(path, f"bad magic {magic!r}", offset=0)
    if version != _VERSION:
        raise FormatError(path, f"unsupported version {version}", offset=4)
    if d < 1:
        raise FormatError(path, f"dim must be >= 1, got {d}", offset=10)
    expected = n * d * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(
            path,
            f"payload holds {len(payload)} bytes, header promises {expected}",
            offset=_HEADER.size + min(len(payload), expected),
        )
    values = np.frombuffer(payload, dtype="<f4")
    if values.size and not np.isfinite(values).all():
        idx = int(np.flatnonzero(~np.isfinite(values))[0])
        raise FormatError(path, "non-finite feature value", offset=_HEADER.size + idx * 4)
    out = values.astype(np.float64).reshape(n, d)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# JSON-lines files (segments, frame labels, error annotations)
# ---------------------------------------------------------------------------

def _read_jsonl(path, required_keys):
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(path, f"line {lineno}: invalid JSON ({e.msg})") from e
            missing = required_keys - obj.keys()
            if missing:
                raise FormatError(path, f"line {lineno}: missing field(s) {sorted(missing)}")
            rows.append(obj)
    return rows


def write_segments(path, rows) -> None:
    """rows: iterable of (video, ActionSegment, source) with source 'gt' or 'pred'."""
    with open(path, "w", encoding="utf-8") as f:
        for video, seg, source in rows:
            f.write(json.dumps(
                {"video": video, "label": int(seg.label), "st": int(seg.st),
                 "ed": int(seg.ed), "source": source}) + "\n")


def read_segments(path, source=None) -> dict[str, list[ActionSegment]]:
    """Group a segments file by video, optionally keeping one source only."""
    out: dict[str, list[ActionSegment]] = {}
    for row in _read_jsonl(path, {"video", "label", "st", "ed", "source"}):
        if row["source"] not in ("gt", "pred"):
            raise FormatError(path, f"bad source {row['source']!r} for video {row['video']}")
        if source is not None and row["source"] != source:
            continue
        seg = ActionSegment(int(row["label"]), int(row["st"]), int(row["ed"]))
        out.setdefault(row["video"], []).append(seg)
    for segs in out.values():
        segs.sort(key=lambda s: s.st)
    return out


def write_frame_labels(path, labels_by_video) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for video in sorted(labels_by_video):
            labels = [int(x) for x in labels_by_video[video]]
            f.write(json.dumps({"video": video, "labels": labels}) + "\n")


def read_frame_labels(path) -> dict[str, np.ndarray]:
    out = {}
    for row in _read_jsonl(path, {"video", "labels"}):
        out[row["video"]] = np.asarray(row["labels"], dtype=np.int64)
    return out


def write_error_spans(path, spans_by_video) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for video in sorted(spans_by_video):
            for span in spans_by_video[video]:
                f.write(json.dumps(
                    {"video": video, "st": span.st, "ed": span.ed, "kind": span.kind}) + "\n")


def read_error_spans(path) -> dict[str, list[ErrorSpan]]:
    out: dict[str, list[ErrorSpan]] = {}
    for row in _read_jsonl(path, {"video", "st", "ed", "kind"}):
        out.setdefault(row["video"], []).append(
            ErrorSpan(int(row["st"]), int(row["ed"]), str(row["kind"])))
    return out


# ---------------------------------------------------------------------------
# feature aggregation and sample curation
# ---------------------------------------------------------------------------

def action_feature(features, seg) -> np.ndarray:
    """Mean of the feature rows covered by the segment."""
    if seg.ed <= seg.st:
        raise InvalidSegmentError(f"empty segment [{seg.st}, {seg.ed})")
    if seg.ed > features.shape[0]:
        raise InvalidSegmentError(
            f"segment [{seg.st}, {seg.ed}) exceeds {features.shape[0]} frames")
    return features[seg.st:seg.ed].mean(axis=0)


def overlap_ratio(pred, gt_list) -> float:
    """Fraction of pred covered by the ground-truth segment that overlaps it most.

    Intervals are half-open; ties between ground-truth segments go to the
    earliest one (the ratio is unaffected by the tie-break).
    """
    if len(pred) <= 0:
        raise InvalidSegmentError(f"empty segment [{pred.st}, {pred.ed})")
    best = 0
    for gt in gt_list:
        inter = min(pred.ed, gt.ed) - max(pred.st, gt.st)
        if inter > best:
            best = inter
    return best / len(pred)


def filter_segments(preds, gts, tau) -> list[ActionSegment]:
    """Keep predicted segments whose overlap ratio with ground truth is >= tau."""
    return [p for p in preds if overlap_ratio(p, gts) >= tau]


def majority_label(seg, frame_labels) -> int:
    """Most frequent frame label inside the segment; ties go to the smallest id."""
    if seg.ed <= seg.st:
        raise InvalidSegmentError(f"empty segment [{seg.st}, {seg.ed})")
    if seg.ed > len(frame_labels):
        raise InvalidSegmentError(
            f"segment [{seg.st}, {seg.ed}) exceeds {len(frame_labels)} frame labels")
    window = np.asarray(frame_labels[seg.st:seg.ed])
    values, counts = np.unique(window, return_counts=True)
    return int(values[counts == counts.max()].min())


def cluster_centers(samples) -> ClusterCenters:
    """Per-class mean feature over (class, vector) pairs; background is skipped."""
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for label, vec in samples:
        if label == BACKGROUND:
            continue
        if label in sums:
            sums[label] = sums[label] + np.asarray(vec, dtype=np.float64)
            counts[label] += 1
        else:
            sums[label] = np.asarray(vec, dtype=np.float64).copy()
            counts[label] = 1
    centers = {label: sums[label] / counts[label] for label in sums}
    return ClusterCenters(centers=centers, counts=counts)


def build_training_samples(video, gt_segments, pred_segments=None, *,
                           tau=0.6, strategy="hybrid") -> list[TrainingSample]:
    """Curate (context, target) pairs from one video's segment streams.

    strategy 'gt': ground-truth segments as-is. 'pred': raw predicted
    segments, labels untouched. 'hybrid': ground-truth segments plus
    predicted segments that pass the tau overlap filter, relabeled by
    majority vote over the video's frame labels.

    Background targets and targets with an empty context are skipped.
    """
    if strategy not in ("gt", "pred", "hybrid"):
        raise ValueError(f"unknown strategy {strategy!r}")
    streams = []
    if strategy in ("gt", "hybrid"):
        streams.append(gt_segments)
    if strategy == "pred":
        streams.append(pred_segments or [])
    elif strategy == "hybrid" and pred_segments:
        kept = filter_segments(pred_segments, gt_segments, tau)
        if video.frame_labels is None:
            raise InvalidSegmentError(
                f"video {video.id}: relabeling predicted segments needs frame labels")
        streams.append([
            ActionSegment(majority_label(s, video.frame_labels), s.st, s.ed)
            for s in kept
        ])

    samples = []
    for stream in streams:
        prev_ed = 0
        for seg in sorted(stream, key=lambda s: s.st):
            context_end = prev_ed
            prev_ed = seg.ed
            if seg.label == BACKGROUND or context_end == 0:
                continue
            samples.append(TrainingSample(
                context=video.features[:context_end],
                target_class=seg.label,
                target_feature=action_feature(video.features, seg),
                video=video.id,
                context_end=context_end,
            ))
    return samples
