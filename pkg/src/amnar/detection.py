"""Distance matching, quantile threshold calibration, and the error verdict.

A segment is matched against the reconstructed representations of the
candidate next actions; the minimum Euclidean distance decides which. The
segment is flagged as an error when that distance strictly exceeds the
per-class threshold, which is calibrated as a nearest-rank quantile of the
distances observed on normal training samples.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import BACKGROUND, ActionSegment, action_feature
from .errors import ConfigError, FormatError, MissingThresholdError, NoCandidateError
from .prediction import valid_next_actions
from .reconstruction import NormalSet, reconstruct_normals

logger = logging.getLogger(__name__)

# score = d_min / max(theta, _SCORE_FLOOR); the floor only matters for a
# degenerate all-zero calibration and keeps scores finite and monotone
_SCORE_FLOOR = 1e-12


@dataclass
class ThresholdTable:
    """Per-class error thresholds from quantile calibration."""

    thresholds: dict
    q: float
    counts: dict = field(default_factory=dict)
    global_threshold: float | None = None

    def lookup(self, label, missing="error") -> float:
        if label in self.thresholds:
            return self.thresholds[label]
        if missing == "global" and self.global_threshold is not None:
            logger.warning("class %s has no threshold; using global %.6g",
                           label, self.global_threshold)
            return self.global_threshold
        raise MissingThresholdError(f"no threshold for action class {label}")


@dataclass
class SegmentVerdict:
    video: str
    segment: ActionSegment
    d_min: float
    matched: int
    candidates: tuple
    is_error: bool
    score: float


def match(f_action, normals: NormalSet):
    """Closest candidate by Euclidean distance; ties go to the smallest class id.

    Returns (d_min, matched_class).
    """
    if len(normals.candidates) == 0:
        raise NoCandidateError("cannot match against an empty candidate set")
    diffs = normals.representations - np.asarray(f_action, dtype=np.float64)
    dists = np.sqrt((diffs * diffs).sum(axis=1))
    d_min = float(dists.min())
    matched = min(c for c, d in zip(normals.candidates, dists) if d == d_min)
    return d_min, matched


def nearest_rank_quantile(values, q) -> float:
    """Value at 1-based rank ceil(q*n) of the ascending sort."""
    values = sorted(values)
    n = len(values)
    if n == 0:
        raise ConfigError("quantile of an empty list")
    # the tiny slack keeps exact multiples of 1/n from rounding up
    rank = min(max(math.ceil(q * n - 1e-9), 1), n)
    return float(values[rank - 1])


def calibrate(distances, q=0.85) -> ThresholdTable:
    """Per-class nearest-rank quantile of normal matching distances.

    Classes with no distances are omitted with a warning. A pooled global
    quantile is kept as the fallback for unseen classes.
    """
    if not 0.0 < q < 1.0:
        raise ConfigError(f"quantile must lie in (0, 1), got {q}")
    thresholds = {}
    counts = {}
    pooled = []
    for label in sorted(distances):
        vals = list(distances[label])
        if not vals:
            logger.warning("class %s has no calibration distances; omitted", label)
            continue
        thresholds[label] = nearest_rank_quantile(vals, q)
        counts[label] = len(vals)
        pooled.extend(vals)
    return ThresholdTable(
        thresholds=thresholds, q=q, counts=counts,
        global_threshold=nearest_rank_quantile(pooled, q) if pooled else None,
    )


def flag(d_min, theta) -> bool:
    """Error iff the minimum distance strictly exceeds the threshold."""
    return d_min > theta


def _score(d_min, theta) -> float:
    return d_min / max(theta, _SCORE_FLOOR)


def calibration_distances(model, samples, zero_residual=False) -> dict:
    """Single-candidate matching distance of each normal sample, by class.

    Each sample is reconstructed with its own class as the only query,
    mirroring the training protocol.
    """
    out: dict[int, list] = {}
    for s in samples:
        normals = reconstruct_normals([s.target_class], s.context, model.centers,
                                      model.params)
        if zero_residual:
            normals = NormalSet(candidates=normals.candidates,
                                representations=normals.representations - normals.residuals,
                                residuals=np.zeros_like(normals.residuals))
        d, _ = match(s.target_feature, normals)
        out.setdefault(s.target_class, []).append(d)
    return out


def detect_video(video, model, graph, thresholds, *, missing_threshold="global",
                 zero_residual=False, candidate_mode="all", rng=None):
    """Run the full per-segment detection pass over one video.

    For each non-background segment, the candidate next actions are
    predicted from the labels of the preceding non-background segments, a
    normal representation is reconstructed for every candidate from the
    frames before the segment, and the verdict comes from thresholding the
    minimum matching distance. Background segments get no verdict.

    candidate_mode 'random-one' keeps a single randomly chosen candidate
    (the ablation that shows why multiple candidates matter);
    zero_residual=True matches against bare cluster centers.
    """
    if candidate_mode not in ("all", "random-one"):
        raise ConfigError(f"unknown candidate_mode {candidate_mode!r}")
    if candidate_mode == "random-one" and rng is None:
        rng = np.random.default_rng(0)
    known = sorted(model.centers.centers)
    if not known:
        raise ConfigError("model has no cluster centers")
    verdicts = []
    executed = []
    prev_ed = 0
    for seg in video.segments:
        context_end = prev_ed
        prev_ed = seg.ed
        if seg.label == BACKGROUND:
            continue
        predicted = valid_next_actions(graph, executed)
        executed.append(seg.label)
        candidates = sorted(c for c in predicted if c in model.centers)
        if not candidates:
            logger.info("video %s segment [%d,%d): no usable candidates, "
                        "falling back to all %d classes",
                        video.id, seg.st, seg.ed, len(known))
            candidates = known
        if candidate_mode == "random-one":
            candidates = [candidates[int(rng.integers(len(candidates)))]]
        normals = reconstruct_normals(candidates, video.features[:context_end],
                                      model.centers, model.params)
        if zero_residual:
            normals = NormalSet(candidates=normals.candidates,
                                representations=normals.representations - normals.residuals,
                                residuals=np.zeros_like(normals.residuals))
        f_act = action_feature(video.features, seg)
        d_min, matched = match(f_act, normals)
        theta = thresholds.lookup(seg.label, missing=missing_threshold)
        verdicts.append(SegmentVerdict(
            video=video.id, segment=seg, d_min=d_min, matched=matched,
            candidates=tuple(candidates), is_error=flag(d_min, theta),
            score=_score(d_min, theta),
        ))
    return verdicts


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def save_thresholds(path, table) -> None:
    doc = {"q": table.q,
           "thresholds": {str(k): table.thresholds[k] for k in sorted(table.thresholds)},
           "counts": {str(k): table.counts[k] for k in sorted(table.counts)}}
    if table.global_threshold is not None:
        doc["global"] = table.global_threshold
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_thresholds(path) -> ThresholdTable:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(path, f"invalid JSON ({e.msg})") from e
    if "q" not in doc or "thresholds" not in doc:
        raise FormatError(path, "missing field 'q' or 'thresholds'")
    return ThresholdTable(
        thresholds={int(k): float(v) for k, v in doc["thresholds"].items()},
        q=float(doc["q"]),
        counts={int(k): int(v) for k, v in doc.get("counts", {}).items()},
        global_threshold=doc.get("global"),
    )


def save_verdicts(path, verdicts) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for v in verdicts:
            f.write(json.dumps({
                "video": v.video, "st": int(v.segment.st), "ed": int(v.segment.ed),
                "label": int(v.segment.label), "d_min": float(v.d_min),
                "matched": int(v.matched), "is_error": bool(v.is_error),
                "score": float(v.score)}) + "\n")


def load_verdicts(path):
    verdicts = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(path, f"line {lineno}: invalid JSON ({e.msg})") from e
            missing = {"video", "st", "ed", "label", "d_min", "matched",
                       "is_error", "score"} - row.keys()
            if missing:
                raise FormatError(path, f"line {lineno}: missing field(s) {sorted(missing)}")
            verdicts.append(SegmentVerdict(
                video=row["video"],
                segment=ActionSegment(int(row["label"]), int(row["st"]), int(row["ed"])),
                d_min=float(row["d_min"]), matched=int(row["matched"]),
                candidates=(), is_error=bool(row["is_error"]), score=float(row["score"]),
            ))
    return verdicts
