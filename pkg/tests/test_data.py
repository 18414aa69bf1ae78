import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amnar.data import (BACKGROUND, ActionSegment, VideoRecord, action_feature,
                        build_training_samples, cluster_centers, filter_segments,
                        load_features, majority_label, overlap_ratio,
                        read_segments, save_features, write_segments)
from amnar.errors import FormatError, InvalidSegmentError


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def test_empty_matrix_round_trip(tmp_path):
    path = tmp_path / "empty.amnf"
    save_features(path, np.zeros((0, 4)))
    m = load_features(path)
    assert m.shape == (0, 4)


def test_two_frame_round_trip(tmp_path):
    path = tmp_path / "tiny.amnf"
    save_features(path, np.array([[1.0], [3.0]]))
    m = load_features(path)
    assert m.tolist() == [[1.0], [3.0]]


@settings(max_examples=30, deadline=None)
@given(n=st.integers(0, 13), d=st.integers(1, 7), seed=st.integers(0, 10_000))
def test_round_trip_bit_exact(tmp_path_factory, n, d, seed):
    rng = np.random.default_rng(seed)
    # float32 is the storage type, so round-trip exactness is over f32 values
    m = rng.normal(0, 100, (n, d)).astype(np.float32).astype(np.float64)
    path = tmp_path_factory.mktemp("feat") / "m.amnf"
    save_features(path, m)
    back = load_features(path)
    assert back.dtype == np.float64
    assert np.array_equal(back, m)


def test_bad_magic_names_offset(tmp_path):
    path = tmp_path / "bad.amnf"
    path.write_bytes(b"NOPE" + bytes(10))
    with pytest.raises(FormatError) as exc:
        load_features(path)
    assert exc.value.offset == 0


def test_truncated_payload(tmp_path):
    path = tmp_path / "trunc.amnf"
    save_features(path, np.ones((3, 2)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="payload"):
        load_features(path)


def test_non_finite_payload_offset(tmp_path):
    path = tmp_path / "nan.amnf"
    m = np.ones((2, 2), dtype=np.float32)
    m[1, 0] = np.nan
    import struct
    path.write_bytes(struct.pack("<4sHII", b"AMNF", 1, 2, 2) + m.tobytes())
    with pytest.raises(FormatError) as exc:
        load_features(path)
    assert exc.value.offset == 14 + 2 * 4  # third float


def test_refuses_non_finite_on_write(tmp_path):
    with pytest.raises(FormatError):
        save_features(tmp_path / "x.amnf", np.array([[np.inf]]))


# ---------------------------------------------------------------------------
# action_feature
# ---------------------------------------------------------------------------

def test_action_feature_constant_rows():
    feats = np.tile([2.0, -1.0], (5, 1))
    assert action_feature(feats, ActionSegment(0, 1, 4)).tolist() == [2.0, -1.0]


def test_action_feature_two_point_mean():
    feats = np.array([[1.0], [3.0]])
    assert action_feature(feats, ActionSegment(0, 0, 2)).tolist() == [2.0]


def test_action_feature_matches_naive_sum():
    rng = np.random.default_rng(5)
    feats = rng.normal(0, 1, (7, 3))
    seg = ActionSegment(1, 0, 7)
    got = action_feature(feats, seg)
    naive = np.zeros(3)
    for i in range(seg.st, seg.ed):
        for c in range(3):
            naive[c] += feats[i, c]
    naive /= len(seg)
    assert np.allclose(got, naive, atol=1e-12)


def test_action_feature_permutation_invariant():
    rng = np.random.default_rng(6)
    feats = rng.normal(0, 1, (10, 4))
    seg = ActionSegment(0, 2, 9)
    base = action_feature(feats, seg)
    shuffled = feats.copy()
    shuffled[2:9] = feats[2:9][rng.permutation(7)]
    assert np.allclose(action_feature(shuffled, seg), base, atol=1e-12)


def test_action_feature_empty_segment():
    with pytest.raises(InvalidSegmentError):
        action_feature(np.ones((4, 2)), ActionSegment(0, 2, 2))


# ---------------------------------------------------------------------------
# overlap / filtering / relabeling
# ---------------------------------------------------------------------------

def test_overlap_identical():
    seg = ActionSegment(0, 3, 9)
    assert overlap_ratio(seg, [seg]) == 1.0


def test_overlap_disjoint_and_empty_gt():
    seg = ActionSegment(0, 0, 4)
    assert overlap_ratio(seg, [ActionSegment(0, 10, 12)]) == 0.0
    assert overlap_ratio(seg, []) == 0.0


def test_overlap_half():
    # interval-intersection oracle: [0,10) vs [5,15) share [5,10) = 5 of 10
    assert overlap_ratio(ActionSegment(0, 0, 10), [ActionSegment(0, 5, 15)]) == 0.5


def test_overlap_takes_closest_gt():
    pred = ActionSegment(0, 0, 10)
    gts = [ActionSegment(0, 0, 2), ActionSegment(0, 3, 10)]
    assert overlap_ratio(pred, gts) == 0.7


def test_filter_threshold_floor_and_boundary():
    preds = [ActionSegment(0, 0, 10), ActionSegment(0, 10, 20)]
    gts = [ActionSegment(0, 0, 10)]
    assert filter_segments(preds, gts, 0.0) == preds
    assert filter_segments([ActionSegment(0, 0, 10)], gts, 1.0) == [ActionSegment(0, 0, 10)]


def test_filter_ratio_comparison():
    gts = [ActionSegment(0, 0, 10)]
    half = ActionSegment(0, 5, 15)      # ratio 0.5
    seventy = ActionSegment(0, 3, 13)   # ratio 0.7
    kept = filter_segments([half, seventy], gts, 0.6)
    assert kept == [seventy]


def test_filter_preserves_order_subsequence():
    rng = np.random.default_rng(3)
    gts = [ActionSegment(0, i * 10, i * 10 + 10) for i in range(5)]
    preds = [ActionSegment(0, int(st), int(st) + 8)
             for st in rng.integers(0, 45, size=12)]
    kept = filter_segments(preds, gts, 0.6)
    it = iter(preds)
    assert all(any(k is p for p in it) for k in kept)  # order-preserving subsequence
    assert all(overlap_ratio(k, gts) >= 0.6 for k in kept)


def test_majority_label_unanimous_and_oracle():
    labels = np.array([3] * 6)
    assert majority_label(ActionSegment(0, 0, 6), labels) == 3
    labels = np.array([2, 2, 7, 2, 7, 2, 2, 7])
    assert majority_label(ActionSegment(0, 0, 8), labels) == 2


def test_majority_label_tie_breaks_to_smallest():
    labels = np.array([1, 2, 1, 2, 1, 2, 2, 1])
    assert majority_label(ActionSegment(0, 0, 8), labels) == 1


def test_majority_label_count_dominates():
    rng = np.random.default_rng(11)
    labels = rng.integers(0, 4, size=30)
    seg = ActionSegment(0, 4, 26)
    winner = majority_label(seg, labels)
    window = labels[4:26]
    win_count = int((window == winner).sum())
    assert all(win_count >= int((window == other).sum()) for other in set(window))


def test_majority_label_empty():
    with pytest.raises(InvalidSegmentError):
        majority_label(ActionSegment(0, 3, 3), np.zeros(5, dtype=int))


# ---------------------------------------------------------------------------
# cluster centers
# ---------------------------------------------------------------------------

def test_centers_single_and_pair():
    cc = cluster_centers([(1, np.array([4.0, 2.0]))])
    assert cc[1].tolist() == [4.0, 2.0]
    cc = cluster_centers([(1, np.array([0.0])), (1, np.array([2.0]))])
    assert cc[1].tolist() == [1.0]
    assert cc.counts[1] == 2


def test_centers_match_accumulation_oracle():
    rng = np.random.default_rng(8)
    samples = [(int(rng.integers(0, 4)), rng.normal(0, 1, 3)) for _ in range(60)]
    cc = cluster_centers(samples)
    sums, counts = {}, {}
    for label, vec in samples:
        sums.setdefault(label, np.zeros(3))
        sums[label] = sums[label] + vec
        counts[label] = counts.get(label, 0) + 1
    for label in counts:
        assert cc.counts[label] == counts[label]
        # N_y * center == coordinate-wise sum, within 1e-9 relative
        assert np.allclose(cc[label] * counts[label], sums[label], rtol=1e-9)


def test_centers_skip_background():
    cc = cluster_centers([(BACKGROUND, np.ones(2)), (0, np.zeros(2))])
    assert BACKGROUND not in cc
    assert 0 in cc


# ---------------------------------------------------------------------------
# segments file and sample curation
# ---------------------------------------------------------------------------

def test_segments_file_round_trip(tmp_path):
    path = tmp_path / "segs.jsonl"
    rows = [("a", ActionSegment(1, 0, 5), "gt"), ("a", ActionSegment(2, 5, 9), "gt"),
            ("a", ActionSegment(1, 0, 6), "pred")]
    write_segments(path, rows)
    gt = read_segments(path, source="gt")
    assert gt == {"a": [ActionSegment(1, 0, 5), ActionSegment(2, 5, 9)]}
    both = read_segments(path)
    assert len(both["a"]) == 3


def _video():
    rng = np.random.default_rng(0)
    feats = rng.normal(0, 1, (30, 2))
    segs = [ActionSegment(BACKGROUND, 0, 5), ActionSegment(1, 5, 15),
            ActionSegment(2, 15, 30)]
    labels = np.array([BACKGROUND] * 5 + [1] * 10 + [2] * 15)
    return VideoRecord("v", feats, segs, frame_labels=labels)


def test_training_samples_gt_strategy():
    video = _video()
    samples = build_training_samples(video, video.segments, strategy="gt")
    # background and the empty-context first segment are skipped; here the
    # leading background gives segment 1 a context
    assert [s.target_class for s in samples] == [1, 2]
    assert [s.context_end for s in samples] == [5, 15]
    assert np.allclose(samples[1].target_feature,
                       video.features[15:30].mean(axis=0))


def test_training_samples_hybrid_filters_and_relabels():
    video = _video()
    preds = [ActionSegment(BACKGROUND, 0, 5),
             ActionSegment(2, 5, 14),    # overlaps gt class-1 segment: relabeled to 1
             ActionSegment(2, 20, 30),   # ratio 1.0 within class-2 gt
             ActionSegment(1, 12, 29)]   # ratio 14/17 with class 2 -> kept, relabeled 2
    samples = build_training_samples(video, video.segments, preds,
                                     tau=0.6, strategy="hybrid")
    classes = [s.target_class for s in samples]
    assert classes[:2] == [1, 2]          # gt stream
    assert 1 in classes[2:] and 2 in classes[2:]


def test_training_samples_pred_strategy_keeps_raw_labels():
    video = _video()
    preds = [ActionSegment(BACKGROUND, 0, 5), ActionSegment(2, 5, 14)]
    samples = build_training_samples(video, video.segments, preds, strategy="pred")
    assert [s.target_class for s in samples] == [2]
