import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hsctext.classifiers import LABELS, LinearModel
from hsctext.detector import (
    CharCandidate, PyramidSpec, detect_chars, generate_windows, iou, nms, pyramid_levels, read_candidates,
    write_candidates,
)
from hsctext.features import HOGExtractor


# --------------------------------------------------------------- pyramid

def test_single_window_image():
    assert len(generate_windows(np.zeros((48, 48)))) == 1


def test_stride_arithmetic():
    wins = generate_windows(np.zeros((48, 56)))
    assert [b for _, b, _ in wins] == [(0.0, 0.0, 48.0, 48.0), (8.0, 0.0, 48.0, 48.0)]


def test_96_square_pyramid():
    levels = list(pyramid_levels(np.zeros((96, 96))))
    assert [lv.shape for _, lv, _, _ in levels] == [(96, 96), (68, 68), (48, 48)]
    counts = [sum(1 for *_, s in generate_windows(np.zeros((96, 96))) if s == i) for i in range(3)]
    # oracle: floor((side - 48) / 8) + 1 positions per axis
    assert counts == [((side - 48) // 8 + 1) ** 2 for side in (96, 68, 48)] == [49, 9, 1]


def test_small_image_is_upscaled():
    levels = list(pyramid_levels(np.zeros((24, 60))))
    assert levels[0][1].shape == (48, 120)
    for _, box, _ in generate_windows(np.zeros((24, 60))):
        assert box[3] == pytest.approx(24.0)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(48, 160), w=st.integers(48, 160))
def test_boxes_inside_image(h, w):
    for _, (x, y, bw, bh), _ in generate_windows(np.zeros((h, w))):
        assert x >= 0 and y >= 0
        assert x + bw <= w + 1 and y + bh <= h + 1


def test_empty_image_rejected():
    with pytest.raises(ValueError):
        generate_windows(np.zeros((0, 10)))


def test_bad_ratio():
    with pytest.raises(ValueError):
        PyramidSpec(scale_ratio=1.0)


# -------------------------------------------------------------- detection

def biased_model(label, margin):
    # constant scores: `label` beats background by `margin`, all else far below
    b = np.full(63, -50.0)
    b[-1] = 0.0
    b[LABELS.index(label)] = margin
    return LinearModel(np.zeros((63, 1116)), b, "hog")


def test_detect_infinite_threshold_is_empty():
    assert detect_chars(np.random.default_rng(0).random((60, 60)), biased_model("A", 3.0), HOGExtractor(),
                        thr=math.inf) == []


def test_detect_emits_per_window_and_label():
    img = np.random.default_rng(0).random((48, 56))
    cands = detect_chars(img, biased_model("k", 2.0), HOGExtractor(), thr=0.0)
    assert [(c.x, c.label) for c in cands] == [(0.0, "k"), (8.0, "k")]
    assert all(c.score == pytest.approx(2.0) for c in cands)
    assert detect_chars(img, biased_model("k", -1.0), HOGExtractor(), thr=0.0) == []


def test_detect_top_n_cap():
    img = np.random.default_rng(0).random((48, 120))
    cands = detect_chars(img, biased_model("k", 2.0), HOGExtractor(), thr=0.0, top_n=3)
    assert len(cands) == 3


def test_detect_threads_same_output():
    img = np.random.default_rng(1).random((100, 100))
    rng = np.random.default_rng(2)
    m = LinearModel(rng.standard_normal((63, 1116)), rng.standard_normal(63), "hog")
    a = detect_chars(img, m, HOGExtractor(), thr=0.0, top_n=None)
    b = detect_chars(img, m, HOGExtractor(), thr=0.0, top_n=None, threads=3)
    assert a == b and len(a) > 0


def test_detect_feature_mismatch():
    with pytest.raises(ValueError):
        detect_chars(np.zeros((48, 48)), LinearModel(np.zeros((63, 10)), np.zeros(63)), HOGExtractor())
    with pytest.raises(ValueError):
        detect_chars(np.zeros((48, 48)), LinearModel(np.zeros((63, 1116)), np.zeros(63), "hsc"), HOGExtractor())


# -------------------------------------------------------------------- NMS

def nms_oracle(cands, thr):
    order = sorted(cands, key=lambda c: (-c.score, c.x, c.y, LABELS.index(c.label)))
    kept = []
    suppressed = [False] * len(order)
    for i in range(len(order)):
        if suppressed[i]:
            continue
        kept.append(order[i])
        for j in range(i + 1, len(order)):
            if not suppressed[j] and iou(order[i].box, order[j].box) > thr:
                suppressed[j] = True
    return kept


def random_candidates(rng, n):
    out = []
    for _ in range(n):
        out.append(CharCandidate(
            float(rng.integers(0, 60)), float(rng.integers(0, 20)), float(rng.integers(10, 40)),
            float(rng.integers(10, 40)), LABELS[rng.integers(0, 5)], float(rng.integers(0, 6) / 2)))
    return out


def test_nms_single_and_duplicate():
    c = CharCandidate(0, 0, 10, 10, "a", 1.0)
    assert nms([c]) == [c]
    hi = CharCandidate(0, 0, 10, 10, "b", 2.0)
    assert nms([c, hi]) == [hi]


def test_nms_per_label_mode():
    a = CharCandidate(0, 0, 10, 10, "a", 2.0)
    b = CharCandidate(0, 0, 10, 10, "b", 1.0)
    assert nms([a, b]) == [a]
    assert nms([a, b], per_label=True) == [a, b]


@pytest.mark.parametrize("seed", range(20))
def test_nms_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    cands = random_candidates(rng, 30)
    out = nms(cands, 0.5)
    assert out == nms_oracle(cands, 0.5)
    assert nms(out, 0.5) == out
    for i in range(len(out)):
        for j in range(i + 1, len(out)):
            assert iou(out[i].box, out[j].box) <= 0.5
    assert all(c in cands for c in out)


def test_candidate_validation():
    with pytest.raises(ValueError):
        CharCandidate(0, 0, 0, 10, "a", 1.0)
    with pytest.raises(ValueError):
        CharCandidate(0, 0, 5, 10, "BACKGROUND", 1.0)


def test_candidate_dump_roundtrip(tmp_path):
    cands = random_candidates(np.random.default_rng(5), 10) + [CharCandidate(1 / 3, 0.1, 48 * 2 ** 0.5, 7.0, "Z", -1e-7, 2)]
    write_candidates(tmp_path / "a.jsonl", cands)
    back = read_candidates(tmp_path / "a.jsonl")
    assert back == cands
    write_candidates(tmp_path / "b.jsonl", back)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
