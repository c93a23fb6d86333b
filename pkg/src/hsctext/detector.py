"""Multi-scale sliding-window character detection and greedy non-maximum suppression."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .classifiers import BACKGROUND, LABELS, detection_scores, raw_scores
from .features import WINDOW, resize
from .sparse import as_gray_float


@dataclass(frozen=True)
class CharCandidate:
    x: float
    y: float
    w: float
    h: float
    label: str
    score: float
    scale: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError("candidate box must have positive size")
        if self.label not in LABELS[:BACKGROUND]:
            raise ValueError(f"invalid candidate label {self.label!r}")

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class PyramidSpec:
    window: int = WINDOW
    stride: int = 8
    scale_ratio: float = 2 ** -0.5
    min_side: int = WINDOW

    def __post_init__(self):
        if not 0 < self.scale_ratio < 1:
            raise ValueError("scale_ratio must lie in (0, 1)")
        if self.stride < 1 or self.window < 1 or self.min_side < self.window:
            raise ValueError("invalid pyramid geometry")


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def pyramid_levels(image, spec: PyramidSpec | None = None):
    """Yield ``(scale_index, level_image, fx, fy)``; level pixel * (fx, fy) = original pixel."""
    spec = spec or PyramidSpec()
    img = as_gray_float(image)
    if img.size == 0:
        raise ValueError("empty image")
    H, W = img.shape
    base = img
    if min(H, W) < spec.min_side:
        f = spec.min_side / min(H, W)
        base = resize(img, max(spec.min_side, round(W * f)), max(spec.min_side, round(H * f)))
    bh, bw = base.shape
    i = 0
    while True:
        s = spec.scale_ratio ** i
        w, h = round(bw * s), round(bh * s)
        if min(w, h) < spec.window:
            break
        level = base if i == 0 else resize(base, w, h)
        yield i, level, W / w, H / h
        i += 1


def window_origins(height: int, width: int, spec: PyramidSpec) -> list[tuple[int, int]]:
    ys = range(0, height - spec.window + 1, spec.stride)
    xs = range(0, width - spec.window + 1, spec.stride)
    return [(y, x) for y in ys for x in xs]


def generate_windows(image, spec: PyramidSpec | None = None):
    """All windows as ``(pixels, (x, y, w, h) in original coordinates, scale_index)``."""
    spec = spec or PyramidSpec()
    out = []
    for i, level, fx, fy in pyramid_levels(image, spec):
        for y, x in window_origins(*level.shape, spec):
            box = (x * fx, y * fy, spec.window * fx, spec.window * fy)
            out.append((level[y:y + spec.window, x:x + spec.window], box, i))
    return out


def _check_compatible(model, extractor):
    if model.feature_dim != extractor.dim:
        raise ValueError(f"classifier expects {model.feature_dim}-dim features, extractor gives {extractor.dim}")
    if model.feature and model.feature != extractor.name:
        raise ValueError(f"classifier was trained on {model.feature!r} features, not {extractor.name!r}")


def detect_chars(image, model, extractor, thr: float = 0.0, spec: PyramidSpec | None = None,
                 top_n: int | None = 30, threads: int = 1) -> list[CharCandidate]:
    """Score every pyramid window and keep (window, label) pairs whose detection score exceeds ``thr``.

    ``top_n`` caps the candidates kept per label (highest scores first).
    Output is ordered by scale, then window position, then label.
    """
    spec = spec or PyramidSpec()
    _check_compatible(model, extractor)
    levels = list(pyramid_levels(image, spec))

    def run(level_info):
        i, level, fx, fy = level_info
        origins = window_origins(*level.shape, spec)
        S = detection_scores(raw_scores(model, extractor.level_features(level, origins)))
        found = []
        for wi, li in zip(*np.nonzero(S > thr)):
            y, x = origins[wi]
            found.append(CharCandidate(x * fx, y * fy, spec.window * fx, spec.window * fy,
                                       LABELS[li], float(S[wi, li]), i))
        return found

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            per_level = list(pool.map(run, levels))
    else:
        per_level = [run(lv) for lv in levels]
    cands = [c for found in per_level for c in found]
    if top_n is not None:
        keep = set()
        by_label: dict[str, list[int]] = {}
        for k, c in enumerate(cands):
            by_label.setdefault(c.label, []).append(k)
        for ks in by_label.values():
            ks.sort(key=lambda k: -cands[k].score)
            keep.update(ks[:top_n])
        cands = [c for k, c in enumerate(cands) if k in keep]
    return cands


def _sort_key(c: CharCandidate):
    return (-c.score, c.x, c.y, LABELS.index(c.label))


def nms(candidates, overlap_thr: float = 0.5, per_label: bool = False) -> list[CharCandidate]:
    """Greedy suppression in descending-score order.

    Ties are broken by smaller x, then smaller y, then label order. With
    ``per_label`` only candidates sharing a label suppress each other.
    """
    if not 0 < overlap_thr < 1:
        raise ValueError("overlap_thr must lie in (0, 1)")
    order = sorted(candidates, key=_sort_key)
    if not order:
        return []
    B = np.array([c.box for c in order], dtype=np.float64)
    x1, y1 = B[:, 0], B[:, 1]
    x2, y2 = x1 + B[:, 2], y1 + B[:, 3]
    area = B[:, 2] * B[:, 3]
    labels = np.array([LABELS.index(c.label) for c in order])
    alive = np.ones(len(order), dtype=bool)
    for i in range(len(order)):
        if not alive[i]:
            continue
        rest = np.arange(i + 1, len(order))
        rest = rest[alive[rest]]
        if per_label:
            rest = rest[labels[rest] == labels[i]]
        if rest.size == 0:
            continue
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
        ov = inter / (area[i] + area[rest] - inter)
        alive[rest[ov > overlap_thr]] = False
    return [c for c, a in zip(order, alive) if a]


def write_candidates(path, candidates) -> None:
    with open(path, "w") as fh:
        for c in candidates:
            d = asdict(c)
            fh.write(json.dumps({k: d[k] for k in ("x", "y", "w", "h", "label", "score", "scale")}) + "\n")


def read_candidates(path) -> list[CharCandidate]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(CharCandidate(d["x"], d["y"], d["w"], d["h"], d["label"], d["score"], d.get("scale", 0)))
    return out
