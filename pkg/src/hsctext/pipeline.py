"""End-to-end orchestration: dictionary, features, classifiers, detection and word spotting."""

from __future__ import annotations

import csv
import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .classifiers import (
    FernsConfig, LinearConfig, SCConfig, group_by_class, train_ferns, train_linear, train_sc,
)
from .detector import CharCandidate, PyramidSpec, detect_chars, iou, nms
from .features import WINDOW, HOGExtractor, HSCExtractor, extract_batch
from .sparse import Dictionary, ksvd_fit, sample_patches
from .wordrec import CandidateSet, GeometricModel, PSParams, feasible_pair, read_lexicon, spot_word

REFERENCE_CAP_HEIGHT = 26.0  # capital-letter height the classifiers see inside a 48-pixel window


@dataclass
class DictConfig:
    patch_side: int = 9
    k: int = 100
    T0: int = 2
    iters: int = 20
    images: int = 600  # corpus images sampled for patches
    per_image: int = 20
    seed: int = 0


@dataclass
class DetectConfig:
    thr: float = 0.0
    top_n: int = 30
    overlap: float = 0.5
    per_label_nms: bool = True
    stride: int = 8
    scale_ratio: float = 2 ** -0.5

    def spec(self) -> PyramidSpec:
        return PyramidSpec(stride=self.stride, scale_ratio=self.scale_ratio)


class Timer:
    """Accumulates wall time and item counts per named stage."""

    def __init__(self):
        self.seconds: dict[str, float] = {}
        self.items: dict[str, int] = {}

    @contextmanager
    def stage(self, name: str, items: int = 1):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - t
            self.items[name] = self.items.get(name, 0) + items

    def table(self) -> dict[str, dict[str, float]]:
        return {k: {"seconds": v, "items": self.items[k], "per_item": v / max(1, self.items[k])}
                for k, v in self.seconds.items()}


def learn_dictionary(images, cfg: DictConfig) -> tuple[Dictionary, list[float]]:
    rng = np.random.default_rng(cfg.seed)
    n = min(cfg.images, len(images))
    pick = np.sort(rng.choice(len(images), n, replace=False))
    X = sample_patches([images[i] for i in pick], cfg.per_image, cfg.patch_side, cfg.seed)
    res = ksvd_fit(X, cfg.k, cfg.T0, iters=cfg.iters, seed=cfg.seed, patch_side=cfg.patch_side)
    return res.dictionary, res.mse_history


def make_extractor(name: str, dictionary: Dictionary | None = None, T0: int = 2):
    if name == "hsc":
        if dictionary is None:
            raise ValueError("HSC features need a dictionary")
        return HSCExtractor(dictionary, T0)
    if name == "hog":
        return HOGExtractor()
    raise ValueError(f"unknown feature type {name!r}")


def extract_features(extractor, images, threads: int = 1) -> np.ndarray:
    if len(images) == 0:
        return np.zeros((0, extractor.dim))
    return extract_batch(extractor, list(images), threads)


def train_classifier(kind: str, F, y, feature: str, linear: LinearConfig | None = None, sc: SCConfig | None = None,
                     ferns: FernsConfig | None = None):
    if kind == "svm":
        return train_linear(F, y, linear or LinearConfig(), feature=feature)
    if kind == "sc":
        return train_sc(group_by_class(F, y), sc or SCConfig(), feature=feature)
    if kind == "ferns":
        return train_ferns(F, y, ferns or FernsConfig(), feature=feature)
    raise ValueError(f"unknown classifier {kind!r}")


def detect(image, model, extractor, cfg: DetectConfig, threads: int = 1) -> list[CharCandidate]:
    cands = detect_chars(image, model, extractor, cfg.thr, cfg.spec(), cfg.top_n, threads)
    return nms(cands, cfg.overlap, per_label=cfg.per_label_nms)


def recognize(image, lexicon, model, extractor, Z: GeometricModel, params: PSParams, cfg: DetectConfig,
              threads: int = 1, timer: Timer | None = None):
    timer = timer or Timer()
    with timer.stage("detection"):
        cands = detect(image, model, extractor, cfg, threads)
    with timer.stage("dp_search"):
        ranking = spot_word(CandidateSet(cands), lexicon, Z, params, threads)
    return ranking, cands


def match_truth(candidates, word: str, windows, min_iou: float = 0.4) -> tuple[CharCandidate, ...] | None:
    """Ground-truth configuration: the feasible chain of same-label candidates with the largest total
    IoU against the per-character boxes, each IoU at least ``min_iou``."""
    options = []
    for ch, box in zip(word, windows):
        opts = [(iou(c.box, box), c) for c in candidates if c.label == ch]
        opts = [(ov, c) for ov, c in opts if ov >= min_iou]
        if not opts:
            return None
        options.append(opts)
    # forward DP over positions; value = best summed IoU of a feasible prefix ending at the option
    value = [ov for ov, _ in options[0]]
    back = [[-1] * len(options[0])]
    for i in range(1, len(options)):
        cur, ptr = [], []
        for ov, c in options[i]:
            best, arg = -1.0, -1
            for k, (_, p) in enumerate(options[i - 1]):
                if value[k] >= 0 and feasible_pair(p, c) and value[k] > best:
                    best, arg = value[k], k
            cur.append(best + ov if arg >= 0 else -1.0)
            ptr.append(arg)
        value, back = cur, back + [ptr]
    if max(value) < 0:
        return None
    k = max(range(len(value)), key=lambda j: value[j])
    chain = []
    for i in range(len(options) - 1, -1, -1):
        chain.append(options[i][k][1])
        k = back[i][k]
    return tuple(reversed(chain))


# ----------------------------------------------------------- annotations

@dataclass
class Annotation:
    """One word image. Paths are relative to the annotation file unless absolute."""
    image: str
    word: str
    boxes: list[list[float]] | None = None  # per-character glyph boxes (x, y, w, h)
    lexicon: str | None = None
    windows: list[list[float]] | None = None  # per-character detection-like boxes

    def __post_init__(self):
        if not self.word:
            raise ValueError(f"{self.image}: empty ground-truth word")
        for name in ("boxes", "windows"):
            v = getattr(self, name)
            if v is not None and len(v) != len(self.word):
                raise ValueError(f"{self.image}: {len(v)} {name} for a {len(self.word)}-character word")


def read_annotations(path) -> list[Annotation]:
    path = Path(path)
    base = path.parent
    out = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            a = Annotation(rec["image"], rec["word"], rec.get("boxes"), rec.get("lexicon"), rec.get("windows"))
        except (KeyError, TypeError, json.JSONDecodeError) as e:
            raise ValueError(f"{path}:{n}: bad annotation record ({e})") from None
        a.image = str(base / a.image)
        if a.lexicon is not None:
            a.lexicon = str(base / a.lexicon)
        out.append(a)
    return out


def load_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8).copy()


def annotation_lexicon(a: Annotation, fallback: list[str] | None = None) -> list[str]:
    if a.lexicon is not None:
        return read_lexicon(a.lexicon)
    if fallback is None:
        raise ValueError(f"{a.image}: no lexicon given")
    return fallback


def windows_from_boxes(boxes, image_shape, stride: int = 8) -> list[tuple[float, float, float, float]]:
    """Square windows sized so the tallest glyph box fills the reference cap height, snapped to the grid.

    Used for annotations that carry glyph boxes but no windows.
    """
    H, W = image_shape
    b = np.asarray(boxes, dtype=np.float64)
    side = max(float(WINDOW), WINDOW * b[:, 3].max() / REFERENCE_CAP_HEIGHT)
    level = stride * side / WINDOW
    cy = (b[:, 1].min() + (b[:, 1] + b[:, 3]).max()) / 2
    y = min(max(0.0, round((cy - side / 2) / level) * level), max(0.0, H - side))
    out = []
    for bx, _, bw, _ in b:
        x = min(max(0.0, round((bx + bw / 2 - side / 2) / level) * level), max(0.0, W - side))
        out.append((x, y, side, side))
    return out


def annotation_windows(a: Annotation, image_shape) -> list[tuple[float, ...]] | None:
    if a.windows is not None:
        return [tuple(map(float, w)) for w in a.windows]
    if a.boxes is not None:
        return windows_from_boxes(a.boxes, image_shape)
    return None


def mce_samples(annotations, model, extractor, cfg: DetectConfig, threads: int = 1, min_iou: float = 0.4,
                lexicon: list[str] | None = None):
    """Training samples for coefficient learning; returns (samples, names of unmatched images)."""
    from .mce import TrainingSample

    samples, unmatched = [], []
    for a in annotations:
        img = load_gray(a.image)
        wins = annotation_windows(a, img.shape)
        if wins is None:
            raise ValueError(f"{a.image}: coefficient training needs character boxes or windows")
        cands = detect(img, model, extractor, cfg, threads)
        chain = match_truth(cands, a.word, wins, min_iou)
        lex = annotation_lexicon(a, lexicon)
        if chain is None or a.word not in lex:
            unmatched.append(a.image)
            continue
        samples.append(TrainingSample(cands, a.word, chain, lex, a.image))
    return samples, unmatched


# ------------------------------------------------------------ evaluation

def evaluable(word: str) -> bool:
    """Words longer than two characters made only of ASCII letters and digits."""
    return len(word) > 2 and word.isascii() and word.isalnum()


def same_word(a: str | None, b: str) -> bool:
    return a is not None and a.lower() == b.lower()


@dataclass
class EvalReport:
    total: int = 0
    correct: int = 0
    skipped: int = 0
    records: list[dict] = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def add(self, image: str, truth: str, predicted: str | None, objective, margin) -> None:
        if not evaluable(truth):
            self.skipped += 1
            self.records.append({"image": image, "truth": truth, "predicted": predicted, "correct": None,
                                 "objective": objective, "margin": margin})
            return
        ok = same_word(predicted, truth)
        self.total += 1
        self.correct += ok
        self.records.append({"image": image, "truth": truth, "predicted": predicted, "correct": ok,
                             "objective": objective, "margin": margin})

    def summary(self) -> dict:
        return {"total": self.total, "correct": self.correct, "accuracy": self.accuracy, "skipped": self.skipped}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_FIELDS)
            for r in self.records:
                w.writerow([r["image"], r["truth"], "" if r["predicted"] is None else r["predicted"],
                            "" if r["correct"] is None else int(r["correct"]),
                            _num(r["objective"]), _num(r["margin"])])


CSV_FIELDS = ["image", "truth", "predicted", "correct", "objective", "margin"]


def _num(v) -> str:
    return "" if v is None or not math.isfinite(v) else repr(float(v))


def recount_csv(path) -> tuple[int, int, float]:
    """(correct, total, accuracy) recomputed from an evaluation CSV."""
    correct = total = 0
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["correct"] == "":
                continue
            total += 1
            correct += row["correct"] == "1"
    return correct, total, (correct / total if total else 0.0)
