"""Seeded synthetic benchmark: rendered character crops, word images, lexicons and annotations.

Everything is rendered with PIL from a fixed font pool. Each item draws from
its own child generator, so outputs depend only on the seed and the item index.
"""

from __future__ import annotations

import functools
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .classifiers import BACKGROUND, LABELS
from .detector import CharCandidate
from .features import WINDOW, resize
from .wordrec import GeometricModel, PSParams, best_config, spot_word

CHARS = "".join(LABELS[:BACKGROUND])
SQRT2 = math.sqrt(2.0)

_FONT_DIRS = ["/usr/share/fonts/truetype/dejavu"]
_FONT_NAMES = [
    "DejaVuSans.ttf", "DejaVuSans-Bold.ttf", "DejaVuSansMono.ttf", "DejaVuSansMono-Bold.ttf",
    "DejaVuSerif.ttf", "DejaVuSerif-Bold.ttf", "DejaVuSans-Oblique.ttf", "DejaVuSerif-Italic.ttf",
    "STIXGeneral.ttf", "STIXGeneralBol.ttf",
]


def default_fonts() -> list[str]:
    dirs = list(_FONT_DIRS)
    try:
        import matplotlib

        dirs.append(os.path.join(os.path.dirname(matplotlib.__file__), "mpl-data", "fonts", "ttf"))
    except ImportError:
        pass
    found = []
    for name in _FONT_NAMES:
        for d in dirs:
            p = os.path.join(d, name)
            if os.path.exists(p):
                found.append(p)
                break
    if not found:
        raise FileNotFoundError("no usable TrueType fonts found")
    return found


@functools.lru_cache(maxsize=256)
def load_font(path: str, size: int) -> ImageFont.FreeTypeFont:
    return ImageFont.truetype(path, size)


@functools.lru_cache(maxsize=64)
def font_size_for_cap_height(path: str, cap_height: float) -> int:
    """Point size at which capital 'H' is ``cap_height`` pixels tall."""
    ref = load_font(path, 100)
    _, top, _, bottom = ref.getbbox("H", anchor="ls")
    return max(4, round(100 * cap_height / (bottom - top)))


@dataclass
class SynthConfig:
    seed: int = 0
    train_per_class: int = 200
    test_per_class: int = 50
    background_ratio: float = 10.0  # background crops per split = ratio x per-class count
    train_words: int = 100
    test_words: int = 200
    lexicon_size: int = 50
    near_misses: int = 2  # distractors one edit away from the truth
    noise: float = 0.0  # Gaussian noise sigma as a fraction of the gray range
    clutter: float = 0.0  # probability of background strokes per image
    cap_height: float = 26.0  # pixels, base scale
    jitter: int = 4
    min_spacing: float = 24.0  # minimum distance between character centers
    large_fraction: float = 1 / 3  # share of crops and words rendered sqrt(2) larger
    context_fraction: float = 0.8  # share of character crops rendered between neighbours
    word_height: int = 56
    classes: str = ""  # character crops only for these labels; empty means all 62
    fonts: list[str] = field(default_factory=list)

    def font_pool(self) -> list[str]:
        return list(self.fonts) if self.fonts else default_fonts()

    def class_indices(self) -> list[int]:
        if not self.classes:
            return list(range(BACKGROUND))
        bad = sorted(set(self.classes) - set(CHARS))
        if bad:
            raise ValueError(f"unknown character classes {''.join(bad)!r}")
        return sorted({CHARS.index(c) for c in self.classes})


# ------------------------------------------------------------- rendering

@dataclass
class Line:
    """A rendered text line: image plus per-character glyph boxes and centers."""
    image: np.ndarray  # uint8
    boxes: list[tuple[int, int, int, int]]
    centers: list[float]
    anchor_y: float  # vertical center of capital letters


def _polarity(rng) -> tuple[int, int]:
    bg = int(rng.integers(0, 256))
    contrast = int(rng.integers(90, 200))
    fg = bg - contrast if bg - contrast >= 0 and (bg + contrast > 255 or rng.random() < 0.5) else bg + contrast
    return int(np.clip(fg, 0, 255)), bg


def _layout(text: str, font, gaps, min_spacing: float):
    xs, centers, boxes = [], [], []
    x = 0.0
    for i, ch in enumerate(text):
        l, t, r, b = font.getbbox(ch, anchor="ls")
        c = x + (l + r) / 2
        if centers and c - centers[-1] < min_spacing:
            x += min_spacing - (c - centers[-1])
            c = centers[-1] + min_spacing
        xs.append(x)
        centers.append(c)
        boxes.append((l, t, r, b))
        x += font.getlength(ch) + gaps[i]
    return xs, centers, boxes


def render_line(text: str, font_path: str, cap_height: float, fg: int, bg: int, gaps, min_spacing: float,
                margin_x: float, height: int, anchor_y: float) -> Line:
    """Draw ``text`` one character at a time; no noise or clutter is added here."""
    font = load_font(font_path, font_size_for_cap_height(font_path, cap_height))
    baseline = anchor_y + cap_height / 2
    xs, centers, rel = _layout(text, font, gaps, min_spacing)
    width = int(math.ceil(margin_x + xs[-1] + max(font.getlength(text[-1]), rel[-1][2]) + margin_x)) if text else int(2 * margin_x)
    img = Image.new("L", (max(width, 1), height), bg)
    draw = ImageDraw.Draw(img)
    boxes, cs = [], []
    for x, ch, (l, t, r, b), c in zip(xs, text, rel, centers):
        px = round(margin_x + x)
        draw.text((px, round(baseline)), ch, font=font, fill=fg, anchor="ls")
        boxes.append((px + l, round(baseline) + t, r - l, b - t))
        cs.append(px + (l + r) / 2)
    return Line(np.asarray(img, dtype=np.uint8).copy(), boxes, cs, round(baseline) - cap_height / 2)


def add_clutter(img: np.ndarray, rng, amount: float, fg: int, bg: int) -> np.ndarray:
    if amount <= 0 or rng.random() >= amount:
        return img
    pil = Image.fromarray(img)
    draw = ImageDraw.Draw(pil)
    h, w = img.shape
    for _ in range(int(rng.integers(1, 4))):
        shade = int(np.clip(bg + (fg - bg) * rng.uniform(0.2, 0.6), 0, 255))
        pts = [(float(rng.uniform(0, w)), float(rng.uniform(0, h))) for _ in range(2)]
        if rng.random() < 0.5:
            draw.line(pts, fill=shade, width=int(rng.integers(1, 3)))
        else:
            (x0, y0), (x1, y1) = pts
            draw.rectangle([min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1)], outline=shade)
    return np.asarray(pil, dtype=np.uint8).copy()


def add_noise(img: np.ndarray, rng, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    noisy = img.astype(np.float64) + rng.normal(0.0, sigma * 255.0, img.shape)
    return np.clip(np.rint(noisy), 0, 255).astype(np.uint8)


def _crop(img: np.ndarray, cx: float, cy: float, side: int, fill: int) -> np.ndarray:
    """Square crop centered at (cx, cy); areas outside the image take the background value."""
    x0, y0 = int(round(cx - side / 2)), int(round(cy - side / 2))
    out = np.full((side, side), fill, dtype=np.uint8)
    h, w = img.shape
    sx0, sy0 = max(0, x0), max(0, y0)
    sx1, sy1 = min(w, x0 + side), min(h, y0 + side)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = img[sy0:sy1, sx0:sx1]
    return out


def _to_window(crop: np.ndarray) -> np.ndarray:
    if crop.shape == (WINDOW, WINDOW):
        return crop
    return np.clip(np.rint(resize(crop.astype(np.float64), WINDOW, WINDOW)), 0, 255).astype(np.uint8)


# ------------------------------------------------------------ char crops

def _child(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


def char_crop(label: int, rng, cfg: SynthConfig, fonts: list[str]) -> np.ndarray:
    """A 48x48 crop centered (up to jitter) on one rendered character, often between neighbours."""
    font = fonts[int(rng.integers(len(fonts)))]
    s = SQRT2 if rng.random() < cfg.large_fraction else 1.0
    fg, bg = _polarity(rng)
    ch = CHARS[label]
    if rng.random() < cfg.context_fraction:
        text = CHARS[int(rng.integers(len(CHARS)))] + ch + CHARS[int(rng.integers(len(CHARS)))]
        mid = 1
    else:
        text, mid = ch, 0
    gaps = rng.uniform(2, 8, len(text)) * s
    side = int(round(WINDOW * s))
    line = render_line(text, font, cfg.cap_height * s, fg, bg, gaps, cfg.min_spacing * s, side, 2 * side, side)
    img = add_clutter(line.image, rng, cfg.clutter, fg, bg)
    j = cfg.jitter * s
    cx = line.centers[mid] + rng.uniform(-j, j)
    cy = line.anchor_y + rng.uniform(-j, j)
    crop = _to_window(_crop(img, cx, cy, side, bg))
    return add_noise(crop, rng, cfg.noise)


def background_crop(rng, cfg: SynthConfig, fonts: list[str]) -> np.ndarray:
    """Negative windows: between characters, blank, oversized, undersized or vertically offset text."""
    font = fonts[int(rng.integers(len(fonts)))]
    fg, bg = _polarity(rng)
    kind = rng.choice(5, p=[0.35, 0.15, 0.2, 0.15, 0.15])
    rand_text = lambda n: "".join(CHARS[int(i)] for i in rng.integers(0, len(CHARS), n))
    if kind == 1:
        img = np.full((WINDOW, WINDOW), bg, dtype=np.uint8)
        img = add_clutter(img, rng, max(cfg.clutter, 0.5), fg, bg)
        return add_noise(img, rng, cfg.noise)
    if kind == 0:
        scale, text = 1.0, rand_text(4)
    elif kind == 2:
        scale, text = float(rng.uniform(1.9, 2.6)), rand_text(2)
    elif kind == 3:
        scale, text = float(rng.uniform(0.35, 0.55)), rand_text(6)
    else:
        scale, text = 1.0, rand_text(3)
    gaps = rng.uniform(2, 8, len(text)) * scale
    line = render_line(text, font, cfg.cap_height * scale, fg, bg, gaps, cfg.min_spacing * scale,
                       WINDOW, int(WINDOW * max(2, 2 * scale)), WINDOW * max(1.0, scale))
    img = add_clutter(line.image, rng, cfg.clutter, fg, bg)
    cy = line.anchor_y
    if kind == 0:
        i = int(rng.integers(len(text) - 1))
        cx = (line.centers[i] + line.centers[i + 1]) / 2 + rng.uniform(-3, 3)
    elif kind == 2:
        cx = line.centers[int(rng.integers(len(text)))] + rng.uniform(-20, 20) * scale
        cy += rng.uniform(-12, 12) * scale
    elif kind == 3:
        cx = float(np.mean(line.centers)) + rng.uniform(-6, 6)
    else:
        cx = line.centers[1] + rng.uniform(-4, 4)
        cy += rng.choice([-1, 1]) * rng.uniform(14, 22)
    return add_noise(_crop(img, cx, cy, WINDOW, bg), rng, cfg.noise)


def char_dataset(cfg: SynthConfig, split: str) -> tuple[np.ndarray, np.ndarray]:
    """(n, 48, 48) uint8 crops and integer labels; background crops use the last label."""
    per = cfg.train_per_class if split == "train" else cfg.test_per_class
    split_id = 0 if split == "train" else 1
    fonts = cfg.font_pool()
    crops, labels = [], []
    for c in cfg.class_indices():
        for i in range(per):
            crops.append(char_crop(c, _child(cfg.seed, 1, split_id, c, i), cfg, fonts))
            labels.append(c)
    for i in range(int(round(cfg.background_ratio * per))):
        crops.append(background_crop(_child(cfg.seed, 2, split_id, i), cfg, fonts))
        labels.append(BACKGROUND)
    if not crops:
        return np.zeros((0, WINDOW, WINDOW), dtype=np.uint8), np.zeros(0, dtype=np.int64)
    return np.stack(crops), np.array(labels, dtype=np.int64)


# ------------------------------------------------------------------ words

_CONS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiouy"


def pseudo_word(rng, length: int) -> str:
    out = []
    vowel = rng.random() < 0.4
    while len(out) < length:
        pool = _VOWELS if vowel else _CONS
        out.append(pool[int(rng.integers(len(pool)))])
        vowel = not vowel if rng.random() < 0.85 else vowel
    return "".join(out)


def casing_of(word: str) -> str:
    if word.isdigit():
        return "digits"
    if word.isupper():
        return "upper"
    if word[:1].isupper():
        return "title"
    return "lower"


def apply_casing(word: str, casing: str) -> str:
    return {"upper": word.upper(), "title": word.capitalize(), "lower": word.lower()}.get(casing, word)


def random_word(rng, casing: str | None = None) -> str:
    if casing is None:
        casing = rng.choice(["lower", "title", "upper", "digits"], p=[0.4, 0.3, 0.25, 0.05])
    if casing == "digits":
        return "".join(str(d) for d in rng.integers(0, 10, int(rng.integers(3, 6))))
    return apply_casing(pseudo_word(rng, int(rng.integers(3, 9))), casing)


def near_miss(word: str, rng) -> str:
    pool = "0123456789" if word.isdigit() else (_CONS + _VOWELS)
    i = int(rng.integers(len(word)))
    ch = pool[int(rng.integers(len(pool)))]
    if word[i].isupper():
        ch = ch.upper()
    return word[:i] + ch + word[i + 1:]


def make_lexicon(truth: str, size: int, rng, near: int = 2) -> list[str]:
    """Truth plus distractors sharing its casing pattern, a few of them one substitution away."""
    casing = casing_of(truth)
    words = [truth]
    seen = {truth.lower()}
    tries = 0
    while len(words) < size and tries < 100 * size:
        tries += 1
        w = near_miss(truth, rng) if len(words) <= near else random_word(rng, casing)
        if w.lower() not in seen:
            seen.add(w.lower())
            words.append(w)
    order = rng.permutation(len(words))
    return [words[i] for i in order]


@dataclass
class WordImage:
    image: np.ndarray
    word: str
    boxes: list[tuple[int, int, int, int]]
    lexicon: list[str]
    scale: float
    anchor_y: float
    centers: list[float]


def word_image(rng, cfg: SynthConfig, fonts: list[str]) -> WordImage:
    word = random_word(rng)
    font = fonts[int(rng.integers(len(fonts)))]
    s = SQRT2 if rng.random() < cfg.large_fraction else 1.0
    fg, bg = _polarity(rng)
    gaps = rng.uniform(2, 8, len(word)) * s
    height = int(round(cfg.word_height * s))
    anchor = height / 2 + rng.uniform(-cfg.jitter, cfg.jitter) * s
    line = render_line(word, font, cfg.cap_height * s, fg, bg, gaps, cfg.min_spacing * s,
                       float(rng.uniform(20, 28)) * s, height, anchor)
    img = add_noise(add_clutter(line.image, rng, cfg.clutter, fg, bg), rng, cfg.noise)
    lex = make_lexicon(word, cfg.lexicon_size, rng, cfg.near_misses)
    return WordImage(img, word, line.boxes, lex, s, line.anchor_y, line.centers)


def word_dataset(cfg: SynthConfig, split: str) -> list[WordImage]:
    n = cfg.train_words if split == "train" else cfg.test_words
    split_id = 0 if split == "train" else 1
    fonts = cfg.font_pool()
    return [word_image(_child(cfg.seed, 3, split_id, i), cfg, fonts) for i in range(n)]


def truth_windows(w: WordImage, stride: int = 8) -> list[tuple[float, float, float, float]]:
    """Detection-like square boxes around each character, snapped to the sliding-window grid."""
    side = WINDOW * w.scale
    level = stride * w.scale
    H, W = w.image.shape
    out = []
    for c in w.centers:
        x = min(max(0.0, round((c - side / 2) / level) * level), max(0.0, W - side))
        y = min(max(0.0, round((w.anchor_y - side / 2) / level) * level), max(0.0, H - side))
        out.append((x, y, side, side))
    return out


# -------------------------------------------------------- geometric pairs

def geometric_pairs(words, seed: int = 0):
    """Positive pairs: consecutive characters. Negatives: skips, far gaps, overlaps, scale and row mismatches.

    ``words`` holds ``WordImage`` objects or per-word lists of ``(x, y, w, h)``
    character windows. Reversed pairs are left out: the chain search never
    scores them.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    pos, neg = [], []

    def cc(box, label="a"):
        return CharCandidate(float(box[0]), float(box[1]), float(box[2]), float(box[3]), label, 0.0)

    for w in words:
        boxes = truth_windows(w) if isinstance(w, WordImage) else [tuple(b) for b in w]
        n = len(boxes)
        for i in range(n - 1):
            pos.append((cc(boxes[i]), cc(boxes[i + 1])))
        for i in range(n - 1):
            a = boxes[i]
            kind = int(rng.integers(5))
            if kind == 0 and i + 2 < n:
                b = boxes[i + 2 + int(rng.integers(0, max(1, n - i - 2)))]
            elif kind == 1:
                b = (a[0] + a[2] * rng.uniform(1.2, 2.5), a[1], a[2], a[3])
            elif kind == 2:
                b = (a[0] + a[2] / 6 * int(rng.integers(0, 2)), a[1], a[2], a[3])
            elif kind == 3:
                f = rng.choice([SQRT2, 1 / SQRT2, 2.0, 0.5])
                b = (boxes[i + 1][0], a[1] - (f - 1) * a[3] / 2, a[2] * f, a[3] * f)
            else:
                b = (boxes[i + 1][0], a[1] + rng.choice([-1, 1]) * rng.uniform(0.3, 0.8) * a[3], a[2], a[3])
            neg.append((cc(a), cc(b)))
    return pos, neg


# ------------------------------------------------------ planted MCE data

PLANTED_Z = GeometricModel(np.array([1.0, 1.0, -4.0, -2.0, -3.0, -3.0]), 0.0)


def planted_mce_set(n: int, seed: int = 0, planted: PSParams = PSParams(2.0, -5.0), Z: GeometricModel = PLANTED_Z,
                    lexicon_size: int = 10):
    """Candidate-level word samples that the planted coefficients classify correctly.

    Each lexicon holds the truth, one extension of it whose extra characters
    have weak scores but good geometry (it wins unless the length penalty is
    strong), and words spelled by high-scoring candidates spread too far apart
    (they win unless the pair term carries enough weight). Samples the planted
    coefficients get wrong are rejected. Returns ``mce.TrainingSample`` items.
    """
    from .mce import TrainingSample

    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    out = []
    while len(out) < n:
        truth = pseudo_word(rng, int(rng.integers(3, 6)))
        step = rng.uniform(24, 34)
        chain = tuple(CharCandidate(10 + i * step, 0.0, 48.0, 48.0, ch, float(rng.normal(1.5, 0.5)))
                      for i, ch in enumerate(truth))
        cands = list(chain)
        lex = [truth]
        suffix = pseudo_word(rng, int(rng.integers(1, 3)))
        lex.append(truth + suffix)
        for k, ch in enumerate(suffix):
            cands.append(CharCandidate(10 + (len(truth) + k) * step, 0.0, 48.0, 48.0, ch, float(rng.uniform(-0.5, 1.2))))
        while len(lex) < lexicon_size:
            w = pseudo_word(rng, len(truth) + int(rng.integers(-1, 2)))
            if w in lex:
                continue
            lex.append(w)
            x = rng.uniform(0, 20)
            for ch in w:
                x += rng.uniform(60, 110)
                cands.append(CharCandidate(float(x), float(rng.uniform(-10, 10)), 48.0, 48.0, ch,
                                           float(rng.normal(2.0, 0.6))))
        sample = TrainingSample(cands, truth, chain, lex)
        top = spot_word(sample.candidates, lex, Z, planted)[0]
        cfg = best_config(truth, sample.candidates, Z, planted)
        if top.word == truth and cfg is not None and cfg.chosen == chain:
            out.append(sample)
    return out


# -------------------------------------------------------------- writing

SHEET_COLS = 64


def write_sheet(path, crops: np.ndarray) -> None:
    """Tile crops row-major into one grayscale PNG, ``SHEET_COLS`` per row."""
    n = len(crops)
    rows = max(1, math.ceil(n / SHEET_COLS))
    sheet = np.zeros((rows * WINDOW, SHEET_COLS * WINDOW), dtype=np.uint8)
    for i, c in enumerate(crops):
        r, q = divmod(i, SHEET_COLS)
        sheet[r * WINDOW:(r + 1) * WINDOW, q * WINDOW:(q + 1) * WINDOW] = c
    Image.fromarray(sheet).save(path, optimize=False)


def read_sheet(path, n: int) -> np.ndarray:
    sheet = np.asarray(Image.open(path).convert("L"), dtype=np.uint8)
    out = np.empty((n, WINDOW, WINDOW), dtype=np.uint8)
    for i in range(n):
        r, q = divmod(i, SHEET_COLS)
        out[i] = sheet[r * WINDOW:(r + 1) * WINDOW, q * WINDOW:(q + 1) * WINDOW]
    return out


def write_char_split(out_dir, name: str, crops: np.ndarray, labels: np.ndarray) -> None:
    out_dir = Path(out_dir)
    write_sheet(out_dir / f"{name}.png", crops)
    (out_dir / f"{name}.labels").write_text("".join(LABELS[i] + "\n" for i in labels))


def read_char_split(data_dir, name: str) -> tuple[np.ndarray, np.ndarray]:
    data_dir = Path(data_dir)
    names = [l for l in (data_dir / f"{name}.labels").read_text().splitlines() if l]
    labels = np.array([LABELS.index(l) for l in names], dtype=np.int64)
    if not names:
        return np.zeros((0, WINDOW, WINDOW), dtype=np.uint8), labels
    return read_sheet(data_dir / f"{name}.png", len(names)), labels


def write_words(out_dir, split: str, words: list[WordImage]) -> Path:
    from .wordrec import write_lexicon

    out_dir = Path(out_dir)
    (out_dir / split).mkdir(parents=True, exist_ok=True)
    ann = out_dir / f"{split}.jsonl"
    with open(ann, "w") as fh:
        for i, w in enumerate(words):
            img = f"{split}/{i:04d}.png"
            lex = f"{split}/{i:04d}.lex.txt"
            Image.fromarray(w.image).save(out_dir / img, optimize=False)
            write_lexicon(out_dir / lex, w.lexicon)
            rec = {"image": img, "word": w.word, "boxes": [list(b) for b in w.boxes], "lexicon": lex,
                   "windows": [list(b) for b in truth_windows(w)],
                   "scale": w.scale, "anchor_y": w.anchor_y, "centers": w.centers}
            fh.write(json.dumps(rec) + "\n")
    return ann


def generate(cfg: SynthConfig, out_dir) -> dict:
    """Write the whole benchmark under ``out_dir``; returns item counts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split in ("train", "test"):
        crops, labels = char_dataset(cfg, split)
        write_char_split(out_dir, f"chars_{split}", crops, labels)
        words = word_dataset(cfg, split)
        write_words(out_dir, f"words_{split}", words)
        counts[f"chars_{split}"] = len(labels)
        counts[f"words_{split}"] = len(words)
    return counts
