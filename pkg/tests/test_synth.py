import hashlib
import json

import numpy as np
import pytest
from PIL import Image, ImageDraw

from hsctext.classifiers import BACKGROUND, LABELS
from hsctext.detector import iou
from hsctext.synth import (
    PLANTED_Z, SynthConfig, char_dataset, default_fonts, font_size_for_cap_height, generate, geometric_pairs, load_font,
    make_lexicon, planted_mce_set, read_char_split, read_sheet, render_line, truth_windows, word_dataset,
    write_char_split, write_sheet,
)
from hsctext.wordrec import PSParams, read_lexicon, spot_word

SMALL = SynthConfig(train_per_class=1, test_per_class=1, background_ratio=2, train_words=3, test_words=3)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_fonts_available():
    fonts = default_fonts()
    assert len(fonts) >= 8
    for f in fonts:
        size = font_size_for_cap_height(f, 26.0)
        _, top, _, bottom = load_font(f, size).getbbox("H", anchor="ls")
        assert abs((bottom - top) - 26) <= 1


def test_generate_is_bit_identical(tmp_path):
    generate(SMALL, tmp_path / "a")
    generate(SMALL, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_seed_changes_output():
    a, _ = char_dataset(SMALL, "train")
    b, _ = char_dataset(SynthConfig(**{**SMALL.__dict__, "seed": 1}), "train")
    assert a.shape == b.shape and not np.array_equal(a, b)


def test_zero_samples_empty_corpus(tmp_path):
    cfg = SynthConfig(train_per_class=0, test_per_class=0, train_words=0, test_words=0)
    counts = generate(cfg, tmp_path)
    assert all(v == 0 for v in counts.values())
    assert (tmp_path / "words_test.jsonl").read_text() == ""
    X, y = read_char_split(tmp_path, "chars_train")
    assert X.shape == (0, 48, 48) and len(y) == 0


def test_clean_render_matches_font_rasterization():
    font_path = default_fonts()[0]
    line = render_line("Ab", font_path, 26.0, fg=20, bg=230, gaps=[4.0, 4.0], min_spacing=0.0,
                       margin_x=10.0, height=56, anchor_y=28.0)
    # same glyph drawn directly with PIL
    font = load_font(font_path, font_size_for_cap_height(font_path, 26.0))
    ref = Image.new("L", line.image.shape[::-1], 230)
    d = ImageDraw.Draw(ref)
    baseline = round(28.0 + 13.0)
    d.text((10, baseline), "A", font=font, fill=20, anchor="ls")
    d.text((round(10 + font.getlength("A") + 4.0), baseline), "b", font=font, fill=20, anchor="ls")
    assert np.array_equal(line.image, np.asarray(ref))


def test_char_dataset_layout():
    X, y = char_dataset(SMALL, "test")
    assert X.dtype == np.uint8 and X.shape[1:] == (48, 48)
    assert list(y[:BACKGROUND]) == list(range(BACKGROUND))
    assert (y[BACKGROUND:] == BACKGROUND).all() and len(y) == BACKGROUND + 2


def test_class_subset():
    X, y = char_dataset(SynthConfig(train_per_class=2, background_ratio=0, classes="a0"), "train")
    assert sorted(set(LABELS[i] for i in y)) == ["0", "a"] and len(y) == 4
    with pytest.raises(ValueError):
        char_dataset(SynthConfig(classes="!"), "train")


def test_noise_changes_pixels():
    a, _ = char_dataset(SMALL, "train")
    b, _ = char_dataset(SynthConfig(**{**SMALL.__dict__, "noise": 0.1}), "train")
    assert not np.array_equal(a, b)


def test_sheet_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    crops = rng.integers(0, 256, (70, 48, 48), dtype=np.uint8)
    write_sheet(tmp_path / "s.png", crops)
    assert np.array_equal(read_sheet(tmp_path / "s.png", 70), crops)
    labels = rng.integers(0, 63, 70)
    write_char_split(tmp_path, "x", crops, labels)
    X, y = read_char_split(tmp_path, "x")
    assert np.array_equal(X, crops) and np.array_equal(y, labels)
    first = (tmp_path / "x.png").read_bytes()
    write_char_split(tmp_path, "x", X, y)
    assert (tmp_path / "x.png").read_bytes() == first


def test_lexicon_properties():
    rng = np.random.default_rng(0)
    lex = make_lexicon("Tamovu", 50, rng)
    assert len(lex) == 50 and "Tamovu" in lex
    assert len({w.lower() for w in lex}) == 50
    assert all(w[0].isupper() and w[1:].islower() for w in lex)


def test_word_annotations(tmp_path):
    generate(SMALL, tmp_path)
    recs = [json.loads(l) for l in (tmp_path / "words_train.jsonl").read_text().splitlines()]
    assert len(recs) == 3
    for r in recs:
        img = np.asarray(Image.open(tmp_path / r["image"]))
        assert len(r["boxes"]) == len(r["word"]) == len(r["windows"])
        assert r["word"] in read_lexicon(tmp_path / r["lexicon"])
        H, W = img.shape
        for x, y, w, h in r["boxes"]:
            assert 0 <= x and x + w <= W and 0 <= y and y + h <= H


def test_truth_windows_cover_glyphs():
    for w in word_dataset(SynthConfig(test_words=10), "test"):
        H, W = w.image.shape
        for (x, y, s, _), (bx, by, bw, bh) in zip(truth_windows(w), w.boxes):
            assert 0 <= x and x + s <= W + 1e-9
            # the glyph center lies inside the window's central half
            assert abs(bx + bw / 2 - (x + s / 2)) <= s / 4


def test_geometric_pairs_shapes():
    words = word_dataset(SynthConfig(train_words=5), "train")
    pos, neg = geometric_pairs(words)
    assert len(pos) == len(neg) == sum(len(w.word) - 1 for w in words)
    windows = [truth_windows(w) for w in words]
    pos2, _ = geometric_pairs(windows)
    assert pos2 == pos
    for a, b in pos:
        assert b.x > a.x and iou(a.box, b.box) <= 0.5


def test_planted_set_classified_by_planted_params():
    data = planted_mce_set(10, seed=0)
    for s in data:
        assert spot_word(s.candidates, s.lexicon, PLANTED_Z, PSParams(2.0, -5.0))[0].word == s.word
