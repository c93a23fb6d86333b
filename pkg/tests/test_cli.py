import csv
import json

import pytest

from hsctext.cli import main
from hsctext.pipeline import recount_csv


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Tiny synthetic corpus pushed through every training command."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    small = ["--set", "dictionary.k=24", "--set", "dictionary.iters=3", "--set", "svm.max_epochs=50"]
    steps = [
        ["synth", "--out", str(data), "--samples", "8", "--words", "6"],
        ["learn-dict", "--corpus", str(data / "words_train"), "--out", str(root / "dict.bin")] + small,
        ["train", "--features", "hsc", "--data", str(data), "--dict", str(root / "dict.bin"),
         "--out", str(root / "model.bin"), "--report", str(root / "chars.json")] + small,
        ["train-geom", "--annotations", str(data / "words_train.jsonl"), "--out", str(root / "geom.json")],
        ["mce-train", "--annotations", str(data / "words_train.jsonl"), "--model", str(root / "model.bin"),
         "--dict", str(root / "dict.bin"), "--geom", str(root / "geom.json"), "--out", str(root / "params.json"),
         "--trace", str(root / "trace.csv"), "--set", "mce.epochs=2", "--set", "word.min_iou=0.2"] + small,
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    return root


def test_training_outputs(run):
    chars = json.loads((run / "chars.json").read_text())
    assert chars["features"] == "hsc" and 0 <= chars["char_accuracy"] <= 1
    assert (run / "model.bin.json").exists() and (run / "dict.bin.json").exists()
    params = json.loads((run / "params.json").read_text())
    assert params["lambda1"] > 0 > params["lambda2"] and params["geometric"]
    rows = list(csv.DictReader(open(run / "trace.csv")))
    assert [r["epoch"] for r in rows] == ["0", "1", "2"]


def test_recognize_prints_json_line(run, capsys):
    data = run / "data"
    argv = ["recognize", "--image", str(data / "words_test/0000.png"), "--lexicon", str(data / "words_test/0000.lex.txt"),
            "--model", str(run / "model.bin"), "--dict", str(run / "dict.bin"), "--params", str(run / "params.json"),
            "--dump-candidates", str(run / "cands.jsonl")]
    assert main(argv) == 0
    rec = json.loads(capsys.readouterr().out.strip())
    assert set(rec) == {"image", "top_word", "objective", "runner_up", "margin"}
    assert (run / "cands.jsonl").exists()


def test_eval_recount_and_determinism(run, capsys):
    argv = ["eval", "--annotations", str(run / "data/words_test.jsonl"), "--model", str(run / "model.bin"),
            "--dict", str(run / "dict.bin"), "--params", str(run / "params.json")]
    assert main(argv + ["--out", str(run / "eval1")]) == 0
    assert main(argv + ["--out", str(run / "eval2"), "--threads", "2"]) == 0
    report = json.loads((run / "eval1/report.json").read_text())
    correct, total, acc = recount_csv(run / "eval1/per_image.csv")
    assert (correct, total, acc) == (report["correct"], report["total"], report["accuracy"])
    assert total == 6
    for name in ("report.json", "per_image.csv", "recognition.jsonl"):
        assert (run / "eval1" / name).read_bytes() == (run / "eval2" / name).read_bytes()


def test_bench_table(run, capsys):
    argv = ["bench", "--model", str(run / "model.bin"), "--dict", str(run / "dict.bin"), "--params",
            str(run / "params.json"), "--data", str(run / "data"), "--annotations", str(run / "data/words_test.jsonl"),
            "--limit", "2", "--out", str(run / "bench.json")]
    assert main(argv) == 0
    out = capsys.readouterr().out
    for stage in ("features", "classify", "detect", "dp"):
        assert stage in out
    assert set(json.loads((run / "bench.json").read_text())) == {"features", "classify", "detect", "dp"}


def test_synth_empty(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--samples", "0", "--words", "0"]) == 0
    assert (tmp_path / "words_train.jsonl").read_text() == ""
    assert json.loads(capsys.readouterr().out) == {"chars_test": 0, "chars_train": 0, "words_test": 0, "words_train": 0}


def test_synth_seed_bit_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / d), "--samples", "1", "--words", "2", "--seed", "3"]) == 0
    for p in sorted((tmp_path / "a").rglob("*")):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


def test_learn_dict_small_patch(tmp_path, run):
    out = tmp_path / "d.bin"
    assert main(["learn-dict", "--corpus", str(run / "data/words_train"), "--out", str(out), "--patch-side", "3",
                 "-k", "8", "--iters", "2"]) == 0
    from hsctext.sparse import load_dictionary
    assert load_dictionary(out).m == 9


@pytest.mark.parametrize("argv", [
    [],
    ["nosuch"],
    ["train", "--features", "sift", "--data", ".", "--out", "x"],
    ["synth", "--out", "x", "--samples", "many"],
    ["learn-dict", "--corpus", "/nonexistent/dir", "--out", "x"],
    ["synth", "--out", "x", "--set", "synth.bogus=1"],
    ["synth", "--out", "x", "--threads", "0"],
])
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as e:
        raise SystemExit(main(argv))
    assert e.value.code == 1


def test_data_errors_exit_2(tmp_path, run, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert main(["train-geom", "--annotations", str(bad), "--out", str(tmp_path / "g.json")]) == 2
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["learn-dict", "--corpus", str(empty), "--out", str(tmp_path / "d.bin")]) == 2
    junk = tmp_path / "model.bin"
    junk.write_bytes(b"garbage!" * 4)
    assert main(["recognize", "--image", str(run / "data/words_test/0000.png"), "--lexicon",
                 str(run / "data/words_test/0000.lex.txt"), "--model", str(junk), "--params",
                 str(run / "params.json")]) == 2
