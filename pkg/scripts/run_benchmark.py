"""End-to-end synthetic benchmark through the command-line interface.

Renders the data, learns the dictionary, then trains and evaluates the HSC and
HOG pipelines with the same linear classifier. Writes ``summary.json`` (no
timings, so reruns can be compared byte for byte) and ``timings.json``.

    python3 scripts/run_benchmark.py --out runs/bench [--set synth.test_words=50]
"""

import argparse
import json
import sys
import time
from pathlib import Path

from hsctext.cli import main as cli

ROOT = Path(__file__).resolve().parent.parent
FEATURES = ("hsc", "hog")


def step(timings, name, argv):
    t = time.perf_counter()
    code = cli(argv)
    timings[name] = time.perf_counter() - t
    if code != 0:
        raise SystemExit(f"step {name} failed with exit code {code}")


def run(out: Path, config: Path, overrides=(), threads: int = 1) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    common = ["--config", str(config), "--threads", str(threads)]
    for o in overrides:
        common += ["--set", o]
    data, timings = out / "data", {}
    step(timings, "synth", ["synth", "--out", str(data)] + common)
    step(timings, "learn-dict", ["learn-dict", "--corpus", str(data / "words_train"), "--out", str(out / "dict.bin")] + common)
    step(timings, "train-geom", ["train-geom", "--annotations", str(data / "words_train.jsonl"),
                                 "--out", str(out / "geom.json")] + common)
    summary = {}
    for f in FEATURES:
        d = out / f
        d.mkdir(exist_ok=True)
        model = ["--model", str(d / "model.bin"), "--dict", str(out / "dict.bin")]
        step(timings, f"{f}/train", ["train", "--features", f, "--data", str(data), "--dict", str(out / "dict.bin"),
                                     "--out", str(d / "model.bin"), "--report", str(d / "chars.json")] + common)
        step(timings, f"{f}/mce-train", ["mce-train", "--annotations", str(data / "words_train.jsonl"), *model,
                                         "--geom", str(out / "geom.json"), "--out", str(d / "params.json"),
                                         "--trace", str(d / "trace.csv")] + common)
        step(timings, f"{f}/eval", ["eval", "--annotations", str(data / "words_test.jsonl"), *model,
                                    "--params", str(d / "params.json"), "--out", str(d / "eval")] + common)
        chars = json.loads((d / "chars.json").read_text())
        words = json.loads((d / "eval" / "report.json").read_text())
        summary[f] = {"char_accuracy": chars["char_accuracy"], "test_accuracy": chars["test_accuracy"],
                      "word_accuracy": words["accuracy"], "words": words["total"]}
    timings["total"] = sum(timings.values())
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return summary


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, default=ROOT / "configs" / "benchmark.cfg")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--threads", type=int, default=1)
    return p.parse_args(argv)


if __name__ == "__main__":
    a = parse_args()
    s = run(a.out, a.config, a.set, a.threads)
    for f, r in s.items():
        print(f"{f}: char {r['char_accuracy']:.4f}  word {r['word_accuracy']:.4f} ({r['words']} words)")
    sys.exit(0)
