"""Command-line entry point: ``hsctext <command> [options]``.

Exit status is 0 on success, 1 for usage errors (bad flags, missing input
paths, bad settings) and 2 for data errors (unreadable or inconsistent files,
training failures).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .classifiers import BACKGROUND, accuracy, load_model, save_model
from .detector import write_candidates
from .mce import load_params, mce_train, save_params, write_trace
from .pipeline import (
    EvalReport, Timer, annotation_lexicon, annotation_windows, detect, extract_features, learn_dictionary, load_gray,
    make_extractor, mce_samples, read_annotations, recognize, train_classifier,
)
from .sparse import load_dictionary, save_dictionary
from .synth import generate, geometric_pairs, read_char_split
from .wordrec import (
    CandidateSet, PSParams, load_geometric, pair_accuracy, read_lexicon, report_record, save_geometric, spot_word,
    train_geometric, write_report,
)

log = logging.getLogger("hsctext")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".pgm", ".tif", ".tiff"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _need(path, kind="file") -> Path:
    p = Path(path)
    ok = p.is_dir() if kind == "dir" else p.is_file()
    if not ok:
        raise UsageError(f"{kind} not found: {p}")
    return p


def _settings(args, extra=()) -> cfgmod.Settings:
    pairs = list(args.set or [])
    pairs += [f"{k}={v}" for k, v in extra if v is not None]
    return cfgmod.load(args.config or [], pairs)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_extractor(feature: str, dict_path, T0: int):
    if feature == "hsc":
        if dict_path is None:
            raise UsageError("HSC features need --dict")
        return make_extractor("hsc", load_dictionary(_need(dict_path)), T0)
    return make_extractor(feature)


def _load_word_models(args, settings):
    model = load_model(_need(args.model))
    extractor = _load_extractor(model.feature, args.dict, settings.dictionary.T0)
    params, Z = load_params(_need(args.params))
    if getattr(args, "geom", None):
        Z = load_geometric(_need(args.geom))
    if Z is None:
        raise UsageError("no geometric model: the params file has none and --geom was not given")
    return model, extractor, Z, params


# ---------------------------------------------------------------- commands

def cmd_learn_dict(args) -> int:
    corpus_dir = _need(args.corpus, "dir")
    s = _settings(args, [("dictionary.patch_side", args.patch_side), ("dictionary.k", args.k),
                         ("dictionary.T0", args.T0), ("dictionary.iters", args.iters),
                         ("dictionary.seed", args.seed)])
    files = sorted(p for p in corpus_dir.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no images under {corpus_dir}")
    D, history = learn_dictionary([load_gray(p) for p in files], s.dictionary)
    save_dictionary(D, args.out)
    _write_json(str(args.out) + ".json", {"config": vars(s.dictionary), "images": len(files), "mse_history": history})
    print(f"dictionary {D.m}x{D.k} written to {args.out}; final mse {history[-1]:.6g}")
    return 0


def cmd_synth(args) -> int:
    extra = [("synth.seed", args.seed), ("synth.noise", args.noise), ("synth.clutter", args.clutter),
             ("synth.classes", args.classes), ("synth.fonts", args.fonts)]
    if args.samples is not None:
        extra += [("synth.train_per_class", args.samples), ("synth.test_per_class", args.samples)]
    if args.words is not None:
        extra += [("synth.train_words", args.words), ("synth.test_words", args.words)]
    s = _settings(args, extra)
    counts = generate(s.synth, args.out)
    (Path(args.out) / "synth.cfg").write_text(cfgmod.dump(s))
    print(json.dumps(counts, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    data = _need(args.data, "dir")
    s = _settings(args)
    timer = Timer()
    extractor = _load_extractor(args.features, args.dict, s.dictionary.T0)
    X, y = read_char_split(data, args.split)
    with timer.stage("features", len(y)):
        F = extract_features(extractor, X, args.threads)
    kind = args.classifier
    with timer.stage("training", len(y)):
        model = train_classifier(kind, F, y, args.features, s.svm, s.sc, s.ferns)
    cfg = {"svm": s.svm, "sc": s.sc, "ferns": s.ferns}[kind]
    save_model(model, args.out, cfg)
    report = {"features": args.features, "classifier": kind, "train_count": int(len(y)),
              "train_accuracy": accuracy(model, F, y)}
    if args.test_split and (data / f"{args.test_split}.labels").is_file():
        Xt, yt = read_char_split(data, args.test_split)
        with timer.stage("test_features", len(yt)):
            Ft = extract_features(extractor, Xt, args.threads)
        chars = yt < BACKGROUND
        report.update(test_count=int(len(yt)), test_accuracy=accuracy(model, Ft, yt),
                      char_accuracy=accuracy(model, Ft[chars], yt[chars]))
    if args.report:
        _write_json(args.report, report)
        _write_json(str(args.report) + ".timings.json", timer.table())
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_train_geom(args) -> int:
    s = _settings(args)
    windows = []
    for a in read_annotations(_need(args.annotations)):
        w = a.windows
        if w is None:
            w = annotation_windows(a, load_gray(a.image).shape)
        if w is None:
            raise ValueError(f"{a.image}: geometric training needs character boxes or windows")
        windows.append(w)
    pos, neg = geometric_pairs(windows, s.word.pairs_seed)
    if not pos or not neg:
        raise ValueError("too few characters to build geometric training pairs")
    Z = train_geometric(pos, neg, s.geometric)
    acc = pair_accuracy(Z, pos, neg)
    save_geometric(Z, args.out, {"positive": len(pos), "negative": len(neg), "pair_accuracy": acc})
    print(f"geometric model written to {args.out}; pair accuracy {acc:.4f} on {len(pos)}+{len(neg)} pairs")
    return 0


def cmd_mce_train(args) -> int:
    s = _settings(args)
    model = load_model(_need(args.model))
    extractor = _load_extractor(model.feature, args.dict, s.dictionary.T0)
    Z = load_geometric(_need(args.geom))
    anns = read_annotations(_need(args.annotations))
    samples, unmatched = mce_samples(anns, model, extractor, s.detect, args.threads, s.word.min_iou)
    for name in unmatched:
        log.info("no matched ground-truth chain, skipped: %s", name)
    if not samples:
        raise ValueError("no annotation could be matched to detected candidates")
    init = PSParams(s.word.lambda1, s.word.lambda2)
    result = mce_train(samples, Z, init, s.mce, log=log.info)
    meta = {"samples": len(samples), "unmatched": len(unmatched), "no_rival": len(result.skipped),
            "init": [init.lambda1, init.lambda2], "mce": vars(s.mce)}
    save_params(args.out, result.params, Z, meta)
    if args.trace:
        write_trace(args.trace, result.trace)
    first, last = result.trace[0], result.trace[-1]
    print(f"lambda1 {result.params.lambda1:.6g} lambda2 {result.params.lambda2:.6g}; "
          f"loss {first.mean_loss:.6g} -> {last.mean_loss:.6g}; {len(samples)} samples, {len(unmatched)} unmatched")
    return 0


def cmd_recognize(args) -> int:
    s = _settings(args)
    model, extractor, Z, params = _load_word_models(args, s)
    image = load_gray(_need(args.image))
    lexicon = read_lexicon(_need(args.lexicon))
    if not lexicon:
        raise ValueError(f"empty lexicon {args.lexicon}")
    ranking, cands = recognize(image, lexicon, model, extractor, Z, params, s.detect, args.threads)
    if args.dump_candidates:
        write_candidates(args.dump_candidates, cands)
    print(json.dumps(report_record(str(args.image), ranking)))
    return 0


def cmd_eval(args) -> int:
    s = _settings(args)
    model, extractor, Z, params = _load_word_models(args, s)
    anns = read_annotations(_need(args.annotations))
    fallback = read_lexicon(_need(args.lexicon)) if args.lexicon else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report, timer, lines = EvalReport(), Timer(), []
    root = Path(args.annotations).parent
    for a in anns:
        name = str(Path(a.image).relative_to(root)) if Path(a.image).is_relative_to(root) else a.image
        lexicon = annotation_lexicon(a, fallback)
        ranking, _ = recognize(load_gray(a.image), lexicon, model, extractor, Z, params, s.detect,
                               args.threads, timer)
        rec = report_record(name, ranking)
        lines.append(rec)
        report.add(name, a.word, rec["top_word"], rec["objective"], rec["margin"])
    report.timings = timer.table()
    _write_json(out / "report.json", report.summary())
    report.write_csv(out / "per_image.csv")
    write_report(out / "recognition.jsonl", lines)
    _write_json(out / "timings.json", report.timings)
    print(json.dumps(report.summary(), sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    s = _settings(args)
    stages = ["features", "classify", "detect", "dp"] if args.stage == "all" else [args.stage]
    timer = Timer()
    model = load_model(_need(args.model))
    extractor = _load_extractor(model.feature, args.dict, s.dictionary.T0)
    if "features" in stages or "classify" in stages:
        X, _ = read_char_split(_need(args.data, "dir"), args.split)
        X = X[:args.limit]
        with timer.stage("features", len(X)):
            F = extract_features(extractor, X, args.threads)
        if "classify" in stages:
            with timer.stage("classify", len(X)):
                model.raw_scores(F)
    if "detect" in stages or "dp" in stages:
        if args.params is None:
            raise UsageError("detection and DP stages need --params")
        params, Z = load_params(_need(args.params))
        anns = read_annotations(_need(args.annotations))[:args.limit]
        for a in anns:
            img = load_gray(a.image)
            with timer.stage("detect"):
                cands = detect(img, model, extractor, s.detect, args.threads)
            if "dp" in stages:
                lexicon = annotation_lexicon(a, [a.word])
                with timer.stage("dp"):
                    spot_word(CandidateSet(cands), lexicon, Z, params, args.threads)
    table = timer.table()
    print(f"{'stage':<10} {'items':>7} {'total_s':>10} {'mean_ms':>10}")
    for name in stages:
        if name in table:
            t = table[name]
            print(f"{name:<10} {t['items']:>7d} {t['seconds']:>10.3f} {1000 * t['per_item']:>10.3f}")
    if args.out:
        _write_json(args.out, table)
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", action="append", metavar="FILE", help="key = value settings file (repeatable)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting, e.g. svm.C=100")
    common.add_argument("--threads", type=int, default=1, help="worker threads for windows and lexicon words")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = Parser(prog="hsctext", description="Sparse-code character features and lexicon-driven word recognition.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    q = sub.add_parser("learn-dict", parents=[common], help="learn a patch dictionary with K-SVD")
    q.add_argument("--corpus", required=True, help="directory of training images (searched recursively)")
    q.add_argument("--out", required=True, help="dictionary file to write")
    q.add_argument("--patch-side", type=int)
    q.add_argument("-k", type=int, help="number of atoms")
    q.add_argument("--T0", type=int, help="sparsity per patch")
    q.add_argument("--iters", type=int)
    q.add_argument("--seed", type=int)
    q.set_defaults(func=cmd_learn_dict)

    q = sub.add_parser("synth", parents=[common], help="render the synthetic benchmark")
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--seed", type=int)
    q.add_argument("--samples", type=int, help="character crops per class in each split")
    q.add_argument("--words", type=int, help="word images in each split")
    q.add_argument("--noise", type=float, help="Gaussian noise sigma as a fraction of the gray range")
    q.add_argument("--clutter", type=float, help="probability of background strokes per image")
    q.add_argument("--classes", help="restrict character crops to these characters")
    q.add_argument("--fonts", help="comma-separated font files")
    q.set_defaults(func=cmd_synth)

    q = sub.add_parser("train", parents=[common], help="train a character classifier")
    q.add_argument("--features", choices=["hsc", "hog"], required=True)
    q.add_argument("--classifier", choices=["svm", "sc", "ferns"], default="svm")
    q.add_argument("--data", required=True, help="directory holding <split>.png and <split>.labels")
    q.add_argument("--split", default="chars_train")
    q.add_argument("--test-split", default="chars_test", help="held-out split, used when present")
    q.add_argument("--dict", help="dictionary file (HSC only)")
    q.add_argument("--out", required=True, help="model file to write")
    q.add_argument("--report", help="JSON accuracy report to write")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("train-geom", parents=[common], help="train the pairwise geometric model")
    q.add_argument("--annotations", required=True, help="word annotation JSON-lines with boxes or windows")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_train_geom)

    q = sub.add_parser("mce-train", parents=[common], help="learn the word-model coefficients")
    q.add_argument("--annotations", required=True)
    q.add_argument("--model", required=True)
    q.add_argument("--dict")
    q.add_argument("--geom", required=True)
    q.add_argument("--out", required=True, help="params JSON to write")
    q.add_argument("--trace", help="per-epoch loss CSV to write")
    q.set_defaults(func=cmd_mce_train)

    q = sub.add_parser("recognize", parents=[common], help="recognize one cropped word image")
    q.add_argument("--image", required=True)
    q.add_argument("--lexicon", required=True)
    q.add_argument("--model", required=True)
    q.add_argument("--dict")
    q.add_argument("--params", required=True)
    q.add_argument("--geom", help="geometric model overriding the one in the params file")
    q.add_argument("--dump-candidates", help="JSON-lines file for the detected candidates")
    q.set_defaults(func=cmd_recognize)

    q = sub.add_parser("eval", parents=[common], help="word accuracy over an annotation file")
    q.add_argument("--annotations", required=True)
    q.add_argument("--model", required=True)
    q.add_argument("--dict")
    q.add_argument("--params", required=True)
    q.add_argument("--geom")
    q.add_argument("--lexicon", help="lexicon for records without their own")
    q.add_argument("--out", required=True, help="directory for report.json, per_image.csv, recognition.jsonl")
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("bench", parents=[common], help="mean wall time per item for each stage")
    q.add_argument("--stage", choices=["features", "classify", "detect", "dp", "all"], default="all")
    q.add_argument("--model", required=True)
    q.add_argument("--dict")
    q.add_argument("--params")
    q.add_argument("--data", help="character split directory (features, classify)")
    q.add_argument("--split", default="chars_test")
    q.add_argument("--annotations", help="word annotations (detect, dp)")
    q.add_argument("--limit", type=int, default=None, help="items per stage")
    q.add_argument("--out", help="JSON timing table to write")
    q.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as e:
        print(f"hsctext: error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as e:
        print(f"hsctext: data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
