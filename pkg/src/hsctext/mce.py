"""Minimum-classification-error training of the word-model coefficients.

With g the chain objective, the misclassification measure of a sample is
``d = g(rival) - g(truth)`` and the loss is ``l = 1 / (1 + exp(-xi * d))``.
Coefficients follow SGD on ``l`` with the rival configuration held fixed
inside each step, then get clamped back to lambda1 > 0, lambda2 < 0.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import CharCandidate
from .wordrec import (
    CandidateSet, Configuration, GeometricModel, PSParams, WordScore, best_config, best_config_excluding, dedupe,
    geometric_score, rank_words,
)

LAMBDA1_MIN = 1e-6
LAMBDA2_MAX = -1e-6


@dataclass
class TrainingSample:
    candidates: CandidateSet
    word: str
    truth: tuple[CharCandidate, ...]
    lexicon: list[str]
    name: str = ""

    def __post_init__(self):
        if not isinstance(self.candidates, CandidateSet):
            self.candidates = CandidateSet(self.candidates)
        self.truth = tuple(self.truth)
        if self.word not in self.lexicon:
            raise ValueError(f"truth word {self.word!r} missing from its lexicon")
        Configuration(self.word, self.truth, 0.0)  # validates labels and length


@dataclass
class MCEConfig:
    xi: float = 1.0
    eps0: float = 0.1
    tau: float | None = None  # None: dataset size
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.xi <= 0 or self.eps0 <= 0:
            raise ValueError("xi and eps0 must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass(frozen=True)
class Terms:
    """Objective decomposed as score_sum + lambda1 * z_sum + lambda2 * n."""
    score_sum: float
    z_sum: float
    n: int

    def value(self, params: PSParams) -> float:
        return self.score_sum + params.lambda1 * self.z_sum + params.lambda2 * self.n


def terms(chain: Sequence[CharCandidate], Z: GeometricModel) -> Terms:
    return Terms(sum(c.score for c in chain), sum(geometric_score(Z, a, b) for a, b in zip(chain, chain[1:])), len(chain))


@dataclass(frozen=True)
class Misclassification:
    d: float
    truth_objective: float
    rival_objective: float
    rival_word: str
    rival: Configuration
    truth_terms: Terms
    rival_terms: Terms


def sigmoid_loss(d: float, xi: float = 1.0) -> float:
    z = -xi * d
    if z >= 0:
        e = math.exp(-z)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(z))


def _word_bests(sample: TrainingSample, Z, params) -> dict[str, Configuration | None]:
    return {w: best_config(w, sample.candidates, Z, params) for w in dedupe(sample.lexicon)}


def rival_search(sample: TrainingSample, Z: GeometricModel, params: PSParams, bests=None) -> Configuration | None:
    """Highest-objective (word, chain) pair other than the ground truth, exhaustive over the lexicon."""
    bests = bests if bests is not None else _word_bests(sample, Z, params)
    options = []
    for w, cfg in bests.items():
        if w == sample.word and cfg is not None and cfg.chosen == sample.truth:
            cfg = best_config_excluding(w, sample.candidates, Z, params, sample.truth)
        if cfg is not None:
            options.append(cfg)
    if not options:
        return None
    # same ordering as word ranking: objective, then word, then leftmost chain
    return min(options, key=lambda c: (-c.objective, c.word, [(u.x, u.y) for u in c.chosen]))


def misclassification(sample: TrainingSample, Z: GeometricModel, params: PSParams, bests=None) -> Misclassification | None:
    rival = rival_search(sample, Z, params, bests)
    if rival is None:
        return None
    tt = terms(sample.truth, Z)
    rt = terms(rival.chosen, Z)
    gt, gr = tt.value(params), rt.value(params)
    return Misclassification(gr - gt, gt, gr, rival.word, rival, tt, rt)


def loss_gradient(m: Misclassification, params: PSParams, xi: float) -> np.ndarray:
    """d loss / d (lambda1, lambda2) with both configurations frozen."""
    l = sigmoid_loss(m.d, xi)
    grad_d = np.array([m.rival_terms.z_sum - m.truth_terms.z_sum, float(m.rival_terms.n - m.truth_terms.n)])
    return xi * l * (1.0 - l) * grad_d


def frozen_loss(m: Misclassification, params: PSParams, xi: float) -> float:
    return sigmoid_loss(m.rival_terms.value(params) - m.truth_terms.value(params), xi)


def clamp(l1: float, l2: float) -> PSParams:
    return PSParams(float(max(l1, LAMBDA1_MIN)), float(min(l2, LAMBDA2_MAX)))


def mce_step(sample: TrainingSample, params: PSParams, Z: GeometricModel, lr: float, xi: float = 1.0,
             m: Misclassification | None = None) -> PSParams:
    m = m if m is not None else misclassification(sample, Z, params)
    if m is None or lr == 0:
        return params
    g = loss_gradient(m, params, xi)
    return clamp(params.lambda1 - lr * g[0], params.lambda2 - lr * g[1])


def evaluate(sample: TrainingSample, Z: GeometricModel, params: PSParams, xi: float = 1.0):
    """(loss or None when no rival exists, whether the top-ranked lexicon word is the truth)."""
    bests = _word_bests(sample, Z, params)
    ranked = rank_words(WordScore(w, c.objective if c else -math.inf) for w, c in bests.items())
    m = misclassification(sample, Z, params, bests)
    return (None if m is None else sigmoid_loss(m.d, xi)), ranked[0].word == sample.word


@dataclass
class TraceRow:
    epoch: int
    mean_loss: float
    accuracy: float


@dataclass
class MCEResult:
    params: PSParams
    trace: list[TraceRow] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)


def evaluate_dataset(dataset, Z, params, xi=1.0) -> tuple[float, float, list[int]]:
    losses, correct, skipped = [], 0, []
    for i, s in enumerate(dataset):
        loss, ok = evaluate(s, Z, params, xi)
        correct += ok
        if loss is None:
            skipped.append(i)
        else:
            losses.append(loss)
    if not losses:
        raise ValueError("every sample lacks a feasible rival; nothing to train on")
    return float(np.mean(losses)), correct / len(dataset), skipped


def mce_train(dataset: Sequence[TrainingSample], Z: GeometricModel, init: PSParams, config: MCEConfig | None = None,
              log=None) -> MCEResult:
    """SGD over shuffled epochs; trace row 0 is the initial state, row e follows epoch e."""
    config = config or MCEConfig()
    if not dataset:
        raise ValueError("empty training set")
    tau = config.tau if config.tau is not None else float(len(dataset))
    rng = np.random.default_rng(config.seed)
    params = init
    loss, acc, skipped = evaluate_dataset(dataset, Z, params, config.xi)
    result = MCEResult(params, [TraceRow(0, loss, acc)], skipped)
    t = 0
    for epoch in range(1, config.epochs + 1):
        for i in rng.permutation(len(dataset)):
            m = misclassification(dataset[i], Z, params)
            if m is None:
                continue
            params = mce_step(dataset[i], params, Z, config.eps0 / (1.0 + t / tau), config.xi, m)
            t += 1
        loss, acc, _ = evaluate_dataset(dataset, Z, params, config.xi)
        result.trace.append(TraceRow(epoch, loss, acc))
        if log:
            log(f"epoch {epoch}: loss {loss:.6f} acc {acc:.4f} lambda1 {params.lambda1:.6f} lambda2 {params.lambda2:.6f}")
    result.params = params
    return result


# --------------------------------------------------------------------- I/O

def save_params(path, params: PSParams, Z: GeometricModel | None = None, meta: dict | None = None) -> None:
    obj = {"lambda1": params.lambda1, "lambda2": params.lambda2,
           "geometric": Z.to_json() if Z is not None else None, "meta": meta or {}}
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_params(path) -> tuple[PSParams, GeometricModel | None]:
    obj = json.loads(Path(path).read_text())
    Z = GeometricModel.from_json(obj["geometric"]) if obj.get("geometric") else None
    return PSParams(obj["lambda1"], obj["lambda2"]), Z


def write_trace(path, trace: Sequence[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "accuracy"])
        for r in trace:
            w.writerow([r.epoch, repr(r.mean_loss), repr(r.accuracy)])


def read_trace(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        return [TraceRow(int(r["epoch"]), float(r["mean_loss"]), float(r["accuracy"])) for r in csv.DictReader(fh)]


def config_dict(config: MCEConfig) -> dict:
    return asdict(config)
