"""Lexicon word spotting with a pictorial-structures chain objective.

For a word ``w_1..w_n`` and one candidate ``u_i`` per character the objective is

    O = sum_i S(w_i, u_i) + lambda1 * sum_i Z(u_i, u_{i+1}) + lambda2 * n

where ``S`` is the detection score and ``Z`` a linear geometric compatibility
model on pair features. The best chain per word is found by dynamic programming.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .classifiers import LinearConfig, train_binary
from .detector import CharCandidate

PAIR_DIM = 6
MAX_STEP_WIDTHS = 3.0  # successor may start at most this many predecessor widths to the right
MAX_PAIR_IOU = 0.5

OK, MISSING_LABEL, NO_CHAIN = "ok", "missing-label", "no-feasible-chain"


@dataclass(frozen=True)
class PSParams:
    lambda1: float = 1.0
    lambda2: float = -1.0

    def __post_init__(self):
        if not (math.isfinite(self.lambda1) and math.isfinite(self.lambda2)):
            raise ValueError("word-model coefficients must be finite")
        if self.lambda1 <= 0 or self.lambda2 >= 0:
            raise ValueError("need lambda1 > 0 and lambda2 < 0")


@dataclass(frozen=True, eq=False)
class GeometricModel:
    weights: np.ndarray = field(default_factory=lambda: np.zeros(PAIR_DIM))
    bias: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).copy()
        if w.shape != (PAIR_DIM,) or not np.all(np.isfinite(w)) or not math.isfinite(self.bias):
            raise ValueError("geometric model needs 6 finite weights and a finite bias")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))

    def decision(self, F) -> np.ndarray:
        # fixed left-to-right summation so scalar and batched calls agree bit for bit
        F = np.asarray(F, dtype=np.float64)
        s = np.full(F.shape[:-1], self.bias)
        for k in range(PAIR_DIM):
            s = s + self.weights[k] * F[..., k]
        return s

    def to_json(self) -> dict:
        return {"weights": self.weights.tolist(), "bias": self.bias}

    @classmethod
    def from_json(cls, obj) -> "GeometricModel":
        return cls(np.array(obj["weights"], dtype=np.float64), obj["bias"])


@dataclass(frozen=True)
class Configuration:
    word: str
    chosen: tuple[CharCandidate, ...]
    objective: float

    def __post_init__(self):
        if len(self.word) < 1 or len(self.chosen) != len(self.word):
            raise ValueError("configuration needs exactly one candidate per character")
        if any(c.label != ch for c, ch in zip(self.chosen, self.word)):
            raise ValueError("candidate labels must spell the word")


# ---------------------------------------------------------------- geometry

def _pair_features(xi, yi, wi, hi, xj, yj, wj, hj):
    iw = np.minimum(xi + wi, xj + wj) - np.maximum(xi, xj)
    ih = np.minimum(yi + hi, yj + hj) - np.maximum(yi, yj)
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    overlap = inter / (wi * hi + wj * hj - inter)
    return np.stack(np.broadcast_arrays(
        np.minimum(wi, wj) / np.maximum(wi, wj),
        np.minimum(hi, hj) / np.maximum(hi, hj),
        overlap,
        (xj - (xi + wi)) / wi,
        np.abs(yi - yj) / hi,
        np.abs((yi + hi) - (yj + hj)) / hi,
    ), axis=-1)


def pair_features(ui: CharCandidate, uj: CharCandidate) -> np.ndarray:
    """[width ratio, height ratio, IoU, horizontal gap / w_i, |top diff| / h_i, |bottom diff| / h_i]."""
    for u in (ui, uj):
        if not (u.w > 0 and u.h > 0):
            raise ValueError("zero-sized box")
    return _pair_features(*(np.float64(v) for v in (ui.x, ui.y, ui.w, ui.h, uj.x, uj.y, uj.w, uj.h)))


def geometric_score(Z: GeometricModel, ui: CharCandidate, uj: CharCandidate) -> float:
    return float(Z.decision(pair_features(ui, uj)))


def feasible_pair(ui: CharCandidate, uj: CharCandidate) -> bool:
    """Pruning: successor starts to the right, within three predecessor widths, overlapping at most 0.5."""
    if not (uj.x > ui.x and uj.x - ui.x <= MAX_STEP_WIDTHS * ui.w):
        return False
    return float(pair_features(ui, uj)[2]) <= MAX_PAIR_IOU


def word_objective(config: Configuration, Z: GeometricModel, params: PSParams) -> float:
    u = config.chosen
    s = sum(c.score for c in u)
    z = sum(geometric_score(Z, a, b) for a, b in zip(u, u[1:]))
    return s + params.lambda1 * z + params.lambda2 * len(u)


def train_geometric(positive_pairs, negative_pairs, config: LinearConfig | None = None) -> GeometricModel:
    """Linear SVM separating compatible (consecutive) from incompatible candidate pairs."""
    pairs = list(positive_pairs) + list(negative_pairs)
    F = np.stack([pair_features(a, b) for a, b in pairs])
    pos = np.arange(len(pairs)) < len(positive_pairs)
    w, b = train_binary(F, pos, config or LinearConfig(C=1e4, tol=1e-3, max_epochs=5000))
    return GeometricModel(w, b)


def pair_accuracy(Z: GeometricModel, positive_pairs, negative_pairs) -> float:
    hits = sum(geometric_score(Z, a, b) > 0 for a, b in positive_pairs)
    hits += sum(geometric_score(Z, a, b) <= 0 for a, b in negative_pairs)
    return hits / (len(positive_pairs) + len(negative_pairs))


def save_geometric(Z: GeometricModel, path, meta: dict | None = None) -> None:
    Path(path).write_text(json.dumps({**Z.to_json(), "meta": meta or {}}, indent=2, sort_keys=True) + "\n")


def load_geometric(path) -> GeometricModel:
    return GeometricModel.from_json(json.loads(Path(path).read_text()))


# ----------------------------------------------------------- candidate sets

class CandidateSet:
    """Candidates grouped by label with cached pairwise geometry for one image."""

    def __init__(self, candidates: Iterable[CharCandidate] | Mapping[str, Sequence[CharCandidate]]):
        if isinstance(candidates, Mapping):
            groups = {k: list(v) for k, v in candidates.items()}
        else:
            groups = {}
            for c in candidates:
                groups.setdefault(c.label, []).append(c)
        for label, cs in groups.items():
            if any(c.label != label for c in cs):
                raise ValueError(f"candidate list for {label!r} holds other labels")
        self.groups = groups
        self._arrays = {k: np.array([[c.x, c.y, c.w, c.h, c.score] for c in v], dtype=np.float64).reshape(-1, 5)
                        for k, v in groups.items()}
        self._pairs: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}

    def __getitem__(self, label: str) -> list[CharCandidate]:
        return self.groups.get(label, [])

    def scores(self, label: str) -> np.ndarray:
        return self._arrays[label][:, 4]

    def pair(self, a: str, b: str, Z: GeometricModel) -> tuple[np.ndarray, np.ndarray]:
        """(Z matrix, feasibility mask) for predecessors of label ``a`` and successors of label ``b``."""
        key = (a, b, id(Z))
        if key not in self._pairs:
            A = self._arrays[a][:, None, :]
            B = self._arrays[b][None, :, :]
            F = _pair_features(A[..., 0], A[..., 1], A[..., 2], A[..., 3], B[..., 0], B[..., 1], B[..., 2], B[..., 3])
            dx = B[..., 0] - A[..., 0]
            ok = (dx > 0) & (dx <= MAX_STEP_WIDTHS * A[..., 2]) & (F[..., 2] <= MAX_PAIR_IOU)
            self._pairs[key] = (Z.decision(F), ok)
        return self._pairs[key]


def _as_set(candidates) -> CandidateSet:
    return candidates if isinstance(candidates, CandidateSet) else CandidateSet(candidates)


# --------------------------------------------------------------------- DP

def search(word: str, candidates, Z: GeometricModel, params: PSParams, allowed=None) -> tuple[Configuration | None, str]:
    """Best configuration of ``word`` plus a status string.

    ``allowed`` optionally restricts position i to a boolean mask over the
    candidates of its label. Status is ``"ok"``, ``"missing-label"`` when some
    character has no candidates at all, or ``"no-feasible-chain"``.
    Among equal objectives the chain with the lexicographically smallest
    sequence of (x, y) positions wins.
    """
    if not word:
        raise ValueError("empty word")
    cs = _as_set(candidates)
    if any(not cs[ch] for ch in word):
        return None, MISSING_LABEL
    n = len(word)
    # backward pass: value[i][u] = best score of positions i..n-1 given u at i (lambda2 term excluded)
    value: list[np.ndarray] = [None] * n
    nxt: list[np.ndarray] = [None] * n
    key: list[list] = [None] * n
    for i in range(n - 1, -1, -1):
        S = cs.scores(word[i]).copy()
        mask = np.ones(S.size, dtype=bool) if allowed is None or allowed[i] is None else np.asarray(allowed[i])
        xy = [(c.x, c.y) for c in cs[word[i]]]
        if i == n - 1:
            value[i] = np.where(mask, S, -np.inf)
            nxt[i] = np.full(S.size, -1)
            key[i] = [(p,) for p in xy]
            continue
        Zm, ok = cs.pair(word[i], word[i + 1], Z)
        trans = np.where(ok, params.lambda1 * Zm + value[i + 1][None, :], -np.inf)
        best = trans.max(axis=1) if trans.shape[1] else np.full(S.size, -np.inf)
        nxt[i] = np.full(S.size, -1)
        key[i] = [None] * S.size
        for u in range(S.size):
            if not mask[u] or best[u] == -np.inf:
                continue
            ties = np.flatnonzero(trans[u] == best[u])
            v = min(ties, key=lambda t: key[i + 1][t])
            nxt[i][u] = v
            key[i][u] = (xy[u],) + key[i + 1][v]
        value[i] = np.where(mask & (nxt[i] >= 0), S + best, -np.inf)
    top = value[0].max()
    if top == -np.inf:
        return None, NO_CHAIN
    ties = np.flatnonzero(value[0] == top)
    u = min(ties, key=lambda t: key[0][t])
    chain = []
    for i in range(n):
        chain.append(cs[word[i]][u])
        u = nxt[i][u]
    config = Configuration(word, tuple(chain), 0.0)
    return Configuration(word, config.chosen, word_objective(config, Z, params)), OK


def best_config(word: str, candidates, Z: GeometricModel, params: PSParams) -> Configuration | None:
    return search(word, candidates, Z, params)[0]


def best_config_excluding(word: str, candidates, Z: GeometricModel, params: PSParams,
                          excluded: Sequence[CharCandidate]) -> Configuration | None:
    """Best configuration of ``word`` whose chain differs from ``excluded``.

    The feasible set minus one chain is split into disjoint parts: agree with
    the excluded chain before position i, differ at i, free afterwards.
    """
    cs = _as_set(candidates)
    if len(excluded) != len(word) or any(not cs[ch] for ch in word):
        return best_config(word, cs, Z, params)
    idx = []
    for ch, c in zip(word, excluded):
        hits = [k for k, d in enumerate(cs[ch]) if d == c]
        if not hits:
            return best_config(word, cs, Z, params)
        idx.append(hits[0])
    found = []
    for i in range(len(word)):
        allowed = []
        for p, ch in enumerate(word):
            size = len(cs[ch])
            if p < i:
                m = np.zeros(size, dtype=bool)
                m[idx[p]] = True
            elif p == i:
                m = np.ones(size, dtype=bool)
                m[idx[p]] = False
            else:
                m = None
            allowed.append(m)
        cfg, status = search(word, cs, Z, params, allowed)
        if cfg is not None:
            found.append(cfg)
    if not found:
        return None
    return max(found, key=lambda c: (c.objective, [(-u.x, -u.y) for u in c.chosen]))


# ---------------------------------------------------------------- spotting

class WordScore(NamedTuple):
    word: str
    objective: float
    config: Configuration | None = None


def rank_words(scored: Iterable[WordScore]) -> list[WordScore]:
    """Descending objective, ties broken lexicographically; infeasible words (-inf) last."""
    return sorted(scored, key=lambda s: (-s.objective, s.word))


def dedupe(lexicon: Iterable[str]) -> list[str]:
    return list(dict.fromkeys(lexicon))


def spot_word(candidates, lexicon: Sequence[str], Z: GeometricModel, params: PSParams, threads: int = 1) -> list[WordScore]:
    words = dedupe(lexicon)
    if not words:
        raise ValueError("empty lexicon")
    cs = _as_set(candidates)

    def one(word):
        cfg = best_config(word, cs, Z, params)
        return WordScore(word, cfg.objective if cfg else -math.inf, cfg)

    if threads > 1:
        # the pair cache is filled lazily; fill it serially first so workers only read
        for w in words:
            for a, b in zip(w, w[1:]):
                if cs[a] and cs[b]:
                    cs.pair(a, b, Z)
        with ThreadPoolExecutor(threads) as pool:
            scored = list(pool.map(one, words))
    else:
        scored = [one(w) for w in words]
    return rank_words(scored)


# --------------------------------------------------------------------- I/O

def read_lexicon(path) -> list[str]:
    words = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.append(line)
    return words


def write_lexicon(path, words: Iterable[str]) -> None:
    Path(path).write_text("".join(w + "\n" for w in words), encoding="utf-8")


def _finite_or_none(v):
    return v if v is not None and math.isfinite(v) else None


def report_record(image: str, ranking: list[WordScore]) -> dict:
    top = ranking[0]
    second = ranking[1] if len(ranking) > 1 else None
    margin = top.objective - second.objective if second is not None else math.inf
    return {
        "image": image, "top_word": top.word, "objective": _finite_or_none(top.objective),
        "runner_up": second.word if second else None,
        "margin": _finite_or_none(margin) if math.isfinite(top.objective) else None,
    }


def write_report(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_report(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
