"""63-way character classifiers and the log-likelihood-ratio detection score.

Every model exposes raw per-class scores; posteriors are a temperature-1
softmax over them, and the detection score of label ``w`` is
``log p(w|u) - log p(bg|u)`` with posteriors floored at 1e-12.
"""

from __future__ import annotations

import hashlib
import json
import string
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
from scipy.special import logsumexp

from .sparse import Dictionary, ksvd_fit, omp_rows

LABELS: tuple[str, ...] = tuple(string.digits + string.ascii_uppercase + string.ascii_lowercase) + ("BACKGROUND",)
BACKGROUND = len(LABELS) - 1
N_CLASSES = len(LABELS)
CHAR_INDEX = {ch: i for i, ch in enumerate(LABELS[:-1])}
POSTERIOR_FLOOR = 1e-12


def label_index(label: str) -> int:
    if label == "BACKGROUND":
        return BACKGROUND
    try:
        return CHAR_INDEX[label]
    except KeyError:
        raise ValueError(f"unknown character label {label!r}") from None


# ------------------------------------------------------------------ models

@dataclass(frozen=True, eq=False)
class LinearModel:
    weights: np.ndarray  # (63, d)
    bias: np.ndarray  # (63,)
    feature: str = ""

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def raw_scores(self, F: np.ndarray) -> np.ndarray:
        return F @ self.weights.T + self.bias


@dataclass(frozen=True, eq=False)
class SCModel:
    dictionaries: tuple[Dictionary, ...]
    T0: int = 2
    feature: str = ""

    @property
    def feature_dim(self) -> int:
        return self.dictionaries[0].m

    @property
    def basis_count(self) -> int:
        return self.dictionaries[0].k

    def raw_scores(self, F: np.ndarray) -> np.ndarray:
        out = np.empty((F.shape[0], len(self.dictionaries)))
        for c, D in enumerate(self.dictionaries):
            codes = omp_rows(F, D, min(self.T0, D.k))
            R = F - codes @ D.atoms.T
            out[:, c] = -np.einsum("ij,ij->i", R, R)
        return out


@dataclass(frozen=True, eq=False)
class FernsModel:
    indices: np.ndarray  # (ferns, depth) feature indices
    thresholds: np.ndarray  # (ferns, depth)
    log_probs: np.ndarray  # (ferns, 2**depth, 63) log p(leaf | class)
    feature_dim: int
    feature: str = ""

    @property
    def n_ferns(self) -> int:
        return self.indices.shape[0]

    @property
    def depth(self) -> int:
        return self.indices.shape[1]

    def leaves(self, F: np.ndarray) -> np.ndarray:
        bits = F[:, self.indices] > self.thresholds  # (n, ferns, depth)
        return (bits * (1 << np.arange(self.depth))).sum(axis=2)

    def raw_scores(self, F: np.ndarray) -> np.ndarray:
        leaves = self.leaves(F)
        out = np.zeros((F.shape[0], self.log_probs.shape[2]))
        for f in range(self.n_ferns):
            out += self.log_probs[f, leaves[:, f]]
        return out


def raw_scores(model, F) -> np.ndarray:
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    if F.shape[1] != model.feature_dim:
        raise ValueError(f"feature dimension {F.shape[1]} does not match model ({model.feature_dim})")
    return model.raw_scores(F)


def log_posteriors(scores: np.ndarray) -> np.ndarray:
    scores = np.atleast_2d(scores)
    return scores - logsumexp(scores, axis=1, keepdims=True)


def classify(model, f) -> tuple[np.ndarray, np.ndarray]:
    """Raw per-class scores and softmax posteriors for one feature vector."""
    s = raw_scores(model, f)[0]
    return s, np.exp(log_posteriors(s)[0])


def detection_score(p, w) -> float:
    """``log p(w|u) - log p(bg|u)`` with posteriors floored at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    i = label_index(w) if isinstance(w, str) else int(w)
    return float(np.log(max(p[i], POSTERIOR_FLOOR)) - np.log(max(p[BACKGROUND], POSTERIOR_FLOOR)))


def detection_scores(scores: np.ndarray) -> np.ndarray:
    """Vectorized detection scores ``(n, 62)`` for every character label, from raw scores."""
    lp = np.maximum(log_posteriors(scores), np.log(POSTERIOR_FLOOR))
    return lp[:, :BACKGROUND] - lp[:, BACKGROUND:]


def accuracy(model, F, y) -> float:
    return float(np.mean(np.argmax(raw_scores(model, F), axis=1) == np.asarray(y)))


# ---------------------------------------------------------------- training

@dataclass
class LinearConfig:
    C: float = 1000.0  # weight of the mean hinge loss against 0.5 * ||w||^2
    tol: float = 0.05
    max_epochs: int = 300
    seed: int = 0


def _check_training_set(F, y, n_classes=N_CLASSES, require_all=True):
    F = np.asarray(F, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if F.ndim != 2 or F.shape[0] != y.shape[0]:
        raise ValueError("features must be n x d with one label per row")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError("label index out of range")
    if require_all:
        missing = sorted(set(range(n_classes)) - set(y.tolist()))
        if missing:
            names = [LABELS[i] if n_classes == N_CLASSES else str(i) for i in missing[:10]]
            raise ValueError(f"classes without samples: {names}")
    return F, y


def train_linear(F, y, config: LinearConfig | None = None, n_classes: int = N_CLASSES, feature: str = "") -> LinearModel:
    """One-vs-rest linear SVMs with hinge loss, solved by dual coordinate descent.

    Each binary problem minimizes ``0.5*||w||^2 + C * mean_i hinge(y_i (w.x_i + b))``;
    the bias is folded in as a constant feature. Per-sample normalization of
    ``C`` makes duplicating the data set leave the solution unchanged.
    Convergence is declared when the projected-gradient spread drops below ``tol``.
    """
    config = config or LinearConfig()
    F, y = _check_training_set(F, y, n_classes)
    n, d = F.shape
    X = np.hstack([F, np.ones((n, 1))])
    qii = np.einsum("ij,ij->i", X, X)
    W = np.zeros((n_classes, d + 1))
    for c in range(n_classes):
        yc = np.where(y == c, 1.0, -1.0)
        _dual_cd(X, yc, W[c], qii, config.C / n, config.tol, config.max_epochs, config.seed + c)
    return LinearModel(W[:, :d].copy(), W[:, d].copy(), feature)


def train_binary(F, positive, config: LinearConfig | None = None) -> tuple[np.ndarray, float]:
    """Single hinge-loss linear SVM; ``positive`` is a boolean mask. Returns (weights, bias)."""
    config = config or LinearConfig()
    F = np.asarray(F, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    if F.ndim != 2 or F.shape[0] != positive.size:
        raise ValueError("features must be n x d with one label per row")
    if positive.all() or not positive.any():
        raise ValueError("binary training needs both positive and negative samples")
    n, d = F.shape
    X = np.hstack([F, np.ones((n, 1))])
    w = np.zeros(d + 1)
    _dual_cd(X, np.where(positive, 1.0, -1.0), w, np.einsum("ij,ij->i", X, X), config.C / n,
             config.tol, config.max_epochs, config.seed)
    return w[:d].copy(), float(w[d])


@numba.njit(cache=True)
def _dual_cd(X, y, w, qii, cap, tol, max_epochs, seed):
    # dual coordinate descent with active-set shrinking for one binary hinge-loss SVM
    np.random.seed(seed)
    n, d = X.shape
    alpha = np.zeros(n)
    index = np.arange(n)
    active = n
    pg_max_old = np.inf
    pg_min_old = -np.inf
    epoch = 0
    while epoch < max_epochs:
        pg_max = -np.inf
        pg_min = np.inf
        for s in range(active):
            j = s + np.random.randint(active - s)
            index[s], index[j] = index[j], index[s]
        s = 0
        while s < active:
            i = index[s]
            dot = 0.0
            for t in range(d):
                dot += w[t] * X[i, t]
            g = y[i] * dot - 1.0
            pg = 0.0
            a = alpha[i]
            if a == 0.0:
                if g > pg_max_old:
                    active -= 1
                    index[s], index[active] = index[active], index[s]
                    continue
                elif g < 0.0:
                    pg = g
            elif a == cap:
                if g < pg_min_old:
                    active -= 1
                    index[s], index[active] = index[active], index[s]
                    continue
                elif g > 0.0:
                    pg = g
            else:
                pg = g
            pg_max = max(pg_max, pg)
            pg_min = min(pg_min, pg)
            if abs(pg) > 1e-12 and qii[i] > 0.0:
                na = min(max(a - g / qii[i], 0.0), cap)
                step = (na - a) * y[i]
                alpha[i] = na
                for t in range(d):
                    w[t] += step * X[i, t]
            s += 1
        epoch += 1
        if pg_max - pg_min <= tol:
            if active == n:
                break
            active = n
            pg_max_old = np.inf
            pg_min_old = -np.inf
            continue
        pg_max_old = pg_max if pg_max > 0.0 else np.inf
        pg_min_old = pg_min if pg_min < 0.0 else -np.inf
    return epoch


@dataclass
class SCConfig:
    basis_count: int = 10
    T0: int = 2
    iters: int = 10
    seed: int = 0


def train_sc(features_by_class: Sequence[np.ndarray], config: SCConfig | None = None, feature: str = "") -> SCModel:
    """Learn one K-SVD dictionary per class in feature space."""
    config = config or SCConfig()
    dicts = []
    for c, Fc in enumerate(features_by_class):
        Fc = np.asarray(Fc, dtype=np.float64)
        if Fc.shape[0] < config.basis_count:
            raise ValueError(f"class {c} has {Fc.shape[0]} samples, fewer than b={config.basis_count}")
        T0 = min(config.T0, config.basis_count, Fc.shape[1])
        res = ksvd_fit(Fc.T, config.basis_count, T0, iters=config.iters, seed=config.seed + c)
        dicts.append(res.dictionary)
    return SCModel(tuple(dicts), min(config.T0, config.basis_count), feature)


def group_by_class(F, y, n_classes: int = N_CLASSES) -> list[np.ndarray]:
    F = np.asarray(F)
    y = np.asarray(y)
    return [F[y == c] for c in range(n_classes)]


@dataclass
class FernsConfig:
    ferns: int = 50
    depth: int = 8
    seed: int = 0


def train_ferns(F, y, config: FernsConfig | None = None, n_classes: int = N_CLASSES, feature: str = "") -> FernsModel:
    """Random ferns: each fern tests ``depth`` (feature > threshold) pairs.

    Feature indices are uniform; each threshold is uniform between the 5% and
    95% training quantiles of its feature. Leaf histograms get +1 smoothing.
    """
    config = config or FernsConfig()
    F, y = _check_training_set(F, y, n_classes, require_all=False)
    n, d = F.shape
    rng = np.random.default_rng(config.seed)
    idx = rng.integers(0, d, size=(config.ferns, config.depth))
    lo = np.quantile(F, 0.05, axis=0)
    hi = np.quantile(F, 0.95, axis=0)
    u = rng.random((config.ferns, config.depth))
    thr = lo[idx] + u * (hi[idx] - lo[idx])
    model = FernsModel(idx, thr, np.zeros((config.ferns, 1 << config.depth, n_classes)), d, feature)
    leaves = model.leaves(F)
    class_counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    n_leaves = 1 << config.depth
    log_probs = np.empty((config.ferns, n_leaves, n_classes))
    for f in range(config.ferns):
        counts = np.zeros((n_leaves, n_classes))
        np.add.at(counts, (leaves[:, f], y), 1.0)
        log_probs[f] = np.log(counts + 1.0) - np.log(class_counts + n_leaves)
    return FernsModel(idx, thr, log_probs, d, feature)


# ----------------------------------------------------------------- storage

_MODEL_MAGIC = b"HSCM"
_MODEL_VERSION = 1
_TAGS = {LinearModel: b"LIN\0", SCModel: b"SC\0\0", FernsModel: b"FERN"}


def _f8(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def config_hash(config) -> str:
    obj = asdict(config) if config is not None and hasattr(config, "__dataclass_fields__") else (config or {})
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def save_model(model, path, config=None) -> None:
    """Binary model container plus a ``<path>.json`` metadata sidecar."""
    tag = _TAGS[type(model)]
    labels = "\n".join(LABELS).encode()
    parts = [struct.pack("<4sI4sI", _MODEL_MAGIC, _MODEL_VERSION, tag, len(labels)), labels]
    feature = model.feature.encode()
    parts.append(struct.pack("<I", len(feature)) + feature)
    if isinstance(model, LinearModel):
        K, d = model.weights.shape
        parts += [struct.pack("<II", K, d), _f8(model.weights), _f8(model.bias)]
    elif isinstance(model, SCModel):
        K, d, b = len(model.dictionaries), model.feature_dim, model.basis_count
        parts.append(struct.pack("<IIII", K, d, b, model.T0))
        parts += [_f8(D.atoms.ravel(order="F")) for D in model.dictionaries]
    else:
        nf, depth = model.indices.shape
        K = model.log_probs.shape[2]
        parts.append(struct.pack("<IIII", K, nf, depth, model.feature_dim))
        parts += [_f8(model.indices), _f8(model.thresholds), _f8(model.log_probs)]
    Path(path).write_bytes(b"".join(parts))
    meta = {
        "type": tag.rstrip(b"\0").decode(), "labels": list(LABELS), "feature": model.feature,
        "feature_dim": model.feature_dim, "config": asdict(config) if config is not None else None,
        "config_hash": config_hash(config),
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path):
    raw = Path(path).read_bytes()
    magic, version, tag, nlab = struct.unpack_from("<4sI4sI", raw)
    if magic != _MODEL_MAGIC or version != _MODEL_VERSION:
        raise ValueError("not a model container (bad magic or version)")
    off = struct.calcsize("<4sI4sI")
    labels = tuple(raw[off:off + nlab].decode().split("\n"))
    if labels != LABELS:
        raise ValueError("model label set does not match")
    off += nlab
    (nfeat,) = struct.unpack_from("<I", raw, off)
    feature = raw[off + 4:off + 4 + nfeat].decode()
    off += 4 + nfeat

    def take(count, shape):
        nonlocal off
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        return a.reshape(shape)

    if tag == b"LIN\0":
        K, d = struct.unpack_from("<II", raw, off)
        off += 8
        W = take(K * d, (K, d))
        return LinearModel(W, take(K, (K,)), feature)
    if tag == b"SC\0\0":
        K, d, b, T0 = struct.unpack_from("<IIII", raw, off)
        off += 16
        dicts = tuple(Dictionary(take(d * b, (b, d)).T) for _ in range(K))
        return SCModel(dicts, T0, feature)
    if tag == b"FERN":
        K, nf, depth, d = struct.unpack_from("<IIII", raw, off)
        off += 16
        idx = take(nf * depth, (nf, depth)).astype(np.int64)
        thr = take(nf * depth, (nf, depth))
        lp = take(nf * (1 << depth) * K, (nf, 1 << depth, K))
        return FernsModel(idx, thr, lp, d, feature)
    raise ValueError(f"unknown model type tag {tag!r}")
