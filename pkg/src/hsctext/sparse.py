"""Sparse coding over image patches: orthogonal matching pursuit and K-SVD.

Dictionaries are stored as ``m x k`` matrices whose columns are unit-norm atoms.
Single-signal coding (:func:`omp`) is the reference implementation; the
batched variant (:func:`omp_batch`) is what the feature extractor and the
dictionary learner use.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np

MAGIC = b"HSCD"
FORMAT_VERSION = 1
REL_TOL = 1e-6
MIN_PATCH_VAR = 1e-6
_HEADER = struct.Struct("<4sIIII")


def canonical_sign(atom: np.ndarray) -> float:
    """Return +1 or -1 so that the largest-magnitude component becomes positive."""
    i = int(np.argmax(np.abs(atom)))
    return -1.0 if atom[i] < 0 else 1.0


@dataclass(frozen=True, eq=False)
class Dictionary:
    atoms: np.ndarray
    patch_side: int | None = None  # None for dictionaries over non-patch signals

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float64, order="F")
        if atoms.ndim != 2 or atoms.shape[1] < 1:
            raise ValueError(f"atoms must be an m x k matrix with k >= 1, got {atoms.shape}")
        if self.patch_side is not None and atoms.shape[0] != self.patch_side**2:
            raise ValueError(f"m={atoms.shape[0]} does not match patch_side={self.patch_side}")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite")
        norms = np.linalg.norm(atoms, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("dictionary atoms must have unit L2 norm")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)

    @cached_property
    def gram(self) -> np.ndarray:
        return np.ascontiguousarray(self.atoms.T @ self.atoms)

    @property
    def m(self) -> int:
        return self.atoms.shape[0]

    @property
    def k(self) -> int:
        return self.atoms.shape[1]

    @classmethod
    def from_matrix(cls, mat: np.ndarray, patch_side: int | None = None) -> "Dictionary":
        """Normalize the columns of ``mat`` and wrap them (sign-canonicalized)."""
        mat = np.asarray(mat, dtype=np.float64)
        norms = np.linalg.norm(mat, axis=0)
        if np.any(norms == 0):
            raise ValueError("cannot normalize a zero column")
        mat = mat / norms
        signs = np.array([canonical_sign(mat[:, j]) for j in range(mat.shape[1])])
        return cls(mat * signs, patch_side)


@dataclass(frozen=True)
class SparseCode:
    entries: tuple[tuple[int, float], ...]
    sparsity_budget: int

    def __post_init__(self):
        if len(self.entries) > self.sparsity_budget:
            raise ValueError("more entries than the sparsity budget allows")
        idx = [i for i, _ in self.entries]
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate atom indices")
        if any(v == 0.0 for _, v in self.entries):
            raise ValueError("explicit zero coefficients are not stored")

    def to_dense(self, k: int) -> np.ndarray:
        out = np.zeros(k)
        for i, v in self.entries:
            out[i] = v
        return out

    @property
    def support(self) -> list[int]:
        return [i for i, _ in self.entries]


def _atoms(D) -> np.ndarray:
    return D.atoms if isinstance(D, Dictionary) else np.asarray(D, dtype=np.float64)


def omp(x, D, T0: int, residual_tol: float | None = None) -> SparseCode:
    """Greedy sparse coding of a single signal.

    Each step adds the atom with the largest absolute correlation with the
    current residual and re-solves all selected coefficients by least squares.
    Stops after ``T0`` atoms or once ``||residual|| <= residual_tol``
    (default ``1e-6 * ||x||``).
    """
    A = _atoms(D)
    x = np.asarray(x, dtype=np.float64).ravel()
    m, k = A.shape
    if x.shape[0] != m:
        raise ValueError(f"signal has dimension {x.shape[0]}, dictionary expects {m}")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite values")
    if not 1 <= T0 <= min(m, k):
        raise ValueError(f"T0 must be in [1, {min(m, k)}], got {T0}")
    xnorm = np.linalg.norm(x)
    tol = REL_TOL * xnorm if residual_tol is None else residual_tol

    support: list[int] = []
    coefs = np.zeros(0)
    residual = x.copy()
    while len(support) < T0 and np.linalg.norm(residual) > tol:
        corr = np.abs(A.T @ residual)
        corr[support] = -1.0
        j = int(np.argmax(corr))
        if corr[j] <= 1e-14 * max(xnorm, 1.0):
            break
        support.append(j)
        sub = A[:, support]
        coefs = np.linalg.lstsq(sub, x, rcond=None)[0]
        residual = x - sub @ coefs
    entries = tuple((j, float(c)) for j, c in zip(support, coefs) if c != 0.0)
    return SparseCode(entries, T0)


def omp_batch(X, D, T0: int, residual_tol: float | None = None) -> np.ndarray:
    """Code every column of ``X`` (m x n); returns the dense ``k x n`` coefficient matrix.

    Same selection rule as :func:`omp`; coefficients come from a Cholesky
    solve of the normal equations on the selected Gram block.
    ``residual_tol`` defaults to a per-column ``1e-6 * ||x||``. All-zero
    columns get an empty code.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return omp_rows(X.T, D, T0, residual_tol).T


def omp_rows(Xr, D, T0: int, residual_tol: float | None = None) -> np.ndarray:
    """Row-major variant of :func:`omp_batch`: ``(n, m)`` signals to ``(n, k)`` codes."""
    A = _atoms(D)
    Xr = np.ascontiguousarray(Xr, dtype=np.float64)
    m, k = A.shape
    if Xr.ndim != 2 or Xr.shape[1] != m:
        raise ValueError(f"signals have dimension {Xr.shape[-1]}, dictionary expects {m}")
    if not np.all(np.isfinite(Xr)):
        raise ValueError("signals contain non-finite values")
    if not 1 <= T0 <= min(m, k):
        raise ValueError(f"T0 must be in [1, {min(m, k)}], got {T0}")
    G = D.gram if isinstance(D, Dictionary) else np.ascontiguousarray(A.T @ A)
    n = Xr.shape[0]
    x2 = np.einsum("ij,ij->i", Xr, Xr)
    if residual_tol is None:
        tol2 = (REL_TOL * REL_TOL) * x2
    else:
        tol2 = np.full(n, float(residual_tol) ** 2)
    out = np.zeros((n, k))
    if n:
        _omp_kernel(Xr @ A, G, x2, tol2, T0, out)
    return out


@numba.njit(cache=True)
def _omp_kernel(DtX, G, x2, tol2, T0, out):
    # Per sample: greedy selection on |A^T r|, Cholesky factor of the selected
    # Gram block grown one row per step, correlations refreshed as A^T x - G[:, S] c.
    n, k = DtX.shape
    sel = np.zeros(T0, dtype=np.int64)
    L = np.zeros((T0, T0))
    w = np.zeros(T0)
    y = np.zeros(T0)
    c = np.zeros(T0)
    corr = np.zeros(k)
    for i in range(n):
        if x2[i] <= 0.0 or x2[i] <= tol2[i]:
            continue
        floor = 1e-14 * max(np.sqrt(x2[i]), 1.0)
        for a in range(k):
            corr[a] = DtX[i, a]
        nsel = 0
        for t in range(T0):
            best = -1.0
            j = -1
            for a in range(k):
                v = abs(corr[a])
                taken = False
                for s in range(t):
                    if sel[s] == a:
                        taken = True
                        break
                if not taken and v > best:
                    best = v
                    j = a
            if best <= floor:
                break
            # extend the Cholesky factor with the new atom
            for s in range(t):
                acc = G[sel[s], j]
                for q in range(s):
                    acc -= L[s, q] * w[q]
                w[s] = acc / L[s, s]
            d = G[j, j]
            for s in range(t):
                d -= w[s] * w[s]
            if d <= 1e-12:
                break
            for s in range(t):
                L[t, s] = w[s]
            L[t, t] = np.sqrt(d)
            sel[t] = j
            # solve L L^T c = b with b = A_S^T x
            for s in range(t + 1):
                acc = DtX[i, sel[s]]
                for q in range(s):
                    acc -= L[s, q] * y[q]
                y[s] = acc / L[s, s]
            for s in range(t, -1, -1):
                acc = y[s]
                for q in range(s + 1, t + 1):
                    acc -= L[q, s] * c[q]
                c[s] = acc / L[s, s]
            bc = 0.0
            for s in range(t + 1):
                bc += DtX[i, sel[s]] * c[s]
            nsel = t + 1
            if t == T0 - 1 or x2[i] - bc <= tol2[i]:
                break
            for a in range(k):
                corr[a] = DtX[i, a]
            for s in range(t + 1):
                g = sel[s]
                cs = c[s]
                for a in range(k):
                    corr[a] -= G[g, a] * cs
        for s in range(nsel):
            out[i, sel[s]] = c[s]


def codes_from_dense(A: np.ndarray, T0: int) -> list[SparseCode]:
    """Convert a dense ``k x n`` coefficient matrix into per-column SparseCodes."""
    codes = []
    for col in np.asarray(A).T:
        nz = np.flatnonzero(col)
        codes.append(SparseCode(tuple((int(i), float(col[i])) for i in nz), T0))
    return codes


def dense_from_codes(codes: Sequence[SparseCode], k: int) -> np.ndarray:
    out = np.zeros((k, len(codes)))
    for c, code in enumerate(codes):
        for i, v in code.entries:
            out[i, c] = v
    return out


def _rank_one(E: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    U, s, Vt = np.linalg.svd(E, full_matrices=False)
    atom = U[:, 0]
    row = s[0] * Vt[0]
    sign = canonical_sign(atom)
    return atom * sign, row * sign


def ksvd_update_atom(D, codes, X, j: int, skip: Iterable[int] = ()) -> tuple[np.ndarray, np.ndarray]:
    """Rank-1 SVD update of atom ``j`` and its coefficient row.

    ``codes`` is either a dense ``k x n`` matrix or a list of SparseCodes.
    Returns ``(atom, row)`` where ``row`` is the full length-n coefficient row
    of atom ``j``. If no sample uses the atom it is re-seeded with the
    normalized worst-reconstructed sample (samples listed in ``skip`` are not
    eligible) and its row is all zeros.
    """
    A_mat = _atoms(D)
    X = np.asarray(X, dtype=np.float64)
    C = dense_from_codes(codes, A_mat.shape[1]) if not isinstance(codes, np.ndarray) else codes
    omega = np.flatnonzero(C[j])
    if omega.size == 0:
        atom, _ = _reseed(A_mat, C, X, skip)
        return atom, np.zeros(X.shape[1])
    E = X[:, omega] - A_mat @ C[:, omega] + np.outer(A_mat[:, j], C[j, omega])
    return _finish_update(A_mat[:, j], E, omega, X.shape[1])


def _finish_update(old_atom, E, omega, n):
    row = np.zeros(n)
    if not np.any(E):
        return old_atom.copy(), row
    atom, vals = _rank_one(E)
    row[omega] = vals
    return atom, row


def _reseed(A_mat, C, X, skip, residual=None):
    if residual is None:
        residual = X - A_mat @ C
    err = np.einsum("ij,ij->j", residual, residual)
    err[list(skip)] = -1.0
    norms = np.linalg.norm(X, axis=0)
    err[norms == 0] = -1.0
    s = int(np.argmax(err))
    if err[s] < 0:
        raise ValueError("no non-zero sample available to re-seed an unused atom")
    atom = X[:, s] / norms[s]
    return atom * canonical_sign(atom), s


def reconstruction_mse(X: np.ndarray, D, C: np.ndarray) -> float:
    R = np.asarray(X) - _atoms(D) @ C
    return float(np.mean(R * R))


@dataclass
class KSVDResult:
    dictionary: Dictionary
    codes: np.ndarray
    mse_history: list[float] = field(default_factory=list)
    reseeded: int = 0


def ksvd_fit(X, k: int, T0: int, iters: int = 50, seed: int = 0, patch_side: int | None = None) -> KSVDResult:
    """Learn a dictionary with K-SVD.

    ``mse_history[0]`` is the reconstruction MSE of the initial OMP coding;
    entry ``t`` is the MSE after full iteration ``t``. During re-coding a
    sample keeps its previous code when OMP would reconstruct it worse, which
    makes the history non-increasing.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be an m x n matrix")
    m, n = X.shape
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    if not np.all(np.isfinite(X)):
        raise ValueError("samples contain non-finite values")
    norms = np.linalg.norm(X, axis=0)
    nonzero = np.flatnonzero(norms > 0)
    if nonzero.size == 0:
        raise ValueError("sample matrix is all zeros")

    rng = np.random.default_rng(seed)
    if nonzero.size >= k:
        pick = rng.choice(nonzero, size=k, replace=False)
        D = X[:, pick] / norms[pick]
    else:
        D = rng.standard_normal((m, k))
        D[:, : nonzero.size] = X[:, nonzero]
        D /= np.linalg.norm(D, axis=0)
    for j in range(k):
        D[:, j] *= canonical_sign(D[:, j])

    C = omp_batch(X, D, T0)
    R = X - D @ C
    history = [float(np.mean(R * R))]
    reseeded = 0
    for _ in range(iters):
        if _ > 0:
            C_new = omp_batch(X, D, T0)
            R_new = X - D @ C_new
            R = X - D @ C
            worse = np.einsum("ij,ij->j", R_new, R_new) > np.einsum("ij,ij->j", R, R)
            C_new[:, worse] = C[:, worse]
            C = C_new
            R = X - D @ C
        taken: set[int] = set()
        for j in range(k):
            omega = np.flatnonzero(C[j])
            if omega.size == 0:
                atom, s = _reseed(D, C, X, taken, residual=R)
                taken.add(s)
                D[:, j] = atom
                reseeded += 1
                continue
            E = R[:, omega] + np.outer(D[:, j], C[j, omega])
            atom, row = _finish_update(D[:, j], E, omega, n)
            D[:, j] = atom
            C[j, omega] = row[omega]
            R[:, omega] = E - np.outer(atom, row[omega])
        R = X - D @ C
        history.append(float(np.mean(R * R)))
    return KSVDResult(Dictionary(D, patch_side), C, history, reseeded)


def ksvd_learn(X, k: int, T0: int, iters: int = 50, seed: int = 0, patch_side: int | None = None) -> Dictionary:
    return ksvd_fit(X, k, T0, iters=iters, seed=seed, patch_side=patch_side).dictionary


def sample_patches(corpus: Sequence[np.ndarray], per_image: int, patch_side: int, seed: int,
                   max_retries: int = 10) -> np.ndarray:
    """Draw mean-subtracted random patches from grayscale images.

    Returns an ``m x n`` matrix (``m = patch_side**2``). A draw whose variance
    is below ``MIN_PATCH_VAR`` is re-drawn up to ``max_retries`` times and then
    skipped, so ``n <= per_image * len(corpus)``.
    """
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(seed)
    cols = []
    for img in corpus:
        img = as_gray_float(img)
        h, w = img.shape
        if h < patch_side or w < patch_side:
            raise ValueError(f"image {img.shape} smaller than patch side {patch_side}")
        for _ in range(per_image):
            for _attempt in range(max_retries + 1):
                y = int(rng.integers(0, h - patch_side + 1))
                x = int(rng.integers(0, w - patch_side + 1))
                p = img[y:y + patch_side, x:x + patch_side].ravel()
                if p.var() >= MIN_PATCH_VAR:
                    cols.append(p - p.mean())
                    break
    if not cols:
        return np.zeros((patch_side * patch_side, 0))
    return np.stack(cols, axis=1)


def as_gray_float(img) -> np.ndarray:
    """2-D float64 image in [0, 1]; uint8 input is scaled by 1/255, RGB is averaged."""
    a = np.asarray(img)
    scale = 1.0 / 255.0 if a.dtype == np.uint8 else 1.0
    a = a.astype(np.float64)
    if a.ndim == 3:
        a = a[..., :3].mean(axis=2)
    return a * scale


def save_dictionary(D: Dictionary, path) -> None:
    if D.patch_side is None:
        raise ValueError("only patch dictionaries can be written to the dictionary format")
    payload = np.asarray(D.atoms, dtype="<f8").ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, D.patch_side, D.m, D.k))
        fh.write(payload)


def load_dictionary(path) -> Dictionary:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated dictionary file")
    magic, version, side, m, k = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported dictionary format version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * m * k:
        raise ValueError("dictionary payload size does not match header")
    atoms = np.frombuffer(body, dtype="<f8").reshape((m, k), order="F")
    return Dictionary(atoms.astype(np.float64), int(side))


def dictionary_to_json(D: Dictionary) -> str:
    return json.dumps({
        "magic": MAGIC.decode(), "version": FORMAT_VERSION, "patch_side": D.patch_side,
        "m": D.m, "k": D.k, "atoms": [D.atoms[:, j].tolist() for j in range(D.k)],
    })


def dictionary_from_json(text: str) -> Dictionary:
    obj = json.loads(text)
    atoms = np.array(obj["atoms"], dtype=np.float64).T
    if atoms.shape != (obj["m"], obj["k"]):
        raise ValueError("atom array shape does not match header fields")
    return Dictionary(atoms, obj["patch_side"])
