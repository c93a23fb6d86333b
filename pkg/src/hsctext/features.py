"""Character window features: Histograms of Sparse Codes (HSC) and HOG.

Windows are 48x48 grayscale arrays in [0, 1], split into 8x8 cells.
Layout of every flat feature vector is (cell_row, cell_col, channel), row-major.
"""

from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .sparse import MIN_PATCH_VAR, Dictionary, as_gray_float, omp_rows

WINDOW = 48
CELL = 8
N_CELLS = WINDOW // CELL  # 6
HSC_SIGMA = 0.25
HOG_DIM = 31
HOG_TRUNC = 0.2
HOG_EPS = 1e-4


def resize(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of a float image (PIL 'F' mode)."""
    img = np.asarray(img, dtype=np.float32)
    if img.shape == (height, width):
        return img.astype(np.float64)
    out = Image.fromarray(img, mode="F").resize((width, height), Image.BILINEAR)
    return np.asarray(out, dtype=np.float64)


def to_window(img) -> np.ndarray:
    """Grayscale [0,1] image bilinearly resized to 48x48."""
    a = as_gray_float(img)
    if a.shape != (WINDOW, WINDOW):
        a = resize(a, WINDOW, WINDOW)
    return a


def _check_window(window) -> np.ndarray:
    w = np.asarray(window, dtype=np.float64)
    if w.shape != (WINDOW, WINDOW):
        raise ValueError(f"expected a {WINDOW}x{WINDOW} window, got {w.shape}")
    return w


# --------------------------------------------------------------------------- HSC

def centered_patches(img: np.ndarray, side: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean-subtracted patches centered at every pixel (replicate padding).

    Returns ``(P, keep)``: ``P`` is ``(H*W, side*side)`` and ``keep`` flags the
    patches whose variance reaches ``MIN_PATCH_VAR``.
    """
    if side % 2 != 1:
        raise ValueError("patch side must be odd for centered patches")
    r = side // 2
    padded = np.pad(np.asarray(img, dtype=np.float64), r, mode="edge")
    P = sliding_window_view(padded, (side, side)).reshape(-1, side * side)
    mean = P.mean(axis=1, keepdims=True)
    P = P - mean
    keep = np.einsum("ij,ij->i", P, P) / (side * side) >= MIN_PATCH_VAR
    return P, keep


def image_codes(img, D: Dictionary, T0: int = 2) -> np.ndarray:
    """Per-pixel sparse codes of a whole image, as a dense ``(H, W, k)`` array."""
    img = np.asarray(img, dtype=np.float64)
    if D.patch_side is None:
        raise ValueError("pixel coding needs a patch dictionary")
    P, keep = centered_patches(img, D.patch_side)
    P[~keep] = 0.0
    return omp_rows(P, D, T0).reshape(img.shape[0], img.shape[1], D.k)


def pixel_codes(window, D: Dictionary, T0: int = 2) -> np.ndarray:
    """Sparse code of the patch centered on every pixel of a 48x48 window.

    The returned ``(48, 48, k)`` array holds one dense code per pixel; flat
    patches (variance below threshold after mean removal) get an empty code.
    """
    return image_codes(_check_window(window), D, T0)


def _axis_weights(n_pixels: int = WINDOW, cell: int = CELL, n_cells: int = N_CELLS) -> np.ndarray:
    # Cell centers at 8r + 3.5; pixels outside the outermost centers are clamped
    # to the border cell so every pixel's weights sum to one.
    W = np.zeros((n_cells, n_pixels))
    for p in range(n_pixels):
        f = (p - (cell - 1) / 2) / cell
        if f <= 0:
            W[0, p] = 1.0
        elif f >= n_cells - 1:
            W[n_cells - 1, p] = 1.0
        else:
            r0 = int(np.floor(f))
            w = f - r0
            W[r0, p] = 1.0 - w
            if w:
                W[r0 + 1, p] = w
    return W


_HSC_W = _axis_weights()


def bilinear_cell_weights(y: float, x: float) -> dict[tuple[int, int], float]:
    """Weights that a code at (y, x) pixel coordinates puts on the surrounding cells."""
    def one(p):
        f = (p - (CELL - 1) / 2) / CELL
        f = min(max(f, 0.0), N_CELLS - 1.0)
        r0 = min(int(np.floor(f)), N_CELLS - 2)
        w = f - r0
        return {r0: 1.0 - w, r0 + 1: w}
    out = {}
    for r, wy in one(y).items():
        for c, wx in one(x).items():
            if wy * wx:
                out[(r, c)] = wy * wx
    return out


def hsc_cells(codes: np.ndarray, k: int | None = None) -> np.ndarray:
    """Aggregate per-pixel codes into the L2-normalized 4x4 interior cell grid.

    Each interior cell averages the bilinearly assigned ``|beta|`` over its
    16x16 neighborhood; the six-cell border ring is dropped.
    """
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 3 or codes.shape[:2] != (WINDOW, WINDOW):
        raise ValueError(f"codes must cover a {WINDOW}x{WINDOW} grid, got {codes.shape}")
    if k is not None and codes.shape[2] != k:
        raise ValueError(f"codes have {codes.shape[2]} channels, expected k={k}")
    Wi = _HSC_W[1:-1]
    rows = np.tensordot(Wi, np.abs(codes), axes=(1, 0))  # (4, 48, k)
    F = np.tensordot(Wi, rows, axes=(1, 1)).transpose(1, 0, 2) / (2 * CELL) ** 2
    norms = np.linalg.norm(F, axis=2, keepdims=True)
    return np.divide(F, norms, out=np.zeros_like(F), where=norms > 0)


def boxcox(F, sigma: float = HSC_SIGMA) -> np.ndarray:
    """Elementwise power transform ``F ** sigma`` for non-negative input."""
    F = np.asarray(F, dtype=np.float64)
    if not 0 < sigma <= 1:
        raise ValueError("sigma must lie in (0, 1]")
    if np.any(F < 0):
        raise ValueError("Box-Cox input must be non-negative")
    return F ** sigma


def hsc(codes: np.ndarray, k: int | None = None, sigma: float = HSC_SIGMA) -> np.ndarray:
    return boxcox(hsc_cells(codes, k), sigma).ravel()


# --------------------------------------------------------------------------- HOG

_ORIENT = np.arange(9) * np.pi / 9
_UU, _VV = np.cos(_ORIENT), np.sin(_ORIENT)


def _hog_spatial_weights(n_pixels: int = WINDOW) -> np.ndarray:
    # Soft binning as in the Felzenszwalb implementation: out-of-grid shares are dropped.
    W = np.zeros((N_CELLS, n_pixels))
    for p in range(n_pixels):
        f = (p + 0.5) / CELL - 0.5
        i0 = int(np.floor(f))
        v0 = f - i0
        if 0 <= i0 < N_CELLS:
            W[i0, p] += 1.0 - v0
        if 0 <= i0 + 1 < N_CELLS:
            W[i0 + 1, p] += v0
    return W


_HOG_W = _hog_spatial_weights()


def hog_cells(window) -> np.ndarray:
    """31-channel Felzenszwalb HOG for each of the 6x6 cells of a 48x48 window."""
    img = _check_window(window) * 255.0
    dx = np.zeros_like(img)
    dy = np.zeros_like(img)
    dx[1:-1, 1:-1] = img[1:-1, 2:] - img[1:-1, :-2]
    dy[1:-1, 1:-1] = img[2:, 1:-1] - img[:-2, 1:-1]
    mag = np.sqrt(dx * dx + dy * dy)
    dots = dx[..., None] * _UU + dy[..., None] * _VV
    orient = np.argmax(np.concatenate([dots, -dots], axis=2), axis=2)
    votes = np.zeros(img.shape + (18,))
    np.put_along_axis(votes, orient[..., None], mag[..., None], axis=2)
    hist = np.einsum("ry,cx,yxo->rco", _HOG_W, _HOG_W, votes)

    energy = np.sum((hist[..., :9] + hist[..., 9:]) ** 2, axis=2)
    e = np.pad(energy, 1, mode="edge")
    # block sums of the 2x2 blocks containing each cell; index shifts (dr, dc) of the top-left corner
    blocks = []
    for dr, dc in ((0, 0), (-1, 0), (0, -1), (-1, -1)):
        r0, c0 = 1 + dr, 1 + dc
        s = (e[r0:r0 + N_CELLS, c0:c0 + N_CELLS] + e[r0 + 1:r0 + 1 + N_CELLS, c0:c0 + N_CELLS]
             + e[r0:r0 + N_CELLS, c0 + 1:c0 + 1 + N_CELLS] + e[r0 + 1:r0 + 1 + N_CELLS, c0 + 1:c0 + 1 + N_CELLS])
        blocks.append(1.0 / np.sqrt(s + HOG_EPS))
    norms = np.stack(blocks, axis=2)  # (6, 6, 4)

    sens = np.minimum(hist[..., :, None] * norms[..., None, :], HOG_TRUNC)  # (6,6,18,4)
    unsigned = hist[..., :9] + hist[..., 9:]
    insens = np.minimum(unsigned[..., :, None] * norms[..., None, :], HOG_TRUNC)
    out = np.empty((N_CELLS, N_CELLS, HOG_DIM))
    out[..., :18] = 0.5 * sens.sum(axis=3)
    out[..., 18:27] = 0.5 * insens.sum(axis=3)
    out[..., 27:] = 0.2357 * sens.sum(axis=2)
    return out


def hog(window) -> np.ndarray:
    return hog_cells(window).ravel()


# ------------------------------------------------------------------- extractors

@dataclass(frozen=True, eq=False)
class HSCExtractor:
    dictionary: Dictionary
    T0: int = 2
    sigma: float = HSC_SIGMA
    name = "hsc"

    def __post_init__(self):
        if not 1 <= self.T0 <= 8:
            raise ValueError("T0 for pixel coding must be in 1..8")

    @property
    def dim(self) -> int:
        return (N_CELLS - 2) ** 2 * self.dictionary.k

    def __call__(self, window) -> np.ndarray:
        return hsc(pixel_codes(window, self.dictionary, self.T0), self.dictionary.k, self.sigma)

    def level_features(self, level: np.ndarray, origins) -> np.ndarray:
        """Features of the 48x48 windows at ``origins`` (y, x) inside one pyramid level.

        Codes are computed once for the whole level. For patch sides up to 9
        this is identical to coding each window separately: the interior cells
        only see pixels whose patches stay inside the window.
        """
        if self.dictionary.patch_side > 9:
            return np.stack([self(level[y:y + WINDOW, x:x + WINDOW]) for y, x in origins])
        codes = image_codes(level, self.dictionary, self.T0)
        return np.stack([hsc(codes[y:y + WINDOW, x:x + WINDOW], None, self.sigma) for y, x in origins])


@dataclass(frozen=True)
class HOGExtractor:
    name = "hog"

    @property
    def dim(self) -> int:
        return N_CELLS * N_CELLS * HOG_DIM

    def __call__(self, window) -> np.ndarray:
        return hog(window)

    def level_features(self, level: np.ndarray, origins) -> np.ndarray:
        return np.stack([hog(level[y:y + WINDOW, x:x + WINDOW]) for y, x in origins])


def extract_batch(extractor, windows, threads: int = 1) -> np.ndarray:
    """Features for a sequence of windows (any size; resized to 48x48), row order preserved."""
    windows = list(windows)
    if not windows:
        return np.zeros((0, extractor.dim))
    fn = lambda w: extractor(to_window(w))  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(fn, windows))
    else:
        rows = [fn(w) for w in windows]
    return np.stack(rows)


# ---------------------------------------------------------------- feature dumps

_DUMP_HEADER = struct.Struct("<II")


def write_features(path, F: np.ndarray) -> None:
    F = np.asarray(F)
    if F.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_DUMP_HEADER.pack(F.shape[0], F.shape[1]))
        fh.write(np.ascontiguousarray(F, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    n, d = _DUMP_HEADER.unpack_from(raw)
    body = raw[_DUMP_HEADER.size:]
    if len(body) != 4 * n * d:
        raise ValueError("feature dump payload does not match header")
    return np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float32)


def export_features_csv(path, F: np.ndarray, labels=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = (["label"] if labels is not None else []) + [f"f{i}" for i in range(F.shape[1])]
        w.writerow(header)
        for i, row in enumerate(np.asarray(F)):
            vals = [repr(float(v)) for v in row]
            w.writerow(([labels[i]] if labels is not None else []) + vals)
