"""Nested orthonormal subspaces and the projections between them.

Vectors are rows: a batch of points in level ``j`` coordinates is an array of
shape ``(..., n_j)``; ``project`` maps it to level ``k`` coordinates through
``U_{k|j}^T`` and ``lift`` maps back through ``U_{k|j}``.

Images are flattened channel-outermost, row-major within each channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Basis:
    """``d x n`` matrix with orthonormal columns.

    ``mean`` is set for PCA bases; residuals for those bases are measured
    about the mean. ``eigenvalues`` holds the retained spectrum (when the
    basis came from an eigendecomposition) and ``degenerate`` flags a
    covariance whose rank is below ``n``.
    """

    columns: np.ndarray
    mean: np.ndarray | None = None
    eigenvalues: np.ndarray | None = None
    degenerate: bool = False

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=np.float64)
        if cols.ndim != 2:
            raise ValueError("basis columns must be a 2-D array")
        d, n = cols.shape
        if not 1 <= n <= d:
            raise ValueError(f"need 1 <= n <= d, got n={n}, d={d}")
        gram_err = np.abs(cols.T @ cols - np.eye(n)).max()
        if gram_err > ORTHO_TOL:
            raise ValueError(f"columns are not orthonormal (max error {gram_err:.3g})")
        object.__setattr__(self, "columns", cols)

    @property
    def d(self) -> int:
        return self.columns.shape[0]

    @property
    def n(self) -> int:
        return self.columns.shape[1]

    def coords(self, x):
        return np.asarray(x) @ self.columns

    def lift(self, y):
        return np.asarray(y) @ self.columns.T


@dataclass(frozen=True)
class ImageShape:
    height: int
    width: int
    channels: int = 3

    @property
    def size(self) -> int:
        return self.height * self.width * self.channels


def _is_pow2(v: int) -> bool:
    return v >= 1 and (v & (v - 1)) == 0


class SubspaceChain:
    """Chain ``R^d = V_0 > V_1 > ... > V_K`` of nested subspaces.

    Subclasses supply the single-level maps ``_down`` (level ``l-1`` to
    ``l`` coordinates) and ``_up`` (its adjoint); everything else composes
    them.
    """

    ambient_dim: int
    dims: tuple[int, ...]

    @property
    def K(self) -> int:
        return len(self.dims) - 1

    def _down(self, level, x):
        raise NotImplementedError

    def _up(self, level, y):
        raise NotImplementedError

    def _check_levels(self, k, j, strict=False):
        if not (0 <= j <= self.K and 0 <= k <= self.K):
            raise IndexError(f"levels ({k}, {j}) out of range for K={self.K}")
        if strict and not j < k:
            raise ValueError(f"need j < k, got j={j}, k={k}")
        if j > k:
            raise ValueError(f"need j <= k, got j={j}, k={k}")

    def _check_dim(self, x, level):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dims[level]:
            raise ValueError(
                f"expected last axis {self.dims[level]} for level {level}, got {x.shape[-1]}"
            )
        return x

    def project(self, x, k, j=0):
        """Coordinates in level ``k`` of points given in level ``j``."""
        self._check_levels(k, j)
        x = self._check_dim(x, j)
        for level in range(j + 1, k + 1):
            x = self._down(level, x)
        return x

    def lift(self, y, k, j=0):
        """Embed level-``k`` coordinates into level ``j`` (``U_{k|j} y``)."""
        self._check_levels(k, j)
        y = self._check_dim(y, k)
        for level in range(k, j, -1):
            y = self._up(level, y)
        return y

    def orthogonal_component(self, x, k, j=0):
        self._check_levels(k, j, strict=True)
        x = self._check_dim(x, j)
        return x - self.lift(self.project(x, k, j), k, j)

    def relative_basis(self, k, j=0) -> np.ndarray:
        """Materialized ``U_{k|j}`` of shape ``(n_j, n_k)``."""
        return self.lift(np.eye(self.dims[k]), k, j).T

    def basis(self, k) -> np.ndarray:
        return self.relative_basis(k, 0)

    def level(self, k) -> "LevelView":
        return LevelView(self, k)

    def orthogonal_energy(self, data, k, j=0) -> float:
        """Mean of ``||x_perp_{k|j}||^2`` over rows of full-space ``data``."""
        xj = self.project(data, j, 0)
        perp = self.orthogonal_component(xj, k, j)
        return float(np.mean(np.sum(perp * perp, axis=-1)))


@dataclass(frozen=True)
class LevelView:
    """Level ``k`` of a chain seen as a basis of the ambient space."""

    chain: SubspaceChain
    k: int
    mean: None = field(default=None, init=False)

    @property
    def d(self):
        return self.chain.ambient_dim

    @property
    def n(self):
        return self.chain.dims[self.k]

    @property
    def columns(self):
        return self.chain.basis(self.k)

    def coords(self, x):
        return self.chain.project(x, self.k, 0)

    def lift(self, y):
        return self.chain.lift(y, self.k, 0)


class ExplicitChain(SubspaceChain):
    """Chain defined by explicit bases ``U_1 ... U_K`` of the ambient space."""

    def __init__(self, bases, ambient_dim=None):
        mats = [b.columns if isinstance(b, Basis) else Basis(b).columns for b in bases]
        if ambient_dim is None:
            if not mats:
                raise ValueError("ambient_dim is required for an empty chain")
            ambient_dim = mats[0].shape[0]
        self.ambient_dim = int(ambient_dim)
        dims = [self.ambient_dim]
        for m in mats:
            if m.shape[0] != self.ambient_dim:
                raise ValueError("all bases must share the ambient dimension")
            if m.shape[1] >= dims[-1]:
                raise ValueError(f"dimensions must strictly decrease, got {dims + [m.shape[1]]}")
            dims.append(m.shape[1])
        self.dims = tuple(dims)
        full = [np.eye(self.ambient_dim)] + mats
        for j in range(1, len(full)):
            for k in range(j + 1, len(full)):
                err = np.abs(full[j] @ (full[j].T @ full[k]) - full[k]).max()
                if err > ORTHO_TOL:
                    raise ValueError(f"subspace {k} is not nested in subspace {j} (error {err:.3g})")
        self._bases = mats
        self._rel = [None] + [full[l - 1].T @ full[l] for l in range(1, len(full))]

    def _down(self, level, x):
        return x @ self._rel[level]

    def _up(self, level, y):
        return y @ self._rel[level].T

    def basis(self, k):
        return np.eye(self.ambient_dim) if k == 0 else self._bases[k - 1].copy()


class DownsamplingChain(SubspaceChain):
    """Chain of 2x2 pooling subspaces: each level sums 2x2 blocks and halves."""

    def __init__(self, shape: ImageShape, levels: int):
        for side in (shape.height, shape.width):
            if not _is_pow2(side):
                raise ValueError(f"image side {side} is not a power of two")
            if side % (2**levels):
                raise ValueError(f"image side {side} not divisible by 2^{levels}")
        if levels < 0:
            raise ValueError("levels must be non-negative")
        self.shape = shape
        self.levels = levels
        self.ambient_dim = shape.size
        self.dims = tuple(
            shape.channels * (shape.height >> k) * (shape.width >> k) for k in range(levels + 1)
        )

    def _grid(self, level):
        return self.shape.height >> level, self.shape.width >> level

    def _down(self, level, x):
        h, w = self._grid(level - 1)
        lead = x.shape[:-1]
        img = x.reshape(lead + (self.shape.channels, h // 2, 2, w // 2, 2))
        return 0.5 * img.sum(axis=(-3, -1)).reshape(lead + (-1,))

    def _up(self, level, y):
        h, w = self._grid(level)
        lead = y.shape[:-1]
        img = y.reshape(lead + (self.shape.channels, h, w))
        img = np.repeat(np.repeat(img, 2, axis=-2), 2, axis=-1)
        return 0.5 * img.reshape(lead + (-1,))


def downsampling_chain(shape: ImageShape, levels: int) -> DownsamplingChain:
    return DownsamplingChain(shape, levels)


def _sign_fix(vecs):
    # largest-magnitude entry of every column made positive; first index wins ties
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def _top_eigvecs(moment, n):
    w, v = np.linalg.eigh(moment)
    order = np.argsort(-w, kind="stable")[:n]
    top_w = w[order]
    scale = max(abs(w).max(), np.finfo(float).tiny)
    degenerate = bool(top_w[-1] <= 1e-12 * scale)
    return _sign_fix(v[:, order]), top_w, degenerate


def _second_moment(data, mean=None, chunk=4096):
    d = data.shape[1]
    acc = np.zeros((d, d))
    for start in range(0, data.shape[0], chunk):
        block = np.asarray(data[start:start + chunk], dtype=np.float64)
        if mean is not None:
            block = block - mean
        acc += block.T @ block
    return acc / data.shape[0]


def pca_subspace(data, n: int) -> Basis:
    """Top-``n`` principal directions of mean-centred ``data`` (rows are samples)."""
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError("data must be a 2-D array")
    N, d = data.shape
    if not 1 <= n <= d:
        raise ValueError(f"need 1 <= n <= d, got n={n}, d={d}")
    if N < n:
        raise ValueError(f"need at least n={n} samples, got {N}")
    mean = data.mean(axis=0)
    vecs, w, degenerate = _top_eigvecs(_second_moment(data, mean), n)
    return Basis(vecs, mean=mean, eigenvalues=w, degenerate=degenerate)


def pca_chain(data, dims) -> ExplicitChain:
    """Nested PCA chain: level ``k`` spans the top ``dims[k-1]`` components."""
    dims = list(dims)
    if any(a <= b for a, b in zip(dims, dims[1:])):
        raise ValueError("dims must be strictly decreasing")
    data = np.asarray(data)
    if not dims:
        return ExplicitChain([], ambient_dim=data.shape[1])
    top = pca_subspace(data, dims[0])
    return ExplicitChain([top.columns[:, :n] for n in dims], ambient_dim=data.shape[1])


def _patch_index(shape: ImageShape, p: int):
    c, h, w = shape.channels, shape.height, shape.width
    idx = np.arange(shape.size).reshape(c, h // p, p, w // p, p)
    # (row block, col block, channel, dy, dx)
    return idx.transpose(1, 3, 0, 2, 4).reshape(h // p, w // p, c * p * p)


def image_patches(images, shape: ImageShape, p: int):
    """All non-overlapping ``p x p`` patches as rows of length ``channels * p^2``."""
    images = np.asarray(images, dtype=np.float64)
    idx = _patch_index(shape, p).reshape(-1, shape.channels * p * p)
    return images[:, idx].reshape(-1, idx.shape[1])


def patch_pca_basis(images, shape: ImageShape, patch_side: int, chunk: int = 2048) -> Basis:
    """Image-structured subspace from PCA of non-overlapping patches.

    Every patch is mapped onto the same ``channels`` patch principal
    directions, so the latent is an image of ``channels`` planes at
    resolution ``side / patch_side``. Patches are not centred: the resulting
    subspace is linear and residuals are measured about the origin.
    """
    if patch_side < 1 or shape.height % patch_side or shape.width % patch_side:
        raise ValueError(f"image sides must be divisible by patch_side={patch_side}")
    images = np.asarray(images)
    if images.ndim != 2 or images.shape[1] != shape.size:
        raise ValueError(f"images must have shape (N, {shape.size})")
    m = shape.channels
    pdim = m * patch_side**2
    if pdim <= m:
        raise ValueError("patch_side must exceed 1")
    moment = np.zeros((pdim, pdim))
    count = 0
    for start in range(0, images.shape[0], chunk):
        patches = image_patches(images[start:start + chunk], shape, patch_side)
        moment += patches.T @ patches
        count += patches.shape[0]
    comps, w, degenerate = _top_eigvecs(moment / count, m)
    idx = _patch_index(shape, patch_side)
    hb, wb = idx.shape[:2]
    cols = np.zeros((shape.size, m * hb * wb))
    for a in range(hb):
        for b in range(wb):
            for c in range(m):
                cols[idx[a, b], c * hb * wb + a * wb + b] = comps[:, c]
    return Basis(cols, eigenvalues=w, degenerate=degenerate)


patch_pca_chain = patch_pca_basis


def rmsd_per_dim(data, basis, chunk: int = 4096) -> float:
    """Root mean squared distance from ``basis`` divided by ``sqrt(d - n)``."""
    data = np.asarray(data)
    if data.ndim != 2 or data.shape[1] != basis.d:
        raise ValueError(f"data must have shape (N, {basis.d})")
    if basis.n >= basis.d:
        raise ValueError("rmsd per dim is undefined for n = d")
    if data.shape[0] == 0:
        raise ValueError("empty data")
    mean = getattr(basis, "mean", None)
    total = 0.0
    for start in range(0, data.shape[0], chunk):
        x = np.asarray(data[start:start + chunk], dtype=np.float64)
        if mean is not None:
            x = x - mean
        r = x - basis.lift(basis.coords(x))
        total += float(np.sum(r * r))
    return float(np.sqrt(total / data.shape[0]) / np.sqrt(basis.d - basis.n))
