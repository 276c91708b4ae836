"""Spatial transforms: surface Laplacian, CSP and the electrode grid."""

import struct
from dataclasses import dataclass, field

import numpy as np

from erp_forge.errors import MissingClass, ShapeMismatch, SingularCovariance

BIOSEMI32 = (
    "Fp1", "AF3", "F7", "F3", "FC1", "FC5", "T7", "C3",
    "CP1", "CP5", "P7", "P3", "Pz", "PO3", "O1", "Oz",
    "O2", "PO4", "P4", "P8", "CP6", "CP2", "C4", "T8",
    "FC6", "FC2", "F4", "F8", "AF4", "Fp2", "Fz", "Cz",
)

EMPTY = None

DEFAULT_LAYOUT = (
    ("F7", "F3", "Fz", "F4", "F8"),
    ("FC5", "FC1", EMPTY, "FC2", "FC6"),
    ("T7", "C3", "Cz", "C4", "T8"),
    ("CP5", "CP1", EMPTY, "CP2", "CP6"),
    ("P7", "P3", "Pz", "P4", "P8"),
    (EMPTY, "PO3", EMPTY, "PO4", EMPTY),
    (EMPTY, "O1", "Oz", "O2", EMPTY),
)


@dataclass(frozen=True)
class ElectrodeGrid:
    """Rectangular scalp layout. Cells hold an electrode name or ``None``."""

    cells: tuple
    channels: tuple = BIOSEMI32
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cells = tuple(tuple(row) for row in self.cells)
        if not cells or len({len(r) for r in cells}) != 1:
            raise ValueError("grid rows must be non-empty and of equal length")
        object.__setattr__(self, "cells", cells)
        lookup = {name: i for i, name in enumerate(self.channels)}
        index = {}
        for r, row in enumerate(cells):
            for c, name in enumerate(row):
                if name is EMPTY:
                    continue
                if name not in lookup:
                    raise ValueError(f"grid electrode {name!r} is not a recording channel")
                if name in index.values():
                    raise ValueError(f"electrode {name!r} appears twice in the grid")
                index[(r, c)] = name
        object.__setattr__(self, "index", {rc: lookup[n] for rc, n in index.items()})

    @classmethod
    def from_rows(cls, rows, channels=BIOSEMI32):
        """Build from string rows; ``"-"`` or ``""`` marks an empty cell."""
        return cls(tuple(tuple(None if n in ("-", "", None) else n for n in row) for row in rows), tuple(channels))

    @property
    def rows(self):
        return len(self.cells)

    @property
    def cols(self):
        return len(self.cells[0])

    @property
    def n_cells(self):
        return self.rows * self.cols

    def assigned(self, r, c):
        return (r, c) in self.index

    def neighbours(self, r, c):
        """Assigned rook neighbours of a cell as (row, col) pairs."""
        out = []
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rc = (r + dr, c + dc)
            if rc in self.index:
                out.append(rc)
        return out

    def unmapped_channels(self):
        used = set(self.index.values())
        return [i for i in range(len(self.channels)) if i not in used]

    def to_rows(self):
        return [["-" if n is None else n for n in row] for row in self.cells]


DEFAULT_GRID = ElectrodeGrid(DEFAULT_LAYOUT)


def laplacian_matrix(grid=DEFAULT_GRID):
    """Linear operator ``L`` with ``laplacian(x) = L @ x``."""
    n = len(grid.channels)
    lap = np.eye(n)
    for (r, c), ch in grid.index.items():
        nb = grid.neighbours(r, c)
        for rc in nb:
            lap[ch, grid.index[rc]] -= 1.0 / len(nb)
    return lap


def laplacian_apply(trial, grid=DEFAULT_GRID):
    """Rook-neighbour surface Laplacian over channels (axis -2).

    Channels outside the grid pass through unchanged.
    """
    x = np.asarray(trial)
    if x.shape[-2] != len(grid.channels):
        raise ShapeMismatch(f"expected {len(grid.channels)} channels, got {x.shape[-2]}")
    return np.matmul(laplacian_matrix(grid).astype(x.dtype, copy=False), x)


def interpolation_matrix(grid=DEFAULT_GRID):
    """``(rows*cols, channels)`` map from channels to row-major grid cells."""
    g = np.zeros((grid.n_cells, len(grid.channels)))
    for r in range(grid.rows):
        for c in range(grid.cols):
            k = r * grid.cols + c
            if grid.assigned(r, c):
                g[k, grid.index[(r, c)]] = 1.0
                continue
            nb = grid.neighbours(r, c)
            if not nb:
                raise ValueError(f"empty cell ({r}, {c}) has no assigned neighbour")
            for rc in nb:
                g[k, grid.index[rc]] += 1.0 / len(nb)
    return g


def grid_map_interpolate(trial, grid=DEFAULT_GRID):
    """Channels ``(..., C, T)`` to grid ``(..., rows, cols, T)``.

    Empty cells take the mean of their assigned rook neighbours.
    """
    x = np.asarray(trial)
    if x.shape[-2] != len(grid.channels):
        raise ShapeMismatch(f"expected {len(grid.channels)} channels, got {x.shape[-2]}")
    flat = np.matmul(interpolation_matrix(grid).astype(x.dtype, copy=False), x)
    return grid_unflatten(flat, grid.rows, grid.cols)


def grid_flatten(grid_tensor):
    g = np.asarray(grid_tensor)
    return g.reshape(g.shape[:-3] + (g.shape[-3] * g.shape[-2], g.shape[-1]))


def grid_unflatten(flat, rows=7, cols=5):
    f = np.asarray(flat)
    if f.shape[-2] != rows * cols:
        raise ShapeMismatch(f"{f.shape[-2]} pseudo-channels do not fill a {rows}x{cols} grid")
    return f.reshape(f.shape[:-2] + (rows, cols, f.shape[-1]))


CSP_MAGIC = b"ERPC"
CSP_VERSION = 1


@dataclass(frozen=True)
class CspModel:
    """Fitted CSP projection; ``filters`` is ``(n_components, n_channels)``."""

    filters: np.ndarray
    eigenvalues: np.ndarray

    @property
    def n_components(self):
        return self.filters.shape[0]

    @property
    def n_channels(self):
        return self.filters.shape[1]

    def to_bytes(self):
        """``b"ERPC"``, u8 version, u32 components, u32 channels, float64
        eigenvalues, float64 filters row-major; little endian."""
        k, c = self.filters.shape
        return (CSP_MAGIC + struct.pack("<B2I", CSP_VERSION, k, c)
                + np.asarray(self.eigenvalues, "<f8").tobytes()
                + np.ascontiguousarray(self.filters, "<f8").tobytes())

    @classmethod
    def from_bytes(cls, buf):
        if buf[:4] != CSP_MAGIC:
            raise ValueError("not a CSP model")
        version, k, c = struct.unpack_from("<B2I", buf, 4)
        if version != CSP_VERSION:
            raise ValueError(f"unsupported CSP model version {version}")
        pos = 13
        ev = np.frombuffer(buf, "<f8", k, pos).astype(float)
        w = np.frombuffer(buf, "<f8", k * c, pos + 8 * k).reshape(k, c).astype(float)
        return cls(w, ev)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def class_covariance(trials):
    """Mean of trace-normalised ``X X^T`` over trials ``(N, C, T)``."""
    x = np.asarray(trials, dtype=np.float64)
    cov = np.einsum("nct,ndt->ncd", x, x)
    tr = np.trace(cov, axis1=1, axis2=2)
    tr = np.where(tr > 0, tr, 1.0)
    # fixed summation order keeps the fit independent of thread count
    return (cov / tr[:, None, None]).sum(axis=0) / len(x)


def csp_decompose(cov1, cov2):
    """Solve ``cov1 w = lam (cov1 + cov2) w`` for every ``w``.

    Returns ``(eigenvalues, W)`` sorted by descending eigenvalue. Rows of
    ``W`` are normalised so that ``W (cov1 + cov2 + ridge) W^T = I``.
    """
    comp = cov1 + cov2
    n = comp.shape[0]
    ridge = 1e-10 * np.trace(comp) / n
    comp = comp + ridge * np.eye(n)
    try:
        chol = np.linalg.cholesky(comp)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("composite covariance is not positive definite") from exc
    linv = np.linalg.inv(chol)
    m = linv @ cov1 @ linv.T
    lam, vec = np.linalg.eigh((m + m.T) / 2)
    order = np.argsort(lam)[::-1]
    return lam[order], (linv.T @ vec[:, order]).T


def _fix_sign(rows):
    pick = np.argmax(np.abs(rows), axis=1)
    sign = np.sign(rows[np.arange(len(rows)), pick])
    sign[sign == 0] = 1.0
    return rows * sign[:, None]


def csp_fit(trials, labels, n_components=6):
    """Fit CSP on trials ``(N, C, T)``; label 1 is the numerator class.

    Keeps ``n_components/2`` filters from each end of the spectrum, unit
    norm rows, largest-magnitude entry positive.
    """
    if n_components < 2 or n_components % 2:
        raise ValueError("n_components must be even and >= 2")
    x = np.asarray(trials, dtype=np.float64)
    y = np.asarray(labels)
    if not (np.any(y == 1) and np.any(y == 0)):
        raise MissingClass("CSP needs trials from both classes")
    n_ch = x.shape[1]
    if n_components > n_ch:
        raise ValueError(f"{n_components} components requested from {n_ch} channels")
    lam, w = csp_decompose(class_covariance(x[y == 1]), class_covariance(x[y == 0]))
    half = n_components // 2
    keep = np.r_[0:half, n_ch - half:n_ch]
    filt = w[keep]
    filt = filt / np.linalg.norm(filt, axis=1, keepdims=True)
    return CspModel(_fix_sign(filt), lam[keep].copy())


def csp_transform(model, trial):
    """Project ``(..., C, T)`` to ``(..., n_components, T)``."""
    x = np.asarray(trial)
    if x.shape[-2] != model.n_channels:
        raise ShapeMismatch(f"model expects {model.n_channels} channels, got {x.shape[-2]}")
    return np.matmul(model.filters.astype(x.dtype, copy=False), x)
