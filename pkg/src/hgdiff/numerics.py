"""Numeric substrate: CSR sparse matrices, seeded sampling, Adam, gradient checking.

Everything runs in float64. Randomness flows through counter-based Philox
streams so any result is reproducible from (seed, call sequence) alone, and
every hand-derived gradient in the toolkit is certified against central
finite differences via :func:`grad_check`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class GradCheckError(RuntimeError):
    """A finite-difference probe evaluated to a non-finite value."""


def as_matrix(a, name="matrix"):
    """Coerce to a 2-d float64 array, rejecting anything else."""
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {out.shape}")
    return out


@dataclass
class CsrMatrix:
    """Sparse matrix in compressed-row form.

    Invariants: row_offsets is nondecreasing with length rows+1, column
    indices are strictly increasing within each row, and all values are
    finite. Construct through :meth:`from_coo` or :meth:`identity` unless
    you already have valid CSR arrays.
    """

    rows: int
    cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.row_offsets = np.asarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(self.col_indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.validate()

    def validate(self):
        if self.rows < 0 or self.cols < 0:
            raise ShapeError("negative matrix dimensions")
        if self.row_offsets.shape != (self.rows + 1,):
            raise ShapeError("row_offsets must have length rows+1")
        if self.row_offsets[0] != 0 or self.row_offsets[-1] != self.col_indices.size:
            raise ShapeError("row_offsets must start at 0 and end at nnz")
        if np.any(np.diff(self.row_offsets) < 0):
            raise ShapeError("row_offsets must be nondecreasing")
        if self.col_indices.size != self.values.size:
            raise ShapeError("col_indices and values must have the same length")
        if self.col_indices.size:
            if self.col_indices.min() < 0 or self.col_indices.max() >= self.cols:
                raise ShapeError("column index out of range")
            for r in range(self.rows):
                lo, hi = self.row_offsets[r], self.row_offsets[r + 1]
                if hi - lo > 1 and np.any(np.diff(self.col_indices[lo:hi]) <= 0):
                    raise ShapeError(f"column indices not strictly increasing in row {r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sparse values must be finite")

    @property
    def nnz(self):
        return int(self.values.size)

    @classmethod
    def from_coo(cls, rows, cols, row_idx, col_idx, values):
        """Build CSR from coordinate triplets; duplicate entries are summed."""
        row_idx = np.asarray(row_idx, dtype=np.int64)
        col_idx = np.asarray(col_idx, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if not (row_idx.shape == col_idx.shape == values.shape):
            raise ShapeError("coordinate arrays must share one length")
        if row_idx.size:
            if row_idx.min() < 0 or row_idx.max() >= rows:
                raise ShapeError("row index out of range")
            if col_idx.min() < 0 or col_idx.max() >= cols:
                raise ShapeError("column index out of range")
            order = np.lexsort((col_idx, row_idx))
            row_idx, col_idx, values = row_idx[order], col_idx[order], values[order]
            keys = row_idx * cols + col_idx
            first = np.ones(keys.size, dtype=bool)
            first[1:] = keys[1:] != keys[:-1]
            starts = np.flatnonzero(first)
            values = np.add.reduceat(values, starts)
            row_idx, col_idx = row_idx[starts], col_idx[starts]
        counts = np.bincount(row_idx, minlength=rows)
        offsets = np.zeros(rows + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return cls(rows, cols, offsets, col_idx, values)

    @classmethod
    def identity(cls, n):
        idx = np.arange(n, dtype=np.int64)
        return cls(n, n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n))

    def to_dense(self):
        out = np.zeros((self.rows, self.cols))
        row_of = np.repeat(np.arange(self.rows), np.diff(self.row_offsets))
        out[row_of, self.col_indices] = self.values
        return out

    def transpose(self):
        row_of = np.repeat(np.arange(self.rows, dtype=np.int64), np.diff(self.row_offsets))
        return CsrMatrix.from_coo(self.cols, self.rows, self.col_indices, row_of, self.values)

    def transpose_cached(self):
        """Transpose memoized on the instance; safe because values are
        immutable by convention after construction."""
        cached = getattr(self, "_transpose", None)
        if cached is None:
            cached = self.transpose()
            self._transpose = cached
        return cached

    def row_sums(self):
        sums = np.zeros(self.rows)
        counts = np.diff(self.row_offsets)
        nz = np.flatnonzero(counts)
        if nz.size:
            sums[nz] = np.add.reduceat(self.values, self.row_offsets[nz])
        return sums

    def scale_rows_cols(self, row_scale, col_scale):
        """New matrix with entry (i,j) multiplied by row_scale[i]*col_scale[j]."""
        row_of = np.repeat(np.arange(self.rows), np.diff(self.row_offsets))
        vals = self.values * row_scale[row_of] * col_scale[self.col_indices]
        return CsrMatrix(self.rows, self.cols, self.row_offsets.copy(),
                         self.col_indices.copy(), vals)


def spmm(a: CsrMatrix, b) -> np.ndarray:
    """Sparse @ dense product. Segment sums run in fixed row order, so the
    result is identical however the call is scheduled."""
    b = as_matrix(b, "dense operand")
    if a.cols != b.shape[0]:
        raise ShapeError(f"spmm shape mismatch: {a.rows}x{a.cols} @ {b.shape}")
    out = np.zeros((a.rows, b.shape[1]))
    if a.nnz == 0:
        return out
    contrib = b[a.col_indices]
    contrib *= a.values[:, None]
    counts = np.diff(a.row_offsets)
    nz = np.flatnonzero(counts)
    out[nz] = np.add.reduceat(contrib, a.row_offsets[nz], axis=0)
    return out


_STREAM_SALT = b"hgdiff-stream"


def _label_key(label: str) -> int:
    digest = hashlib.sha256(_STREAM_SALT + label.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


class Rng:
    """Seeded random stream backed by the counter-based Philox 4x64 generator.

    Identical (seed, derivation path, call sequence) gives bit-identical
    samples on any platform. `derive` forks a statistically independent
    stream keyed by a label, so unrelated consumers never share state.
    """

    def __init__(self, seed, _path=()):
        self.seed = int(seed)
        self._path = tuple(int(k) for k in _path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def derive(self, label: str) -> "Rng":
        return Rng(self.seed, self._path + (_label_key(label),))

    def normal(self, rows, cols):
        if rows <= 0 or cols <= 0:
            raise ShapeError(f"gaussian sample needs positive shape, got {rows}x{cols}")
        return self._gen.standard_normal((rows, cols))

    def standard_normal(self, shape):
        return self._gen.standard_normal(shape)

    def uniform(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)


def gaussian_like(rng: Rng, rows, cols) -> np.ndarray:
    """Fresh rows x cols matrix of i.i.d. standard normal draws."""
    return rng.normal(rows, cols)


@dataclass
class AdamState:
    """Moment accumulators for one parameter array."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        param = np.asarray(param)
        return cls(np.zeros_like(param, dtype=np.float64),
                   np.zeros_like(param, dtype=np.float64),
                   0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, param, grad):
    """Bias-corrected Adam update applied to `param` in place."""
    param = np.asarray(param)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise ShapeError(f"param {param.shape} vs grad {grad.shape}")
    if state.m.shape != param.shape:
        raise ShapeError(f"optimizer state {state.m.shape} vs param {param.shape}")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param


def grad_check(f, analytic_grad, point, h=1e-5):
    """Max relative disagreement between an analytic gradient and central
    finite differences of `f` around `point`.

    Error per coordinate is |analytic - fd| / max(1, |fd|); non-finite probe
    values raise GradCheckError rather than being skipped.
    """
    x0 = np.asarray(point, dtype=np.float64)
    g = np.asarray(analytic_grad, dtype=np.float64)
    if g.shape != x0.shape:
        raise ShapeError(f"gradient {g.shape} vs point {x0.shape}")
    worst = 0.0
    flat0 = x0.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat0.size):
        for sign in (+1.0, -1.0):
            probe = x0.copy()
            probe.reshape(-1)[i] += sign * h
            val = float(f(probe))
            if not np.isfinite(val):
                raise GradCheckError(f"non-finite value {val} probing coordinate {i}")
            if sign > 0:
                f_plus = val
            else:
                f_minus = val
        fd = (f_plus - f_minus) / (2.0 * h)
        err = abs(gflat[i] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst
