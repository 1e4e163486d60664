"""Linear operators, sparse matrices, random SPD generation, and matrix file I/O.

Vectors throughout the package are plain 1-d float64 numpy arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp

from .seeds import GAUSSIAN_METHOD, generator


class NotSymmetricError(ValueError):
    """Raised when an operation requires a symmetric operator."""


def as_vector(x, n: Optional[int] = None) -> np.ndarray:
    """Validate and convert to a finite 1-d float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise ValueError(f"dimension mismatch: expected length {n}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector entries must be finite")
    return v


@dataclass(frozen=True)
class SparseMatrixCSR:
    """Square sparse matrix in compressed-sparse-row form.

    Row offsets are non-decreasing and column indices strictly increase
    within each row; values are finite.
    """

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        data = np.asarray(self.data, dtype=np.float64)
        if self.n < 1:
            raise ValueError("matrix dimension must be >= 1")
        if indptr.shape != (self.n + 1,) or indptr[0] != 0 or indptr[-1] != len(data):
            raise ValueError("malformed row offsets")
        if np.any(np.diff(indptr) < 0):
            raise ValueError("row offsets must be non-decreasing")
        if len(indices) != len(data):
            raise ValueError("indices/data length mismatch")
        if len(indices) and (indices.min() < 0 or indices.max() >= self.n):
            raise ValueError("column index out of range")
        for i in range(self.n):
            cols = indices[indptr[i]:indptr[i + 1]]
            if np.any(np.diff(cols) <= 0):
                raise ValueError(f"column indices not strictly increasing in row {i}")
        if not np.all(np.isfinite(data)):
            raise ValueError("matrix values must be finite")
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "data", data)

    @property
    def nnz(self) -> int:
        return len(self.data)

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrixCSR":
        c = sp.csr_matrix(m)
        c.sum_duplicates()
        c.sort_indices()
        c.eliminate_zeros()
        if c.shape[0] != c.shape[1]:
            raise ValueError("only square matrices are supported")
        return cls(n=c.shape[0], indptr=c.indptr.astype(np.int64),
                   indices=c.indices.astype(np.int64), data=c.data.astype(np.float64))

    @classmethod
    def from_dense(cls, a) -> "SparseMatrixCSR":
        return cls.from_scipy(sp.csr_matrix(np.asarray(a, dtype=np.float64)))


@dataclass(frozen=True)
class LinearOperator:
    """A deterministic linear map x -> Ax of dimension n.

    `symmetric` asserts A == A^T; `spd_asserted` additionally asserts positive
    definiteness (trusted, checked lazily by solvers that rely on it).
    """

    n: int
    apply: Callable[[np.ndarray], np.ndarray]
    symmetric: bool = False
    spd_asserted: bool = False
    matrix: Union[np.ndarray, SparseMatrixCSR, None] = field(default=None, repr=False)

    @classmethod
    def identity(cls, n: int) -> "LinearOperator":
        return cls(n=n, apply=lambda x: x.copy(), symmetric=True, spd_asserted=True,
                   matrix=np.eye(n))

    @classmethod
    def diagonal(cls, d) -> "LinearOperator":
        d = as_vector(d)
        spd = bool(np.all(d > 0))
        return cls(n=len(d), apply=lambda x, _d=d: _d * x, symmetric=True,
                   spd_asserted=spd, matrix=np.diag(d))

    @classmethod
    def from_dense(cls, a, symmetric: Optional[bool] = None,
                   spd_asserted: bool = False) -> "LinearOperator":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("expected a square 2-d array")
        if symmetric is None:
            symmetric = bool(np.allclose(a, a.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(a).max())))
        return cls(n=a.shape[0], apply=lambda x, _a=a: _a @ x, symmetric=symmetric,
                   spd_asserted=spd_asserted, matrix=a)

    @classmethod
    def from_csr(cls, m: SparseMatrixCSR, symmetric: bool = False,
                 spd_asserted: bool = False) -> "LinearOperator":
        s = m.to_scipy()
        return cls(n=m.n, apply=lambda x, _s=s: _s @ x, symmetric=symmetric,
                   spd_asserted=spd_asserted, matrix=m)


def matvec(op: LinearOperator, x: np.ndarray) -> np.ndarray:
    """Apply the operator: returns Ax without mutating inputs."""
    if x.shape[0] != op.n:
        raise ValueError(f"dimension mismatch: operator is {op.n}, vector is {x.shape[0]}")
    return op.apply(x)


def energy_norm_sq(op: LinearOperator, x: np.ndarray) -> float:
    """x^T A x for a symmetric operator (>= 0 when A is SPD)."""
    if not op.symmetric:
        raise NotSymmetricError("energy norm requires a symmetric operator")
    return float(x @ matvec(op, x))


def to_dense(op: LinearOperator) -> np.ndarray:
    """Densify: uses the stored matrix payload when present, else probes columns."""
    if isinstance(op.matrix, np.ndarray):
        return op.matrix.copy()
    if isinstance(op.matrix, SparseMatrixCSR):
        return op.matrix.to_dense()
    cols = np.empty((op.n, op.n))
    e = np.zeros(op.n)
    for j in range(op.n):
        e[j] = 1.0
        cols[:, j] = op.apply(e)
        e[j] = 0.0
    return cols


def gen_sparse_spd(n: int, density: float, diag: float, seed: int) -> SparseMatrixCSR:
    """Random SPD matrix: A = M M^T with M sparse standard-Gaussian.

    M has i.i.d. N(0,1) entries kept independently with probability `density`
    (off-diagonal; the diagonal is then overwritten with the constant `diag`
    before forming the product, so it does not count toward the density).
    A is symmetric positive semidefinite, and positive definite whenever M is
    nonsingular.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not (0.0 <= density <= 1.0):
        raise ValueError("density must lie in [0, 1]")
    rng = generator(seed)
    mask = rng.random((n, n)) < density
    values = rng.standard_normal((n, n))
    m = np.where(mask, values, 0.0)
    np.fill_diagonal(m, diag)
    a = m @ m.T
    a = 0.5 * (a + a.T)  # enforce exact symmetry against rounding
    return SparseMatrixCSR.from_dense(a)


def spd_operator(m: SparseMatrixCSR) -> LinearOperator:
    return LinearOperator.from_csr(m, symmetric=True, spd_asserted=True)


# ---------------------------------------------------------------------------
# Matrix Market coordinate format and flat vector files
# ---------------------------------------------------------------------------

_MM_HEADER = "%%MatrixMarket matrix coordinate real general"


def write_matrix_market(m: SparseMatrixCSR, path) -> None:
    """Write in coordinate format; values at 17 significant digits round-trip."""
    coo = m.to_scipy().tocoo()
    with open(path, "w") as f:
        f.write(_MM_HEADER + "\n")
        f.write(f"{m.n} {m.n} {coo.nnz}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            f.write(f"{i + 1} {j + 1} {v:.17g}\n")


def read_matrix_market(path) -> SparseMatrixCSR:
    """Read a square real general coordinate-format file.

    Raises ValueError on a malformed header or non-numeric token; never
    returns a partial result.
    """
    with open(path) as f:
        header = f.readline().rstrip("\n")
        if header.strip() != _MM_HEADER:
            raise ValueError(f"malformed Matrix Market header: {header!r}")
        line = f.readline()
        while line.startswith("%"):
            line = f.readline()
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"malformed size line: {line!r}")
        try:
            rows, cols, nnz = (int(p) for p in parts)
        except ValueError as e:
            raise ValueError(f"non-numeric token in size line: {line!r}") from e
        if rows != cols:
            raise ValueError("only square matrices are supported")
        ii = np.empty(nnz, dtype=np.int64)
        jj = np.empty(nnz, dtype=np.int64)
        vv = np.empty(nnz, dtype=np.float64)
        for k in range(nnz):
            parts = f.readline().split()
            if len(parts) != 3:
                raise ValueError(f"malformed entry at position {k}")
            try:
                ii[k] = int(parts[0]) - 1
                jj[k] = int(parts[1]) - 1
                vv[k] = float(parts[2])
            except ValueError as e:
                raise ValueError(f"non-numeric token in entry {k}: {parts!r}") from e
        if nnz and (ii.min() < 0 or ii.max() >= rows or jj.min() < 0 or jj.max() >= cols):
            raise ValueError("coordinate out of range")
    coo = sp.coo_matrix((vv, (ii, jj)), shape=(rows, cols))
    return SparseMatrixCSR.from_scipy(coo)


def write_matrix_metadata(path, **meta) -> None:
    """JSON sidecar recording how a matrix file was produced."""
    meta.setdefault("gaussian_method", GAUSSIAN_METHOD)
    with open(str(path) + ".meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def write_vector(x: np.ndarray, path) -> None:
    """Text vector: one-line length header, then one value per line."""
    x = as_vector(x)
    with open(path, "w") as f:
        f.write(f"{len(x)}\n")
        for v in x:
            f.write(f"{v:.17g}\n")


def read_vector(path) -> np.ndarray:
    with open(path) as f:
        try:
            n = int(f.readline())
        except ValueError as e:
            raise ValueError("malformed vector length header") from e
        out = np.empty(n)
        for k in range(n):
            token = f.readline().strip()
            try:
                out[k] = float(token)
            except ValueError as e:
                raise ValueError(f"non-numeric vector entry {k}: {token!r}") from e
    return out


def cholesky_or_none(a: np.ndarray):
    """Lower Cholesky factor, or None if the matrix is not positive definite."""
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None
