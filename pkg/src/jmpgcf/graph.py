"""Joined bipartite adjacency and popularity-scaled propagation matrices.

Users occupy rows ``0..m-1`` of the joined node space and items rows
``m..m+n-1``.  The propagation matrix at popularity granularity ``k``
rescales the right-hand degree normalization so that high-degree
(popular) columns contribute more:

    norm_adj_k[i][j] = (d_i+1)^{-1/2} * (A+I)[i][j] * (d_j+1)^{-1/2 + k*unit}

Granularity 0 is the standard symmetric normalization.  All matrices are
row-sorted CSR; multiplies go through scipy.sparse, with a row-parallel
JIT kernel for large operands that reproduces the same bits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import InteractionDataset

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _HAVE_NUMBA = False

__all__ = [
    "GraphConfigError",
    "PopularityConfig",
    "SparseMatrix",
    "build_adjacency",
    "build_normalized_adjacency",
    "degrees",
    "set_parallel_workers",
    "spmm",
    "transpose",
    "write_coordinate_text",
]

# below this many multiply-adds the JIT kernel is not worth dispatching
_KERNEL_MIN_WORK = 1 << 20

if _HAVE_NUMBA:

    @numba.njit(parallel=True, cache=True)
    def _csr_matmul(row_offsets, col_indices, values, dense, out):
        # each output row is written by exactly one worker; accumulation
        # order within a row matches the scipy fallback bit for bit
        width = dense.shape[1]
        for i in numba.prange(row_offsets.shape[0] - 1):
            acc = out[i]
            for jj in range(row_offsets[i], row_offsets[i + 1]):
                value = values[jj]
                source = dense[col_indices[jj]]
                for d in range(width):
                    acc[d] += value * source[d]


def set_parallel_workers(workers: int):
    """Cap the row-parallelism of the multiply kernel (0 = all cores).

    The kernel partitions output rows, so results are bit-identical for
    every worker count.
    """
    if _HAVE_NUMBA and workers > 0:
        numba.set_num_threads(min(workers, numba.config.NUMBA_NUM_THREADS))


class GraphConfigError(ValueError):
    """Raised for invalid popularity/granularity configuration."""


@dataclass(frozen=True)
class PopularityConfig:
    """Granularity ladder for popularity-scaled normalization.

    ``granularity_unit`` is the smallest exponent step; granularity k
    shifts the column exponent by ``k * granularity_unit``.  The ladder
    is capped so the column exponent stays below +1/2, which keeps the
    normalization from degenerating on high-degree nodes.
    """

    granularity_unit: float = 0.1
    max_granularity: int = 2
    granularity_weights: tuple[float, ...] = None  # defaults to all ones

    def __post_init__(self):
        if self.granularity_unit <= 0:
            raise GraphConfigError(f"granularity_unit must be > 0, got {self.granularity_unit}")
        if self.max_granularity < 0:
            raise GraphConfigError(f"max_granularity must be >= 0, got {self.max_granularity}")
        if -0.5 + self.max_granularity * self.granularity_unit >= 0.5:
            raise GraphConfigError(
                "max_granularity * granularity_unit must stay below 1 "
                f"(got {self.max_granularity} * {self.granularity_unit})"
            )
        if self.granularity_weights is None:
            object.__setattr__(
                self, "granularity_weights", (1.0,) * (self.max_granularity + 1)
            )
        else:
            object.__setattr__(
                self, "granularity_weights", tuple(float(w) for w in self.granularity_weights)
            )
        if len(self.granularity_weights) != self.max_granularity + 1:
            raise GraphConfigError(
                f"expected {self.max_granularity + 1} granularity weights, "
                f"got {len(self.granularity_weights)}"
            )
        if any(w <= 0 for w in self.granularity_weights):
            raise GraphConfigError("granularity weights must be > 0")

    @property
    def num_granularities(self) -> int:
        return self.max_granularity + 1

    def column_exponent(self, k: int) -> float:
        return -0.5 + k * self.granularity_unit


@dataclass(eq=False)
class SparseMatrix:
    """CSR matrix over the joined (user+item) node space.

    ``row_offsets`` has length ``num_rows + 1`` and is nondecreasing;
    column indices are strictly increasing within each row; all stored
    values are finite.
    """

    num_rows: int
    num_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    _csr: sp.csr_matrix = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.row_offsets = np.asarray(self.row_offsets)
        self.col_indices = np.asarray(self.col_indices)
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def shape(self):
        return (self.num_rows, self.num_cols)

    def validate(self):
        """Check the CSR invariants; raises ValueError on violation."""
        if len(self.row_offsets) != self.num_rows + 1:
            raise ValueError("row_offsets length must be num_rows + 1")
        if self.row_offsets[0] != 0 or self.row_offsets[-1] != self.nnz:
            raise ValueError("row_offsets must start at 0 and end at nnz")
        if np.any(np.diff(self.row_offsets) < 0):
            raise ValueError("row_offsets must be nondecreasing")
        for r in range(self.num_rows):
            cols = self.col_indices[self.row_offsets[r]:self.row_offsets[r + 1]]
            if cols.size and (np.any(np.diff(cols) <= 0) or cols[0] < 0 or cols[-1] >= self.num_cols):
                raise ValueError(f"row {r}: column indices not strictly increasing in range")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values must be finite")

    def to_scipy(self) -> sp.csr_matrix:
        """Zero-copy scipy view (cached)."""
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.values, self.col_indices, self.row_offsets), shape=self.shape
            )
        return self._csr

    @staticmethod
    def from_scipy(mat) -> "SparseMatrix":
        csr = mat.tocsr()
        csr.sort_indices()
        return SparseMatrix(
            num_rows=csr.shape[0],
            num_cols=csr.shape[1],
            row_offsets=csr.indptr,
            col_indices=csr.indices,
            values=np.asarray(csr.data, dtype=np.float64),
            _csr=None,
        )

    def toarray(self) -> np.ndarray:
        return self.to_scipy().toarray()


def build_adjacency(ds: InteractionDataset) -> SparseMatrix:
    """Symmetric (m+n)-square 0/1 adjacency of the interaction graph.

    No self-loops are stored; those are added during normalization.
    """
    m, n = ds.num_users, ds.num_items
    nv = m + n
    lengths = np.array([len(items) for items in ds.train], dtype=np.int64)
    users = np.repeat(np.arange(m, dtype=np.int64), lengths)
    items = (np.concatenate(ds.train) if ds.num_train_interactions else np.empty(0, np.int64)) + m
    rows = np.concatenate([users, items])
    cols = np.concatenate([items, users])
    coo = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nv, nv))
    return SparseMatrix.from_scipy(coo)


def degrees(adjacency: SparseMatrix) -> np.ndarray:
    """Row degrees (row sums) of the stored adjacency."""
    return np.asarray(adjacency.to_scipy().sum(axis=1)).ravel()


def build_normalized_adjacency(
    adjacency: SparseMatrix, k: int, cfg: PopularityConfig
) -> SparseMatrix:
    """Popularity-scaled normalized adjacency at granularity ``k``.

    Self-loops are added to every node before scaling, so the result has
    a strictly positive entry on the whole diagonal.  The exponents are
    evaluated as exp(e * ln(d+1)) in double precision.
    """
    if not 0 <= k <= cfg.max_granularity:
        raise GraphConfigError(
            f"granularity {k} outside [0, {cfg.max_granularity}]"
        )
    if adjacency.num_rows != adjacency.num_cols:
        raise ValueError("adjacency must be square")
    nv = adjacency.num_rows
    deg = degrees(adjacency)
    log_d1 = np.log(deg + 1.0)
    left = np.exp(-0.5 * log_d1)
    right = np.exp(cfg.column_exponent(k) * log_d1)
    with_loops = adjacency.to_scipy() + sp.identity(nv, format="csr")
    with_loops.sort_indices()
    out = with_loops.copy()
    out.data = out.data * np.repeat(left, np.diff(out.indptr)) * right[out.indices]
    return SparseMatrix.from_scipy(out)


def spmm(matrix: SparseMatrix, dense: np.ndarray) -> np.ndarray:
    """Sparse @ dense product; row i of the result is sum_j M[i,j] * X[j]."""
    dense = np.asarray(dense, dtype=np.float64)
    if matrix.num_cols != dense.shape[0]:
        raise ValueError(
            f"dimension mismatch: matrix is {matrix.shape}, dense has {dense.shape[0]} rows"
        )
    if (
        _HAVE_NUMBA
        and dense.ndim == 2
        and matrix.nnz * dense.shape[1] >= _KERNEL_MIN_WORK
    ):
        out = np.zeros((matrix.num_rows, dense.shape[1]))
        _csr_matmul(
            matrix.row_offsets,
            matrix.col_indices,
            matrix.values,
            np.ascontiguousarray(dense),
            out,
        )
        return out
    return np.asarray(matrix.to_scipy() @ dense)


def transpose(matrix: SparseMatrix) -> SparseMatrix:
    return SparseMatrix.from_scipy(matrix.to_scipy().transpose())


def write_coordinate_text(matrix: SparseMatrix, path):
    """Debug dump, one ``row col value`` line per stored entry."""
    coo = matrix.to_scipy().tocoo()
    with open(path, "w", encoding="ascii") as fh:
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {float(v)!r}\n")
