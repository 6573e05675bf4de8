"""Selection of the propagation depths used for scoring.

Odd hops from a user reach item nodes, even hops reach user nodes.  For
a sample of users the mean fraction of the opposite-type (odd) or
same-type (even) node space reachable at exactly each hop is measured,
and the first odd and first even hop whose mean coverage reaches the
threshold are selected.  Hops advance by +2 within each parity so every
odd/even depth is considered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import InteractionDataset
from .graph import build_adjacency

__all__ = [
    "LayerSelectionConfig",
    "LayerSelectionError",
    "SelectedLayers",
    "count_k_hop_neighbors",
    "hop_coverages",
    "select_layers",
]


@dataclass(frozen=True)
class LayerSelectionConfig:
    alpha: float = 0.5
    sample_size: int = 100
    max_hops: int = 20
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.sample_size < 1:
            raise ValueError("sample_size must be >= 1")
        if self.max_hops < 2:
            raise ValueError("max_hops must be >= 2")


@dataclass(frozen=True)
class SelectedLayers:
    l_odd: int
    l_even: int

    def __post_init__(self):
        if self.l_odd < 1 or self.l_odd % 2 == 0:
            raise ValueError(f"l_odd must be a positive odd layer, got {self.l_odd}")
        if self.l_even < 1 or self.l_even % 2 == 1:
            raise ValueError(f"l_even must be a positive even layer, got {self.l_even}")

    @property
    def depth(self) -> int:
        return max(self.l_odd, self.l_even)


class LayerSelectionError(RuntimeError):
    """No hop within the cap reached the coverage threshold."""

    def __init__(self, message, odd_coverage, even_coverage):
        super().__init__(message)
        self.odd_coverage = dict(odd_coverage)
        self.even_coverage = dict(even_coverage)


def _bfs_level_sizes(indptr, indices, source, max_depth):
    """Sizes of the breadth-first frontiers at depths 1..max_depth.

    Level-synchronous BFS with vectorized neighbor gathering; the size
    of the depth-h frontier is the number of nodes at shortest-path
    distance exactly h from the source.
    """
    num_nodes = len(indptr) - 1
    seen = np.zeros(num_nodes, dtype=bool)
    seen[source] = True
    frontier = np.array([source], dtype=np.int64)
    sizes = np.zeros(max_depth, dtype=np.int64)
    for depth in range(max_depth):
        if frontier.size == 0:
            break
        starts = indptr[frontier]
        lengths = indptr[frontier + 1] - starts
        total = int(lengths.sum())
        if total == 0:
            break
        # gather indices[starts[i] : starts[i]+lengths[i]] for all i at once
        local = np.arange(total) - np.repeat(np.cumsum(lengths) - lengths, lengths)
        neighbors = indices[np.repeat(starts, lengths) + local]
        fresh = np.unique(neighbors[~seen[neighbors]])
        seen[fresh] = True
        sizes[depth] = fresh.size
        frontier = fresh
    return sizes


def _joined_csr(ds: InteractionDataset):
    adjacency = build_adjacency(ds)
    return adjacency.row_offsets, adjacency.col_indices.astype(np.int64, copy=False)


def count_k_hop_neighbors(ds: InteractionDataset, u: int, hop: int) -> int:
    """Number of nodes at shortest-path distance exactly ``hop`` from user ``u``.

    Item nodes when ``hop`` is odd, user nodes when even; an isolated
    user yields 0 for every hop.
    """
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    if not 0 <= u < ds.num_users:
        raise IndexError(f"user index {u} out of range")
    indptr, indices = _joined_csr(ds)
    return int(_bfs_level_sizes(indptr, indices, u, hop)[hop - 1])


def _sample_users(ds, cfg):
    rng = np.random.default_rng(cfg.seed)
    if ds.num_users <= cfg.sample_size:
        return np.arange(ds.num_users)
    return rng.choice(ds.num_users, size=cfg.sample_size, replace=False)


def hop_coverages(ds: InteractionDataset, cfg: LayerSelectionConfig):
    """Mean per-hop coverage over the sampled users.

    Returns ``(odd, even)`` dicts mapping hop to the mean fraction of
    the item space (odd hops) or user space (even hops) at exactly that
    distance.
    """
    if ds.num_users == 0 or ds.num_items == 0:
        raise ValueError("dataset must contain at least one user and one item")
    indptr, indices = _joined_csr(ds)
    sampled = _sample_users(ds, cfg)
    totals = np.zeros(cfg.max_hops, dtype=np.int64)
    for u in sampled:
        totals += _bfs_level_sizes(indptr, indices, int(u), cfg.max_hops)
    odd, even = {}, {}
    for hop in range(1, cfg.max_hops + 1):
        space = ds.num_items if hop % 2 == 1 else ds.num_users
        coverage = totals[hop - 1] / space / len(sampled)
        (odd if hop % 2 == 1 else even)[hop] = float(coverage)
    return odd, even


def select_layers(
    ds: InteractionDataset, cfg: LayerSelectionConfig, coverages=None
) -> SelectedLayers:
    """First odd and first even hop whose mean coverage reaches ``alpha``.

    ``coverages`` may pass precomputed :func:`hop_coverages` output to
    avoid rescanning.
    """
    odd, even = coverages if coverages is not None else hop_coverages(ds, cfg)
    l_odd = next((h for h in sorted(odd) if odd[h] >= cfg.alpha), None)
    l_even = next((h for h in sorted(even) if even[h] >= cfg.alpha), None)
    if l_odd is None or l_even is None:
        missing = " and ".join(
            name for name, found in (("odd", l_odd), ("even", l_even)) if found is None
        )
        raise LayerSelectionError(
            f"no {missing} hop <= {cfg.max_hops} reached coverage {cfg.alpha}; "
            f"best odd {max(odd.values()):.4f}, best even {max(even.values()):.4f}",
            odd,
            even,
        )
    return SelectedLayers(l_odd=l_odd, l_even=l_even)
