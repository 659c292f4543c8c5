"""Node-numbering permutations for the DOF-ordering ablation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import SampleSet


@dataclass(frozen=True)
class OrderingMap:
    """Bijective map from physical node index to its slot in the data layout.

    ``preferred`` keeps the raster layout (identity); ``gmsh-like`` numbers
    corner nodes first, then boundary, then interior, mimicking a mesh
    preprocessor; ``random`` scrambles all locality.
    """

    permutation: np.ndarray
    strategy: str

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.int64)
        object.__setattr__(self, "permutation", perm)
        if not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ValueError("permutation must be a bijection on node indices")

    @classmethod
    def preferred(cls, n_nodes: int) -> "OrderingMap":
        return cls(np.arange(n_nodes), "preferred")

    @classmethod
    def random(cls, n_nodes: int, seed: int) -> "OrderingMap":
        return cls(np.random.default_rng(seed).permutation(n_nodes), f"random({seed})")

    @classmethod
    def gmsh_like(cls, grid_shape: tuple[int, ...]) -> "OrderingMap":
        idx = np.indices(grid_shape)
        extremes = sum((idx[k] == 0) | (idx[k] == grid_shape[k] - 1)
                       for k in range(len(grid_shape)))
        # Rank nodes by how many coordinates sit on the boundary: corners
        # first, then edges/faces, interior last; raster order within a rank.
        rank = (len(grid_shape) - extremes).reshape(-1)
        order = np.lexsort((np.arange(rank.size), rank))
        perm = np.empty(rank.size, dtype=np.int64)
        perm[order] = np.arange(rank.size)
        return cls(perm, "gmsh-like")

    @classmethod
    def make(cls, strategy: str, grid_shape: tuple[int, ...], seed: int = 0) -> "OrderingMap":
        n = int(np.prod(grid_shape))
        if strategy == "preferred":
            return cls.preferred(n)
        if strategy == "random":
            return cls.random(n, seed)
        if strategy in ("gmsh", "gmsh-like"):
            return cls.gmsh_like(grid_shape)
        raise ValueError(f"unknown ordering strategy {strategy!r}")

    def inverse(self) -> "OrderingMap":
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(self.permutation.size)
        return OrderingMap(inv, f"inverse({self.strategy})")


def apply_ordering(samples: SampleSet, mapping: OrderingMap) -> SampleSet:
    """Permute the node axes of f and u consistently.

    Node i's data moves to layout slot ``permutation[i]``; the grid shape is
    unchanged, only which physical node each slot holds.
    """
    n_nodes = int(np.prod(samples.grid_shape))
    if mapping.permutation.size != n_nodes:
        raise ValueError(
            f"permutation covers {mapping.permutation.size} nodes, grid has {n_nodes}"
        )

    def permute(arr):
        flat = arr.reshape(samples.count, n_nodes, samples.dim)
        out = np.empty_like(flat)
        out[:, mapping.permutation] = flat
        return out.reshape(arr.shape)

    return replace(samples, f=permute(samples.f), u=permute(samples.u))
