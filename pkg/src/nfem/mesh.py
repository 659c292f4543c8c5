"""Structured quad/hex grid meshes with raster node numbering and boundary tags."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GridMesh:
    """Structured node grid with element connectivity and boundary tags.

    Nodes are numbered in x-major raster order: for a grid of shape
    (n_x, n_y[, n_z]) the node (ix, iy[, iz]) has index
    ``ravel_multi_index`` in C order, so a field array of shape
    (n_x, n_y[, n_z], dim) flattens to the DOF vector directly.

    ``active_mask`` is False only for void nodes of non-rectangular domains
    (the L-shape); solver vectors cover active nodes only, in raster order.
    """

    dim: int
    node_counts: tuple[int, ...]
    spacing: tuple[float, ...]
    active_mask: np.ndarray
    dirichlet_nodes: np.ndarray
    load_nodes: np.ndarray
    connectivity: np.ndarray

    coords: np.ndarray = field(init=False, repr=False)
    active_nodes: np.ndarray = field(init=False, repr=False)
    active_pos: np.ndarray = field(init=False, repr=False)
    element_dofs: np.ndarray = field(init=False, repr=False)
    element_coords: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.dim not in (2, 3) or len(self.node_counts) != self.dim:
            raise ValueError("dim must be 2 or 3 and match node_counts")
        n_grid = int(np.prod(self.node_counts))
        self.active_mask = np.asarray(self.active_mask, dtype=bool).reshape(n_grid)
        self.dirichlet_nodes = np.asarray(self.dirichlet_nodes, dtype=np.int64)
        self.load_nodes = np.asarray(self.load_nodes, dtype=np.int64)
        self.connectivity = np.asarray(self.connectivity, dtype=np.int64)

        if np.intersect1d(self.dirichlet_nodes, self.load_nodes).size:
            raise ValueError("dirichlet_nodes and load_nodes must be disjoint")
        if not self.active_mask[self.connectivity].all():
            raise ValueError("every element corner node must be active")
        if not self.active_mask[self.dirichlet_nodes].all():
            raise ValueError("dirichlet nodes must be active")
        if not self.active_mask[self.load_nodes].all():
            raise ValueError("load nodes must be active")

        idx = np.indices(self.node_counts).reshape(self.dim, n_grid).T
        self.coords = idx * np.asarray(self.spacing, dtype=np.float64)

        self.active_nodes = np.flatnonzero(self.active_mask)
        self.active_pos = np.full(n_grid, -1, dtype=np.int64)
        self.active_pos[self.active_nodes] = np.arange(self.active_nodes.size)

        compact = self.active_pos[self.connectivity]  # (E, n_en)
        dofs = compact[:, :, None] * self.dim + np.arange(self.dim)
        self.element_dofs = dofs.reshape(self.connectivity.shape[0], -1)
        self.element_coords = self.coords[self.connectivity]

    # -- sizes ---------------------------------------------------------------

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return self.node_counts

    @property
    def n_grid_nodes(self) -> int:
        return int(np.prod(self.node_counts))

    @property
    def n_active(self) -> int:
        return int(self.active_nodes.size)

    @property
    def n_dof(self) -> int:
        return self.n_active * self.dim

    @property
    def n_elements(self) -> int:
        return int(self.connectivity.shape[0])

    def node_index(self, *grid_idx: int) -> int:
        return int(np.ravel_multi_index(grid_idx, self.node_counts))

    def dirichlet_dofs(self) -> np.ndarray:
        pos = self.active_pos[self.dirichlet_nodes]
        return (pos[:, None] * self.dim + np.arange(self.dim)).reshape(-1)

    # -- grid <-> compact layout ----------------------------------------------

    def embed(self, compact: np.ndarray) -> np.ndarray:
        """Compact active-node field (n_dof,) -> grid array (*grid, dim).

        Void nodes receive exact zeros; the mapping is invertible on active
        nodes via :meth:`extract`.
        """
        compact = np.asarray(compact, dtype=np.float64)
        if compact.size != self.n_dof:
            raise ValueError(f"expected {self.n_dof} values, got {compact.size}")
        grid = np.zeros((self.n_grid_nodes, self.dim))
        grid[self.active_nodes] = compact.reshape(self.n_active, self.dim)
        return grid.reshape(*self.node_counts, self.dim)

    def extract(self, grid: np.ndarray) -> np.ndarray:
        """Grid array (*grid, dim) -> compact active-node field (n_dof,)."""
        grid = np.asarray(grid, dtype=np.float64)
        if grid.shape != (*self.node_counts, self.dim):
            raise ValueError(f"expected grid shape {(*self.node_counts, self.dim)}, got {grid.shape}")
        flat = grid.reshape(self.n_grid_nodes, self.dim)
        return flat[self.active_nodes].reshape(-1)

    @property
    def active_grid_mask(self) -> np.ndarray:
        """Per-node boolean grid (*grid,), True at active nodes."""
        return self.active_mask.reshape(self.node_counts)

    @property
    def default_sweep_node(self) -> int:
        """Far corner of the loaded region (largest raster index in load_nodes)."""
        return int(self.load_nodes.max())


def _grid_elements(node_counts, active_grid):
    """Connectivity of all cells whose corners are all active."""
    dim = len(node_counts)
    cells = np.indices([n - 1 for n in node_counts]).reshape(dim, -1).T
    if dim == 2:
        offsets = [(0, 0), (1, 0), (1, 1), (0, 1)]
    else:
        offsets = [
            (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
            (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
        ]
    conn = np.stack(
        [np.ravel_multi_index((cells + off).T, node_counts) for off in offsets], axis=1
    )
    keep = active_grid.reshape(-1)[conn].all(axis=1)
    return conn[keep]


def beam2d_mesh(
    node_counts: tuple[int, int] = (16, 4), lengths: tuple[float, float] = (4.0, 1.0)
) -> GridMesh:
    """2D cantilever beam: clamped on x = 0, point loads on the top edge."""
    nx, ny = node_counts
    spacing = (lengths[0] / (nx - 1), lengths[1] / (ny - 1))
    active = np.ones(node_counts, dtype=bool)
    ix, iy = np.indices(node_counts)
    dirichlet = np.flatnonzero((ix == 0).reshape(-1))
    loads = np.flatnonzero(((iy == ny - 1) & (ix > 0)).reshape(-1))
    return GridMesh(2, node_counts, spacing, active, dirichlet, loads,
                    _grid_elements(node_counts, active))


def beam3d_mesh(
    node_counts: tuple[int, int, int] = (28, 12, 12),
    lengths: tuple[float, float, float] = (7.0, 3.0, 3.0),
) -> GridMesh:
    """3D cantilever beam: clamped on x = 0, point loads on the top face."""
    nx, ny, nz = node_counts
    spacing = tuple(L / (n - 1) for L, n in zip(lengths, node_counts))
    active = np.ones(node_counts, dtype=bool)
    ix, iy, iz = np.indices(node_counts)
    dirichlet = np.flatnonzero((ix == 0).reshape(-1))
    loads = np.flatnonzero(((iz == nz - 1) & (ix > 0)).reshape(-1))
    return GridMesh(3, node_counts, spacing, active, dirichlet, loads,
                    _grid_elements(node_counts, active))


def lshape2d_mesh(
    node_counts: tuple[int, int] = (16, 8),
    arm_counts: tuple[int, int] = (4, 4),
    lengths: tuple[float, float] | None = None,
) -> GridMesh:
    """2D L-shape inside a bounding grid.

    The domain is the union of a horizontal arm (all of x, iy < arm_ny) and a
    vertical arm (ix < arm_nx, all of y). With the defaults that is 80 active
    nodes inside a 16x8 grid. Clamped at the free (top) end of the vertical
    arm; loads on the top edge of the horizontal arm.
    """
    nx, ny = node_counts
    arm_nx, arm_ny = arm_counts
    if not (0 < arm_nx < nx and 0 < arm_ny < ny):
        raise ValueError("arm_counts must be interior to node_counts")
    if lengths is None:
        dx = 4.0 / (nx - 1)
        lengths = (4.0, dx * (ny - 1))
    spacing = (lengths[0] / (nx - 1), lengths[1] / (ny - 1))
    ix, iy = np.indices(node_counts)
    active = (iy < arm_ny) | (ix < arm_nx)
    dirichlet = np.flatnonzero(((iy == ny - 1) & (ix < arm_nx)).reshape(-1))
    loads = np.flatnonzero(((iy == arm_ny - 1) & (ix >= arm_nx)).reshape(-1))
    return GridMesh(2, node_counts, spacing, active.reshape(-1), dirichlet, loads,
                    _grid_elements(node_counts, active))
