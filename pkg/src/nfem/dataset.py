"""Force/displacement sample sets in grid layout: generation, noise, splits."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .materials import Material
from .mesh import GridMesh
from .solver import FemError, NewtonOptions, assemble_system, newton_solve

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSpec:
    """Multiplicative displacement-noise record: applied below ``threshold`` N."""

    threshold: float
    level: float


@dataclass
class SampleSet:
    """Paired nodal force/displacement fields in grid layout, channels last.

    ``f`` and ``u`` have shape (N, n_x, n_y[, n_z], dim); entries at void
    (padded) nodes are exactly zero. ``seed`` reproduces the set bitwise.
    """

    problem_id: str
    grid_shape: tuple[int, ...]
    dim: int
    f: np.ndarray
    u: np.ndarray
    force_range: tuple[float, float]
    seed: int
    noise_spec: NoiseSpec | None = None
    redraws: int = 0  # solver redraw counter, not persisted

    def __post_init__(self):
        expect = (self.count, *self.grid_shape, self.dim)
        if self.f.shape != expect or self.u.shape != expect:
            raise ValueError(f"sample arrays must have shape {expect}")

    @property
    def count(self) -> int:
        return int(self.f.shape[0])

    @property
    def samples(self):
        return zip(self.f, self.u)

    def excited_nodes(self) -> np.ndarray:
        """Raster index of the loaded node per sample (-1 when f == 0)."""
        mag = np.linalg.norm(self.f.reshape(self.count, -1, self.dim), axis=2)
        idx = mag.argmax(axis=1)
        idx[mag.max(axis=1) == 0.0] = -1
        return idx

    def excited_magnitudes(self) -> np.ndarray:
        """Force vector magnitude at the loaded node per sample."""
        mag = np.linalg.norm(self.f.reshape(self.count, -1, self.dim), axis=2)
        return mag.max(axis=1)


def generate_load_case(mesh: GridMesh, force_range: tuple[float, float],
                       rng: np.random.Generator) -> np.ndarray:
    """Single-node random point load as a compact DOF vector.

    One node is drawn uniformly from the loadable set; every force component
    at that node is drawn uniformly from ``force_range``. All other entries
    are zero.
    """
    if mesh.load_nodes.size == 0:
        raise ValueError("mesh has no loadable nodes")
    lo, hi = force_range
    node = int(mesh.load_nodes[rng.integers(mesh.load_nodes.size)])
    f = np.zeros(mesh.n_dof)
    pos = mesh.active_pos[node]
    f[pos * mesh.dim: pos * mesh.dim + mesh.dim] = rng.uniform(lo, hi, size=mesh.dim)
    return f


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("NFEM_THREADS", "1")))
    except ValueError:
        return 1


def generate_dataset(
    mesh: GridMesh,
    mat: Material,
    count: int,
    force_range: tuple[float, float],
    seed: int,
    problem_id: str = "",
    newton_opts: NewtonOptions | None = None,
    max_redraw_fraction: float = 0.2,
) -> SampleSet:
    """Solve ``count`` random single-node load cases and stack them grid-wise.

    Non-converged cases are redrawn (new node and force from the same RNG
    stream) and counted; generation aborts once redraws exceed
    ``max_redraw_fraction * count``. Output is bitwise reproducible for a
    fixed seed regardless of the worker count.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    cases = [generate_load_case(mesh, force_range, rng) for _ in range(count)]

    def solve(f):
        try:
            return newton_solve(mesh, mat, f, newton_opts).u
        except FemError:
            return None

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(solve, cases))
    else:
        results = [solve(f) for f in cases]

    redraws = 0
    max_redraws = max_redraw_fraction * count
    for i in range(count):
        while results[i] is None:
            redraws += 1
            if redraws > max_redraws:
                raise RuntimeError(
                    f"redraw rate exceeded {max_redraw_fraction:.0%} "
                    f"({redraws} redraws for {count} samples)"
                )
            cases[i] = generate_load_case(mesh, force_range, rng)
            results[i] = solve(cases[i])
    if redraws:
        log.info("dataset generation redrew %d of %d cases", redraws, count)

    f_grid = np.stack([mesh.embed(f) for f in cases])
    u_grid = np.stack([mesh.embed(u) for u in results])
    return SampleSet(problem_id, mesh.grid_shape, mesh.dim, f_grid, u_grid,
                     (float(force_range[0]), float(force_range[1])), int(seed),
                     redraws=redraws)


def split_dataset(samples: SampleSet, test_fraction: float, seed: int
                  ) -> tuple[SampleSet, SampleSet]:
    """Random partition into (train, test); sizes round to the nearest split."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    n = samples.count
    n_test = int(round(n * test_fraction))
    n_test = min(max(n_test, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    log.info("split %d samples into %d train / %d test", n, train_idx.size, test_idx.size)

    def take(idx):
        return replace(samples, f=samples.f[idx].copy(), u=samples.u[idx].copy())

    return take(train_idx), take(test_idx)


def inject_noise(samples: SampleSet, threshold: float, level: float, seed: int) -> SampleSet:
    """Corrupt displacements of weakly loaded samples with multiplicative noise.

    Samples whose excited-node force magnitude is below ``threshold`` get
    every displacement DOF scaled by (1 + eta), eta ~ N(0, level^2); the
    rest pass through untouched.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("noise level must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    u = samples.u.copy()
    noisy = samples.excited_magnitudes() < threshold
    for i in np.flatnonzero(noisy):
        eta = rng.standard_normal(u[i].shape) * level
        u[i] = u[i] * (1.0 + eta)
    return replace(samples, u=u, noise_spec=NoiseSpec(float(threshold), float(level)))


def embed_lshape(mesh: GridMesh, f_active: np.ndarray, u_active: np.ndarray,
                 problem_id: str = "lshape2d", force_range: tuple[float, float] = (0.0, 0.0),
                 seed: int = 0) -> SampleSet:
    """Pad active-node sample arrays (N, n_active, dim) onto the bounding grid.

    Void nodes receive zero force and displacement; the active -> raster
    mapping is ``mesh.active_nodes`` and is invertible via
    :func:`extract_lshape`.
    """
    f_active = np.asarray(f_active, dtype=np.float64)
    u_active = np.asarray(u_active, dtype=np.float64)
    expect = (mesh.n_active, mesh.dim)
    if f_active.shape[1:] != expect or u_active.shape[1:] != expect:
        raise ValueError(f"active-node arrays must have trailing shape {expect}")
    f = np.stack([mesh.embed(s.reshape(-1)) for s in f_active])
    u = np.stack([mesh.embed(s.reshape(-1)) for s in u_active])
    return SampleSet(problem_id, mesh.grid_shape, mesh.dim, f, u,
                     force_range, seed)


def extract_lshape(mesh: GridMesh, samples: SampleSet) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`embed_lshape`: grid samples -> (N, n_active, dim) pairs."""
    f = np.stack([mesh.extract(g).reshape(mesh.n_active, mesh.dim) for g in samples.f])
    u = np.stack([mesh.extract(g).reshape(mesh.n_active, mesh.dim) for g in samples.u])
    return f, u


def audit_residuals(mesh: GridMesh, mat: Material, samples: SampleSet,
                    fraction: float = 0.01, seed: int = 0) -> float:
    """Max relative equilibrium residual over a random audit of stored samples.

    Re-assembles f_int(u) - f for each audited pair; stored solutions must
    satisfy the solver tolerance, so values stay below 1e-6 relative.
    """
    n_audit = max(1, int(round(samples.count * fraction)))
    idx = np.random.default_rng(seed).choice(samples.count, size=n_audit, replace=False)
    worst = 0.0
    for i in idx:
        f = mesh.extract(samples.f[i])
        u = mesh.extract(samples.u[i])
        R, _ = assemble_system(mesh, u, mat, f_ext=f, tangent=False)
        worst = max(worst, float(np.abs(R).max()) / max(1.0, float(np.abs(f).max())))
    return worst
