"""Occupancy distributions over the shelf plan and over camera-ray bins.

The 2D grid covers the shelf floor with ``nx x ny`` cells indexed
``[ix, iy]``. The 1D distribution has ``B`` bins, one per camera ray through
evenly spaced points on the shelf opening.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import TextIO

import numpy as np
from scipy.ndimage import correlate1d

from semsearch.affinity import AffinityMatrix
from semsearch.geometry import DEFAULT_SAMPLES, ShelfSpec, boxes_array, hidden_mask, visible_samples_needed, PlacedObject, ObjectSpec

DEFAULT_NX = 160
DEFAULT_NY = 70
DEFAULT_BINS = 512
DEFAULT_SIGMA_BINS = 50.0
ZERO_PRODUCT = 1e-12


@dataclass
class OccupancyGrid:
    mass: np.ndarray
    fallback: str | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.mass.shape

    @property
    def total(self) -> float:
        return float(self.mass.sum())


@dataclass
class OccupancyDistribution1D:
    mass: np.ndarray
    fallback: str | None = None

    @property
    def bins(self) -> int:
        return len(self.mass)


@dataclass
class KnownObject:
    label: str
    first_seen_position: tuple[float, float]
    dims: tuple[float, float, float]
    object_id: int = -1


@dataclass
class KnownWorld:
    """What the searcher knows about the shelf.

    ``known_objects`` is the write-once first-seen ledger of labeled
    detections. ``geometry`` maps scene object ids to their current pose and
    dims for everything that has shown up in the camera so far.
    """

    shelf: ShelfSpec
    nx: int = DEFAULT_NX
    ny: int = DEFAULT_NY
    known_objects: list[KnownObject] = field(default_factory=list)
    geometry: dict[int, tuple[tuple[float, float], tuple[float, float, float]]] = field(default_factory=dict)
    explored: np.ndarray | None = None

    def __post_init__(self):
        if self.explored is None:
            self.explored = np.zeros((self.nx, self.ny), dtype=bool)
        if self.explored.shape != (self.nx, self.ny):
            raise ValueError("explored grid shape mismatch")

    def ledger_ids(self) -> set[int]:
        return {k.object_id for k in self.known_objects}

    def geometry_objects(self, overrides: dict | None = None) -> list[PlacedObject]:
        geo = dict(self.geometry)
        if overrides:
            geo.update(overrides)
        return self.geometry_objects_from(geo)

    @staticmethod
    def geometry_objects_from(geo: dict) -> list[PlacedObject]:
        return [PlacedObject(ObjectSpec(f"#{i}", dims), pos) for i, (pos, dims) in sorted(geo.items())]

    def copy(self) -> KnownWorld:
        return KnownWorld(
            self.shelf, self.nx, self.ny, list(self.known_objects), dict(self.geometry), self.explored.copy()
        )


@lru_cache(maxsize=16)
def cell_centers(shelf: ShelfSpec, nx: int, ny: int) -> tuple[np.ndarray, np.ndarray]:
    xs = (np.arange(nx) + 0.5) * shelf.width / nx
    ys = (np.arange(ny) + 0.5) * shelf.depth / ny
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    gx.setflags(write=False)
    gy.setflags(write=False)
    return gx, gy


def opening_coordinate(x, y, shelf: ShelfSpec):
    """Where the camera ray through plan point (x, y) crosses y = 0."""
    c = shelf.camera_offset
    return shelf.width / 2 + (np.asarray(x) - shelf.width / 2) * c / (np.asarray(y) + c)


def ray_bin(x, y, shelf: ShelfSpec, bins: int = DEFAULT_BINS):
    u = opening_coordinate(x, y, shelf)
    return np.clip(np.floor(u / shelf.width * bins).astype(int), 0, bins - 1)


def cell_of(x: float, y: float, shelf: ShelfSpec, nx: int = DEFAULT_NX, ny: int = DEFAULT_NY) -> tuple[int, int]:
    """Grid cell containing plan point (x, y)."""
    ix = min(max(int(x / shelf.width * nx), 0), nx - 1)
    iy = min(max(int(y / shelf.depth * ny), 0), ny - 1)
    return ix, iy


def cell_bin(x: float, y: float, shelf: ShelfSpec, nx: int = DEFAULT_NX, ny: int = DEFAULT_NY, bins: int = DEFAULT_BINS) -> int:
    """Ray bin that receives the mass of the cell containing (x, y)."""
    ix, iy = cell_of(x, y, shelf, nx, ny)
    return int(cell_bins(shelf, nx, ny, bins)[ix * ny + iy])


@lru_cache(maxsize=16)
def cell_bins(shelf: ShelfSpec, nx: int, ny: int, bins: int) -> np.ndarray:
    gx, gy = cell_centers(shelf, nx, ny)
    out = ray_bin(gx, gy, shelf, bins).ravel()
    out.setflags(write=False)
    return out


def _normalized(mass: np.ndarray) -> np.ndarray:
    return mass / mass.sum()


def uniform_grid(nx: int, ny: int) -> np.ndarray:
    return np.full((nx, ny), 1.0 / (nx * ny))


def semantic_grid(world: KnownWorld, target: str, M: AffinityMatrix) -> OccupancyGrid:
    """Each cell takes the target affinity of the nearest first-seen object
    (plan distance to footprint centers, ties to the lower ledger index)."""
    nx, ny = world.nx, world.ny
    if not world.known_objects:
        return OccupancyGrid(uniform_grid(nx, ny), "no-known-objects")
    gx, gy = cell_centers(world.shelf, nx, ny)
    pos = np.array([k.first_seen_position for k in world.known_objects])
    d2 = (gx.ravel()[:, None] - pos[None, :, 0]) ** 2 + (gy.ravel()[:, None] - pos[None, :, 1]) ** 2
    nearest = np.argmin(d2, axis=1)
    aff = np.array([M.lookup(k.label, target) for k in world.known_objects])
    mass = aff[nearest].reshape(nx, ny)
    if mass.sum() <= 0:
        return OccupancyGrid(uniform_grid(nx, ny), "zero-affinity")
    return OccupancyGrid(_normalized(mass))


def project_to_1d(grid: OccupancyGrid, shelf: ShelfSpec, B: int = DEFAULT_BINS, normalize: bool = True) -> OccupancyDistribution1D:
    """Sum cell mass into the bin of the camera ray through each cell center."""
    nx, ny = grid.shape
    out = np.bincount(cell_bins(shelf, nx, ny, B), weights=grid.mass.ravel(), minlength=B).astype(np.float64)
    if normalize and out.sum() > 0:
        out = _normalized(out)
    return OccupancyDistribution1D(out, grid.fallback)


def gaussian_kernel(sigma_bins: float, radius: int) -> np.ndarray:
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma_bins) ** 2)
    return w / w.sum()


def gaussian_smooth(dist: OccupancyDistribution1D, sigma_bins: float = DEFAULT_SIGMA_BINS) -> OccupancyDistribution1D:
    """Untruncated discrete Gaussian with half-sample reflection at the ends."""
    if sigma_bins < 0:
        raise ValueError("sigma_bins must be >= 0")
    if sigma_bins == 0 or dist.bins < 2:
        return OccupancyDistribution1D(dist.mass.copy(), dist.fallback)
    weights = gaussian_kernel(sigma_bins, dist.bins - 1)
    out = correlate1d(dist.mass, weights, mode="reflect")
    out = np.clip(out, 0.0, None)
    if out.sum() > 0:
        out = _normalized(out)
    return OccupancyDistribution1D(out, dist.fallback)


def cells_collide(x, y, target_dims, footprint, hx: float, hy: float) -> np.ndarray:
    """True where every target center within (+-hx, +-hy) of (x, y)
    overlaps `footprint`."""
    w, d, _ = target_dims
    x0, x1, y0, y1 = footprint
    over_x = np.minimum(x + w / 2, x1) - np.maximum(x - w / 2, x0)
    over_y = np.minimum(y + d / 2, y1) - np.maximum(y - d / 2, y0)
    return (over_x > hx + 1e-9) & (over_y > hy + 1e-9)


# Center first, then the corners and edge midpoints of the cell.
_SUBPOSES = [(0, 0), (-1, -1), (-1, 1), (1, -1), (1, 1), (-1, 0), (1, 0), (0, -1), (0, 1)]


def hidden_cells(
    world: KnownWorld,
    flat_index: np.ndarray,
    target_dims,
    objects: list[PlacedObject],
    visibility_threshold: float,
    samples: int = DEFAULT_SAMPLES,
) -> np.ndarray:
    """For each cell (flat index into the grid), whether a target placed at
    the center, a corner or an edge midpoint of the cell stays below the
    visibility threshold against `objects`."""
    shelf = world.shelf
    w, d, h = target_dims
    gx, gy = cell_centers(shelf, world.nx, world.ny)
    hx = shelf.width / world.nx / 2
    hy = shelf.depth / world.ny / 2
    cx, cy, cz = shelf.camera
    stop = visible_samples_needed(visibility_threshold, samples)
    boxes = boxes_array(objects)
    hidden = np.zeros(len(flat_index), dtype=bool)
    pending = np.arange(len(flat_index))
    for ox, oy in _SUBPOSES:
        if not pending.size:
            break
        cells = flat_index[pending]
        pts = np.column_stack([gx.ravel()[cells] + ox * hx, gy.ravel()[cells] + oy * hy])
        hid = hidden_mask(pts, w, d, h, samples, cx, cy, cz, boxes, stop)
        hidden[pending[hid]] = True
        pending = pending[~hid]
    return hidden


def feasible_cells(
    world: KnownWorld,
    target_dims,
    visibility_threshold: float,
    geometry: list[PlacedObject] | None = None,
    samples: int = DEFAULT_SAMPLES,
) -> np.ndarray:
    """Cells where a target of `target_dims` could be hiding: in bounds,
    clear of every known footprint, below the visibility threshold against
    known geometry, and not yet explored.

    Bounds and collisions are tested for the whole cell: a cell passes if
    some center inside it would pass, so a true pose is never excluded by
    rounding to the cell grid. Visibility is tested at the center, corners
    and edge midpoints; the cell stays if any of these poses is hidden.
    """
    shelf = world.shelf
    w, d, h = target_dims
    gx, gy = cell_centers(shelf, world.nx, world.ny)
    hx = shelf.width / world.nx / 2
    hy = shelf.depth / world.ny / 2
    ok = ~world.explored
    ok &= (gx + hx - w / 2 >= -1e-9) & (gx - hx + w / 2 <= shelf.width + 1e-9)
    ok &= (gy + hy - d / 2 >= -1e-9) & (gy - hy + d / 2 <= shelf.depth + 1e-9)
    if h > shelf.height:
        ok[:] = False
    objs = world.geometry_objects() if geometry is None else geometry
    for o in objs:
        ok &= ~cells_collide(gx, gy, target_dims, o.footprint, hx, hy)
    idx = np.flatnonzero(ok)
    if idx.size:
        flat = ok.ravel()
        flat[idx[~hidden_cells(world, idx, target_dims, objs, visibility_threshold, samples)]] = False
        ok = flat.reshape(ok.shape)
    return ok


def spatial_grid(
    world: KnownWorld,
    target_dims,
    shelf: ShelfSpec | None = None,
    visibility_threshold: float = 0.01,
    feasible: np.ndarray | None = None,
) -> OccupancyGrid:
    """Uniform mass over feasible hiding cells; an all-zero grid flagged
    'exhausted' when nothing is feasible."""
    if shelf is not None and shelf != world.shelf:
        raise ValueError("shelf does not match the known world")
    if feasible is None:
        feasible = feasible_cells(world, target_dims, visibility_threshold)
    count = int(feasible.sum())
    if count == 0:
        return OccupancyGrid(np.zeros(feasible.shape), "exhausted")
    return OccupancyGrid(feasible / count)


def mark_explored(world: KnownWorld, feasible: np.ndarray) -> None:
    world.explored |= ~feasible


def combine(semantic: OccupancyDistribution1D, spatial: OccupancyDistribution1D) -> OccupancyDistribution1D:
    if semantic.bins != spatial.bins:
        raise ValueError("bin counts differ")
    prod = semantic.mass * spatial.mass
    total = prod.sum()
    if total < ZERO_PRODUCT:
        return OccupancyDistribution1D(spatial.mass.copy(), "spatial-only")
    return OccupancyDistribution1D(prod / total)


def entropy_bits(mass: np.ndarray) -> float:
    nz = mass[mass > 0]
    return float(-(nz * np.log2(nz)).sum())


def dump_distribution(dist: OccupancyDistribution1D, kind: str, step: int, out: TextIO) -> None:
    out.write(f"# B={dist.bins} kind={kind} step={step}\n")
    for v in dist.mass:
        out.write(f"{v:.12g}\n")


def load_distribution(text: str) -> tuple[dict, np.ndarray]:
    lines = text.strip().splitlines()
    header = dict(tok.split("=", 1) for tok in lines[0].lstrip("# ").split())
    return header, np.array([float(l) for l in lines[1:]])
