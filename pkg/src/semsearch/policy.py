"""Greedy mechanical search: candidate actions, DAR/DER selection and rollouts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from semsearch.affinity import AffinityMatrix
from semsearch.geometry import (
    DEFAULT_SAMPLES,
    DEFAULT_V_DETECT,
    PlacedObject,
    Scene,
    observe,
    rects_overlap,
    visibility_fraction,
)
from semsearch.occupancy import (
    DEFAULT_BINS,
    DEFAULT_NX,
    DEFAULT_NY,
    DEFAULT_SIGMA_BINS,
    KnownWorld,
    cell_bins,
    cell_bin,
    cell_centers,
    cells_collide,
    hidden_cells,
    OccupancyDistribution1D,
    combine,
    entropy_bits,
    feasible_cells,
    gaussian_smooth,
    mark_explored,
    opening_coordinate,
    project_to_1d,
    semantic_grid,
    spatial_grid,
)
from semsearch.perception import record_first_seen, simulate_detection, update_geometry

MIN_DISPLACEMENT = 0.005
TIE_TOL = 1e-12


class DeadEnd(RuntimeError):
    """No feasible action exists."""


class InfeasibleAction(ValueError):
    pass


class SoundnessError(AssertionError):
    pass


@dataclass(frozen=True)
class Action:
    kind: str  # "push" | "suction"
    object_index: int
    object_name: str
    origin: tuple[float, float]
    target_xy: tuple[float, float]

    @property
    def target_x(self) -> float:
        return self.target_xy[0]

    @property
    def displacement(self) -> float:
        return float(np.hypot(self.target_xy[0] - self.origin[0], self.target_xy[1] - self.origin[1]))

    @property
    def delta(self) -> tuple[float, float]:
        return (self.target_xy[0] - self.origin[0], self.target_xy[1] - self.origin[1])

    def tie_key(self) -> tuple:
        return (self.displacement, self.object_index, self.target_xy[0], self.target_xy[1])


# --- candidates and transitions ---------------------------------------------


def _others(scene: Scene, index: int) -> list[PlacedObject]:
    return [o for i, o in enumerate(scene.objects) if i != index]


def _fp(obj: PlacedObject, pos) -> tuple[float, float, float, float]:
    w, d, _ = obj.spec.dims
    return (pos[0] - w / 2, pos[0] + w / 2, pos[1] - d / 2, pos[1] + d / 2)


def _inside(rect, shelf) -> bool:
    return rect[0] >= -1e-9 and rect[2] >= -1e-9 and rect[1] <= shelf.width + 1e-9 and rect[3] <= shelf.depth + 1e-9


def push_is_feasible(scene: Scene, index: int, target_x: float) -> bool:
    obj = scene.objects[index]
    x, y = obj.position
    w, d, _ = obj.spec.dims
    dest = _fp(obj, (target_x, y))
    if not _inside(dest, scene.shelf):
        return False
    sweep = (min(x, target_x) - w / 2, max(x, target_x) + w / 2, y - d / 2, y + d / 2)
    return not any(rects_overlap(sweep, o.footprint) for o in _others(scene, index))


def suction_is_feasible(scene: Scene, index: int, target_xy) -> bool:
    obj = scene.objects[index]
    dest = _fp(obj, target_xy)
    if not _inside(dest, scene.shelf):
        return False
    for o in _others(scene, index):
        f = o.footprint
        if rects_overlap(dest, f):
            return False
        # Something already sits in front of the drop location.
        if f[0] < dest[1] - 1e-9 and dest[0] < f[1] - 1e-9 and f[3] <= dest[2] + 1e-9:
            return False
    return True


def candidate_actions(world: KnownWorld, scene: Scene, grid_k: int = 16, detected=None) -> list[Action]:
    """Pushes to `grid_k` evenly spaced x targets and suction drops on a
    grid_k x grid_k/2 plan grid, for every detected non-target object.

    Feasibility is checked against the true scene; moves under 5 mm are
    dropped. Raises DeadEnd when nothing is feasible.
    """
    if grid_k < 2:
        raise ValueError("grid_k must be >= 2")
    if detected is None:
        detected = observe(scene).detected
    shelf = scene.shelf
    ky = max(grid_k // 2, 1)
    out: list[Action] = []
    for i, obj in enumerate(scene.objects):
        if i == scene.target_index or obj.name not in detected:
            continue
        w, d, _ = obj.spec.dims
        x, y = obj.position
        for tx in np.linspace(w / 2, shelf.width - w / 2, grid_k):
            tx = float(tx)
            if abs(tx - x) < MIN_DISPLACEMENT:
                continue
            if push_is_feasible(scene, i, tx):
                out.append(Action("push", i, obj.name, (x, y), (tx, y)))
        for a in range(grid_k):
            for b in range(ky):
                t = ((a + 0.5) * shelf.width / grid_k, (b + 0.5) * shelf.depth / ky)
                if np.hypot(t[0] - x, t[1] - y) < MIN_DISPLACEMENT:
                    continue
                if suction_is_feasible(scene, i, t):
                    out.append(Action("suction", i, obj.name, (x, y), (float(t[0]), float(t[1]))))
    if not out:
        raise DeadEnd("no feasible candidate action")
    return out


def apply_action(scene: Scene, action: Action) -> Scene:
    i = action.object_index
    if not 0 <= i < len(scene.objects) or scene.objects[i].name != action.object_name:
        raise InfeasibleAction(f"unknown object {action.object_name!r}")
    if action.displacement == 0:
        return scene
    if action.kind == "push":
        if abs(action.target_xy[1] - scene.objects[i].position[1]) > 1e-12:
            raise InfeasibleAction("push must be a lateral translation")
        ok = push_is_feasible(scene, i, action.target_xy[0])
    elif action.kind == "suction":
        ok = suction_is_feasible(scene, i, action.target_xy)
    else:
        raise InfeasibleAction(f"unknown action kind {action.kind!r}")
    if not ok:
        raise InfeasibleAction(f"{action.kind} of {action.object_name!r} to {action.target_xy} collides or leaves the shelf")
    return scene.with_object(i, action.target_xy)


# --- scoring -----------------------------------------------------------------


def silhouette_bins(footprint, shelf, bins: int = DEFAULT_BINS) -> tuple[int, int]:
    """Inclusive [lo, hi] range of ray bins whose center ray crosses the
    footprint; lo > hi means empty."""
    x0, x1, y0, y1 = footprint
    u = opening_coordinate(np.array([x0, x0, x1, x1]), np.array([y0, y1, y0, y1]), shelf)
    lo = int(np.ceil(u.min() / shelf.width * bins - 0.5 - 1e-12))
    hi = int(np.floor(u.max() / shelf.width * bins - 0.5 + 1e-12))
    return max(lo, 0), min(hi, bins - 1)


def _known_footprints(world: KnownWorld, scene: Scene) -> dict[int, tuple]:
    out = {}
    for i, (pos, dims) in world.geometry.items():
        w, d, _ = dims
        out[i] = (pos[0] - w / 2, pos[0] + w / 2, pos[1] - d / 2, pos[1] + d / 2)
    return out


def _pick(candidates: Sequence[Action], scores: np.ndarray, secondary: np.ndarray | None = None) -> Action:
    """Argmin of `scores`; ties (within 1e-12) go to the lower `secondary`
    score if given, then to the smaller displacement, lower object index and
    smaller target x."""
    keep = np.flatnonzero(scores <= scores.min() + TIE_TOL)
    if secondary is not None:
        sub = secondary[keep]
        keep = keep[sub <= sub.min() + TIE_TOL]
    return min((candidates[i] for i in keep), key=Action.tie_key)


def dar_scores(candidates: Sequence[Action], dist: OccupancyDistribution1D, world: KnownWorld, scene: Scene) -> np.ndarray:
    """Post-action distribution mass under the union of known silhouettes."""
    shelf = scene.shelf
    B = dist.bins
    mass = dist.mass
    fps = _known_footprints(world, scene)
    masks = {}
    for i, fp in fps.items():
        lo, hi = silhouette_bins(fp, shelf, B)
        m = np.zeros(B, dtype=bool)
        m[lo : hi + 1] = True
        masks[i] = m
    cache: dict[int, tuple[float, np.ndarray]] = {}
    scores = np.empty(len(candidates))
    for n, c in enumerate(candidates):
        k = c.object_index
        if k not in cache:
            others = np.zeros(B, dtype=bool)
            for i, m in masks.items():
                if i != k:
                    others |= m
            free = np.where(others, 0.0, mass)
            cache[k] = (float(mass[others].sum()), np.concatenate([[0.0], np.cumsum(free)]))
        base, cum = cache[k]
        obj = scene.objects[k]
        lo, hi = silhouette_bins(_fp(obj, c.target_xy), shelf, B)
        scores[n] = base + (cum[hi + 1] - cum[lo] if hi >= lo else 0.0)
    return scores


def _sightline_u_range(x, y, target_dims, hx, hy, shelf):
    """Opening-coordinate interval spanned by sight lines from any sub-pose
    of the cells centered at (x, y)."""
    w, d, _ = target_dims
    xs = (x - w / 2 - hx, x + w / 2 + hx)
    ys = (y - d / 2 - hy, y - d / 2 + hy)
    us = [opening_coordinate(xx, yy, shelf) for xx in xs for yy in ys]
    return np.minimum.reduce(us), np.maximum.reduce(us)


def _fp_u_range(fp, shelf):
    x0, x1, y0, y1 = fp
    u = opening_coordinate(np.array([x0, x0, x1, x1]), np.array([y0, y1, y0, y1]), shelf)
    return u.min(), u.max()


def predicted_losses(
    candidates: Sequence[Action],
    world: KnownWorld,
    scene: Scene,
    target_dims,
    feasible: np.ndarray,
    visibility_threshold: float,
    samples: int = DEFAULT_SAMPLES,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Which currently feasible cells each candidate would rule out.

    Returns the flat indices of the feasible cells and, per candidate, a
    mask over them. A move cannot add feasible cells: the old position
    stops occluding and the new footprint excludes cells. So only cells
    whose sight lines cross the old footprint are re-tested without the
    object, and those that become visible are re-tested with the object at
    its destination if their sight lines cross it there.
    """
    shelf = world.shelf
    hx = shelf.width / world.nx / 2
    hy = shelf.depth / world.ny / 2
    gx, gy = cell_centers(shelf, world.nx, world.ny)
    fidx = np.flatnonzero(feasible.ravel())
    x, y = gx.ravel()[fidx], gy.ravel()[fidx]
    ulo, uhi = _sightline_u_range(x, y, target_dims, hx, hy, shelf)
    face_far = y - target_dims[1] / 2 + hy

    def crossing(fp):
        a, b = _fp_u_range(fp, shelf)
        return (uhi >= a) & (ulo <= b) & (face_far > fp[2])

    revealed: dict[int, np.ndarray] = {}
    out = []
    for c in candidates:
        k = c.object_index
        dims = scene.objects[k].spec.dims
        others = {i: g for i, g in world.geometry.items() if i != k}
        if k not in revealed:
            lost = np.zeros(len(fidx), dtype=bool)
            if k in world.geometry:
                sel = np.flatnonzero(crossing(_fp(scene.objects[k], world.geometry[k][0])))
                if sel.size:
                    objs = KnownWorld.geometry_objects_from(others)
                    hid = hidden_cells(world, fidx[sel], target_dims, objs, visibility_threshold, samples)
                    lost[sel[~hid]] = True
            revealed[k] = lost
        lost = revealed[k].copy()
        dest = _fp(scene.objects[k], c.target_xy)
        sel = np.flatnonzero(lost & crossing(dest))
        if sel.size:
            objs = KnownWorld.geometry_objects_from({**others, k: (c.target_xy, dims)})
            lost[sel[hidden_cells(world, fidx[sel], target_dims, objs, visibility_threshold, samples)]] = False
        lost |= cells_collide(x, y, target_dims, dest, hx, hy)
        out.append(lost)
    return fidx, out


def occlusion_dar_scores(
    candidates: Sequence[Action],
    dist: OccupancyDistribution1D,
    world: KnownWorld,
    scene: Scene,
    target_dims,
    feasible: np.ndarray,
    visibility_threshold: float,
    samples: int = DEFAULT_SAMPLES,
) -> np.ndarray:
    """Height-aware DAR: the mass left on cells that would still be hidden
    after the move. Each bin's mass is spread evenly over its feasible
    cells."""
    fidx, losses = predicted_losses(candidates, world, scene, target_dims, feasible, visibility_threshold, samples)
    cb = cell_bins(world.shelf, world.nx, world.ny, dist.bins)[fidx]
    counts = np.bincount(cb, minlength=dist.bins)
    weight = dist.mass[cb] / np.maximum(counts[cb], 1)
    total = float(weight.sum())
    return np.array([total - float(weight[lost].sum()) for lost in losses])


def stacked_overlap_scores(candidates: Sequence[Action], dist: OccupancyDistribution1D, world: KnownWorld, scene: Scene) -> np.ndarray:
    """Post-action mass under each known silhouette, summed over objects, so
    bins covered by several objects count several times."""
    shelf = scene.shelf
    cum = np.concatenate([[0.0], np.cumsum(dist.mass)])

    def cover(fp):
        lo, hi = silhouette_bins(fp, shelf, dist.bins)
        return cum[hi + 1] - cum[lo] if hi >= lo else 0.0

    fps = _known_footprints(world, scene)
    per = {i: cover(fp) for i, fp in fps.items()}
    total = sum(per.values())
    out = np.empty(len(candidates))
    for n, c in enumerate(candidates):
        k = c.object_index
        out[n] = total - per.get(k, 0.0) + cover(_fp(scene.objects[k], c.target_xy))
    return out


def dar_select(
    candidates: Sequence[Action],
    dist: OccupancyDistribution1D,
    world: KnownWorld,
    scene: Scene,
    mode: str = "joint",
) -> Action:
    """Distribution Area Reduction: the action leaving the least mass under
    object silhouettes. ``mode='two-stage'`` first fixes the object whose
    current silhouette covers the most mass."""
    if not candidates:
        raise DeadEnd("no candidates")
    if mode == "two-stage":
        fps = _known_footprints(world, scene)
        movable = sorted({c.object_index for c in candidates})
        cover = []
        for k in movable:
            lo, hi = silhouette_bins(fps.get(k, scene.objects[k].footprint), scene.shelf, dist.bins)
            cover.append(dist.mass[lo : hi + 1].sum() if hi >= lo else 0.0)
        k = movable[int(np.argmax(cover))]
        candidates = [c for c in candidates if c.object_index == k]
    elif mode != "joint":
        raise ValueError(f"unknown DAR mode {mode!r}")
    return _pick(candidates, dar_scores(candidates, dist, world, scene))


def post_action_distribution(
    action: Action,
    world: KnownWorld,
    scene: Scene,
    target_dims,
    visibility_threshold: float,
    semantic: OccupancyDistribution1D | None,
    bins: int = DEFAULT_BINS,
    samples: int = DEFAULT_SAMPLES,
) -> OccupancyDistribution1D:
    """Combined distribution predicted after applying `action` to the known
    geometry; the semantic part is held fixed."""
    geometry = world.geometry_objects({action.object_index: (action.target_xy, scene.objects[action.object_index].spec.dims)})
    feasible = feasible_cells(world, target_dims, visibility_threshold, geometry=geometry, samples=samples)
    spatial = project_to_1d(spatial_grid(world, target_dims, visibility_threshold=visibility_threshold, feasible=feasible), world.shelf, bins)
    return spatial if semantic is None else combine(semantic, spatial)


def der_scores(
    candidates: Sequence[Action],
    semantic: OccupancyDistribution1D | None,
    world: KnownWorld,
    scene: Scene,
    target_dims,
    visibility_threshold: float = 0.01,
    bins: int = DEFAULT_BINS,
    samples: int = DEFAULT_SAMPLES,
    feasible: np.ndarray | None = None,
) -> np.ndarray:
    """Entropy (bits) of each candidate's predicted post-action combined
    distribution. Same result as `post_action_distribution` per candidate,
    computed incrementally from the current feasible set."""
    if feasible is None:
        feasible = feasible_cells(world, target_dims, visibility_threshold, samples=samples)
    fidx, losses = predicted_losses(candidates, world, scene, target_dims, feasible, visibility_threshold, samples)
    cb = cell_bins(world.shelf, world.nx, world.ny, bins)[fidx]
    out = np.empty(len(candidates))
    for n, lost in enumerate(losses):
        counts = np.bincount(cb[~lost], minlength=bins).astype(np.float64)
        if counts.sum() == 0:
            out[n] = 0.0
            continue
        spatial = OccupancyDistribution1D(counts / counts.sum())
        dist = spatial if semantic is None else combine(semantic, spatial)
        out[n] = entropy_bits(dist.mass)
    return out


def der_select(
    candidates: Sequence[Action],
    semantic: OccupancyDistribution1D | None,
    world: KnownWorld,
    scene: Scene,
    target_dims,
    visibility_threshold: float = 0.01,
    bins: int = DEFAULT_BINS,
    samples: int = DEFAULT_SAMPLES,
) -> Action:
    """Distribution Entropy Reduction: the action whose predicted
    post-action distribution has the lowest Shannon entropy (bits).

    `world.explored` should already hold the current observation's
    exclusions; cells can only leave the feasible set after a move.
    """
    if not candidates:
        raise DeadEnd("no candidates")
    scores = der_scores(candidates, semantic, world, scene, target_dims, visibility_threshold, bins, samples)
    return _pick(candidates, scores)


# --- rollout -----------------------------------------------------------------


@dataclass(frozen=True)
class RolloutConfig:
    visibility_X: float = 0.01
    max_actions: int | None = None  # default 2 x number of scene objects
    policy: str = "DAR"
    use_semantic: bool = False
    sigma_bins: float = DEFAULT_SIGMA_BINS
    noise_p: float = 0.0
    seed: int = 0
    grid_k: int = 16
    v_detect: float = DEFAULT_V_DETECT
    spatial_threshold: float | None = None  # default: v_detect
    bins: int = DEFAULT_BINS
    nx: int = DEFAULT_NX
    ny: int = DEFAULT_NY
    samples: int = DEFAULT_SAMPLES
    dar_mode: str = "joint"
    dar_overlap: str = "occlusion"  # or "silhouette"
    check_soundness: bool = False
    keep_distributions: bool = False

    def __post_init__(self):
        if not 0 < self.visibility_X <= 1:
            raise ValueError("visibility_X must be in (0, 1]")
        if self.policy not in ("DAR", "DER"):
            raise ValueError(f"unknown policy {self.policy!r}")

    @property
    def rule_out_threshold(self) -> float:
        """Visibility at which a hypothetical target pose counts as seen."""
        return self.v_detect if self.spatial_threshold is None else self.spatial_threshold

    def action_limit(self, scene: Scene) -> int:
        return self.max_actions if self.max_actions is not None else 2 * len(scene.objects)


@dataclass
class StepRecord:
    step: int
    action: Action
    score: float
    target_visibility: float
    target_bin_mass: float
    distribution_sums: tuple[float, ...]
    distributions: dict | None = None


@dataclass
class RolloutRecord:
    success: bool
    steps: int
    max_actions: int
    reason: str
    per_step: list[StepRecord] = field(default_factory=list)
    final_visibility: float = 0.0


class PreconditionError(ValueError):
    pass


def rollout(
    scene: Scene,
    M: AffinityMatrix | None,
    cfg: RolloutConfig,
    object_list: Sequence[str] | None = None,
    trace: TextIO | None = None,
) -> RolloutRecord:
    """Observe, update beliefs, build the search distribution, act; repeat
    until the target is at least `visibility_X` visible or the action limit
    is reached."""
    limit = cfg.action_limit(scene)
    labels = list(object_list) if object_list is not None else [o.name for o in scene.objects]
    if cfg.use_semantic and M is None:
        raise ValueError("semantic rollout needs an affinity matrix")
    target = scene.target
    t_index = scene.target_index
    world = KnownWorld(scene.shelf, cfg.nx, cfg.ny)
    beliefs = {}
    records: list[StepRecord] = []
    if trace is not None:
        trace.write("step,action_kind,object,dx,dy,score,target_visibility\n")

    def finish(success, reason, vis):
        return RolloutRecord(success, len(records), limit, reason, records, vis)

    step = 0
    while True:
        report = observe(scene, cfg.v_detect, cfg.samples)
        vis = report.per_object_fraction[target.name]
        if vis >= cfg.visibility_X:
            if step == 0:
                raise PreconditionError("target is already visible")
            return finish(True, "found", vis)
        if step >= limit:
            return finish(False, "action-limit", vis)

        for i, obj in enumerate(scene.objects):
            if obj.name in report.detected and obj.name not in beliefs and i != t_index:
                truth = obj.name if obj.name in labels else labels[0]
                beliefs[obj.name] = simulate_detection(truth, labels, cfg.noise_p, [cfg.seed, i])
        record_first_seen(world, report, scene, beliefs)
        update_geometry(world, report, scene)

        threshold = cfg.rule_out_threshold
        feasible = feasible_cells(world, target.spec.dims, threshold, samples=cfg.samples)
        mark_explored(world, feasible)
        sgrid = spatial_grid(world, target.spec.dims, visibility_threshold=threshold, feasible=feasible)
        if sgrid.fallback == "exhausted":
            return finish(False, "exhausted", vis)
        spatial = project_to_1d(sgrid, scene.shelf, cfg.bins)
        semantic = None
        if cfg.use_semantic:
            sem2d = semantic_grid(world, target.name, M)
            semantic = gaussian_smooth(project_to_1d(sem2d, scene.shelf, cfg.bins), cfg.sigma_bins)
            dist = combine(semantic, spatial)
        else:
            dist = spatial

        tbin = cell_bin(target.position[0], target.position[1], scene.shelf, cfg.nx, cfg.ny, cfg.bins)
        tmass = float(dist.mass[tbin])
        if cfg.check_soundness and cfg.noise_p == 0 and not tmass > 0:
            raise SoundnessError(f"true target bin {tbin} has zero mass at step {step}")

        try:
            cands = candidate_actions(world, scene, cfg.grid_k, report.detected)
        except DeadEnd:
            return finish(False, "dead-end", vis)
        if cfg.policy == "DAR":
            secondary = None
            if cfg.dar_overlap == "occlusion":
                scores = occlusion_dar_scores(cands, dist, world, scene, target.spec.dims, feasible, threshold, cfg.samples)
                secondary = stacked_overlap_scores(cands, dist, world, scene)
            else:
                scores = dar_scores(cands, dist, world, scene)
            if cfg.dar_mode == "joint":
                action = _pick(cands, scores, secondary)
            else:
                action = dar_select(cands, dist, world, scene, cfg.dar_mode)
            score = float(scores[cands.index(action)])
        else:
            scores = der_scores(cands, semantic, world, scene, target.spec.dims, threshold, cfg.bins, cfg.samples, feasible)
            action = _pick(cands, scores)
            score = float(scores[cands.index(action)])

        scene = apply_action(scene, action)
        post_vis = visibility_fraction(scene, t_index, cfg.samples)
        sums = (float(spatial.mass.sum()), float(dist.mass.sum())) + ((float(semantic.mass.sum()),) if semantic is not None else ())
        kept = None
        if cfg.keep_distributions:
            kept = {"spatial": spatial.mass.copy(), "combined": dist.mass.copy()}
            if semantic is not None:
                kept["semantic"] = semantic.mass.copy()
        records.append(StepRecord(step, action, score, post_vis, tmass, sums, kept))
        if trace is not None:
            dx, dy = action.delta
            trace.write(f"{step},{action.kind},{action.object_name},{dx:.6f},{dy:.6f},{score:.9g},{post_vis:.6f}\n")
        step += 1
