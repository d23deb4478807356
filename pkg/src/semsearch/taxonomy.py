"""Domain taxonomies and semantically organized scene generation.

Scenes are laid out top-down over the taxonomy tree: each internal node
splits its shelf rectangle in two, objects under the last internal node are
scattered inside its sub-rectangle, and per-level noise plus iterative
collision resolution produce the final placement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from semsearch.geometry import (
    S_MAX,
    S_MIN,
    ObjectSpec,
    PlacedObject,
    Scene,
    ShelfSpec,
    rects_overlap,
    visibility_fraction,
)

DOMAINS = ("pharmacy", "kitchen", "office")
DOMAIN_SCALE = {"pharmacy": 0.7, "kitchen": 0.7, "office": 0.4}
HIDDEN_THRESHOLD = 0.01

# Resolution treats near-touching pairs as colliding so that rounding to
# 6 decimals cannot reintroduce overlap.
_SEPARATION_GAP = 1e-5
_MIN_STEP = 1e-3
_WALL_MARGIN = 1e-6


class TaxonomyError(ValueError):
    pass


class SceneRejected(RuntimeError):
    """The sampled layout is unusable; callers resample with a new seed."""


@dataclass
class TaxonomyNode:
    name: str
    children: list[TaxonomyNode] = field(default_factory=list)
    spec: ObjectSpec | None = None

    @property
    def is_leaf(self) -> bool:
        return self.spec is not None

    def leaves(self) -> list[ObjectSpec]:
        if self.is_leaf:
            return [self.spec]
        return [s for c in self.children for s in c.leaves()]

    def labels(self) -> list[str]:
        return [s.name for s in self.leaves()]

    def categories(self) -> list[list[str]]:
        """Label groups for the block-diagonal ground truth.

        Siblings under a node whose children are all leaves form one group;
        a leaf with non-leaf siblings is its own group.
        """
        if self.is_leaf:
            return [[self.spec.name]]
        if all(c.is_leaf for c in self.children):
            return [[c.spec.name for c in self.children]]
        groups = []
        for c in self.children:
            groups.extend(c.categories())
        return groups


def parse_taxonomy(data: dict, _path: tuple[str, ...] = ()) -> TaxonomyNode:
    try:
        name = data["name"]
    except (KeyError, TypeError) as exc:
        raise TaxonomyError(f"taxonomy node without a name under {'/'.join(_path)!r}") from exc
    if "object" in data:
        if data.get("children"):
            raise TaxonomyError(f"{name!r} has both an object and children")
        dims = data["object"].get("dims")
        if dims is None or len(dims) != 3:
            raise TaxonomyError(f"{name!r}: object dims must be [w, d, h]")
        return TaxonomyNode(name, [], ObjectSpec(name, tuple(dims), _path))
    kids = data.get("children")
    if not kids:
        raise TaxonomyError(f"{name!r} has neither children nor an object")
    node = TaxonomyNode(name, [parse_taxonomy(c, _path + (name,)) for c in kids])
    if _path == ():
        labels = node.labels()
        if len(set(labels)) != len(labels):
            raise TaxonomyError("object names must be unique across the taxonomy")
    return node


def load_taxonomy(path_or_domain) -> TaxonomyNode:
    """Parse a taxonomy file, or one of the bundled domains by name."""
    if str(path_or_domain) in DOMAINS:
        text = resources.files("semsearch.data").joinpath(f"{path_or_domain}.json").read_text()
    else:
        text = Path(path_or_domain).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TaxonomyError(f"cannot parse taxonomy: {exc}") from exc
    return parse_taxonomy(data)


@dataclass(frozen=True)
class SceneGenConfig:
    n_objects: int
    seed: int = 0
    noise_range: float = 0.02
    horizontal_force_threshold: int = 8
    scale_factor: float = 0.7
    collision_budget: int = 1000

    def __post_init__(self):
        if self.n_objects < 1:
            raise ValueError("n_objects must be >= 1")
        if self.noise_range < 0:
            raise ValueError("noise_range must be >= 0")


def scaled_spec(spec: ObjectSpec, scale: float) -> ObjectSpec:
    dims = tuple(float(np.clip(round(d * scale, 6), S_MIN, S_MAX)) for d in spec.dims)
    return ObjectSpec(spec.name, dims, spec.category_path)


# --- layout ------------------------------------------------------------------


@dataclass
class _Assignment:
    spec: ObjectSpec
    rect: tuple[float, float, float, float]  # x0, x1, y0, y1
    noise: np.ndarray
    depth: int
    anchor: tuple[float, float] = (0.0, 0.0)


def _prune(node: TaxonomyNode, keep: set[str]) -> TaxonomyNode | None:
    if node.is_leaf:
        return node if node.spec.name in keep else None
    kids = [k for k in (_prune(c, keep) for c in node.children) if k is not None]
    if not kids:
        return None
    return TaxonomyNode(node.name, kids)


def _count(units: list[TaxonomyNode]) -> int:
    return sum(len(u.leaves()) for u in units)


def _balanced_cut(units: list[TaxonomyNode]) -> int:
    sizes = [len(u.leaves()) for u in units]
    total = sum(sizes)
    best, best_gap, acc = 1, None, 0
    for i in range(1, len(units)):
        acc += sizes[i - 1]
        gap = abs(total - 2 * acc)
        if best_gap is None or gap < best_gap:
            best, best_gap = i, gap
    return best


def layout(
    tree: TaxonomyNode, shelf: ShelfSpec, cfg: SceneGenConfig, rng: np.random.Generator
) -> tuple[list[_Assignment], list[tuple[int, str]]]:
    """Recursive split of the shelf plan over a pruned taxonomy tree.

    Returns one assignment per leaf (sub-rectangle, accumulated noise,
    recursion depth) and the (descendant count, 'h'|'v') of every unforced
    split. Anchors are drawn afterwards by `_place`.
    """
    out: list[_Assignment] = []
    orientations: list[tuple[int, str]] = []

    def visit(units: list[TaxonomyNode], rect, noise, depth):
        noise = noise + rng.uniform(-cfg.noise_range, cfg.noise_range, size=2)
        depth += 1
        # Descend through single-child chains.
        while len(units) == 1 and not units[0].is_leaf:
            units = units[0].children
        if all(u.is_leaf for u in units):
            out.extend(_Assignment(u.spec, rect, noise.copy(), depth) for u in units)
            return
        n_desc = _count(units)
        if n_desc > cfg.horizontal_force_threshold:
            horizontal = True
        else:
            horizontal = bool(rng.random() < 0.5)
            orientations.append((n_desc, "h" if horizontal else "v"))
        cut = _balanced_cut(units)
        left, right = units[:cut], units[cut:]
        frac = _count(left) / n_desc
        x0, x1, y0, y1 = rect
        if horizontal:
            xm = x0 + frac * (x1 - x0)
            rects = ((x0, xm, y0, y1), (xm, x1, y0, y1))
        else:
            ym = y0 + frac * (y1 - y0)
            rects = ((x0, x1, y0, ym), (x0, x1, ym, y1))
        for group, r in zip((left, right), rects):
            visit(group, r, noise, depth)

    visit([tree], (0.0, shelf.width, 0.0, shelf.depth), np.zeros(2), 0)
    return out, orientations


def _clamp(spec: ObjectSpec, x: float, y: float, shelf: ShelfSpec) -> tuple[float, float]:
    w, d, _ = spec.dims
    x = float(np.clip(x, w / 2 + _WALL_MARGIN, shelf.width - w / 2 - _WALL_MARGIN))
    y = float(np.clip(y, d / 2 + _WALL_MARGIN, shelf.depth - d / 2 - _WALL_MARGIN))
    return x, y


def _place(assignments: list[_Assignment], rng: np.random.Generator) -> None:
    for a in assignments:
        x0, x1, y0, y1 = a.rect
        a.anchor = (float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)))


def resolve_collisions(
    specs: list[ObjectSpec],
    positions: np.ndarray,
    shelf: ShelfSpec,
    budget: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Push colliding pairs apart along their center displacement.

    Each iteration moves every colliding pair apart by 10% of its
    penetration plus 1 mm, split evenly, then clamps into the shelf.
    Raises SceneRejected when `budget` iterations do not suffice.
    """
    pos = positions.copy()
    half = np.array([[s.dims[0] / 2, s.dims[1] / 2] for s in specs])
    n = len(specs)

    def rect(i):
        return (pos[i, 0] - half[i, 0], pos[i, 0] + half[i, 0], pos[i, 1] - half[i, 1], pos[i, 1] + half[i, 1])

    for _ in range(budget):
        clean = True
        for i in range(n):
            for j in range(i + 1, n):
                if not rects_overlap(rect(i), rect(j), tol=-_SEPARATION_GAP):
                    continue
                clean = False
                delta = pos[j] - pos[i]
                dist = float(np.hypot(*delta))
                if dist < 1e-12:
                    ang = rng.uniform(0, 2 * np.pi)
                    u = np.array([np.cos(ang), np.sin(ang)])
                else:
                    u = delta / dist
                ox = half[i, 0] + half[j, 0] - abs(delta[0])
                oy = half[i, 1] + half[j, 1] - abs(delta[1])
                step = 0.1 * max(min(ox, oy), 0.0) + _MIN_STEP
                pos[i] -= u * step / 2
                pos[j] += u * step / 2
                pos[i] = _clamp(specs[i], *pos[i], shelf)
                pos[j] = _clamp(specs[j], *pos[j], shelf)
        if clean:
            return pos
    raise SceneRejected(f"collision resolution exceeded {budget} iterations")


def hidden_indices(scene: Scene, threshold: float = HIDDEN_THRESHOLD) -> list[int]:
    return [i for i in range(len(scene.objects)) if visibility_fraction(scene, i) < threshold]


def pick_target(scene: Scene, rng_seed: int) -> int:
    """Uniform choice among objects with visibility below 1%."""
    hidden = hidden_indices(scene)
    if not hidden:
        raise SceneRejected("no hidden object available as target")
    rng = np.random.default_rng(rng_seed)
    return hidden[int(rng.integers(len(hidden)))]


def generate_scene(tax: TaxonomyNode, cfg: SceneGenConfig, shelf: ShelfSpec | None = None) -> Scene:
    """Generate one semantically organized scene with a hidden target.

    RNG draw order: object sample, then split orientations and per-level
    noise (depth-first), then anchor positions, then collision resolution,
    then the target pick.
    """
    shelf = shelf or ShelfSpec()
    leaves = tax.leaves()
    if cfg.n_objects > len(leaves):
        raise ValueError(f"n_objects={cfg.n_objects} exceeds the {len(leaves)} taxonomy leaves")
    rng = np.random.default_rng(cfg.seed)
    chosen = rng.choice(len(leaves), size=cfg.n_objects, replace=False)
    keep = {leaves[int(i)].name for i in chosen}
    tree = _prune(tax, keep)

    assignments, _ = layout(tree, shelf, cfg, rng)
    _place(assignments, rng)
    specs = [scaled_spec(a.spec, cfg.scale_factor) for a in assignments]
    for s in specs:
        if s.dims[0] > shelf.width or s.dims[1] > shelf.depth or s.dims[2] > shelf.height:
            raise ValueError(f"{s.name!r} does not fit the shelf")
    raw = np.array([np.add(a.anchor, a.noise) for a in assignments])
    pos = np.array([_clamp(s, *p, shelf) for s, p in zip(specs, raw)])
    pos = resolve_collisions(specs, pos, shelf, cfg.collision_budget, rng)

    objects = tuple(PlacedObject(s, (round(p[0], 6), round(p[1], 6))) for s, p in zip(specs, pos))
    scene = Scene(shelf, objects, 0)
    target = pick_target(scene, int(rng.integers(2**63)))
    return Scene(shelf, objects, target)


def scene_seed(base_seed: int, n_objects: int, scene_id: int, attempt: int) -> int:
    return int(np.random.SeedSequence([base_seed, n_objects, scene_id, attempt]).generate_state(1, np.uint64)[0])


def generate_accepted(
    tax: TaxonomyNode,
    cfg: SceneGenConfig,
    scene_id: int,
    shelf: ShelfSpec | None = None,
    max_attempts: int = 200,
) -> tuple[Scene, int]:
    """Resample until a scene is accepted; returns (scene, rejected count)."""
    for attempt in range(max_attempts):
        seed = scene_seed(cfg.seed, cfg.n_objects, scene_id, attempt)
        try:
            sub = SceneGenConfig(
                cfg.n_objects, seed, cfg.noise_range, cfg.horizontal_force_threshold,
                cfg.scale_factor, cfg.collision_budget,
            )
            return generate_scene(tax, sub, shelf), attempt
        except SceneRejected:
            continue
    raise SceneRejected(f"scene {scene_id}: no accepted scene in {max_attempts} attempts")
