"""Shelf geometry, pinhole camera and cuboid occlusion.

Coordinates: x runs across the shelf width, y = 0 at the front opening and
increases toward the back, z is up from the shelf floor. Objects are
axis-aligned cuboids resting on the floor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit

S_MIN = 0.05
S_MAX = 0.25
DEFAULT_SAMPLES = 16
DEFAULT_V_DETECT = 0.05

_EPS = 1e-9


@dataclass(frozen=True)
class ShelfSpec:
    width: float = 0.8
    depth: float = 0.35
    height: float = 0.57
    camera_offset: float = 0.5

    def __post_init__(self):
        for name in ("width", "depth", "height", "camera_offset"):
            if not getattr(self, name) > 0:
                raise ValueError(f"shelf {name} must be positive")

    @property
    def camera(self) -> tuple[float, float, float]:
        return (self.width / 2, -self.camera_offset, self.height / 2)


@dataclass(frozen=True)
class ObjectSpec:
    name: str
    dims: tuple[float, float, float]
    category_path: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        object.__setattr__(self, "category_path", tuple(self.category_path))
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError(f"bad dims for {self.name!r}: {self.dims}")


@dataclass(frozen=True)
class PlacedObject:
    spec: ObjectSpec
    position: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def footprint(self) -> tuple[float, float, float, float]:
        """(x0, x1, y0, y1) of the floor rectangle."""
        w, d, _ = self.spec.dims
        x, y = self.position
        return (x - w / 2, x + w / 2, y - d / 2, y + d / 2)

    def box(self) -> tuple[float, float, float, float, float, float]:
        x0, x1, y0, y1 = self.footprint
        return (x0, x1, y0, y1, 0.0, self.spec.dims[2])

    def moved(self, position) -> PlacedObject:
        return replace(self, position=position)


def in_bounds(obj: PlacedObject, shelf: ShelfSpec, tol: float = _EPS) -> bool:
    x0, x1, y0, y1 = obj.footprint
    return (
        x0 >= -tol
        and y0 >= -tol
        and x1 <= shelf.width + tol
        and y1 <= shelf.depth + tol
        and obj.spec.dims[2] <= shelf.height + tol
    )


def rects_overlap(a, b, tol: float = _EPS) -> bool:
    """Open-interior overlap of two (x0, x1, y0, y1) rectangles."""
    return a[0] < b[1] - tol and b[0] < a[1] - tol and a[2] < b[3] - tol and b[2] < a[3] - tol


def footprints_collide(a: PlacedObject, b: PlacedObject) -> bool:
    return rects_overlap(a.footprint, b.footprint)


@dataclass(frozen=True)
class Scene:
    shelf: ShelfSpec
    objects: tuple[PlacedObject, ...]
    target_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        names = [o.name for o in self.objects]
        if len(set(names)) != len(names):
            raise ValueError("object names must be unique")
        if self.objects and not 0 <= self.target_index < len(self.objects):
            raise ValueError(f"target_index {self.target_index} out of range")
        for i, a in enumerate(self.objects):
            if not in_bounds(a, self.shelf):
                raise ValueError(f"{a.name!r} is out of shelf bounds")
            for b in self.objects[i + 1 :]:
                if footprints_collide(a, b):
                    raise ValueError(f"{a.name!r} collides with {b.name!r}")

    @property
    def target(self) -> PlacedObject:
        return self.objects[self.target_index]

    def index_of(self, name: str) -> int:
        for i, o in enumerate(self.objects):
            if o.name == name:
                return i
        raise KeyError(name)

    def with_object(self, index: int, position) -> Scene:
        objs = list(self.objects)
        objs[index] = objs[index].moved(position)
        return Scene(self.shelf, tuple(objs), self.target_index)

    def boxes(self, exclude: int | None = None) -> np.ndarray:
        return boxes_array([o for i, o in enumerate(self.objects) if i != exclude])


def boxes_array(objects) -> np.ndarray:
    if not objects:
        return np.zeros((0, 6))
    return np.array([o.box() for o in objects], dtype=np.float64)


@dataclass(frozen=True)
class VisibilityReport:
    per_object_fraction: dict[str, float]
    detected: frozenset[str] = field(default_factory=frozenset)


# --- occlusion kernels -------------------------------------------------------


@njit(cache=True)
def _segment_hits_box(px, py, pz, qx, qy, qz, b):
    # Open segment p->q against the open box interior (slab test).
    t0 = 1e-12
    t1 = 1.0 - 1e-12
    p = (px, py, pz)
    q = (qx, qy, qz)
    for ax in range(3):
        lo = b[2 * ax]
        hi = b[2 * ax + 1]
        d = q[ax] - p[ax]
        if abs(d) < 1e-15:
            if p[ax] <= lo or p[ax] >= hi:
                return False
        else:
            ta = (lo - p[ax]) / d
            tb = (hi - p[ax]) / d
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
            if t0 >= t1:
                return False
    return True


@njit(cache=True)
def _face_visible_count(x0, x1, yf, h, samples, cx, cy, cz, boxes, stop_at):
    count = 0
    for i in range(samples):
        px = x0 + (i + 0.5) * (x1 - x0) / samples
        for j in range(samples):
            pz = (j + 0.5) * h / samples
            blocked = False
            for k in range(boxes.shape[0]):
                if _segment_hits_box(px, yf, pz, cx, cy, cz, boxes[k]):
                    blocked = True
                    break
            if not blocked:
                count += 1
                if count >= stop_at:
                    return count
    return count


@njit(cache=True)
def hidden_mask(centers, w, d, h, samples, cx, cy, cz, boxes, stop_at):
    """For each candidate footprint center, True when fewer than `stop_at`
    face samples of a (w, d, h) cuboid placed there are visible."""
    out = np.zeros(centers.shape[0], dtype=np.bool_)
    for n in range(centers.shape[0]):
        x = centers[n, 0]
        y = centers[n, 1]
        c = _face_visible_count(x - w / 2, x + w / 2, y - d / 2, h, samples, cx, cy, cz, boxes, stop_at)
        out[n] = c < stop_at
    return out


def visible_samples_needed(threshold: float, samples: int) -> int:
    """Smallest visible-sample count k with k / samples**2 >= threshold."""
    total = samples * samples
    k = int(np.ceil(threshold * total - 1e-9))
    return max(k, 1)


def face_visibility(obj: PlacedObject, shelf: ShelfSpec, occluders: np.ndarray, samples: int = DEFAULT_SAMPLES) -> float:
    x0, x1, y0, _ = obj.footprint
    cx, cy, cz = shelf.camera
    total = samples * samples
    n = _face_visible_count(x0, x1, y0, obj.spec.dims[2], samples, cx, cy, cz, occluders, total + 1)
    return n / total


def visibility_fraction(scene: Scene, object_index: int, samples: int = DEFAULT_SAMPLES) -> float:
    """Fraction of a samples x samples grid on the object's front face with a
    clear line of sight to the camera pinhole."""
    if not 0 <= object_index < len(scene.objects):
        raise IndexError(f"object index {object_index} out of range")
    if samples < 2:
        raise ValueError("samples must be >= 2")
    return face_visibility(scene.objects[object_index], scene.shelf, scene.boxes(exclude=object_index), samples)


def observe(scene: Scene, v_detect: float = DEFAULT_V_DETECT, samples: int = DEFAULT_SAMPLES) -> VisibilityReport:
    if not 0 < v_detect <= 1:
        raise ValueError("v_detect must be in (0, 1]")
    fractions = {o.name: visibility_fraction(scene, i, samples) for i, o in enumerate(scene.objects)}
    detected = frozenset(n for n, f in fractions.items() if f >= v_detect)
    return VisibilityReport(fractions, detected)


# --- scene files -------------------------------------------------------------


def _r(v: float) -> float:
    return round(float(v), 6)


def scene_to_dict(scene: Scene) -> dict:
    s = scene.shelf
    return {
        "shelf": {
            "width": _r(s.width),
            "depth": _r(s.depth),
            "height": _r(s.height),
            "camera_offset": _r(s.camera_offset),
        },
        "objects": [
            {
                "name": o.name,
                "dims": [_r(v) for v in o.spec.dims],
                "position": [_r(v) for v in o.position],
                "category_path": list(o.spec.category_path),
            }
            for o in scene.objects
        ],
        "target": scene.target.name,
    }


def scene_from_dict(data: dict) -> Scene:
    shelf = ShelfSpec(**data["shelf"])
    objs = tuple(
        PlacedObject(ObjectSpec(o["name"], tuple(o["dims"]), tuple(o.get("category_path", ()))), tuple(o["position"]))
        for o in data["objects"]
    )
    names = [o.name for o in objs]
    return Scene(shelf, objs, names.index(data["target"]))


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1) + "\n")


def load_scene(path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))
