"""3D primitives for axis-aligned indoor scenes.

Directions use a z-polar spherical convention::

    x = sin(theta) cos(phi),  y = sin(theta) sin(phi),  z = cos(theta)

with ``phi`` in [0, 2*pi) and ``theta`` in [0, pi]. Actions are stored as
absolute world-frame directions.

Example:
    >>> import numpy as np
    >>> from raysurrogate.geometry import AngleAction, dir_from_angles
    >>> np.allclose(dir_from_angles(AngleAction(0.0, np.pi / 2)), [1, 0, 0])
    True
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

Vector = NDArray[np.float64]

TWO_PI = 2.0 * math.pi
UNIT_TOL = 1e-9
SELF_HIT_GUARD = 1e-9
LAUNCH_OFFSET = 1e-6
AXIS_NAMES = ("X", "Y", "Z")
# in-plane coordinate indices for a plane whose normal lies along each axis
PLANE_UV = ((1, 2), (0, 2), (0, 1))


class GeometryError(ValueError):
    pass


def vec3(x, y=None, z=None) -> Vector:
    if y is None:
        arr = np.asarray(x, dtype=np.float64).reshape(3)
    else:
        arr = np.array([x, y, z], dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"non-finite vector {arr}")
    return arr


def normalize(v: Sequence[float]) -> Vector:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise GeometryError("cannot normalize a zero vector")
    return v / n


@dataclass(frozen=True)
class AngleAction:
    """Outgoing direction as (phi, theta); phi is wrapped on construction."""

    phi: float
    theta: float

    def __post_init__(self):
        phi = float(self.phi)
        theta = float(self.theta)
        if not (math.isfinite(phi) and math.isfinite(theta)):
            raise GeometryError(f"non-finite angles ({phi}, {theta})")
        if theta < -1e-12 or theta > math.pi + 1e-12:
            raise GeometryError(f"theta {theta} outside [0, pi]")
        theta = min(max(theta, 0.0), math.pi)
        phi = math.fmod(phi, TWO_PI)
        if phi < 0.0:
            phi += TWO_PI
        if phi >= TWO_PI:
            phi = 0.0
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "theta", theta)

    def as_tuple(self) -> tuple[float, float]:
        return (self.phi, self.theta)


def dir_from_angles(a: AngleAction) -> Vector:
    st = math.sin(a.theta)
    return np.array([st * math.cos(a.phi), st * math.sin(a.phi), math.cos(a.theta)])


def angles_from_dir(v: Sequence[float]) -> AngleAction:
    v = np.asarray(v, dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
        raise GeometryError(f"direction {v} is not unit norm")
    rho = math.hypot(v[0], v[1])
    theta = math.atan2(rho, v[2])
    phi = 0.0 if rho == 0.0 else math.atan2(v[1], v[0])
    return AngleAction(phi, theta)


def dirs_from_angles(angles: NDArray) -> NDArray:
    """Vectorized ``dir_from_angles`` over an ``(..., 2)`` array of (phi, theta)."""
    angles = np.asarray(angles, dtype=np.float64)
    phi, theta = angles[..., 0], angles[..., 1]
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def angles_from_dirs(dirs: NDArray) -> NDArray:
    """Vectorized inverse of ``dirs_from_angles``; inputs need not be normalized."""
    dirs = np.asarray(dirs, dtype=np.float64)
    rho = np.hypot(dirs[..., 0], dirs[..., 1])
    theta = np.arctan2(rho, dirs[..., 2])
    phi = np.where(rho == 0.0, 0.0, np.mod(np.arctan2(dirs[..., 1], dirs[..., 0]), TWO_PI))
    phi = np.where(phi >= TWO_PI, 0.0, phi)
    return np.stack([phi, theta], axis=-1)


def angle_between(u: Sequence[float], v: Sequence[float]) -> float:
    """Geodesic angle between two (not necessarily unit) vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return math.atan2(float(np.linalg.norm(np.cross(u, v))), float(np.dot(u, v)))


def angular_distance(a: AngleAction, b: AngleAction) -> float:
    return angle_between(dir_from_angles(a), dir_from_angles(b))


@dataclass(frozen=True)
class Material:
    name: str
    reflective: bool = True
    transmissive: bool = False
    reflection_loss_db: float = 6.0
    transmission_loss_db: float = 10.0

    def __post_init__(self):
        if not (self.reflective or self.transmissive):
            raise GeometryError(f"material {self.name!r} neither reflects nor transmits")
        for loss in (self.reflection_loss_db, self.transmission_loss_db):
            if not math.isfinite(loss) or loss < 0:
                raise GeometryError(f"material {self.name!r} has invalid loss {loss}")

    @property
    def dual(self) -> bool:
        return self.reflective and self.transmissive


CONCRETE = Material("concrete", True, False, 6.0, 10.0)
GLASS = Material("glass", False, True, 6.0, 10.0)
DRYWALL = Material("drywall", True, True, 6.0, 10.0)


@dataclass(frozen=True)
class Surface:
    """Bounded axis-aligned rectangle; ``rect_*`` are (u, v) in ``PLANE_UV`` order."""

    axis: int
    offset: float
    rect_min: tuple[float, float]
    rect_max: tuple[float, float]
    material: Material = CONCRETE

    def __post_init__(self):
        if self.axis not in (0, 1, 2):
            raise GeometryError(f"axis must be 0, 1 or 2, got {self.axis}")
        object.__setattr__(self, "offset", float(self.offset))
        object.__setattr__(self, "rect_min", tuple(float(c) for c in self.rect_min))
        object.__setattr__(self, "rect_max", tuple(float(c) for c in self.rect_max))
        if not all(lo < hi for lo, hi in zip(self.rect_min, self.rect_max)):
            raise GeometryError(f"degenerate surface extent {self.rect_min}..{self.rect_max}")

    @property
    def normal(self) -> Vector:
        n = np.zeros(3)
        n[self.axis] = 1.0
        return n

    def contains(self, p: Sequence[float], tol: float = 1e-9) -> bool:
        u, v = PLANE_UV[self.axis]
        return (
            abs(p[self.axis] - self.offset) <= tol
            and self.rect_min[0] - tol <= p[u] <= self.rect_max[0] + tol
            and self.rect_min[1] - tol <= p[v] <= self.rect_max[1] + tol
        )


@dataclass(frozen=True, eq=False)
class Scene:
    bounds_min: Vector
    bounds_max: Vector
    surfaces: tuple[Surface, ...]
    id: str = "scene"
    _packed: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        bmin = vec3(self.bounds_min)
        bmax = vec3(self.bounds_max)
        object.__setattr__(self, "bounds_min", bmin)
        object.__setattr__(self, "bounds_max", bmax)
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        if not np.all(bmin < bmax):
            raise GeometryError(f"bounds_min {bmin} must be below bounds_max {bmax}")
        _validate_scene(self)
        axes = np.array([s.axis for s in self.surfaces], dtype=np.int64)
        planes = np.array(
            [[s.offset, s.rect_min[0], s.rect_min[1], s.rect_max[0], s.rect_max[1]] for s in self.surfaces],
            dtype=np.float64,
        )
        object.__setattr__(self, "_packed", (axes, planes))

    @property
    def packed(self) -> tuple[NDArray, NDArray]:
        """(axes, planes) arrays consumed by the tracing kernels."""
        return self._packed

    @property
    def size(self) -> Vector:
        return self.bounds_max - self.bounds_min


def _validate_scene(scene: Scene) -> None:
    bmin, bmax = scene.bounds_min, scene.bounds_max
    for s in scene.surfaces:
        if not (bmin[s.axis] - 1e-9 <= s.offset <= bmax[s.axis] + 1e-9):
            raise GeometryError(f"surface offset {s.offset} outside scene bounds on axis {s.axis}")
    for axis in range(3):
        u, v = PLANE_UV[axis]
        for off in (bmin[axis], bmax[axis]):
            covered = any(
                s.axis == axis
                and abs(s.offset - off) <= 1e-9
                and s.rect_min[0] <= bmin[u] + 1e-9
                and s.rect_min[1] <= bmin[v] + 1e-9
                and s.rect_max[0] >= bmax[u] - 1e-9
                and s.rect_max[1] >= bmax[v] - 1e-9
                for s in scene.surfaces
            )
            if not covered:
                raise GeometryError(f"missing boundary face {AXIS_NAMES[axis]}={off}")
    surfs = scene.surfaces
    for i in range(len(surfs)):
        for j in range(i + 1, len(surfs)):
            a, b = surfs[i], surfs[j]
            if a.axis != b.axis or abs(a.offset - b.offset) > 1e-9:
                continue
            if all(
                min(a.rect_max[k], b.rect_max[k]) - max(a.rect_min[k], b.rect_min[k]) > 1e-9
                for k in range(2)
            ):
                raise GeometryError(f"surfaces {i} and {j} overlap in plane {AXIS_NAMES[a.axis]}={a.offset}")


def box_faces(bounds_min, bounds_max, material: Material = CONCRETE) -> list[Surface]:
    """The six boundary faces of an axis-aligned box."""
    bmin, bmax = vec3(bounds_min), vec3(bounds_max)
    faces = []
    for axis in range(3):
        u, v = PLANE_UV[axis]
        for off in (bmin[axis], bmax[axis]):
            faces.append(Surface(axis, off, (bmin[u], bmin[v]), (bmax[u], bmax[v]), material))
    return faces


def empty_box(size=(10.0, 10.0, 3.0), material: Material = CONCRETE, scene_id: str = "empty-box") -> Scene:
    return Scene(np.zeros(3), vec3(size), box_faces(np.zeros(3), size, material), scene_id)


def intersect(origin: Sequence[float], direction: Sequence[float], s: Surface) -> Optional[tuple[Vector, float]]:
    """Nearest forward hit of a ray with a bounded surface, or None."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    k = s.axis
    if abs(d[k]) < 1e-12:
        return None
    t = (s.offset - o[k]) / d[k]
    if t <= SELF_HIT_GUARD:
        return None
    p = o + t * d
    p[k] = s.offset
    u, v = PLANE_UV[k]
    if not (s.rect_min[0] - 1e-9 <= p[u] <= s.rect_max[0] + 1e-9 and s.rect_min[1] - 1e-9 <= p[v] <= s.rect_max[1] + 1e-9):
        return None
    return p, float(t)


def reflect(direction: Sequence[float], normal: Sequence[float]) -> Vector:
    d = np.asarray(direction, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    r = d - 2.0 * np.dot(d, n) * n
    return r / np.linalg.norm(r)


def in_bounds(scene: Scene, p: Sequence[float]) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return bool(np.all(p >= scene.bounds_min) and np.all(p <= scene.bounds_max))


def mirror_point(p: Sequence[float], s: Surface) -> Vector:
    q = np.array(p, dtype=np.float64)
    q[s.axis] = 2.0 * s.offset - q[s.axis]
    return q
