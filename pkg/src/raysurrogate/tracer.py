"""Deterministic shooting-and-bouncing ray simulator.

``step`` is the single-hop transition, ``shoot_and_bounce`` the exhaustive
lattice search that produces ground-truth ray sets, ``replay`` re-casts an
arbitrary action sequence (used for augmentation and model rollouts), and
``image_method_reference`` is an analytic oracle for specular paths.
"""

from __future__ import annotations

import itertools
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .geometry import (
    LAUNCH_OFFSET,
    AngleAction,
    GeometryError,
    Scene,
    Surface,
    Vector,
    angles_from_dir,
    angles_from_dirs,
    dir_from_angles,
    in_bounds,
    mirror_point,
    normalize,
    reflect,
)

log = logging.getLogger(__name__)

ESCAPE_DISTANCE = 1.0


class InteractionType(IntEnum):
    LAUNCH = 0
    REFLECTION = 1
    DIFFRACTION = 2
    PENETRATION = 3
    ARRIVAL = 4

    @property
    def short(self) -> str:
        return "LRDPA"[self.value]


N_TYPES = len(InteractionType)


class NoIntersection(GeometryError):
    """A ray escaped every surface; the scene is not closed."""


@dataclass
class Hop:
    state: Vector
    action: AngleAction
    itype: InteractionType


@dataclass
class RaySequence:
    hops: list[Hop]
    tx: Vector
    rx: Vector
    reached: bool
    miss_distance: float
    path_length: float
    # model type readout, recorded by generation alongside the geometric types
    predicted_types: Optional[list[InteractionType]] = None

    def __len__(self) -> int:
        return len(self.hops)

    def states(self) -> np.ndarray:
        return np.array([h.state for h in self.hops], dtype=np.float64).reshape(-1, 3)

    def angles(self) -> np.ndarray:
        return np.array([h.action.as_tuple() for h in self.hops], dtype=np.float64).reshape(-1, 2)

    def dirs(self) -> np.ndarray:
        return np.array([dir_from_angles(h.action) for h in self.hops]).reshape(-1, 3)

    def types(self) -> list[InteractionType]:
        return [h.itype for h in self.hops]

    def type_string(self) -> str:
        return "".join(t.short for t in self.types())


@dataclass(frozen=True)
class TraceConfig:
    """Lattice search settings.

    ``max_depth`` counts interactions (bounces/penetrations), so a traced ray
    has at most ``max_depth + 1`` hops.
    """

    n_dirs: int = 16384
    max_depth: int = 2
    d0: float = 0.3
    max_rays: int = 30
    allow_penetration: bool = True

    def __post_init__(self):
        if self.n_dirs < 1 or self.max_depth < 0 or self.d0 <= 0 or self.max_rays < 1:
            raise ValueError(f"invalid trace config {self}")

    @property
    def max_hops(self) -> int:
        return self.max_depth + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PairRecord:
    tx: Vector
    rx: Vector
    rays: list[RaySequence]


@dataclass
class RayDataset:
    scene_id: str
    records: list[PairRecord]
    trace_config: TraceConfig = field(default_factory=TraceConfig)

    def pairs(self) -> list[tuple[Vector, Vector]]:
        return [(r.tx, r.rx) for r in self.records]


@dataclass
class StepResult:
    point: Vector
    itype: InteractionType
    out_action: AngleAction
    surface_index: int
    # every physically allowed continuation; two entries on dual materials
    branches: tuple[tuple[InteractionType, AngleAction], ...]


def first_hit(scene: Scene, origin, direction) -> tuple[Optional[Vector], int, float]:
    """Nearest surface hit as (point, surface index, distance); point is None on escape."""
    axes, planes = scene.packed
    t, idx = kernels.first_hits(np.asarray(origin, dtype=np.float64)[None, :],
                                np.asarray(direction, dtype=np.float64)[None, :], axes, planes)
    j = int(idx[0])
    if j < 0:
        return None, -1, math.inf
    p = np.asarray(origin, dtype=np.float64) + t[0] * np.asarray(direction, dtype=np.float64)
    s = scene.surfaces[j]
    p[s.axis] = s.offset
    return p, j, float(t[0])


def _branches(surface: Surface, d: Vector, allow_penetration: bool = True):
    out = []
    if surface.material.reflective:
        out.append((InteractionType.REFLECTION, reflect(d, surface.normal)))
    if surface.material.transmissive and allow_penetration:
        out.append((InteractionType.PENETRATION, d.copy()))
    return out


def step(scene: Scene, s: Sequence[float], a: AngleAction) -> StepResult:
    s = np.asarray(s, dtype=np.float64)
    d = dir_from_angles(a)
    p, j, _ = first_hit(scene, s + LAUNCH_OFFSET * d, d)
    if p is None:
        raise NoIntersection(f"ray from {s} along {d} escapes the scene")
    surf = scene.surfaces[j]
    branches = tuple((t, angles_from_dir(v)) for t, v in _branches(surf, d))
    itype, out = branches[0]
    return StepResult(p, itype, out, j, branches)


def receiver_check(rx, d0: float, seg_start, seg_end) -> tuple[bool, float]:
    dist, _ = kernels.segment_point_distances(np.asarray(seg_start)[None, :], np.asarray(seg_end)[None, :], np.asarray(rx))
    miss = float(dist[0])
    return miss <= d0, miss


def _make_ray(states, dirs, types, tx, rx, reached, miss, path_length) -> RaySequence:
    angles = angles_from_dirs(np.asarray(dirs))
    hops = [
        Hop(np.array(states[i], dtype=np.float64), AngleAction(angles[i, 0], angles[i, 1]), InteractionType(int(types[i])))
        for i in range(len(states))
    ]
    return RaySequence(hops, np.array(tx, dtype=np.float64), np.array(rx, dtype=np.float64), bool(reached), float(miss), float(path_length))


def line_of_sight(scene: Scene, tx, rx) -> Optional[RaySequence]:
    """Analytic direct ray, or None if any surface blocks it."""
    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    delta = rx - tx
    dist = float(np.linalg.norm(delta))
    d = delta / dist
    _, _, t = first_hit(scene, tx, d)
    if t < dist:
        return None
    return _make_ray([tx], [d], [InteractionType.LAUNCH], tx, rx, True, 0.0, dist)


def detection_radius(path_length, d0: float, n_dirs: int):
    """Reception radius for lattice candidates: the larger of ``d0`` and the ray-tube width.

    The Fibonacci lattice covering radius is about 2.5/sqrt(n) rad; 3/sqrt(n)
    leaves margin so every exact path has at least one nearby lattice ray.
    """
    return np.maximum(d0, path_length * (3.0 / math.sqrt(n_dirs)))


def shoot_and_bounce(scene: Scene, tx, rx, cfg: TraceConfig) -> list[RaySequence]:
    """Ground-truth ray set for one (tx, rx) pair.

    Lattice rays are propagated up to ``max_depth`` interactions, branching on
    dual materials. Any segment passing within the ray-tube reception radius
    nominates its surface sequence; each nominated sequence is then refined to
    its exact path through ``rx`` and kept only if that path is unobstructed.
    """
    from .augmentation import fibonacci_sphere  # lattice lives with augmentation

    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    if not (in_bounds(scene, tx) and in_bounds(scene, rx)):
        raise GeometryError("tx and rx must lie inside the scene")
    if np.array_equal(tx, rx):
        raise GeometryError("tx and rx coincide")
    axes, planes = scene.packed
    mat_refl = np.array([s.material.reflective for s in scene.surfaces])
    mat_trans = np.array([s.material.transmissive for s in scene.surfaces]) & cfg.allow_penetration

    n = cfg.n_dirs
    cap = 4 * n
    H = cfg.max_depth + 1
    launch = fibonacci_sphere(n)
    origin_state = np.tile(tx, (n, 1))
    d = launch.copy()
    lengths = np.zeros(n)
    lattice = np.arange(n)
    surf_hist = np.zeros((n, 0), dtype=np.int64)
    type_hist = np.zeros((n, 0), dtype=np.int64)

    nominated: dict[tuple, list] = {}
    for k in range(H):
        if d.shape[0] == 0:
            break
        origin = origin_state + (LAUNCH_OFFSET * d if k > 0 else 0.0)
        t, idx = kernels.first_hits(origin, d, axes, planes)
        alive = idx >= 0
        if not np.all(alive):
            log.warning("%d rays escaped scene %s", int((~alive).sum()), scene.id)
        safe = np.where(alive, idx, 0)
        ends = np.where(alive[:, None], origin + np.where(alive, t, 0.0)[:, None] * d, origin_state)
        ends[np.arange(len(ends)), axes[safe]] = np.where(alive, planes[safe, 0], ends[np.arange(len(ends)), axes[safe]])
        seg_len = np.linalg.norm(ends - origin_state, axis=1)
        if k > 0:  # the direct ray is handled analytically
            miss, u = kernels.segment_point_distances(origin_state, ends, rx)
            unfolded = lengths + u * seg_len
            near = alive & (miss <= detection_radius(unfolded, cfg.d0, n))
            for i in np.flatnonzero(near):
                key = (tuple(int(x) for x in surf_hist[i]), tuple(int(x) for x in type_hist[i]))
                nominated.setdefault(key, []).append((float(miss[i] / max(unfolded[i], 1e-12)), int(lattice[i])))
        if k == H - 1:
            break
        parts = []
        for kind, allowed in ((InteractionType.REFLECTION, mat_refl), (InteractionType.PENETRATION, mat_trans)):
            rows = np.flatnonzero(alive & allowed[safe])
            if rows.size:
                parts.append((rows, np.full(rows.size, int(kind))))
        if not parts:
            break
        rows = np.concatenate([p[0] for p in parts])
        kinds = np.concatenate([p[1] for p in parts])
        perm = np.lexsort((kinds, rows))
        rows, kinds = rows[perm], kinds[perm]
        if rows.size > cap:
            log.warning("candidate cap %d reached; dropping %d branches", cap, rows.size - cap)
            rows, kinds = rows[:cap], kinds[:cap]
        new_d = d[rows].copy()
        refl = kinds == int(InteractionType.REFLECTION)
        ax = axes[idx[rows]]
        new_d[np.flatnonzero(refl), ax[refl]] *= -1.0
        origin_state = ends[rows]
        lengths = lengths[rows] + seg_len[rows]
        lattice = lattice[rows]
        surf_hist = np.concatenate([surf_hist[rows], idx[rows, None]], axis=1)
        type_hist = np.concatenate([type_hist[rows], kinds[:, None]], axis=1)
        d = new_d

    out = []
    for key in sorted(nominated):
        surfaces, types = key
        for _, lat in sorted(nominated[key])[:3]:
            ray = _refine(scene, tx, rx, launch[lat], surfaces, types)
            if ray is not None:
                out.append(ray)
                break
    los = line_of_sight(scene, tx, rx)
    if los is not None:
        out.append(los)
    out.sort(key=lambda r: (r.path_length, len(r), r.type_string()))
    return out[: cfg.max_rays]


def _cast(scene: Scene, tx, d, surfaces, types):
    """Follow a forced surface/interaction sequence; None if the ray strays from it."""
    states = [tx]
    dirs = [d]
    s = tx
    for k, (j_expect, kind) in enumerate(zip(surfaces, types)):
        origin = s + LAUNCH_OFFSET * d if k > 0 else s
        p, j, _ = first_hit(scene, origin, d)
        if j != j_expect:
            return None
        if kind == InteractionType.REFLECTION:
            d = d.copy()
            d[scene.surfaces[j].axis] *= -1.0
        states.append(p)
        dirs.append(d)
        s = p
    return states, dirs


def _refine(scene: Scene, tx, rx, d_init, surfaces, types, iters: int = 30) -> Optional[RaySequence]:
    """Gauss-Newton on the launch direction so the cast path passes through ``rx``."""
    d_init = normalize(d_init)
    helper = np.eye(3)[int(np.argmin(np.abs(d_init)))]
    e1 = normalize(np.cross(d_init, helper))
    e2 = np.cross(d_init, e1)

    def residual(x):
        d = normalize(d_init + x[0] * e1 + x[1] * e2)
        cast = _cast(scene, tx, d, surfaces, types)
        if cast is None:
            return None, None
        states, dirs = cast
        w = rx - states[-1]
        return w - np.dot(w, dirs[-1]) * dirs[-1], cast

    x = np.zeros(2)
    h = 1e-7
    for _ in range(iters):
        r, cast = residual(x)
        if r is None:
            return None
        if np.linalg.norm(r) < 1e-11:
            break
        J = np.empty((3, 2))
        for c in range(2):
            dx = np.zeros(2)
            dx[c] = h
            rp, _ = residual(x + dx)
            rm, _ = residual(x - dx)
            if rp is None or rm is None:
                return None
            J[:, c] = (rp - rm) / (2 * h)
        x = x - np.linalg.lstsq(J, r, rcond=None)[0]
    else:
        r, cast = residual(x)
        if r is None or np.linalg.norm(r) > 1e-8:
            return None
    states, dirs = cast
    last, d_last = states[-1], dirs[-1]
    reach = float(np.dot(rx - last, d_last))
    if reach <= 0:
        return None
    _, _, t_next = first_hit(scene, last + LAUNCH_OFFSET * d_last, d_last)
    if t_next + LAUNCH_OFFSET < reach:
        return None  # blocked before the receiver
    length = float(sum(np.linalg.norm(b - a) for a, b in zip(states[:-1], states[1:]))) + reach
    all_types = [InteractionType.LAUNCH, *(InteractionType(t) for t in types)]
    return _make_ray(states, dirs, all_types, tx, rx, True, float(np.linalg.norm(r)), length)


def replay(scene: Scene, tx, rx, dirs, d0: float, stop_on_reach: bool = False) -> RaySequence:
    """Cast an action sequence (unit directions, one per hop) from ``tx``.

    Hop types are classified geometrically from the incoming and outgoing
    directions. Continuations a material cannot support end the ray at that
    hop; an outward continuation through a boundary face appends one escape
    state outside the scene.
    """
    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    dirs = [normalize(d) for d in dirs]
    states = [tx]
    types = [InteractionType.LAUNCH]
    used = [dirs[0]]
    length = 0.0
    s = tx
    miss = math.inf
    reached = False
    for i, d in enumerate(dirs):
        origin = s + LAUNCH_OFFSET * d if i > 0 else s
        p, j, _ = first_hit(scene, origin, d)
        if p is None:
            # outward attempt from a boundary face
            esc = s + ESCAPE_DISTANCE * d
            hit, miss = receiver_check(rx, d0, s, esc)
            length += ESCAPE_DISTANCE
            states.append(esc)
            types.append(InteractionType.PENETRATION)
            used.append(d)
            reached = hit
            break
        seg = float(np.linalg.norm(p - s))
        dist, u = kernels.segment_point_distances(s[None, :], p[None, :], rx)
        miss = float(dist[0])
        reached = miss <= d0
        if (stop_on_reach and reached) or i == len(dirs) - 1:
            length += float(u[0]) * seg
            break
        length += seg
        surf = scene.surfaces[j]
        nxt = dirs[i + 1]
        crossing = (nxt[surf.axis] * d[surf.axis]) > 0.0
        itype = InteractionType.PENETRATION if crossing else InteractionType.REFLECTION
        states.append(p)
        types.append(itype)
        used.append(nxt)
        s = p
        allowed = surf.material.transmissive if crossing else surf.material.reflective
        if not allowed:
            break
    return _make_ray(states, used, types, tx, rx, reached, miss, length)


def image_method_reference(scene: Scene, tx, rx, order: int) -> list[RaySequence]:
    """Exact specular paths of exactly ``order`` reflections via mirror images."""
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    if order == 0:
        los = line_of_sight(scene, tx, rx)
        return [] if los is None else [los]
    refl = [i for i, s in enumerate(scene.surfaces) if s.material.reflective]
    out = []
    for seq in itertools.product(refl, repeat=order):
        if any(a == b for a, b in zip(seq, seq[1:])):
            continue
        path = _image_path(scene, tx, rx, seq)
        if path is not None:
            out.append(path)
    out.sort(key=lambda r: r.path_length)
    return out


def _image_path(scene: Scene, tx, rx, seq) -> Optional[RaySequence]:
    surfs = [scene.surfaces[i] for i in seq]
    images = [tx]
    for s in surfs:
        images.append(mirror_point(images[-1], s))
    points = [None] * len(surfs)
    target = rx
    for m in range(len(surfs) - 1, -1, -1):
        s = surfs[m]
        img = images[m + 1]
        denom = target[s.axis] - img[s.axis]
        if denom == 0.0:
            return None
        lam = (s.offset - img[s.axis]) / denom
        if not (0.0 < lam < 1.0):
            return None
        p = img + lam * (target - img)
        p[s.axis] = s.offset
        if not s.contains(p, tol=1e-9):
            return None
        points[m] = p
        target = p
    verts = [tx, *points, rx]
    for a, (p, q) in enumerate(zip(verts[:-1], verts[1:])):
        seg = q - p
        dist = float(np.linalg.norm(seg))
        if dist < 1e-6:
            return None  # bounce exactly on an edge
        d = seg / dist
        origin = p + LAUNCH_OFFSET * d if a > 0 else p
        _, j, t = first_hit(scene, origin, d)
        expected = seq[a] if a < len(seq) else None
        limit = dist - (LAUNCH_OFFSET if a > 0 else 0.0)
        if expected is None:
            if t < limit - 1e-9:
                return None
        elif j != expected and t < limit - 1e-9:
            return None
    dirs = [normalize(q - p) for p, q in zip(verts[:-1], verts[1:])]
    length = float(sum(np.linalg.norm(q - p) for p, q in zip(verts[:-1], verts[1:])))
    types = [InteractionType.LAUNCH] + [InteractionType.REFLECTION] * len(seq)
    return _make_ray(verts[:-1], dirs, types, tx, rx, True, 0.0, length)


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("RAYSURROGATE_THREADS", "1")))
    except ValueError:
        return 1


def generate_dataset(scene: Scene, tx_set, rx_set, cfg: TraceConfig) -> RayDataset:
    pairs = [(np.asarray(t, dtype=np.float64), np.asarray(r, dtype=np.float64)) for t in tx_set for r in rx_set]
    if not pairs:
        raise ValueError("empty tx or rx set")
    for t, r in pairs:
        if not (in_bounds(scene, t) and in_bounds(scene, r)):
            raise GeometryError(f"pair {t} -> {r} outside scene bounds")

    def trace(pair):
        t, r = pair
        return PairRecord(t, r, shoot_and_bounce(scene, t, r, cfg))

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            records = list(ex.map(trace, pairs))
    else:
        records = [trace(p) for p in pairs]
    for rec in records:
        if not rec.rays:
            log.info("pair %s -> %s has no reached rays", rec.tx.tolist(), rec.rx.tolist())
    return RayDataset(scene.id, records, cfg)
