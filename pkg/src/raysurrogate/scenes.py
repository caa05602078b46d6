"""Parametric indoor scene generation."""

from __future__ import annotations

import numpy as np

from .geometry import CONCRETE, DRYWALL, GLASS, Material, Scene, Surface, box_faces, PLANE_UV

MATERIALS = {m.name: m for m in (CONCRETE, GLASS, DRYWALL)}


def generate_room(
    size=(10.0, 10.0, 3.0),
    n_walls: int = 2,
    materials: tuple[str, ...] = ("concrete", "glass", "drywall"),
    seed: int = 0,
    wall_material: str = "concrete",
    min_gap: float = 1.5,
    scene_id: str | None = None,
) -> Scene:
    """Box room with ``n_walls`` full-height partial partitions.

    Each partition spans 40-70% of the room along its plane and leaves an
    opening at one end so that rooms stay connected.
    """
    rng = np.random.default_rng(seed)
    size = np.asarray(size, dtype=np.float64)
    bmin, bmax = np.zeros(3), size
    surfaces = box_faces(bmin, bmax, MATERIALS[wall_material])
    used: dict[int, list[float]] = {0: [], 1: []}
    for w in range(n_walls):
        for _ in range(100):
            axis = int(rng.integers(0, 2))
            off = float(np.round(rng.uniform(min_gap, size[axis] - min_gap), 2))
            if all(abs(off - o) >= min_gap for o in used[axis]):
                break
        else:
            raise ValueError(f"could not place {n_walls} partitions with gap {min_gap}")
        used[axis].append(off)
        along = PLANE_UV[axis][0]  # the horizontal in-plane axis
        span = float(rng.uniform(0.4, 0.7)) * size[along]
        if rng.random() < 0.5:
            lo, hi = 0.0, span
        else:
            lo, hi = size[along] - span, size[along]
        mat = MATERIALS[materials[int(rng.integers(0, len(materials)))]]
        surfaces.append(Surface(axis, off, (round(lo, 2), 0.0), (round(hi, 2), size[2]), mat))
    return Scene(bmin, bmax, surfaces, scene_id or f"room-s{seed}-w{n_walls}")


def interior_surfaces(scene: Scene) -> list[Surface]:
    out = []
    for s in scene.surfaces:
        if not (abs(s.offset - scene.bounds_min[s.axis]) <= 1e-9 or abs(s.offset - scene.bounds_max[s.axis]) <= 1e-9):
            out.append(s)
    return out


def distance_to_surface(p, s: Surface) -> float:
    p = np.asarray(p, dtype=np.float64)
    u, v = PLANE_UV[s.axis]
    du = max(s.rect_min[0] - p[u], 0.0, p[u] - s.rect_max[0])
    dv = max(s.rect_min[1] - p[v], 0.0, p[v] - s.rect_max[1])
    return float(np.sqrt((p[s.axis] - s.offset) ** 2 + du * du + dv * dv))


def clear_of_walls(scene: Scene, p, margin: float) -> bool:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < scene.bounds_min + margin) or np.any(p > scene.bounds_max - margin):
        return False
    return all(distance_to_surface(p, s) > margin for s in interior_surfaces(scene))


def material_by_name(name: str) -> Material:
    return MATERIALS[name]
