"""Pure numpy tracing kernels; the fallback for :mod:`raysurrogate._ext.ckernels`."""

from __future__ import annotations

import numpy as np

from .geometry import PLANE_UV


def first_hits(origins, dirs, axes, planes, tmin):
    """Nearest forward surface hit per ray.

    Returns ``(t, idx)``: hit distances (``inf`` on a miss) and surface
    indices (``-1`` on a miss). Ties go to the lowest surface index.
    """
    m = origins.shape[0]
    t_best = np.full(m, np.inf)
    idx_best = np.full(m, -1, dtype=np.int64)
    for j in range(axes.shape[0]):
        k = int(axes[j])
        u, v = PLANE_UV[k]
        dk = dirs[:, k]
        ok = np.abs(dk) >= 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (planes[j, 0] - origins[:, k]) / dk
            pu = origins[:, u] + t * dirs[:, u]
            pv = origins[:, v] + t * dirs[:, v]
        ok &= t > tmin
        ok &= t < t_best
        ok &= (pu >= planes[j, 1] - 1e-9) & (pu <= planes[j, 3] + 1e-9)
        ok &= (pv >= planes[j, 2] - 1e-9) & (pv <= planes[j, 4] + 1e-9)
        t_best = np.where(ok, t, t_best)
        idx_best = np.where(ok, j, idx_best)
    return t_best, idx_best


def segment_point_distances(starts, ends, p):
    """Distance from ``p`` to each closed segment and the clamped closest-point parameter."""
    e = ends - starts
    s = p[None, :] - starts
    l2 = e[:, 0] * e[:, 0] + e[:, 1] * e[:, 1] + e[:, 2] * e[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (s[:, 0] * e[:, 0] + s[:, 1] * e[:, 1] + s[:, 2] * e[:, 2]) / l2
    u = np.where(l2 > 0.0, np.clip(u, 0.0, 1.0), 0.0)
    c = s - u[:, None] * e
    dist = np.sqrt(c[:, 0] * c[:, 0] + c[:, 1] * c[:, 1] + c[:, 2] * c[:, 2])
    return dist, u
