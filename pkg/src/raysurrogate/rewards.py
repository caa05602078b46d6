"""Sequence-level objectives: angular set loss, geometric penalties, fitness and training loss.

All penalty terms are non-positive, so a physically valid ray that reaches
the receiver scores ``p_angle == 0`` and every violation lowers the fitness.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import Scene, angle_between
from .tracer import InteractionType, N_TYPES

# a direction change below this counts as unchanged
DIRECTION_TOL = 1e-9
PENETRATION_PENALTY = 10.0


@dataclass(frozen=True)
class RewardConfig:
    gamma: float = 0.9
    eps_ang: float = 1e-6
    d0: float = 0.3
    alpha: float = 1.0
    c_ob: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.eps_ang <= 0 or self.d0 <= 0 or self.alpha < 0 or self.c_ob <= 0:
            raise ValueError(f"invalid reward config {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def step_weights(n: int, gamma: float) -> np.ndarray:
    """Decreasing per-step weights gamma**j normalized to sum to one."""
    w = gamma ** np.arange(n, dtype=np.float64)
    return w / w.sum()


def _dirs(seq) -> np.ndarray:
    return seq.dirs() if hasattr(seq, "dirs") else np.asarray(seq, dtype=np.float64).reshape(-1, 3)


def hop_errors(gt_dirs: np.ndarray, pred_dirs: np.ndarray) -> np.ndarray:
    """Per-step angular gaps over the longer of the two sequences; unmatched steps cost pi."""
    n_gt, n_pred = len(gt_dirs), len(pred_dirs)
    n = max(n_gt, n_pred)
    err = np.full(n, math.pi)
    for j in range(min(n_gt, n_pred)):
        err[j] = angle_between(gt_dirs[j], pred_dirs[j])
    return err


def l_ray(gt, pred, cfg: RewardConfig) -> float:
    """Weighted log angular gap between two hop-action sequences.

    ``gt`` and ``pred`` may be records/rays (anything with ``dirs()``) or
    ``(L, 3)`` arrays of directions.
    """
    g, p = _dirs(gt), _dirs(pred)
    if len(g) == 0 or len(p) == 0:
        raise ValueError("l_ray needs nonempty sequences")
    err = hop_errors(g, p)
    w = step_weights(len(err), cfg.gamma)
    return float(np.sum(w * np.log(np.maximum(err, cfg.eps_ang))))


def ob(pred, scene: Scene, cfg: RewardConfig) -> float:
    states = pred.states()
    outside = np.any((states < scene.bounds_min) | (states > scene.bounds_max), axis=1)
    return -cfg.c_ob * float(np.count_nonzero(outside))


def te(pred, rx, cfg: RewardConfig, miss_distance: Optional[float] = None) -> float:
    """Termination penalty from the final segment's miss distance."""
    d = pred.miss_distance if miss_distance is None else miss_distance
    if d < cfg.d0:
        return 0.0
    return -math.exp(d)


def bu_terms(dirs: np.ndarray, types: Sequence[InteractionType]) -> np.ndarray:
    """Per-hop geometric consistency penalties.

    A reflection hop compares the per-axis magnitudes of its outgoing
    direction with the incoming one; a penetration hop must keep the
    incoming direction.
    """
    out = np.zeros(len(types))
    for j in range(1, len(types)):
        t = types[j]
        if t == InteractionType.REFLECTION:
            m = float(np.min(np.abs(dirs[j]) - np.abs(dirs[j - 1])))
            out[j] = 0.0 if abs(m) <= DIRECTION_TOL else -abs(m)
        elif t == InteractionType.PENETRATION:
            if angle_between(dirs[j - 1], dirs[j]) > DIRECTION_TOL:
                out[j] = -PENETRATION_PENALTY
    return out


def bu(pred) -> float:
    return float(np.sum(bu_terms(pred.dirs(), pred.types())))


def p_angle(pred, scene: Scene, rx, cfg: RewardConfig) -> float:
    return ob(pred, scene, cfg) + bu(pred) + te(pred, rx, cfg)


def r_sbs(pred, gt_set: Sequence, scene: Scene, rx, cfg: RewardConfig) -> float:
    """Fitness of a predicted ray against the pair's ground-truth set."""
    if not gt_set:
        raise ValueError("r_sbs needs a nonempty ground-truth set")
    pen = p_angle(pred, scene, rx, cfg)
    best = min(l_ray(g, pred, cfg) for g in gt_set)
    return -(best - pen)


def max_fitness(cfg: RewardConfig) -> float:
    """Fitness attained by an exact, physically valid match."""
    return -math.log(cfg.eps_ang)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def type_ce(gt_types: Sequence[int], pred_logits) -> np.ndarray:
    """Per-step cross-entropy of type logits against integer targets."""
    logits = np.asarray(pred_logits, dtype=np.float64).reshape(-1, N_TYPES)
    t = np.asarray([int(x) for x in gt_types], dtype=np.int64)
    if len(t) != len(logits):
        raise ValueError(f"{len(t)} type targets but {len(logits)} logit rows")
    return -_log_softmax(logits)[np.arange(len(t)), t]


def l_type(gt_types: Sequence[int], pred_logits) -> float:
    ce = type_ce(gt_types, pred_logits)
    return float(ce.mean()) if len(ce) else 0.0


def l_t_terms(pred_dirs, pred_logits, gt_set: Sequence, cfg: RewardConfig) -> tuple[int, list[float]]:
    """Per-candidate training loss values and the index of the minimum (first on ties)."""
    if not gt_set:
        raise ValueError("l_t needs a nonempty ground-truth set")
    p = _dirs(pred_dirs)
    logits = np.asarray(pred_logits, dtype=np.float64).reshape(-1, N_TYPES)
    values = []
    for g in gt_set:
        n = min(len(g), len(logits))
        ce = type_ce([int(t) for t in g.types()[:n]], logits[:n])
        values.append(cfg.alpha * l_ray(g, p, cfg) + float(ce.sum()))
    k = int(np.argmin(values))
    return k, values


def l_t(pred_dirs, pred_logits, gt_set: Sequence, cfg: RewardConfig) -> float:
    k, values = l_t_terms(pred_dirs, pred_logits, gt_set, cfg)
    return values[k]
