"""Fibonacci-sphere lattice and lattice-snapped action augmentation."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .dataset import SbsRecord, compute_returns_to_go, segment_ray
from .geometry import LAUNCH_OFFSET, AngleAction, Scene, angles_from_dir, dir_from_angles
from .rewards import RewardConfig, r_sbs
from .tracer import RayDataset, RaySequence, TraceConfig, _branches, _worker_count, first_hit, replay

GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0


@lru_cache(maxsize=8)
def _lattice(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    phi = i * (2.0 * math.pi * (2.0 - GOLDEN))
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    pts.setflags(write=False)
    return pts


def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` quasi-uniform unit vectors: z_i = 1 - (2i+1)/n, phi_i = i * 2pi(2 - golden ratio)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return _lattice(int(n)).copy()


@dataclass(frozen=True)
class FibConfig:
    n_points: int = 4096
    sigma_phi: float = 0.05
    sigma_theta: float = 0.05
    per_ray_augments: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if self.sigma_phi < 0 or self.sigma_theta < 0 or self.per_ray_augments < 0:
            raise ValueError(f"invalid augmentation config {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def snap_to_lattice(v, n: int) -> np.ndarray:
    """Nearest lattice direction (first index on ties)."""
    pts = _lattice(int(n))
    return pts[int(np.argmax(pts @ np.asarray(v, dtype=np.float64)))].copy()


def perturb_action(a: AngleAction, cfg: FibConfig, rng: np.random.Generator) -> AngleAction:
    """Gaussian angle offsets followed by a snap onto the lattice."""
    dphi, dtheta = rng.normal(0.0, 1.0, size=2)
    phi = a.phi + cfg.sigma_phi * dphi
    theta = a.theta + cfg.sigma_theta * dtheta
    # walking over a pole continues on the far meridian
    if theta < 0.0:
        theta, phi = -theta, phi + math.pi
    elif theta > math.pi:
        theta, phi = 2.0 * math.pi - theta, phi + math.pi
    v = snap_to_lattice(dir_from_angles(AngleAction(phi, theta)), cfg.n_points)
    return angles_from_dir(v / np.linalg.norm(v))


def _draw_dirs(r: RaySequence, scene: Scene, cfg: FibConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Perturbed launch, then at each later hop the physical continuation nearest the perturbed target."""
    dirs = [dir_from_angles(perturb_action(r.hops[0].action, cfg, rng))]
    s = r.tx
    for j in range(1, len(r.hops)):
        target = dir_from_angles(perturb_action(r.hops[j].action, cfg, rng))
        d = dirs[-1]
        p, idx, _ = first_hit(scene, s + (LAUNCH_OFFSET * d if j > 1 else 0.0), d)
        if p is None:
            break
        branches = _branches(scene.surfaces[idx], d)
        k = int(np.argmax([float(np.dot(v, target)) for _, v in branches]))
        dirs.append(branches[k][1])
        s = p
    return dirs


def fib_augment(
    r: RaySequence,
    scene: Scene,
    rx,
    cfg: FibConfig,
    trace_cfg: TraceConfig,
    gt_set: Optional[Sequence[RaySequence]] = None,
    reward_cfg: Optional[RewardConfig] = None,
    ray_index: int = 0,
) -> list[SbsRecord]:
    """Physically re-traced perturbations of one ground-truth ray.

    Each attempt perturbs every hop action; the launch direction is used as
    drawn, later hops take the material-allowed continuation closest to their
    perturbed target, so every augmented hop obeys the reflection and
    penetration laws. The terminal reward is the fitness against ``gt_set``.
    """
    if not r.reached:
        raise ValueError("only reached rays can be augmented")
    gt_set = list(gt_set) if gt_set else [r]
    reward_cfg = reward_cfg or RewardConfig(d0=trace_cfg.d0)
    out = []
    for attempt in range(cfg.per_ray_augments):
        rng = np.random.default_rng([cfg.seed, ray_index, attempt])
        dirs = _draw_dirs(r, scene, cfg, rng)
        aug = replay(scene, r.tx, rx, dirs, trace_cfg.d0)
        reward = r_sbs(aug, gt_set, scene, rx, reward_cfg)
        rec = SbsRecord(aug.hops, aug.tx, aug.rx, [], True, aug.miss_distance, aug.path_length, aug.reached)
        out.append(compute_returns_to_go(rec, reward))
    return out


def shuffle_mix(gt: Sequence[SbsRecord], aug: Sequence[SbsRecord], rng: np.random.Generator) -> list[SbsRecord]:
    pool = list(gt) + list(aug)
    order = rng.permutation(len(pool))
    return [pool[i] for i in order]


def build_training_records(
    ds: RayDataset,
    scene: Scene,
    fib: Optional[FibConfig],
    reward_cfg: RewardConfig,
    max_hops: Optional[int] = None,
) -> list[SbsRecord]:
    """Ground-truth records (with their own fitness) plus augmented records, seeded-shuffled.

    ``max_hops`` drops rays longer than the model context. Work is spread
    over threads per pair; results are merged in pair order.
    """
    jobs = []
    for p, rec in enumerate(ds.records):
        for i, ray in enumerate(rec.rays):
            if max_hops is None or len(ray) <= max_hops:
                jobs.append((p, i, ray))

    def work(job):
        p, i, ray = job
        gt_set = ds.records[p].rays
        base = segment_ray(ray, pair=p)
        base = compute_returns_to_go(base, r_sbs(ray, gt_set, scene, ray.rx, reward_cfg))
        augs = []
        if fib is not None and fib.per_ray_augments > 0:
            augs = fib_augment(ray, scene, ray.rx, fib, ds.trace_config, gt_set, reward_cfg, ray_index=p * 1000 + i)
            for a in augs:
                a.pair = p
        return base, augs

    with ThreadPoolExecutor(max_workers=_worker_count()) as ex:
        results = list(ex.map(work, jobs))
    gt = [b for b, _ in results]
    aug = [a for _, augs in results for a in augs]
    seed = fib.seed if fib is not None else 0
    return shuffle_mix(gt, aug, np.random.default_rng(seed))


def save_records(records: Sequence[SbsRecord], ds: RayDataset, path) -> None:
    """Write training records as a ray dataset keyed by the pairs of ``ds``.

    Each ray carries its return, whether it is augmented, and its position in
    the shuffled record order, so that ``load_records`` restores the list.
    """
    from .io import save_dataset
    from .tracer import PairRecord

    rays: list[list[RaySequence]] = [[] for _ in ds.records]
    extras: list[list[dict]] = [[] for _ in ds.records]
    for k, rec in enumerate(records):
        rays[rec.pair].append(rec.to_ray())
        extras[rec.pair].append({"augmented": rec.is_augmented, "return": rec.reward_to_go[0], "order": k})
    out = RayDataset(ds.scene_id, [PairRecord(r.tx, r.rx, rs) for r, rs in zip(ds.records, rays)], ds.trace_config)
    save_dataset(out, path, extras)


def load_records(path) -> tuple[list[SbsRecord], RayDataset]:
    from .io import FormatError, load_dataset

    ds, extras = load_dataset(path, with_extras=True)
    flat = []
    for p, (rec, ex) in enumerate(zip(ds.records, extras)):
        for r, e in zip(rec.rays, ex):
            if not {"augmented", "return", "order"} <= e.keys():
                raise FormatError(f"{path} is not an augmented dataset")
            sr = SbsRecord(list(r.hops), r.tx, r.rx, [float(e["return"])] * len(r), bool(e["augmented"]),
                           r.miss_distance, r.path_length, r.reached, p)
            flat.append((int(e["order"]), sr))
    flat.sort(key=lambda x: x[0])
    return [r for _, r in flat], ds
