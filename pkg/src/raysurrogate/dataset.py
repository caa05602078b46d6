"""Offline-RL material built from traced rays: records, splits, batches, statistics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .geometry import TWO_PI, Scene, dirs_from_angles
from .scenes import clear_of_walls
from .tracer import Hop, InteractionType, RaySequence

log = logging.getLogger(__name__)


@dataclass
class SbsRecord:
    """One ray as a decision sequence; ``pair`` indexes its (tx, rx) pair."""

    hops: list[Hop]
    tx: np.ndarray
    rx: np.ndarray
    reward_to_go: list[float] = field(default_factory=list)
    is_augmented: bool = False
    miss_distance: float = 0.0
    path_length: float = 0.0
    reached: bool = True
    pair: int = -1

    def __len__(self) -> int:
        return len(self.hops)

    def states(self) -> np.ndarray:
        return np.array([h.state for h in self.hops], dtype=np.float64).reshape(-1, 3)

    def angles(self) -> np.ndarray:
        return np.array([h.action.as_tuple() for h in self.hops], dtype=np.float64).reshape(-1, 2)

    def dirs(self) -> np.ndarray:
        return dirs_from_angles(self.angles())

    def types(self) -> list[InteractionType]:
        return [h.itype for h in self.hops]

    def to_ray(self) -> RaySequence:
        return RaySequence(list(self.hops), self.tx, self.rx, self.reached, self.miss_distance, self.path_length)


def segment_ray(r: RaySequence, pair: int = -1) -> SbsRecord:
    if not r.reached:
        raise ValueError("only reached rays can be segmented into training records")
    hops = [Hop(h.state.copy(), h.action, h.itype) for h in r.hops]
    return SbsRecord(hops, r.tx.copy(), r.rx.copy(), [], False, r.miss_distance, r.path_length, True, pair)


def compute_returns_to_go(rec: SbsRecord, terminal_reward: float) -> SbsRecord:
    """Terminal-only reward: every step carries the full sequence return."""
    return replace(rec, reward_to_go=[float(terminal_reward)] * len(rec))


class SplitKind(str, Enum):
    CHECKERBOARD = "checkerboard"
    GENZ = "genz"
    GENDIAG = "gendiag"


@dataclass(frozen=True)
class SplitSpec:
    kind: SplitKind = SplitKind.CHECKERBOARD
    grid_step: float = 0.5
    rx_plane_train: float = 1.2
    rx_plane_test: float = 2.0
    seed: int = 0
    tx_step: float = 1.0
    tx_z: float = 1.5
    margin: float = 0.5
    band_halfwidth: float = 0.08
    max_tx_train: Optional[int] = None
    max_tx_test: Optional[int] = None
    max_rx_train: Optional[int] = None
    max_rx_test: Optional[int] = None

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["kind"] = SplitKind(self.kind).value
        return d


@dataclass
class Splits:
    kind: SplitKind
    seed: int
    train_tx: np.ndarray
    train_rx: np.ndarray
    test_tx: np.ndarray
    test_rx: np.ndarray

    @property
    def train(self):
        return self.train_tx, self.train_rx

    @property
    def test(self):
        return self.test_tx, self.test_rx

    def to_dict(self) -> dict:
        return {
            "format": "split/1",
            "kind": SplitKind(self.kind).value,
            "seed": self.seed,
            "train": {"tx": self.train_tx.tolist(), "rx": self.train_rx.tolist()},
            "test": {"tx": self.test_tx.tolist(), "rx": self.test_rx.tolist()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Splits":
        arr = lambda x: np.array(x, dtype=np.float64).reshape(-1, 3)  # noqa: E731
        return cls(SplitKind(d["kind"]), int(d["seed"]), arr(d["train"]["tx"]), arr(d["train"]["rx"]),
                   arr(d["test"]["tx"]), arr(d["test"]["rx"]))


def _grid(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(math.floor((hi - lo) / step + 1e-9))
    start = lo + 0.5 * ((hi - lo) - n * step)
    return start + step * np.arange(n + 1)


def _plane_grid(scene: Scene, step: float, z: float, margin: float):
    """Points of a horizontal grid clear of walls, with their integer cell indices."""
    xs = _grid(scene.bounds_min[0] + margin, scene.bounds_max[0] - margin, step)
    ys = _grid(scene.bounds_min[1] + margin, scene.bounds_max[1] - margin, step)
    pts, cells = [], []
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            p = np.array([x, y, z])
            if clear_of_walls(scene, p, margin):
                pts.append(p)
                cells.append((i, j))
    return np.array(pts).reshape(-1, 3), cells


def _subsample(points: np.ndarray, k: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if k is None or len(points) <= k:
        return points
    idx = np.sort(rng.choice(len(points), size=k, replace=False))
    return points[idx]


def _diag_coord(scene: Scene, p: np.ndarray) -> np.ndarray:
    rel = (p[..., :2] - scene.bounds_min[:2]) / scene.size[:2]
    return rel[..., 0] - rel[..., 1]


def make_splits(scene: Scene, spec: SplitSpec) -> Splits:
    """Train/test location sets for one generalization setting.

    Tx always comes from a checkerboard-parity partition of a horizontal grid,
    so train and test pairs are disjoint for every kind.
    """
    kind = SplitKind(spec.kind)
    rng = np.random.default_rng(spec.seed)
    tx_pts, cells = _plane_grid(scene, spec.tx_step, spec.tx_z, spec.margin)
    parity = np.array([(i + j) % 2 for i, j in cells], dtype=int)
    train_tx = _subsample(tx_pts[parity == 0], spec.max_tx_train, rng)
    test_tx = _subsample(tx_pts[parity == 1], spec.max_tx_test, rng)

    rx_train_all, _ = _plane_grid(scene, spec.grid_step, spec.rx_plane_train, spec.margin)
    if kind == SplitKind.CHECKERBOARD:
        train_rx = _subsample(rx_train_all, spec.max_rx_train, rng)
        test_rx = train_rx.copy()
    elif kind == SplitKind.GENZ:
        if abs(spec.rx_plane_test - spec.rx_plane_train) < 1e-9:
            raise ValueError("genz needs distinct train and test receiver planes")
        train_rx = _subsample(rx_train_all, spec.max_rx_train, rng)
        rx_test_all, _ = _plane_grid(scene, spec.grid_step, spec.rx_plane_test, spec.margin)
        test_rx = _subsample(rx_test_all, spec.max_rx_test, rng)
    else:
        n_test = spec.max_rx_test or max(1, len(rx_train_all) // 10)
        test_rx = _sample_diagonal(scene, spec, n_test, rng)
        keep = np.abs(_diag_coord(scene, rx_train_all)) > spec.band_halfwidth
        cand = rx_train_all[keep]
        if len(test_rx) and len(cand):
            dist = np.linalg.norm(cand[:, None, :] - test_rx[None, :, :], axis=2).min(axis=1)
            cand = cand[dist > spec.grid_step / 2]
        train_rx = _subsample(cand, spec.max_rx_train, rng)
    if len(test_tx) == 0 or len(test_rx) == 0:
        raise ValueError(f"{kind.value} split produced an empty test set")
    if len(train_tx) == 0 or len(train_rx) == 0:
        raise ValueError(f"{kind.value} split produced an empty train set")
    return Splits(kind, spec.seed, train_tx, train_rx, test_tx, test_rx)


def _sample_diagonal(scene: Scene, spec: SplitSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Receivers on the floor-plan diagonal band at random heights."""
    out = []
    lo = scene.bounds_min + spec.margin
    hi = scene.bounds_max - spec.margin
    for _ in range(200 * n):
        if len(out) == n:
            break
        t = rng.uniform(0.0, 1.0)
        off = rng.uniform(-spec.band_halfwidth, spec.band_halfwidth)
        x = scene.bounds_min[0] + scene.size[0] * t
        y = scene.bounds_min[1] + scene.size[1] * (t - off)
        z = rng.uniform(lo[2], hi[2])
        p = np.array([x, y, z])
        if clear_of_walls(scene, p, spec.margin):
            out.append(p)
    return np.array(out).reshape(-1, 3)


@dataclass
class EpisodeBatch:
    returns_to_go: np.ndarray  # (B, L)
    states: np.ndarray  # (B, L, 3)
    actions: np.ndarray  # (B, L, 2) as (phi, theta)
    types: np.ndarray  # (B, L) int
    mask: np.ndarray  # (B, L) float 0/1
    rx: np.ndarray  # (B, 3) goal per episode

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def L_max(self) -> int:
        return self.states.shape[1]


def pad_and_batch(records: Sequence[SbsRecord], L_max: int) -> EpisodeBatch:
    B = len(records)
    rtg = np.zeros((B, L_max))
    states = np.zeros((B, L_max, 3))
    actions = np.zeros((B, L_max, 2))
    types = np.zeros((B, L_max), dtype=np.int64)
    mask = np.zeros((B, L_max))
    rx = np.zeros((B, 3))
    for b, rec in enumerate(records):
        L = len(rec)
        if L > L_max:
            raise ValueError(f"record {b} has {L} hops, more than L_max={L_max}")
        rtg[b, :L] = rec.reward_to_go if rec.reward_to_go else 0.0
        states[b, :L] = rec.states()
        actions[b, :L] = rec.angles()
        types[b, :L] = [int(t) for t in rec.types()]
        mask[b, :L] = 1.0
        rx[b] = rec.rx
    return EpisodeBatch(rtg, states, actions, types, mask, rx)


def unpad(batch: EpisodeBatch) -> list[dict]:
    out = []
    for b in range(len(batch)):
        L = int(batch.mask[b].sum())
        out.append({
            "returns_to_go": batch.returns_to_go[b, :L],
            "states": batch.states[b, :L],
            "actions": batch.actions[b, :L],
            "types": batch.types[b, :L],
        })
    return out


RHO0_BINS = (36, 18)


@dataclass
class DatasetStats:
    rho0: np.ndarray  # (36, 18) over (phi, theta)
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    length_hist: dict[int, int]


def compute_stats(records: Sequence[SbsRecord]) -> DatasetStats:
    if not records:
        raise ValueError("cannot compute statistics of an empty record list")
    first = np.array([rec.hops[0].action.as_tuple() for rec in records])
    nphi, nth = RHO0_BINS
    hist, _, _ = np.histogram2d(first[:, 0], first[:, 1], bins=(nphi, nth), range=((0.0, TWO_PI), (0.0, math.pi)))
    rho0 = hist / hist.sum()
    states = np.concatenate([rec.states() for rec in records])
    actions = np.concatenate([rec.angles() for rec in records])
    lengths: dict[int, int] = {}
    for rec in records:
        lengths[len(rec)] = lengths.get(len(rec), 0) + 1
    return DatasetStats(
        rho0,
        states.mean(axis=0), np.maximum(states.std(axis=0), 1e-8),
        actions.mean(axis=0), np.maximum(actions.std(axis=0), 1e-8),
        dict(sorted(lengths.items())),
    )
