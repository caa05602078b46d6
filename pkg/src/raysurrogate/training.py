"""Offline training of the decision transformer and the MLP baseline, plus checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .augmentation import FibConfig, build_training_records
from .dataset import SbsRecord, compute_stats, pad_and_batch
from .geometry import Scene
from .io import FormatError, write_csv
from .model import (
    DTConfig,
    DTModel,
    GenerationConfig,
    MLPConfig,
    MLPModel,
    Normalizer,
    build_targets,
    forward,
    generate_sets,
    mlp_loss,
    set_loss,
)
from .rewards import RewardConfig
from .tracer import PairRecord, RayDataset, RaySequence

log = logging.getLogger(__name__)

TRAINCFG_FORMAT = "traincfg/1"
CKPT_FORMAT = "ckpt/1"
RETURN_QUANTILES = np.linspace(0.0, 1.0, 21)


class Ablation(str, Enum):
    VANILLA = "VanillaDT"
    WITH_TYPE = "DTWithType"
    FULL = "Full"

    @property
    def uses_type(self) -> bool:
        return self in (Ablation.WITH_TYPE, Ablation.FULL)

    @property
    def uses_augmentation(self) -> bool:
        return self == Ablation.FULL


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 3e-4
    seed: int = 0
    ablation: Ablation = Ablation.FULL
    warmup_steps: int = 100
    grad_clip: float = 1.0
    cosine_decay: bool = True
    val_fraction: float = 0.1
    # "self": an augmented record is fitted to its own actions; "gt": to the pair's ground-truth set
    augmented_targets: str = "gt"
    reward: RewardConfig = field(default_factory=RewardConfig)
    fib: FibConfig = field(default_factory=FibConfig)
    model: DTConfig = field(default_factory=DTConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format"] = TRAINCFG_FORMAT
        d["ablation"] = Ablation(self.ablation).value
        d["generation"]["prompt_quantiles"] = list(self.generation.prompt_quantiles)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        if d.get("format") != TRAINCFG_FORMAT:
            raise FormatError(f"expected format {TRAINCFG_FORMAT!r}, found {d.get('format')!r}")
        d = dict(d)
        d.pop("format")
        gen = dict(d.pop("generation", {}))
        if "prompt_quantiles" in gen:
            gen["prompt_quantiles"] = tuple(gen["prompt_quantiles"])
        return cls(
            ablation=Ablation(d.pop("ablation")),
            reward=RewardConfig(**d.pop("reward", {})),
            fib=FibConfig(**d.pop("fib", {})),
            model=DTConfig(**d.pop("model", {})),
            generation=GenerationConfig(**gen),
            **d,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class EpochMetrics:
    epoch: int
    loss_ray: float
    loss_type: float
    val_mae: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = -1
    n_records: int = 0
    n_augmented: int = 0
    optimizer: Optional[ad.AdamState] = None

    def write_csv(self, path) -> None:
        # wall time stays in the log so that the file is reproducible
        write_csv(path, ["epoch", "loss_ray", "loss_type", "val_mae"],
                  [[m.epoch, m.loss_ray, m.loss_type, m.val_mae] for m in self.epochs])


def nlos_rays(rays, L_max: int) -> list[RaySequence]:
    """Rays the model is trained on: direct rays are answered analytically, over-long rays do not fit."""
    return [r for r in rays if 1 < len(r) <= L_max]


def split_validation(ds: RayDataset, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Held-out pair indices (seeded); at least one pair stays in training."""
    n = len(ds.records)
    n_val = int(round(fraction * n)) if n > 1 else 0
    n_val = min(n_val, n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    val = sorted(int(i) for i in perm[:n_val])
    train = sorted(int(i) for i in perm[n_val:])
    return train, val


def _lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    lr = cfg.lr
    if cfg.warmup_steps > 0:
        lr *= min(1.0, (step + 1) / cfg.warmup_steps)
    if cfg.cosine_decay and total > 0:
        lr *= 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))
    return lr


def training_records(ds: RayDataset, scene: Scene, cfg: TrainConfig) -> list[SbsRecord]:
    """Decision records for every pair: trainable ground-truth rays plus augmentations if the arm uses them.

    ``pair`` on each record indexes ``ds.records``.
    """
    L_max = cfg.model.L_max
    nlos = RayDataset(ds.scene_id, [_nlos_record(r, L_max) for r in ds.records], ds.trace_config)
    fib = replace(cfg.fib, seed=cfg.fib.seed + cfg.seed) if Ablation(cfg.ablation).uses_augmentation else None
    return build_training_records(nlos, scene, fib, cfg.reward, L_max)


def train(ds: RayDataset, scene: Scene, cfg: TrainConfig, metrics_path=None,
          records: Optional[list[SbsRecord]] = None) -> tuple[DTModel, TrainReport]:
    """Fit the decision transformer on a traced dataset.

    Pairs are split into training and validation (``val_fraction``). Training
    records are the non-direct ground-truth rays, plus re-traced
    augmentations when the ablation includes them, each carrying its own
    fitness as return-to-go. Precomputed ``records`` (as from
    ``training_records``) may be passed in. The loss is the set-based minimum
    over the pair's ground-truth rays. The parameters with the best
    validation MAE are returned.
    """
    from .evaluation import angular_mae

    ablation = Ablation(cfg.ablation)
    L_max = cfg.model.L_max
    if not any(nlos_rays(r.rays, L_max) for r in ds.records):
        raise ValueError("dataset has no trainable rays")
    train_idx, val_idx = split_validation(ds, cfg.val_fraction, cfg.seed)
    if records is None:
        records = training_records(ds, scene, cfg)
    if not ablation.uses_augmentation:
        records = [r for r in records if not r.is_augmented]
    where = {p: k for k, p in enumerate(train_idx)}
    records = [replace(r, pair=where[r.pair]) for r in records if r.pair in where]
    if not records:
        raise ValueError("training split has no trainable rays")
    gt_sets = [nlos_rays(ds.records[i].rays, L_max) for i in train_idx]
    stats = compute_stats(records)
    returns = np.array([r.reward_to_go[0] for r in records])
    model = DTModel.create(cfg.model, Normalizer.from_stats(stats), seed=cfg.seed)
    model.return_quantiles = np.quantile(returns, RETURN_QUANTILES)
    val_idx = [i for i in val_idx if ds.records[i].rays]
    val_pairs = [(ds.records[i].tx, ds.records[i].rx) for i in val_idx]
    val_gt = [ds.records[i].rays for i in val_idx]

    report = TrainReport(n_records=len(records), n_augmented=sum(r.is_augmented for r in records))
    rng = np.random.default_rng(cfg.seed)
    state = ad.AdamState(lr=cfg.lr)
    type_weight = 1.0 if ablation.uses_type else 0.0
    n_batches = math.ceil(len(records) / cfg.batch_size)
    total_steps = n_batches * cfg.epochs
    best = (math.inf, None)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(records))
        ray_sum = type_sum = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            recs = [records[i] for i in idx]
            parts = _step(model, recs, gt_sets, cfg, state, rng, type_weight, total_steps, (epoch, b))
            ray_sum += parts.ray * len(recs)
            type_sum += type_weight * parts.type * len(recs)
        val = math.nan
        if val_pairs:
            sets = generate_sets(model, scene, val_pairs, [cfg.generation.resolved_target(cfg.reward)], cfg.generation)
            val = float(np.mean([angular_mae(p, g) for p, g in zip(sets, val_gt)]))
        report.epochs.append(EpochMetrics(epoch, ray_sum / len(records), type_sum / len(records), val, time.perf_counter() - t0))
        score = val if val_pairs else ray_sum / len(records)
        if score < best[0] or best[1] is None:
            best = (score, {k: p.data.copy() for k, p in model.params.items()})
            report.best_epoch = epoch
        log.info("epoch %d loss_ray %.4f loss_type %.4f val_mae %.4f", epoch, ray_sum / len(records),
                 type_sum / len(records), val)
    for k, v in best[1].items():
        model.params[k].data = v
    report.optimizer = state
    if metrics_path is not None:
        report.write_csv(metrics_path)
    return model, report


def _nlos_record(rec: PairRecord, L_max: int) -> PairRecord:
    return PairRecord(rec.tx, rec.rx, nlos_rays(rec.rays, L_max))


def _step(model: DTModel, recs: list[SbsRecord], gt_sets, cfg: TrainConfig, state: ad.AdamState, rng,
          type_weight: float, total_steps: int, where=(0, 0)):
    batch = pad_and_batch(recs, model.cfg.L_max)
    targets = build_targets(_target_sets(recs, gt_sets, cfg.augmented_targets), model.cfg.L_max)
    for p in model.params.values():
        p.grad = None
    out = forward(model, batch, rng, training=True)
    parts = set_loss(out, batch, targets, cfg.reward, type_weight)
    if not math.isfinite(parts.total.item()):
        raise FloatingPointError(f"non-finite loss in epoch {where[0]}, batch {where[1]}")
    parts.total.backward()
    grads = ad.parameters_grads(model.params)
    ad.clip_grad_norm(grads, cfg.grad_clip)
    ad.adam_step(model.params, grads, state, lr=_lr_at(state.t, total_steps, cfg))
    return parts


def _target_sets(recs: list[SbsRecord], gt_sets, mode: str = "gt") -> list[list]:
    if mode not in ("gt", "self"):
        raise ValueError(f"unknown augmented target mode {mode!r}")
    return [[r.to_ray()] if (mode == "self" and r.is_augmented) else gt_sets[r.pair] for r in recs]


def dt_loss_fn(model: DTModel, recs: list[SbsRecord], gt_sets, rcfg: RewardConfig, type_weight: float = 1.0):
    """Deterministic full training loss on a fixed batch (dropout off), as a function of the parameters."""
    batch = pad_and_batch(recs, model.cfg.L_max)
    targets = build_targets([gt_sets[r.pair] for r in recs], model.cfg.L_max)
    return set_loss(forward(model, batch), batch, targets, rcfg, type_weight).total


# MLP baseline

@dataclass(frozen=True)
class MLPTrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    grad_clip: float = 1.0
    model: MLPConfig = field(default_factory=MLPConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)


def train_mlp(ds: RayDataset, scene: Scene, cfg: MLPTrainConfig) -> MLPModel:
    recs = [r for r in ds.records if r.rays]
    if not recs:
        raise ValueError("dataset has no rays")
    L = cfg.model.L_max
    model = MLPModel.create(cfg.model, scene, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    state = ad.AdamState(lr=cfg.lr)
    tx_all = np.array([r.tx for r in recs])
    rx_all = np.array([r.rx for r in recs])
    sets = [[g for g in r.rays if len(g) <= L][: cfg.model.max_rays] or r.rays[:1] for r in recs]
    for step in range(cfg.steps):
        idx = rng.choice(len(recs), size=min(cfg.batch_size, len(recs)), replace=False)
        targets = build_targets([_clip_rays(sets[i], L) for i in idx], L)
        for p in model.params.values():
            p.grad = None
        loss = mlp_loss(model, tx_all[idx], rx_all[idx], targets, cfg.reward)
        if not math.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite MLP loss at step {step}")
        loss.backward()
        grads = ad.parameters_grads(model.params)
        ad.clip_grad_norm(grads, cfg.grad_clip)
        ad.adam_step(model.params, grads, state)
    return model


class _Clipped:
    """View of a ray truncated to its first ``n`` hops (for fixed-length slots)."""

    def __init__(self, ray: RaySequence, n: int):
        self.ray, self.n = ray, n

    def __len__(self) -> int:
        return min(len(self.ray), self.n)

    def dirs(self):
        return self.ray.dirs()[: self.n]

    def types(self):
        return self.ray.types()[: self.n]


def _clip_rays(rays, n: int):
    return [_Clipped(r, n) for r in rays]


# checkpoints

@dataclass
class Checkpoint:
    kind: str
    params: dict[str, np.ndarray]
    meta: dict
    optimizer: Optional[ad.AdamState]
    missing_optimizer: bool = False


def save_checkpoint(path, kind: str, params: dict, meta: dict, optimizer: Optional[ad.AdamState] = None) -> None:
    """Header line of JSON followed by little-endian float64 payloads in ``names`` order."""
    names = list(params)
    arrays = [np.asarray(params[n].data if isinstance(params[n], ad.Tensor) else params[n], dtype="<f8") for n in names]
    opt = None
    if optimizer is not None:
        opt = {"t": optimizer.t, "lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
               "eps": optimizer.eps}
        zeros = [np.zeros_like(a) for a in arrays]
        arrays += [np.asarray(optimizer.m.get(n, z), dtype="<f8") for n, z in zip(names, zeros)]
        arrays += [np.asarray(optimizer.v.get(n, z), dtype="<f8") for n, z in zip(names, zeros)]
    payload = b"".join(a.tobytes() for a in arrays)
    header = {
        "format": CKPT_FORMAT,
        "kind": kind,
        "names": names,
        "shapes": [list(np.shape(params[n].data if isinstance(params[n], ad.Tensor) else params[n])) for n in names],
        "optimizer_state": opt,
        "meta": meta,
        "payload_bytes": len(payload),
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(payload)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl].decode())
    except (ValueError, UnicodeDecodeError):
        raise FormatError(f"{path}: unreadable checkpoint header (expected {CKPT_FORMAT})") from None
    if not isinstance(header, dict) or header.get("format") != CKPT_FORMAT:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('format') if isinstance(header, dict) else None!r}")
    payload = raw[nl + 1:]
    if len(payload) != header["payload_bytes"]:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {header['payload_bytes']} bytes)")
    names, shapes = header["names"], [tuple(s) for s in header["shapes"]]
    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
        return a

    params = {n: take(s) for n, s in zip(names, shapes)}
    opt = None
    h = header.get("optimizer_state")
    if h is not None:
        m = {n: take(s) for n, s in zip(names, shapes)}
        v = {n: take(s) for n, s in zip(names, shapes)}
        opt = ad.AdamState(lr=h["lr"], beta1=h["beta1"], beta2=h["beta2"], eps=h["eps"], t=h["t"], m=m, v=v)
    else:
        log.warning("%s has no optimizer state; loaded parameters only", path)
    return Checkpoint(header["kind"], params, header.get("meta", {}), opt, missing_optimizer=h is None)


def save_dt(model: DTModel, path, optimizer: Optional[ad.AdamState] = None, train_cfg: Optional[TrainConfig] = None) -> None:
    meta = {"config": model.cfg.to_dict(), "norm": model.norm.to_dict(),
            "return_quantiles": [float(x) for x in getattr(model, "return_quantiles", [])]}
    if train_cfg is not None:
        meta["train_config"] = train_cfg.to_dict()
    save_checkpoint(path, "dt", model.params, meta, optimizer)


def load_dt(path) -> tuple[DTModel, Checkpoint]:
    ck = load_checkpoint(path)
    if ck.kind != "dt":
        raise FormatError(f"{path} holds a {ck.kind!r} checkpoint, not a decision transformer")
    model = DTModel(DTConfig(**ck.meta["config"]), {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in ck.params.items()},
                    Normalizer.from_dict(ck.meta["norm"]))
    model.return_quantiles = np.array(ck.meta.get("return_quantiles", []), dtype=np.float64)
    return model, ck


def save_mlp(model: MLPModel, path) -> None:
    meta = {"config": model.cfg.to_dict(), "lo": model.lo.tolist(), "hi": model.hi.tolist()}
    save_checkpoint(path, "mlp", model.params, meta)


def load_mlp(path) -> MLPModel:
    ck = load_checkpoint(path)
    if ck.kind != "mlp":
        raise FormatError(f"{path} holds a {ck.kind!r} checkpoint, not an MLP")
    return MLPModel(MLPConfig(**ck.meta["config"]), {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in ck.params.items()},
                    np.array(ck.meta["lo"]), np.array(ck.meta["hi"]))
