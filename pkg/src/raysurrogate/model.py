"""Decision transformer ray generator and the nearest-neighbour / MLP baselines."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import DatasetStats, EpisodeBatch
from .geometry import LAUNCH_OFFSET, Scene, angles_from_dirs
from .rewards import RewardConfig
from .tracer import (
    N_TYPES,
    InteractionType,
    RayDataset,
    RaySequence,
    TraceConfig,
    first_hit,
    line_of_sight,
    replay,
)

# state features: standardized position, standardized offset to the receiver,
# unit direction to the receiver and its distance
STATE_FEATURES = 10


@dataclass(frozen=True)
class DTConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    L_max: int = 6
    dropout: float = 0.1
    ff_mult: int = 4
    init_std: float = 0.02
    n_types: int = N_TYPES

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.L_max < 1 or self.n_layers < 1:
            raise ValueError(f"invalid model config {self}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Normalizer:
    """Train-set statistics applied to model inputs."""

    state_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    state_std: np.ndarray = field(default_factory=lambda: np.ones(3))

    @classmethod
    def from_stats(cls, stats: DatasetStats) -> "Normalizer":
        return cls(np.asarray(stats.state_mean, dtype=np.float64), np.asarray(stats.state_std, dtype=np.float64))

    def to_dict(self) -> dict:
        return {"state_mean": self.state_mean.tolist(), "state_std": self.state_std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["state_mean"], dtype=np.float64), np.array(d["state_std"], dtype=np.float64))


def encode_return(r) -> np.ndarray:
    """Signed log compression; fitness values span several orders of magnitude."""
    r = np.asarray(r, dtype=np.float64)
    return np.sign(r) * np.log1p(np.abs(r))


def init_dt_params(cfg: DTConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, std = cfg.d_model, cfg.init_std

    def w(*shape):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    p = {
        "embed_return.w": w(1, d), "embed_return.b": zeros(d),
        "embed_state.w": w(STATE_FEATURES, d), "embed_state.b": zeros(d),
        "embed_action.w": w(3, d), "embed_action.b": zeros(d),
        "embed_time": w(cfg.L_max, d),
        "embed_ln.g": ones(d), "embed_ln.b": zeros(d),
    }
    for i in range(cfg.n_layers):
        k = f"block{i}."
        p.update({
            k + "ln1.g": ones(d), k + "ln1.b": zeros(d),
            k + "attn.qkv.w": w(d, 3 * d), k + "attn.qkv.b": zeros(3 * d),
            k + "attn.proj.w": w(d, d), k + "attn.proj.b": zeros(d),
            k + "ln2.g": ones(d), k + "ln2.b": zeros(d),
            k + "ff1.w": w(d, cfg.ff_mult * d), k + "ff1.b": zeros(cfg.ff_mult * d),
            k + "ff2.w": w(cfg.ff_mult * d, d), k + "ff2.b": zeros(d),
        })
    p.update({
        "ln_f.g": ones(d), "ln_f.b": zeros(d),
        "head_action.w": w(d, 3), "head_action.b": zeros(3),
        "head_type.w": w(d, cfg.n_types), "head_type.b": zeros(cfg.n_types),
    })
    for name, t in p.items():
        t.name = name
    return p


@dataclass
class DTModel:
    cfg: DTConfig
    params: dict[str, Tensor]
    norm: Normalizer = field(default_factory=Normalizer)
    # train-set fitness quantiles at 0, 0.05, ..., 1, used for return prompts
    return_quantiles: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def create(cls, cfg: DTConfig, norm: Optional[Normalizer] = None, seed: int = 0) -> "DTModel":
        return cls(cfg, init_dt_params(cfg, seed), norm or Normalizer())


@dataclass
class DTOutput:
    dirs: Tensor  # (B, L, 3) unit action directions
    type_logits: Tensor  # (B, L, n_types)

    @property
    def actions(self) -> np.ndarray:
        """(B, L, 2) predicted (phi, theta)."""
        return angles_from_dirs(self.dirs.data)


def state_features(states: np.ndarray, rx: np.ndarray, norm: Normalizer) -> np.ndarray:
    s = (states - norm.state_mean) / norm.state_std
    delta = rx[:, None, :] - states
    g = delta / norm.state_std
    dist = np.linalg.norm(delta, axis=-1, keepdims=True)
    unit = delta / np.maximum(dist, 1e-9)
    return np.concatenate([s, g, unit, dist / float(np.mean(norm.state_std))], axis=-1)


def embed_sequence(batch: EpisodeBatch, model: DTModel, rng=None, training: bool = False) -> Tensor:
    """Interleaved (return, state, action) tokens, shape (B, 3 * L_max, d_model)."""
    cfg, p = model.cfg, model.params
    B, L = batch.states.shape[:2]
    if L != cfg.L_max:
        raise ad.ShapeError(f"batch padded to {L} steps but the model expects L_max={cfg.L_max}")
    mask = batch.mask[..., None]
    feats = state_features(batch.states, batch.rx, model.norm) * mask
    adirs = _action_dirs(batch.actions) * mask
    ret = encode_return(batch.returns_to_go)[..., None] * mask
    t_emb = p["embed_time"][None, :, :]
    r_tok = ad.linear(Tensor(ret), p["embed_return.w"], p["embed_return.b"]) + t_emb
    s_tok = ad.linear(Tensor(feats), p["embed_state.w"], p["embed_state.b"]) + t_emb
    a_tok = ad.linear(Tensor(adirs), p["embed_action.w"], p["embed_action.b"]) + t_emb
    m = Tensor(mask)
    toks = ad.stack([r_tok * m, s_tok * m, a_tok * m], axis=2).reshape(B, 3 * L, cfg.d_model)
    toks = ad.layer_norm(toks, p["embed_ln.g"], p["embed_ln.b"])
    return ad.dropout(toks, cfg.dropout, rng, training)


def _action_dirs(actions: np.ndarray) -> np.ndarray:
    phi, theta = actions[..., 0], actions[..., 1]
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


_CAUSAL_CACHE: dict[int, np.ndarray] = {}


def _causal(T: int) -> np.ndarray:
    if T not in _CAUSAL_CACHE:
        _CAUSAL_CACHE[T] = np.tril(np.ones((T, T), dtype=bool))
    return _CAUSAL_CACHE[T]


def _attention(x: Tensor, p: dict, k: str, cfg: DTConfig, rng, training: bool) -> Tensor:
    B, T, d = x.shape
    H = cfg.n_heads
    dh = d // H
    qkv = ad.linear(x, p[k + "qkv.w"], p[k + "qkv.b"]).reshape(B, T, 3, H, dh)
    qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, H, T, dh)
    q, kk, v = qkv[0], qkv[1], qkv[2]
    scores = ad.matmul(q, ad.swap_last(kk)) * (1.0 / math.sqrt(dh))
    scores = ad.where(_causal(T), scores, -1e9)
    att = ad.dropout(ad.softmax(scores, axis=-1), cfg.dropout, rng, training)
    out = ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)).reshape(B, T, d)
    return ad.linear(out, p[k + "proj.w"], p[k + "proj.b"])


def forward(model: DTModel, batch: EpisodeBatch, rng=None, training: bool = False) -> DTOutput:
    """Action directions and type logits read from each step's state token."""
    cfg, p = model.cfg, model.params
    x = embed_sequence(batch, model, rng, training)
    for i in range(cfg.n_layers):
        k = f"block{i}."
        h = ad.layer_norm(x, p[k + "ln1.g"], p[k + "ln1.b"])
        x = x + ad.dropout(_attention(h, p, k + "attn.", cfg, rng, training), cfg.dropout, rng, training)
        h = ad.layer_norm(x, p[k + "ln2.g"], p[k + "ln2.b"])
        h = ad.linear(ad.gelu(ad.linear(h, p[k + "ff1.w"], p[k + "ff1.b"])), p[k + "ff2.w"], p[k + "ff2.b"])
        x = x + ad.dropout(h, cfg.dropout, rng, training)
    x = ad.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
    B = x.shape[0]
    s_tok = x.reshape(B, cfg.L_max, 3, cfg.d_model)[:, :, 1, :]
    dirs = ad.l2_normalize(ad.linear(s_tok, p["head_action.w"], p["head_action.b"]))
    logits = ad.linear(s_tok, p["head_type.w"], p["head_type.b"])
    return DTOutput(dirs, logits)


# set-based training loss

@dataclass
class TargetSet:
    """Ground-truth candidates per episode, padded to (B, K, L)."""

    dirs: np.ndarray  # (B, K, L, 3)
    types: np.ndarray  # (B, K, L)
    lengths: np.ndarray  # (B, K), 0 marks an unused slot


def build_targets(gt_sets: Sequence[Sequence], L_max: int) -> TargetSet:
    B = len(gt_sets)
    K = max(1, max(len(g) for g in gt_sets))
    dirs = np.zeros((B, K, L_max, 3))
    types = np.zeros((B, K, L_max), dtype=np.int64)
    lengths = np.zeros((B, K), dtype=np.int64)
    for b, gs in enumerate(gt_sets):
        for k, g in enumerate(gs):
            n = len(g)
            if n > L_max:
                raise ValueError(f"target ray with {n} hops exceeds L_max={L_max}")
            dirs[b, k, :n] = g.dirs()
            types[b, k, :n] = [int(t) for t in g.types()]
            lengths[b, k] = n
    return TargetSet(dirs, types, lengths)


@dataclass
class LossParts:
    total: Tensor
    ray: float  # batch mean of the chosen candidates' l_ray
    type: float  # batch mean of the chosen candidates' summed type cross-entropy
    choice: np.ndarray  # (B,) argmin candidate per episode


def set_loss(out: DTOutput, batch: EpisodeBatch, targets: TargetSet, rcfg: RewardConfig, type_weight: float) -> LossParts:
    """Batch mean of min over candidates of alpha * l_ray + type_weight * sum of type cross-entropies."""
    B, L = batch.mask.shape
    K = targets.lengths.shape[1]
    pred_len = batch.mask.sum(axis=1).astype(np.int64)
    n_min = np.minimum(pred_len[:, None], targets.lengths)  # (B, K)
    n_max = np.maximum(pred_len[:, None], targets.lengths)
    j = np.arange(L)
    compared = j[None, None, :] < n_min[..., None]  # (B, K, L)
    charged = (j[None, None, :] >= n_min[..., None]) & (j[None, None, :] < n_max[..., None])
    wj = rcfg.gamma ** j.astype(np.float64)
    valid_len = np.maximum(n_max, 1)
    norm = np.array([[wj[:n].sum() for n in row] for row in valid_len])
    w = wj[None, None, :] / norm[..., None]
    const = (w * charged).sum(axis=-1) * math.log(math.pi)  # (B, K)

    err = ad.angle_between(out.dirs[:, None, :, :], targets.dirs)  # (B, K, L)
    logerr = ad.log(ad.clamp_min(err, rcfg.eps_ang))
    l_ray = ad.tsum(logerr * (w * compared), axis=-1) + const  # (B, K)

    lp = ad.log_softmax(out.type_logits, axis=-1)  # (B, L, C)
    onehot = np.zeros((B, K, L, lp.shape[-1]))
    np.put_along_axis(onehot, targets.types[..., None], 1.0, axis=-1)
    ce = -ad.tsum(ad.tsum(lp[:, None, :, :] * onehot, axis=-1) * compared.astype(np.float64), axis=-1)  # (B, K)

    cand = l_ray * rcfg.alpha + ce * type_weight
    unused = targets.lengths == 0
    cand = ad.where(unused, 1e30, cand)
    best = ad.tmin(cand, axis=1)
    choice = np.argmin(cand.data, axis=1)
    total = ad.mean(best)
    rows = np.arange(B)
    return LossParts(total, float(l_ray.data[rows, choice].mean()), float(ce.data[rows, choice].mean()), choice)


# generation

@dataclass(frozen=True)
class GenerationConfig:
    target_return: Optional[float] = None  # None means the maximum attainable fitness
    l_max: int = 3
    greedy: bool = True
    d0: float = 0.3
    prompt_quantiles: tuple[float, ...] = (1.0,)
    # also roll out the model on pairs whose direct ray is visible
    model_rays_with_los: bool = False

    def resolved_target(self, rcfg: RewardConfig) -> float:
        return -math.log(rcfg.eps_ang) if self.target_return is None else float(self.target_return)


def _single_step_batch(model: DTModel, histories: list[dict]) -> EpisodeBatch:
    L = model.cfg.L_max
    B = len(histories)
    rtg = np.zeros((B, L))
    states = np.zeros((B, L, 3))
    actions = np.zeros((B, L, 2))
    mask = np.zeros((B, L))
    rx = np.zeros((B, 3))
    for b, h in enumerate(histories):
        n = len(h["states"])
        rtg[b, :n] = h["target"]
        states[b, :n] = h["states"]
        if h["actions"]:
            actions[b, : len(h["actions"])] = h["actions"]
        mask[b, :n] = 1.0
        rx[b] = h["rx"]
    return EpisodeBatch(rtg, states, actions, np.zeros((B, L), dtype=np.int64), mask, rx)


def generate_batch(model: DTModel, scene: Scene, txs, rxs, targets: Sequence[float], gcfg: GenerationConfig,
                   los_shortcut: bool = True) -> list[RaySequence]:
    """Autoregressive rollouts for several prompts in lockstep.

    Each step predicts the next action from the model, casts one segment, and
    stops a rollout once it reaches the receiver, cannot continue physically,
    or hits ``l_max`` actions. Prompts whose pair has direct line of sight are
    answered analytically without calling the model.
    """
    l_max = min(gcfg.l_max, model.cfg.L_max)
    results: list[Optional[RaySequence]] = [None] * len(txs)
    active = []
    for i, (tx, rx) in enumerate(zip(txs, rxs)):
        tx = np.asarray(tx, dtype=np.float64)
        rx = np.asarray(rx, dtype=np.float64)
        los = line_of_sight(scene, tx, rx) if los_shortcut else None
        if los is not None:
            results[i] = los
        else:
            active.append({"i": i, "tx": tx, "rx": rx, "target": float(targets[i]), "states": [tx], "actions": [],
                           "dirs": [], "types": []})
    with ad.no_grad():
        while active:
            out = forward(model, _single_step_batch(model, active))
            still = []
            for b, h in enumerate(active):
                n = len(h["states"]) - 1
                d = out.dirs.data[b, n].copy()
                h["dirs"].append(d / np.linalg.norm(d))
                h["actions"].append(angles_from_dirs(h["dirs"][-1]))
                h["types"].append(int(np.argmax(out.type_logits.data[b, n])))
                ray = replay(scene, h["tx"], h["rx"], h["dirs"], gcfg.d0, stop_on_reach=True)
                done = ray.reached or len(h["dirs"]) >= l_max or len(ray) != len(h["dirs"])
                if not done:
                    s = h["states"][-1]
                    dn = h["dirs"][-1]
                    p, _, _ = first_hit(scene, s + (LAUNCH_OFFSET * dn if n > 0 else 0.0), dn)
                    if p is None:
                        done = True
                    else:
                        h["states"].append(p)
                if done:
                    ray.predicted_types = [InteractionType(t) for t in h["types"][: len(ray)]]
                    results[h["i"]] = ray
                else:
                    still.append(h)
            active = still
    return results


def generate(model: DTModel, scene: Scene, tx, rx, gcfg: GenerationConfig, rcfg: Optional[RewardConfig] = None) -> RaySequence:
    target = gcfg.resolved_target(rcfg or RewardConfig(d0=gcfg.d0))
    return generate_batch(model, scene, [tx], [rx], [target], gcfg)[0]


def prompt_returns(train_returns: Sequence[float], gcfg: GenerationConfig, rcfg: RewardConfig) -> list[float]:
    """Return prompts: the configured target for quantile 1 and train-return quantiles otherwise."""
    top = gcfg.resolved_target(rcfg)
    arr = np.asarray(train_returns, dtype=np.float64)
    out = []
    for q in gcfg.prompt_quantiles:
        v = top if q >= 1.0 or arr.size == 0 else float(np.quantile(arr, q))
        if all(abs(v - o) > 1e-9 for o in out):
            out.append(v)
    return out


def same_ray(a: RaySequence, b: RaySequence, tol: float = 1e-3) -> bool:
    if len(a) != len(b) or a.type_string() != b.type_string():
        return False
    da, db = a.dirs(), b.dirs()
    return bool(np.all(np.einsum("ij,ij->i", da, db) >= math.cos(tol)))


def generate_sets(model: DTModel, scene: Scene, pairs, prompts: Sequence[float], gcfg: GenerationConfig,
                  keep_unreached: bool = False) -> list[list[RaySequence]]:
    """One ray set per (tx, rx): the analytic direct ray when visible, plus one rollout per prompt.

    Rollouts are deduplicated. Rollouts that miss the receiver are dropped
    unless ``keep_unreached``; a pair left without any ray keeps its first
    rollout. With ``gcfg.model_rays_with_los`` off, visible pairs get the
    direct ray only.
    """
    los = [line_of_sight(scene, tx, rx) for tx, rx in pairs]
    txs, rxs, tg, owner = [], [], [], []
    for p, (tx, rx) in enumerate(pairs):
        if los[p] is not None and not gcfg.model_rays_with_los:
            continue
        for r in prompts:
            txs.append(tx)
            rxs.append(rx)
            tg.append(r)
            owner.append(p)
    rays = generate_batch(model, scene, txs, rxs, tg, gcfg, los_shortcut=False) if txs else []
    cand: list[list[RaySequence]] = [[] for _ in pairs]
    for p, r in zip(owner, rays):
        cand[p].append(r)
    out = []
    for p in range(len(pairs)):
        kept: list[RaySequence] = [los[p]] if los[p] is not None else []
        for r in cand[p]:
            if (r.reached or keep_unreached) and not any(same_ray(r, o) for o in kept):
                kept.append(r)
        if not kept:
            kept = [cand[p][0]]
        out.append(kept)
    return out


# nearest-neighbour baseline

def knn_predict(train: RayDataset, tx, rx, n: int = 6, mode: int = 1, gt: Optional[Sequence[RaySequence]] = None) -> list[RaySequence]:
    """Rays copied from the nearest training pair(s) in the joint (tx, rx) space.

    Mode 1 returns the single nearest pair's rays. Mode 2 picks, among the
    ``n`` nearest, the pair whose rays score the lowest angular MAE against
    ``gt``; it looks at the answer and is an evaluation-only upper bound.
    """
    recs = [r for r in train.records if r.rays]
    if not recs:
        raise ValueError("training set has no rays")
    keys = np.array([np.concatenate([r.tx, r.rx]) for r in recs])
    q = np.concatenate([np.asarray(tx, dtype=np.float64), np.asarray(rx, dtype=np.float64)])
    order = np.argsort(np.linalg.norm(keys - q, axis=1), kind="stable")
    if mode == 1:
        return list(recs[order[0]].rays)
    if mode != 2:
        raise ValueError(f"unknown KNN mode {mode}")
    if gt is None:
        raise ValueError("KNN mode 2 needs the ground-truth rays")
    from .evaluation import angular_mae

    best, best_loss = None, math.inf
    for i in order[:n]:
        loss = angular_mae(recs[i].rays, gt)
        if loss < best_loss:
            best, best_loss = i, loss
    return list(recs[best].rays)


# MLP baseline

@dataclass(frozen=True)
class MLPConfig:
    hidden: int = 128
    n_layers: int = 2
    n_freqs: int = 8
    max_rays: int = 8
    L_max: int = 3
    init_std: float = 0.02

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MLPModel:
    cfg: MLPConfig
    params: dict[str, Tensor]
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def create(cls, cfg: MLPConfig, scene: Scene, seed: int = 0) -> "MLPModel":
        rng = np.random.default_rng(seed)
        n_in = 6 + 6 * 2 * cfg.n_freqs
        sizes = [n_in] + [cfg.hidden] * cfg.n_layers
        p = {}
        for i in range(cfg.n_layers):
            p[f"fc{i}.w"] = Tensor(rng.normal(0, 1.0 / math.sqrt(sizes[i]), size=(sizes[i], sizes[i + 1])), requires_grad=True)
            p[f"fc{i}.b"] = Tensor(np.zeros(sizes[i + 1]), requires_grad=True)
        p["out_dirs.w"] = Tensor(rng.normal(0, cfg.init_std, size=(cfg.hidden, cfg.max_rays * cfg.L_max * 3)), requires_grad=True)
        p["out_dirs.b"] = Tensor(rng.normal(0, 1.0, size=cfg.max_rays * cfg.L_max * 3), requires_grad=True)
        p["out_valid.w"] = Tensor(rng.normal(0, cfg.init_std, size=(cfg.hidden, cfg.max_rays)), requires_grad=True)
        p["out_valid.b"] = Tensor(np.zeros(cfg.max_rays), requires_grad=True)
        for k, t in p.items():
            t.name = k
        return cls(cfg, p, scene.bounds_min.copy(), scene.bounds_max.copy())


def sinusoidal_features(tx: np.ndarray, rx: np.ndarray, lo: np.ndarray, hi: np.ndarray, n_freqs: int) -> np.ndarray:
    """Raw coordinates in [-1, 1] plus sin/cos at octave frequencies, per coordinate."""
    x = np.concatenate([(tx - lo) / (hi - lo), (rx - lo) / (hi - lo)], axis=-1) * 2.0 - 1.0
    f = (2.0 ** np.arange(n_freqs)) * math.pi
    ang = x[..., :, None] * f
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).reshape(*x.shape[:-1], -1)
    return np.concatenate([x, enc], axis=-1)


def mlp_forward(model: MLPModel, tx: np.ndarray, rx: np.ndarray) -> tuple[Tensor, Tensor]:
    """(B, max_rays, L_max, 3) unit directions and (B, max_rays) validity logits."""
    cfg, p = model.cfg, model.params
    tx = np.atleast_2d(tx)
    rx = np.atleast_2d(rx)
    h = Tensor(sinusoidal_features(tx, rx, model.lo, model.hi, cfg.n_freqs))
    for i in range(cfg.n_layers):
        h = ad.gelu(ad.linear(h, p[f"fc{i}.w"], p[f"fc{i}.b"]))
    B = tx.shape[0]
    dirs = ad.l2_normalize(ad.linear(h, p["out_dirs.w"], p["out_dirs.b"]).reshape(B, cfg.max_rays, cfg.L_max, 3))
    valid = ad.linear(h, p["out_valid.w"], p["out_valid.b"])
    return dirs, valid


def mlp_predict(model: MLPModel, tx, rx) -> np.ndarray:
    """(max_rays, L_max, 2) predicted (phi, theta) for one pair."""
    with ad.no_grad():
        dirs, _ = mlp_forward(model, np.asarray(tx, dtype=np.float64), np.asarray(rx, dtype=np.float64))
    return angles_from_dirs(dirs.data[0])


def mlp_loss(model: MLPModel, tx: np.ndarray, rx: np.ndarray, targets: TargetSet, rcfg: RewardConfig) -> Tensor:
    """Each ground-truth ray is matched to its best slot under l_ray; matched slots are labelled valid."""
    dirs, valid = mlp_forward(model, tx, rx)
    B, M, L, _ = dirs.shape
    K = targets.lengths.shape[1]
    j = np.arange(L)
    compared = j[None, None, :] < np.minimum(targets.lengths, L)[..., None]  # (B, K, L)
    wj = rcfg.gamma ** j.astype(np.float64)
    norm = np.array([[wj[: max(min(n, L), 1)].sum() for n in row] for row in targets.lengths])
    w = (wj[None, None, :] / norm[..., None]) * compared  # (B, K, L)
    tgt = targets.dirs[:, :, :L, :]
    err = ad.angle_between(dirs[:, None, :, :, :], tgt[:, :, None, :, :])  # (B, K, M, L)
    lr = ad.tsum(ad.log(ad.clamp_min(err, rcfg.eps_ang)) * w[:, :, None, :], axis=-1)  # (B, K, M)
    best = ad.tmin(lr, axis=2)  # (B, K)
    used = (targets.lengths > 0).astype(np.float64)
    ray_loss = ad.tsum(best * used) * (1.0 / max(used.sum(), 1.0))
    # validity targets: slots chosen by at least one ray
    choice = np.argmin(lr.data, axis=2)
    label = np.zeros((B, M))
    for b in range(B):
        for k in range(K):
            if used[b, k]:
                label[b, choice[b, k]] = 1.0
    prob = ad.sigmoid(valid)
    bce = -ad.mean(ad.log(ad.clamp_min(prob, 1e-12)) * label + ad.log(ad.clamp_min(1.0 - prob, 1e-12)) * (1.0 - label))
    return ray_loss + bce


def mlp_rays(model: MLPModel, scene: Scene, tx, rx, d0: float) -> list[RaySequence]:
    """Replay the slots marked valid from ``tx``; each stops once it reaches ``rx``."""
    with ad.no_grad():
        dirs, valid = mlp_forward(model, np.asarray(tx, dtype=np.float64), np.asarray(rx, dtype=np.float64))
    out = []
    order = np.argsort(-valid.data[0], kind="stable")
    for m in order:
        if valid.data[0, m] <= 0.0 and out:
            break
        out.append(replay(scene, tx, rx, list(dirs.data[0, m]), d0, stop_on_reach=True))
    return out
