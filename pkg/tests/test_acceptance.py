"""Acceptance suite: each criterion records one PASS/FAIL line (see the terminal summary) and asserts it."""

import math
import time

import numpy as np
import pytest

import protocol as P
from conftest import unit_vectors
from pipeline import run_pipeline
from protocol import verdict
from raysurrogate import autodiff as ad
from raysurrogate.augmentation import build_training_records, fibonacci_sphere
from raysurrogate.channel import ChannelParams, channel_report
from raysurrogate.geometry import angles_from_dir, empty_box
from raysurrogate.model import DTConfig, DTModel, Normalizer
from raysurrogate.rewards import RewardConfig, bu, ob, p_angle, r_sbs, te
from raysurrogate.scenes import generate_room
from raysurrogate.tracer import (
    Hop,
    InteractionType,
    RaySequence,
    TraceConfig,
    generate_dataset,
    image_method_reference,
    replay,
    shoot_and_bounce,
)
from raysurrogate.dataset import compute_stats
from raysurrogate.training import Ablation, TrainConfig, dt_loss_fn, nlos_rays, train

pytestmark = pytest.mark.acceptance

TX = np.array([3.0, 4.0, 1.5])
RX = np.array([6.5, 2.5, 1.2])


def rotate(d, angle, rng):
    """Unit vector exactly ``angle`` away from ``d`` about a random axis."""
    k = np.cross(d, rng.normal(size=3))
    k /= np.linalg.norm(k)
    return d * math.cos(angle) + np.cross(k, d) * math.sin(angle)


def test_c01_image_method_oracle():
    box = empty_box()
    cfg = TraceConfig(n_dirs=16384, max_depth=2, d0=0.3, max_rays=10_000)
    t0 = time.perf_counter()
    rays = shoot_and_bounce(box, TX, RX, cfg)
    dt = time.perf_counter() - t0
    refs = [r for order in (0, 1, 2) for r in image_method_reference(box, TX, RX, order)]
    found = 0
    for ref in refs:
        if any(len(r) == len(ref) and np.all(np.linalg.norm(r.states() - ref.states(), axis=1) <= cfg.d0) for r in rays):
            found += 1
    n1 = sum(len(r) == 2 for r in refs)
    ok = found == len(refs) and n1 == 6 and dt < 60.0
    assert verdict(1, ok, f"{found}/{len(refs)} image paths recovered (6 first-order: {n1 == 6}), {dt:.1f} s")


def test_c02_gradient_integrity():
    sc = generate_room(seed=11)
    ds = generate_dataset(sc, [[2.0, 3.0, 1.5], [7.5, 6.0, 2.0]], [[5.0, 8.0, 1.2], [8.5, 2.0, 1.0]], TraceConfig(n_dirs=1024))
    recs = build_training_records(ds, sc, P.BASE_TRAIN.fib, RewardConfig(), 6)
    rng = np.random.default_rng(0)
    batch = [recs[int(i)] for i in rng.choice(len(recs), 4, replace=False)]
    gt = [nlos_rays(r.rays, 6) or r.rays for r in ds.records]
    model = DTModel.create(DTConfig(d_model=16, n_layers=2, n_heads=2, L_max=6, dropout=0.0),
                           Normalizer.from_stats(compute_stats(recs)), seed=3)
    t0 = time.perf_counter()
    worst = 0.0
    for name in sorted(model.params):
        w = model.params[name]

        def f(x, name=name):
            model.params[name] = x
            return dt_loss_fn(model, batch, gt, RewardConfig())

        worst = max(worst, ad.grad_check(f, w, h=1e-5))
        model.params[name] = w
    dt = time.perf_counter() - t0
    assert verdict(2, worst < 1e-3 and dt < 300, f"max relative error {worst:.2e} over {len(model.params)} tensors, {dt:.0f} s")


def test_c03_reward_maximality():
    rng = np.random.default_rng(3)
    cfg = RewardConfig()
    wins = cases = 0
    scenes = [generate_room(seed=s) for s in range(5)]
    while cases < 100:
        sc = scenes[cases % len(scenes)]
        tx, rx = rng.uniform(sc.bounds_min + 0.5, sc.bounds_max - 0.5, (2, 3))
        rays = shoot_and_bounce(sc, tx, rx, TraceConfig(n_dirs=2048))
        if not rays:
            continue
        g = rays[int(rng.integers(len(rays)))]
        top = r_sbs(g, rays, sc, rx, cfg)
        dirs = g.dirs()
        beaten = False
        for _ in range(5):
            j = int(rng.integers(len(dirs)))
            d = list(dirs)
            d[j] = rotate(d[j], rng.uniform(0.05, 0.3), rng)
            variant = replay(sc, tx, rx, d, cfg.d0)
            beaten |= r_sbs(variant, rays, sc, rx, cfg) >= top
        wins += not beaten
        cases += 1
    assert verdict(3, wins >= 99, f"exact ray scored highest in {wins}/{cases} cases")


def test_c04_penalties():
    cfg = RewardConfig()
    L, R, Pn = InteractionType.LAUNCH, InteractionType.REFLECTION, InteractionType.PENETRATION

    def ray(dirs, types, states=None, miss=0.0):
        states = states if states is not None else [np.full(3, 1.0)] * len(dirs)
        hops = [Hop(np.asarray(s, float), angles_from_dir(d / np.linalg.norm(d)), t) for s, d, t in zip(states, dirs, types)]
        return RaySequence(hops, TX, RX, miss < cfg.d0, miss, 1.0)

    d = np.array([0.6, 0.8, 0.0])
    te2 = te(ray([d], [L]), RX, cfg, 2.0)
    bu_p = bu(ray([d, np.array([0.0, 0.6, 0.8])], [L, Pn]))
    bu_r = bu(ray([d, np.array([-0.6, 0.8, 0.0])], [L, R]))
    box = empty_box()
    rng = np.random.default_rng(4)
    worst = -math.inf
    for i in range(10_000):
        n = int(rng.integers(1, 6))
        types = [L] + list(rng.choice([R, Pn], size=n - 1))
        r = ray(list(unit_vectors(n, i)), types, list(rng.uniform(-2, 12, (n, 3))), float(rng.uniform(0, 3)))
        worst = max(worst, ob(r, box, cfg), bu(r), te(r, RX, cfg), p_angle(r, box, RX, cfg))
    ok = abs(te2 + math.e ** 2) <= 1e-12 and bu_p == -10.0 and abs(bu_r) <= 1e-9 and worst <= 0.0
    assert verdict(4, ok, f"te(2)={te2:.12f}, bu(P turn)={bu_p}, bu(specular)={bu_r:.1e}, max penalty {worst}")


def test_c05_overfit_sanity():
    sc = P.scene(1)
    rng = np.random.default_rng(0)
    lo, hi = sc.bounds_min + 0.5, sc.bounds_max - 0.5
    ds = generate_dataset(sc, rng.uniform(lo, hi, (5, 3)), rng.uniform(lo, hi, (10, 3)), P.TRACE)
    assert len(ds.records) <= 50
    cfg = TrainConfig(epochs=P.OVERFIT_EPOCHS, batch_size=32, lr=1e-3, cosine_decay=True, val_fraction=0.1,
                      model=DTConfig(dropout=0.0), fib=P.BASE_TRAIN.fib)
    t0 = time.perf_counter()
    _, rep = train(ds, sc, cfg)
    dt = time.perf_counter() - t0
    best = min(e.val_mae for e in rep.epochs)
    ok = best < 0.05 and dt < 1800
    assert verdict(5, ok, f"best validation MAE {best:.4f} rad on {len(ds.records)} pairs, {dt:.0f} s")


def _runs():
    return [(s, k, seed) for s in P.SCENE_SEEDS for seed in P.TRAIN_SEEDS for k in P.SPLIT_KINDS]


def test_c06_ordering_against_knn():
    lines, dt_wins, dominated = [], 0, 0
    for s, k, seed in _runs():
        rep = P.run(s, k, seed)
        m = rep.mae
        dt_wins += m["DT"] < m["KNN1"]
        dominated += m["KNNbest"] <= m["KNN1"]
        lines.append(f"scene {s} {k:12s} seed {seed}: DT {m['DT']:.4f} KNN1 {m['KNN1']:.4f} KNNbest {m['KNNbest']:.4f}")
    print("\n".join(lines))
    n = len(lines)
    assert dominated == n, "KNN mode 2 must never lose to mode 1"
    assert verdict(6, dt_wins == n, f"DT < KNN1 in {dt_wins}/{n} runs, KNNbest <= KNN1 in {dominated}/{n}")


def test_c07_ablation_direction():
    s, kind = P.SCENE_SEEDS[0], "gendiag"
    stats = {}
    for arm in ("VanillaDT", "DTWithType", "Full"):
        v = [P.run(s, kind, seed, arm, baselines=False).mae["DT"] for seed in P.TRAIN_SEEDS]
        stats[arm] = (float(np.mean(v)), float(np.std(v)))
    ok = stats["Full"][0] <= stats["DTWithType"][0] <= stats["VanillaDT"][0]
    detail = ", ".join(f"{a} {m:.4f}+-{sd:.4f}" for a, (m, sd) in stats.items())
    assert verdict(7, ok, f"GenDiag mean test MAE over {len(P.TRAIN_SEEDS)} seeds: {detail}")


def test_c08_channel_consistency():
    ch = ChannelParams()
    _, te_ds = P.data(P.SCENE_SEEDS[0], "checkerboard")
    recs = [r for r in te_ds.records if r.rays]
    self_rep = channel_report([(r.tx, r.rx) for r in recs], [r.rays for r in recs], [list(r.rays) for r in recs], ch)
    exact = self_rep.mae_db == 0.0 and self_rep.kl_div == 0.0
    wins, lines = 0, []
    for s, k, seed in _runs():
        rep = P.run(s, k, seed)
        wins += rep.rssi_mae["DT"] < rep.rssi_mae["KNN1"]
        lines.append(f"scene {s} {k:12s} seed {seed}: RSSI MAE DT {rep.rssi_mae['DT']:.2f} dB KNN1 "
                     f"{rep.rssi_mae['KNN1']:.2f} dB, KL DT {rep.kl_div['DT']:.3f} KNN1 {rep.kl_div['KNN1']:.3f}")
    print("\n".join(lines))
    n = len(lines)
    assert verdict(8, exact and wins == n, f"GT self-comparison exact: {exact}; DT RSSI MAE < KNN1 in {wins}/{n} runs")


def test_c09_pipeline_determinism(tmp_path):
    a = run_pipeline(tmp_path / "a")
    b = run_pipeline(tmp_path / "b")
    diff = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    assert verdict(9, not diff and len(a) > 0, f"{len(a)} output files, {len(diff)} differ {diff[:3]}")


def test_c10_fibonacci_lattice():
    n = 4096
    pts = fibonacci_sphere(n)
    norm_err = float(np.max(np.abs(np.linalg.norm(pts, axis=1) - 1.0)))
    # largest cosine between distinct points is the closest pair
    best = -1.0
    for i in range(0, n, 512):
        g = pts[i:i + 512] @ pts.T
        g[np.arange(g.shape[0]), np.arange(i, i + g.shape[0])] = -1.0
        best = max(best, float(g.max()))
    sep = math.acos(min(best, 1.0))
    ratio = sep / (2.0 / math.sqrt(n))
    ok = norm_err <= 1e-12 and 0.7 <= ratio <= 1.3
    assert verdict(10, ok, f"max norm error {norm_err:.1e}, min separation {sep:.5f} rad = {ratio:.3f} x 2/sqrt(n)")
