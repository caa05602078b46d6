"""Desk-scale experiment protocol shared by the acceptance checks.

Scenes, splits, traces and trained models are cached per process so that
criteria evaluated on the same runs reuse them.
"""

from __future__ import annotations

from dataclasses import replace
from functools import lru_cache

from raysurrogate.augmentation import FibConfig
from raysurrogate.dataset import SplitSpec, make_splits
from raysurrogate.evaluation import evaluate_sets, predict_all
from raysurrogate.model import DTConfig, prompt_returns
from raysurrogate.scenes import generate_room
from raysurrogate.tracer import TraceConfig, generate_dataset
from raysurrogate.training import Ablation, TrainConfig, train

SCENE_SEEDS = (1, 2, 3)
TRAIN_SEEDS = (0, 1, 2)
SPLIT_KINDS = ("checkerboard", "genz", "gendiag")
OVERFIT_EPOCHS = 40
TRACE = TraceConfig(n_dirs=4096, max_depth=2)
BASE_TRAIN = TrainConfig(epochs=12, batch_size=64, lr=1e-3, cosine_decay=True, model=DTConfig(dropout=0.0),
                         fib=FibConfig(per_ray_augments=1))


def split_spec(kind: str) -> SplitSpec:
    return SplitSpec(kind=kind, grid_step=1.0, max_tx_train=10, max_rx_train=20, max_tx_test=5, max_rx_test=20)


@lru_cache(maxsize=None)
def scene(seed: int):
    return generate_room(seed=seed, n_walls=2)


@lru_cache(maxsize=None)
def _traced(scene_seed: int, tx: tuple, rx: tuple):
    import numpy as np

    return generate_dataset(scene(scene_seed), np.array(tx), np.array(rx), TRACE)


def _key(points) -> tuple:
    return tuple(tuple(float(v) for v in p) for p in points)


@lru_cache(maxsize=None)
def data(scene_seed: int, kind: str):
    """(train dataset, test dataset); identical training positions share one trace."""
    sp = make_splits(scene(scene_seed), split_spec(kind))
    tr = _traced(scene_seed, _key(sp.train_tx), _key(sp.train_rx))
    te = _traced(scene_seed, _key(sp.test_tx), _key(sp.test_rx))
    return tr, te


@lru_cache(maxsize=None)
def _model(scene_seed: int, train_key: int, seed: int, ablation: str):
    tr = _by_id[train_key]
    cfg = replace(BASE_TRAIN, seed=seed, ablation=Ablation(ablation))
    model, _ = train(tr, scene(scene_seed), cfg)
    return model, cfg


_by_id: dict[int, object] = {}


def model(scene_seed: int, kind: str, seed: int, ablation: str = "Full"):
    tr, _ = data(scene_seed, kind)
    _by_id[id(tr)] = tr
    return _model(scene_seed, id(tr), seed, ablation)


@lru_cache(maxsize=None)
def run(scene_seed: int, kind: str, seed: int, ablation: str = "Full", baselines: bool = True):
    """EvalReport of DT (and the KNN baselines) on one scene, split and seed."""
    tr, te = data(scene_seed, kind)
    m, cfg = model(scene_seed, kind, seed, ablation)
    sc = scene(scene_seed)
    prompts = prompt_returns(m.return_quantiles, cfg.generation, cfg.reward)
    preds = {"DT": predict_all("DT", te, sc, model=m, prompts=prompts, gcfg=cfg.generation)}
    if baselines:
        preds["KNN1"] = predict_all("KNN1", te, sc, train=tr)
        preds["KNNbest"] = predict_all("KNNbest", te, sc, train=tr)
    return evaluate_sets(kind, te, preds, cfg.model.L_max)


# one verdict line per acceptance criterion, printed in the terminal summary
VERDICTS: dict[int, str] = {}


def verdict(n: int, ok: bool, detail: str) -> bool:
    VERDICTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(VERDICTS[n])
    return ok
