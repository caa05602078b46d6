"""Set-matched angular accuracy, method comparison over splits, and ablation tables."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .channel import ChannelParams, channel_report
from .io import write_csv, write_json
from .tracer import RayDataset, RaySequence

log = logging.getLogger(__name__)

METHODS = ("DT", "KNN1", "KNNbest", "MLP")


def ray_error(pred, gt) -> float:
    """Per-hop mean geodesic gap between two hop-aligned rays; each unmatched hop costs pi."""
    a = pred.dirs()
    b = gt.dirs()
    n = max(len(a), len(b))
    if n == 0:
        return math.pi
    m = min(len(a), len(b))
    cross = np.linalg.norm(np.cross(a[:m], b[:m]), axis=1)
    dot = np.einsum("ij,ij->i", a[:m], b[:m])
    return float((np.sum(np.arctan2(cross, dot)) + (n - m) * math.pi) / n)


def error_matrix(pred_set, gt_set) -> np.ndarray:
    return np.array([[ray_error(p, g) for g in gt_set] for p in pred_set]).reshape(len(pred_set), len(gt_set))


def angular_mae(pred_set: Sequence, gt_set: Sequence, hungarian: bool = False) -> float:
    """Mean over predicted rays of the error to their best-matching ground-truth ray.

    With ``hungarian`` the matching is one-to-one (minimum total cost);
    predicted rays left without a partner are charged pi.
    """
    if not gt_set:
        raise ValueError("angular_mae needs a nonempty ground-truth set")
    if not pred_set:
        return math.pi
    E = error_matrix(pred_set, gt_set)
    if not hungarian:
        return float(np.mean(E.min(axis=1)))
    from scipy.optimize import linear_sum_assignment

    rows, cols = linear_sum_assignment(E)
    total = float(E[rows, cols].sum()) + (len(pred_set) - len(rows)) * math.pi
    return total / len(pred_set)


def matched_lengths(pred_set, gt_set) -> list[tuple[int, float]]:
    """(hop count of the matched gt ray, error) per predicted ray."""
    if not pred_set:
        return []
    E = error_matrix(pred_set, gt_set)
    k = E.argmin(axis=1)
    return [(len(gt_set[int(j)]), float(E[i, j])) for i, j in enumerate(k)]


@dataclass
class PairResult:
    method: str
    pair: int
    tx: np.ndarray
    rx: np.ndarray
    mae: float
    n_pred: int
    n_gt: int
    los: bool


@dataclass
class EvalReport:
    split: str
    pairs: list[PairResult] = field(default_factory=list)
    mae: dict[str, float] = field(default_factory=dict)
    mae_nlos: dict[str, float] = field(default_factory=dict)
    rssi_mae: dict[str, float] = field(default_factory=dict)
    kl_div: dict[str, float] = field(default_factory=dict)
    by_length: dict[str, dict[int, float]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def summary_rows(self) -> list[list]:
        return [[self.split, m, self.mae[m], self.mae_nlos.get(m, math.nan), self.rssi_mae.get(m, math.nan),
                 self.kl_div.get(m, math.nan)] for m in METHODS if m in self.mae]

    def write(self, outdir, prefix: str = "") -> None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / f"{prefix}summary.csv", ["split", "method", "mae", "mae_nlos", "rssi_mae_db", "kl_div"],
                  self.summary_rows())
        write_csv(out / f"{prefix}per_pair.csv", ["split", "method", "pair", "tx", "rx", "mae", "n_pred", "n_gt", "los"],
                  [[self.split, p.method, p.pair, p.tx, p.rx, p.mae, p.n_pred, p.n_gt, int(p.los)] for p in self.pairs])
        rows = []
        for m in METHODS:
            for length, v in sorted(self.by_length.get(m, {}).items()):
                rows.append([self.split, m, length, v])
        write_csv(out / f"{prefix}mae_by_length.csv", ["split", "method", "hops", "mae"], rows)
        write_json(out / f"{prefix}meta.json", self.meta)


def content_hash(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


def _has_los(rays) -> bool:
    return any(len(r) == 1 for r in rays)


def evaluate_sets(split: str, test: RayDataset, predictions: dict[str, list[list[RaySequence]]], L_max: int = 6,
                  channel: Optional[ChannelParams] = None, hungarian: bool = False,
                  channel_reached_only: bool = False) -> EvalReport:
    """Score precomputed ray sets per method against the test ground truth.

    Pairs without any ground-truth ray are skipped (there is nothing to
    match). Channel metrics aggregate every predicted ray, or only those that
    reach the receiver with ``channel_reached_only``.
    """
    keep = [i for i, r in enumerate(test.records) if r.rays]
    report = EvalReport(split)
    channel = channel or ChannelParams()
    for m in METHODS:
        if m not in predictions:
            continue
        sets = predictions[m]
        if len(sets) != len(test.records):
            raise ValueError(f"{m}: {len(sets)} predictions for {len(test.records)} pairs")
        maes, nlos, lengths = [], [], {k: [] for k in range(1, L_max + 1)}
        for i in keep:
            rec = test.records[i]
            v = angular_mae(sets[i], rec.rays, hungarian)
            los = _has_los(rec.rays)
            report.pairs.append(PairResult(m, i, rec.tx, rec.rx, v, len(sets[i]), len(rec.rays), los))
            maes.append(v)
            if not los:
                nlos.append(v)
            for n, e in matched_lengths(sets[i], rec.rays):
                lengths.setdefault(n, []).append(e)
        report.mae[m] = float(np.mean(maes)) if maes else math.nan
        report.mae_nlos[m] = float(np.mean(nlos)) if nlos else math.nan
        report.by_length[m] = {n: (float(np.mean(v)) if v else math.nan) for n, v in sorted(lengths.items())}
        pairs = [(test.records[i].tx, test.records[i].rx) for i in keep]
        gt = [test.records[i].rays for i in keep]
        mod = [[r for r in sets[i] if r.reached or not channel_reached_only] for i in keep]
        if pairs:
            ch = channel_report(pairs, gt, mod, channel)
            report.rssi_mae[m], report.kl_div[m] = ch.mae_db, ch.kl_div
    return report


def predict_all(method: str, test: RayDataset, scene, train: Optional[RayDataset] = None, model=None, prompts=None,
                gcfg=None, knn_n: int = 6) -> list[list[RaySequence]]:
    """Ray sets of one method for every test pair."""
    from .model import generate_sets, knn_predict, mlp_rays

    pairs = [(r.tx, r.rx) for r in test.records]
    if method == "DT":
        if model is None:
            raise ValueError("DT evaluation needs a trained model")
        return generate_sets(model, scene, pairs, prompts, gcfg)
    if method in ("KNN1", "KNNbest"):
        if train is None:
            raise ValueError("KNN evaluation needs the training dataset")
        if method == "KNN1":
            return [knn_predict(train, tx, rx, knn_n, 1) for tx, rx in pairs]
        return [knn_predict(train, r.tx, r.rx, knn_n, 2, gt=r.rays) if r.rays else knn_predict(train, r.tx, r.rx, knn_n, 1)
                for r in test.records]
    if method == "MLP":
        if model is None:
            raise ValueError("MLP evaluation needs a trained model")
        return [mlp_rays(model, scene, tx, rx, gcfg.d0) for tx, rx in pairs]
    raise ValueError(f"unknown method {method!r}")


@dataclass
class AblationTable:
    split: str
    seeds: list[int]
    # arm -> per-seed test MAE
    mae: dict[str, list[float]] = field(default_factory=dict)
    by_length: dict[str, dict[int, list[float]]] = field(default_factory=dict)

    def stats(self) -> dict[str, tuple[float, float]]:
        return {arm: (float(np.mean(v)), float(np.std(v))) for arm, v in self.mae.items()}

    def ordered(self) -> bool:
        s = self.stats()
        return s["Full"][0] <= s["DTWithType"][0] <= s["VanillaDT"][0]

    def write(self, path_summary, path_lengths) -> None:
        rows = [[self.split, arm, m, sd, " ".join(repr(x) for x in self.mae[arm])] for arm, (m, sd) in self.stats().items()]
        write_csv(path_summary, ["split", "arm", "mae_mean", "mae_std", "per_seed"], rows)
        lrows = []
        for arm, d in self.by_length.items():
            for n, vals in sorted(d.items()):
                finite = [v for v in vals if math.isfinite(v)]
                lrows.append([self.split, arm, n, float(np.mean(finite)) if finite else math.nan])
        write_csv(path_lengths, ["split", "arm", "hops", "mae_mean"], lrows)


def ablation_suite(train_ds: RayDataset, test_ds: RayDataset, scene, base_cfg, seeds: Sequence[int], split: str = "") -> AblationTable:
    """Train every ablation arm for every seed with otherwise identical settings and score test MAE."""
    from dataclasses import replace

    from .model import prompt_returns
    from .training import Ablation, train

    if len(seeds) < 3:
        raise ValueError("the ablation comparison needs at least 3 seeds")
    table = AblationTable(split, list(seeds))
    arms = [Ablation.VANILLA, Ablation.WITH_TYPE, Ablation.FULL]
    cfgs = {arm: replace(base_cfg, ablation=arm) for arm in arms}
    shared = {k: v for k, v in base_cfg.to_dict().items() if k != "ablation"}
    for arm, c in cfgs.items():
        assert {k: v for k, v in c.to_dict().items() if k != "ablation"} == shared
    for arm in arms:
        table.mae[arm.value] = []
        table.by_length[arm.value] = {}
        for seed in seeds:
            cfg = replace(cfgs[arm], seed=seed)
            model, _ = train(train_ds, scene, cfg)
            prompts = prompt_returns(model.return_quantiles, cfg.generation, cfg.reward)
            preds = predict_all("DT", test_ds, scene, model=model, prompts=prompts, gcfg=cfg.generation)
            rep = evaluate_sets(split, test_ds, {"DT": preds}, cfg.model.L_max)
            table.mae[arm.value].append(rep.mae["DT"])
            for n, v in rep.by_length["DT"].items():
                table.by_length[arm.value].setdefault(n, []).append(v)
    return table
