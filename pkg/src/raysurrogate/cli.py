"""Command-line entry point: one subcommand per pipeline step.

Every subcommand accepts ``--config FILE`` (a JSON object whose keys mirror
the long flag names, dashes or underscores) and explicit flags override it.
Each run writes ``<output>.manifest.json`` with the fully resolved settings.
On failure the exit status is nonzero, a single JSON error line goes to
stderr and any outputs written by the failed run are removed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

log = logging.getLogger("raysurrogate")


class ConfigError(ValueError):
    pass


class MissingInput(FileNotFoundError):
    pass


@dataclass
class RunManifest:
    subcommand: str
    config_paths: list[str]
    seed: Optional[int]
    output: str
    tool_version: str = __version__
    settings: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)

    def write(self, path) -> None:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        Path(path).write_text(json.dumps(d, sort_keys=True, indent=1) + "\n")


class Outputs:
    """Tracks files a run creates so that a failure can remove them."""

    def __init__(self):
        self.paths: list[Path] = []
        self.dirs: list[Path] = []

    def file(self, path) -> Path:
        p = Path(path)
        if not p.parent.exists():
            self.dir(p.parent)
        self.paths.append(p)
        return p

    def dir(self, path) -> Path:
        p = Path(path)
        missing = []
        q = p
        while not q.exists():
            missing.append(q)
            q = q.parent
        p.mkdir(parents=True, exist_ok=True)
        self.dirs.extend(reversed(missing))
        return p

    def remove(self) -> None:
        for p in self.paths:
            if p.is_file():
                p.unlink()
        for d in reversed(self.dirs):
            if d.is_dir() and not any(d.iterdir()):
                d.rmdir()


# argument handling

def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"config file {path} not found")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return {k.replace("-", "_"): v for k, v in d.items()}


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults < config file < explicit flags."""
    cfg = _load_config(getattr(args, "config", None))
    unknown = set(cfg) - set(defaults) - {"format"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update({k: v for k, v in cfg.items() if k in defaults})
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _need(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"missing required {what}")
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"{what} {path} not found")
    return p


def _floats(v, n: Optional[int] = None, name: str = "value") -> list[float]:
    if isinstance(v, str):
        v = [x for x in v.replace(",", " ").split() if x]
    try:
        out = [float(x) for x in v]
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: expected numbers, got {v!r}") from e
    if n is not None and len(out) != n:
        raise ConfigError(f"{name}: expected {n} numbers, got {len(out)}")
    return out


# subcommands

SCENE_DEFAULTS = {"size": "10 10 3", "walls": 2, "materials": "concrete,glass,drywall", "wall_material": "concrete",
                  "seed": 0, "scene_id": None}


def cmd_scene_gen(args, out: Outputs) -> RunManifest:
    from .io import save_scene
    from .scenes import generate_room

    s = _resolve(args, SCENE_DEFAULTS)
    mats = tuple(m.strip() for m in str(s["materials"]).split(",") if m.strip())
    try:
        scene = generate_room(tuple(_floats(s["size"], 3, "size")), int(s["walls"]), mats, int(s["seed"]),
                              s["wall_material"], scene_id=s["scene_id"])
    except KeyError as e:
        raise ConfigError(f"unknown material {e}") from e
    save_scene(scene, out.file(args.out))
    return RunManifest("scene-gen", _cfgs(args), int(s["seed"]), str(args.out), settings=s)


TRACE_DEFAULTS = {"split_kind": "checkerboard", "grid_step": 0.5, "split_seed": 0, "max_tx_train": None,
                  "max_rx_train": None, "max_tx_test": None, "max_rx_test": None, "n_dirs": 16384, "max_depth": 2,
                  "d0": 0.3, "max_rays": 30}


def cmd_trace(args, out: Outputs) -> RunManifest:
    from .dataset import SplitSpec, make_splits
    from .io import load_scene, save_dataset, save_split
    from .tracer import TraceConfig, generate_dataset

    s = _resolve(args, TRACE_DEFAULTS)
    scene = load_scene(_need(args.scene, "scene"))
    try:
        spec = SplitSpec(kind=s["split_kind"], grid_step=float(s["grid_step"]), seed=int(s["split_seed"]),
                         max_tx_train=s["max_tx_train"], max_rx_train=s["max_rx_train"],
                         max_tx_test=s["max_tx_test"], max_rx_test=s["max_rx_test"])
        tc = TraceConfig(int(s["n_dirs"]), int(s["max_depth"]), float(s["d0"]), int(s["max_rays"]))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    splits = make_splits(scene, spec)
    d = out.dir(args.out)
    save_split(splits, out.file(d / "split.json"))
    for name, (tx, rx) in (("train", splits.train), ("test", splits.test)):
        save_dataset(generate_dataset(scene, tx, rx, tc), out.file(d / f"{name}.jsonl"))
    return RunManifest("trace", _cfgs(args), int(s["split_seed"]), str(d), settings=s,
                       inputs={"scene": str(args.scene)})


TRAIN_DEFAULTS = {"epochs": None, "batch_size": None, "lr": None, "seed": None, "ablation": None, "arch": "dt",
                  "steps": None}


def _train_config(args, s: dict):
    from .training import Ablation, TrainConfig

    base = TrainConfig()
    if getattr(args, "train_config", None):
        try:
            base = TrainConfig.load(_need(args.train_config, "train config"))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, FileNotFoundError):
                raise
            raise ConfigError(f"bad train config: {e}") from e
    over = {}
    for k in ("epochs", "batch_size", "seed"):
        if s.get(k) is not None:
            over[k] = int(s[k])
    if s.get("lr") is not None:
        over["lr"] = float(s["lr"])
    if s.get("ablation") is not None:
        try:
            over["ablation"] = Ablation(s["ablation"])
        except ValueError as e:
            raise ConfigError(str(e)) from e
    cfg = replace(base, **over)
    if cfg.epochs < 1 or cfg.batch_size < 1 or not cfg.lr > 0:
        raise ConfigError("epochs, batch size and learning rate must be positive")
    return cfg


def cmd_augment(args, out: Outputs) -> RunManifest:
    from .augmentation import save_records
    from .io import load_dataset, load_scene
    from .training import Ablation, training_records

    s = _resolve(args, TRAIN_DEFAULTS)
    cfg = replace(_train_config(args, s), ablation=Ablation.FULL)
    scene = load_scene(_need(args.scene, "scene"))
    ds = load_dataset(_need(args.data, "dataset"))
    recs = training_records(ds, scene, cfg)
    save_records(recs, ds, out.file(args.out))
    return RunManifest("augment", _cfgs(args), cfg.seed, str(args.out), settings=cfg.to_dict(),
                       inputs={"scene": str(args.scene), "data": str(args.data)})


def cmd_train(args, out: Outputs) -> RunManifest:
    from .io import load_dataset, load_scene
    from .training import MLPTrainConfig, save_dt, save_mlp, train, train_mlp

    s = _resolve(args, TRAIN_DEFAULTS)
    scene = load_scene(_need(args.scene, "scene"))
    ds = load_dataset(_need(args.data, "dataset"))
    if s["arch"] == "mlp":
        mcfg = MLPTrainConfig()
        over = {k: int(s[k]) for k in ("steps", "batch_size", "seed") if s.get(k) is not None}
        if s.get("lr") is not None:
            over["lr"] = float(s["lr"])
        mcfg = replace(mcfg, **over)
        model = train_mlp(ds, scene, mcfg)
        save_mlp(model, out.file(args.out))
        return RunManifest("train", _cfgs(args), mcfg.seed, str(args.out), settings={"arch": "mlp", **_plain(mcfg)},
                           inputs={"scene": str(args.scene), "data": str(args.data)})
    if s["arch"] != "dt":
        raise ConfigError(f"unknown arch {s['arch']!r}")
    cfg = _train_config(args, s)
    records = None
    inputs = {"scene": str(args.scene), "data": str(args.data)}
    if args.augmented:
        from .augmentation import load_records

        records, aug_ds = load_records(_need(args.augmented, "augmented dataset"))
        if len(aug_ds.records) != len(ds.records):
            raise ConfigError("augmented dataset does not match the training dataset")
        inputs["augmented"] = str(args.augmented)
    metrics = out.file(args.metrics or str(args.out) + ".metrics.csv")
    model, report = train(ds, scene, cfg, metrics, records=records)
    save_dt(model, out.file(args.out), report.optimizer, cfg)
    return RunManifest("train", _cfgs(args), cfg.seed, str(args.out), settings=cfg.to_dict(), inputs=inputs)


GEN_DEFAULTS = {"method": "DT", "knn_n": 6, "target_return": None, "l_max": None}


def cmd_generate(args, out: Outputs) -> RunManifest:
    from .evaluation import predict_all
    from .io import load_dataset, load_scene, save_dataset
    from .model import GenerationConfig, prompt_returns
    from .rewards import RewardConfig
    from .tracer import PairRecord, RayDataset
    from .training import TrainConfig, load_dt, load_mlp

    s = _resolve(args, GEN_DEFAULTS)
    scene = load_scene(_need(args.scene, "scene"))
    test = load_dataset(_need(args.data, "test dataset"))
    method = s["method"]
    model = train = prompts = None
    gcfg, rcfg = GenerationConfig(), RewardConfig()
    if method == "DT":
        model, ck = load_dt(_need(args.checkpoint, "checkpoint"))
        if "train_config" in ck.meta:
            tc = TrainConfig.from_dict(ck.meta["train_config"])
            gcfg, rcfg = tc.generation, tc.reward
        if s["target_return"] is not None:
            gcfg = replace(gcfg, target_return=float(s["target_return"]))
        if s["l_max"] is not None:
            gcfg = replace(gcfg, l_max=int(s["l_max"]))
        prompts = prompt_returns(model.return_quantiles, gcfg, rcfg)
    elif method == "MLP":
        model = load_mlp(_need(args.checkpoint, "checkpoint"))
    elif method in ("KNN1", "KNNbest"):
        train = load_dataset(_need(args.train_data, "training dataset"))
    else:
        raise ConfigError(f"unknown method {method!r}")
    sets = predict_all(method, test, scene, train=train, model=model, prompts=prompts, gcfg=gcfg, knn_n=int(s["knn_n"]))
    pred = RayDataset(test.scene_id, [PairRecord(r.tx, r.rx, rs) for r, rs in zip(test.records, sets)], test.trace_config)
    save_dataset(pred, out.file(args.out))
    return RunManifest("generate", _cfgs(args), None, str(args.out),
                       settings={**s, "generation": _plain(gcfg), "prompts": [float(p) for p in prompts or []]},
                       inputs={"scene": str(args.scene), "data": str(args.data), "checkpoint": args.checkpoint,
                               "train_data": args.train_data})


def _predictions(specs: list[str], n: int) -> dict[str, list]:
    from .evaluation import METHODS
    from .io import load_dataset

    preds = {}
    for spec in specs or []:
        if "=" not in spec:
            raise ConfigError(f"--pred expects METHOD=PATH, got {spec!r}")
        m, path = spec.split("=", 1)
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
        ds = load_dataset(_need(path, f"{m} predictions"))
        if len(ds.records) != n:
            raise ConfigError(f"{m} predictions cover {len(ds.records)} pairs, test set has {n}")
        preds[m] = [r.rays for r in ds.records]
    if not preds:
        raise ConfigError("no predictions given")
    return preds


def cmd_eval(args, out: Outputs) -> RunManifest:
    from .evaluation import evaluate_sets
    from .io import load_dataset

    test = load_dataset(_need(args.data, "test dataset"))
    preds = _predictions(args.pred, len(test.records))
    rep = evaluate_sets(args.split, test, preds, hungarian=args.hungarian)
    d = out.dir(args.out)
    for name in ("summary.csv", "per_pair.csv", "mae_by_length.csv", "meta.json"):
        out.file(d / name)
    rep.meta = {"split": args.split, "methods": sorted(preds), "hungarian": args.hungarian}
    rep.write(d)
    return RunManifest("eval", _cfgs(args), None, str(d), settings=rep.meta,
                       inputs={"data": str(args.data), "pred": list(args.pred)})


def cmd_rssi(args, out: Outputs) -> RunManifest:
    from .channel import ChannelParams, channel_report
    from .io import load_dataset

    test = load_dataset(_need(args.data, "test dataset"))
    preds = _predictions(args.pred, len(test.records))
    p = ChannelParams(frequency=args.frequency, coherent=args.coherent)
    keep = [i for i, r in enumerate(test.records) if r.rays]
    if not keep:
        raise ConfigError("test set has no traced rays")
    d = out.dir(args.out)
    for m, sets in preds.items():
        rep = channel_report([(test.records[i].tx, test.records[i].rx) for i in keep], [test.records[i].rays for i in keep],
                             [sets[i] for i in keep], p)
        rep.write(out.file(d / f"rssi_{m}.csv"), out.file(d / f"rssi_{m}.json"))
    return RunManifest("rssi", _cfgs(args), None, str(d), settings=p.to_dict(),
                       inputs={"data": str(args.data), "pred": list(args.pred)})


def cmd_report(args, out: Outputs) -> RunManifest:
    import csv

    from .io import write_csv

    rows = []
    for path in args.eval:
        p = _need(Path(path) / "summary.csv", "eval summary")
        with open(p, newline="") as f:
            for row in csv.DictReader(f):
                rssi_json = Path(args.rssi or "") / f"rssi_{row['method']}.json"
                kl = row["kl_div"]
                if args.rssi and rssi_json.is_file():
                    kl = repr(float(json.loads(rssi_json.read_text())["kl_div"]))
                rows.append([row["split"], row["method"], row["mae"], row["mae_nlos"], row["rssi_mae_db"], kl])
    if not rows:
        raise ConfigError("no evaluation rows found")
    write_csv(out.file(args.out), ["split", "method", "mae", "mae_nlos", "rssi_mae_db", "kl_div"], rows)
    return RunManifest("report", _cfgs(args), None, str(args.out), inputs={"eval": list(args.eval), "rssi": args.rssi})


def _cfgs(args) -> list[str]:
    return [str(p) for p in (getattr(args, "config", None), getattr(args, "train_config", None)) if p]


def _plain(obj) -> dict:
    from dataclasses import asdict

    d = asdict(obj)
    return json.loads(json.dumps(d, default=lambda v: v.value if hasattr(v, "value") else list(v)))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="raysurrogate", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def add(name: str, fn: Callable, help: str):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config")
        p.set_defaults(fn=fn)
        return p

    p = add("scene-gen", cmd_scene_gen, "parametric room to a scene file")
    p.add_argument("--size", help="room extent 'x y z' in metres")
    p.add_argument("--walls", type=int)
    p.add_argument("--materials", help="comma-separated partition materials")
    p.add_argument("--wall-material", dest="wall_material")
    p.add_argument("--seed", type=int)
    p.add_argument("--scene-id", dest="scene_id")
    p.add_argument("--out", required=True)

    p = add("trace", cmd_trace, "split positions and trace ground-truth rays")
    p.add_argument("--scene", required=True)
    p.add_argument("--split-kind", dest="split_kind", choices=["checkerboard", "genz", "gendiag"])
    p.add_argument("--grid-step", dest="grid_step", type=float)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    for k in ("max_tx_train", "max_rx_train", "max_tx_test", "max_rx_test"):
        p.add_argument("--" + k.replace("_", "-"), dest=k, type=int)
    p.add_argument("--n-dirs", dest="n_dirs", type=int)
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--d0", type=float)
    p.add_argument("--max-rays", dest="max_rays", type=int)
    p.add_argument("--out", required=True, help="output directory")

    for name, fn, help in (("augment", cmd_augment, "lattice augmentation of a traced dataset"),
                           ("train", cmd_train, "train the decision transformer or the MLP baseline")):
        p = add(name, fn, help)
        p.add_argument("--scene", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--train-config", dest="train_config")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--ablation", choices=["VanillaDT", "DTWithType", "Full"])
        p.add_argument("--out", required=True)
        if name == "train":
            p.add_argument("--augmented", help="records written by the augment subcommand")
            p.add_argument("--metrics", help="per-epoch CSV (default <out>.metrics.csv)")
            p.add_argument("--arch", choices=["dt", "mlp"])
            p.add_argument("--steps", type=int, help="MLP optimisation steps")

    p = add("generate", cmd_generate, "predict ray sets for test pairs")
    p.add_argument("--scene", required=True)
    p.add_argument("--data", required=True, help="test dataset (pairs and, for KNNbest, ground truth)")
    p.add_argument("--method", choices=["DT", "KNN1", "KNNbest", "MLP"])
    p.add_argument("--checkpoint")
    p.add_argument("--train-data", dest="train_data")
    p.add_argument("--knn-n", dest="knn_n", type=int)
    p.add_argument("--target-return", dest="target_return", type=float)
    p.add_argument("--l-max", dest="l_max", type=int)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "angular accuracy and channel metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", action="append", required=True, help="METHOD=PATH, repeatable")
    p.add_argument("--split", default="test")
    p.add_argument("--hungarian", action="store_true")
    p.add_argument("--out", required=True)

    p = add("rssi", cmd_rssi, "per-pair received power against ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", action="append", required=True, help="METHOD=PATH, repeatable")
    p.add_argument("--frequency", type=float, default=28e9)
    p.add_argument("--coherent", action="store_true")
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "join evaluation outputs into one table")
    p.add_argument("--eval", action="append", required=True, help="eval output directory, repeatable")
    p.add_argument("--rssi", help="rssi output directory")
    p.add_argument("--out", required=True)
    return ap


def _error(code: int, kind: str, cmd: str, exc: BaseException) -> int:
    msg = str(exc).replace("\n", " ") or type(exc).__name__
    print(json.dumps({"error": kind, "exit": code, "subcommand": cmd, "message": msg}), file=sys.stderr)
    return code


def main(argv: Optional[list[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        if e.code in (0, None):
            return 0
        print(json.dumps({"error": "bad_config", "exit": EXIT_CONFIG, "subcommand": None,
                          "message": "invalid command line"}), file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Outputs()
    try:
        with np.errstate(invalid="ignore"):
            manifest = args.fn(args, out)
        target = Path(manifest.output)
        mpath = (target / "manifest.json") if target.is_dir() else target.with_name(target.name + ".manifest.json")
        manifest.write(out.file(mpath))
    except (MissingInput, FileNotFoundError) as e:
        out.remove()
        return _error(EXIT_MISSING, "missing_input", args.cmd, e)
    except FloatingPointError as e:
        out.remove()
        return _error(EXIT_NUMERIC, "numerical_failure", args.cmd, e)
    except (ConfigError, ValueError, KeyError, TypeError) as e:
        out.remove()
        return _error(EXIT_CONFIG, "bad_config", args.cmd, e)
    except Exception as e:  # noqa: BLE001 - every failure must leave a parseable record
        out.remove()
        return _error(1, "internal", args.cmd, e)
    except KeyboardInterrupt as e:
        out.remove()
        return _error(130, "interrupted", args.cmd, e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
