"""Readers and writers for the on-disk formats.

All structured text is JSON; floats are written with ``repr`` precision so
every format round-trips bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .geometry import AngleAction, Material, Scene, Surface
from .tracer import Hop, InteractionType, PairRecord, RayDataset, RaySequence, TraceConfig

SCENE_FORMAT = "scene/1"
DATASET_FORMAT = "raydataset/1"
SPLIT_FORMAT = "split/1"


class FormatError(ValueError):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _check(header: dict, expected: str) -> None:
    got = header.get("format")
    if got != expected:
        raise FormatError(f"expected format {expected!r}, found {got!r}")


# scenes

def scene_to_dict(scene: Scene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "id": scene.id,
        "bounds_min": scene.bounds_min.tolist(),
        "bounds_max": scene.bounds_max.tolist(),
        "surfaces": [
            {
                "axis": "XYZ"[s.axis],
                "offset": s.offset,
                "rect_min": list(s.rect_min),
                "rect_max": list(s.rect_max),
                "material": {
                    "name": s.material.name,
                    "reflective": s.material.reflective,
                    "transmissive": s.material.transmissive,
                    "reflection_loss_db": s.material.reflection_loss_db,
                    "transmission_loss_db": s.material.transmission_loss_db,
                },
            }
            for s in scene.surfaces
        ],
    }


def scene_from_dict(d: dict) -> Scene:
    _check(d, SCENE_FORMAT)
    surfaces = []
    for s in d["surfaces"]:
        m = s["material"]
        surfaces.append(Surface("XYZ".index(s["axis"]), s["offset"], tuple(s["rect_min"]), tuple(s["rect_max"]), Material(
            m["name"], bool(m["reflective"]), bool(m["transmissive"]),
            float(m["reflection_loss_db"]), float(m["transmission_loss_db"]),
        )))
    return Scene(np.array(d["bounds_min"], dtype=np.float64), np.array(d["bounds_max"], dtype=np.float64), surfaces, d["id"])


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(_dump(scene_to_dict(scene)) + "\n")


def load_scene(path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))


# ray datasets

def ray_to_dict(r: RaySequence, extra: Optional[dict] = None) -> dict:
    d = {
        "hops": [
            {"state": h.state.tolist(), "phi": h.action.phi, "theta": h.action.theta, "itype": h.itype.name.lower()}
            for h in r.hops
        ],
        "reached": r.reached,
        "miss_distance": r.miss_distance,
        "path_length": r.path_length,
    }
    if r.predicted_types is not None:
        d["predicted_types"] = [t.name.lower() for t in r.predicted_types]
    if extra:
        d.update(extra)
    return d


def ray_from_dict(d: dict, tx, rx) -> RaySequence:
    hops = [Hop(np.array(h["state"], dtype=np.float64), AngleAction(h["phi"], h["theta"]), InteractionType[h["itype"].upper()])
            for h in d["hops"]]
    pt = d.get("predicted_types")
    return RaySequence(
        hops, np.array(tx, dtype=np.float64), np.array(rx, dtype=np.float64), bool(d["reached"]),
        float(d["miss_distance"]), float(d["path_length"]),
        None if pt is None else [InteractionType[t.upper()] for t in pt],
    )


def save_dataset(ds: RayDataset, path, ray_extras: Optional[list[list[dict]]] = None) -> None:
    lines = [_dump({"format": DATASET_FORMAT, "scene_id": ds.scene_id, "trace_config": ds.trace_config.to_dict()})]
    for i, rec in enumerate(ds.records):
        extras = ray_extras[i] if ray_extras else [None] * len(rec.rays)
        lines.append(_dump({
            "tx": rec.tx.tolist(),
            "rx": rec.rx.tolist(),
            "rays": [ray_to_dict(r, e) for r, e in zip(rec.rays, extras)],
        }))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path, with_extras: bool = False):
    text = Path(path).read_text().splitlines()
    if not text:
        raise FormatError(f"{path} is empty")
    header = json.loads(text[0])
    _check(header, DATASET_FORMAT)
    cfg = TraceConfig(**header["trace_config"])
    records, extras = [], []
    for line in text[1:]:
        if not line.strip():
            continue
        obj = json.loads(line)
        rays = [ray_from_dict(r, obj["tx"], obj["rx"]) for r in obj["rays"]]
        records.append(PairRecord(np.array(obj["tx"], dtype=np.float64), np.array(obj["rx"], dtype=np.float64), rays))
        extras.append([{k: v for k, v in r.items() if k not in ("hops", "reached", "miss_distance", "path_length", "predicted_types")}
                       for r in obj["rays"]])
    ds = RayDataset(header["scene_id"], records, cfg)
    return (ds, extras) if with_extras else ds


# split manifests

def save_split(split, path) -> None:
    Path(path).write_text(_dump(split.to_dict()) + "\n")


def load_split(path):
    from .dataset import Splits

    d = json.loads(Path(path).read_text())
    _check(d, SPLIT_FORMAT)
    return Splits.from_dict(d)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def write_csv(path, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    def fmt(v):
        if isinstance(v, float):
            return repr(v)
        if isinstance(v, (list, tuple, np.ndarray)):
            return " ".join(fmt(float(x)) for x in v)
        return str(v)

    lines = [",".join(header)] + [",".join(fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")
