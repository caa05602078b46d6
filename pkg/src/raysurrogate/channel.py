"""Analytic ray-power channel: per-ray gain and delay, RSSI aggregation, distribution comparison."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .geometry import angles_from_dir, normalize
from .io import write_csv, write_json
from .tracer import InteractionType, RaySequence

C_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class ChannelParams:
    frequency: float = 28e9
    tx_power_dbm: float = 0.0
    reflection_db: float = 6.0
    penetration_db: float = 10.0
    diffraction_db: float = 15.0
    floor_dbm: float = -150.0
    coherent: bool = False

    def __post_init__(self):
        if self.frequency <= 0:
            raise ValueError("frequency must be positive")
        if min(self.reflection_db, self.penetration_db, self.diffraction_db) < 0:
            raise ValueError("interaction losses must be non-negative")

    @property
    def wavelength(self) -> float:
        return C_LIGHT / self.frequency

    def loss_db(self, t: InteractionType) -> float:
        return {
            InteractionType.REFLECTION: self.reflection_db,
            InteractionType.PENETRATION: self.penetration_db,
            InteractionType.DIFFRACTION: self.diffraction_db,
        }.get(t, 0.0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RayChannelTerms:
    a: float
    tau: float
    theta_arr: float
    phi_arr: float
    theta_dep: float
    phi_dep: float


def ray_terms(r: RaySequence, p: ChannelParams) -> RayChannelTerms:
    """Free-space amplitude with per-interaction dB losses; arrival direction is the last segment's."""
    if not r.path_length > 0:
        raise ValueError("ray has zero path length")
    loss = sum(p.loss_db(t) for t in r.types())
    a = p.wavelength / (4.0 * math.pi * r.path_length) * 10.0 ** (-loss / 20.0)
    dep = r.hops[0].action
    # arrival angles describe the direction of incidence as seen from the receiver
    arr = angles_from_dir(normalize(-np.asarray(r.dirs()[-1])))
    return RayChannelTerms(a, r.path_length / C_LIGHT, arr.theta, arr.phi, dep.theta, dep.phi)


def rssi(rays: Sequence[RaySequence], p: ChannelParams) -> float:
    """Received power in dBm; an empty set gives the configured floor."""
    if not rays:
        return p.floor_dbm
    terms = [ray_terms(r, p) for r in rays]
    if p.coherent:
        field_sum = sum(t.a * complex(math.cos(-2 * math.pi * p.frequency * t.tau), math.sin(-2 * math.pi * p.frequency * t.tau))
                        for t in terms)
        power = abs(field_sum) ** 2
    else:
        power = math.fsum(t.a * t.a for t in terms)
    if power <= 0.0:
        return p.floor_dbm
    return max(p.tx_power_dbm + 10.0 * math.log10(power), p.floor_dbm)


def rssi_mae(a: Sequence[float], b: Sequence[float]) -> float:
    if len(a) != len(b):
        raise ValueError(f"coverage mismatch: {len(a)} vs {len(b)} pairs")
    if not len(a):
        raise ValueError("no pairs to compare")
    return float(np.mean(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def shared_bins(a, b, bin_width: float = 1.0) -> np.ndarray:
    lo = math.floor(min(np.min(a), np.min(b)) / bin_width) * bin_width
    hi = math.floor(max(np.max(a), np.max(b)) / bin_width) * bin_width + bin_width
    n = int(round((hi - lo) / bin_width))
    return lo + bin_width * np.arange(n + 1)


def histogram_pdf(x, edges: np.ndarray, smoothing: float) -> np.ndarray:
    counts, _ = np.histogram(np.asarray(x, dtype=np.float64), bins=edges)
    p = counts / counts.sum() + smoothing
    return p / p.sum()


def kl_divergence(a: Sequence[float], b: Sequence[float], bin_width: float = 1.0, smoothing: float = 1e-6) -> float:
    """KL(a || b) in nats between smoothed histograms on shared bins."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("KL needs nonempty samples")
    edges = shared_bins(a, b, bin_width)
    p = histogram_pdf(a, edges, smoothing)
    q = histogram_pdf(b, edges, smoothing)
    return float(np.sum(p * np.log(p / q)))


@dataclass
class ChannelReport:
    tx: list = field(default_factory=list)
    rx: list = field(default_factory=list)
    rssi_gt: list[float] = field(default_factory=list)
    rssi_model: list[float] = field(default_factory=list)
    mae_db: float = 0.0
    kl_div: float = 0.0
    bins: list[float] = field(default_factory=list)
    pdf_gt: list[float] = field(default_factory=list)
    pdf_model: list[float] = field(default_factory=list)

    def write(self, csv_path, summary_path) -> None:
        rows = [[t, r, g, m, abs(g - m)] for t, r, g, m in zip(self.tx, self.rx, self.rssi_gt, self.rssi_model)]
        write_csv(csv_path, ["tx", "rx", "rssi_gt", "rssi_model", "abs_err"], rows)
        write_json(summary_path, {"mae_db": self.mae_db, "kl_div": self.kl_div, "bins": self.bins,
                                  "pdf_gt": self.pdf_gt, "pdf_model": self.pdf_model})


def channel_report(pairs, gt_sets, model_sets, p: ChannelParams, bin_width: float = 1.0,
                   smoothing: float = 1e-6) -> ChannelReport:
    """Compare aggregated power of two ray sets over the same pairs."""
    if not (len(pairs) == len(gt_sets) == len(model_sets)):
        raise ValueError("coverage mismatch between pairs and ray sets")
    g = [rssi(rs, p) for rs in gt_sets]
    m = [rssi(rs, p) for rs in model_sets]
    edges = shared_bins(g, m, bin_width)
    return ChannelReport(
        [list(map(float, t)) for t, _ in pairs], [list(map(float, r)) for _, r in pairs], g, m,
        rssi_mae(g, m), kl_divergence(g, m, bin_width, smoothing), edges.tolist(),
        histogram_pdf(g, edges, smoothing).tolist(), histogram_pdf(m, edges, smoothing).tolist(),
    )
