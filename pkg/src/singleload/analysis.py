"""Design-space arithmetic: padding efficiency, roofline, multi-PE scaling, BRAM."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .config import HardwareConfig, ModelConfig, ceil_div, derive_dims
from .schedule import CycleReport, bram_banks, buffer_specs
from .traffic import TrafficReport

# BRAM totals published for the single-PE design (ViT-B/DeiT-B share a layout)
PUBLISHED_BRAM = {"ViT-B": 288, "DeiT-B": 288, "DeiT-S": 176, "DeiT-T": 144}


# ------------------------------------------------------------ efficiency

@dataclass(frozen=True)
class EfficiencyPoint:
    p_sys: int
    efficiency: float
    required_macs: int
    performed_macs: int


def layer_matmuls(model: ModelConfig, hw: HardwareConfig | None = None) -> list[tuple[int, int, int, int]]:
    """(M, K, N, count) for every array matmul of one encoder layer."""
    d = derive_dims(model, hw or HardwareConfig())
    T, D, h, Dh, Dm = d.tokens, d.model_dim, d.num_heads, d.head_dim, d.hidden_dim
    return [(T, D, Dh, 3 * h),     # per-head Q, K, V projections
            (T, Dh, T, h),         # scores
            (T, T, Dh, h),         # probabilities x V
            (T, D, D, 1),          # output projection
            (T, D, Dm, 1),
            (T, Dm, D, 1)]


def performed_macs(M: int, K: int, N: int, p: int) -> int:
    """MACs issued by a P x 2P packed array: rows pad to P, output columns to
    2P; the inner dimension streams without padding."""
    return ceil_div(M, p) * p * K * ceil_div(N, 2 * p) * 2 * p


def efficiency_point(model: ModelConfig, p: int) -> EfficiencyPoint:
    req = perf = 0
    for M, K, N, n in layer_matmuls(model):
        req += M * K * N * n
        perf += performed_macs(M, K, N, p) * n
    return EfficiencyPoint(p, req / perf, req, perf)


def efficiency_sweep(model: ModelConfig, p_range=range(4, 81)) -> list[EfficiencyPoint]:
    ps = list(p_range)
    if not ps or min(ps) < 4 or max(ps) > 128:
        raise ValueError("P range must lie within [4, 128]")
    return [efficiency_point(model, p) for p in ps]


def local_maxima(points: list[EfficiencyPoint], above: int = 8) -> list[int]:
    """P values whose efficiency beats the left neighbour and is not beaten by
    the right one; endpoints are never maxima."""
    out = []
    for a, b, c in zip(points, points[1:], points[2:]):
        if b.p_sys > above and b.efficiency > a.efficiency and b.efficiency >= c.efficiency:
            out.append(b.p_sys)
    return out


def inference_ops(model: ModelConfig, hw: HardwareConfig) -> int:
    """Multiplies issued by the array for one inference, padding included
    (one op per packed multiply)."""
    d = derive_dims(model, hw)
    per_layer = sum(performed_macs(M, K, N, hw.p_sys) * n for M, K, N, n in layer_matmuls(model, hw))
    embed = performed_macs(d.tokens, d.patch_dim, d.model_dim, hw.p_sys)
    return per_layer * d.num_layers + embed


# ------------------------------------------------------------- roofline

@dataclass(frozen=True)
class RooflinePoint:
    model: str
    operational_intensity: float   # ops / byte
    peak_ops: float                # ops / s
    bandwidth: float               # bytes / s
    attainable: float
    achieved: float
    pe_count: int = 1


def peak_ops(hw: HardwareConfig, pe_count: int = 1) -> float:
    return pe_count * hw.systolic_dsps * hw.packing_factor * hw.clock_freq


def roofline(model: ModelConfig, hw: HardwareConfig, traffic: TrafficReport, cycles: CycleReport,
             pe_count: int = 1) -> RooflinePoint:
    ops = inference_ops(model, hw)
    intensity = ops / traffic.total_bytes
    pk = peak_ops(hw, pe_count)
    attainable = min(pk, hw.dram_bandwidth * intensity)
    achieved = ops * pe_count / cycles.latency_s
    return RooflinePoint(model.name, intensity, pk, hw.dram_bandwidth, attainable,
                         achieved, pe_count)


# ------------------------------------------------------------- multi-PE

@dataclass(frozen=True)
class MultiPeResult:
    pe_count: int
    fps: float
    ops_per_s: float
    bandwidth_demand: float
    bandwidth_limited: bool
    policy: str


def per_pe_bandwidth(traffic: TrafficReport, demand: str = "peak") -> float:
    if demand == "average":
        return traffic.average_bandwidth
    if demand == "peak":
        return traffic.peak_bandwidth
    raise ValueError(f"demand must be 'average' or 'peak', not {demand!r}")


def multi_pe(model: ModelConfig, hw: HardwareConfig, k: int, traffic: TrafficReport,
             cycles: CycleReport, demand: str = "peak") -> MultiPeResult:
    """k PEs, each running the single-PE schedule, on one shared DRAM channel.

    ``traffic`` selects the policy (its ``policy`` field names it).  When the
    summed demand exceeds the channel, every PE slows by the same factor.
    """
    if k < 1:
        raise ValueError("pe_count must be >= 1")
    need = k * per_pe_bandwidth(traffic, demand)
    fps = k * cycles.fps
    limited = need > hw.dram_bandwidth
    if limited:
        fps *= hw.dram_bandwidth / need
    ops = fps * inference_ops(model, hw)
    return MultiPeResult(k, fps, ops, need, limited, traffic.policy)


def max_unconstrained_pes(hw: HardwareConfig, traffic: TrafficReport, demand: str = "peak",
                          limit: int = 64) -> int:
    """Largest k whose aggregate demand stays within the channel (0 if none)."""
    bw = per_pe_bandwidth(traffic, demand)
    if bw <= 0:
        return limit
    return min(int(hw.dram_bandwidth // bw), limit)


def pes_that_fit(model: ModelConfig, hw: HardwareConfig) -> int:
    """PE instances the DSP and BRAM budgets allow."""
    by_dsp = hw.dsp_count // hw.systolic_dsps
    by_bram = hw.bram36_count // bram_estimate(model, hw)["total"]
    return min(by_dsp, by_bram)


# ----------------------------------------------------------------- BRAM

def bram_estimate(model: ModelConfig, hw: HardwareConfig) -> dict:
    """BRAM36 banks per block-RAM buffer, their total, and the gap to the
    published figure where one exists."""
    d = derive_dims(model, hw)
    specs = buffer_specs(d, hw)
    out = {}
    for name in ("Weight", "Feature", "Layer"):
        out[name] = bram_banks(specs[name].nominal, hw)
    out["total"] = out["Weight"] + out["Feature"] + out["Layer"]
    if model.name in PUBLISHED_BRAM:
        out["published"] = PUBLISHED_BRAM[model.name]
        out["delta"] = out["total"] - PUBLISHED_BRAM[model.name]
    return out


# ------------------------------------------------------------------ I/O

def xy_csv(xs, ys, x_name: str = "x", y_name: str = "y") -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow([x_name, y_name])
    for x, y in zip(xs, ys):
        wr.writerow([x, repr(float(y)) if isinstance(y, float) else y])
    return buf.getvalue()


def parse_xy_csv(text: str) -> tuple[list[float], list[float]]:
    rows = list(csv.reader(ln for ln in io.StringIO(text) if not ln.startswith("#")))
    xs = [float(r[0]) for r in rows[1:]]
    ys = [float(r[1]) for r in rows[1:]]
    return xs, ys
