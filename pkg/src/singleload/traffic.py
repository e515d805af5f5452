"""Off-chip traffic for the single-load schedule and for a conventional baseline.

The baseline accelerator runs the same block matmuls in the same order but
keeps nothing on chip beyond the two operand blocks of the previous
multiply: every operand block is fetched from DRAM, every output block is
written back, and softmax / LayerNorm go through the host (one load and one
store of the affected matrix each).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .config import HardwareConfig, ModelConfig, ceil_div, derive_dims
from .schedule import (MODES, CycleReport, DramTransaction, audit_single_load,
                       run_inference_schedule, weights_manifest)


class TrafficMismatch(RuntimeError):
    """The DRAM log of a single-load run failed its audit."""


@dataclass
class TrafficReport:
    model: str
    p_sys: int
    policy: str
    loaded: dict[str, int]
    stored: dict[str, int]
    mode_cycles: dict[str, int]
    clock_freq: float
    transactions: list = field(default_factory=list, repr=False)

    def mode_bytes(self, mode: str) -> int:
        return self.loaded[mode] + self.stored[mode]

    @property
    def total_loaded(self) -> int:
        return sum(self.loaded.values())

    @property
    def total_stored(self) -> int:
        return sum(self.stored.values())

    @property
    def total_bytes(self) -> int:
        return self.total_loaded + self.total_stored

    @property
    def latency_s(self) -> float:
        return sum(self.mode_cycles.values()) / self.clock_freq

    def mode_bandwidth(self, mode: str) -> float:
        cyc = self.mode_cycles[mode]
        return self.mode_bytes(mode) * self.clock_freq / cyc if cyc else 0.0

    @property
    def average_bandwidth(self) -> float:
        return self.total_bytes / self.latency_s

    @property
    def peak_mode(self) -> str:
        return max(MODES, key=self.mode_bandwidth)

    @property
    def peak_bandwidth(self) -> float:
        return self.mode_bandwidth(self.peak_mode)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["mode", "bytes_loaded", "bytes_stored", "cycles", "bandwidth_bytes_per_s"])
        for m in MODES:
            wr.writerow([m, self.loaded[m], self.stored[m], self.mode_cycles[m],
                         f"{self.mode_bandwidth(m):.6e}"])
        wr.writerow(["total", self.total_loaded, self.total_stored, sum(self.mode_cycles.values()),
                     f"{self.average_bandwidth:.6e}"])
        return buf.getvalue()


def parse_traffic_csv(text: str) -> dict[str, dict[str, float]]:
    rows = csv.DictReader(ln for ln in io.StringIO(text) if not ln.startswith("#"))
    return {r["mode"]: {k: float(v) for k, v in r.items() if k != "mode"} for r in rows}


def _zero():
    return {m: 0 for m in MODES}


def single_load_traffic(model: ModelConfig, hw: HardwareConfig, cycle_report: CycleReport | None = None,
                        dram: list[DramTransaction] | None = None) -> TrafficReport:
    """Byte counts straight from the audited DRAM log of a schedule run."""
    if cycle_report is None or dram is None:
        cycle_report, trace = run_inference_schedule(model, hw)
        dram = trace.dram
    verdict = audit_single_load(dram, weights_manifest(model))
    if not verdict.passed:
        raise TrafficMismatch(verdict.summary())
    loaded, stored = _zero(), _zero()
    for t in dram:
        (loaded if t.direction == "load" else stored)[t.mode] += t.nbytes
    return TrafficReport(model.name, hw.p_sys, "me-vit", loaded, stored,
                         cycle_report.mode_cycles_with_embedding(), hw.clock_freq, list(dram))


@dataclass(frozen=True)
class BaselinePolicy:
    """Rules of the conventional accelerator used for comparison."""
    reuse_window: int = 1            # operand blocks kept from previous multiplies
    write_back_outputs: bool = True
    host_round_trips: bool = True    # softmax / LayerNorm via host memory


class _Baseline:
    def __init__(self, model, hw, policy, log):
        self.d = derive_dims(model, hw)
        self.P = hw.p_sys
        self.policy = policy
        self.recent: list = []
        self.loaded, self.stored = _zero(), _zero()
        self.log = [] if log else None
        self.mode = "LP"
        self.layer = -1
        self.n_bmm = 0

    def _xfer(self, direction, tensor, block, nbytes):
        (self.loaded if direction == "load" else self.stored)[self.mode] += nbytes
        if self.log is not None:
            self.log.append(DramTransaction(direction, tensor, block, nbytes, self.n_bmm,
                                            self.mode, self.layer))

    def bmm(self, a, b, out):
        """One block multiply. a, b, out: (tensor, block, nbytes)."""
        for opnd in (a, b):
            key = (opnd[0], opnd[1])
            if key not in self.recent:
                self._xfer("load", *opnd)
        self.recent = ([(a[0], a[1]), (b[0], b[1])] + self.recent)[:2 * self.policy.reuse_window]
        if self.policy.write_back_outputs:
            self._xfer("store", *out)
        self.n_bmm += 1

    def host(self, tensor, rows, cols):
        """Host-side op: read the matrix, write the result."""
        if self.policy.host_round_trips:
            self._xfer("load", tensor, ((0, rows), (0, cols)), rows * cols)
            self._xfer("store", tensor + ".out", ((0, rows), (0, cols)), rows * cols)

    def param(self, tensor, shape, itemsize=1):
        n = itemsize
        for s in shape:
            n *= s
        self._xfer("load", tensor, tuple((0, s) for s in shape), n)

    # row-block x column-pair traversal of one matmul (A: M x K, B: K x N)
    def matmul(self, a_name, a_rows, a_off, b_name, b_block, K, N, out_name, row_list=None,
               b_prefix=()):
        P = self.P
        M = a_rows
        rows = range(ceil_div(M, P)) if row_list is None else row_list
        for r in rows:
            r0, r1 = r * P, min((r + 1) * P, M)
            self.row_pairs(a_name, r0 + a_off, r1 + a_off, b_name, b_block, K, N, out_name, r0, r1, b_prefix)

    def row_pairs(self, a_name, a0, a1, b_name, b_block, K, N, out_name, o0, o1, b_prefix=()):
        P = self.P
        for g in range(ceil_div(N, 2 * P)):
            c0, c1 = g * 2 * P, min((g + 1) * 2 * P, N)
            a = (a_name, ((a0, a1), (0, K)), (a1 - a0) * K)
            b = (b_name, b_prefix + b_block(c0, c1), K * (c1 - c0))
            out = (out_name, ((o0, o1), (c0, c1)), (o1 - o0) * (c1 - c0))
            self.bmm(a, b, out)


def baseline_traffic(model: ModelConfig, hw: HardwareConfig, policy: BaselinePolicy | None = None,
                     cycle_report: CycleReport | None = None, log: bool = False) -> TrafficReport:
    """Simulate every block multiply of one inference under ``policy``.

    Mode latencies are taken from the single-load schedule (equal-time
    comparison); pass ``cycle_report`` to reuse an existing run.
    """
    policy = policy or BaselinePolicy()
    if cycle_report is None:
        cycle_report, _ = run_inference_schedule(model, hw)
    sim = _Baseline(model, hw, policy, log)
    d = sim.d
    P, D, T, N, h, Dh, Dm, L = sim.P, d.model_dim, d.tokens, d.num_patches, d.num_heads, d.head_dim, d.hidden_dim, d.num_layers
    rb = ceil_div(T, P)

    # embedding: patches x E, then cls/pos add and LN1 on the host
    sim.mode = "LP"
    sim.matmul("input", N, 0, "embed.w", lambda c0, c1: ((0, d.patch_dim), (c0, c1)), d.patch_dim, D, "act.emb")
    sim.param("embed.cls", (D,))
    sim.param("embed.pos", (T, D))
    for i in range(L):
        p = f"l{i}."
        sim.layer = i
        sim.mode = "MSA"
        sim.param(p + "ln1.g", (D,))
        sim.param(p + "ln1.b", (D,))
        sim.host(f"act.l{i}.ln1", T, D)
        ln = f"act.l{i}.ln1.out"
        for j in range(h):
            for nm in ("wv", "wk"):
                sim.matmul(ln, T, 0, p + nm, lambda c0, c1: ((0, D), (c0, c1)), D, Dh,
                           f"act.l{i}.{nm[1]}{j}", b_prefix=((j, j + 1),))
            q, k, v = (f"act.l{i}.{c}{j}" for c in "qkv")
            s, pr = f"act.l{i}.s{j}", f"act.l{i}.s{j}.out"

            def q_rows(r):
                sim.matmul(ln, T, 0, p + "wq", lambda c0, c1: ((0, D), (c0, c1)), D, Dh, q,
                           row_list=[r], b_prefix=((j, j + 1),))

            def qk_rows(r):
                r0, r1 = r * P, min((r + 1) * P, T)
                sim.row_pairs(q, r0, r1, k, lambda c0, c1: ((c0, c1), (0, Dh)), Dh, T, s, r0, r1)

            def sv_rows(r):
                r0, r1 = r * P, min((r + 1) * P, T)
                sim.row_pairs(pr, r0, r1, v, lambda c0, c1: ((0, T), (c0, c1)), T, Dh,
                              f"act.l{i}.attn", r0, r1)

            # same interleaving as the single-load schedule; the host softmax
            # round trip of row block r happens between its QK and SV steps
            q_rows(0)
            qk_rows(0)
            sim.host(f"act.l{i}.s{j}.r0", min(P, T), T)
            for r in range(rb):
                if r + 1 < rb:
                    q_rows(r + 1)
                sv_rows(r)
                if r + 1 < rb:
                    qk_rows(r + 1)
                    r0, r1 = (r + 1) * P, min((r + 2) * P, T)
                    sim.host(f"act.l{i}.s{j}.r{r + 1}", r1 - r0, T)
        sim.mode = "LP"
        sim.matmul(f"act.l{i}.attn", T, 0, p + "wo", lambda c0, c1: ((0, D), (c0, c1)), D, D, f"act.l{i}.proj")
        sim.param(p + "ln2.g", (D,))
        sim.param(p + "ln2.b", (D,))
        sim.host(f"act.l{i}.ln2", T, D)
        sim.mode = "MLP"
        sim.param(p + "b1", (Dm,), 4)
        sim.param(p + "b2", (D,), 4)
        sim.matmul(f"act.l{i}.ln2.out", T, 0, p + "w1", lambda c0, c1: ((0, D), (c0, c1)), D, Dm, f"act.l{i}.hid")
        sim.matmul(f"act.l{i}.hid", T, 0, p + "w2", lambda c0, c1: ((0, Dm), (c0, c1)), Dm, D, f"act.l{i}.mlp")
    sim.mode = "MLP"
    sim.param("final.ln.g", (D,))
    sim.param("final.ln.b", (D,))
    sim.host("act.final", T, D)
    return TrafficReport(model.name, hw.p_sys, "baseline", sim.loaded, sim.stored,
                         cycle_report.mode_cycles_with_embedding(), hw.clock_freq,
                         sim.log if log else [])


def improvement_ratios(me: TrafficReport, base: TrafficReport) -> dict:
    """total_ratio, peak_ratio and the mode where the peak occurs."""
    if me.total_bytes <= 0:
        raise ZeroDivisionError("single-load report moves no bytes")
    per_mode = {}
    for m in MODES:
        bw = me.mode_bandwidth(m)
        per_mode[m] = base.mode_bandwidth(m) / bw if bw else float("inf")
    peak_mode = max(per_mode, key=per_mode.get)
    return {"total_ratio": base.total_bytes / me.total_bytes,
            "peak_ratio": per_mode[peak_mode], "peak_mode": peak_mode, "per_mode": per_mode}
