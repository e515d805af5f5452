"""Cycle-approximate replay of the three ME-PE modes.

The engine walks the encoder in hardware order (embedding projection, then
per layer: attention, output projection, MLP), placing every systolic-array
block operation on one timeline.  DRAM loads stream on a separate channel at
the configured bandwidth, post-processing units (LayerNorm, softmax,
reciprocal) run beside the array, and every event records its buffer
occupancy changes so capacity can be checked afterwards.

Timing conventions
------------------
* a block pair costs ``inner + pair_latency`` cycles; each row-block sweep
  pays one pipeline fill of ``fill_cycles``
* bias + ReLU stalls the array for ``p_sys`` cycles per activation point
* reciprocal units take ``reciprocal_latency`` cycles, LayerNorm pass 2 takes
  ``D`` cycles per row block (one element per lane per cycle)
"""
from __future__ import annotations

import hashlib
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .config import DerivedDims, HardwareConfig, ModelConfig, ceil_div, derive_dims
from .functional import parameter_layout

EVENT_KINDS = ("bmm", "buffer_move", "dram_load", "dram_store", "layernorm_pass",
               "softmax_pass", "reciprocal", "stall", "residual_add", "activation")
ARRAY_KINDS = frozenset({"bmm", "stall"})
MODES = ("LP", "MSA", "MLP")


class ScheduleError(RuntimeError):
    pass


class BufferOverflow(ScheduleError):
    pass


class ScheduleConflict(ScheduleError):
    pass


@dataclass(frozen=True)
class BufferSpec:
    name: str
    capacity: int            # entries (one byte each for int8 data)
    storage_class: str       # "block-ram" or "lut-ram"
    nominal: int = 0         # entries the data structure itself needs


@dataclass(frozen=True, slots=True)
class ScheduleEvent:
    cycle_start: int
    cycle_end: int
    kind: str
    mode: str
    layer: int
    operands: tuple = ()
    op: tuple | None = None
    buffers: tuple = ()      # (buffer, +entries) at start / (buffer, -entries) at end

    @property
    def on_array(self) -> bool:
        return self.kind in ARRAY_KINDS


@dataclass(frozen=True, slots=True)
class DramTransaction:
    direction: str           # "load" or "store"
    tensor: str
    block: tuple             # ((start, stop), ...) per tensor dimension
    nbytes: int
    issue_cycle: int
    mode: str = ""
    layer: int = -1


@dataclass
class ModeSpan:
    mode: str                # LP, MSA, MLP, or EMBED / FINAL_LN
    layer: int
    start: int
    end: int
    stall: int = 0

    @property
    def cycles(self) -> int:
        return self.end - self.start


@dataclass
class CycleReport:
    model: str
    p_sys: int
    clock_freq: float
    spans: list[ModeSpan]
    inference_cycles: int
    stall_cycles: int

    @property
    def embedding_cycles(self) -> int:
        return sum(s.cycles for s in self.spans if s.mode == "EMBED")

    @property
    def final_ln_cycles(self) -> int:
        return sum(s.cycles for s in self.spans if s.mode == "FINAL_LN")

    @property
    def mode_cycles(self) -> dict[str, int]:
        out = {m: 0 for m in MODES}
        for s in self.spans:
            if s.mode in out:
                out[s.mode] += s.cycles
        return out

    def mode_cycles_with_embedding(self) -> dict[str, int]:
        """Embedding counted as LP and the final LayerNorm tail as MLP."""
        out = self.mode_cycles
        out["LP"] += self.embedding_cycles
        out["MLP"] += self.final_ln_cycles
        return out

    @property
    def per_layer(self) -> list[dict[str, int]]:
        layers = defaultdict(lambda: {m: 0 for m in MODES})
        for s in self.spans:
            if s.mode in MODES:
                layers[s.layer][s.mode] += s.cycles
        return [layers[i] for i in sorted(layers)]

    @property
    def latency_s(self) -> float:
        return self.inference_cycles / self.clock_freq

    @property
    def fps(self) -> float:
        return 1.0 / self.latency_s

    @property
    def mode_fractions(self) -> dict[str, float]:
        tot = self.inference_cycles
        return {m: c / tot for m, c in self.mode_cycles_with_embedding().items()}

    def summary(self) -> str:
        lines = [f"model = {self.model}", f"p_sys = {self.p_sys}",
                 f"clock_freq = {self.clock_freq:g}",
                 f"inference_cycles = {self.inference_cycles}",
                 f"latency_ms = {self.latency_s * 1e3:.4f}", f"fps = {self.fps:.4f}",
                 f"stall_cycles = {self.stall_cycles}",
                 f"embedding_cycles = {self.embedding_cycles}",
                 f"final_ln_cycles = {self.final_ln_cycles}"]
        for m, c in self.mode_cycles.items():
            lines.append(f"mode_cycles.{m} = {c}")
        for m, f in self.mode_fractions.items():
            lines.append(f"mode_fraction.{m} = {f:.4f}")
        return "\n".join(lines) + "\n"


@dataclass
class ScheduleTrace:
    events: list[ScheduleEvent]
    dram: list[DramTransaction]
    buffers: dict[str, BufferSpec]
    dims: DerivedDims

    def array_events(self) -> list[ScheduleEvent]:
        return [e for e in self.events if e.on_array]

    def to_lines(self) -> str:
        """One JSON record per line: events first, then DRAM transactions."""
        buf = io.StringIO()
        for e in self.events:
            rec = {"type": "event", "start": e.cycle_start, "end": e.cycle_end, "kind": e.kind,
                   "mode": e.mode, "layer": e.layer, "operands": list(e.operands),
                   "op": list(e.op) if e.op else None,
                   "buffers": [list(b) for b in e.buffers]}
            buf.write(json.dumps(rec, separators=(",", ":")) + "\n")
        for t in self.dram:
            rec = {"type": "dram", "direction": t.direction, "tensor": t.tensor,
                   "block": [list(b) for b in t.block], "bytes": t.nbytes,
                   "issue": t.issue_cycle, "mode": t.mode, "layer": t.layer}
            buf.write(json.dumps(rec, separators=(",", ":")) + "\n")
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_lines().encode()).hexdigest()


def parse_trace_lines(text: str) -> tuple[list[ScheduleEvent], list[DramTransaction]]:
    events, dram = [], []
    for line in text.splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        if r["type"] == "manifest":
            continue
        if r["type"] == "event":
            events.append(ScheduleEvent(r["start"], r["end"], r["kind"], r["mode"], r["layer"],
                                        tuple(r["operands"]), tuple(r["op"]) if r["op"] else None,
                                        tuple(tuple(b) for b in r["buffers"])))
        else:
            dram.append(DramTransaction(r["direction"], r["tensor"],
                                        tuple(tuple(b) for b in r["block"]), r["bytes"],
                                        r["issue"], r["mode"], r["layer"]))
    return events, dram


# ------------------------------------------------------------------ buffers

def bank_multiple(hw: HardwareConfig) -> int:
    return max(hw.p_sys, 32)


def bram_banks(entries: int, hw: HardwareConfig) -> int:
    unit = bank_multiple(hw)
    return ceil_div(ceil_div(entries, hw.bram_bank_depth), unit) * unit


def weight_buffer_entries(dims: DerivedDims) -> int:
    # the patch-embedding matrix has to sit here too; it is larger than D x D
    # whenever D < patch_dim
    return max(dims.model_dim * dims.model_dim, dims.patch_dim * dims.model_dim)


def buffer_specs(dims: DerivedDims, hw: HardwareConfig) -> dict[str, BufferSpec]:
    """The nine buffers.  Block-RAM capacities are whole banks; K/V/S rows
    cover max(D, T) so the score row and K/V fit when T > D."""
    D, T, P, Dh = dims.model_dim, dims.tokens, hw.p_sys, dims.head_dim
    wide = max(D, T)
    specs = []
    for name, nominal in (("Weight", weight_buffer_entries(dims)), ("Feature", T * D), ("Layer", T * D)):
        cap = bram_banks(nominal, hw) * hw.bram_bank_depth
        specs.append(BufferSpec(name, cap, "block-ram", nominal))
    specs += [BufferSpec("Q", P * max(Dh, 2 * P), "lut-ram", P * Dh),
              BufferSpec("K", wide * Dh, "lut-ram", D * Dh),
              BufferSpec("V", wide * Dh, "lut-ram", D * Dh),
              BufferSpec("Result", P * 2 * P, "lut-ram", P * 2 * P),
              BufferSpec("S1", P * wide, "lut-ram", P * D),
              BufferSpec("S2", P * wide, "lut-ram", P * D)]
    return {s.name: s for s in specs}


# ------------------------------------------------------------------- engine

class _Engine:
    def __init__(self, model: ModelConfig, hw: HardwareConfig):
        self.model = model
        self.hw = hw.validate()
        self.d = derive_dims(model, hw)
        self.events: list[ScheduleEvent] = []
        self.dram: list[DramTransaction] = []
        self.spans: list[ModeSpan] = []
        self.t_sa = 0
        self.t_dram = 0
        self.s_free = [0, 0]         # S1/S2 release cycles
        self.mode = "EMBED"
        self.layer = -1
        self.span_stall = 0
        self.row_ready: dict[tuple, int] = {}
        bpc = hw.bytes_per_cycle
        self.bpc = bpc if bpc > 0 else None

    # -- primitives
    def emit(self, start, end, kind, operands=(), op=None, buffers=()):
        self.events.append(ScheduleEvent(int(start), int(end), kind, self.mode, self.layer,
                                         tuple(operands), op, tuple(buffers)))

    def load(self, tensor, block, not_before, buffer=None, entries=0, direction="load"):
        nbytes = int(np.prod([b - a for a, b in block]))
        nbytes *= 4 if tensor.endswith((".b1", ".b2")) else 1
        if self.bpc is None:
            raise ScheduleError("zero DRAM bandwidth: nothing can be loaded")
        issue = max(self.t_dram, int(not_before))
        done = issue + int(np.ceil(nbytes / self.bpc))
        self.t_dram = done
        self.dram.append(DramTransaction(direction, tensor, tuple(block), nbytes, issue,
                                         self._mode_label(), self.layer))
        bufs = ((buffer, entries),) if buffer and direction == "load" else ()
        self.emit(issue, done, "dram_" + direction, (tensor, _fmt_block(block)), None, bufs)
        return done

    def _mode_label(self):
        return "LP" if self.mode in ("EMBED",) else ("MLP" if self.mode == "FINAL_LN" else self.mode)

    def array(self, dur, ready, operands, op, buffers=(), kind="bmm"):
        """Place one array event; ``ready`` maps a wait cause to a cycle."""
        cause, at = max(ready.items(), key=lambda kv: kv[1]) if ready else ("", 0)
        start = max(self.t_sa, int(at))
        if start > self.t_sa:
            self.emit(self.t_sa, start, "stall", (cause, "wait"))
            self.span_stall += start - self.t_sa
        end = start + int(dur)
        self.emit(start, end, kind, operands, op, buffers)
        if kind == "stall":
            self.span_stall += dur
        self.t_sa = end
        return start, end

    def begin(self, mode, layer):
        self.mode, self.layer = mode, layer
        self.span_stall = 0
        self.spans.append(ModeSpan(mode, layer, self.t_sa, self.t_sa))

    def end(self):
        s = self.spans[-1]
        s.end = self.t_sa
        s.stall = self.span_stall

    def sweep_cost(self, inner, first):
        return inner + self.hw.pair_latency + (self.hw.fill_cycles if first else 0)

    # -- shared tail: residual row block in S, LayerNorm into Layer/Feature
    def layernorm_rows(self, r, t_sum_done, s_idx, ln_name, rows, out_key):
        R, D = self.hw.reciprocal_latency, self.d.model_dim
        self.emit(t_sum_done, t_sum_done + R, "reciprocal", (f"ln r{r}",))
        t2 = t_sum_done + R
        self.emit(t2, t2 + D, "layernorm_pass", (f"S{s_idx + 1}", "Layer", "Feature"),
                  ("ln", ln_name, r), ((f"S{s_idx + 1}", -rows * D),))
        self.s_free[s_idx] = t2 + D
        self.row_ready[out_key + (r,)] = t2 + D
        return t2 + D

    # -- modes
    def embedding(self):
        d, P = self.d, self.hw.p_sys
        D, T, K = d.model_dim, d.tokens, d.patch_dim
        self.begin("EMBED", -1)
        t0 = self.t_sa
        pairs = list(_pairs(D, P))
        e_ready = {}
        for g, (c0, c1) in pairs:
            e_ready[g] = self.load("embed.w", ((0, K), (c0, c1)), t0, "Weight", K * (c1 - c0))
        self.load("embed.cls", ((0, D),), t0)
        rb = ceil_div(T, P)
        in_ready = {}
        pos_ready = {}
        ln_ready = self.load("l0.ln1.g", ((0, D),), t0)
        ln_ready = max(ln_ready, self.load("l0.ln1.b", ((0, D),), t0))
        sweep_start = {}
        for r in range(rb):
            r0, r1 = r * P, min((r + 1) * P, T)
            # patch rows of this block (row 0 of z0 is the class token)
            p0, p1 = max(r0 - 1, 0), r1 - 1
            nb = t0 if r < 2 else sweep_start[r - 1]
            in_ready[r] = self.load("input", ((p0, p1), (0, K)), nb, "Feature", (p1 - p0) * K) if p1 > p0 else t0
            pos_ready[r] = self.load("embed.pos", ((r0, r1), (0, D)), nb)
            s_idx = r % 2
            rows = r1 - r0
            for g, (c0, c1) in pairs:
                first = g == 0
                ready = {"dram": max(e_ready[g], in_ready[r], pos_ready[r]),
                         "buffer": self.s_free[s_idx] if first else 0}
                bufs = [("Result", P * 2 * P)]
                if first:
                    bufs.append((f"S{s_idx + 1}", rows * D))
                if g == pairs[-1][0] and p1 > p0:
                    bufs.append(("Feature", -(p1 - p0) * K))
                if r == rb - 1:
                    bufs.append(("Weight", -K * (c1 - c0)))
                bufs.append(("Result", -P * 2 * P))
                st, en = self.array(self.sweep_cost(K, first), ready,
                                    ("input", f"r{r}", "embed.w", f"g{g}"), ("emb", r, g),
                                    _sign_split(bufs))
                if first:
                    sweep_start[r] = st
                self.emit(en, en + 1, "residual_add", ("Result", "pos", f"S{s_idx + 1}"),
                          ("emb_res", r, g))
            self.layernorm_rows(r, max(self.t_sa, ln_ready), s_idx, "l0.ln1", rows, ("L",))
        self.end()

    def msa(self, i):
        d, hw, P = self.d, self.hw, self.hw.p_sys
        D, T, h, Dh = d.model_dim, d.tokens, d.num_heads, d.head_dim
        R = hw.reciprocal_latency
        rb = ceil_div(T, P)
        self.begin("MSA", i)
        t0 = self.t_sa
        p = f"l{i}."
        dpairs = list(_pairs(Dh, P))
        tpairs = list(_pairs(T, P))
        head_loads_nb = t0
        for j in range(h):
            w_ready = {}
            for nm in ("wv", "wk", "wq"):
                for g, (c0, c1) in dpairs:
                    w_ready[nm, g] = self.load(p + nm, ((j, j + 1), (0, D), (c0, c1)), head_loads_nb,
                                               "Weight", D * (c1 - c0))
            # V and K initialization
            for nm, dest in (("wv", "V"), ("wk", "K")):
                for r in range(rb):
                    r0, r1 = r * P, min((r + 1) * P, T)
                    if j == 0 and nm == "wv":
                        self.emit(self.t_sa, self.t_sa + 1, "buffer_move", ("Feature", "Weight", f"r{r}"),
                                  ("res_in", r), (("Weight", (r1 - r0) * D),))
                    for g, (c0, c1) in dpairs:
                        ready = {"dram": w_ready[nm, g], "layernorm": self.row_ready.get(("L", r), 0)}
                        bufs = [("Result", P * 2 * P), (dest, (r1 - r0) * (c1 - c0))]
                        if r == rb - 1:
                            bufs.append(("Weight", -D * (c1 - c0)))
                        bufs.append(("Result", -P * 2 * P))
                        self.array(self.sweep_cost(D, g == 0), ready,
                                   ("Layer", f"r{r}", p + nm, f"h{j}g{g}"), (nm[1], i, j, r, g),
                                   _sign_split(bufs))
            head_loads_nb = self.t_sa          # next head's weights stream from here
            # Q / QK^T / softmax / SV pipeline
            sm_ready = {}

            def q_block(r):
                r0, r1 = r * P, min((r + 1) * P, T)
                for g, (c0, c1) in dpairs:
                    bufs = [("Result", P * 2 * P)]
                    if g == 0:
                        bufs.append(("Q", (r1 - r0) * Dh))
                    if r == rb - 1:
                        bufs.append(("Weight", -D * (c1 - c0)))
                    bufs.append(("Result", -P * 2 * P))
                    self.array(self.sweep_cost(D, g == 0), {"dram": w_ready["wq", g], "layernorm": self.row_ready.get(("L", r), 0)},
                               ("Layer", f"r{r}", p + "wq", f"h{j}g{g}"), ("q", i, j, r, g),
                               _sign_split(bufs))
                if j == h - 1:
                    # last head: this Layer row is dead, residual row moves back in
                    self.emit(self.t_sa, self.t_sa + 1, "buffer_move", ("Weight", "Layer", f"r{r}"),
                              ("res_out", r), (("Weight", -(r1 - r0) * D),))

            def qk_block(r):
                r0, r1 = r * P, min((r + 1) * P, T)
                s_idx = r % 2
                start = None
                for g, (c0, c1) in tpairs:
                    bufs = [("Result", P * 2 * P)]
                    if g == 0:
                        bufs.append((f"S{s_idx + 1}", (r1 - r0) * T))
                    if g == len(tpairs) - 1:
                        bufs.append(("Q", -(r1 - r0) * Dh))
                    bufs.append(("Result", -P * 2 * P))
                    st, en = self.array(self.sweep_cost(Dh, g == 0), {"buffer": self.s_free[s_idx] if g == 0 else 0},
                                        ("Q", f"r{r}", "K", f"g{g}"), ("qk", i, j, r, g), _sign_split(bufs))
                    start = st if start is None else start
                self.emit(start, self.t_sa, "softmax_pass", (f"S{s_idx + 1}", "pass1", f"r{r}"))
                self.emit(self.t_sa, self.t_sa + R, "reciprocal", ("softmax", f"r{r}"))
                sm_ready[r] = self.t_sa + R

            def sv_block(r):
                s_idx = r % 2
                r0, r1 = r * P, min((r + 1) * P, T)
                # pass 2 streams probabilities straight into the first SV pair
                st0 = max(self.t_sa, sm_ready[r])
                self.emit(st0, st0 + T, "softmax_pass", (f"S{s_idx + 1}", "pass2", f"r{r}"),
                          ("softmax", i, j, r))
                for g, (c0, c1) in dpairs:
                    bufs = [("Result", P * 2 * P)]
                    if g == len(dpairs) - 1:
                        bufs.append((f"S{s_idx + 1}", -(r1 - r0) * T))
                    bufs.append(("Result", -P * 2 * P))
                    self.array(self.sweep_cost(T, g == 0), {"reciprocal": sm_ready[r] if g == 0 else 0},
                               (f"S{s_idx + 1}", f"r{r}", "V", f"g{g}"), ("sv", i, j, r, g),
                               _sign_split(bufs))
                self.s_free[s_idx] = self.t_sa

            q_block(0)
            qk_block(0)
            for r in range(rb):
                if r + 1 < rb:
                    q_block(r + 1)
                sv_block(r)
                if r + 1 < rb:
                    qk_block(r + 1)
            # K and V contents die with the head
            self.emit(self.t_sa, self.t_sa, "buffer_move", ("K", "V", "release"), None,
                      (("K", -T * Dh), ("V", -T * Dh)))
        self.end()

    def lp(self, i):
        d, hw, P = self.d, self.hw, self.hw.p_sys
        D, T = d.model_dim, d.tokens
        rb = ceil_div(T, P)
        self.begin("LP", i)
        t0 = self.t_sa
        p = f"l{i}."
        pairs = list(_pairs(D, P))
        w_ready = {g: self.load(p + "wo", ((0, D), (c0, c1)), t0, "Weight", D * (c1 - c0))
                   for g, (c0, c1) in pairs}
        ln_ready = max(self.load(p + "ln2.g", ((0, D),), t0), self.load(p + "ln2.b", ((0, D),), t0))
        for r in range(rb):
            r0, r1 = r * P, min((r + 1) * P, T)
            s_idx = r % 2
            for g, (c0, c1) in pairs:
                first = g == 0
                bufs = [("Result", P * 2 * P)]
                if first:
                    bufs.append((f"S{s_idx + 1}", (r1 - r0) * D))
                if r == rb - 1:
                    bufs.append(("Weight", -D * (c1 - c0)))
                bufs.append(("Result", -P * 2 * P))
                st, en = self.array(self.sweep_cost(D, first), {"dram": w_ready[g], "buffer": self.s_free[s_idx] if first else 0},
                                    ("Feature", f"r{r}", p + "wo", f"g{g}"), ("wo", i, r, g), _sign_split(bufs))
                self.emit(en, en + 1, "residual_add", ("Result", "Layer", f"S{s_idx + 1}"), ("wo_res", i, r, g))
            self.layernorm_rows(r, max(self.t_sa, ln_ready), s_idx, p + "ln2", r1 - r0, ("L",))
        self.end()

    def mlp(self, i):
        d, hw, P = self.d, self.hw, self.hw.p_sys
        D, T, Dm = d.model_dim, d.tokens, d.hidden_dim
        R = hw.reciprocal_latency
        rb = ceil_div(T, P)
        last_layer = i == d.num_layers - 1
        self.begin("MLP", i)
        t0 = self.t_sa
        p = f"l{i}."
        nxt = "final.ln" if last_layer else f"l{i + 1}.ln1"
        self.load(p + "b2", ((0, D),), t0, "V", D * 4)
        ln_ready = max(self.load(nxt + ".g", ((0, D),), t0), self.load(nxt + ".b", ((0, D),), t0))
        hpairs = list(_pairs(Dm, P))
        opairs = list(_pairs(D, P))
        first_bmm = {}
        k = 0
        for g, (c0, c1) in hpairs:
            nb = t0 if g < 2 else first_bmm[g - 1]
            wh = self.load(p + "w1", ((0, D), (c0, c1)), nb, "Weight", D * (c1 - c0))
            bh = self.load(p + "b1", ((c0, c1),), nb, "K", (c1 - c0) * 4)
            wo = self.load(p + "w2", ((c0, c1), (0, D)), nb, "Weight", (c1 - c0) * D)
            last_g = g == len(hpairs) - 1
            for r in range(rb):
                r0, r1 = r * P, min((r + 1) * P, T)
                rows = r1 - r0
                s_idx = k % 2
                k += 1
                if g == 0:
                    self.emit(self.t_sa, self.t_sa + 1, "buffer_move", ("Feature", "Weight", f"r{r}"),
                              ("res_in", r), (("Weight", rows * D),))
                bufs = [("Result", P * 2 * P)]
                if r == rb - 1:
                    bufs.append(("Weight", -D * (c1 - c0)))
                    bufs.append(("K", -(c1 - c0) * 4))
                bufs.append(("Result", -P * 2 * P))
                st, en = self.array(self.sweep_cost(D, True), {"dram": max(wh, bh), "layernorm": self.row_ready.get(("L", r), 0)},
                                    ("Layer", f"r{r}", p + "w1", f"g{g}"), ("h", i, g, r), _sign_split(bufs))
                first_bmm.setdefault(g, st)
                self.array(P, {}, ("activation", f"g{g}r{r}"), ("relu", i, g, r),
                           (("Q", rows * (c1 - c0)),), kind="stall")
                self.emit(en, en + P, "activation", ("Result", "Q", f"g{g}r{r}"))
                # staged result into S (bias at g == 0, else from Feature)
                ready = self.s_free[s_idx]
                self.emit(max(ready, en), max(ready, en) + 1, "buffer_move",
                          ("Feature" if g else "B^O", f"S{s_idx + 1}", f"r{r}"), ("stage_load", i, g, r),
                          ((f"S{s_idx + 1}", rows * D),))
                bufs = [("Result", P * 2 * P)]
                bufs.append(("Q", -rows * (c1 - c0)))
                if r == rb - 1:
                    bufs.append(("Weight", -(c1 - c0) * D))
                bufs.append(("Result", -P * 2 * P))
                n_o = len(opairs)
                cost = n_o * ((c1 - c0) + hw.pair_latency) + hw.fill_cycles
                st2, en2 = self.array(cost, {"dram": wo, "buffer": ready}, ("Q", f"g{g}r{r}", p + "w2", f"g{g}x{n_o}"),
                                      ("o", i, g, r), _sign_split(bufs))
                if not last_g:
                    drain = ceil_div(D, 2 * P)
                    self.emit(en2, en2 + drain, "buffer_move", (f"S{s_idx + 1}", "Feature", f"r{r}"),
                              ("stage_store", i, g, r), ((f"S{s_idx + 1}", -rows * D),))
                    self.s_free[s_idx] = en2 + drain
                else:
                    self.emit(en2, en2 + 1, "residual_add", (f"S{s_idx + 1}", "Weight", f"r{r}"),
                              ("mlp_res", i, r), (("Weight", -rows * D),))
                    done = self.layernorm_rows(r, max(en2 + 1, ln_ready), s_idx, nxt, rows, ("L",))
                    if last_layer:
                        self._pending_out.append((r, r0, r1, done))
        self.emit(self.t_sa, self.t_sa, "buffer_move", ("V", "release"), None, (("V", -D * 4),))
        self.end()

    def run(self):
        self._pending_out = []
        self.embedding()
        for i in range(self.d.num_layers):
            self.msa(i)
            self.lp(i)
            self.mlp(i)
        # output rows leave as soon as they are normalized
        self.begin("FINAL_LN", self.d.num_layers - 1)
        done = self.t_sa
        D = self.d.model_dim
        for r, r0, r1, ready in self._pending_out:
            done = max(done, self.load("output", ((r0, r1), (0, D)), ready, direction="store"))
        self.spans[-1].start = self.t_sa
        self.t_sa = done
        self.end()
        self.mode = "DONE"
        return done


def _pairs(n, p):
    for g in range(ceil_div(n, 2 * p)):
        yield g, (g * 2 * p, min((g + 1) * 2 * p, n))


def _fmt_block(block):
    return ",".join(f"{a}:{b}" for a, b in block)


def _sign_split(bufs):
    """Merge deltas per buffer, keeping acquisitions and releases separate."""
    acc, rel = defaultdict(int), defaultdict(int)
    for name, delta in bufs:
        (acc if delta > 0 else rel)[name] += delta
    out = [(n, v) for n, v in acc.items()] + [(n, v) for n, v in rel.items()]
    # paired +/- on the same buffer inside one event cancel to a transient
    return tuple(out)


# --------------------------------------------------------------- public API

def run_inference_schedule(model: ModelConfig, hw: HardwareConfig) -> tuple[CycleReport, ScheduleTrace]:
    eng = _Engine(model, hw)
    total = eng.run()
    stall = sum(s.stall for s in eng.spans)
    report = CycleReport(model.name, hw.p_sys, hw.clock_freq, eng.spans, total, stall)
    trace = ScheduleTrace(eng.events, eng.dram, buffer_specs(eng.d, hw), eng.d)
    return report, trace


def _single_mode(model, hw, which, preload):
    eng = _Engine(model, hw)
    eng._pending_out = []
    getattr(eng, which)(0)
    span = eng.spans[-1]
    events = eng.events
    if preload:
        # the first operand block is already resident: drop the cold-start wait
        arr = [e for e in events if e.on_array]
        if arr and arr[0].kind == "stall" and arr[0].operands[0] == "dram":
            cold = arr[0]
            events = [e for e in events if e is not cold]
            span.start = cold.cycle_end
            span.stall -= cold.cycle_end - cold.cycle_start
    return ScheduleTrace(events, eng.dram, buffer_specs(eng.d, hw), eng.d), span


def schedule_lp(model: ModelConfig, hw: HardwareConfig, preload: bool = True):
    """Output-projection pass of layer 0 alone; returns (trace, ModeSpan).

    With ``preload`` the wait for the very first weight block is not charged
    to the mode (inside a full run the previous mode hides nothing, so
    ``run_inference_schedule`` always charges it).
    """
    return _single_mode(model, hw, "lp", preload)


def schedule_msa(model: ModelConfig, hw: HardwareConfig, preload: bool = True):
    return _single_mode(model, hw, "msa", preload)


def schedule_mlp(model: ModelConfig, hw: HardwareConfig, preload: bool = True):
    return _single_mode(model, hw, "mlp", preload)


# ------------------------------------------------------------------ checks

def check_array_exclusive(events) -> list[tuple[ScheduleEvent, ScheduleEvent]]:
    arr = sorted((e for e in events if e.on_array), key=lambda e: (e.cycle_start, e.cycle_end))
    return [(a, b) for a, b in zip(arr, arr[1:]) if b.cycle_start < a.cycle_end]


def buffer_occupancy(events, specs: dict[str, BufferSpec], static: bool = True):
    """Peak occupancy per buffer and the list of (buffer, cycle, level) overruns.

    Positive deltas apply at an event's start, negative ones at its end.
    Layer and Feature additionally carry their T x D activation matrix.
    """
    deltas = defaultdict(list)
    for e in events:
        for name, d in e.buffers:
            deltas[name].append((e.cycle_start if d > 0 else e.cycle_end, 0 if d < 0 else 1, d))
    peaks, over = {}, []
    for name, spec in specs.items():
        base = 0
        if static and name in ("Layer", "Feature"):
            base = spec.nominal
        level = peak = base
        for t, _, d in sorted(deltas.get(name, [])):
            level += d
            if level > peak:
                peak = level
            if level > spec.capacity:
                over.append((name, t, level))
        peaks[name] = peak
    return peaks, over


def check_buffers(trace: ScheduleTrace) -> list:
    return buffer_occupancy(trace.events, trace.buffers)[1]


@dataclass
class AuditVerdict:
    duplicates: list = field(default_factory=list)
    intermediate_stores: list = field(default_factory=list)
    missing: list = field(default_factory=list)
    loaded_bytes: int = 0
    expected_bytes: int = 0

    @property
    def passed(self) -> bool:
        return (not self.duplicates and not self.intermediate_stores and not self.missing
                and self.loaded_bytes == self.expected_bytes)

    def summary(self) -> str:
        return (f"audit {'PASS' if self.passed else 'FAIL'}: loaded {self.loaded_bytes} of "
                f"{self.expected_bytes} expected bytes, {len(self.duplicates)} duplicate loads, "
                f"{len(self.intermediate_stores)} intermediate stores, {len(self.missing)} tensors "
                f"not fully loaded")


def weights_manifest(model: ModelConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """name -> (shape, itemsize) for every parameter tensor plus the input."""
    man = {n: (s, np.dtype(t).itemsize) for n, s, t in parameter_layout(model)}
    dd = derive_dims(model, HardwareConfig())
    man["input"] = ((dd.num_patches, dd.patch_dim), 1)
    return man


def audit_single_load(dram: list[DramTransaction], manifest: dict, output: str = "output") -> AuditVerdict:
    v = AuditVerdict()
    v.expected_bytes = sum(int(np.prod(s)) * it for s, it in manifest.values())
    by_tensor = defaultdict(list)
    for t in dram:
        if t.direction == "store":
            if t.tensor != output:
                v.intermediate_stores.append(t)
            continue
        v.loaded_bytes += t.nbytes
        by_tensor[t.tensor].append(t)
    for name, txs in by_tensor.items():
        if name not in manifest:
            v.duplicates.extend(txs)      # not a parameter at all: an intermediate reload
            continue
        shape, _ = manifest[name]
        cover = np.zeros(shape, dtype=np.uint8)
        for t in txs:
            sl = tuple(slice(a, b) for a, b in t.block)
            region = cover[sl]
            if region.any():
                v.duplicates.append(t)
            cover[sl] = np.minimum(region.astype(np.uint16) + 1, 255)
        if not cover.all():
            v.missing.append(name)
    for name in manifest:
        if name not in by_tensor:
            v.missing.append(name)
    return v


def stall_breakdown(trace: ScheduleTrace, by: str = "cause") -> dict[str, int]:
    """Stall cycles grouped by cause (dram, buffer, layernorm, reciprocal,
    activation) or by mode."""
    out = defaultdict(int)
    for e in trace.events:
        if e.kind == "stall":
            out[e.operands[0] if by == "cause" else e.mode] += e.cycle_end - e.cycle_start
    return dict(out)


# ------------------------------------------------------------------ replay

def _ln_out_name(which: str) -> str:
    return "y" if which == "final.ln" else which


def replay_schedule(trace: ScheduleTrace, image, w, collect: dict | None = None) -> np.ndarray:
    """Execute the block operations carried by ``trace`` in schedule order.

    Each buffer is a plain array; bmm events read their operand blocks from
    the buffers named by the schedule and write the result where the hardware
    would.  Returns y (int8, T x D).  ``collect`` receives every row block
    normalized by a LayerNorm, keyed by the LayerNorm name.
    """
    from .functional import (Requant, block_matmul, block_product, embed_base, layernorm_int8,
                             patchify, pseudo_softmax_rows, score_exponents)
    from .packing import requantize, requantize_terms

    d = trace.dims
    P, D, T, Dh = d.p_sys, d.model_dim, d.tokens, d.head_dim
    rq = Requant(w)
    patches = np.vstack([np.zeros((1, d.patch_dim), np.int64), patchify(image, w.model).astype(np.int64)])
    base = embed_base(w)
    (ema, emb), eshift = rq.embed()
    L = np.zeros((T, D), np.int64)
    F = np.zeros((T, D), np.int64)
    Wres = np.zeros((T, D), np.int64)
    K = np.zeros((T, Dh), np.int64)
    V = np.zeros((T, Dh), np.int64)
    Y = np.zeros((T, D), np.int64)
    Q, S, P8, stage, M = {}, {}, {}, {}, None
    result = None

    def rows(r):
        return slice(r * P, min((r + 1) * P, T))

    def cols(g, n):
        return slice(g * 2 * P, min((g + 1) * 2 * P, n))

    for e in trace.events:
        op = e.op
        if op is None:
            continue
        name = op[0]
        if name == "emb":
            _, r, g = op
            result = block_product(patches[rows(r)], w["embed.w"][:, cols(g, D)])
        elif name == "emb_res":
            _, r, g = op
            S.setdefault(r, np.zeros((rows(r).stop - rows(r).start, D), np.int64))
            S[r][:, cols(g, D)] = requantize_terms([(result, ema), (base[rows(r), cols(g, D)], emb)], eshift)
        elif name == "ln":
            _, which, r = op
            x = S.pop(r)
            out = layernorm_int8(x, rq.ln(which, _ln_out_name(which)))
            if which == "final.ln":
                Y[rows(r)] = out
            else:
                L[rows(r)] = out
            F[rows(r)] = x
            if collect is not None:
                collect.setdefault(which, np.zeros((T, D), np.int64))[rows(r)] = x
        elif name == "res_in":
            Wres[rows(op[1])] = F[rows(op[1])]
        elif name == "res_out":
            L[rows(op[1])] = Wres[rows(op[1])]
        elif name in ("v", "k", "q"):
            _, i, j, r, g = op
            acc = block_product(L[rows(r)], w[f"l{i}.w{name}"][j][:, cols(g, Dh)])
            out = requantize(acc, rq.proj(i, name, j))
            if name == "q":
                Q.setdefault(r, np.zeros((acc.shape[0], Dh), np.int64))[:, cols(g, Dh)] = out
            else:
                (V if name == "v" else K)[rows(r), cols(g, Dh)] = out
        elif name == "qk":
            _, i, j, r, g = op
            tc = cols(g, T)
            S.setdefault(r, np.zeros((Q[r].shape[0], T), np.int64))
            S[r][:, tc] = score_exponents(block_product(Q[r], K[tc].T), rq, i, j)
            if tc.stop == T:
                del Q[r]
        elif name == "softmax":
            _, i, j, r = op
            P8[r] = pseudo_softmax_rows(S.pop(r))
        elif name == "sv":
            _, i, j, r, g = op
            dc = cols(g, Dh)
            out = requantize(block_product(P8[r], V[:, dc]), rq.head_out(i, j))
            F[rows(r), j * Dh + dc.start:j * Dh + dc.stop] = out
            if dc.stop == Dh:
                del P8[r]
        elif name == "wo":
            _, i, r, g = op
            result = block_product(F[rows(r)], w[f"l{i}.wo"][:, cols(g, D)])
        elif name == "wo_res":
            _, i, r, g = op
            (ma, mb), sh = rq.attn_residual(i)
            S.setdefault(r, np.zeros((result.shape[0], D), np.int64))
            S[r][:, cols(g, D)] = requantize_terms([(result, ma), (L[rows(r), cols(g, D)], mb)], sh)
        elif name == "h":
            _, i, g, r = op
            gc = cols(g, d.hidden_dim)
            result = block_product(L[rows(r)], w[f"l{i}.w1"][:, gc]) + w[f"l{i}.b1"][gc].astype(np.int64)
        elif name == "relu":
            _, i, g, r = op
            M = requantize(np.maximum(result, 0), rq.hidden(i))
        elif name == "stage_load":
            _, i, g, r = op
            if g == 0:
                stage[r] = np.broadcast_to(w[f"l{i}.b2"].astype(np.int64), (M.shape[0], D)).copy()
            else:
                stage[r] = F[rows(r)].copy()
        elif name == "o":
            _, i, g, r = op
            stage[r] += block_matmul(M, w[f"l{i}.w2"][cols(g, d.hidden_dim)], P)
        elif name == "stage_store":
            _, i, g, r = op
            F[rows(r)] = stage.pop(r)
        elif name == "mlp_res":
            _, i, r = op
            (ma, mb), sh = rq.mlp_residual(i)
            S[r] = requantize_terms([(stage.pop(r), ma), (Wres[rows(r)], mb)], sh)
        else:
            raise ScheduleError(f"unknown block operation {name!r}")
    return Y.astype(np.int8)
