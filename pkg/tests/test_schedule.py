from dataclasses import replace

import pytest

from singleload.config import HardwareConfig, ModelConfig, derive_dims, get_model
from singleload.schedule import (EVENT_KINDS, audit_single_load, buffer_occupancy, buffer_specs,
                                 check_array_exclusive, check_buffers, parse_trace_lines,
                                 run_inference_schedule, schedule_lp, schedule_mlp, schedule_msa,
                                 stall_breakdown, weights_manifest)
from singleload.traffic import baseline_traffic

from conftest import MODEL_NAMES, run

HW32 = HardwareConfig(p_sys=32)
DEIT_B = get_model("DeiT-B")


def _bmm(trace, tag=None, pred=lambda op: True):
    return [e for e in trace.events if e.kind == "bmm" and (tag is None or e.op[0] == tag) and pred(e.op)]


def _dur(evs):
    return sum(e.cycle_end - e.cycle_start for e in evs)


# -------------------------------------------------------------------- LP

def test_lp_deit_b_block_count():
    trace, span = schedule_lp(DEIT_B, HW32)
    bmm = _bmm(trace)
    assert len(bmm) == 7 * 12
    work = 7 * 12 * 768
    assert work == 64_512
    fill = 7 * HW32.fill_cycles + 7 * 12 * HW32.pair_latency
    assert _dur(bmm) == work + fill
    assert span.stall == 0                 # LayerNorm tail fully overlapped


def test_lp_single_block_toy():
    m = ModelConfig("lp1", 48, 16, 16, 1, 1)        # T=10, D=16
    trace, span = schedule_lp(m, HardwareConfig(p_sys=16))
    assert len(_bmm(trace)) == 1
    assert span.stall == 0 and not [e for e in trace.events if e.kind == "stall"]


def test_lp_dram_is_one_weight_matrix():
    trace, _ = schedule_lp(DEIT_B, HW32)
    wo = sum(t.nbytes for t in trace.dram if t.tensor == "l0.wo")
    assert wo == 768 * 768
    assert not [t for t in trace.dram if t.direction == "store"]
    assert {t.tensor for t in trace.dram} <= {"l0.wo", "l0.ln2.g", "l0.ln2.b"}


# ------------------------------------------------------------------- MSA

def test_msa_qk_block_count():
    trace, _ = schedule_msa(DEIT_B, HW32)
    qk = _bmm(trace, "qk", lambda op: op[2] == 0)
    assert len(qk) == 7 * 4                 # ceil(197 / 64) column pairs
    assert _dur(qk) == 7 * 4 * (64 + HW32.pair_latency) + 7 * HW32.fill_cycles


def test_msa_single_block_head_hides_softmax():
    m = ModelConfig("h1", 64, 16, 64, 1, 1)         # T=17 <= P
    trace, _ = schedule_msa(m, HW32)
    assert len(_bmm(trace, "q")) == 1
    st = stall_breakdown(trace)
    softmax_stalls = st.get("reciprocal", 0) + st.get("softmax", 0)
    assert softmax_stalls == 0, st


def test_msa_residual_moves_once():
    trace, _ = schedule_msa(DEIT_B, HW32)
    d = derive_dims(DEIT_B, HW32)
    moved_in = sum(b[1] for e in trace.events if e.op and e.op[0] == "res_in" for b in e.buffers)
    moved_out = sum(b[1] for e in trace.events if e.op and e.op[0] == "res_out" for b in e.buffers)
    assert moved_in == d.tokens * d.model_dim == -moved_out


# ------------------------------------------------------------------- MLP

def test_mlp_activation_stalls():
    trace, _ = schedule_mlp(DEIT_B, HW32)
    d = derive_dims(DEIT_B, HW32)
    points = d.row_blocks() * d.col_blocks(d.hidden_dim) // 2
    assert points == 336
    assert stall_breakdown(trace) == {"activation": points * 32}


def test_mlp_single_block_toy():
    m = ModelConfig("mlp1", 8, 8, 8, 1, 1)          # T=2, D=8, D_mlp=32
    trace, _ = schedule_mlp(m, HW32)
    stalls = [e for e in trace.events if e.kind == "stall"]
    assert len(stalls) == 1 and stalls[0].cycle_end - stalls[0].cycle_start == 32


def test_mlp_weight_bytes():
    trace, _ = schedule_mlp(DEIT_B, HW32)
    wb = sum(t.nbytes for t in trace.dram if t.tensor in ("l0.w1", "l0.w2"))
    assert wb == 2 * 768 * 3072


# ----------------------------------------------------------- full runs

@pytest.mark.parametrize("p", [16, 32])
@pytest.mark.parametrize("name", MODEL_NAMES)
def test_trace_invariants(name, p):
    rep, trace = run(name, p)
    assert not check_array_exclusive(trace.events)
    assert not check_buffers(trace)
    assert {e.kind for e in trace.events} <= set(EVENT_KINDS)
    spans = sum(s.cycles for s in rep.spans)
    assert rep.inference_cycles == spans == sum(rep.mode_cycles.values()) + rep.embedding_cycles + rep.final_ln_cycles
    assert audit_single_load(trace.dram, weights_manifest(get_model(name))).passed


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_p16_to_p32_cycle_ratio(name):
    ratio = run(name, 16)[0].inference_cycles / run(name, 32)[0].inference_cycles
    assert 3.5 <= ratio <= 4.2, f"{name}: {ratio:.3f}"


def test_deterministic_traces():
    m = get_model("DeiT-T")
    a = run_inference_schedule(m, HW32)[1]
    b = run_inference_schedule(m, HW32)[1]
    assert a.to_lines() == b.to_lines() and a.digest() == b.digest()


def test_trace_roundtrip():
    m = ModelConfig("rt", 64, 16, 64, 2, 1)
    _, trace = run_inference_schedule(m, HardwareConfig(p_sys=16))
    events, dram = parse_trace_lines(trace.to_lines())
    assert events == trace.events and dram == trace.dram


def test_buffer_capacities_follow_dims():
    d = derive_dims(DEIT_B, HW32)
    specs = buffer_specs(d, HW32)
    assert set(specs) == {"Weight", "Feature", "Layer", "Q", "K", "V", "Result", "S1", "S2"}
    assert specs["Result"].capacity == 32 * 64
    assert specs["Weight"].storage_class == "block-ram" and specs["Q"].storage_class == "lut-ram"
    assert specs["Feature"].nominal == 197 * 768


def test_overflow_detected():
    m = get_model("DeiT-T")
    _, trace = run("DeiT-T", 32)
    small = {k: replace(v, capacity=v.capacity // 2) for k, v in trace.buffers.items()}
    assert buffer_occupancy(trace.events, small)[1]


def test_overlap_detected():
    _, trace = run("DeiT-T", 32)
    arr = [e for e in trace.events if e.on_array]
    bad = replace(arr[5], cycle_start=arr[4].cycle_start)
    assert check_array_exclusive(arr[:5] + [bad] + arr[6:])


# ----------------------------------------------------------------- audit

def test_audit_rejects_baseline_log():
    m = get_model("DeiT-T")
    base = baseline_traffic(m, HW32, cycle_report=run("DeiT-T", 32)[0], log=True)
    v = audit_single_load(base.transactions, weights_manifest(m))
    assert not v.passed and len(v.duplicates) > 0 and len(v.intermediate_stores) > 0


def test_audit_names_duplicated_block():
    m = get_model("DeiT-T")
    _, trace = run("DeiT-T", 32)
    dup = next(t for t in trace.dram if t.tensor == "l3.w1")
    v = audit_single_load(list(trace.dram) + [dup], weights_manifest(m))
    assert not v.passed and v.duplicates == [dup]


def test_audit_flags_store_and_missing():
    m = get_model("DeiT-T")
    _, trace = run("DeiT-T", 32)
    st = replace(trace.dram[0], direction="store", tensor="act.l0.q0")
    v = audit_single_load(list(trace.dram) + [st], weights_manifest(m))
    assert v.intermediate_stores == [st]
    v = audit_single_load([t for t in trace.dram if t.tensor != "final.ln.b"], weights_manifest(m))
    assert v.missing == ["final.ln.b"]


def test_stall_breakdown_by_mode():
    rep, trace = run("DeiT-B", 32)
    by_mode = stall_breakdown(trace, by="mode")
    assert sum(by_mode.values()) == sum(stall_breakdown(trace).values()) == rep.stall_cycles
