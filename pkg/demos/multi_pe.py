"""Throughput scaling with several processing elements sharing one DRAM port."""
from singleload import analysis as an
from singleload.config import HardwareConfig, get_model
from singleload.schedule import run_inference_schedule
from singleload.traffic import baseline_traffic, single_load_traffic

hw, m = HardwareConfig(), get_model("DeiT-B")
rep, trace = run_inference_schedule(m, hw)
me = single_load_traffic(m, hw, rep, trace.dram)
base = baseline_traffic(m, hw, cycle_report=rep)
for k in range(1, 9):
    a, b = an.multi_pe(m, hw, k, me, rep), an.multi_pe(m, hw, k, base, rep)
    print(f"k={k}  single-load {a.fps:7.2f} FPS{' (capped)' if a.bandwidth_limited else ''}"
          f"   baseline {b.fps:7.2f} FPS{' (capped)' if b.bandwidth_limited else ''}")
