"""Cycle-level throughput for the four built-in encoders at two array sizes."""
from singleload.config import HardwareConfig, builtin_models
from singleload.schedule import run_inference_schedule

for p in (32, 16):
    hw = HardwareConfig(p_sys=p)
    print(f"P = {p}")
    for m in builtin_models():
        name = m.name
        rep, _ = run_inference_schedule(m, hw)
        fr = ", ".join(f"{k} {v:.2f}" for k, v in rep.mode_fractions.items())
        print(f"  {name:7s} {rep.fps:8.2f} FPS  {rep.latency_s * 1e3:8.2f} ms  ({fr})")
