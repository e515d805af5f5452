"""How much DRAM traffic a single-load schedule saves over a block-streaming baseline."""
from singleload.config import HardwareConfig, builtin_models
from singleload.schedule import run_inference_schedule
from singleload.traffic import baseline_traffic, improvement_ratios, single_load_traffic

for p in (32, 16):
    hw = HardwareConfig(p_sys=p)
    for m in builtin_models():
        name = m.name
        rep, trace = run_inference_schedule(m, hw)
        me = single_load_traffic(m, hw, rep, trace.dram)
        r = improvement_ratios(me, baseline_traffic(m, hw, cycle_report=rep))
        print(f"P={p:2d} {name:7s} total x{r['total_ratio']:.2f}  peak x{r['peak_ratio']:.2f} ({r['peak_mode']})")
