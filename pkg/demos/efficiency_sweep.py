"""Array utilization of DeiT-B as the systolic dimension varies; prints local maxima."""
from singleload import analysis as an
from singleload.config import get_model

pts = an.efficiency_sweep(get_model("DeiT-B"), range(4, 81))
for pt in pts:
    print(f"{pt.p_sys:3d} {pt.efficiency:.4f} " + "#" * int(60 * pt.efficiency))
print("local maxima above P=8:", an.local_maxima(pts))
