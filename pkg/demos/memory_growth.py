"""Stored activations per unit as the clip gets longer.

Depth-parallel training keeps a fixed window of activations per unit, while
backprop through the unrolled clip must keep every step.
"""

from skipsideways.experiments import PRESETS, build_model
from skipsideways.pipesim import memory_account

topo = build_model(PRESETS["direction"], "skip_sideways")
print(f"{'T':>5} {'sideways total':>15} {'unrolled total':>15}")
for T in (8, 32, 128, 512):
    side = memory_account(topo, T, "sideways")
    bp = memory_account(topo, T, "bp_unrolled")
    print(f"{T:5d} {sum(side):15d} {sum(bp):15d}")
