"""Print device timelines for sequential backprop, GPipe and depth-parallel training.

Four stages, one device each, unit forward and backward cost. The sideways
schedule keeps all devices busy once the pipe is full, so throughput is one
frame per (fwd + bwd) of a single stage instead of per whole network.
The sequential baseline reports its bubble against one serial worker.
"""

from skipsideways.pipesim import DeviceCostProfile, simulate_gpipe, simulate_sequential_bp, simulate_sideways

profile = DeviceCostProfile.uniform(4)
runs = {
    "sequential_bp": simulate_sequential_bp(profile, T=4),
    "gpipe (8 micro-batches)": simulate_gpipe(profile, 8),
    "sideways": simulate_sideways(profile, T=16),
}
for name, res in runs.items():
    res.check_legal()
    print(f"{name}: throughput {res.throughput:.3f} frames/unit time, bubble {res.bubble_fraction:.3f}")
    print(res.gantt(int(2 * res.makespan)))  # two characters per unit of time
    print()
