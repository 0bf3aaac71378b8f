"""Motion-direction classification: skip shortcuts vs plain depth-parallel training.

Each clip shows a sprite drifting in one of four directions. A single frame
carries no direction information, so a network must combine frames to do
better than 25%. With every edge costing one step, the plain chain sees a
frame mix that lags per layer, while the shortcut edges keep the top of the
network closer to the current input.

    python demos/direction_gap.py [epochs]
"""

import sys

from skipsideways.experiments import PRESETS, run_experiment

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else PRESETS["direction"].epochs
config = PRESETS["direction"].with_(modes=("skip_sideways", "sideways"), seeds=(0,), epochs=epochs)

result = run_experiment(config, "results/demo_direction")
for run in result.runs:
    curve = [round(row["val_accuracy"], 3) for row in run.rows]
    print(f"{run.mode:14s} clip accuracy per epoch: {curve}  ({run.seconds:.0f}s)")
# chance is 0.25; the shortcut model should end well above it
