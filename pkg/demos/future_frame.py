"""Predict the next frame of a slowly moving blob and compare the two training modes.

    python demos/future_frame.py [epochs]
"""

import sys

from skipsideways.experiments import PRESETS, run_experiment

base = PRESETS["future_frame"]
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else base.epochs
result = run_experiment(base.with_(modes=("skip_sideways", "sideways"), seeds=(0,), epochs=epochs),
                        "results/demo_future_frame")

final = {run.mode: run.final["val_l2"] for run in result.runs}
for mode, l2 in final.items():
    print(f"{mode:14s} validation L2 {l2:.4f}")
print(f"ratio skip/plain = {final['skip_sideways'] / final['sideways']:.3f}")
