"""Plot validation curves from metrics.csv; needs pandas and matplotlib."""
import sys

import matplotlib.pyplot as plt
import pandas as pd

df = pd.read_csv(sys.argv[1] if len(sys.argv) > 1 else "metrics.csv")
metric = "val_l2"
fig, ax = plt.subplots(figsize=(6, 4))
for mode, group in df.groupby("mode"):
    curve = group.groupby("epoch")[metric]
    mean, std = curve.mean(), curve.std().fillna(0.0)
    ax.plot(mean.index, mean.values, label=mode)
    ax.fill_between(mean.index, mean - std, mean + std, alpha=0.2)
ax.set_xlabel("epoch")
ax.set_ylabel(metric)
ax.legend()
fig.tight_layout()
fig.savefig("metrics.png", dpi=120)
