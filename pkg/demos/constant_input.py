"""On a clip that never changes, depth-parallel gradients match plain backprop once the pipe fills.

This is the sanity check behind the training engine: with no motion, the
one-step lag between layers has nothing to disagree about.
"""

from skipsideways.gradcheck import constant_input_rows

rows = constant_input_rows(range(3), depth=4)
worst = max(r.error for r in rows)
print(f"{len(rows)} comparisons, worst relative error {worst:.2e}")
for r in rows[:6]:
    print(f"  {r.check:28s} seed={r.seed} {r.target:20s} {r.error:.2e}")
