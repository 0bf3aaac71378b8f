"""Exact-gradient references for engine pseudo-gradients.

``collapse_static_grads`` makes every temporal edge instantaneous and
backpropagates one frame through the resulting feed-forward network.
``unrolled_true_grads`` replays the engine's own step graph, stores every
activation, and runs full reverse mode over it; it is the O(T)-memory
baseline the engine is designed to avoid.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import FrameSequence
from .engine import unit_forward
from .layers import mse_loss, softmax_xent
from .numerics import dtype_for
from .topology import EngineConfig, NetworkTopology


class CapacityError(MemoryError):
    """The unrolled oracle would exceed its activation-storage budget."""


def _loss(head: str, out, target):
    if head == "cross_entropy":
        return softmax_xent(out, target)
    return mse_loss(out, target)


def collapse_static_grads(topology: NetworkTopology, params: list[dict], config: EngineConfig, frame,
                          target) -> tuple[float, list[dict]]:
    """Loss and exact parameter gradients of the time-collapsed network on one frame."""
    topology.check(config)
    D = topology.depth
    h = [np.asarray(frame, dtype=dtype_for(config.precision))]
    pbs = []
    for l in range(1, D + 1):
        unit = topology.unit(l)
        out, pb, _ = unit_forward(unit, params[l - 1], [h[s] for s in unit.sources], config.fusion,
                                  config.shortcut_gain)
        h.append(out)
        pbs.append(pb)
    loss, g = _loss(topology.head, h[D], target)
    cot = [None] * (D + 1)
    cot[D] = g
    grads: list[dict] = [None] * D
    for l in range(D, 0, -1):
        cots, pg = pbs[l - 1](cot[l])
        grads[l - 1] = pg
        for s, c in zip(topology.unit(l).sources, cots):
            cot[s] = c if cot[s] is None else cot[s] + c
    return loss, grads


def unrolled_true_grads(topology: NetworkTopology, params: list[dict], config: EngineConfig, seq: FrameSequence,
                        max_scalars: int | None = None) -> tuple[float, list[dict], int]:
    """Exact gradient of the summed valid-step loss of the engine's step graph.

    Returns ``(total_loss, grads, n_valid_losses)``. Raises
    :class:`CapacityError` once stored activations exceed ``max_scalars``.
    """
    topology.check(config)
    D = topology.depth
    T = len(seq)
    dt = dtype_for(config.precision)
    frames = seq.frames.astype(dt, copy=False)
    nin = len(topology.input_shape)
    lead = tuple(frames.shape[1:frames.ndim - nin])
    n_steps = T + D
    discard = config.warmup_policy == "discard"

    def zeros(node):
        return np.zeros(lead + topology.shape_of(node), dt)

    acts = [zeros(n) for n in range(D + 1)]
    valid = [False] * (D + 1)
    origin = [-1 - n for n in range(D + 1)]
    tape = []  # per step: list of pullbacks for units 1..D
    loss_grads = {}
    stored = 0
    total = 0.0
    n_valid = 0
    for t in range(n_steps):
        new_acts = [frames[t] if t < T else zeros(0)]
        new_valid = [t < T]
        new_origin = [t]
        step_pbs = []
        for l in range(1, D + 1):
            unit = topology.unit(l)
            out, pb, kept = unit_forward(unit, params[l - 1], [acts[s] for s in unit.sources], config.fusion,
                                         config.shortcut_gain)
            stored += sum(a.size for a in kept)
            step_pbs.append(pb)
            new_acts.append(out)
            new_valid.append(all(valid[s] for s in unit.sources))
            new_origin.append(origin[unit.sources[0]])
        if max_scalars is not None and stored > max_scalars:
            raise CapacityError(f"unrolled oracle needs more than {max_scalars} stored scalars at step {t}")
        tape.append(step_pbs)
        o = new_origin[D]
        if 0 <= o < T and (new_valid[D] or not discard):
            loss, g = _loss(topology.head, new_acts[D], seq.targets[o])
            total += loss
            n_valid += 1
            loss_grads[t] = g
        acts, valid, origin = new_acts, new_valid, new_origin

    grads = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
    # cot_next[s]: cotangent of node s's output at step t (filled by consumers at step t + 1)
    cot_next: list = [None] * (D + 1)
    for t in range(n_steps - 1, -1, -1):
        cot_here = cot_next
        if t in loss_grads:
            cot_here[D] = loss_grads[t] if cot_here[D] is None else cot_here[D] + loss_grads[t]
        cot_prev: list = [None] * (D + 1)
        for l in range(D, 0, -1):
            c = cot_here[l]
            if c is None:
                continue
            cots, pg = tape[t][l - 1](c)
            for k, v in pg.items():
                grads[l - 1][k] += v
            for s, cs in zip(topology.unit(l).sources, cots):
                cot_prev[s] = cs if cot_prev[s] is None else cot_prev[s] + cs
        tape[t] = None
        cot_next = cot_prev
    return total, grads, n_valid


@dataclass
class GradientReport:
    names: list[str]
    cosine: list[float]
    rel_l2: list[float]
    sizes: list[int]

    @property
    def mean_cosine(self) -> float:
        w = np.asarray(self.sizes, float)
        return float(np.dot(w, self.cosine) / w.sum())

    @property
    def mean_rel_l2(self) -> float:
        w = np.asarray(self.sizes, float)
        return float(np.dot(w, self.rel_l2) / w.sum())

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "cosine", "rel_l2"])
        for n, c, r in zip(self.names, self.cosine, self.rel_l2):
            writer.writerow([n, repr(c), repr(r)])
        writer.writerow(["__weighted_mean__", repr(self.mean_cosine), repr(self.mean_rel_l2)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _flatten_named(grads) -> dict:
    if isinstance(grads, dict):
        return dict(grads)
    out = {}
    for l, g in enumerate(grads, start=1):
        for k, v in g.items():
            out[f"unit{l}.{k}"] = v
    return out


def grad_similarity(a, b) -> GradientReport:
    """Per-parameter cosine and relative L2 error of ``a`` against reference ``b``.

    Two zero vectors have cosine 1; a zero against a nonzero vector has cosine 0.
    """
    fa, fb = _flatten_named(a), _flatten_named(b)
    if fa.keys() != fb.keys():
        raise ValueError("gradient sets have different parameter structure")
    names, cos, rel, sizes = [], [], [], []
    for name in fa:
        x = np.asarray(fa[name], np.float64).ravel()
        y = np.asarray(fb[name], np.float64).ravel()
        if x.shape != y.shape:
            raise ValueError(f"parameter {name!r} shape mismatch")
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        if nx == 0 and ny == 0:
            c = 1.0
        elif nx == 0 or ny == 0:
            c = 0.0
        else:
            c = float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))
        names.append(name)
        cos.append(c)
        rel.append(float(np.linalg.norm(x - y) / max(ny, 1e-12)))
        sizes.append(x.size)
    return GradientReport(names, cos, rel, sizes)
