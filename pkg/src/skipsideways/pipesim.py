"""Analytical device schedules for sequential BP, GPipe and Sideways execution.

Nothing here touches tensors: stages carry abstract forward/backward costs and
the simulators lay out work items on devices, honouring stage dependencies
and a scalar communication cost whenever a dependency crosses devices.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .engine import unit_forward
from .layers import param_shapes
from .numerics import dtype_for
from .topology import NetworkTopology

_EPS = 1e-12


@dataclass(frozen=True)
class DeviceCostProfile:
    """Per-stage costs plus a stage -> device placement (identity by default)."""

    fwd: tuple[float, ...]
    bwd: tuple[float, ...]
    comm: float = 0.0
    placement: tuple[int, ...] = ()

    def __post_init__(self):
        fwd = tuple(float(c) for c in self.fwd)
        bwd = tuple(float(c) for c in self.bwd)
        if not fwd or len(fwd) != len(bwd):
            raise ValueError("need matching, nonempty forward and backward cost lists")
        if min(fwd + bwd) < 0 or self.comm < 0:
            raise ValueError("costs must be >= 0")
        place = tuple(int(d) for d in self.placement) or tuple(range(len(fwd)))
        if len(place) != len(fwd):
            raise ValueError("placement needs one device per stage")
        if sorted(set(place)) != list(range(max(place) + 1)):
            raise ValueError("placement must use devices 0..K-1 without gaps")
        if any(b < a for a, b in zip(place, place[1:])):
            raise ValueError("placement must keep consecutive stages on non-decreasing devices")
        object.__setattr__(self, "fwd", fwd)
        object.__setattr__(self, "bwd", bwd)
        object.__setattr__(self, "comm", float(self.comm))
        object.__setattr__(self, "placement", place)

    @classmethod
    def uniform(cls, stages: int, fwd: float = 1.0, bwd: float = 1.0, comm: float = 0.0) -> "DeviceCostProfile":
        return cls((fwd,) * stages, (bwd,) * stages, comm)

    @property
    def stages(self) -> int:
        return len(self.fwd)

    @property
    def devices(self) -> int:
        return max(self.placement) + 1

    def device_cost(self, k: int) -> float:
        """Forward plus backward work of every stage placed on device ``k``."""
        return sum(f + b for f, b, d in zip(self.fwd, self.bwd, self.placement) if d == k)

    def hop(self, a: int, b: int) -> float:
        return self.comm if self.placement[a] != self.placement[b] else 0.0


@dataclass(frozen=True)
class WorkItem:
    device: int
    start: float
    end: float
    kind: str  # "fwd" | "bwd" | "update"
    frame: int
    stage: int


@dataclass(frozen=True)
class ScheduleResult:
    timeline: tuple[WorkItem, ...]
    frame_latency: tuple[float, ...]
    step_latency: float
    throughput: float
    bubble_fraction: float
    peak_activations: tuple[int, ...]
    devices: int
    window: tuple[float, float] = field(default=(0.0, 0.0))

    @property
    def makespan(self) -> float:
        return max((w.end for w in self.timeline), default=0.0)

    def check_legal(self) -> None:
        """Raise if any device runs two items at once."""
        for k in range(self.devices):
            items = sorted((w for w in self.timeline if w.device == k and w.end > w.start), key=lambda w: w.start)
            for a, b in zip(items, items[1:]):
                if b.start < a.end - _EPS:
                    raise AssertionError(f"device {k} overlaps: {a} and {b}")

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["device", "start", "end", "kind", "frame"])
        for w in sorted(self.timeline, key=lambda w: (w.device, w.start, w.end)):
            writer.writerow([w.device, repr(w.start), repr(w.end), w.kind, w.frame])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def gantt(self, width: int = 72) -> str:
        """Plain-text chart: one row per device, F/B/U marks, '.' when idle."""
        span = self.makespan
        if span <= 0:
            return "\n".join(f"dev{k} |" for k in range(self.devices))
        scale = width / span
        marks = {"fwd": "F", "bwd": "B", "update": "U"}
        rows = []
        for k in range(self.devices):
            row = ["."] * width
            for w in self.timeline:
                if w.device != k:
                    continue
                a = min(int(w.start * scale), width - 1)
                b = max(a + 1, int(round(w.end * scale)))
                for i in range(a, min(b, width)):
                    row[i] = marks[w.kind]
            rows.append(f"dev{k} |" + "".join(row) + "|")
        rows.append(f"       0{' ' * (width - len(f'{span:g}') - 1)}{span:g}")
        return "\n".join(rows)


def busy_fraction(timeline, devices: int, window: tuple[float, float]) -> float:
    lo, hi = window
    if hi <= lo:
        return 1.0
    busy = sum(max(0.0, min(w.end, hi) - max(w.start, lo)) for w in timeline)
    return busy / (devices * (hi - lo))


def simulate_sequential_bp(profile: DeviceCostProfile, T: int = 1) -> ScheduleResult:
    """Backprop through time with every stage serialised.

    All ``T`` frames run forward through every stage, then the backward pass
    walks frames and stages in reverse. Stage activations stay alive from
    their forward item to the matching backward item.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    S, K = profile.stages, profile.devices
    items = []
    clock = 0.0
    for f in range(T):
        for s in range(S):
            if s > 0:
                clock += profile.hop(s - 1, s)
            items.append(WorkItem(profile.placement[s], clock, clock + profile.fwd[s], "fwd", f, s))
            clock += profile.fwd[s]
    for f in range(T - 1, -1, -1):
        for s in range(S - 1, -1, -1):
            if s < S - 1:
                clock += profile.hop(s + 1, s)
            items.append(WorkItem(profile.placement[s], clock, clock + profile.bwd[s], "bwd", f, s))
            clock += profile.bwd[s]
    peak = [T * sum(1 for d in profile.placement if d == k) for k in range(K)]
    step = clock / T
    return ScheduleResult(tuple(items), _frame_latencies(items, T), step, 1.0 / step if step > 0 else float("inf"),
                          1.0 - busy_fraction(items, 1, (0.0, clock)) if clock > 0 else 0.0,
                          tuple(peak), K, (0.0, clock))


def simulate_gpipe(profile: DeviceCostProfile, micro_batches: int, update_cost: float = 0.0) -> ScheduleResult:
    """Fill-drain micro-batch pipeline with a per-device update at the end.

    Forward ``F[s, m]`` waits for ``F[s-1, m]`` and its device; once every
    forward has finished, backwards run in reverse micro-batch order with
    ``B[s, m]`` waiting for ``B[s+1, m]``. The bubble fraction is the idle
    share of ``K x window`` where the window spans the first forward to the
    last backward.
    """
    M = micro_batches
    if M < 1:
        raise ValueError("micro_batches must be >= 1")
    S, K = profile.stages, profile.devices
    free = [0.0] * K
    fend = np.zeros((S, M))
    items = []
    for m in range(M):
        for s in range(S):
            k = profile.placement[s]
            ready = fend[s - 1, m] + profile.hop(s - 1, s) if s > 0 else 0.0
            start = max(ready, free[k])
            fend[s, m] = start + profile.fwd[s]
            free[k] = fend[s, m]
            items.append(WorkItem(k, start, fend[s, m], "fwd", m, s))
    bend = np.zeros((S, M))
    for m in range(M - 1, -1, -1):
        for s in range(S - 1, -1, -1):
            k = profile.placement[s]
            ready = bend[s + 1, m] + profile.hop(s + 1, s) if s < S - 1 else float(fend[S - 1].max())
            start = max(ready, free[k])
            bend[s, m] = start + profile.bwd[s]
            free[k] = bend[s, m]
            items.append(WorkItem(k, start, bend[s, m], "bwd", m, s))
    window = (0.0, float(bend.max()))
    for k in range(K):
        items.append(WorkItem(k, free[k], free[k] + update_cost, "update", -1, -1))
    work = [w for w in items if w.kind != "update"]
    latency = tuple(float(bend[0, m]) - float(min(w.start for w in work if w.frame == m)) for m in range(M))
    makespan = max(w.end for w in items)
    peak = [M * sum(1 for d in profile.placement if d == k) for k in range(K)]
    return ScheduleResult(tuple(items), latency, makespan / M, M / makespan if makespan > 0 else float("inf"),
                          1.0 - busy_fraction(work, K, window), tuple(peak), K, window)


def simulate_sideways(profile: DeviceCostProfile, T: int) -> ScheduleResult:
    """Depth-parallel execution: one computation step per tick, all devices at once.

    At tick ``t`` stage ``s`` runs the forward of frame ``t - s`` and the
    backward of the pseudo-gradient that originated from frame
    ``t - 2(S-1) + s``. A tick lasts as long as the slowest device plus one
    communication hop (when there is more than one device). The bubble
    fraction counts ticks in the steady window where a device has no item.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    S, K = profile.stages, profile.devices
    tick = max(profile.device_cost(k) for k in range(K)) + (profile.comm if K > 1 else 0.0)
    n_ticks = T + 2 * (S - 1)
    items = []
    for t in range(n_ticks):
        offset = [0.0] * K
        for s in range(S):
            k = profile.placement[s]
            for kind, frame, cost in (("fwd", t - s, profile.fwd[s]),
                                      ("bwd", t - 2 * (S - 1) + s, profile.bwd[s])):
                # slots are fixed within a tick, so fill and drain ticks keep the same layout
                if 0 <= frame < T:
                    start = t * tick + offset[k]
                    items.append(WorkItem(k, start, start + cost, kind, frame, s))
                offset[k] += cost
    # steady ticks: every stage has both a forward and a backward frame in range
    lo, hi = 2 * (S - 1), T - 1
    if hi >= lo:
        used = {(w.device, w.frame + w.stage if w.kind == "fwd" else w.frame + 2 * (S - 1) - w.stage)
                for w in items}
        idle = sum((k, t) not in used for k in range(K) for t in range(lo, hi + 1))
        bubble = idle / (K * (hi - lo + 1))
    else:
        bubble = float("nan")
    peak = [sum(1 for d in profile.placement if d == k) for k in range(K)]
    return ScheduleResult(tuple(items), _frame_latencies(items, T), tick,
                          1.0 / tick if tick > 0 else float("inf"), bubble, tuple(peak), K,
                          (lo * tick, (hi + 1) * tick))


def _frame_latencies(items, T: int) -> tuple[float, ...]:
    first = [float("inf")] * T
    last = [0.0] * T
    for w in items:
        if 0 <= w.frame < T:
            first[w.frame] = min(first[w.frame], w.start)
            last[w.frame] = max(last[w.frame], w.end)
    return tuple(b - a for a, b in zip(first, last))


def memory_account(topology: NetworkTopology, T: int, strategy: str, batch: int = 1) -> tuple[int, ...]:
    """Peak stored scalars per unit (one unit per device).

    Per step a unit keeps its source activations and every intermediate its
    pullback needs; this matches the engine's cache exactly. ``sideways``
    holds one step per unit, ``bp_unrolled`` holds all ``T`` steps.
    """
    if strategy not in ("bp_unrolled", "sideways"):
        raise ValueError(f"strategy must be 'bp_unrolled' or 'sideways', got {strategy!r}")
    if T < 1 or batch < 1:
        raise ValueError("T and batch must be >= 1")
    per_step = []
    for unit in topology.units:
        inputs = [np.zeros((batch,) + topology.shape_of(s), dtype_for("double")) for s in unit.sources]
        params = _zero_params(unit)
        _, _, tape = unit_forward(unit, params, inputs, topology.fusion)
        per_step.append(sum(a.size for a in inputs) + sum(a.size for a in tape))
    factor = T if strategy == "bp_unrolled" else 1
    return tuple(factor * n for n in per_step)


def _zero_params(unit) -> dict:
    out = {}
    for i, spec in enumerate(unit.layers):
        for name, shape in param_shapes(spec).items():
            out[f"{i}.{name}"] = np.zeros(shape)
    return out
