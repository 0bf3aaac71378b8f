"""Computation-step execution of Sideways / Skip-Sideways units.

At computation step ``t`` every unit consumes the messages emitted at step
``t - 1`` (activations from its sources, pseudo-gradients from its consumers),
evaluates its forward map at the fused input, pulls the summed incoming
pseudo-gradient back through the Jacobian at that same point, and emits
new messages for step ``t + 1``. Nothing ever travels backwards in time.

Frame ``t`` is emitted by the input node at step ``t``; the output of the top
unit at step ``t`` therefore descends (along the direct chain) from frame
``t - D`` and is scored against that frame's target.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import FrameSequence
from .layers import fuse_apply, init_params, layer_apply, mse_loss, softmax_xent, tau_apply
from .numerics import RandomSource, ShapeError, Tensor, dtype_for
from .optim import DivergenceError, apply_update, scheduled_lr
from .topology import EngineConfig, NetworkTopology, UnitSpec


@dataclass
class StepMessage:
    payload: Tensor
    kind: str  # "activation" | "pseudo_gradient"
    edge: str  # "input" | "direct" | "shortcut" | "loss"
    origin_frame: int
    valid: bool


@dataclass
class UnitState:
    params: dict[str, Tensor] | None
    grad_acc: dict[str, Tensor] = field(default_factory=dict)
    cache: tuple[Tensor, ...] = ()
    cache_origin: int | None = None
    contributions: int = 0
    opt_state: dict = field(default_factory=dict)

    def cached_scalars(self) -> int:
        return int(sum(a.size for a in self.cache))


@dataclass
class MessageRecord:
    step: int
    unit: int
    target: int
    kind: str
    edge: str
    origin_frame: int
    valid: bool
    payload: Tensor | None = None


@dataclass
class TrainTrace:
    losses: np.ndarray
    loss_valid: np.ndarray
    loss_origin: np.ndarray
    params: list[dict]
    grad_sums: list[dict]
    contributions: list[int]
    cache_scalars: list[int]
    cache_tensors: list[int]
    increments: list[list] | None = None
    messages: list[MessageRecord] | None = None
    outputs: dict[int, Tensor] | None = None

    @property
    def valid_losses(self) -> np.ndarray:
        return self.losses[self.loss_valid]

    @property
    def mean_loss(self) -> float:
        v = self.valid_losses
        return float(v.mean()) if v.size else float("nan")


def init_network_params(topology: NetworkTopology, rng: RandomSource, precision: str = "double") -> list[dict]:
    out = []
    for l, unit in enumerate(topology.units, start=1):
        p = {}
        for i, spec in enumerate(unit.layers):
            for name, v in init_params(spec, rng.split(("unit", l, "layer", i)), precision).items():
                p[f"{i}.{name}"] = v
        out.append(p)
    return out


def _layer_params(params: dict, i: int) -> dict:
    prefix = f"{i}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def unit_forward(unit: UnitSpec, params: dict, inputs, fusion: str, shortcut_gain: float = 1.0):
    """Fuse the source activations and run the unit's layers.

    Returns ``(output, pullback, tape)``. ``pullback(g)`` gives
    ``(source_cotangents, param_cotangents)`` with one cotangent per source,
    direct source first; ``tape`` lists the tensors the pullback keeps alive.
    """
    if len(inputs) != len(unit.sources):
        raise ShapeError(f"unit expects {len(unit.sources)} inputs, got {len(inputs)}")
    gamma = inputs[0]
    tau_pbs, fuse_pbs = [], []
    for tau, s in zip(unit.taus[1:], inputs[1:]):
        matched, tpb = tau_apply(tau, s)
        gamma, fpb = fuse_apply(fusion, gamma, matched, shortcut_gain)
        tau_pbs.append(tpb)
        fuse_pbs.append(fpb)
    tape = [gamma]
    h = gamma
    layer_pbs = []
    for i, spec in enumerate(unit.layers):
        h, pb = layer_apply(spec, _layer_params(params, i), h)
        layer_pbs.append(pb)
        tape.append(h)
    tape.pop()

    def pullback(g):
        pgrads = {}
        for i in range(len(layer_pbs) - 1, -1, -1):
            g, pg = layer_pbs[i](g)
            for k, v in pg.items():
                pgrads[f"{i}.{k}"] = v
        cots = [None] * len(inputs)
        for j in range(len(fuse_pbs) - 1, -1, -1):
            g, gs = fuse_pbs[j](g)
            cots[j + 1] = tau_pbs[j](gs)[0]
        cots[0] = g
        return cots, pgrads

    return h, pullback, tape


def unit_step(unit: UnitSpec, state: UnitState, in_acts, in_grads, config: EngineConfig,
              forward_only: bool = False):
    """Advance one unit by one computation step.

    ``in_acts`` are the source activations (direct first); ``in_grads`` are the
    incoming pseudo-gradients (direct consumer or loss seed first, then
    shortcut consumers). Returns ``(state, out_act, out_grads, increment)``
    where ``out_grads`` has one message per source and ``increment`` is the
    parameter pseudo-gradient added to the accumulator (``None`` if nothing
    was accumulated).
    """
    if state.params is None:
        raise RuntimeError("unit state is not initialised")
    if any(m is None for m in in_acts) or any(m is None for m in in_grads):
        raise RuntimeError("unit stepped before its message buffers were initialised")
    h, pullback, tape = unit_forward(unit, state.params, [m.payload for m in in_acts],
                                     config.fusion, config.shortcut_gain)
    eval_valid = all(m.valid for m in in_acts)
    state.cache = tuple(m.payload for m in in_acts) + tuple(tape)
    state.cache_origin = in_acts[0].origin_frame
    out_act = StepMessage(h, "activation", "direct", in_acts[0].origin_frame, eval_valid)

    edges = ["direct"] + ["shortcut"] * (len(unit.sources) - 1)
    grad_origin = in_grads[0].origin_frame if in_grads else -1
    grad_valid = bool(in_grads) and all(m.valid for m in in_grads)
    use = not forward_only and bool(in_grads) and (
        config.warmup_policy == "zero_buffers" or (grad_valid and eval_valid))
    increment = None
    if use:
        g = in_grads[0].payload
        for m in in_grads[1:]:
            g = g + m.payload
        cots, pgrads = pullback(g)
        if config.mode == "fa_only":
            cots = [cots[0]] + [np.zeros_like(c) for c in cots[1:]]
        for k, v in pgrads.items():
            acc = state.grad_acc.get(k)
            if acc is None:
                state.grad_acc[k] = v.copy()
            else:
                acc += v
        state.contributions += 1
        increment = pgrads
        valid_out = grad_valid and eval_valid
        out_grads = [StepMessage(c, "pseudo_gradient", e, grad_origin, valid_out) for c, e in zip(cots, edges)]
    else:
        out_grads = [StepMessage(np.zeros_like(m.payload), "pseudo_gradient", e, grad_origin, False)
                     for m, e in zip(in_acts, edges)]
    return state, out_act, out_grads, increment


def loss_head_step(logits: StepMessage, target, head: str, warmup_policy: str = "discard"):
    """Score the top unit's output; returns ``(loss or None, seed message)``."""
    if target is None or (warmup_policy == "discard" and not logits.valid):
        return None, StepMessage(np.zeros_like(logits.payload), "pseudo_gradient", "loss",
                                 logits.origin_frame, False)
    if head == "cross_entropy":
        loss, grad = softmax_xent(logits.payload, target)
    elif head == "mse":
        loss, grad = mse_loss(logits.payload, target)
    else:
        raise ValueError(f"unknown loss head {head!r}")
    return loss, StepMessage(grad, "pseudo_gradient", "loss", logits.origin_frame, logits.valid)


class Engine:
    """Owns per-unit state across sequences (parameters, optimiser moments)."""

    def __init__(self, topology: NetworkTopology, config: EngineConfig, params: list[dict] | None = None,
                 rng: RandomSource | None = None):
        topology.check(config)
        self.topology = topology
        self.config = config
        if params is None:
            params = init_network_params(topology, rng or RandomSource(0), config.precision)
        if len(params) != topology.depth:
            raise ShapeError(f"{len(params)} parameter sets for {topology.depth} units")
        self.states = [UnitState(params={k: v.copy() for k, v in p.items()}) for p in params]
        for st in self.states:
            st.grad_acc = {k: np.zeros_like(v) for k, v in st.params.items()}
        self.update_count = 0

    @property
    def params(self) -> list[dict]:
        return [st.params for st in self.states]

    def _update(self, step: int):
        lr = scheduled_lr(self.config, self.update_count)
        for st in self.states:
            st.params = apply_update(st.params, st.grad_acc, lr, self.config, st.opt_state, step)
        self.update_count += 1

    def run_sequence(self, seq: FrameSequence, *, executor: str = "sequential", max_workers: int | None = None,
                     forward_only: bool = False, update: bool = True, record_messages: bool = False,
                     record_increments: bool = False, keep_outputs: bool = False) -> TrainTrace:
        topo, cfg = self.topology, self.config
        D = topo.depth
        T = len(seq)
        frames = seq.frames
        nin = len(topo.input_shape)
        if tuple(frames.shape[frames.ndim - nin:]) != topo.input_shape:
            raise ShapeError(f"frames of shape {frames.shape[1:]} do not end with {topo.input_shape}")
        lead = tuple(frames.shape[1:frames.ndim - nin])
        dt = dtype_for(cfg.precision)
        frames = frames.astype(dt, copy=False)
        n_steps = T + D

        def zeros(node):
            return np.zeros(lead + topo.shape_of(node), dt)

        acts = [StepMessage(zeros(n), "activation", "input" if n == 0 else "direct", -1 - n, False)
                for n in range(D + 1)]
        # grads[(src, dst)]: pseudo-gradient emitted by unit dst towards its source src
        grads = {}
        for m in range(1, D + 1):
            for s in topo.unit(m).sources:
                if s >= 1:
                    grads[(s, m)] = StepMessage(zeros(s), "pseudo_gradient",
                                                "direct" if s == m - 1 else "shortcut", -1, False)
        seed = StepMessage(zeros(D), "pseudo_gradient", "loss", -1, False)

        for st in self.states:
            st.contributions = 0
            for acc in st.grad_acc.values():
                acc[...] = 0.0
        sums = [{k: np.zeros_like(v) for k, v in st.params.items()} for st in self.states]
        losses = np.full(n_steps, np.nan)
        loss_valid = np.zeros(n_steps, bool)
        loss_origin = np.arange(n_steps) - D
        increments = [[] for _ in range(D)] if record_increments else None
        messages = [] if record_messages else None
        outputs = {} if keep_outputs else None
        consumers = [topo.consumers(s) for s in range(D + 1)]

        def job(l):
            unit = topo.unit(l)
            in_acts = [acts[s] for s in unit.sources]
            if forward_only:
                in_grads = []
            else:
                in_grads = [seed] if l == D else []
                in_grads += [grads[(l, m)] for m in consumers[l]]
            return unit_step(unit, self.states[l - 1], in_acts, in_grads, cfg, forward_only)

        pool = ThreadPoolExecutor(max_workers=max_workers) if executor == "threads" else None
        if executor not in ("sequential", "threads"):
            raise ValueError(f"executor must be 'sequential' or 'threads', got {executor!r}")
        try:
            for t in range(n_steps):
                if t < T:
                    inp = StepMessage(frames[t], "activation", "input", t, True)
                else:
                    inp = StepMessage(zeros(0), "activation", "input", t, False)
                results = list(pool.map(job, range(1, D + 1))) if pool else [job(l) for l in range(1, D + 1)]

                new_acts = [inp]
                for l, (_, out_act, out_grads, inc) in enumerate(results, start=1):
                    new_acts.append(out_act)
                    if not forward_only:
                        for s, msg in zip(topo.unit(l).sources, out_grads):
                            if s >= 1:
                                grads[(s, l)] = msg
                    if inc is not None:
                        for k, v in inc.items():
                            sums[l - 1][k] += v
                        if increments is not None:
                            increments[l - 1].append((t, inc))
                    if messages is not None:
                        messages.append(MessageRecord(t, l, l + 1, "activation", "direct", out_act.origin_frame,
                                                      out_act.valid, out_act.payload.copy()))
                        for s, msg in zip(topo.unit(l).sources, out_grads):
                            messages.append(MessageRecord(t, l, s, "pseudo_gradient", msg.edge, msg.origin_frame,
                                                          msg.valid, msg.payload.copy()))

                top = new_acts[D]
                origin = top.origin_frame
                target = seq.targets[origin] if 0 <= origin < T else None
                loss, seed = loss_head_step(top, target, topo.head, cfg.warmup_policy)
                if loss is not None:
                    if not np.isfinite(loss):
                        raise DivergenceError(f"non-finite loss {loss} at step {t}", step=t, value=loss)
                    losses[t] = loss
                    loss_valid[t] = top.valid or cfg.warmup_policy == "zero_buffers"
                    if outputs is not None:
                        outputs[t] = top.payload.copy()
                if messages is not None:
                    messages.append(MessageRecord(t, D + 1, D, "pseudo_gradient", "loss", seed.origin_frame,
                                                  seed.valid, seed.payload.copy()))
                acts = new_acts
                if update and not forward_only and cfg.update_cadence == "per_step" and any(
                        r[3] is not None for r in results):
                    self._update(t)
        finally:
            if pool is not None:
                pool.shutdown()

        contributions = [st.contributions for st in self.states]
        if update and not forward_only and cfg.update_cadence == "per_sequence" and any(contributions):
            self._update(n_steps - 1)
        return TrainTrace(
            losses=losses,
            loss_valid=loss_valid,
            loss_origin=loss_origin,
            params=[{k: v.copy() for k, v in st.params.items()} for st in self.states],
            grad_sums=sums,
            contributions=contributions,
            cache_scalars=[st.cached_scalars() for st in self.states],
            cache_tensors=[len(st.cache) for st in self.states],
            increments=increments,
            messages=messages,
            outputs=outputs,
        )


def run_sequence(topology: NetworkTopology, frames: FrameSequence, config: EngineConfig,
                 rng: RandomSource | None = None, params: list[dict] | None = None, **kwargs) -> TrainTrace:
    """One-shot run: initialise (or take) parameters, run the sequence, return the trace."""
    return Engine(topology, config, params=params, rng=rng).run_sequence(frames, **kwargs)


def influence_set(topology: NetworkTopology, config: EngineConfig, step: int, unit: int) -> set[int]:
    """Frame indices that can reach ``unit``'s output at ``step``.

    Every edge costs one computation step, so the delays are the path lengths
    from the input node to ``unit`` in the unit DAG.
    """
    topology.check(config)
    if not 0 <= unit <= topology.depth:
        raise ValueError(f"unit index {unit} outside 0..{topology.depth}")
    delays: list[set[int]] = [{0}]
    for l in range(1, unit + 1):
        delays.append({d + 1 for s in topology.unit(l).sources for d in delays[s]})
    return {step - d for d in delays[unit]}
