"""Oracle suite: finite-difference VJP checks, adjoint identities, constant-input exactness.

Inputs are sampled away from kinks: relu inputs keep ``|x| >= 0.1`` and
max-pool inputs are well separated, so central differences never straddle a
switch of the active branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import gen_constant
from .engine import Engine
from .layers import LayerSpec, fuse_apply, init_params, layer_apply, tau_apply
from .numerics import RandomSource, finite_diff_vjp_check, inner_product
from .oracles import collapse_static_grads, unrolled_true_grads
from .topology import EngineConfig, conv_classifier

VJP_TOLERANCE = 1e-5
ADJOINT_TOLERANCE = 1e-12
CONSTANT_TOLERANCE = 1e-8


@dataclass(frozen=True)
class CheckRow:
    check: str
    seed: int
    target: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tolerance)


# (name, spec, input shape)
PRIMITIVES = (
    ("affine", LayerSpec.affine(5, 3), (2, 5)),
    ("conv2d_same", LayerSpec.conv2d(2, 3, 3), (1, 5, 5, 2)),
    ("conv2d_valid_stride2", LayerSpec.conv2d(2, 2, 3, stride=2, padding="valid"), (1, 7, 7, 2)),
    ("relu", LayerSpec.relu(), (2, 4, 4, 2)),
    ("maxpool2d", LayerSpec.maxpool2d(2), (1, 4, 4, 2)),
    ("tile_upsample", LayerSpec.tile_upsample(2), (1, 2, 3, 2)),
    ("space_to_depth", LayerSpec.space_to_depth(2), (1, 4, 4, 2)),
    ("scale_shift", LayerSpec.scale_shift(3), (2, 3, 3, 3)),
)


def sample_input(spec: LayerSpec, shape, rng: RandomSource) -> np.ndarray:
    """Random input that keeps every kink at least ~0.1 away."""
    if spec.kind == "relu":
        mag = rng.uniform(0.1, 1.0, size=shape)
        sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
        return sign * mag
    if spec.kind == "maxpool2d":
        n = int(np.prod(shape))
        perm = rng.generator.permutation(n).astype(np.float64)
        return (0.2 * perm + rng.uniform(-0.05, 0.05, size=n)).reshape(shape)
    return rng.normal(size=shape)


def layer_vjp_rows(seeds=range(20)) -> list[CheckRow]:
    """Input and parameter pullbacks of every primitive against central differences."""
    rows = []
    for seed in seeds:
        for name, spec, shape in PRIMITIVES:
            rng = RandomSource(seed).split(("vjp", name))
            params = init_params(spec, rng.split("params"))
            params = {k: v + 0.1 * rng.split(("p", k)).normal(size=v.shape) for k, v in params.items()}
            x = sample_input(spec, shape, rng.split("x"))
            y, _ = layer_apply(spec, params, x)
            w = rng.split("w").normal(size=y.shape)
            err = finite_diff_vjp_check(lambda z: layer_apply(spec, params, z), x, w)
            rows.append(CheckRow(f"vjp:{name}", seed, "input", err, VJP_TOLERANCE))
            for pname in params:
                def f(p, pname=pname):
                    local = dict(params)
                    local[pname] = p
                    out, pb = layer_apply(spec, local, x)
                    return out, lambda g: pb(g)[1][pname]
                err = finite_diff_vjp_check(f, params[pname], w)
                rows.append(CheckRow(f"vjp:{name}", seed, pname, err, VJP_TOLERANCE))
    return rows


def _adjoint_gap(apply_linear, pullback, v: np.ndarray, w: np.ndarray) -> float:
    """``|<w, L v> - <L^T w, v>|`` relative to ``|w| |L v| + |L^T w| |v|``."""
    lv = apply_linear(v)
    ltw = pullback(w)
    a, b = inner_product(w, lv), inner_product(ltw, v)
    scale = np.linalg.norm(w) * np.linalg.norm(lv) + np.linalg.norm(ltw) * np.linalg.norm(v)
    return float(abs(a - b) / max(scale, 1e-300))


def adjoint_rows(seeds=range(20)) -> list[CheckRow]:
    """Adjoint identity for fusion operators and tau matchers.

    Max-pool is piecewise linear; its Jacobian-vector product is formed
    exactly from integer-spaced inputs and dyadic perturbations, so the
    identity is tested without any differencing error.
    """
    rows = []
    for seed in seeds:
        rng = RandomSource(seed).split(("adjoint",))
        d = rng.split("d").normal(size=(2, 4, 4, 3))
        s = rng.split("s").normal(size=(2, 4, 4, 3))
        s2 = rng.split("s2").normal(size=(2, 4, 4, 5))
        for op, short in (("add", s), ("concat", s2)):
            gamma, pb = fuse_apply(op, d, short)
            w = rng.split(("w", op)).normal(size=gamma.shape)
            vd = rng.split(("vd", op)).normal(size=d.shape)
            vs = rng.split(("vs", op)).normal(size=short.shape)
            lv = fuse_apply(op, vd, vs)[0]
            gd, gs = pb(w)
            a = inner_product(w, lv)
            b = inner_product(gd, vd) + inner_product(gs, vs)
            scale = np.linalg.norm(w) * np.linalg.norm(lv) + np.sqrt(
                inner_product(gd, gd) + inner_product(gs, gs)) * np.sqrt(inner_product(vd, vd) + inner_product(vs, vs))
            rows.append(CheckRow(f"adjoint:fuse_{op}", seed, "operands", float(abs(a - b) / scale),
                                 ADJOINT_TOLERANCE))

        tile = LayerSpec.tile_upsample(2)
        x = rng.split("tile_x").normal(size=(2, 3, 3, 2))
        y, pb = tau_apply(tile, x)
        w = rng.split("tile_w").normal(size=y.shape)
        rows.append(CheckRow("adjoint:tau_tile", seed, "input",
                             _adjoint_gap(lambda v: tau_apply(tile, v)[0], lambda g: pb(g)[0], x, w),
                             ADJOINT_TOLERANCE))

        pool = LayerSpec.maxpool2d(2)
        n = 2 * 4 * 4 * 2
        x = (4.0 * rng.split("pool_x").generator.permutation(n)).reshape(2, 4, 4, 2)
        y, pb = tau_apply(pool, x)
        w = rng.split("pool_w").normal(size=y.shape)
        v = rng.split("pool_v").integers(-8, 9, size=x.shape) / 8.0

        def jvp(v):
            return tau_apply(pool, x + v)[0] - y
        rows.append(CheckRow("adjoint:tau_maxpool", seed, "input", _adjoint_gap(jvp, lambda g: pb(g)[0], v, w),
                             ADJOINT_TOLERANCE))
    return rows


def constant_input_rows(seeds=range(3), depth: int = 4, T: int = 8) -> list[CheckRow]:
    """Steady-state pseudo-gradients on a constant clip against both exact oracles.

    Each per-step increment must equal the time-collapsed gradient; the
    engine's mean increment must equal the unrolled gradient divided by the
    number of scored steps.
    """
    rows = []
    for seed in seeds:
        for mode in ("sideways", "skip_sideways"):
            cfg = EngineConfig(mode=mode, fusion="concat", input_shortcut=True, learning_rate=0.0)
            topo = conv_classifier((6, 6, 2), [4] * (depth - 1), 3, cfg)
            rng = RandomSource(seed).split(("constant", mode))
            frame = rng.split("frame").normal(size=(6, 6, 2))
            seq = gen_constant(frame, T, 1)
            eng = Engine(topo, cfg, rng=rng.split("init"))
            trace = eng.run_sequence(seq, record_increments=True)
            _, static = collapse_static_grads(topo, eng.params, cfg, frame, 1)
            _, unrolled, n_valid = unrolled_true_grads(topo, eng.params, cfg, seq)
            inc_err = mean_err = total_err = 0.0
            for l in range(depth):
                for k, ref in static[l].items():
                    norm = max(np.linalg.norm(ref), 1e-300)
                    for _, inc in trace.increments[l]:
                        inc_err = max(inc_err, np.linalg.norm(inc[k] - ref) / norm)
                    mean = trace.grad_sums[l][k] / trace.contributions[l]
                    mean_err = max(mean_err, np.linalg.norm(mean - unrolled[l][k] / n_valid)
                                   / max(np.linalg.norm(unrolled[l][k] / n_valid), 1e-300))
                    total_err = max(total_err, np.linalg.norm(unrolled[l][k] - n_valid * ref) / (n_valid * norm))
            rows.append(CheckRow(f"constant:{mode}", seed, "increment_vs_static", inc_err, CONSTANT_TOLERANCE))
            rows.append(CheckRow(f"constant:{mode}", seed, "mean_vs_unrolled", mean_err, CONSTANT_TOLERANCE))
            rows.append(CheckRow(f"constant:{mode}", seed, "unrolled_vs_static", total_err, CONSTANT_TOLERANCE))
    return rows


def run_suite(seeds: int = 20) -> list[CheckRow]:
    return layer_vjp_rows(range(seeds)) + adjoint_rows(range(seeds)) + constant_input_rows(range(min(seeds, 3)))
