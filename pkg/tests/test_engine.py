import math

import numpy as np
import pytest

from skipsideways.data import FrameSequence, gen_constant, gen_translating_sprite, stack_batch
from skipsideways.engine import (Engine, StepMessage, UnitState, influence_set, init_network_params,
                                 loss_head_step, run_sequence, unit_step)
from skipsideways.layers import LayerSpec
from skipsideways.numerics import RandomSource, ShapeError
from skipsideways.optim import DivergenceError, apply_update
from skipsideways.oracles import collapse_static_grads
from skipsideways.topology import EngineConfig, UnitSpec, conv_classifier, mlp


def _msg(x, kind="activation", origin=0, valid=True):
    return StepMessage(np.asarray(x, dtype=float), kind, "direct", origin, valid)


def _random_clip(seed, T=10, size=6, batch=2):
    rng = RandomSource(seed)
    return stack_batch([gen_translating_sprite(size, T=T, rng=rng.split(i)) for i in range(batch)])


def _conv(mode="skip_sideways", fusion="concat", depth=4, **kw):
    cfg = EngineConfig(mode=mode, fusion=fusion, **kw)
    return conv_classifier((6, 6, 1), [4] * (depth - 1), 4, cfg), cfg


def test_scalar_unit_chain_rule_at_cached_point():
    unit = UnitSpec((LayerSpec.affine(1, 1),), (0,), (None,), (1,), (1,))
    state = UnitState(params={"0.w": np.array([[2.0]]), "0.b": np.array([0.0])})
    state, out, grads, inc = unit_step(unit, state, [_msg([3.0])], [_msg([1.0], "pseudo_gradient")],
                                       EngineConfig(mode="sideways"))
    assert out.payload.tolist() == [6.0]
    assert inc["0.w"].tolist() == [[3.0]]
    assert grads[0].payload.tolist() == [2.0]


def test_zero_incoming_grads_give_zero_increment():
    topo, cfg = _conv()
    params = init_network_params(topo, RandomSource(1))
    unit = topo.unit(3)
    rng = RandomSource(2)
    acts = [_msg(rng.split(s).normal(size=(2,) + topo.shape_of(s))) for s in unit.sources]
    zero = [_msg(np.zeros((2,) + topo.shape_of(3)), "pseudo_gradient")]
    some = [_msg(rng.split("g").normal(size=(2,) + topo.shape_of(3)), "pseudo_gradient")]
    _, out0, _, inc = unit_step(unit, UnitState(params=params[2]), acts, zero, cfg)
    _, out1, _, _ = unit_step(unit, UnitState(params=params[2]), acts, some, cfg)
    assert all(not v.any() for v in inc.values())
    assert np.array_equal(out0.payload, out1.payload)


def test_unit_step_requires_state_and_buffers():
    topo, cfg = _conv()
    with pytest.raises(RuntimeError):
        unit_step(topo.unit(1), UnitState(params=None), [_msg(np.zeros((6, 6, 1)))], [], cfg)
    params = init_network_params(topo, RandomSource(0))
    with pytest.raises(RuntimeError):
        unit_step(topo.unit(1), UnitState(params=params[0]), [None], [], cfg)


def test_single_frame_three_units():
    cfg = EngineConfig(mode="sideways", learning_rate=0.1)
    topo = mlp(3, [4, 4], 2, cfg)
    seq = FrameSequence(np.ones((1, 3)), np.array([1]))
    eng = Engine(topo, cfg, rng=RandomSource(0))
    before = [{k: v.copy() for k, v in p.items()} for p in eng.params]
    trace = eng.run_sequence(seq)
    assert len(trace.losses) == 4
    assert trace.loss_valid.sum() == 1 and trace.loss_valid[3]
    assert trace.contributions == [0, 0, 0]
    assert all(np.array_equal(a[k], b[k]) for a, b in zip(before, trace.params) for k in a)


def test_constant_frames_stationary_losses():
    topo, cfg = _conv(learning_rate=0.0, input_shortcut=True)
    frame = RandomSource(3).normal(size=(6, 6, 1))
    trace = run_sequence(topo, gen_constant(frame, 12, 2), cfg, rng=RandomSource(0))
    v = trace.valid_losses
    # the two drain steps whose shortcut inputs come from past the last frame are not scored
    assert v.size == 10 and np.all(v == v[0])


def test_two_unit_identity_chain_matches_static_gradient():
    cfg = EngineConfig(mode="sideways", learning_rate=0.0)
    topo = mlp(2, [2], 2, cfg, head="mse", relu=False)
    params = [{"0.w": np.eye(2), "0.b": np.zeros(2)}, {"0.w": np.eye(2), "0.b": np.zeros(2)}]
    x = np.array([0.5, -1.0])
    seq = gen_constant(x, 6, np.array([1.0, 2.0]))
    trace = Engine(topo, cfg, params=params).run_sequence(seq, record_increments=True, update=False)
    _, static = collapse_static_grads(topo, params, cfg, x, np.array([1.0, 2.0]))
    for l in range(2):
        assert trace.increments[l]
        for _, inc in trace.increments[l]:
            for k in inc:
                assert np.allclose(inc[k], static[l][k], rtol=1e-12, atol=1e-15)


def test_mode_degeneracy_zero_gain_add_fusion_is_sideways():
    seq = _random_clip(5)
    skip_topo, skip_cfg = _conv(fusion="add", shortcut_gain=0.0, learning_rate=0.05, warmup_policy="zero_buffers")
    side_topo, side_cfg = _conv(mode="sideways", fusion="add", learning_rate=0.05, warmup_policy="zero_buffers")
    params = init_network_params(side_topo, RandomSource(9))
    a = Engine(skip_topo, skip_cfg, params=params).run_sequence(seq, keep_outputs=True)
    b = Engine(side_topo, side_cfg, params=params).run_sequence(seq, keep_outputs=True)
    assert np.array_equal(a.losses, b.losses, equal_nan=True)
    assert a.outputs.keys() == b.outputs.keys()
    assert all(np.array_equal(a.outputs[t], b.outputs[t]) for t in a.outputs)
    assert all(np.array_equal(p[k], q[k]) for p, q in zip(a.params, b.params) for k in p)


def test_mode_degeneracy_under_discard_differs_only_in_drain_validity():
    seq = _random_clip(5)
    skip_topo, skip_cfg = _conv(fusion="add", shortcut_gain=0.0)
    side_topo, side_cfg = _conv(mode="sideways", fusion="add")
    params = init_network_params(side_topo, RandomSource(9))
    a = Engine(skip_topo, skip_cfg, params=params).run_sequence(seq, update=False, record_messages=True)
    b = Engine(side_topo, side_cfg, params=params).run_sequence(seq, update=False, record_messages=True)
    act_a = [m.payload for m in a.messages if m.kind == "activation"]
    act_b = [m.payload for m in b.messages if m.kind == "activation"]
    assert all(np.array_equal(x, y) for x, y in zip(act_a, act_b))
    both = a.loss_valid & b.loss_valid
    assert np.array_equal(a.losses[both], b.losses[both])
    # the skip topology also discards the final drain step, whose shortcut input is padding
    assert np.flatnonzero(b.loss_valid & ~a.loss_valid).tolist() == [len(seq) + skip_topo.depth - 1]


@pytest.mark.parametrize("mode", ["sideways", "skip_sideways", "fa_only"])
def test_message_provenance_is_misaligned(mode):
    topo, cfg = _conv(mode=mode)
    trace = run_sequence(topo, _random_clip(1, T=12), cfg, rng=RandomSource(0), record_messages=True)
    act = {(m.step, m.unit): m.origin_frame for m in trace.messages if m.kind == "activation"}
    checked = 0
    for m in trace.messages:
        if m.kind == "pseudo_gradient" and m.valid and m.unit <= topo.depth:
            assert m.origin_frame != act[(m.step, m.unit)]
            checked += 1
    assert checked > 0


def test_fa_only_shortcut_gradients_are_zero():
    topo, cfg = _conv(mode="fa_only", input_shortcut=True)
    trace = run_sequence(topo, _random_clip(2), cfg, rng=RandomSource(0), record_messages=True)
    shortcut = [m for m in trace.messages if m.kind == "pseudo_gradient" and m.edge == "shortcut"]
    direct = [m for m in trace.messages if m.kind == "pseudo_gradient" and m.edge == "direct" and m.valid]
    assert shortcut and all(not m.payload.any() for m in shortcut)
    assert any(m.payload.any() for m in direct)


def test_influence_sets():
    side_topo, side_cfg = _conv(mode="sideways")
    for l in range(1, 5):
        assert influence_set(side_topo, side_cfg, 20, l) == {20 - l}
    topo, cfg = _conv(input_shortcut=True)
    assert influence_set(topo, cfg, 20, 4) == {16, 17, 18}
    topo, cfg = _conv()
    assert influence_set(topo, cfg, 20, 4) == {16, 17}
    with pytest.raises(ValueError):
        influence_set(topo, cfg, 20, 5)


@pytest.mark.parametrize("input_shortcut", [False, True])
def test_influence_set_matches_perturbation(input_shortcut):
    topo, cfg = _conv(input_shortcut=input_shortcut)
    seq = _random_clip(7, T=10)
    params = init_network_params(topo, RandomSource(3))
    base = Engine(topo, cfg, params=params).run_sequence(seq, forward_only=True, record_messages=True)

    def top_output(trace, step):
        return next(m.payload for m in trace.messages
                    if m.kind == "activation" and m.unit == topo.depth and m.step == step)

    step = 9
    measured = set()
    for k in range(len(seq)):
        frames = seq.frames.copy()
        frames[k] += 0.5
        pert = FrameSequence(frames, seq.targets)
        trace = Engine(topo, cfg, params=params).run_sequence(pert, forward_only=True, record_messages=True)
        if not np.array_equal(top_output(trace, step), top_output(base, step)):
            measured.add(k)
    assert measured == influence_set(topo, cfg, step, topo.depth)


def test_causality_small():
    topo, cfg = _conv(input_shortcut=True, learning_rate=0.1)
    seq = _random_clip(4, T=8)
    params = init_network_params(topo, RandomSource(1))
    a = Engine(topo, cfg, params=params).run_sequence(seq, record_messages=True)
    frames = seq.frames.copy()
    frames[5] = RandomSource(99).normal(size=frames[5].shape)
    b = Engine(topo, cfg, params=params).run_sequence(FrameSequence(frames, seq.targets), record_messages=True)
    early = [(x, y) for x, y in zip(a.messages, b.messages) if x.step <= 4]
    assert early and all(np.array_equal(x.payload, y.payload) for x, y in early)
    assert not all(np.array_equal(x.payload, y.payload) for x, y in zip(a.messages, b.messages))


def test_threads_match_sequential():
    topo, cfg = _conv(learning_rate=0.05, optimizer="adam")
    seq = _random_clip(3)
    params = init_network_params(topo, RandomSource(2))
    a = Engine(topo, cfg, params=params).run_sequence(seq)
    b = Engine(topo, cfg, params=params).run_sequence(seq, executor="threads", max_workers=4)
    assert np.array_equal(a.losses, b.losses, equal_nan=True)
    assert all(np.array_equal(p[k], q[k]) for p, q in zip(a.params, b.params) for k in p)
    with pytest.raises(ValueError):
        Engine(topo, cfg, params=params).run_sequence(seq, executor="processes")


def test_cache_is_independent_of_length():
    topo, cfg = _conv()
    eng = Engine(topo, cfg, rng=RandomSource(0))
    short = eng.run_sequence(_random_clip(0, T=16), update=False)
    long = eng.run_sequence(_random_clip(0, T=64), update=False)
    assert short.cache_scalars == long.cache_scalars
    assert short.cache_tensors == long.cache_tensors


def test_alpha_zero_leaves_params_bitwise():
    for opt in ("sgd", "momentum", "adam"):
        topo, cfg = _conv(learning_rate=0.0, optimizer=opt)
        eng = Engine(topo, cfg, rng=RandomSource(0))
        before = [{k: v.copy() for k, v in p.items()} for p in eng.params]
        trace = eng.run_sequence(_random_clip(1))
        assert any(trace.contributions)
        assert all(np.array_equal(a[k], b[k]) for a, b in zip(before, trace.params) for k in a)


def test_apply_update_examples():
    p = {"w": np.array([1.0, 2.0])}
    g = {"w": np.array([0.5, -0.5])}
    new = apply_update(p, g, 1.0)
    assert new["w"].tolist() == [0.5, 2.5]
    assert not g["w"].any()
    with pytest.raises(DivergenceError):
        apply_update(p, {"w": np.array([np.nan, 0.0])}, 1.0)


def test_split_update_equals_summed_update_on_constant_input():
    topo, cfg = _conv(learning_rate=0.0, input_shortcut=True)
    frame = RandomSource(8).normal(size=(6, 6, 1))
    eng = Engine(topo, cfg, rng=RandomSource(0))
    trace = eng.run_sequence(gen_constant(frame, 10, 1), record_increments=True, update=False)
    alpha = 0.01
    for l, p in enumerate(trace.params):
        incs = [inc for _, inc in trace.increments[l]]
        half = len(incs) // 2
        first = {k: sum(i[k] for i in incs[:half]) for k in p}
        second = {k: sum(i[k] for i in incs[half:]) for k in p}
        total = {k: first[k] + second[k] for k in p}
        once = apply_update(p, total, alpha)
        twice = apply_update(apply_update(p, first, alpha), second, alpha)
        for k in p:
            assert np.allclose(once[k], twice[k], rtol=1e-12, atol=1e-14)


def test_per_step_cadence_updates_during_sequence():
    topo, cfg = _conv(learning_rate=0.05, update_cadence="per_step")
    eng = Engine(topo, cfg, rng=RandomSource(0))
    eng.run_sequence(_random_clip(2))
    assert eng.update_count > 1


def test_zero_buffers_scores_warmup_steps():
    topo, cfg = _conv(warmup_policy="zero_buffers", learning_rate=0.0)
    seq = _random_clip(2, T=6)
    discard = run_sequence(topo, seq, cfg.with_(warmup_policy="discard"), rng=RandomSource(0))
    zero = run_sequence(topo, seq, cfg, rng=RandomSource(0))
    assert zero.loss_valid.sum() >= discard.loss_valid.sum()
    assert sum(zero.contributions) > sum(discard.contributions)


def test_loss_head_examples():
    loss, seed = loss_head_step(_msg([0.0, 0.0], origin=7), 0, "cross_entropy")
    assert loss == pytest.approx(math.log(2))
    assert np.allclose(seed.payload, [-0.5, 0.5])
    assert seed.origin_frame == 7 and seed.valid
    loss, seed = loss_head_step(_msg([1.0, 2.0]), np.array([1.0, 2.0]), "mse")
    assert loss == 0.0 and not seed.payload.any()
    loss, seed = loss_head_step(_msg([1.0, 2.0], valid=False), 0, "cross_entropy")
    assert loss is None and not seed.valid and not seed.payload.any()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    cfg = EngineConfig(mode="sideways")
    topo = mlp(3, [4], 2, cfg, relu=False)
    frames = np.ones((6, 3))
    frames[2] = np.inf
    with pytest.raises(DivergenceError) as info:
        run_sequence(topo, FrameSequence(frames, np.zeros(6, int)), cfg, rng=RandomSource(0))
    assert info.value.step == 2 + topo.depth


def test_frame_shape_mismatch_rejected():
    topo, cfg = _conv()
    with pytest.raises(ShapeError):
        run_sequence(topo, FrameSequence(np.zeros((4, 5, 5, 1)), np.zeros(4, int)), cfg)


def test_config_mismatch_rejected():
    topo, cfg = _conv()
    with pytest.raises(ValueError):
        Engine(topo, cfg.with_(fusion="add"))


def test_config_text_roundtrip():
    cfg = EngineConfig(mode="fa_only", skip_span=(2, 3), input_shortcut=True, learning_rate=0.125)
    assert EngineConfig.from_text(cfg.to_text()) == cfg.with_(skip_span=(2, 3))
    with pytest.raises(ValueError):
        EngineConfig.from_text("bogus = 1\n")
    with pytest.raises(ValueError):
        EngineConfig(skip_span=1)
