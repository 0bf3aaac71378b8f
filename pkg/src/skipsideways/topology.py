"""Engine configuration and unit connectivity.

Units are numbered ``1..D``; index ``0`` stands for the input frame. Unit ``l``
always reads from ``l - 1`` (the direct edge) and, outside Sideways mode, from
``l - k`` for every configured skip span ``k`` (shortcut edges). Every edge,
including the input edge, crosses exactly one computation step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Callable, Sequence

from .layers import LayerSpec, ShapeError, fused_shape, output_shape

MODES = ("sideways", "skip_sideways", "fa_only")
FUSIONS = ("add", "concat")
CADENCES = ("per_sequence", "per_step")
WARMUP_POLICIES = ("discard", "zero_buffers")
OPTIMIZERS = ("sgd", "momentum", "adam")
SCHEDULES = ("constant", "cosine")
HEADS = ("cross_entropy", "mse")


@dataclass(frozen=True)
class EngineConfig:
    mode: str = "skip_sideways"
    fusion: str = "concat"
    skip_span: int | tuple[int, ...] = 2
    learning_rate: float = 0.01
    update_cadence: str = "per_sequence"
    warmup_policy: str = "discard"
    input_shortcut: bool = False
    optimizer: str = "sgd"
    momentum: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_schedule: str = "constant"
    schedule_steps: int = 0
    # Multiplies every shortcut operand before fusion; only ablation tests change it.
    shortcut_gain: float = 1.0
    precision: str = "double"

    def __post_init__(self):
        for name, allowed in (("mode", MODES), ("fusion", FUSIONS), ("update_cadence", CADENCES),
                              ("warmup_policy", WARMUP_POLICIES), ("optimizer", OPTIMIZERS),
                              ("lr_schedule", SCHEDULES)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if any(k < 2 for k in self.skip_spans):
            raise ValueError("skip spans must be >= 2 (span 1 is the direct edge)")
        if self.precision not in ("double", "single"):
            raise ValueError(f"precision must be 'double' or 'single', got {self.precision!r}")

    @property
    def skip_spans(self) -> tuple[int, ...]:
        if isinstance(self.skip_span, int):
            return (self.skip_span,)
        return tuple(sorted(int(k) for k in self.skip_span))

    def with_(self, **changes) -> "EngineConfig":
        return replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EngineConfig":
        kinds = {f.name: f for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = (s.strip() for s in line.partition("="))
            if key not in kinds:
                raise ValueError(f"unknown engine config key {key!r}")
            values[key] = parse_config_value(key, raw)
        return cls(**values)


def parse_config_value(key: str, raw: str):
    default = getattr(EngineConfig(), key)
    if key == "skip_span":
        parts = [int(p) for p in raw.split(",") if p.strip()]
        return parts[0] if len(parts) == 1 else tuple(parts)
    if isinstance(default, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key} expects a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def sources_for(unit: int, mode: str, spans: Sequence[int], input_shortcut: bool) -> tuple[int, ...]:
    srcs = [unit - 1]
    if mode != "sideways":
        for k in spans:
            s = unit - k
            if s >= 1 or (s == 0 and input_shortcut):
                srcs.append(s)
    return tuple(srcs)


@dataclass(frozen=True)
class UnitSpec:
    layers: tuple[LayerSpec, ...]
    sources: tuple[int, ...]
    taus: tuple[LayerSpec | None, ...]
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]

    @property
    def direct_source(self) -> int:
        return self.sources[0]


@dataclass(frozen=True)
class NetworkTopology:
    input_shape: tuple[int, ...]
    units: tuple[UnitSpec, ...]
    head: str
    mode: str
    fusion: str
    skip_spans: tuple[int, ...]
    input_shortcut: bool
    source_shapes: tuple[tuple[int, ...], ...] = field(default=())

    @property
    def depth(self) -> int:
        return len(self.units)

    def unit(self, l: int) -> UnitSpec:
        return self.units[l - 1]

    def shape_of(self, node: int) -> tuple[int, ...]:
        return self.input_shape if node == 0 else self.units[node - 1].out_shape

    def consumers(self, node: int) -> tuple[int, ...]:
        """Units reading ``node``; the direct consumer (node + 1) comes first."""
        out = [m for m in range(1, self.depth + 1) if node in self.unit(m).sources]
        return tuple(sorted(out, key=lambda m: (m != node + 1, m)))

    def check(self, config: EngineConfig) -> None:
        if (config.mode, config.fusion, config.skip_spans, config.input_shortcut) != (
            self.mode, self.fusion, self.skip_spans, self.input_shortcut
        ) and not (config.mode == self.mode == "sideways"):
            raise ValueError(
                "topology was built for "
                f"mode={self.mode}, fusion={self.fusion}, spans={self.skip_spans}, "
                f"input_shortcut={self.input_shortcut}; config differs"
            )


def infer_tau(src_shape: tuple[int, ...], dst_shape: tuple[int, ...]) -> LayerSpec | None:
    """Matcher taking a shortcut activation to the direct activation's spatial extents."""
    if len(src_shape) < 3 or len(dst_shape) < 3:
        if tuple(src_shape[:-1]) != tuple(dst_shape[:-1]):
            raise ShapeError(f"cannot match non-spatial shapes {src_shape} and {dst_shape}")
        return None
    (sh, sw), (dh, dw) = src_shape[-3:-1], dst_shape[-3:-1]
    if (sh, sw) == (dh, dw):
        return None
    if sh >= dh and sw >= dw:
        if sh % dh or sw % dw:
            raise ShapeError(f"max-pool matcher needs divisible extents: {sh}x{sw} -> {dh}x{dw}")
        return LayerSpec.maxpool2d((sh // dh, sw // dw))
    if sh <= dh and sw <= dw:
        if dh % sh or dw % sw:
            raise ShapeError(f"tile matcher needs divisible extents: {sh}x{sw} -> {dh}x{dw}")
        return LayerSpec.tile_upsample((dh // sh, dw // sw))
    raise ShapeError(f"cannot match extents {sh}x{sw} -> {dh}x{dw}")


Body = Callable[[tuple[int, ...]], Sequence[LayerSpec]]


def build_topology(
    input_shape: Sequence[int],
    bodies: Sequence[Body],
    config: EngineConfig,
    head: str = "cross_entropy",
) -> NetworkTopology:
    """Lay out ``len(bodies)`` units with the connectivity required by ``config``.

    Each body receives the unit's fused input shape and returns its layers, so
    channel counts follow the fusion operator automatically.
    """
    if head not in HEADS:
        raise ValueError(f"head must be one of {HEADS}")
    if not bodies:
        raise ValueError("a topology needs at least one unit")
    shapes = [tuple(int(d) for d in input_shape)]
    units = []
    for l, body in enumerate(bodies, start=1):
        srcs = sources_for(l, config.mode, config.skip_spans, config.input_shortcut)
        direct = shapes[srcs[0]]
        taus: list[LayerSpec | None] = [None]
        gamma = direct
        for s in srcs[1:]:
            tau = infer_tau(shapes[s], direct)
            matched = shapes[s] if tau is None else output_shape(tau, shapes[s])
            gamma = fused_shape(config.fusion, gamma, matched)
            taus.append(tau)
        layers = tuple(body(gamma))
        out = gamma
        for spec in layers:
            out = output_shape(spec, out)
        units.append(UnitSpec(layers, srcs, tuple(taus), gamma, out))
        shapes.append(out)
    return NetworkTopology(
        input_shape=shapes[0],
        units=tuple(units),
        head=head,
        mode=config.mode,
        fusion=config.fusion,
        skip_spans=config.skip_spans,
        input_shortcut=config.input_shortcut,
        source_shapes=tuple(shapes),
    )


def conv_body(out_channels: int, kernel: int = 3, relu: bool = True, scale_shift: bool = False) -> Body:
    def body(shape):
        layers = [LayerSpec.conv2d(shape[-1], out_channels, kernel)]
        if scale_shift:
            layers.append(LayerSpec.scale_shift(out_channels))
        if relu:
            layers.append(LayerSpec.relu())
        return layers
    return body


def affine_body(out_features: int, relu: bool = True) -> Body:
    def body(shape):
        layers = [LayerSpec.affine(shape[-1], out_features)]
        if relu:
            layers.append(LayerSpec.relu())
        return layers
    return body


def pooled_readout_body(num_classes: int, conv_channels: int = 0, kernel: int = 3) -> Body:
    """Optional conv + relu, then a global max-pool and an affine classifier."""
    def body(shape):
        H, W, C = shape[-3:]
        layers = []
        if conv_channels:
            layers += [LayerSpec.conv2d(C, conv_channels, kernel), LayerSpec.relu()]
            C = conv_channels
        return layers + [LayerSpec.maxpool2d((H, W)), LayerSpec.affine(C, num_classes)]
    return body


def conv_classifier(frame_shape, channels: Sequence[int], num_classes: int, config: EngineConfig,
                    kernel: int = 3, scale_shift: bool = False, readout_channels: int = 0) -> NetworkTopology:
    """``len(channels)`` conv units plus a pooled readout unit.

    With ``readout_channels`` the readout unit starts with its own conv + relu,
    so features from the fused direct and shortcut inputs are combined inside it.
    """
    bodies = [conv_body(c, kernel, scale_shift=scale_shift) for c in channels]
    bodies.append(pooled_readout_body(num_classes, readout_channels, kernel))
    return build_topology(frame_shape, bodies, config, head="cross_entropy")


def conv_predictor(frame_shape, channels: Sequence[int], config: EngineConfig, kernel: int = 3,
                   readout_channels: int = 0) -> NetworkTopology:
    """Full-resolution conv stack whose last unit maps back to the frame's channels.

    With ``readout_channels`` the last unit is conv + relu + linear conv.
    """
    bodies = [conv_body(c, kernel) for c in channels]

    def readout(shape):
        layers = []
        c = shape[-1]
        if readout_channels:
            layers += [LayerSpec.conv2d(c, readout_channels, kernel), LayerSpec.relu()]
            c = readout_channels
        return layers + [LayerSpec.conv2d(c, frame_shape[-1], kernel)]
    bodies.append(readout)
    return build_topology(frame_shape, bodies, config, head="mse")


def mlp(in_features: int, widths: Sequence[int], out_features: int, config: EngineConfig,
        head: str = "cross_entropy", relu: bool = True) -> NetworkTopology:
    bodies = [affine_body(w, relu=relu) for w in widths]
    bodies.append(affine_body(out_features, relu=False))
    return build_topology((in_features,), bodies, config, head=head)
