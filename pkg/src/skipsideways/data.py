"""Synthetic frame sequences: translating sprites, constant clips, montages."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import RandomSource, ShapeError, Tensor, dtype_for

# (dx, dy) per class: x grows to the right, y grows downwards.
DIRECTIONS = ((1, 0), (-1, 0), (0, -1), (0, 1))
DIRECTION_NAMES = ("right", "left", "up", "down")


@dataclass
class FrameSequence:
    """``frames`` is ``(T, *frame_shape)``; ``targets`` has one entry per frame.

    ``targets`` holds class labels for classification sequences and target
    frames for prediction sequences. ``boundaries`` lists clip start indices
    (always beginning with 0) so montages keep track of their cuts.
    """

    frames: Tensor
    targets: Tensor
    stride: int = 1
    boundaries: tuple[int, ...] = (0,)
    sources: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        self.targets = np.asarray(self.targets)
        if self.frames.shape[0] < 1:
            raise ValueError("a frame sequence needs at least one frame")
        if self.targets.shape[0] != self.frames.shape[0]:
            raise ShapeError(f"{self.targets.shape[0]} targets for {self.frames.shape[0]} frames")
        b = tuple(int(i) for i in self.boundaries)
        if not b or b[0] != 0 or any(x >= y for x, y in zip(b, b[1:])) or b[-1] >= len(self):
            raise ValueError(f"clip boundaries {b} do not partition [0, {len(self)})")
        self.boundaries = b

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def frame_shape(self) -> tuple[int, ...]:
        return tuple(self.frames.shape[1:])


def default_sprite(extent: int = 3) -> Tensor:
    """Smooth bump with peak 1 in the middle, falling off linearly to the edges."""
    r = (extent - 1) / 2.0
    prof = 1.0 - np.abs(np.arange(extent) - r) / (r + 1.0)
    return np.outer(prof, prof)


def _render(size: tuple[int, int], sprite: Tensor, x: float, y: float, channels: int) -> Tensor:
    """Place ``sprite`` at ``(x, y)`` on a torus; fractional positions blend bilinearly."""
    H, W = size
    base = np.zeros((H, W))
    sh, sw = sprite.shape
    base[:sh, :sw] = sprite
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    canvas = np.zeros((H, W))
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            if wy * wx:
                canvas += wy * wx * np.roll(base, (y0 + dy, x0 + dx), axis=(0, 1))
    return np.repeat(canvas[:, :, None], channels, axis=2)


def gen_translating_sprite(size, velocities=DIRECTIONS, T: int = 16, rng: RandomSource | None = None,
                           sprite: Tensor | None = None, channels: int = 1, label: int | None = None,
                           speed: float = 1.0, precision: str = "double") -> FrameSequence:
    """One clip of a sprite moving with constant velocity on a torus.

    The class label indexes ``velocities``; the start position is uniform over
    the frame, so any single frame carries no information about the class.
    ``speed`` scales every velocity and may be fractional (sub-pixel motion).
    """
    H, W = (size, size) if np.isscalar(size) else tuple(size)
    sprite = default_sprite() if sprite is None else np.asarray(sprite, dtype=np.float64)
    if H < 2 or W < 2 or T < 1 or channels < 1:
        raise ValueError(f"degenerate sprite clip: size={H}x{W}, T={T}, channels={channels}")
    if sprite.shape[0] > H or sprite.shape[1] > W:
        raise ValueError(f"sprite {sprite.shape} does not fit in a {H}x{W} frame")
    if any(vx == 0 and vy == 0 for vx, vy in velocities) or not speed > 0:
        raise ValueError("every velocity must be nonzero and speed positive")
    rng = rng or RandomSource(0)
    if label is None:
        label = int(rng.integers(len(velocities)))
    x0, y0 = int(rng.integers(W)), int(rng.integers(H))
    vx, vy = velocities[label]
    frames = np.stack([_render((H, W), sprite, x0 + t * vx * speed, y0 + t * vy * speed, channels)
                       for t in range(T)])
    return FrameSequence(frames.astype(dtype_for(precision)), np.full(T, label, dtype=np.int64))


def gen_constant(frame: Tensor, T: int, target=0) -> FrameSequence:
    if T < 1:
        raise ValueError("T must be >= 1")
    frame = np.asarray(frame)
    frames = np.broadcast_to(frame, (T,) + frame.shape).copy()
    target = np.asarray(target)
    targets = np.broadcast_to(target, (T,) + target.shape).copy()
    return FrameSequence(frames, targets)


def gen_montage(clips, mode: str = "concat") -> FrameSequence:
    """Assemble clips into one sequence, by appending or by round-robin interleaving."""
    clips = list(clips)
    if not clips:
        raise ValueError("montage needs at least one clip")
    shape = clips[0].frame_shape
    for c in clips[1:]:
        if c.frame_shape != shape:
            raise ShapeError(f"montage clips disagree on frame shape: {shape} vs {c.frame_shape}")
    if mode == "concat":
        frames = np.concatenate([c.frames for c in clips])
        targets = np.concatenate([c.targets for c in clips])
        starts = np.cumsum([0] + [len(c) for c in clips[:-1]])
        sources = np.concatenate([np.full(len(c), i) for i, c in enumerate(clips)])
        return FrameSequence(frames, targets, clips[0].stride, tuple(int(s) for s in starts), tuple(int(s) for s in sources))
    if mode == "interleave":
        n = min(len(c) for c in clips)
        order = [(i, t) for t in range(n) for i in range(len(clips))]
        frames = np.stack([clips[i].frames[t] for i, t in order])
        targets = np.stack([clips[i].targets[t] for i, t in order])
        # every frame starts a new shot when more than one clip is interleaved
        bounds = tuple(range(len(order))) if len(clips) > 1 else (0,)
        return FrameSequence(frames, targets, clips[0].stride, bounds, tuple(i for i, _ in order))
    raise ValueError(f"montage mode must be 'concat' or 'interleave', got {mode!r}")


def subsample_framerate(seq: FrameSequence, stride: int) -> FrameSequence:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stride == 1:
        return seq
    keep = np.arange(0, len(seq), stride)
    bounds = sorted({int(np.searchsorted(keep, b)) for b in seq.boundaries if np.searchsorted(keep, b) < len(keep)})
    return FrameSequence(seq.frames[keep], seq.targets[keep], seq.stride * stride, tuple(bounds),
                         tuple(seq.sources[i] for i in keep) if seq.sources else ())


def future_frame_sequence(seq: FrameSequence, delta: int) -> FrameSequence:
    """Pair frame ``f`` with target frame ``f + delta``; the result is ``delta`` frames shorter."""
    if len(seq) <= delta:
        raise ValueError(f"need more than {delta} frames to build {delta}-ahead targets")
    T = len(seq) - delta
    return FrameSequence(seq.frames[:T], seq.frames[delta:delta + T], seq.stride)


def stack_batch(seqs) -> FrameSequence:
    """Stack equally long sequences along a batch axis placed after time."""
    seqs = list(seqs)
    if len({len(s) for s in seqs}) != 1:
        raise ShapeError("batched sequences must share their length")
    frames = np.stack([s.frames for s in seqs], axis=1)
    targets = np.stack([s.targets for s in seqs], axis=1)
    return FrameSequence(frames, targets, seqs[0].stride, seqs[0].boundaries)


def with_precision(seq: FrameSequence, precision: str) -> FrameSequence:
    dt = dtype_for(precision)
    targets = seq.targets.astype(dt) if np.issubdtype(seq.targets.dtype, np.floating) else seq.targets
    return replace(seq, frames=seq.frames.astype(dt), targets=targets)
