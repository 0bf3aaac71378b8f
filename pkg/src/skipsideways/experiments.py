"""Experiment drivers: config files, training loops, metrics and plot scripts.

An :class:`ExperimentConfig` plus a seed fully determines a run. Configs are
read from INI text with an ``[experiment]`` section (data, model and loop
settings) and an ``[engine]`` section (:class:`EngineConfig` fields). Unknown
sections or keys are errors.
"""

from __future__ import annotations

import configparser
import csv
import json
import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .data import (DIRECTIONS, FrameSequence, default_sprite, future_frame_sequence, gen_montage,
                   gen_translating_sprite, stack_batch, subsample_framerate)
from .engine import Engine
from .numerics import RandomSource
from .optim import DivergenceError
from .oracles import GradientReport, grad_similarity, unrolled_true_grads
from .topology import EngineConfig, NetworkTopology, conv_classifier, conv_predictor, parse_config_value

TASKS = ("direction_classification", "future_frame")
MODE_ALIASES = {"skip": "skip_sideways", "skip_sideways": "skip_sideways", "sideways": "sideways",
                "fa_only": "fa_only"}


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


class ExperimentDiverged(RuntimeError):
    def __init__(self, report: dict):
        super().__init__(f"run diverged: {report}")
        self.report = report


def default_engine_config() -> EngineConfig:
    """Engine settings used by the experiments unless a config overrides them."""
    return EngineConfig(mode="skip_sideways", fusion="concat", skip_span=2, input_shortcut=True,
                        optimizer="adam", learning_rate=0.003, lr_schedule="cosine")


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "direction_classification"
    # data
    frame_size: int = 8
    channels: int = 1
    sprite_extent: int = 3
    speed: float = 1.0
    clip_length: int = 16
    stride: int = 1
    delta: int = 0  # future-frame displacement; 0 means "network depth"
    montage_cuts: int = 0
    # model
    depth: int = 4
    width: int = 8
    readout_width: int = 32
    kernel: int = 3
    # loop
    batch_size: int = 32
    train_batches: int = 8
    val_batches: int = 4
    epochs: int = 15
    modes: tuple[str, ...] = ("skip_sideways", "sideways")
    seeds: tuple[int, ...] = (0,)
    grad_similarity: bool = False
    out_dir: str = "results"
    engine: EngineConfig = field(default_factory=default_engine_config)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        modes = tuple(MODE_ALIASES.get(m, m) for m in self.modes)
        if not modes or any(m not in MODE_ALIASES.values() for m in modes):
            raise ConfigError(f"unknown mode in {self.modes}")
        object.__setattr__(self, "modes", modes)
        for name in ("frame_size", "channels", "sprite_extent", "clip_length", "stride", "depth", "width",
                     "kernel", "batch_size", "train_batches", "val_batches"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0 or self.delta < 0 or self.montage_cuts < 0 or self.readout_width < 0:
            raise ConfigError("epochs, delta, montage_cuts and readout_width must be >= 0")
        if self.depth < 2:
            raise ConfigError("depth must be >= 2")
        if self.sprite_extent > self.frame_size:
            raise ConfigError("sprite does not fit in the frame")
        if self.montage_cuts >= self.clip_length:
            raise ConfigError("montage_cuts must be smaller than clip_length")
        if not self.seeds:
            raise ConfigError("need at least one seed")

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.frame_size, self.frame_size, self.channels)

    @property
    def displacement(self) -> int:
        return self.delta or self.depth

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def engine_for(self, mode: str) -> EngineConfig:
        return self.engine.with_(mode=MODE_ALIASES[mode])


_EXPERIMENT_KEYS = {f.name: f for f in fields(ExperimentConfig) if f.name != "engine"}


def _parse_experiment_value(key: str, raw: str):
    default = getattr(ExperimentConfig(), key)
    try:
        if key in ("modes", "seeds"):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(int(p) for p in parts) if key == "seeds" else tuple(parts)
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected a boolean, got {raw!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_experiment_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from INI text on top of ``base`` (defaults when omitted).

    Every key is optional; unknown sections or keys are errors.
    """
    base = base or ExperimentConfig()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    unknown = set(parser.sections()) - {"experiment", "engine"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    values = {}
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key not in _EXPERIMENT_KEYS:
                raise ConfigError(f"unknown experiment key {key!r}")
            values[key] = _parse_experiment_value(key, raw)
    engine = base.engine
    if parser.has_section("engine"):
        changes = {}
        engine_keys = {f.name for f in fields(EngineConfig)}
        for key, raw in parser.items("engine"):
            if key not in engine_keys:
                raise ConfigError(f"unknown engine key {key!r}")
            try:
                changes[key] = parse_config_value(key, raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        try:
            engine = engine.with_(**changes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    try:
        return base.with_(engine=engine, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_experiment_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path) as fh:
        return parse_experiment_config(fh.read(), base)


# Direction classification uses the plain defaults. Future-frame prediction
# needs a wider sprite moving at half a pixel per frame so consecutive frames
# overlap; the stride sweep uses 10x10 frames so a 4-pixel jump stays
# unambiguous on the torus (on 8x8 it is half the period).
PRESETS = {
    "direction": ExperimentConfig(),
    "future_frame": ExperimentConfig(task="future_frame", sprite_extent=5, speed=0.5, epochs=10),
    "stride": ExperimentConfig(frame_size=10),
}


def config_to_text(config: ExperimentConfig) -> str:
    lines = ["[experiment]"]
    for name in _EXPERIMENT_KEYS:
        v = getattr(config, name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{name} = {v}")
    lines += ["", "[engine]", config.engine.to_text().rstrip("\n"), ""]
    return "\n".join(lines)


# ---------------------------------------------------------------- data and model

def build_model(config: ExperimentConfig, mode: str) -> NetworkTopology:
    cfg = config.engine_for(mode)
    lower = [config.width] * (config.depth - 1)
    if config.task == "direction_classification":
        return conv_classifier(config.frame_shape, lower, len(DIRECTIONS), cfg, kernel=config.kernel,
                               readout_channels=config.readout_width)
    return conv_predictor(config.frame_shape, lower, cfg, kernel=config.kernel,
                          readout_channels=config.readout_width)


def make_clip(config: ExperimentConfig, rng: RandomSource, length: int | None = None) -> FrameSequence:
    """One high-rate clip, subsampled by ``stride``; future-frame clips get shifted targets."""
    T = length or config.clip_length
    extra = config.displacement if config.task == "future_frame" else 0
    raw = gen_translating_sprite(config.frame_size, T=(T + extra) * config.stride, rng=rng,
                                 sprite=default_sprite(config.sprite_extent), channels=config.channels,
                                 speed=config.speed, precision=config.engine.precision)
    seq = subsample_framerate(raw, config.stride)
    if config.task == "future_frame":
        seq = future_frame_sequence(seq, extra)
    return seq


def make_sequence(config: ExperimentConfig, rng: RandomSource) -> FrameSequence:
    """A clip, or a concat montage of ``montage_cuts + 1`` shots sharing the clip length."""
    if config.montage_cuts == 0:
        return make_clip(config, rng)
    shots = config.montage_cuts + 1
    base, extra = divmod(config.clip_length, shots)
    lengths = [base + (i < extra) for i in range(shots)]
    return gen_montage([make_clip(config, rng.split(("shot", i)), n) for i, n in enumerate(lengths)], "concat")


def make_batches(config: ExperimentConfig, rng: RandomSource, n_batches: int) -> list[FrameSequence]:
    return [stack_batch([make_sequence(config, rng.split((b, i))) for i in range(config.batch_size)])
            for b in range(n_batches)]


# ---------------------------------------------------------------- evaluation

def evaluate(engine: Engine, batches) -> dict:
    """Validation metrics from forward-only runs.

    Classification reports ``step_accuracy`` (every scored step) and
    ``accuracy`` (per clip: argmax of the softmax averaged over its scored
    steps). Future-frame prediction reports ``l2``, the per-pixel mean squared
    error over scored steps. ``loss`` is the mean scored loss in both cases.
    """
    losses, step_hits, step_n, clip_hits, clip_n = [], 0, 0, 0, 0
    classify = engine.topology.head == "cross_entropy"
    for seq in batches:
        tr = engine.run_sequence(seq, forward_only=True, keep_outputs=True)
        losses.extend(tr.valid_losses.tolist())
        if not classify:
            continue
        prob_sum = 0.0
        for t, out in tr.outputs.items():
            if not tr.loss_valid[t]:
                continue
            logits = out.reshape(out.shape[0], -1) if out.ndim > 1 else out.reshape(1, -1)
            labels = np.asarray(seq.targets[tr.loss_origin[t]]).reshape(-1)
            step_hits += int((logits.argmax(-1) == labels).sum())
            step_n += labels.size
            e = np.exp(logits - logits.max(-1, keepdims=True))
            prob_sum = prob_sum + e / e.sum(-1, keepdims=True)
        clip_labels = np.asarray(seq.targets[0]).reshape(-1)
        if np.ndim(prob_sum):
            clip_hits += int((prob_sum.argmax(-1) == clip_labels).sum())
        clip_n += clip_labels.size
    out = {"loss": float(np.mean(losses)) if losses else float("nan")}
    if classify:
        out["step_accuracy"] = step_hits / step_n if step_n else float("nan")
        out["accuracy"] = clip_hits / clip_n if clip_n else float("nan")
    else:
        out["l2"] = out["loss"]
    return out


def gradient_report(topology: NetworkTopology, params: list[dict], config: EngineConfig,
                    seq: FrameSequence) -> GradientReport:
    """Pseudo-gradients of one sequence against the exact gradient of the same step graph."""
    probe = Engine(topology, config.with_(learning_rate=0.0), params=params)
    trace = probe.run_sequence(seq, update=False)
    _, exact, _ = unrolled_true_grads(topology, params, config, seq)
    return grad_similarity(trace.grad_sums, exact)


# ---------------------------------------------------------------- training

@dataclass
class RunResult:
    seed: int
    mode: str
    rows: list[dict]
    grad_rows: list[dict]
    params: list[dict]
    seconds: float

    @property
    def final(self) -> dict:
        return self.rows[-1]


def train_run(config: ExperimentConfig, mode: str, seed: int) -> RunResult:
    """Train one (mode, seed) pair; validation data depend only on the seed.

    Training clips are drawn fresh every epoch from the seed's stream.
    Raises :class:`ExperimentDiverged` on a non-finite loss or update.
    """
    mode = MODE_ALIASES[mode]
    cfg = config.engine_for(mode)
    if cfg.lr_schedule == "cosine" and cfg.schedule_steps == 0:
        per_epoch = config.train_batches * (1 if cfg.update_cadence == "per_sequence" else
                                            config.clip_length + config.depth)
        cfg = cfg.with_(schedule_steps=max(1, config.epochs * per_epoch))
    topology = build_model(config, mode)
    rng = RandomSource(seed)
    val = make_batches(config, rng.split("val"), config.val_batches)
    engine = Engine(topology, cfg, rng=rng.split("init"))
    rows, grad_rows = [], []
    start = time.process_time()

    def diverged(exc: DivergenceError, phase: str, epoch: int, batch: int) -> ExperimentDiverged:
        return ExperimentDiverged({"seed": seed, "mode": mode, "phase": phase, "epoch": epoch, "batch": batch,
                                   "step": exc.step, "value": exc.value, "error": str(exc)})

    def record(epoch: int, train_loss: float):
        row = {"seed": seed, "mode": mode, "epoch": epoch, "train_loss": train_loss}
        try:
            metrics = evaluate(engine, val)
        except DivergenceError as exc:
            raise diverged(exc, "validation", epoch, -1) from exc
        row.update({f"val_{k}": v for k, v in metrics.items()})
        rows.append(row)
        if config.grad_similarity:
            rep = gradient_report(topology, engine.params, cfg, val[0])
            for name, c, r in zip(rep.names, rep.cosine, rep.rel_l2):
                grad_rows.append({"seed": seed, "mode": mode, "epoch": epoch, "layer": name, "cosine": c,
                                  "rel_l2": r})

    record(0, float("nan"))
    for epoch in range(1, config.epochs + 1):
        losses = []
        for b, seq in enumerate(make_batches(config, rng.split(("train", epoch)), config.train_batches)):
            try:
                losses.append(engine.run_sequence(seq).mean_loss)
            except DivergenceError as exc:
                raise diverged(exc, "train", epoch, b) from exc
        record(epoch, float(np.nanmean(losses)) if losses else float("nan"))
    return RunResult(seed, mode, rows, grad_rows, [{k: v.copy() for k, v in p.items()} for p in engine.params],
                     time.process_time() - start)


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, columns, lineterminator="\n", restval="")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


PLOT_SCRIPT = '''"""Plot validation curves from {metrics}; needs pandas and matplotlib."""
import sys

import matplotlib.pyplot as plt
import pandas as pd

df = pd.read_csv(sys.argv[1] if len(sys.argv) > 1 else "{metrics}")
metric = "{metric}"
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
fig.savefig("{stem}.png", dpi=120)
'''


def write_plot_script(out_dir, metrics_name: str, metric: str) -> str:
    path = os.path.join(out_dir, "plot_" + os.path.splitext(metrics_name)[0] + ".py")
    with open(path, "w") as fh:
        fh.write(PLOT_SCRIPT.format(metrics=metrics_name, metric=metric,
                                    stem=os.path.splitext(metrics_name)[0]))
    return path


@dataclass
class ExperimentResult:
    runs: list[RunResult]
    files: dict[str, str]

    def final(self, mode: str, metric: str) -> list[float]:
        return [r.final[metric] for r in self.runs if r.mode == MODE_ALIASES[mode]]


def run_experiment(config: ExperimentConfig, out_dir: str | None = None) -> ExperimentResult:
    """Train every (mode, seed) pair and write ``metrics.csv``, a plot script and,
    when requested, ``grad_similarity.csv``.

    On divergence ``divergence.json`` names the run, step and loss value, and
    :class:`ExperimentDiverged` is raised.
    """
    out_dir = out_dir or config.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.ini"), "w") as fh:
        fh.write(config_to_text(config))
    runs = []
    try:
        for mode in config.modes:
            for seed in config.seeds:
                runs.append(train_run(config, mode, seed))
    except ExperimentDiverged as exc:
        with open(os.path.join(out_dir, "divergence.json"), "w") as fh:
            json.dump(exc.report, fh, indent=2, default=str)
        raise
    files = {"config": os.path.join(out_dir, "config.ini")}
    files["metrics"] = os.path.join(out_dir, "metrics.csv")
    write_csv(files["metrics"], [row for r in runs for row in r.rows])
    metric = "val_accuracy" if config.task == "direction_classification" else "val_l2"
    files["plot"] = write_plot_script(out_dir, "metrics.csv", metric)
    if config.grad_similarity:
        files["grad_similarity"] = os.path.join(out_dir, "grad_similarity.csv")
        write_csv(files["grad_similarity"], [row for r in runs for row in r.grad_rows],
                  ["seed", "mode", "epoch", "layer", "cosine", "rel_l2"])
    summary = []
    for mode in config.modes:
        vals = [r.final[metric] for r in runs if r.mode == mode]
        summary.append({"mode": mode, "metric": metric, "mean": float(np.mean(vals)),
                        "min": float(np.min(vals)), "max": float(np.max(vals)), "seeds": len(vals)})
    files["summary"] = os.path.join(out_dir, "summary.csv")
    write_csv(files["summary"], summary)
    return ExperimentResult(runs, files)


def run_montage_sweep(config: ExperimentConfig, cuts=(0, 1, 3), out_dir: str | None = None) -> list[dict]:
    """Train on concat montages with an increasing number of cuts.

    Every run uses the config's learning rate; ``montage.csv`` records the
    final per-step accuracy (labels follow the shot each frame came from)
    and whether the run diverged.
    """
    rows = []
    for n in cuts:
        for seed in config.seeds:
            cfg = config.with_(montage_cuts=n, grad_similarity=False)
            try:
                res = train_run(cfg, config.modes[0], seed)
                final = res.final
                rows.append({"cuts": n, "seed": seed, "mode": res.mode, "diverged": False,
                             "train_loss": final["train_loss"], "val_loss": final["val_loss"],
                             "val_step_accuracy": final["val_step_accuracy"]})
            except ExperimentDiverged as exc:
                rows.append({"cuts": n, "seed": seed, "mode": config.modes[0], "diverged": True,
                             "train_loss": float("nan"), "val_loss": float("nan"),
                             "val_step_accuracy": float("nan"), "step": exc.report.get("step")})
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(os.path.join(out_dir, "montage.csv"), rows)
    return rows
