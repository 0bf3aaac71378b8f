import csv
import json
import py_compile

import numpy as np
import pytest

from skipsideways.checkpoint import load_checkpoint
from skipsideways.cli import main
from skipsideways.experiments import (PRESETS, ConfigError, ExperimentConfig, config_to_text, make_batches,
                                      parse_experiment_config, train_run)
from skipsideways.numerics import RandomSource

TINY = """
[experiment]
frame_size = 6
clip_length = 6
depth = 3
width = 3
readout_width = 4
batch_size = 4
train_batches = 1
val_batches = 1
epochs = {epochs}
seeds = 0
{extra}
[engine]
learning_rate = {lr}
{engine}
"""


def _tiny(tmp_path, epochs=2, lr=0.003, extra="", engine=""):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY.format(epochs=epochs, lr=lr, extra=extra, engine=engine))
    return str(path)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_config_roundtrip_and_errors():
    cfg = parse_experiment_config("[experiment]\nmodes = skip, fa_only\nseeds = 1,2\n[engine]\nskip_span = 2,3\n")
    assert cfg.modes == ("skip_sideways", "fa_only") and cfg.seeds == (1, 2)
    assert parse_experiment_config(config_to_text(cfg)) == cfg
    for bad in ("[experiment]\nbogus = 1\n", "[other]\nx = 1\n", "[experiment]\nepochs = many\n",
                "[engine]\nmode = nonsense\n", "[experiment]\nmodes = teleport\n", "[experiment]\nsprite_extent = 20\n",
                "not an ini file"):
        with pytest.raises(ConfigError):
            parse_experiment_config(bad)


def test_presets_layer_under_config():
    cfg = parse_experiment_config("[experiment]\nepochs = 3\n", PRESETS["future_frame"])
    assert cfg.task == "future_frame" and cfg.sprite_extent == 5 and cfg.epochs == 3


def test_classification_clips_have_constant_labels():
    cfg = ExperimentConfig(frame_size=6, batch_size=3, clip_length=5, stride=2)
    (seq,) = make_batches(cfg, RandomSource(0), 1)
    assert seq.frames.shape == (5, 3, 6, 6, 1)
    assert (seq.targets == seq.targets[0]).all()


def test_future_frame_targets_are_depth_frames_ahead():
    cfg = PRESETS["future_frame"].with_(batch_size=2, clip_length=6)
    (seq,) = make_batches(cfg, RandomSource(0), 1)
    assert seq.targets.shape == seq.frames.shape
    assert np.array_equal(seq.targets[0], seq.frames[cfg.depth])


def test_alpha_zero_metrics_are_constant(tmp_path):
    cfg = parse_experiment_config(open(_tiny(tmp_path, epochs=3, lr=0.0)).read())
    run = train_run(cfg, "skip", 0)
    assert len({r["val_loss"] for r in run.rows}) == 1


def test_cli_train_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["train", "--config", _tiny(tmp_path), "--out", str(out)]) == 0
    rows = _rows(out / "metrics.csv")
    assert list(rows[0]) == ["seed", "mode", "epoch", "train_loss", "val_loss", "val_step_accuracy",
                             "val_accuracy"]
    assert [r["epoch"] for r in rows] == ["0", "1", "2"]
    py_compile.compile(str(out / "plot_metrics.py"), doraise=True)
    params, cfg = load_checkpoint(out / "checkpoint_skip_sideways_0.bin")
    assert cfg.mode == "skip_sideways" and len(params) == 3
    assert (out / "config.ini").exists() and (out / "summary.csv").exists()


def test_cli_compare_with_grad_similarity(tmp_path):
    out = tmp_path / "cmp"
    ini = _tiny(tmp_path, epochs=1, extra="grad_similarity = true\nmodes = skip_sideways, fa_only, sideways")
    assert main(["compare", "--config", ini, "--out", str(out)]) == 0
    modes = {r["mode"] for r in _rows(out / "metrics.csv")}
    assert modes == {"skip_sideways", "fa_only", "sideways"}
    grads = _rows(out / "grad_similarity.csv")
    assert grads and all(-1 <= float(r["cosine"]) <= 1 for r in grads)


def test_cli_future_frame_preset(tmp_path):
    out = tmp_path / "ff"
    ini = tmp_path / "ff.ini"
    ini.write_text("[experiment]\nframe_size = 6\nclip_length = 6\ndepth = 2\nwidth = 3\nreadout_width = 0\n"
                   "batch_size = 2\ntrain_batches = 1\nval_batches = 1\nepochs = 1\n")
    assert main(["train", "--preset", "future_frame", "--config", str(ini), "--out", str(out)]) == 0
    assert "val_l2" in _rows(out / "metrics.csv")[0]


def test_cli_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\nunknown_key = 1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", _tiny(tmp_path), "--stride", "0", "--out", str(tmp_path)]) == 2
    assert main(["schedule", "--stages", "0", "--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_divergence_exit_3(tmp_path):
    out = tmp_path / "div"
    ini = _tiny(tmp_path, epochs=4, lr=1e300, engine="optimizer = sgd\nlr_schedule = constant")
    assert main(["train", "--config", ini, "--out", str(out)]) == 3
    report = json.loads((out / "divergence.json").read_text())
    assert {"seed", "mode", "epoch", "step", "value"} <= set(report)


def test_cli_gradcheck(tmp_path):
    assert main(["gradcheck", "--seeds", "1", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "gradcheck.csv")
    assert rows and all(r["passed"] == "True" for r in rows)


def test_cli_schedule_and_memory(tmp_path):
    assert main(["schedule", "--stages", "4", "--frames", "16", "--out", str(tmp_path)]) == 0
    sched = {r["strategy"]: r for r in _rows(tmp_path / "schedule.csv")}
    assert float(sched["sideways"]["throughput"]) > float(sched["gpipe"]["throughput"])
    assert (tmp_path / "gantt.txt").read_text().startswith("sequential_bp")
    assert main(["memory", "--T", "16", "32", "--out", str(tmp_path)]) == 0
    mem = _rows(tmp_path / "memory.csv")
    side = {int(r["T"]): r["scalars"] for r in mem if r["strategy"] == "sideways" and r["unit"] == "1"}
    assert side[16] == side[32]


def test_cli_montage(tmp_path):
    ini = _tiny(tmp_path, epochs=1)
    assert main(["montage", "--config", ini, "--cuts", "0", "1", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "montage.csv")
    assert [r["cuts"] for r in rows] == ["0", "1"]
