import json
import subprocess
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest
import yaml

from vbprnn.cli import main
from vbprnn.net import load_checkpoint
from vbprnn.seqdata import load_dataset
from vbprnn.train import load_training_state

TINY = {
    "preset": "desk",
    "network": {"layer_sizes": [6, 3], "time_constants": [2.0, 8.0]},
    "codec": {"rows": 5, "cols": 5, "sharpness": 60.0},
    "training": {"w_values": [0.0, 0.1], "epochs": 15, "batch_size": 2, "alpha_half_life": None},
    "data": {"sequences": 2, "slice_length": 40, "total_steps": 200, "steps_per_cycle": 8},
    "classifier": {"layer_sizes": [6, 3], "time_constants": [2.0, 8.0], "epochs": 15, "chunk_length": 24,
                   "prototypes": 6},
    "analysis": {"free_run_steps": 60, "reference_steps": 300, "ads_repeats": 2, "max_lag": 20},
}


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    path = root / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def _files(d: Path) -> dict[str, bytes]:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def two_runs(tiny, tmp_path_factory):
    outs = []
    for k in range(2):
        out = tmp_path_factory.mktemp(f"run{k}")
        assert main(["run", "--config", str(tiny), "--seed", "3", "--out", str(out)]) == 0
        outs.append(out)
    return outs


def test_run_writes_expected_outputs(two_runs):
    names = set(_files(two_runs[0]))
    for name in ("config.json", "dataset.txt", "reference.csv", "classifier.ckpt", "model_w0.0.ckpt",
                 "model_w0.1.ckpt", "training_log.csv", "training.svg", "table.csv", "details.csv",
                 "periodicity.csv", "sigma.csv", "ngrams.csv", "trajectories.csv", "trajectories.svg",
                 "sigma.svg", "metrics.svg"):
        assert name in names, name
    table = (two_runs[0] / "table.csv").read_text().splitlines()
    assert table[0] == "metric,W=0.0,W=0.1"
    assert table[1].startswith("ADS,") and table[2].startswith("\"Tri-gram KL")
    assert (two_runs[0] / "details.csv").read_text().splitlines()[1].endswith(",e")


def test_run_is_byte_identical(two_runs):
    a, b = _files(two_runs[0]), _files(two_runs[1])
    assert a.keys() == b.keys()
    differing = [k for k in a if a[k] != b[k]]
    assert differing == []


def test_svgs_are_valid_xml(two_runs):
    for svg in two_runs[0].glob("*.svg"):
        assert ET.parse(svg).getroot().tag.endswith("svg")


def test_training_log_has_w_column(two_runs):
    lines = (two_runs[0] / "training_log.csv").read_text().splitlines()
    assert lines[0] == "W,epoch,L,L_z,L_x,mean_sigma,seconds"
    assert len(lines) == 1 + 2 * 15


def test_checkpoint_metadata(two_runs):
    params, spec, meta = load_checkpoint(two_runs[0] / "model_w0.1.ckpt")
    assert meta["w"] == 0.1 and meta["epoch"] == 15 and spec.layer_sizes == (6, 3)
    _, adam, _, _ = load_training_state(two_runs[0] / "model_w0.1.ckpt")
    assert adam.timestep == 15


def test_single_w_matches_sweep_member(tiny, two_runs, tmp_path):
    data = two_runs[0] / "dataset.txt"
    assert main(["train", "--config", str(tiny), "--seed", "3", "--dataset", str(data), "--w", "0.1",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "model_w0.1.ckpt").read_bytes() == (two_runs[0] / "model_w0.1.ckpt").read_bytes()


def test_resume_continues_exactly(tiny, two_runs, tmp_path):
    data = str(two_runs[0] / "dataset.txt")
    common = ["--config", str(tiny), "--seed", "3", "--dataset", data, "--w", "0.0"]
    assert main(["train", *common, "--epochs", "30", "--out", str(tmp_path / "full")]) == 0
    assert main(["train", *common, "--epochs", "15", "--out", str(tmp_path / "a")]) == 0
    assert main(["train", *common, "--epochs", "15", "--resume", str(tmp_path / "a" / "model_w0.0.ckpt"),
                 "--out", str(tmp_path / "b")]) == 0
    full, _, meta = load_checkpoint(tmp_path / "full" / "model_w0.0.ckpt")
    resumed, _, meta_b = load_checkpoint(tmp_path / "b" / "model_w0.0.ckpt")
    assert meta_b["epoch"] == 30
    for x, y in zip(full.blocks().values(), resumed.blocks().values()):
        assert np.array_equal(x, y)


def test_periodic_checkpoints_named_by_epoch(tiny, two_runs, tmp_path):
    cfg = dict(TINY, training=dict(TINY["training"], checkpoint_every=5))
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["train", "--config", str(path), "--dataset", str(two_runs[0] / "dataset.txt"), "--w", "0.0",
                 "--out", str(tmp_path)]) == 0
    for epoch in (5, 10, 15):
        assert load_checkpoint(tmp_path / f"model_w0.0_epoch{epoch}.ckpt")[2]["epoch"] == epoch


def test_generate_and_classify(tiny, two_runs, tmp_path):
    ckpt = str(two_runs[0] / "model_w0.0.ckpt")
    assert main(["generate", "--config", str(tiny), "--checkpoint", ckpt, "--mode", "free", "--steps", "30",
                 "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "generated.csv").read_text().splitlines()
    assert lines[0] == "sequence,step,x,y" and len(lines) == 1 + 2 * 30
    assert main(["classify", "--config", str(tiny), "--classifier", str(two_runs[0] / "classifier.ckpt"),
                 "--input", str(tmp_path / "generated.csv"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "labels.csv").read_text().splitlines()[0] == "sequence,step,x,y,label"


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--instances", "3", "--out", str(tmp_path)]) == 0
    assert "worst relative error" in capsys.readouterr().out
    assert len((tmp_path / "gradcheck.csv").read_text().splitlines()) == 4


def test_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("training:\n  epoch: 3\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "unknown config key" in capsys.readouterr().err
    assert main(["train", "--preset", "desk", "--dataset", str(tmp_path / "none.txt"), "--out", str(tmp_path)]) == 1
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a zip")
    assert main(["generate", "--preset", "desk", "--checkpoint", str(junk), "--mode", "free",
                 "--out", str(tmp_path)]) == 1
    assert "junk.ckpt" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["train", "--preset", "desk"])  # --dataset is required


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "vbprnn.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "synth" in proc.stdout


@pytest.mark.parametrize("count", [16, 128])
def test_synth_sequence_counts(tmp_path, count):
    assert main(["synth", "--preset", "desk", "--sequences", str(count), "--out", str(tmp_path)]) == 0
    ds = load_dataset(tmp_path / "dataset.txt")
    assert len(ds) == count and {r.step_count for r in ds.raw} == {400}


def test_u64_seed_and_resolved_config(tiny, tmp_path):
    seed = 2**64 - 1
    assert main(["synth", "--config", str(tiny), "--seed", str(seed), "--out", str(tmp_path)]) == 0
    resolved = json.loads((tmp_path / "config.json").read_text())
    assert resolved["seed"] == seed and resolved["network"]["layer_sizes"] == [6, 3]
    # the resolved file alone reproduces the run
    again = tmp_path / "again"
    assert main(["synth", "--config", str(tmp_path / "config.json"), "--out", str(again)]) == 0
    assert (again / "dataset.txt").read_bytes() == (tmp_path / "dataset.txt").read_bytes()
