import csv
import json
import math
import os

import numpy as np
import pytest

from airblow.cli import main
from airblow.env import EpisodeLog
from airblow.experiment import BLOW_COLOR, GRASP_COLOR, render_log
from airblow.perception import Raster, read_ppm, write_ppm

SMOKE = """\
task: NormalRect
seed: 3
episode: {max_grasp_steps: 1, blows_per_grasp: 1, resolution: 32, coverage_resolution: 64, cloth_grid: 8}
train: {pretrain_grasp_epochs: 1, pretrain_blow_epochs: 1, finetune_epochs: 2, episodes_per_epoch: 2,
        optim_steps: 2, blow_batch: 8, checkpoint_every: 2}
grasp_model: {widths: [4, 4, 4, 4]}
blow_model: {channels: [4, 4, 4, 4, 4, 4, 4]}
eval: {episodes: 2, policies: [learned, learned-fixed, heuristic, no-blow], save_images: true}
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("smoke")
    (d / "smoke.yaml").write_text(SMOKE)
    out = d / "run"
    assert main(["train", "--config", str(d / "smoke.yaml"), "--out", str(out)]) == 0
    return d, out


def test_train_writes_checkpoints_and_log(trained):
    _, out = trained
    names = set(os.listdir(out))
    assert {"checkpoint.bin", "checkpoint_0002.bin", "checkpoint_0004.bin", "config.yaml",
            "train_log.jsonl"} <= names
    recs = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["phase"] for r in recs if "phase" in r][:1] == ["pretrain-grasp"]


def test_eval_writes_table_and_logs(trained, capsys):
    d, out = trained
    assert main(["eval", "--config", str(d / "smoke.yaml"), "--out", str(out),
                 "--checkpoint", str(out / "checkpoint.bin")]) == 0
    printed = capsys.readouterr().out
    assert "no-blow" in printed
    rows = list(csv.DictReader(open(out / "results.csv")))
    assert [r["policy"] for r in rows] == ["learned", "learned-fixed", "heuristic", "no-blow"]
    assert os.path.isdir(out / "observations")
    for cell in ("learned", "no-blow"):
        text = (out / f"episodes_{cell}.jsonl").read_text()
        assert text.count('"kind": "summary"') == 2


def test_render_from_eval_output(trained, capsys):
    _, out = trained
    assert main(["render", "--log", str(out / "episodes_learned.jsonl"), "--episode", "1",
                 "--assets", str(out / "observations"), "--out", str(out / "render")]) == 0
    paths = capsys.readouterr().out.split()
    assert paths and all(os.path.exists(p) for p in paths)
    assert main(["render", "--log", str(out / "episodes_learned.jsonl"), "--episode", "9",
                 "--assets", str(out / "observations")]) == 2


def test_learned_eval_without_checkpoint_fails(trained):
    d, out = trained
    assert main(["eval", "--config", str(d / "smoke.yaml"), "--out", str(out / "nock")]) == 1


def test_bad_config_exit_code(tmp_path):
    (tmp_path / "bad.yaml").write_text("task: Shirt\n")
    assert main(["train", "--config", str(tmp_path / "bad.yaml"), "--out", str(tmp_path)]) == 2


def test_verify_passes(capsys):
    assert main(["verify"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5 and all(line.startswith("PASS") for line in lines)


def _asset(tmp_path, size=64):
    px = np.full((size, size, 3), 128, np.uint8)
    px[20:40, 20:40] = (200, 30, 30)
    write_ppm(tmp_path / "img.ppm", Raster(px, 1.0))
    import hashlib
    h = hashlib.sha256(px.tobytes()).hexdigest()
    os.rename(tmp_path / "img.ppm", tmp_path / f"{h}.ppm")
    return px, h


def test_zero_step_log_renders_nothing(tmp_path):
    log = EpisodeLog("NormalRect", 0, {}, 0.3, [], "center-off-cloth")
    assert render_log(log, str(tmp_path), str(tmp_path / "out")) == []
    assert os.listdir(tmp_path / "out") == []


def test_missing_asset_raises(tmp_path):
    log = EpisodeLog("NormalRect", 0, {}, 0.3, [{"index": 0, "obs_hash": "0" * 64}], "x")
    with pytest.raises(FileNotFoundError):
        render_log(log, str(tmp_path), str(tmp_path / "out"))


def test_overlay_pixels_exact(tmp_path):
    px, h = _asset(tmp_path)
    step = {"index": 0, "obs_hash": h, "pair": {"left_px": [10, 5], "right_px": [10, 20]},
            "blows": [{"action": {"px": 0.0, "rz": 0.0}, "coverage_before": 0.1, "coverage": 0.2,
                       "obs_hash": h}],
            "coverage_held": 0.2, "coverage_after": 0.2}
    log = EpisodeLog("NormalRect", 0, {}, 0.1, [step], None)
    out = render_log(log, str(tmp_path), str(tmp_path / "r"))
    assert [os.path.basename(p) for p in out] == ["step00_grasp.ppm", "step00_blow0.ppm"]

    g = read_ppm(out[0]).pixels
    changed = np.argwhere(np.any(g != px, axis=-1))
    expect = {(10, c) for c in range(5, 21)}
    assert {tuple(v) for v in changed} == expect
    assert np.all(g[10, 5:21] == GRASP_COLOR)

    # centre blow from grip (0, -0.42): nozzle at (0, -0.47), arrow 0.15 m along +y
    b = read_ppm(out[1]).pixels
    mpp = 1.1 / 64
    r0 = (-0.47 + 0.55) / mpp - 0.5
    r1 = (-0.32 + 0.55) / mpp - 0.5
    col = math.floor(0.55 / mpp - 0.5 + 0.5)
    rows = range(math.floor(r0 + 0.5), math.floor(r1 + 0.5) + 1)
    changed = np.argwhere(np.any(b != px, axis=-1))
    assert {tuple(v) for v in changed} == {(r, col) for r in rows}
    assert np.all(b[list(rows), col] == BLOW_COLOR)
