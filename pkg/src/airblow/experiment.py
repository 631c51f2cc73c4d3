"""Experiment orchestration: training phases, evaluation cells, results tables, image dumps."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .actions import BlowAction, blow_pose
from .checkpoint import load_checkpoint, save_checkpoint
from .config import POLICY_CELLS, ExperimentConfig
from .env import (EpisodeConfig, EpisodeLog, blow_gains, coverage_curve, obs_hash, run_episode, stream, task_by_name,
                  write_schema)
from .perception import Raster, read_ppm, render_topdown, write_ppm
from .policy import BlowScoreModel, GraspValueModel
from .train import (FixedBlowPolicy, HeuristicGraspPolicy, LearnedBlowPolicy, LearnedGraspPolicy, Learner,
                    RandomBlowPolicy, TrainSchedule, train_epoch)


def episode_config(cfg: ExperimentConfig, **overrides) -> EpisodeConfig:
    e = cfg.episode
    return EpisodeConfig(max_grasp_steps=e.max_grasp_steps, blows_per_grasp=e.blows_per_grasp,
                         resolution=e.resolution, coverage_resolution=e.coverage_resolution,
                         cloth_grid=e.cloth_grid, center_blow=e.center_blow, world=cfg.world, jet=cfg.jet,
                         stretch=cfg.stretch, **overrides)


def make_models(cfg: ExperimentConfig, seed: int):
    g = GraspValueModel(tuple(cfg.grasp_model.widths), seed=seed)
    b = BlowScoreModel(tuple(cfg.blow_model.channels), tuple(cfg.blow_model.strides), cfg.episode.resolution,
                       cfg.blow_model.action_hidden, cfg.blow_model.fusion_hidden, seed=seed + 1)
    return g, b


def schedule(cfg: ExperimentConfig) -> TrainSchedule:
    t = cfg.train
    return TrainSchedule(t.episodes_per_epoch, t.optim_steps, t.grasp_batch, t.blow_batch,
                         t.eps_start, t.eps_end, t.eps_decay_fraction)


class JsonlWriter:
    """Single writer per output file; each record is flushed as one line."""

    def __init__(self, path):
        self.fh = open(path, "w")

    def write(self, rec: dict) -> None:
        self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def run_training(cfg: ExperimentConfig, log=print) -> dict:
    """Pre-train each model against the other's heuristic, then fine-tune jointly.

    Writes ``train_log.jsonl``, periodic ``checkpoint_XXXX.bin`` and the
    final ``checkpoint.bin`` under ``cfg.out``.
    """
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config.yaml"), "w") as fh:
        fh.write(cfg.to_yaml())
    t = cfg.train
    gm, bm = make_models(cfg, cfg.seed)
    grasp = Learner.create(gm, t.lr, t.weight_decay, t.buffer_capacity)
    blow = Learner.create(bm, t.lr, t.weight_decay, t.buffer_capacity)
    task = task_by_name(cfg.task, cfg.edge_scale)
    ecfg = episode_config(cfg)
    sch = schedule(cfg)
    phases = [("pretrain-grasp", t.pretrain_grasp_epochs, grasp, None),
              ("pretrain-blow", t.pretrain_blow_epochs, None, blow),
              ("finetune", t.finetune_epochs, grasp, blow)]
    writer = JsonlWriter(os.path.join(cfg.out, "train_log.jsonl"))
    chash = cfg.hash()
    global_epoch = 0
    history = []
    try:
        for p_idx, (phase, n, g, b) in enumerate(phases):
            for e in range(n):
                st = train_epoch(task, ecfg, g, b, sch, e, n, cfg.seed + 1000 * p_idx, phase,
                                 cfg.grasp_model.rotations, cfg.blow_model.candidates)
                rec = {**st.to_record(), "global_epoch": global_epoch, "config_hash": chash}
                rec = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in rec.items()}
                writer.write(rec)
                history.append(rec)
                log(f"[{phase}] epoch {e}: eps {st.epsilon:.3f} coverage {st.mean_final_coverage:.3f} "
                    f"grasp loss {rec['grasp_loss']} blow loss {rec['blow_loss']}")
                global_epoch += 1
                if t.checkpoint_every and global_epoch % t.checkpoint_every == 0:
                    _save(cfg, grasp, blow, os.path.join(cfg.out, f"checkpoint_{global_epoch:04d}.bin"),
                          global_epoch)
    finally:
        writer.close()
    path = os.path.join(cfg.out, "checkpoint.bin")
    _save(cfg, grasp, blow, path, global_epoch)
    return {"checkpoint": path, "history": history}


def _save(cfg, grasp, blow, path, epoch):
    save_checkpoint(path, {"grasp": (grasp.model, grasp.opt), "blow": (blow.model, blow.opt)},
                    {"config_hash": cfg.hash(), "epoch": epoch, "task": cfg.task})


def make_policy_pair(cell: str, models: dict | None, cfg: ExperimentConfig):
    """Build the (grasp, blow) policies of an evaluation cell; learned cells need a checkpoint."""
    gname, bname = POLICY_CELLS[cell]
    if "learned" in (gname, bname):
        if not models:
            raise ValueError(f"policy cell {cell!r} needs a checkpoint with trained models")
    if gname == "learned":
        if "grasp" not in models:
            raise ValueError(f"checkpoint has no grasp model for cell {cell!r}")
        gp = LearnedGraspPolicy(models["grasp"][0], cfg.grasp_model.rotations)
    else:
        gp = HeuristicGraspPolicy()
    if bname == "learned":
        if "blow" not in models:
            raise ValueError(f"checkpoint has no blow model for cell {cell!r}")
        bp = LearnedBlowPolicy(models["blow"][0], cfg.blow_model.candidates)
    elif bname == "fixed":
        bp = FixedBlowPolicy()
    elif bname == "random":
        bp = RandomBlowPolicy()
    else:
        bp = None
    return gp, bp


def _eval_one(args):
    cfg, cell, models, index, keep = args
    task = task_by_name(cfg.task, cfg.edge_scale)
    gp, bp = make_policy_pair(cell, models, cfg)
    ecfg = episode_config(cfg, keep_observations=keep)
    return run_episode(task, gp, bp, ecfg, stream(cfg.seed, 2, index), seed=[cfg.seed, index])


def evaluate_cell(cfg: ExperimentConfig, cell: str, models: dict | None, episodes: int,
                  parallel: int = 1, keep_observations: bool = False) -> list[EpisodeLog]:
    """Seeded evaluation; episode ``i`` uses the same stream for every cell, so cells see the same cloths."""
    jobs = [(cfg, cell, models, i, keep_observations) for i in range(episodes)]
    if parallel > 1:
        with ProcessPoolExecutor(parallel) as ex:
            return list(ex.map(_eval_one, jobs))
    return [_eval_one(j) for j in jobs]


@dataclass
class ResultRow:
    task: str
    policy: str
    n: int
    final_mean: float
    final_std: float
    delta_mean: float
    delta_std: float
    config_hash: str

    @property
    def cell(self) -> str:
        return f"{100 * self.final_mean:.1f} / {100 * self.delta_mean:.1f}"


class ResultsTable:
    """Per-(task, policy) means and standard deviations, derived only from episode logs."""

    COLUMNS = ["task", "policy", "n", "final / delta", "final_mean", "final_std", "delta_mean", "delta_std",
               "config_hash"]

    def __init__(self):
        self.rows: list[ResultRow] = []

    def add(self, task: str, policy: str, logs, config_hash: str) -> ResultRow:
        if self.rows and self.rows[0].config_hash != config_hash:
            raise ValueError("refusing to aggregate results from different configurations")
        if not logs:
            raise ValueError("no logs to aggregate")
        f = np.array([l.final_coverage for l in logs])
        d = np.array([l.delta_coverage for l in logs])
        row = ResultRow(task, policy, len(logs), float(f.mean()), float(f.std()), float(d.mean()), float(d.std()),
                        config_hash)
        self.rows.append(row)
        return row

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r.task, r.policy, r.n, r.cell, f"{r.final_mean:.6f}", f"{r.final_std:.6f}",
                            f"{r.delta_mean:.6f}", f"{r.delta_std:.6f}", r.config_hash])

    def format(self) -> str:
        lines = [f"{'task':<12} {'policy':<24} {'final / delta':>15}"]
        for r in self.rows:
            lines.append(f"{r.task:<12} {r.policy:<24} {r.cell:>15}")
        return "\n".join(lines)


def run_eval(cfg: ExperimentConfig, checkpoint: str | None, log=print) -> ResultsTable:
    """Evaluate every configured policy cell and write table, curves, logs and optional images."""
    models = None
    if checkpoint:
        models, meta = load_checkpoint(checkpoint)
        if not models:
            raise ValueError(f"checkpoint {checkpoint} contains no models")
    os.makedirs(cfg.out, exist_ok=True)
    write_schema(os.path.join(cfg.out, "episode_log.schema.json"))
    chash = cfg.hash()
    table = ResultsTable()
    curves = {}
    for cell in cfg.eval.policies:
        logs = evaluate_cell(cfg, cell, models, cfg.eval.episodes, cfg.parallel, cfg.eval.save_images)
        with open(os.path.join(cfg.out, f"episodes_{cell}.jsonl"), "w") as fh:
            for log_ in logs:
                fh.write(log_.to_jsonl())
        if cfg.eval.save_images:
            dump_observations(logs, os.path.join(cfg.out, "observations"))
        row = table.add(cfg.task, cell, logs, chash)
        curves[cell] = coverage_curve(logs, cfg.episode.max_grasp_steps)
        gains = blow_gains(logs)
        log(f"{cell:<24} {row.cell}  blow gains {np.round(100 * gains, 2).tolist()}")
    table.write_csv(os.path.join(cfg.out, "results.csv"))
    with open(os.path.join(cfg.out, "curves.csv"), "w") as fh:
        fh.write("policy," + ",".join(f"step{i + 1}" for i in range(cfg.episode.max_grasp_steps)) + "\n")
        for cell, c in curves.items():
            fh.write(cell + "," + ",".join(f"{v:.6f}" for v in c) + "\n")
    return table


def dump_observations(logs, directory) -> None:
    """Write kept observations as content-addressed PPM files named by their hash."""
    os.makedirs(directory, exist_ok=True)
    for log_ in logs:
        for o in log_.observations:
            _write_obs(directory, o["raw"] if o["kind"] == "grasp" else o["obs"])


def _write_obs(directory, pixels) -> str:
    h = obs_hash(pixels)
    path = os.path.join(directory, f"{h}.ppm")
    if not os.path.exists(path):
        write_ppm(path, Raster(pixels, 1.0))
    return path


GRASP_COLOR = (255, 255, 255)
BLOW_COLOR = (0, 0, 0)


def draw_segment(pixels: np.ndarray, a, b, color) -> None:
    """Rasterise the segment between pixel centres ``a`` and ``b`` (row, col), endpoints included."""
    (r0, c0), (r1, c1) = a, b
    n = int(math.ceil(max(abs(r1 - r0), abs(c1 - c0)))) + 1
    for t in np.linspace(0.0, 1.0, max(n, 2)):
        r = int(math.floor(r0 + t * (r1 - r0) + 0.5))
        c = int(math.floor(c0 + t * (c1 - c0) + 0.5))
        if 0 <= r < pixels.shape[0] and 0 <= c < pixels.shape[1]:
            pixels[r, c] = color


def render_log(log: EpisodeLog, assets: str, out_dir: str, side: float = 1.1,
               grip=(0.0, -0.42, 0.10)) -> list[str]:
    """Overlay logged actions on stored observations; one image per grasp and per blow."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for s in log.steps:
        img = _load_obs(assets, s["obs_hash"])
        px = img.pixels.copy()
        if "pair" in s:
            draw_segment(px, s["pair"]["left_px"], s["pair"]["right_px"], GRASP_COLOR)
        path = os.path.join(out_dir, f"step{s['index']:02d}_grasp.ppm")
        write_ppm(path, Raster(px, img.meters_per_pixel))
        written.append(path)
        for i, b in enumerate(s.get("blows", [])):
            img = _load_obs(assets, b["obs_hash"])
            px = img.pixels.copy()
            mpp = side / px.shape[0]
            pose = blow_pose(BlowAction(b["action"]["px"], b["action"]["rz"]), grip)
            o = pose.origin
            tip = o + 0.15 * pose.axis / np.linalg.norm(pose.axis[:2])
            to_rc = lambda p: ((p[1] + side / 2) / mpp - 0.5, (p[0] + side / 2) / mpp - 0.5)
            draw_segment(px, to_rc(o), to_rc(tip), BLOW_COLOR)
            path = os.path.join(out_dir, f"step{s['index']:02d}_blow{i}.ppm")
            write_ppm(path, Raster(px, mpp))
            written.append(path)
    return written


def _load_obs(assets, h) -> Raster:
    path = os.path.join(assets, f"{h}.ppm")
    if not os.path.exists(path):
        raise FileNotFoundError(f"observation {h} not found under {assets}")
    return read_ppm(path)
