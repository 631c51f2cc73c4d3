"""Cloth-unfolding episodes: task generators, the rollout loop, labels and metrics."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import actions as act
from .actions import BlowAction, GraspLine, GraspPair, Reject
from .jet import JetConfig, blow
from .perception import WorkspaceSpec, cloth_mask, coverage, random_cloth_color, render_topdown
from .policy import Transition
from .sim import StretchConfig, WorldConfig, build_rect_cloth, crumple, grasp_and_stretch, release

LOG_SCHEMA_VERSION = 1
GRASP_UNREACHABLE = "grasp-unreachable"


@dataclass(frozen=True)
class TaskSpec:
    family: str
    edge_range: tuple
    mass_range: tuple = (0.2, 2.0)
    stiffness: tuple = (0.8, 1.0, 0.9)     # stretch, bend, shear

    def __post_init__(self):
        lo, hi = self.edge_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad edge range {self.edge_range}")
        if not 0 < self.mass_range[0] <= self.mass_range[1]:
            raise ValueError(f"bad mass range {self.mass_range}")

    def sample(self, rng: np.random.Generator) -> dict:
        w, h = rng.uniform(*self.edge_range, size=2)
        return {"width": float(w), "height": float(h), "mass": float(rng.uniform(*self.mass_range)),
                "color": random_cloth_color(rng)}


def NormalRect() -> TaskSpec:
    return TaskSpec("NormalRect", (0.4, 0.7))


def LargeRect() -> TaskSpec:
    return TaskSpec("LargeRect", (0.4, 0.75))


def XLargeRect() -> TaskSpec:
    return TaskSpec("XLargeRect", (0.8, 0.95))


TASKS = {"NormalRect": NormalRect, "LargeRect": LargeRect, "XLargeRect": XLargeRect}


def task_by_name(name: str, edge_scale: float = 1.0) -> TaskSpec:
    if name not in TASKS:
        raise KeyError(f"unknown task family {name!r}; expected one of {sorted(TASKS)}")
    t = TASKS[name]()
    if edge_scale != 1.0:
        t = TaskSpec(t.family, tuple(v * edge_scale for v in t.edge_range), t.mass_range, t.stiffness)
    return t


@dataclass
class EpisodeConfig:
    max_grasp_steps: int = 5
    blows_per_grasp: int = 4
    resolution: int = 64
    coverage_resolution: int = 128
    cloth_grid: int = 11
    center_blow: bool = True
    keep_observations: bool = False
    world: WorldConfig = field(default_factory=WorldConfig)
    jet: JetConfig = field(default_factory=JetConfig)
    stretch: StretchConfig = field(default_factory=StretchConfig)

    def __post_init__(self):
        if self.max_grasp_steps < 1 or self.blows_per_grasp < 1:
            raise ValueError("step limits must be >= 1")
        if self.resolution < 32 or self.coverage_resolution < 32:
            raise ValueError("raster resolutions must be >= 32")


@dataclass
class MetricConfig:
    n: int
    area_threshold: float

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("N must be >= 1")
        if self.area_threshold <= 0:
            raise ValueError("area threshold must be positive")


@dataclass
class GraspChoice:
    """What a grasp policy decided. Learned policies also fill the rotated-frame action."""
    line: GraspLine | None = None
    pair: GraspPair | Reject | None = None
    rotation: int | None = None
    pixel: tuple | None = None
    obs: np.ndarray | None = None


@dataclass
class EpisodeLog:
    task: str
    seed: object
    cloth: dict
    initial_coverage: float
    steps: list = field(default_factory=list)
    terminated_by: str | None = None
    wall_time: float = 0.0
    observations: list = field(default_factory=list, repr=False)

    @property
    def final_coverage(self) -> float:
        return self.coverages()[-1]

    @property
    def delta_coverage(self) -> float:
        return self.final_coverage - self.initial_coverage

    @property
    def executed(self) -> int:
        return sum(1 for s in self.steps if "reject" not in s)

    def coverages(self) -> list:
        return [self.initial_coverage] + [s["coverage_after"] for s in self.steps if "reject" not in s]

    def summary(self, include_timing: bool = False) -> dict:
        out = {"kind": "summary", "schema": LOG_SCHEMA_VERSION, "task": self.task, "seed": self.seed,
               "cloth": self.cloth, "initial_coverage": self.initial_coverage,
               "final_coverage": self.final_coverage, "delta_coverage": self.delta_coverage,
               "steps_executed": self.executed, "terminated_by": self.terminated_by}
        if include_timing:
            out["wall_time"] = self.wall_time
        return out

    def to_jsonl(self, include_timing: bool = False) -> str:
        """One record per step, then the summary. Timing is opt-in so replays compare byte-exactly."""
        lines = [json.dumps({"kind": "step", **s}, sort_keys=True) for s in self.steps]
        lines.append(json.dumps(self.summary(include_timing), sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "EpisodeLog":
        recs = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not recs or recs[-1].get("kind") != "summary":
            raise ValueError("episode log must end with a summary record")
        summ = recs[-1]
        if summ.get("schema") != LOG_SCHEMA_VERSION:
            raise ValueError(f"unsupported log schema {summ.get('schema')}")
        steps = []
        for r in recs[:-1]:
            r = dict(r)
            if r.pop("kind", None) != "step":
                raise ValueError("malformed step record")
            steps.append(r)
        return cls(summ["task"], summ["seed"], summ["cloth"], summ["initial_coverage"], steps,
                   summ["terminated_by"], summ.get("wall_time", 0.0))


LOG_SCHEMA = {
    "version": LOG_SCHEMA_VERSION,
    "step": {
        "kind": "'step'",
        "index": "int, grasp step index from 0",
        "obs_hash": "sha256 hex of the observation raster bytes",
        "grasp": "grasp action record (line centre/angle and/or rotation index and pixel)",
        "reject": "present only when the step was rejected; reason string",
        "pair": "grasp points L and R in metres with their pixels",
        "coverage_before": "coverage before the grasp",
        "blows": "list of {action, coverage_before, coverage, obs_hash}; coverages of the held cloth around the blow",
        "coverage_held": "coverage of the held cloth after the final blow",
        "coverage_after": "coverage after release and settle",
    },
    "summary": {
        "kind": "'summary'", "schema": "int", "task": "family name", "seed": "episode seed",
        "cloth": "sampled width, height, mass, colour", "initial_coverage": "after crumple",
        "final_coverage": "after last executed step", "delta_coverage": "final - initial",
        "steps_executed": "int", "terminated_by": "reject reason or null",
        "wall_time": "seconds, only when timing is requested",
    },
}


def write_schema(path) -> None:
    with open(path, "w") as fh:
        json.dump(LOG_SCHEMA, fh, indent=2, sort_keys=True)
        fh.write("\n")


def obs_hash(pixels: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(pixels).tobytes()).hexdigest()


def _round(x: float) -> float:
    return float(round(float(x), 10))


def measure(cloth, res: int) -> float:
    return coverage(cloth_mask(render_topdown(cloth, WorkspaceSpec(), res)), cloth)


def resolve_grasp(choice, mask, raster):
    """Turn a policy decision into a ``GraspPair`` or ``Reject``."""
    if isinstance(choice, GraspLine):
        choice = GraspChoice(line=choice)
    elif isinstance(choice, (GraspPair, Reject)):
        choice = GraspChoice(pair=choice)
    if choice.pair is not None:
        return choice, choice.pair
    return choice, act.edge_coincident_grasp(mask, choice.line, raster.height_map, raster.origin)


def _grasp_record(choice: GraspChoice) -> dict:
    rec = {}
    if choice.line is not None:
        rec["line"] = {"row": _round(choice.line.row), "col": _round(choice.line.col),
                       "angle": _round(choice.line.angle)}
    if choice.rotation is not None:
        rec["rotation"] = int(choice.rotation)
        rec["pixel"] = [int(v) for v in choice.pixel]
    return rec


def run_episode(task: TaskSpec, grasp_policy, blow_policy, cfg: EpisodeConfig,
                rng: np.random.Generator, seed=None) -> EpisodeLog:
    """Crumple a sampled cloth, then up to ``max_grasp_steps`` grasp-blow-release cycles.

    ``blow_policy=None`` skips blowing entirely (grasp, lay out, release).
    A rejected grasp ends the episode and is recorded as a step without
    coverage. Simulation errors propagate with the partial log attached as
    ``err.episode_log``.
    """
    t0 = time.perf_counter()
    spec = task.sample(rng)
    stiff = dict(zip(("stretch", "bend", "shear"), task.stiffness))
    cloth = build_rect_cloth(spec["width"], spec["height"], cfg.cloth_grid, spec["mass"], stiff, spec["color"])
    crumple(cfg.world, cloth, rng)
    cloth_rec = {"width": _round(spec["width"]), "height": _round(spec["height"]),
                 "mass": _round(spec["mass"]), "color": list(spec["color"])}
    log = EpisodeLog(task.family, seed, cloth_rec, _round(measure(cloth, cfg.coverage_resolution)))
    try:
        _rollout(log, cloth, grasp_policy, blow_policy, cfg, rng)
    except Exception as err:
        err.episode_log = log
        raise
    log.wall_time = time.perf_counter() - t0
    return log


def _rollout(log, cloth, grasp_policy, blow_policy, cfg, rng):
    ws = WorkspaceSpec()
    cov = log.initial_coverage
    for step in range(cfg.max_grasp_steps):
        raster = render_topdown(cloth, ws, cfg.resolution)
        mask = cloth_mask(raster)
        rec = {"index": step, "obs_hash": obs_hash(raster.pixels), "coverage_before": cov}
        choice, pair = resolve_grasp(grasp_policy(raster, mask, rng), mask, raster)
        rec["grasp"] = _grasp_record(choice)
        if cfg.keep_observations:
            log.observations.append({"kind": "grasp", "step": step, "obs": choice.obs, "raw": raster.pixels,
                                     "rotation": choice.rotation, "pixel": choice.pixel})
        if isinstance(pair, Reject):
            rec["reject"] = pair.reason
            log.steps.append(rec)
            log.terminated_by = pair.reason
            return
        rec["pair"] = pair.to_record()
        rec["pair"]["left"] = [_round(v) for v in rec["pair"]["left"]]
        rec["pair"]["right"] = [_round(v) for v in rec["pair"]["right"]]
        try:
            cloth, pins = grasp_and_stretch(cfg.world, cloth, pair, cfg=cfg.stretch)
        except ValueError:
            rec["reject"] = GRASP_UNREACHABLE
            log.steps.append(rec)
            log.terminated_by = GRASP_UNREACHABLE
            return
        grip = np.mean([p.target for p in pins], axis=0)
        blows = []
        if blow_policy is not None:
            if cfg.center_blow:
                blow(cfg.world, cloth, pins, act.blow_pose(act.heuristic_blow(), grip), cfg.jet, rng)
            for b in range(cfg.blows_per_grasp):
                held = render_topdown(cloth, ws, cfg.resolution)
                before = _round(measure(cloth, cfg.coverage_resolution))
                action = blow_policy(held, rng)
                blow(cfg.world, cloth, pins, act.blow_pose(action, grip), cfg.jet, rng)
                c = _round(measure(cloth, cfg.coverage_resolution))
                blows.append({"action": {k: _round(v) for k, v in action.to_record().items()},
                              "coverage_before": before, "coverage": c, "obs_hash": obs_hash(held.pixels)})
                if cfg.keep_observations:
                    log.observations.append({"kind": "blow", "step": step, "index": b,
                                             "obs": held.pixels, "action": action})
        rec["blows"] = blows
        rec["coverage_held"] = _round(measure(cloth, cfg.coverage_resolution))
        release(cfg.world, cloth)
        cov = _round(measure(cloth, cfg.coverage_resolution))
        rec["coverage_after"] = cov
        log.steps.append(rec)


def label_transitions(log: EpisodeLog):
    """Grasp transitions labelled with the held coverage after the final blow; blows with coverage after each blow.

    Observations attached to the log (``keep_observations``) are joined in
    when present; otherwise ``obs`` is None.
    """
    grasps, blows = [], []
    obs = {}
    for o in log.observations:
        key = (o["kind"], o["step"], o.get("index"))
        obs[key] = o
    for s in log.steps:
        if "reject" in s:
            continue
        if "coverage_held" not in s or "blows" not in s:
            raise ValueError(f"malformed step record {s.get('index')}")
        g = obs.get(("grasp", s["index"], None))
        gaction = None
        if "rotation" in s["grasp"]:
            gaction = (s["grasp"]["rotation"], *s["grasp"]["pixel"])
        glabel = s["blows"][-1]["coverage"] if s["blows"] else s["coverage_held"]
        grasps.append(Transition(g["obs"] if g else None, gaction, glabel))
        for i, b in enumerate(s["blows"]):
            o = obs.get(("blow", s["index"], i))
            action = o["action"] if o else BlowAction(b["action"]["px"], b["action"]["rz"])
            blows.append(Transition(o["obs"] if o else None, action, b["coverage"]))
    return grasps, blows


def metric_success_rate(areas, cfg: MetricConfig | float) -> float:
    a = np.asarray(areas, dtype=np.float64)
    if a.size == 0:
        raise ValueError("no areas given")
    thr = cfg.area_threshold if isinstance(cfg, MetricConfig) else float(cfg)
    return float(np.sum(a >= thr)) / a.size


def metric_normalized_area(areas, cfg: MetricConfig | float) -> float:
    a = np.asarray(areas, dtype=np.float64)
    if a.size == 0:
        raise ValueError("no areas given")
    thr = cfg.area_threshold if isinstance(cfg, MetricConfig) else float(cfg)
    if thr <= 0:
        raise ValueError("area threshold must be positive")
    return float(np.sum(np.minimum(a / thr, 1.0))) / a.size


def coverage_curve(logs, max_steps: int | None = None) -> list:
    """Mean coverage after each grasp step; finished episodes carry their last value forward.

    Index 0 is the first executed step.
    """
    if not logs:
        raise ValueError("no logs")
    seqs = [log.coverages()[1:] or [log.initial_coverage] for log in logs]
    n = max_steps if max_steps is not None else max(len(s) for s in seqs)
    padded = np.array([(s + [s[-1]] * n)[:n] for s in seqs], dtype=np.float64)
    return padded.mean(axis=0).tolist()


def blow_gains(logs) -> np.ndarray:
    """Per-blow coverage gains averaged over every executed grasp step; column i is blow i+1."""
    rows = []
    for log in logs:
        for s in log.steps:
            if "reject" in s or not s.get("blows"):
                continue
            rows.append([b["coverage"] - b["coverage_before"] for b in s["blows"]])
    if not rows:
        return np.zeros(0)
    return np.mean(rows, axis=0)


def stream(root_seed: int, *keys: int) -> np.random.Generator:
    """Counter-based split: the same (root, keys) always yields the same independent generator."""
    ss = np.random.SeedSequence(int(root_seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
