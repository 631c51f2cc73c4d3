"""Policies (heuristic, fixed, learned) and the collect-then-optimise training epoch."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import actions as act
from .actions import BlowAction, GraspLine
from .env import EpisodeConfig, GraspChoice, TaskSpec, label_transitions, run_episode, stream
from .perception import cloth_mask, rotation_stack
from .sim import SimulationError
from .policy import (AdamState, BlowScoreModel, GraspValueModel, ReplayBuffer, adam_step, epsilon_schedule,
                     image_input, mse_backward, select_epsilon_greedy)


class HeuristicGraspPolicy:
    name = "heuristic"

    def __call__(self, raster, mask, rng):
        return GraspChoice(pair=act.heuristic_grasp(mask, rng, raster.height_map, raster.origin))


class LearnedGraspPolicy:
    """Scores every pixel of every rotation; argmax (or exploration) picks the line."""
    name = "learned"

    def __init__(self, model: GraspValueModel, rotations: int = 8, epsilon: float = 0.0):
        self.model, self.rotations, self.epsilon = model, rotations, epsilon

    def scores(self, raster):
        views = rotation_stack(raster, self.rotations)
        x = image_input(np.stack([v.raster.pixels for v in views]), self.model.dtype)
        return views, self.model.forward(x)

    def __call__(self, raster, mask, rng):
        views, s = self.scores(raster)
        valid = np.stack([cloth_mask(v.raster).data for v in views])
        idx = select_epsilon_greedy(s, self.epsilon, rng, valid)
        k, r, c = np.unravel_index(idx, s.shape)
        row, col = views[k].to_original((float(r), float(c)))
        line = GraspLine(float(row), float(col), float(views[k].angle))
        return GraspChoice(line=line, rotation=int(k), pixel=(int(r), int(c)), obs=views[k].raster.pixels)


class FixedBlowPolicy:
    name = "fixed"

    def __init__(self, action: BlowAction = BlowAction(0.0, 0.0)):
        self.action = action

    def __call__(self, raster, rng):
        return self.action


class RandomBlowPolicy:
    name = "random"

    def __call__(self, raster, rng):
        return act.sample_blow_actions(1, rng)[0]


class LearnedBlowPolicy:
    """Samples M candidate actions, scores them against the image, keeps the best."""
    name = "learned"

    def __init__(self, model: BlowScoreModel, candidates: int = 64, epsilon: float = 0.0):
        self.model, self.candidates, self.epsilon = model, candidates, epsilon

    def __call__(self, raster, rng):
        cands = act.sample_blow_actions(self.candidates, rng)
        x = image_input(raster.pixels, self.model.dtype)
        a = np.stack([c.normalized() for c in cands])
        s = self.model.forward(x, a, np.zeros(len(cands), dtype=np.int64))
        return cands[select_epsilon_greedy(s, self.epsilon, rng)]


@dataclass
class TrainSchedule:
    episodes_per_epoch: int = 32
    optim_steps: int = 64
    grasp_batch: int = 16
    blow_batch: int = 128
    eps_start: float = 0.5
    eps_end: float = 0.05
    eps_decay_fraction: float = 0.5


@dataclass
class Learner:
    """A model with its optimiser state and replay buffer."""
    model: object
    opt: AdamState
    buffer: ReplayBuffer

    @classmethod
    def create(cls, model, lr: float = 1e-4, weight_decay: float = 1e-6, capacity: int = 30000):
        return cls(model, AdamState.for_params(model.params, lr=lr, weight_decay=weight_decay),
                   ReplayBuffer(capacity))

    def optimise(self, steps: int, batch_size: int, rng) -> float:
        if len(self.buffer) == 0:
            return float("nan")
        losses = []
        for _ in range(steps):
            loss, grad = mse_backward(self.model, self.buffer.sample(batch_size, rng))
            adam_step(self.opt, self.model.params, grad)
            losses.append(loss)
        return float(np.mean(losses))


@dataclass
class EpochStats:
    epoch: int
    phase: str
    epsilon: float
    mean_final_coverage: float
    mean_delta_coverage: float
    grasp_loss: float
    blow_loss: float
    grasp_transitions: int
    blow_transitions: int
    failed_episodes: int = 0

    def to_record(self) -> dict:
        return dict(self.__dict__)


def build_policies(grasp: Learner | None, blow: Learner | None, rotations: int = 8, candidates: int = 64):
    gp = LearnedGraspPolicy(grasp.model, rotations) if grasp is not None else HeuristicGraspPolicy()
    bp = LearnedBlowPolicy(blow.model, candidates) if blow is not None else FixedBlowPolicy()
    return gp, bp


def train_epoch(task: TaskSpec, cfg: EpisodeConfig, grasp: Learner | None, blow: Learner | None,
                schedule: TrainSchedule, epoch: int, total_epochs: int, seed: int, phase: str = "train",
                rotations: int = 8, candidates: int = 64) -> EpochStats:
    """Collect episodes with epsilon-greedy learned policies, then optimise each learner.

    A ``None`` learner is replaced by its heuristic counterpart and is not
    trained. Episode ``i`` of epoch ``e`` draws from ``stream(seed, 0, e, i)``.
    """
    eps = epsilon_schedule(epoch, total_epochs, schedule.eps_start, schedule.eps_end,
                           schedule.eps_decay_fraction)
    gp, bp = build_policies(grasp, blow, rotations, candidates)
    for p in (gp, bp):
        if hasattr(p, "epsilon"):
            p.epsilon = eps
    collect = EpisodeConfig(**{**cfg.__dict__, "keep_observations": True})
    finals, deltas, n_g, n_b, failed = [], [], 0, 0, 0
    for i in range(schedule.episodes_per_epoch):
        try:
            log = run_episode(task, gp, bp, collect, stream(seed, 0, epoch, i), seed=[seed, epoch, i])
        except SimulationError:
            # a diverged rollout has no trustworthy labels; drop it rather than stop training
            failed += 1
            continue
        finals.append(log.final_coverage)
        deltas.append(log.delta_coverage)
        gt, bt = label_transitions(log)
        if grasp is not None:
            for t in gt:
                if t.action is not None and t.obs is not None:
                    grasp.buffer.push(t)
                    n_g += 1
        if blow is not None:
            for t in bt:
                if t.obs is not None:
                    blow.buffer.push(t)
                    n_b += 1
    rng = stream(seed, 1, epoch)
    gl = grasp.optimise(schedule.optim_steps, schedule.grasp_batch, rng) if grasp is not None else float("nan")
    bl = blow.optimise(schedule.optim_steps, schedule.blow_batch, rng) if blow is not None else float("nan")
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")
    return EpochStats(epoch, phase, float(eps), mean(finals), mean(deltas), gl, bl, n_g, n_b, failed)
