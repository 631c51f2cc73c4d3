"""Fast invariant and gradient checks behind ``airblow verify``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .actions import BlowAction
from .env import NormalRect, metric_normalized_area, metric_success_rate
from .jet import JetConfig, JetPose, air_step, emit_cone
from .perception import WorkspaceSpec, cloth_mask, coverage, render_topdown
from .policy import BlowScoreModel, GraspValueModel, Transition, mse_backward
from .sim import BEND, WorldConfig, build_rect_cloth, crumple, spring_strain


@dataclass
class Check:
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.detail}"


def finite_difference_error(model, batch, h: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients over all parameters."""
    _, g = mse_backward(model, batch)
    p0 = model.params.copy()
    labels = np.array([t.label for t in batch])
    worst = 0.0
    for i in range(p0.size):
        vals = []
        for s in (1.0, -1.0):
            q = p0.copy()
            q[i] += s * h
            model.set_params(q)
            vals.append(np.mean((model.predict(batch) - labels) ** 2))
        num = (vals[0] - vals[1]) / (2 * h)
        denom = max(abs(num) + abs(g[i]), 1e-8)
        worst = max(worst, abs(num - g[i]) / denom)
    model.set_params(p0)
    return worst


def small_models(seed: int = 0):
    g = GraspValueModel((2, 2, 2, 2), np.float64, seed)
    b = BlowScoreModel((2,) * 7, resolution=16, action_hidden=4, fusion_hidden=4, dtype=np.float64, seed=seed + 1)
    return g, b


def random_batches(rng, n: int = 4, size: int = 16):
    img = lambda: rng.integers(0, 256, (size, size, 3)).astype(np.uint8)
    gb = [Transition(img(), (0, int(rng.integers(size)), int(rng.integers(size))), float(rng.uniform()))
          for _ in range(n)]
    bb = [Transition(img(), BlowAction(float(rng.uniform(-0.1, 0.1)), float(rng.uniform(-30, 30))),
                     float(rng.uniform())) for _ in range(n)]
    return gb, bb


def check_gradients(seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    g, b = small_models(seed)
    gb, bb = random_batches(rng)
    eg, eb = finite_difference_error(g, gb), finite_difference_error(b, bb)
    return Check("gradients", max(eg, eb) <= 1e-3,
                 f"grasp {g.n_params} params rel err {eg:.2e}; blow {b.n_params} params rel err {eb:.2e}")


def crumpled_state(seed: int, grid: int = 11):
    rng = np.random.default_rng(seed)
    spec = NormalRect().sample(rng)
    cloth = build_rect_cloth(spec["width"], spec["height"], grid, spec["mass"])
    crumple(WorldConfig(), cloth, rng)
    return cloth


def check_simulation(runs: int = 5) -> Check:
    bad, strains = 0, []
    for s in range(runs):
        c = crumpled_state(s)
        again = crumpled_state(s)
        ok = np.isfinite(c.pos).all() and c.pos[:, 2].min() >= -1e-4 and np.array_equal(c.pos, again.pos)
        bad += not ok
        strains.append(spring_strain(c)[c.family != BEND].mean())
    m = float(np.mean(strains))
    return Check("simulation", bad == 0 and m < 0.05, f"{runs} runs, {bad} bad, mean in-plane strain {m:.4f}")


def check_jet(emissions: int = 1000) -> Check:
    cfg = JetConfig()
    rng = np.random.default_rng(0)
    pose = JetPose([0.0, -0.47, 0.03], [0.0, math.cos(math.radians(-10)), math.sin(math.radians(-10))])
    cos_half = math.cos(cfg.half_angle)
    bad = 0
    for _ in range(emissions):
        st = emit_cone(pose, cfg, rng)
        sp = np.linalg.norm(st.vel, axis=1)
        inside = st.vel @ pose.axis / sp >= cos_half - 1e-12
        bad += len(st) != cfg.particles_per_step or np.abs(sp - cfg.emission_speed).max() > 1e-12 or not inside.all()
    # every air-cloth event hands the cloth exactly the momentum the air loses
    cloth = build_rect_cloth(0.5, 0.5, 6, 0.5)
    cloth.pos[:, 2] = 0.1
    st = emit_cone(JetPose([0.0, 0.0, 0.2], [0.0, 0.0, -1.0]), cfg, rng)
    st.pos[:, 2] = 0.1 + 0.02    # one step away from the sheet at 5 m/s
    res = air_step(WorldConfig(), cloth, st, cfg)
    err = float(np.abs(res.impulses.sum(axis=0) + res.events[:, 1:].sum(axis=0)).max())
    if len(res.events) == 0:
        err = float("inf")
    return Check("jet", bad == 0 and err < 1e-6, f"{emissions} emissions, {bad} bad; {len(res.events)} hits, momentum error {err:.1e}")


def check_coverage() -> Check:
    cloth = build_rect_cloth(0.6, 0.5, 13, 1.0)
    flat = coverage(cloth_mask(render_topdown(cloth, WorkspaceSpec(), 256)), cloth)
    fold = cloth.copy()
    top = fold.pos[:, 1] > 0
    fold.pos[top, 1] *= -1
    fold.pos[top, 2] = 0.005
    half = coverage(cloth_mask(render_topdown(fold, WorkspaceSpec(), 256)), fold)
    return Check("coverage", 0.98 <= flat <= 1.02 and 0.47 <= half <= 0.53, f"flat {flat:.4f}, half fold {half:.4f}")


def check_metrics() -> Check:
    p = metric_success_rate([5, 3], 4)
    a = metric_normalized_area([5, 3], 4)
    return Check("metrics", p == 0.5 and a == 0.875, f"p={p}, A={a}")


def run_all(quick: bool = True) -> list[Check]:
    return [check_gradients(), check_simulation(3 if quick else 20), check_jet(200 if quick else 10000),
            check_coverage(), check_metrics()]
