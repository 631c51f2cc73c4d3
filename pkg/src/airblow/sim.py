"""Spring-mass cloth dynamics.

The cloth is a regular grid of point masses joined by three spring families.
Integration is semi-implicit (symplectic) Euler with a fixed number of
substeps per step, exponential velocity damping and a frictional table plane
at z = 0.  The hot loop lives in a numba kernel; everything else is numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

STRETCH, BEND, SHEAR = 0, 1, 2
FAMILY_NAMES = ("stretch", "bend", "shear")

# nominal material stiffness, kg/s^2
DEFAULT_STIFFNESS = {"stretch": 0.8, "bend": 1.0, "shear": 0.9}


class SimulationError(RuntimeError):
    """Raised when the integrator produces non-finite state."""


@dataclass
class WorldConfig:
    gravity: float = 9.8
    dt: float = 1.0 / 180.0
    substeps: int = 8
    damping: float = 1.0
    spring_damping: float = 0.02
    friction: float = 0.4
    restitution: float = 0.0
    z_tolerance: float = 1e-4
    # maps nominal stiffness to a spring constant: k = s * scale * m_particle / rest^2
    stiffness_scale: float = 600.0
    # bending springs get this fraction of stiffness_scale; cloth folds are held by friction
    bend_scale: float = 1e-3
    # springs are softer in compression so the cloth buckles instead of standing up
    compression_scale: float = 0.1
    # cloth rests this far above the table (fabric thickness); air can pass beneath
    contact_offset: float = 0.0
    # a finite state moving faster than this has diverged (jet air itself travels at 5 m/s)
    max_speed: float = 50.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")
        if not 0.0 <= self.restitution <= 1.0:
            raise ValueError("restitution must lie in [0, 1]")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.max_speed <= 0:
            raise ValueError("max_speed must be positive")


@dataclass
class Particle:
    position: np.ndarray
    velocity: np.ndarray
    inverse_mass: float


@dataclass
class Spring:
    i: int
    j: int
    rest_length: float
    family: str
    stiffness: float


@dataclass
class PinConstraint:
    index: int
    target: np.ndarray

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64).reshape(3)


@dataclass
class ClothMesh:
    rows: int
    cols: int
    width: float
    height: float
    mass: float
    pos: np.ndarray
    vel: np.ndarray
    inv_mass: np.ndarray
    springs: np.ndarray          # (S, 2) int64 endpoint indices
    rest: np.ndarray             # (S,) rest lengths
    family: np.ndarray           # (S,) family code
    stiffness: np.ndarray        # (S,) nominal stiffness, kg/s^2
    faces: np.ndarray            # (F, 3) int64
    color: tuple = (200, 60, 60)
    meta: dict = field(default_factory=dict)
    _k_cache: tuple = field(default=None, repr=False)

    @property
    def n_particles(self) -> int:
        return self.pos.shape[0]

    @property
    def flattened_area(self) -> float:
        return self.width * self.height

    @property
    def spacing(self) -> float:
        return max(self.width / (self.cols - 1), self.height / (self.rows - 1))

    @property
    def particle_mass(self) -> float:
        return self.mass / self.n_particles

    def particle(self, i: int) -> Particle:
        return Particle(self.pos[i].copy(), self.vel[i].copy(), float(self.inv_mass[i]))

    def spring(self, s: int) -> Spring:
        i, j = self.springs[s]
        return Spring(int(i), int(j), float(self.rest[s]),
                      FAMILY_NAMES[self.family[s]], float(self.stiffness[s]))

    def spring_counts(self) -> dict:
        return {name: int(np.sum(self.family == code)) for code, name in enumerate(FAMILY_NAMES)}

    def grid_index(self, r: int, c: int) -> int:
        return r * self.cols + c

    def copy(self) -> "ClothMesh":
        return ClothMesh(
            self.rows, self.cols, self.width, self.height, self.mass,
            self.pos.copy(), self.vel.copy(), self.inv_mass.copy(),
            self.springs, self.rest, self.family, self.stiffness, self.faces,
            self.color, dict(self.meta), self._k_cache,
        )


def _as_grid(grid_res) -> tuple[int, int]:
    if np.isscalar(grid_res):
        return int(grid_res), int(grid_res)
    rows, cols = grid_res
    return int(rows), int(cols)


def build_rect_cloth(width: float, height: float, grid_res, mass: float,
                     stiffness: dict | None = None, color=(200, 60, 60)) -> ClothMesh:
    """Flat rectangular cloth centred on the origin at z = 0.

    ``grid_res`` is either an int (square grid) or ``(rows, cols)``; rows run
    along y and cols along x.
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"cloth dimensions must be positive, got {width} x {height}")
    if mass <= 0:
        raise ValueError("cloth mass must be positive")
    rows, cols = _as_grid(grid_res)
    if rows < 3 or cols < 3:
        raise ValueError(f"grid resolution must be at least 3 per side, got {rows}x{cols}")
    stiff = dict(DEFAULT_STIFFNESS)
    if stiffness:
        stiff.update(stiffness)

    xs = np.linspace(-width / 2, width / 2, cols)
    ys = np.linspace(-height / 2, height / 2, rows)
    xx, yy = np.meshgrid(xs, ys)
    n = rows * cols
    pos = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(n)])

    idx = np.arange(n).reshape(rows, cols)
    pairs, fams = [], []

    def add(a, b, fam):
        pairs.append(np.column_stack([a.ravel(), b.ravel()]))
        fams.append(np.full(a.size, fam, dtype=np.int64))

    add(idx[:, :-1], idx[:, 1:], STRETCH)
    add(idx[:-1, :], idx[1:, :], STRETCH)
    add(idx[:-1, :-1], idx[1:, 1:], SHEAR)
    add(idx[:-1, 1:], idx[1:, :-1], SHEAR)
    add(idx[:, :-2], idx[:, 2:], BEND)
    add(idx[:-2, :], idx[2:, :], BEND)
    springs = np.concatenate(pairs).astype(np.int64)
    family = np.concatenate(fams)
    rest = np.linalg.norm(pos[springs[:, 1]] - pos[springs[:, 0]], axis=1)
    stiff_arr = np.array([stiff[FAMILY_NAMES[f]] for f in range(3)])[family]

    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.column_stack([a, b, d]), np.column_stack([a, d, c])]).astype(np.int64)

    return ClothMesh(
        rows=rows, cols=cols, width=float(width), height=float(height), mass=float(mass),
        pos=pos, vel=np.zeros((n, 3)), inv_mass=np.full(n, n / mass),
        springs=springs, rest=rest, family=family, stiffness=stiff_arr, faces=faces,
        color=tuple(int(v) for v in color),
    )


def spring_constants(world: WorldConfig, cloth: ClothMesh) -> np.ndarray:
    # scaling by m_particle / rest^2 keeps sag strain independent of grid resolution
    key = (world.stiffness_scale, world.bend_scale)
    if cloth._k_cache is None or cloth._k_cache[0] != key:
        scale = np.where(cloth.family == BEND, world.bend_scale, 1.0) * world.stiffness_scale
        k = cloth.stiffness * scale * cloth.particle_mass / cloth.rest**2
        cloth._k_cache = (key, k)
    return cloth._k_cache[1]


@njit(cache=True)
def _step_kernel(pos, vel, inv_mass, springs, rest, k, impulses, pin_idx, pin_tgt,
                 gravity, dt, substeps, damping, spring_damping, friction, restitution,
                 compression, floor):
    n = pos.shape[0]
    ns = springs.shape[0]
    h = dt / substeps
    decay = math.exp(-damping * h)
    force = np.zeros((n, 3))
    for i in range(n):
        for a in range(3):
            vel[i, a] += impulses[i, a] * inv_mass[i]
    for _ in range(substeps):
        force[:, :] = 0.0
        for s in range(ns):
            i = springs[s, 0]
            j = springs[s, 1]
            dx = pos[j, 0] - pos[i, 0]
            dy = pos[j, 1] - pos[i, 1]
            dz = pos[j, 2] - pos[i, 2]
            length = math.sqrt(dx * dx + dy * dy + dz * dz)
            if length < 1e-12:
                continue
            ux = dx / length
            uy = dy / length
            uz = dz / length
            rel = ((vel[j, 0] - vel[i, 0]) * ux + (vel[j, 1] - vel[i, 1]) * uy
                   + (vel[j, 2] - vel[i, 2]) * uz)
            ext = length - rest[s]
            ks = k[s] if ext > 0.0 else k[s] * compression
            mag = ks * ext + spring_damping * ks * h * rel
            force[i, 0] += mag * ux
            force[i, 1] += mag * uy
            force[i, 2] += mag * uz
            force[j, 0] -= mag * ux
            force[j, 1] -= mag * uy
            force[j, 2] -= mag * uz
        for i in range(n):
            w = inv_mass[i]
            if w == 0.0:
                continue
            vel[i, 0] = (vel[i, 0] + h * force[i, 0] * w) * decay
            vel[i, 1] = (vel[i, 1] + h * force[i, 1] * w) * decay
            vel[i, 2] = (vel[i, 2] + h * (force[i, 2] * w - gravity)) * decay
            pos[i, 0] += h * vel[i, 0]
            pos[i, 1] += h * vel[i, 1]
            pos[i, 2] += h * vel[i, 2]
            if pos[i, 2] < floor:
                pos[i, 2] = floor
                vz = vel[i, 2]
                if vz < 0.0:
                    vel[i, 2] = -restitution * vz
                    # Coulomb: tangential impulse bounded by friction * normal impulse
                    dvn = (1.0 + restitution) * -vz
                    vt = math.sqrt(vel[i, 0] ** 2 + vel[i, 1] ** 2)
                    if vt > 0.0:
                        scale = max(0.0, vt - friction * dvn) / vt
                        vel[i, 0] *= scale
                        vel[i, 1] *= scale
        for p in range(pin_idx.shape[0]):
            i = pin_idx[p]
            for a in range(3):
                pos[i, a] = pin_tgt[p, a]
                vel[i, a] = 0.0


_NO_PINS_IDX = np.zeros(0, dtype=np.int64)
_NO_PINS_TGT = np.zeros((0, 3))


def _pin_arrays(pins):
    if not pins:
        return _NO_PINS_IDX, _NO_PINS_TGT
    return (np.array([p.index for p in pins], dtype=np.int64),
            np.array([p.target for p in pins], dtype=np.float64))


def sim_step(world: WorldConfig, cloth: ClothMesh, pins=(), external_impulses=None) -> ClothMesh:
    """Advance the cloth by one ``world.dt``; mutates and returns ``cloth``."""
    n = cloth.n_particles
    if external_impulses is None:
        external_impulses = np.zeros((n, 3))
    elif external_impulses.shape != (n, 3):
        raise ValueError(f"impulses shape {external_impulses.shape} does not match {n} particles")
    pin_idx, pin_tgt = _pin_arrays(pins)
    _step_kernel(cloth.pos, cloth.vel, cloth.inv_mass, cloth.springs, cloth.rest,
                 spring_constants(world, cloth), external_impulses, pin_idx, pin_tgt,
                 world.gravity, world.dt, world.substeps, world.damping,
                 world.spring_damping, world.friction, world.restitution,
                 world.compression_scale, world.contact_offset)
    if not (np.isfinite(cloth.pos).all() and np.isfinite(cloth.vel).all()):
        raise SimulationError("non-finite cloth state; reduce dt or increase substeps")
    if np.abs(cloth.vel).max(initial=0.0) > world.max_speed:
        raise SimulationError(f"cloth speed above {world.max_speed} m/s; reduce dt or increase substeps")
    return cloth


def kinetic_energy(cloth: ClothMesh) -> float:
    m = np.where(cloth.inv_mass > 0, 1.0 / np.maximum(cloth.inv_mass, 1e-300), 0.0)
    return float(0.5 * np.sum(m * np.sum(cloth.vel**2, axis=1)))


def potential_energy(world: WorldConfig, cloth: ClothMesh) -> float:
    m = np.where(cloth.inv_mass > 0, 1.0 / np.maximum(cloth.inv_mass, 1e-300), 0.0)
    grav = float(np.sum(m * world.gravity * cloth.pos[:, 2]))
    d = cloth.pos[cloth.springs[:, 1]] - cloth.pos[cloth.springs[:, 0]]
    ext = np.linalg.norm(d, axis=1) - cloth.rest
    k = spring_constants(world, cloth) * np.where(ext > 0, 1.0, world.compression_scale)
    return grav + float(0.5 * np.sum(k * ext**2))


def total_energy(world: WorldConfig, cloth: ClothMesh) -> float:
    return kinetic_energy(cloth) + potential_energy(world, cloth)


def spring_strain(cloth: ClothMesh, family: int | None = None) -> np.ndarray:
    d = cloth.pos[cloth.springs[:, 1]] - cloth.pos[cloth.springs[:, 0]]
    strain = np.abs(np.linalg.norm(d, axis=1) - cloth.rest) / cloth.rest
    if family is not None:
        strain = strain[cloth.family == family]
    return strain


def settle(world: WorldConfig, cloth: ClothMesh, pins=(), max_steps: int = 400,
           kinetic_tolerance: float = 1e-4) -> tuple[ClothMesh, int]:
    """Step until kinetic energy drops below ``kinetic_tolerance``.

    Returns the cloth and the number of steps taken.  Hitting ``max_steps``
    is not an error; callers compare ``steps == max_steps`` if they care.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    if math.isinf(kinetic_tolerance):
        return cloth, 0
    for step in range(1, max_steps + 1):
        sim_step(world, cloth, pins)
        if kinetic_energy(cloth) < kinetic_tolerance:
            return cloth, step
    return cloth, max_steps


def move_pins(world: WorldConfig, cloth: ClothMesh, pins, targets, speed: float,
              min_steps: int = 1):
    """Drive pins in straight lines to ``targets`` at ``speed`` (m/s)."""
    targets = np.asarray(targets, dtype=np.float64)
    start = np.array([p.target for p in pins])
    dist = float(np.max(np.linalg.norm(targets - start, axis=1))) if len(pins) else 0.0
    steps = max(min_steps, int(math.ceil(dist / (speed * world.dt))))
    for s in range(1, steps + 1):
        a = s / steps
        for p, s0, t in zip(pins, start, targets):
            p.target = (1 - a) * s0 + a * t
        sim_step(world, cloth, pins)
    return cloth


def crumple(world: WorldConfig, cloth: ClothMesh, rng: np.random.Generator,
            height_range=(0.5, 1.5), lift_speed: float = 1.5, hang_steps: int = 180,
            drop_steps: int = 400, kinetic_tolerance: float = 1e-4,
            xy_jitter: float = 0.1) -> ClothMesh:
    """Grab a random particle, hold it at a random height, drop, settle."""
    idx = int(rng.integers(cloth.n_particles))
    h = float(rng.uniform(*height_range))
    xy = rng.uniform(-xy_jitter, xy_jitter, size=2)
    cloth.meta["crumple"] = {"particle": idx, "height": h, "xy": xy.tolist()}
    pin = PinConstraint(idx, cloth.pos[idx])
    move_pins(world, cloth, [pin], [[xy[0], xy[1], h]], lift_speed)
    settle(world, cloth, [pin], hang_steps, kinetic_tolerance)
    settle(world, cloth, (), drop_steps, kinetic_tolerance)
    return cloth


def _line_springs(cloth: ClothMesh, a: int, b: int) -> np.ndarray:
    """Stretch springs along the rest-grid straight path from particle a to b."""
    ra, ca = divmod(a, cloth.cols)
    rb, cb = divmod(b, cloth.cols)
    n = max(abs(rb - ra), abs(cb - ca))
    cells = [(ra, ca)]
    for t in range(1, n + 1):
        r = int(round(ra + (rb - ra) * t / n))
        c = int(round(ca + (cb - ca) * t / n))
        pr, pc = cells[-1]
        if r != pr and c != pc:
            cells.append((pr, c))  # step through a 4-neighbour so every link is a stretch spring
        cells.append((r, c))
    lookup = {}
    for s in np.flatnonzero(cloth.family == STRETCH):
        i, j = cloth.springs[s]
        lookup[(int(i), int(j))] = s
        lookup[(int(j), int(i))] = s
    out = []
    for (r0, c0), (r1, c1) in zip(cells[:-1], cells[1:]):
        s = lookup.get((r0 * cloth.cols + c0, r1 * cloth.cols + c1))
        if s is not None:
            out.append(s)
    return np.array(out, dtype=np.int64)


def nearest_particle(cloth: ClothMesh, point) -> tuple[int, float]:
    d = np.linalg.norm(cloth.pos - np.asarray(point, dtype=np.float64), axis=1)
    i = int(np.argmin(d))
    return i, float(d[i])


@dataclass
class StretchConfig:
    hold_height: float = 0.10
    hold_y: float = -0.42
    lift_height: float = 0.30
    place_offset: float = 0.25
    speed: float = 1.0
    increment: float = 0.001
    taut_strain: float = 0.08
    max_separation: float = 1.05
    settle_steps: int = 60


def grasp_and_stretch(world: WorldConfig, cloth: ClothMesh, pair, hold_height: float | None = None,
                      cfg: StretchConfig | None = None):
    """Pick the cloth at the grasp pair, stretch it and lay it out at the hold pose.

    Sequence: lift both pins, carry them to a line parallel to x behind the
    hold position, widen in 1 mm steps until a path spring reaches the taut
    strain, then lower to ``hold_height`` while dragging back so the free part
    lies out on the table towards +y.
    """
    cfg = cfg or StretchConfig()
    hold = cfg.hold_height if hold_height is None else hold_height
    tol = cloth.spacing
    li, ld = nearest_particle(cloth, pair.left)
    ri, rd = nearest_particle(cloth, pair.right)
    if ld > tol or rd > tol:
        raise ValueError(f"grasp point farther than one grid spacing from the cloth ({max(ld, rd):.3f} m)")
    if li == ri:
        raise ValueError("both grasp points snap to the same particle")
    # keep left/right ordering along x at the hold pose
    if cloth.pos[li, 0] > cloth.pos[ri, 0]:
        li, ri = ri, li
    pins = [PinConstraint(li, cloth.pos[li]), PinConstraint(ri, cloth.pos[ri])]
    sep = float(np.linalg.norm(cloth.pos[li] - cloth.pos[ri]))
    rest_sep = float(np.linalg.norm(_rest_position(cloth, li) - _rest_position(cloth, ri)))
    sep = min(sep, cfg.max_separation)

    up = [p.target.copy() for p in pins]
    for t in up:
        t[2] = cfg.lift_height
    move_pins(world, cloth, pins, up, cfg.speed)
    y_back = cfg.hold_y + cfg.place_offset
    move_pins(world, cloth, pins, [[-sep / 2, y_back, cfg.lift_height], [sep / 2, y_back, cfg.lift_height]],
              cfg.speed)

    path = _line_springs(cloth, li, ri)
    cap = min(cfg.max_separation, rest_sep * (1 + cfg.taut_strain))
    while sep + cfg.increment <= cap:
        if len(path) and _max_strain(cloth, path) >= cfg.taut_strain:
            break
        sep += cfg.increment
        pins[0].target = np.array([-sep / 2, y_back, cfg.lift_height])
        pins[1].target = np.array([sep / 2, y_back, cfg.lift_height])
        sim_step(world, cloth, pins)

    move_pins(world, cloth, pins, [[-sep / 2, cfg.hold_y, hold], [sep / 2, cfg.hold_y, hold]], cfg.speed)
    settle(world, cloth, pins, cfg.settle_steps)
    return cloth, pins


def _max_strain(cloth: ClothMesh, springs: np.ndarray) -> float:
    s = cloth.springs[springs]
    length = np.linalg.norm(cloth.pos[s[:, 1]] - cloth.pos[s[:, 0]], axis=1)
    return float(np.max((length - cloth.rest[springs]) / cloth.rest[springs]))


def _rest_position(cloth: ClothMesh, i: int) -> np.ndarray:
    r, c = divmod(i, cloth.cols)
    return np.array([-cloth.width / 2 + c * cloth.width / (cloth.cols - 1),
                     -cloth.height / 2 + r * cloth.height / (cloth.rows - 1), 0.0])


def release(world: WorldConfig, cloth: ClothMesh, max_steps: int = 300,
            kinetic_tolerance: float = 1e-4) -> ClothMesh:
    settle(world, cloth, (), max_steps, kinetic_tolerance)
    return cloth


def export_state(cloth: ClothMesh) -> str:
    """One particle per line: index x y z vx vy vz."""
    lines = []
    for i in range(cloth.n_particles):
        x, y, z = cloth.pos[i]
        vx, vy, vz = cloth.vel[i]
        lines.append(f"{i} {x:.9e} {y:.9e} {z:.9e} {vx:.9e} {vy:.9e} {vz:.9e}")
    return "\n".join(lines) + "\n"


def import_state(cloth: ClothMesh, text: str) -> ClothMesh:
    rows = np.loadtxt(text.splitlines(), ndmin=2)
    order = rows[:, 0].astype(int)
    cloth.pos[order] = rows[:, 1:4]
    cloth.vel[order] = rows[:, 4:7]
    return cloth
