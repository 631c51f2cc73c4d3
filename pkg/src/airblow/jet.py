"""Particle-stream air jet.

Air is a stream of non-interacting ballistic particles emitted from a nozzle
in a narrow cone.  Each step a particle sweeps a segment; the first cloth
triangle it crosses receives an impulse (split barycentrically over the three
vertices) and the particle reflects with restitution.  The table reflects
particles the same way.  Momentum handed to the cloth is exactly the momentum
the air loses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .sim import (SimulationError, WorldConfig, _pin_arrays, _step_kernel, settle, sim_step,
                  spring_constants)


@dataclass
class JetConfig:
    particles_per_step: int = 19
    emission_speed: float = 5.0
    cone_angle: float = 10.0          # full aperture, degrees
    air_particle_mass: float = 0.0007
    restitution: float = 0.3
    table_restitution: float = 0.7
    friction: float = 0.2             # air-cloth tangential coupling
    lifetime: int = 60
    cull_margin: float = 0.5
    workspace_side: float = 1.1
    gravity: bool = True
    blow_duration_steps: int = 150
    settle_steps: int = 30
    cell_size: float = 0.05

    @property
    def half_angle(self) -> float:
        return math.radians(self.cone_angle) / 2


@dataclass
class JetPose:
    origin: np.ndarray
    axis: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(axis)
        if not norm > 0:
            raise ValueError("jet axis must be non-zero")
        self.axis = axis / norm


@dataclass
class AirParticle:
    position: np.ndarray
    velocity: np.ndarray
    age: int


class AirStream:
    """Struct-of-arrays container for live air particles."""

    def __init__(self, pos=None, vel=None, age=None):
        self.pos = np.zeros((0, 3)) if pos is None else np.asarray(pos, dtype=np.float64)
        self.vel = np.zeros((0, 3)) if vel is None else np.asarray(vel, dtype=np.float64)
        self.age = np.zeros(0, dtype=np.int64) if age is None else np.asarray(age, dtype=np.int64)

    def __len__(self):
        return self.pos.shape[0]

    def __getitem__(self, i) -> AirParticle:
        return AirParticle(self.pos[i].copy(), self.vel[i].copy(), int(self.age[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def extend(self, other: "AirStream") -> "AirStream":
        return AirStream(np.concatenate([self.pos, other.pos]),
                         np.concatenate([self.vel, other.vel]),
                         np.concatenate([self.age, other.age]))

    def momentum(self, mass: float) -> np.ndarray:
        return mass * self.vel.sum(axis=0)


def _basis(axis):
    a = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, a)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def _draw_cone(cfg: JetConfig, rng: np.random.Generator):
    n = cfg.particles_per_step
    cos_t = rng.uniform(math.cos(cfg.half_angle), 1.0, size=n)
    phi = rng.uniform(0.0, 2 * math.pi, size=n)
    return cos_t, phi


def _cone_velocities(pose: JetPose, cfg: JetConfig, cos_t, phi) -> np.ndarray:
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t**2))
    u, w = _basis(pose.axis)
    d = (cos_t[..., None] * pose.axis + (sin_t * np.cos(phi))[..., None] * u
         + (sin_t * np.sin(phi))[..., None] * w)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d * cfg.emission_speed


def emit_cone(pose: JetPose, cfg: JetConfig, rng: np.random.Generator) -> AirStream:
    """Emit one step's worth of particles, uniform over the cone's solid-angle cap."""
    n = cfg.particles_per_step
    vel = _cone_velocities(pose, cfg, *_draw_cone(cfg, rng))
    return AirStream(np.repeat(pose.origin[None, :], n, axis=0), vel, np.zeros(n, dtype=np.int64))


@njit(cache=True)
def _build_grid(verts, faces, x0, y0, cell, nc):
    nf = faces.shape[0]
    lo = np.empty((nf, 2), dtype=np.int64)
    hi = np.empty((nf, 2), dtype=np.int64)
    counts = np.zeros(nc * nc + 1, dtype=np.int64)
    fz = np.empty((nf, 2))
    for f in range(nf):
        fz[f, 0] = min(verts[faces[f, 0], 2], verts[faces[f, 1], 2], verts[faces[f, 2], 2])
        fz[f, 1] = max(verts[faces[f, 0], 2], verts[faces[f, 1], 2], verts[faces[f, 2], 2])
        for ax in range(2):
            o = x0 if ax == 0 else y0
            mn = min(verts[faces[f, 0], ax], verts[faces[f, 1], ax], verts[faces[f, 2], ax])
            mx = max(verts[faces[f, 0], ax], verts[faces[f, 1], ax], verts[faces[f, 2], ax])
            lo[f, ax] = min(max(int(math.floor((mn - o) / cell)), 0), nc - 1)
            hi[f, ax] = min(max(int(math.floor((mx - o) / cell)), 0), nc - 1)
        for i in range(lo[f, 0], hi[f, 0] + 1):
            for j in range(lo[f, 1], hi[f, 1] + 1):
                counts[i * nc + j + 1] += 1
    for c in range(nc * nc):
        counts[c + 1] += counts[c]
    fill = counts[:-1].copy()
    items = np.empty(counts[-1], dtype=np.int64)
    for f in range(nf):
        for i in range(lo[f, 0], hi[f, 0] + 1):
            for j in range(lo[f, 1], hi[f, 1] + 1):
                items[fill[i * nc + j]] = f
                fill[i * nc + j] += 1
    return counts, items, fz


@njit(cache=True)
def _segment_triangle(p, d, a, b, c):
    """Moller-Trumbore on segment p + t d, t in [0, 1]; returns (t, u, v) or t = -1."""
    e1x = b[0] - a[0]
    e1y = b[1] - a[1]
    e1z = b[2] - a[2]
    e2x = c[0] - a[0]
    e2y = c[1] - a[1]
    e2z = c[2] - a[2]
    px = d[1] * e2z - d[2] * e2y
    py = d[2] * e2x - d[0] * e2z
    pz = d[0] * e2y - d[1] * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-14:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    tx = p[0] - a[0]
    ty = p[1] - a[1]
    tz = p[2] - a[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0, 0.0, 0.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t < 0.0 or t > 1.0:
        return -1.0, 0.0, 0.0
    return t, u, v


@njit(cache=True)
def _air_kernel(apos, avel, aage, verts, cvel, inv_mass, faces, dt, g, m_air, rest, trest, mu, lifetime,
                bmin, bmax, x0, y0, cell, nc, counts, items, fz, impulses, alive, events):
    n = apos.shape[0]
    p = np.empty(3)
    d = np.empty(3)
    nev = 0
    for k in range(n):
        for a in range(3):
            p[a] = apos[k, a]
        vx = avel[k, 0]
        vy = avel[k, 1]
        vz = avel[k, 2]
        d[0] = vx * dt
        d[1] = vy * dt
        d[2] = vz * dt - 0.5 * g * dt * dt
        # broad phase: cells overlapped by the segment's xy box
        i0 = min(max(int(math.floor((min(p[0], p[0] + d[0]) - x0) / cell)), 0), nc - 1)
        i1 = min(max(int(math.floor((max(p[0], p[0] + d[0]) - x0) / cell)), 0), nc - 1)
        j0 = min(max(int(math.floor((min(p[1], p[1] + d[1]) - y0) / cell)), 0), nc - 1)
        j1 = min(max(int(math.floor((max(p[1], p[1] + d[1]) - y0) / cell)), 0), nc - 1)
        zlo = min(p[2], p[2] + d[2])
        zhi = max(p[2], p[2] + d[2])
        best_t = 2.0
        best_f = -1
        best_u = 0.0
        best_v = 0.0
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                c = i * nc + j
                for q in range(counts[c], counts[c + 1]):
                    f = items[q]
                    if zhi < fz[f, 0] or zlo > fz[f, 1]:
                        continue
                    t, u, v = _segment_triangle(p, d, verts[faces[f, 0]], verts[faces[f, 1]],
                                                verts[faces[f, 2]])
                    if t >= 0.0 and t < best_t:
                        best_t = t
                        best_f = f
                        best_u = u
                        best_v = v
        hit = False
        if best_f >= 0:
            fa = faces[best_f, 0]
            fb = faces[best_f, 1]
            fc = faces[best_f, 2]
            w0 = 1.0 - best_u - best_v
            w1 = best_u
            w2 = best_v
            # velocity at the moment of contact
            hvx = vx
            hvy = vy
            hvz = vz - g * dt * best_t
            cvx = w0 * cvel[fa, 0] + w1 * cvel[fb, 0] + w2 * cvel[fc, 0]
            cvy = w0 * cvel[fa, 1] + w1 * cvel[fb, 1] + w2 * cvel[fc, 1]
            cvz = w0 * cvel[fa, 2] + w1 * cvel[fb, 2] + w2 * cvel[fc, 2]
            e1x = verts[fb, 0] - verts[fa, 0]
            e1y = verts[fb, 1] - verts[fa, 1]
            e1z = verts[fb, 2] - verts[fa, 2]
            e2x = verts[fc, 0] - verts[fa, 0]
            e2y = verts[fc, 1] - verts[fa, 1]
            e2z = verts[fc, 2] - verts[fa, 2]
            nx = e1y * e2z - e1z * e2y
            ny = e1z * e2x - e1x * e2z
            nz = e1x * e2y - e1y * e2x
            nn = math.sqrt(nx * nx + ny * ny + nz * nz)
            if nn > 0.0:
                nx /= nn
                ny /= nn
                nz /= nn
                rn = (hvx - cvx) * nx + (hvy - cvy) * ny + (hvz - cvz) * nz
                if rn > 0.0:
                    nx = -nx
                    ny = -ny
                    nz = -nz
                    rn = -rn
                if rn < 0.0:
                    hit = True
                    # two-body impulse against the contact point's effective mass
                    im0 = inv_mass[fa]
                    im1 = inv_mass[fb]
                    im2 = inv_mass[fc]
                    minv = 1.0 / m_air + w0 * w0 * im0 + w1 * w1 * im1 + w2 * w2 * im2
                    jn = -(1.0 + rest) * rn / minv
                    # tangential slip, Coulomb-limited by the normal impulse
                    tx = (hvx - cvx) - rn * nx
                    ty = (hvy - cvy) - rn * ny
                    tz = (hvz - cvz) - rn * nz
                    tn = math.sqrt(tx * tx + ty * ty + tz * tz)
                    ft = 0.0
                    if tn > 0.0:
                        ft = min(mu * jn, tn / minv) / tn
                    jx = jn * nx - ft * tx
                    jy = jn * ny - ft * ty
                    jz = jn * nz - ft * tz
                    dvx = jx / m_air
                    dvy = jy / m_air
                    dvz = jz / m_air
                    impulses[fa, 0] -= w0 * jx
                    impulses[fa, 1] -= w0 * jy
                    impulses[fa, 2] -= w0 * jz
                    impulses[fb, 0] -= w1 * jx
                    impulses[fb, 1] -= w1 * jy
                    impulses[fb, 2] -= w1 * jz
                    impulses[fc, 0] -= w2 * jx
                    impulses[fc, 1] -= w2 * jy
                    impulses[fc, 2] -= w2 * jz
                    # later hits in this step see the cloth already pushed
                    cvel[fa, 0] -= w0 * im0 * jx
                    cvel[fa, 1] -= w0 * im0 * jy
                    cvel[fa, 2] -= w0 * im0 * jz
                    cvel[fb, 0] -= w1 * im1 * jx
                    cvel[fb, 1] -= w1 * im1 * jy
                    cvel[fb, 2] -= w1 * im1 * jz
                    cvel[fc, 0] -= w2 * im2 * jx
                    cvel[fc, 1] -= w2 * im2 * jy
                    cvel[fc, 2] -= w2 * im2 * jz
                    avel[k, 0] = hvx + dvx
                    avel[k, 1] = hvy + dvy
                    avel[k, 2] = hvz + dvz
                    # park just off the surface on the incoming side
                    apos[k, 0] = p[0] + best_t * d[0] + 1e-4 * nx
                    apos[k, 1] = p[1] + best_t * d[1] + 1e-4 * ny
                    apos[k, 2] = p[2] + best_t * d[2] + 1e-4 * nz
                    if nev < events.shape[0]:
                        events[nev, 0] = k
                        events[nev, 1] = jx
                        events[nev, 2] = jy
                        events[nev, 3] = jz
                    nev += 1
        if not hit:
            apos[k, 0] = p[0] + d[0]
            apos[k, 1] = p[1] + d[1]
            apos[k, 2] = p[2] + d[2]
            avel[k, 2] = vz - g * dt
            if apos[k, 2] < 0.0:
                apos[k, 2] = -apos[k, 2] * trest
                if avel[k, 2] < 0.0:
                    avel[k, 2] = -avel[k, 2] * trest
        aage[k] += 1
        ok = aage[k] <= lifetime
        for a in range(3):
            if apos[k, a] < bmin[a] or apos[k, a] > bmax[a]:
                ok = False
        alive[k] = ok
    return nev


@dataclass
class AirStepResult:
    impulses: np.ndarray
    particles: AirStream
    events: np.ndarray        # (E, 4): particle index, air momentum change xyz


def air_step(world: WorldConfig, cloth, particles: AirStream, cfg: JetConfig = JetConfig()) -> AirStepResult:
    """Advance the air stream by ``world.dt`` and collect impulses on the cloth."""
    n = len(particles)
    impulses = np.zeros((cloth.n_particles, 3)) if cloth is not None else np.zeros((0, 3))
    if n == 0:
        return AirStepResult(impulses, particles, np.zeros((0, 4)))
    half = cfg.workspace_side / 2 + cfg.cull_margin
    bmin = np.array([-half, -half, -cfg.cull_margin])
    bmax = np.array([half, half, 2.0 + cfg.cull_margin])
    nc = int(math.ceil(2 * half / cfg.cell_size))
    apos = particles.pos.copy()
    avel = particles.vel.copy()
    aage = particles.age.copy()
    alive = np.zeros(n, dtype=np.bool_)
    events = np.zeros((n, 4))
    g = world.gravity if cfg.gravity else 0.0
    if cloth is not None:
        verts, cvel, faces = cloth.pos, cloth.vel.copy(), cloth.faces
        inv_mass = cloth.inv_mass
    else:
        verts, cvel, faces = np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
        inv_mass = np.zeros(0)
    counts, items, fz = _build_grid(verts, faces, -half, -half, cfg.cell_size, nc)
    nev = _air_kernel(apos, avel, aage, verts, cvel, inv_mass, faces, world.dt, g, cfg.air_particle_mass,
                      cfg.restitution, cfg.table_restitution, cfg.friction, cfg.lifetime, bmin, bmax, -half, -half, cfg.cell_size, nc,
                      counts, items, fz, impulses, alive, events)
    survivors = AirStream(apos[alive], avel[alive], aage[alive])
    return AirStepResult(impulses, survivors, events[:nev])


@njit(cache=True)
def _blow_loop(pos, vel, inv_mass, springs, rest, k, pin_idx, pin_tgt, faces,
               gravity, dt, substeps, damping, spring_damping, friction, restitution,
               compression, floor, emit_vel, origin, apos, avel, aage, count,
               air_g, m_air, air_rest, table_rest, air_mu, lifetime, bmin, bmax, x0, y0, cell, nc):
    steps = emit_vel.shape[0]
    n_emit = emit_vel.shape[1]
    n = pos.shape[0]
    alive = np.zeros(apos.shape[0], dtype=np.bool_)
    events = np.zeros((apos.shape[0], 4))
    impulses = np.zeros((n, 3))
    cvel = np.empty((n, 3))
    for s in range(steps):
        for e in range(n_emit):
            for a in range(3):
                apos[count + e, a] = origin[a]
                avel[count + e, a] = emit_vel[s, e, a]
            aage[count + e] = 0
        count += n_emit
        impulses[:, :] = 0.0
        counts, items, fz = _build_grid(pos, faces, x0, y0, cell, nc)
        cvel[:, :] = vel
        _air_kernel(apos[:count], avel[:count], aage[:count], pos, cvel, inv_mass, faces, dt, air_g, m_air,
                    air_rest, table_rest, air_mu, lifetime, bmin, bmax, x0, y0, cell, nc, counts, items,
                    fz, impulses, alive[:count], events)
        w = 0
        for q in range(count):
            if alive[q]:
                if w != q:
                    for a in range(3):
                        apos[w, a] = apos[q, a]
                        avel[w, a] = avel[q, a]
                    aage[w] = aage[q]
                w += 1
        count = w
        _step_kernel(pos, vel, inv_mass, springs, rest, k, impulses, pin_idx, pin_tgt,
                     gravity, dt, substeps, damping, spring_damping, friction, restitution,
                     compression, floor)
        for i in range(n):
            for a in range(3):
                if not (math.isfinite(pos[i, a]) and math.isfinite(vel[i, a])):
                    return -1
    return count


def blow(world: WorldConfig, cloth, pins, pose: JetPose, cfg: JetConfig = JetConfig(),
         rng: np.random.Generator | None = None, stream: AirStream | None = None,
         return_stream: bool = False):
    """Run one blow: emit, advect, apply impulses, step the cloth; then a short settle.

    Equivalent to looping ``emit_cone`` / ``air_step`` / ``sim_step`` for
    ``cfg.blow_duration_steps`` steps, fused into one compiled loop.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    stream = AirStream() if stream is None else stream
    steps = cfg.blow_duration_steps
    draws = [_draw_cone(cfg, rng) for _ in range(steps)]
    cos_t = np.array([d[0] for d in draws]).reshape(steps, cfg.particles_per_step)
    phi = np.array([d[1] for d in draws]).reshape(steps, cfg.particles_per_step)
    emit_vel = _cone_velocities(pose, cfg, cos_t, phi)

    cap = len(stream) + steps * cfg.particles_per_step
    apos = np.zeros((cap, 3))
    avel = np.zeros((cap, 3))
    aage = np.zeros(cap, dtype=np.int64)
    m = len(stream)
    apos[:m], avel[:m], aage[:m] = stream.pos, stream.vel, stream.age
    half = cfg.workspace_side / 2 + cfg.cull_margin
    nc = int(math.ceil(2 * half / cfg.cell_size))
    pin_idx, pin_tgt = _pin_arrays(pins)
    count = _blow_loop(
        cloth.pos, cloth.vel, cloth.inv_mass, cloth.springs, cloth.rest,
        spring_constants(world, cloth), pin_idx, pin_tgt, cloth.faces,
        world.gravity, world.dt, world.substeps, world.damping, world.spring_damping,
        world.friction, world.restitution, world.compression_scale, world.contact_offset,
        emit_vel, pose.origin, apos, avel, aage, m,
        world.gravity if cfg.gravity else 0.0, cfg.air_particle_mass, cfg.restitution,
        cfg.table_restitution, cfg.friction, cfg.lifetime, np.array([-half, -half, -cfg.cull_margin]),
        np.array([half, half, 2.0 + cfg.cull_margin]), -half, -half, cfg.cell_size, nc)
    if count < 0:
        raise SimulationError("non-finite cloth state during blow")
    stream = AirStream(apos[:count].copy(), avel[:count].copy(), aage[:count].copy())
    if cfg.settle_steps > 0:
        settle(world, cloth, pins, cfg.settle_steps)
    if return_stream:
        return cloth, stream
    return cloth
