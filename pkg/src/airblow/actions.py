"""Action parameterisations and their geometric resolution."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .jet import JetPose
from .perception import Mask, Raster

MIN_GRASP_DISTANCE = 0.1     # m
NOZZLE_HEIGHT = 0.03         # m above table
NOZZLE_OFFSET = 0.05         # m behind the grip line
NOZZLE_PITCH = -10.0         # degrees
PX_RANGE = (-0.1, 0.1)
RZ_RANGE = (-30.0, 30.0)
FORWARD = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class GraspLine:
    """Centre in (row, col) pixel coordinates and angle in degrees; angle 0 runs along +col."""
    row: float
    col: float
    angle: float

    def __post_init__(self):
        object.__setattr__(self, "angle", float(self.angle) % 180.0)

    def to_record(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GraspPair:
    left: tuple
    right: tuple
    left_px: tuple = (0, 0)
    right_px: tuple = (0, 0)

    @property
    def separation(self) -> float:
        return float(np.linalg.norm(np.subtract(self.left, self.right)))

    def to_record(self) -> dict:
        return {"left": [float(v) for v in self.left], "right": [float(v) for v in self.right],
                "left_px": [int(v) for v in self.left_px], "right_px": [int(v) for v in self.right_px]}


@dataclass(frozen=True)
class Reject:
    reason: str

    def __bool__(self):
        return False

    def to_record(self) -> dict:
        return {"reject": self.reason}


CENTER_OFF_CLOTH = "center-off-cloth"
TOO_CLOSE = "below-safety-distance"
EMPTY_MASK = "empty-mask"
NO_PAIR = "no-valid-pair"


@dataclass(frozen=True)
class BlowAction:
    px: float
    rz: float

    def __post_init__(self):
        if not (PX_RANGE[0] - 1e-12 <= self.px <= PX_RANGE[1] + 1e-12):
            raise ValueError(f"p_x {self.px} outside {PX_RANGE}")
        if not (RZ_RANGE[0] - 1e-9 <= self.rz <= RZ_RANGE[1] + 1e-9):
            raise ValueError(f"r_z {self.rz} outside {RZ_RANGE}")

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.rz])

    def normalized(self) -> np.ndarray:
        """Both coordinates rescaled to [-1, 1] for the scorer."""
        return np.array([self.px / PX_RANGE[1], self.rz / RZ_RANGE[1]])

    def to_record(self) -> dict:
        return {"px": float(self.px), "rz": float(self.rz)}


@dataclass(frozen=True)
class BagBlowAction:
    """Bag-task blow: nozzle position in the y-z plane and pitch."""
    py: float
    pz: float
    rx: float
    y_range: tuple = (-0.1, 0.1)
    z_range: tuple = (0.0, 0.14)

    def __post_init__(self):
        if not (self.y_range[0] <= self.py <= self.y_range[1]
                and self.z_range[0] <= self.pz <= self.z_range[1]):
            raise ValueError(f"bag blow position ({self.py}, {self.pz}) outside configured rectangle")

    def to_record(self) -> dict:
        return {"py": float(self.py), "pz": float(self.pz), "rx": float(self.rx)}


def line_samples(shape, line: GraspLine, oversample: int = 4):
    """Walk the infinite line through the centre at 1/oversample pixel steps.

    Returns (t, row, col) arrays for every in-image sample, t in pixels along
    the direction (cos, sin) of ``line.angle`` in (col, row) order.
    """
    h, w = shape
    theta = math.radians(line.angle)
    dc, dr = math.cos(theta), math.sin(theta)
    reach = math.hypot(h, w) + 2
    n = int(math.ceil(reach * oversample))
    t = np.arange(-n, n + 1) / oversample
    rows = np.floor(line.row + t * dr + 0.5).astype(np.int64)
    cols = np.floor(line.col + t * dc + 0.5).astype(np.int64)
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    return t[inside], rows[inside], cols[inside]


def _order_pair(a, b):
    # tie rule: L has the smaller x (col), then smaller y (row)
    return (a, b) if (a[1], a[0]) <= (b[1], b[0]) else (b, a)


def line_extremes(mask: np.ndarray, line: GraspLine, oversample: int = 4):
    """Farthest-apart cloth pixels on the grasp line, or None."""
    t, rows, cols = line_samples(mask.shape, line, oversample)
    on = mask[rows, cols]
    if not on.any():
        return None
    idx = np.flatnonzero(on)
    lo, hi = idx[0], idx[-1]
    return _order_pair((int(rows[lo]), int(cols[lo])), (int(rows[hi]), int(cols[hi])))


def lift_pixel(raster_or_mpp, rc, height_map=None, origin=(-0.55, -0.55)) -> tuple:
    if isinstance(raster_or_mpp, Raster):
        mpp, origin = raster_or_mpp.meters_per_pixel, raster_or_mpp.origin
        height_map = raster_or_mpp.height_map if height_map is None else height_map
    else:
        mpp = float(raster_or_mpp)
    r, c = rc
    z = float(height_map[r, c]) if height_map is not None else 0.0
    return (origin[0] + (c + 0.5) * mpp, origin[1] + (r + 0.5) * mpp, z)


def edge_coincident_grasp(mask: Mask, line: GraspLine, height_map=None, origin=(-0.55, -0.55),
                          min_distance: float = MIN_GRASP_DISTANCE):
    """Resolve a grasp line to the two farthest cloth pixels along it.

    Returns a ``GraspPair`` or a ``Reject`` when the centre is background or
    the points are closer than the safety distance.
    """
    data = mask.data
    h, w = data.shape
    cr, cc = int(math.floor(line.row + 0.5)), int(math.floor(line.col + 0.5))
    if not (0 <= cr < h and 0 <= cc < w) or not data[cr, cc]:
        return Reject(CENTER_OFF_CLOTH)
    ends = line_extremes(data, line)
    a, b = ends
    la = lift_pixel(mask.meters_per_pixel, a, height_map, origin)
    lb = lift_pixel(mask.meters_per_pixel, b, height_map, origin)
    if math.dist(la, lb) < min_distance:
        return Reject(TOO_CLOSE)
    return GraspPair(la, lb, a, b)


def blow_pose(action: BlowAction, grip_center) -> JetPose:
    """Nozzle behind the grip line at fixed height; heading yawed by r_z, pitched down."""
    if not isinstance(action, BlowAction):
        action = BlowAction(*action)
    g = np.asarray(grip_center, dtype=np.float64)
    yaw = math.radians(action.rz)
    pitch = math.radians(NOZZLE_PITCH)
    heading = np.array([-math.sin(yaw), math.cos(yaw)])
    axis = np.array([heading[0] * math.cos(pitch), heading[1] * math.cos(pitch), math.sin(pitch)])
    origin = np.array([g[0] + action.px, g[1] - NOZZLE_OFFSET, NOZZLE_HEIGHT])
    return JetPose(origin, axis)


def sample_blow_actions(m: int = 64, rng: np.random.Generator | None = None) -> list[BlowAction]:
    if m < 1:
        raise ValueError("need at least one action")
    rng = np.random.default_rng() if rng is None else rng
    px = rng.uniform(*PX_RANGE, size=m)
    rz = rng.uniform(*RZ_RANGE, size=m)
    return [BlowAction(float(a), float(b)) for a, b in zip(px, rz)]


def heuristic_grasp(mask: Mask, rng: np.random.Generator, height_map=None, origin=(-0.55, -0.55),
                    n_pairs: int = 100, min_distance: float = MIN_GRASP_DISTANCE):
    """Sample cloth-pixel pairs uniformly and keep the farthest-apart one."""
    cloth = np.argwhere(mask.data)
    if len(cloth) == 0:
        return Reject(EMPTY_MASK)
    i = rng.integers(len(cloth), size=n_pairs)
    j = rng.integers(len(cloth), size=n_pairs)
    d = np.linalg.norm((cloth[i] - cloth[j]).astype(np.float64), axis=1) * mask.meters_per_pixel
    best = int(np.argmax(d))
    if d[best] < min_distance:
        return Reject(NO_PAIR)
    a, b = _order_pair(tuple(int(v) for v in cloth[i[best]]), tuple(int(v) for v in cloth[j[best]]))
    return GraspPair(lift_pixel(mask.meters_per_pixel, a, height_map, origin),
                     lift_pixel(mask.meters_per_pixel, b, height_map, origin), a, b)


def heuristic_blow() -> BlowAction:
    return BlowAction(0.0, 0.0)
