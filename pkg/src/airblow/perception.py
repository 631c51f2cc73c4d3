"""Top-down orthographic rendering, masks, coverage and rotation stacks.

Image convention: column index grows with +x, row index grows with +y, pixel
(r, c) has its centre at ``origin + ((c + 0.5) * mpp, (r + 0.5) * mpp)`` where
``origin`` is the workspace corner at (-side/2, -side/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

BACKGROUND = (128, 128, 128)


@dataclass(frozen=True)
class WorkspaceSpec:
    side: float = 1.1
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError("workspace side must be positive")

    @property
    def origin(self) -> np.ndarray:
        return np.array(self.center, dtype=np.float64) - self.side / 2


@dataclass
class Raster:
    pixels: np.ndarray                     # (H, W, 3) or (H, W) uint8
    meters_per_pixel: float
    background: tuple = BACKGROUND
    height_map: np.ndarray | None = field(default=None, repr=False)
    origin: tuple = (-0.55, -0.55)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else self.pixels.shape[2]

    def pixel_to_world(self, rc) -> np.ndarray:
        rc = np.asarray(rc, dtype=np.float64)
        return np.array([self.origin[0] + (rc[..., 1] + 0.5) * self.meters_per_pixel,
                         self.origin[1] + (rc[..., 0] + 0.5) * self.meters_per_pixel]).T

    def world_to_pixel(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return np.stack([(xy[..., 1] - self.origin[1]) / self.meters_per_pixel - 0.5,
                         (xy[..., 0] - self.origin[0]) / self.meters_per_pixel - 0.5], axis=-1)


@dataclass
class Mask:
    data: np.ndarray          # (H, W) bool
    meters_per_pixel: float

    @property
    def count(self) -> int:
        return int(self.data.sum())


@njit(cache=True)
def _rasterize(verts, faces, shade, res, x0, y0, mpp, zbuf, fbuf):
    for f in range(faces.shape[0]):
        a = faces[f, 0]
        b = faces[f, 1]
        c = faces[f, 2]
        # to pixel space, pixel centres at integer + 0.5
        ax = (verts[a, 0] - x0) / mpp
        ay = (verts[a, 1] - y0) / mpp
        bx = (verts[b, 0] - x0) / mpp
        by = (verts[b, 1] - y0) / mpp
        cx = (verts[c, 0] - x0) / mpp
        cy = (verts[c, 1] - y0) / mpp
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < 1e-12:
            continue
        cmin = max(int(math.floor(min(ax, bx, cx) - 0.5)), 0)
        cmax = min(int(math.ceil(max(ax, bx, cx) - 0.5)), res - 1)
        rmin = max(int(math.floor(min(ay, by, cy) - 0.5)), 0)
        rmax = min(int(math.ceil(max(ay, by, cy) - 0.5)), res - 1)
        for r in range(rmin, rmax + 1):
            py = r + 0.5
            for col in range(cmin, cmax + 1):
                px = col + 0.5
                w0 = ((bx - px) * (cy - py) - (by - py) * (cx - px)) / area
                w1 = ((cx - px) * (ay - py) - (cy - py) * (ax - px)) / area
                w2 = 1.0 - w0 - w1
                # half-open edge rule: shared edges are owned by exactly one triangle
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                z = w0 * verts[a, 2] + w1 * verts[b, 2] + w2 * verts[c, 2]
                if z > zbuf[r, col]:
                    zbuf[r, col] = z
                    fbuf[r, col] = f


def render_topdown(cloth, workspace: WorkspaceSpec = WorkspaceSpec(), resolution: int = 64,
                   background=BACKGROUND) -> Raster:
    """Orthographic top-down colour render; highest surface wins."""
    if resolution < 32:
        raise ValueError("resolution must be >= 32")
    mpp = workspace.side / resolution
    x0, y0 = workspace.origin
    zbuf = np.full((resolution, resolution), -np.inf)
    fbuf = np.full((resolution, resolution), -1, dtype=np.int64)
    pixels = np.empty((resolution, resolution, 3), dtype=np.uint8)
    pixels[:] = background
    if cloth is not None:
        verts = cloth.pos
        faces = cloth.faces
        _rasterize(verts, faces, None, resolution, x0, y0, mpp, zbuf, fbuf)
        hit = fbuf >= 0
        if hit.any():
            shade = _face_shading(verts, faces)
            rgb = np.asarray(cloth.color, dtype=np.float64)
            cols = np.clip(np.rint(shade[:, None] * rgb[None, :]), 0, 255).astype(np.uint8)
            pixels[hit] = cols[fbuf[hit]]
    height = np.where(np.isfinite(zbuf), zbuf, 0.0)
    return Raster(pixels, mpp, tuple(background), height, (float(x0), float(y0)))


def _face_shading(verts, faces) -> np.ndarray:
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n, axis=1)
    n = n / np.maximum(norm, 1e-12)[:, None]
    light = np.array([0.3, -0.3, 0.9])
    light /= np.linalg.norm(light)
    lambert = np.abs(n @ light)
    return 0.55 + 0.45 * lambert


def random_cloth_color(rng: np.random.Generator) -> tuple:
    """Saturated colour; never close enough to grey to survive shading as background."""
    import colorsys
    h = rng.uniform()
    s = rng.uniform(0.6, 1.0)
    v = rng.uniform(0.75, 1.0)
    return tuple(int(round(255 * x)) for x in colorsys.hsv_to_rgb(h, s, v))


def cloth_mask(raster: Raster) -> Mask:
    px = raster.pixels
    if px.ndim == 2:
        data = px != raster.background[0]
    else:
        data = np.any(px != np.asarray(raster.background, dtype=np.uint8), axis=-1)
    return Mask(data, raster.meters_per_pixel)


def mask_to_raster(mask: Mask, background=BACKGROUND, fill=(255, 255, 255)) -> Raster:
    px = np.empty(mask.data.shape + (3,), dtype=np.uint8)
    px[:] = background
    px[mask.data] = fill
    return Raster(px, mask.meters_per_pixel, tuple(background))


def coverage(mask: Mask, cloth) -> float:
    area = cloth.flattened_area if hasattr(cloth, "flattened_area") else float(cloth)
    if area <= 0:
        raise ValueError("flattened area must be positive")
    return mask.count * mask.meters_per_pixel**2 / area


def projected_mask(cloth, workspace: WorkspaceSpec = WorkspaceSpec(), resolution: int = 64) -> Mask:
    """Geometric projection: a pixel is cloth iff its centre lies in some projected triangle.

    Independent of the colour pipeline; evaluates every pixel centre against
    every face with vectorised barycentric tests.
    """
    mpp = workspace.side / resolution
    x0, y0 = workspace.origin
    cs = x0 + (np.arange(resolution) + 0.5) * mpp
    rs = y0 + (np.arange(resolution) + 0.5) * mpp
    px, py = np.meshgrid(cs, rs)
    px, py = px.ravel(), py.ravel()
    out = np.zeros(px.size, dtype=bool)
    v = cloth.pos[:, :2]
    for a, b, c in cloth.faces:
        (ax, ay), (bx, by), (cx, cy) = v[a], v[b], v[c]
        lo_x, hi_x = min(ax, bx, cx), max(ax, bx, cx)
        lo_y, hi_y = min(ay, by, cy), max(ay, by, cy)
        sel = np.flatnonzero((px >= lo_x) & (px <= hi_x) & (py >= lo_y) & (py <= hi_y))
        if sel.size == 0:
            continue
        qx, qy = px[sel], py[sel]
        d1 = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
        d2 = (cx - bx) * (qy - by) - (cy - by) * (qx - bx)
        d3 = (ax - cx) * (qy - cy) - (ay - cy) * (qx - cx)
        inside = ((d1 >= 0) & (d2 >= 0) & (d3 >= 0)) | ((d1 <= 0) & (d2 <= 0) & (d3 <= 0))
        out[sel[inside]] = True
    return Mask(out.reshape(resolution, resolution), mpp)


@dataclass
class RotatedView:
    angle: float              # degrees
    raster: Raster
    inverse_map: np.ndarray   # (H, W, 2) original-frame (row, col) of each rotated pixel

    def to_original(self, rc) -> np.ndarray:
        """Map rotated-frame (row, col) to original-frame (row, col), sub-pixel."""
        return _rotate_coords(np.asarray(rc, dtype=np.float64), self.angle, self.raster.height)

    def from_original(self, rc) -> np.ndarray:
        return _rotate_coords(np.asarray(rc, dtype=np.float64), -self.angle, self.raster.height)


def _rotate_coords(rc, angle_deg, size):
    # a horizontal direction in the rotated frame maps to angle_deg in the original
    c = (size - 1) / 2.0
    t = math.radians(angle_deg)
    cos, sin = math.cos(t), math.sin(t)
    dr, dc = rc[..., 0] - c, rc[..., 1] - c
    col = c + cos * dc - sin * dr
    row = c + sin * dc + cos * dr
    return np.stack([row, col], axis=-1)


def rotate_raster(raster: Raster, angle_deg: float) -> RotatedView:
    h, w = raster.height, raster.width
    if h != w:
        raise ValueError("rotation stack needs a square raster")
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    src = _rotate_coords(np.stack([rr, cc], axis=-1).astype(np.float64), angle_deg, h)
    sr = np.rint(src[..., 0]).astype(np.int64)
    sc = np.rint(src[..., 1]).astype(np.int64)
    valid = (sr >= 0) & (sr < h) & (sc >= 0) & (sc < w)
    if raster.pixels.ndim == 3:
        out = np.empty_like(raster.pixels)
        out[:] = raster.background
    else:
        out = np.full_like(raster.pixels, raster.background[0])
    out[valid] = raster.pixels[sr[valid], sc[valid]]
    hm = None
    if raster.height_map is not None:
        hm = np.zeros_like(raster.height_map)
        hm[valid] = raster.height_map[sr[valid], sc[valid]]
    rot = Raster(out, raster.meters_per_pixel, raster.background, hm, raster.origin)
    return RotatedView(float(angle_deg), rot, src)


def rotation_stack(raster: Raster, k: int = 8) -> list[RotatedView]:
    """``k`` rotations spanning 180 degrees; a grasp line is symmetric under +180."""
    return [rotate_raster(raster, i * 180.0 / k) for i in range(k)]


def write_ppm(path, raster: Raster) -> None:
    px = raster.pixels
    if px.ndim == 2:
        header = f"P5\n{px.shape[1]} {px.shape[0]}\n255\n"
    else:
        header = f"P6\n{px.shape[1]} {px.shape[0]}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(px, dtype=np.uint8).tobytes())


def read_ppm(path, meters_per_pixel: float = 1.0) -> Raster:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    magic, dims, maxval, body = parts
    w, h = (int(v) for v in dims.split())
    if maxval != b"255" or magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported pixel file {path}")
    shape = (h, w, 3) if magic == b"P6" else (h, w)
    px = np.frombuffer(body, dtype=np.uint8).reshape(shape).copy()
    return Raster(px, meters_per_pixel)
