"""Sensor-to-frame converters and the five failure-mode simulators.

Camera convention throughout: X right, Y down, Z forward (optical axis).
Pixel (u, v) is (column, row); projecting the optical axis lands on the
principal point (u0, v0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DataError, DimensionError

DEFAULT_MAX_RANGE_M = 100.0
EVENT_THRESHOLD = 0.3


@dataclass
class CameraIntrinsics:
    fov_degrees: float
    width: int
    height: int

    def __post_init__(self):
        if not 0.0 < self.fov_degrees < 180.0:
            raise ConfigurationError(f"FoV must be in (0, 180), got {self.fov_degrees}")
        half_tan = math.tan(self.fov_degrees * math.pi / 360.0)
        self.f_x = self.height / (2.0 * half_tan)
        self.f_y = self.width / (2.0 * half_tan)
        self.u_0 = self.height / 2.0
        self.v_0 = self.width / 2.0

    def project(self, xyz: np.ndarray) -> np.ndarray:
        """(N,3) camera-frame points -> (N,2) pixel (u, v); caller culls Z<=0."""
        z = xyz[:, 2]
        u = self.f_x * xyz[:, 0] / z + self.u_0
        v = self.f_y * xyz[:, 1] / z + self.v_0
        return np.stack([u, v], axis=1)

    def back_project(self, u, v, depth):
        x = (u - self.u_0) / self.f_x * depth
        y = (v - self.v_0) / self.f_y * depth
        return np.stack(np.broadcast_arrays(x, y, depth), axis=-1)


@dataclass
class EventStream:
    """Events as an (N,4) int array of (x, y, t_us, polarity) within [t0, t1)."""
    events: np.ndarray
    t0: int = 0
    t1: int = 1_000_000
    threshold: float = EVENT_THRESHOLD
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        self.events = np.asarray(self.events, dtype=np.int64).reshape(-1, 4)
        if self.events.size:
            t = self.events[:, 2]
            if (t < self.t0).any() or (t >= self.t1).any():
                bad = int(np.argmax((t < self.t0) | (t >= self.t1)))
                raise DataError(f"event {bad} timestamp {t[bad]} outside [{self.t0}, {self.t1})")


@dataclass
class PointCloud:
    points: np.ndarray
    class_ids: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise DataError("point cloud contains non-finite coordinates")
        if self.class_ids is not None:
            self.class_ids = np.asarray(self.class_ids, dtype=np.int64)


@dataclass
class ModalityFrame:
    kind: str
    data: np.ndarray  # 3xHxW in [0,1]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise DimensionError(f"ModalityFrame data must be 3xHxW, got {self.data.shape}")


# -- converters --------------------------------------------------------------


def depth_to_frame(depth_m: np.ndarray, d_max: float) -> ModalityFrame:
    """Log-scaled depth encoding: log(1+d)/log(1+d_max), replicated to 3 channels."""
    if d_max <= 0:
        raise ConfigurationError(f"d_max must be positive, got {d_max}")
    depth_m = np.asarray(depth_m, dtype=np.float64)
    if (depth_m <= 0).any():
        i = np.unravel_index(int(np.argmax(depth_m <= 0)), depth_m.shape)
        raise DataError(f"nonpositive depth {depth_m[i]} at pixel {i}")
    v = np.clip(np.log1p(depth_m) / np.log1p(d_max), 0.0, 1.0)
    return ModalityFrame("depth", np.repeat(v[None], 3, axis=0), {"d_max": d_max})


def events_to_frame(stream: EventStream, width: int, height: int) -> ModalityFrame:
    """Last event per pixel wins (max t, later list entry on ties); blue marks
    positive polarity, red negative, green stays zero."""
    data = np.zeros((3, height, width))
    if stream.events.size:
        x, y = stream.events[:, 0], stream.events[:, 1]
        bad = (x < 0) | (x >= width) | (y < 0) | (y >= height)
        if bad.any():
            i = int(np.argmax(bad))
            raise DataError(f"event {i} at ({x[i]}, {y[i]}) outside {width}x{height} sensor")
        last_t = np.full((height, width), -np.inf)
        pol = np.zeros((height, width), dtype=np.int64)
        for xi, yi, ti, pi in stream.events:
            if ti >= last_t[yi, xi]:
                last_t[yi, xi] = ti
                pol[yi, xi] = pi
        data[2][pol == 1] = 1.0
        data[0][pol == -1] = 1.0
    return ModalityFrame("event", data, {"t0": stream.t0, "t1": stream.t1})


def lidar_to_frame(cloud: PointCloud, cam: CameraIntrinsics,
                   rotation: np.ndarray | None = None,
                   translation: np.ndarray | None = None,
                   max_range: float = DEFAULT_MAX_RANGE_M) -> tuple[ModalityFrame, np.ndarray]:
    """Pinhole projection with a nearest-Z z-buffer.

    The frame stores clipped inverse depth (1 m reference) in all channels;
    the returned HxW buffer holds metric depth (inf where no point landed).
    """
    r = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    t = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)
    if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
        raise ConfigurationError("rotation matrix is not orthonormal (deviation > 1e-6)")
    pts = cloud.points @ r.T + t
    keep = (pts[:, 2] > 0) & (np.linalg.norm(pts, axis=1) <= max_range)
    pts = pts[keep]
    # image is (height rows, width cols); u indexes columns
    depth = np.full((cam.height, cam.width), np.inf)
    if len(pts):
        uv = cam.project(pts)
        cols = np.floor(uv[:, 0]).astype(int)
        rows = np.floor(uv[:, 1]).astype(int)
        inside = (cols >= 0) & (cols < cam.width) & (rows >= 0) & (rows < cam.height)
        order = np.argsort(-pts[inside, 2])  # nearest written last wins
        rr, cc, zz = rows[inside][order], cols[inside][order], pts[inside, 2][order]
        depth[rr, cc] = zz
    inv = np.where(np.isfinite(depth), np.clip(1.0 / np.where(depth > 0, depth, 1.0), 0.0, 1.0), 0.0)
    frame = ModalityFrame("lidar", np.repeat(inv[None], 3, axis=0), {"max_range": max_range})
    return frame, depth


def _surface_normals(depth: np.ndarray, cam: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    h, w = depth.shape
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pts = cam.back_project(uu, vv, depth)
    du = np.gradient(pts, axis=1)  # central differences, one-sided at edges
    dv = np.gradient(pts, axis=0)
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    degenerate = norm[..., 0] < 1e-12
    with np.errstate(invalid="ignore"):
        n = np.where(degenerate[..., None], 0.0, n / np.where(norm > 0, norm, 1.0))
    # orient toward the camera: n . p < 0
    flip = (n * pts).sum(axis=-1) > 0
    n[flip] *= -1.0
    return n, degenerate


def depth_to_hha(depth_m: np.ndarray, cam: CameraIntrinsics) -> ModalityFrame:
    """Three-channel depth re-encoding: min/max-normalized disparity, height
    above the lowest back-projected point along the -Y (up) axis, and the
    angle between the surface normal and the up direction mapped to [0,1].

    Gravity is assumed to be the camera -Y axis; degenerate-normal pixels get
    the flat default angle pi/2."""
    depth_m = np.asarray(depth_m, dtype=np.float64)
    if (depth_m <= 0).any():
        i = np.unravel_index(int(np.argmax(depth_m <= 0)), depth_m.shape)
        raise DataError(f"nonpositive depth {depth_m[i]} at pixel {i}")
    disp = 1.0 / depth_m
    lo, hi = disp.min(), disp.max()
    # uniform depth: every pixel is equally "nearest"
    c_disp = np.ones_like(disp) if hi == lo else (disp - lo) / (hi - lo)

    h, w = depth_m.shape
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pts = cam.back_project(uu, vv, depth_m)
    up_coord = -pts[..., 1]  # height along -Y
    span = up_coord.max() - up_coord.min()
    c_height = (up_coord - up_coord.min()) / span if span > 0 else np.zeros_like(up_coord)

    normals, degenerate = _surface_normals(depth_m, cam)
    up = np.array([0.0, -1.0, 0.0])
    cosang = np.clip((normals * up).sum(axis=-1), -1.0, 1.0)
    angle = np.arccos(cosang)
    angle[degenerate] = math.pi / 2.0
    c_angle = angle / math.pi
    return ModalityFrame("hha", np.stack([c_disp, c_height, c_angle]), {})


# -- failure-mode simulators -------------------------------------------------


def motion_blur_kernel(length: int, angle: float) -> np.ndarray:
    if length < 1:
        raise ConfigurationError(f"blur length must be >= 1, got {length}")
    if length == 1:
        return np.ones((1, 1))
    k = np.zeros((length, length))
    c = (length - 1) / 2.0
    for i in range(length):
        off = i - c
        x = c + off * math.cos(angle)
        y = c + off * math.sin(angle)
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yy, xx = y0 + dy, x0 + dx
                if 0 <= yy < length and 0 <= xx < length:
                    k[yy, xx] += wx * wy
    return k / k.sum()


def corrupt_motion_blur(frame: ModalityFrame, length: int, angle: float) -> ModalityFrame:
    kern = motion_blur_kernel(length, angle)
    out = np.stack([ndimage.convolve(ch, kern, mode="constant") for ch in frame.data])
    meta = dict(frame.meta)
    meta.setdefault("corruptions", []).append("mb")
    return ModalityFrame(frame.kind, np.clip(out, 0.0, 1.0), meta)


def corrupt_exposure(frame: ModalityFrame, gain: float) -> ModalityFrame:
    """Over-exposure for gain > 1, under-exposure for gain < 1."""
    if gain <= 0:
        raise ConfigurationError(f"exposure gain must be positive, got {gain}")
    meta = dict(frame.meta)
    meta.setdefault("corruptions", []).append("oe" if gain > 1 else "ue")
    return ModalityFrame(frame.kind, np.clip(frame.data * gain, 0.0, 1.0), meta)


def corrupt_lidar_jitter(cloud: PointCloud, seed: int,
                         max_angle_deg: float = 1.0,
                         max_trans_m: float = 0.01) -> PointCloud:
    """One rigid jitter per cloud: per-axis rotation angles uniform in
    [-max_angle_deg, max_angle_deg] and translations in [-max_trans_m, +]."""
    rng = np.random.default_rng(seed)
    ang = np.radians(rng.uniform(-max_angle_deg, max_angle_deg, size=3))
    trans = rng.uniform(-max_trans_m, max_trans_m, size=3)

    def rot(axis, a):
        c, s = math.cos(a), math.sin(a)
        m = np.eye(3)
        i, j = [(1, 2), (0, 2), (0, 1)][axis]
        m[i, i] = c
        m[j, j] = c
        m[i, j] = -s
        m[j, i] = s
        return m

    r = rot(0, ang[0]) @ rot(1, ang[1]) @ rot(2, ang[2])
    return PointCloud(cloud.points @ r.T + trans, cloud.class_ids)


def lidar_jitter_params(seed: int, max_angle_deg: float = 1.0,
                        max_trans_m: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """The (angles_deg, translations_m) a given seed will apply."""
    rng = np.random.default_rng(seed)
    ang = rng.uniform(-max_angle_deg, max_angle_deg, size=3)
    trans = rng.uniform(-max_trans_m, max_trans_m, size=3)
    return ang, trans


def corrupt_event_lowres(stream: EventStream, factor: float = 0.25) -> EventStream:
    """Collapse event coordinates onto a factor-scaled grid with floor rounding."""
    if not 0.0 < factor <= 1.0:
        raise ConfigurationError(f"resolution factor must be in (0, 1], got {factor}")
    ev = stream.events.copy()
    if ev.size:
        ev[:, 0] = np.floor(ev[:, 0] * factor).astype(np.int64)
        ev[:, 1] = np.floor(ev[:, 1] * factor).astype(np.int64)
    w = None if stream.width is None else max(1, int(math.ceil(stream.width * factor)))
    h = None if stream.height is None else max(1, int(math.ceil(stream.height * factor)))
    return EventStream(ev, stream.t0, stream.t1, stream.threshold, w, h)


def lowres_event_frame(stream: EventStream, width: int, height: int,
                       factor: float = 0.25) -> ModalityFrame:
    """Render at the reduced resolution, then nearest-upsample back."""
    low = corrupt_event_lowres(stream, factor)
    lw = max(1, int(math.ceil(width * factor)))
    lh = max(1, int(math.ceil(height * factor)))
    small = events_to_frame(low, lw, lh)
    rows = np.floor(np.arange(height) * lh / height).astype(int)
    cols = np.floor(np.arange(width) * lw / width).astype(int)
    data = small.data[:, rows][:, :, cols]
    return ModalityFrame("event", data, {"lowres_factor": factor})
