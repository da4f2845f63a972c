"""Seeded procedural multimodal micro-scenes.

A scene is a ground plane below the camera plus a handful of fronto-parallel
colored shapes (rectangles, ellipses, triangles) at sampled depths. Every
modality derives from the same analytic geometry: RGB with per-class albedo
and depth shading, an exact depth map, events from the log-intensity change
under a small camera motion, and a LiDAR cloud from ray-casting the same
surfaces. Labels come from object identity; class 0 is ground.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .errors import ConfigurationError, DataError
from .frames import (CameraIntrinsics, EventStream, ModalityFrame, PointCloud,
                     corrupt_event_lowres, corrupt_exposure,
                     corrupt_lidar_jitter, corrupt_motion_blur,
                     depth_to_frame, events_to_frame, lidar_to_frame,
                     lowres_event_frame)

CORRUPTIONS = ("mb", "oe", "ue", "lj", "el")
EL_FACTOR = 0.25
UE_GAIN = 0.25
OE_GAIN = 4.0
MB_LENGTH = 5


@dataclass
class SceneSpec:
    seed: int = 0
    size: int = 64
    num_classes: int = 6
    object_count: tuple[int, int] = (2, 5)
    motion_px: tuple[float, float] = (3.0, 1.0)
    lidar_channels: int = 16
    lidar_azimuth_steps: int = 128
    fov_degrees: float = 91.0
    d_max: float = 60.0
    camera_height: float = 1.5

    def __post_init__(self):
        if self.size % 32:
            raise ConfigurationError(f"scene size {self.size} must be divisible by 32")
        if not 2 <= self.num_classes <= 25:
            raise ConfigurationError(f"num_classes must be in [2, 25], got {self.num_classes}")
        self.object_count = tuple(self.object_count)
        self.motion_px = tuple(self.motion_px)

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fov_degrees, self.size, self.size)


@dataclass
class SceneObject:
    shape: str  # rect | ellipse | tri
    center: tuple[float, float]  # X, Y at the object's plane
    half: tuple[float, float]
    z: float
    class_id: int

    def covers(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        cx, cy = self.center
        sx, sy = self.half
        if self.shape == "rect":
            return (np.abs(x - cx) <= sx) & (np.abs(y - cy) <= sy)
        if self.shape == "ellipse":
            return ((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2 <= 1.0
        # upright triangle: apex at (cx, cy - sy), base at cy + sy
        t = (y - (cy - sy)) / (2.0 * sy)
        return (t >= 0) & (t <= 1) & (np.abs(x - cx) <= sx * t)


@dataclass
class SceneSample:
    spec: SceneSpec
    objects: list
    rgb: ModalityFrame
    depth_map: np.ndarray
    label: np.ndarray
    events: EventStream
    cloud: PointCloud
    palette: np.ndarray

    def modality_frame(self, name: str) -> np.ndarray:
        """3xHxW model input for one modality."""
        s = self.spec.size
        if name == "rgb":
            return self.rgb.data
        if name == "depth":
            return depth_to_frame(self.depth_map, self.spec.d_max).data
        if name == "event":
            return events_to_frame(self.events, s, s).data
        if name == "lidar":
            return lidar_to_frame(self.cloud, self.spec.camera())[0].data
        raise ConfigurationError(f"unknown modality {name!r}")


def _sample_objects(spec: SceneSpec, rng: np.random.Generator) -> list[SceneObject]:
    lo, hi = spec.object_count
    n = int(rng.integers(lo, hi + 1)) if hi > lo else lo
    objects = []
    for _ in range(n):
        z = float(rng.uniform(4.0, 25.0))
        extent = z * math.tan(math.radians(spec.fov_degrees) / 2.0)
        objects.append(SceneObject(
            shape=str(rng.choice(["rect", "ellipse", "tri"])),
            center=(float(rng.uniform(-0.6, 0.6) * extent),
                    float(rng.uniform(-0.5, 0.4) * extent)),
            half=(float(rng.uniform(0.08, 0.3) * extent),
                  float(rng.uniform(0.08, 0.3) * extent)),
            z=z,
            class_id=int(rng.integers(1, spec.num_classes)),
        ))
    return objects


def _render(spec: SceneSpec, objects: list[SceneObject], palette: np.ndarray,
            shift_px: tuple[float, float] = (0.0, 0.0)):
    """Analytic depth/label/RGB at pixel centers; shift_px pans the camera."""
    cam = spec.camera()
    s = spec.size
    uu, vv = np.meshgrid(np.arange(s) + 0.5, np.arange(s) + 0.5)
    uu = uu + shift_px[0]
    vv = vv + shift_px[1]
    x_dir = (uu - cam.u_0) / cam.f_x
    y_dir = (vv - cam.v_0) / cam.f_y

    depth = np.full((s, s), np.inf)
    label = np.zeros((s, s), dtype=np.int64)
    for obj in sorted(objects, key=lambda o: o.z):
        mask = obj.covers(x_dir * obj.z, y_dir * obj.z) & ~np.isfinite(depth)
        depth[mask] = obj.z
        label[mask] = obj.class_id
    open_px = ~np.isfinite(depth)
    ground = y_dir > spec.camera_height / spec.d_max
    gd = np.where(ground, spec.camera_height / np.maximum(y_dir, 1e-9), spec.d_max)
    depth[open_px] = np.minimum(gd, spec.d_max)[open_px]

    shade = 0.35 + 0.65 * np.exp(-depth / 40.0)
    rgb = palette[label].transpose(2, 0, 1) * shade[None]
    return np.clip(rgb, 0.0, 1.0), depth, label


def _synthesize_events(spec: SceneSpec, rgb_a: np.ndarray, rgb_b: np.ndarray,
                       rng: np.random.Generator) -> EventStream:
    lum_a = 0.2126 * rgb_a[0] + 0.7152 * rgb_a[1] + 0.0722 * rgb_a[2]
    lum_b = 0.2126 * rgb_b[0] + 0.7152 * rgb_b[1] + 0.0722 * rgb_b[2]
    delta = np.log(lum_b + 1e-3) - np.log(lum_a + 1e-3)
    ys, xs = np.nonzero(np.abs(delta) > EVENT_THRESHOLD_LOG)
    rows = []
    for y, x in zip(ys, xs):
        t = int(rng.integers(0, 1000))
        rows.append((x, y, t, 1 if delta[y, x] > 0 else -1))
    ev = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
    return EventStream(ev, 0, 1000, width=spec.size, height=spec.size)


EVENT_THRESHOLD_LOG = 0.3  # matches the sensor's +-event threshold


def _raycast_lidar(spec: SceneSpec, objects: list[SceneObject]) -> PointCloud:
    elev = np.radians(np.linspace(-30.0, 10.0, spec.lidar_channels))
    azim = np.linspace(-math.pi, math.pi, spec.lidar_azimuth_steps, endpoint=False)
    pts, cls = [], []
    for el in elev:
        for az in azim:
            d = np.array([math.cos(el) * math.sin(az), -math.sin(el), math.cos(el) * math.cos(az)])
            best_t, best_c = math.inf, 0
            if d[2] > 1e-9:
                for obj in objects:
                    t = obj.z / d[2]
                    if t < best_t and obj.covers(np.array(t * d[0]), np.array(t * d[1])):
                        best_t, best_c = t, obj.class_id
            if d[1] > 1e-9:
                t = spec.camera_height / d[1]
                if t < best_t:
                    best_t, best_c = t, 0
            if best_t <= 100.0:
                pts.append(best_t * d)
                cls.append(best_c)
    if not pts:
        return PointCloud(np.empty((0, 3)), np.empty(0, dtype=np.int64))
    return PointCloud(np.asarray(pts), np.asarray(cls, dtype=np.int64))


def generate(spec: SceneSpec) -> SceneSample:
    rng = np.random.default_rng(spec.seed)
    palette = 0.15 + 0.8 * rng.uniform(size=(spec.num_classes, 3))
    objects = _sample_objects(spec, rng)
    rgb, depth, label = _render(spec, objects, palette)
    rgb_shift, _, _ = _render(spec, objects, palette, shift_px=spec.motion_px)
    events = _synthesize_events(spec, rgb, rgb_shift, rng)
    cloud = _raycast_lidar(spec, objects)
    return SceneSample(spec, objects, ModalityFrame("rgb", rgb, {"seed": spec.seed}),
                       depth, label, events, cloud, palette)


# -- dataset splits ----------------------------------------------------------


def _write_sample(sample: SceneSample, out_dir, menu) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    spec = sample.spec
    fileio.write_ppm(os.path.join(out_dir, "rgb.ppm"), sample.rgb.data)
    fileio.write_pgm16(os.path.join(out_dir, "depth.pgm"),
                       np.clip(sample.depth_map / spec.d_max, 0.0, 1.0))
    fileio.write_evt(os.path.join(out_dir, "event.evt"), sample.events.events)
    fileio.write_xyz(os.path.join(out_dir, "lidar.xyz"), sample.cloud.points,
                     sample.cloud.class_ids)
    fileio.write_pgm8(os.path.join(out_dir, "label.pgm"), sample.label)
    vdir = os.path.join(out_dir, "variants")
    os.makedirs(vdir, exist_ok=True)
    written = []
    for tag in menu:
        if tag == "mb":
            out = corrupt_motion_blur(sample.rgb, MB_LENGTH, 0.4)
            fileio.write_ppm(os.path.join(vdir, "rgb_mb.ppm"), out.data)
        elif tag == "oe":
            out = corrupt_exposure(sample.rgb, OE_GAIN)
            fileio.write_ppm(os.path.join(vdir, "rgb_oe.ppm"), out.data)
        elif tag == "ue":
            out = corrupt_exposure(sample.rgb, UE_GAIN)
            fileio.write_ppm(os.path.join(vdir, "rgb_ue.ppm"), out.data)
        elif tag == "lj":
            jit = corrupt_lidar_jitter(sample.cloud, seed=spec.seed)
            fileio.write_xyz(os.path.join(vdir, "lidar_lj.xyz"), jit.points, jit.class_ids)
        elif tag == "el":
            low = corrupt_event_lowres(sample.events, EL_FACTOR)
            fileio.write_evt(os.path.join(vdir, "event_el.evt"), low.events)
        else:
            raise ConfigurationError(f"unknown corruption tag {tag!r}")
        written.append(tag)
    return written


def make_split(spec: SceneSpec, out_root, n_train: int, n_val: int,
               corruption_menu=CORRUPTIONS) -> dict:
    """Generate a train/val dataset on disk and return the manifest."""
    if n_train < 1 or n_val < 0:
        raise ConfigurationError("n_train must be >= 1 and n_val >= 0")
    menu = tuple(corruption_menu)
    manifest = {
        "seed": spec.seed,
        "image_size": spec.size,
        "num_classes": spec.num_classes,
        "d_max": spec.d_max,
        "fov_degrees": spec.fov_degrees,
        "el_factor": EL_FACTOR,
        "corruptions": list(menu),
        "splits": {},
    }
    index = 0
    for split, count in (("train", n_train), ("val", n_val)):
        entries = []
        for _ in range(count):
            sid = f"{split}_{index:04d}"
            sub = SceneSpec(**{**spec.__dict__, "seed": spec.seed * 100003 + index})
            sample = generate(sub)
            sdir = os.path.join(out_root, split, sid)
            try:
                variants = _write_sample(sample, sdir, menu)
            except OSError as exc:
                raise DataError(f"failed writing {sdir}: {exc}") from exc
            entries.append({"id": sid, "dir": os.path.join(split, sid),
                            "seed": sub.seed, "variants": variants})
            index += 1
        manifest["splits"][split] = entries
    with open(os.path.join(out_root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_manifest(root) -> dict:
    path = os.path.join(root, "manifest.json")
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read manifest at {path}: {exc}") from exc


def load_sample(root, entry: dict, manifest: dict, variant: str | None = None) -> dict:
    """Modality frames + label for one manifest entry.

    variant None loads the clean sample; a corruption tag substitutes the
    matching corrupted raw file before frame conversion.
    """
    sdir = os.path.join(root, entry["dir"])
    size = manifest["image_size"]
    d_max = manifest["d_max"]
    cam = CameraIntrinsics(manifest["fov_degrees"], size, size)
    if variant is not None and variant not in entry["variants"]:
        raise DataError(f"sample {entry['id']} has no variant {variant!r}")

    if variant in ("mb", "oe", "ue"):
        rgb = fileio.read_ppm(os.path.join(sdir, "variants", f"rgb_{variant}.ppm"))
    else:
        rgb = fileio.read_ppm(os.path.join(sdir, "rgb.ppm"))
    depth = fileio.read_pgm16(os.path.join(sdir, "depth.pgm")) * d_max
    depth_frame = depth_to_frame(np.maximum(depth, 1e-6), d_max).data
    if variant == "el":
        ev = fileio.read_evt(os.path.join(sdir, "variants", "event_el.evt"))
        factor = manifest["el_factor"]
        low = max(1, int(math.ceil(size * factor)))
        small = events_to_frame(EventStream(ev, 0, 1000), low, low)
        rows = np.floor(np.arange(size) * low / size).astype(int)
        event_frame = small.data[:, rows][:, :, rows]
    else:
        ev = fileio.read_evt(os.path.join(sdir, "event.evt"))
        event_frame = events_to_frame(EventStream(ev, 0, 1000), size, size).data
    name = "lidar_lj.xyz" if variant == "lj" else "lidar.xyz"
    sub = "variants" if variant == "lj" else ""
    pts, cls = fileio.read_xyz(os.path.join(sdir, sub, name) if sub else os.path.join(sdir, name))
    lidar_frame = lidar_to_frame(PointCloud(pts, cls), cam)[0].data
    label = fileio.read_pgm8(os.path.join(sdir, "label.pgm"))
    return {"rgb": rgb, "depth": depth_frame, "event": event_frame,
            "lidar": lidar_frame, "label": label}


def file_hashes(root) -> dict[str, str]:
    """SHA-256 of every file under root, keyed by relative path."""
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in sorted(files):
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out
