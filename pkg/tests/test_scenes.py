import json
import math
import os

import numpy as np
import pytest

from amfuse import fileio
from amfuse.errors import ConfigurationError, DataError
from amfuse.frames import depth_to_frame
from amfuse.scenes import (CORRUPTIONS, EL_FACTOR, UE_GAIN, SceneSpec,
                           file_hashes, generate, load_manifest, load_sample,
                           make_split)

SPEC = SceneSpec(seed=7, size=64)


# -- spec validation ---------------------------------------------------------


def test_size_must_be_divisible_by_32():
    with pytest.raises(ConfigurationError):
        SceneSpec(size=50)


@pytest.mark.parametrize("k", [0, 1, 26])
def test_class_count_bounds(k):
    with pytest.raises(ConfigurationError):
        SceneSpec(num_classes=k)


def test_camera_uses_scene_size():
    cam = SPEC.camera()
    assert cam.width == cam.height == 64
    assert cam.u_0 == 32.0


# -- generation determinism --------------------------------------------------


def test_same_seed_bitwise_identical():
    a = generate(SceneSpec(seed=3))
    b = generate(SceneSpec(seed=3))
    assert np.array_equal(a.rgb.data, b.rgb.data)
    assert np.array_equal(a.depth_map, b.depth_map)
    assert np.array_equal(a.label, b.label)
    assert np.array_equal(a.events.events, b.events.events)
    assert np.array_equal(a.cloud.points, b.cloud.points)


def test_different_seeds_differ():
    a = generate(SceneSpec(seed=1))
    b = generate(SceneSpec(seed=2))
    assert not np.array_equal(a.rgb.data, b.rgb.data)


# -- geometric consistency ---------------------------------------------------


def test_labels_in_range():
    s = generate(SPEC)
    assert s.label.min() >= 0
    assert s.label.max() < SPEC.num_classes


def test_object_pixels_carry_object_depth():
    s = generate(SPEC)
    zs = {o.z for o in s.objects}
    vals = np.unique(s.depth_map[s.label > 0])
    for v in vals:
        assert any(abs(v - z) < 1e-12 for z in zs)


def test_ground_depth_matches_plane_equation():
    s = generate(SPEC)
    cam = SPEC.camera()
    vv = np.arange(SPEC.size) + 0.5
    y_dir = (vv - cam.v_0) / cam.f_y
    mask = (s.label == 0) & (s.depth_map < SPEC.d_max - 1e-9)
    ys, xs = np.nonzero(mask)
    assert ys.size > 0
    got = s.depth_map[ys, xs] * y_dir[ys]
    np.testing.assert_allclose(got, SPEC.camera_height, rtol=1e-12)


def test_rgb_is_shaded_palette():
    s = generate(SPEC)
    shade = 0.35 + 0.65 * np.exp(-s.depth_map / 40.0)
    expect = np.clip(s.palette[s.label].transpose(2, 0, 1) * shade[None], 0, 1)
    np.testing.assert_allclose(s.rgb.data, expect, atol=1e-15)
    assert s.rgb.data.min() >= 0.0 and s.rgb.data.max() <= 1.0


def test_events_are_in_bounds_and_nonempty():
    s = generate(SPEC)
    ev = s.events.events
    assert ev.shape[0] > 0
    assert ev[:, 0].min() >= 0 and ev[:, 0].max() < SPEC.size
    assert ev[:, 1].min() >= 0 and ev[:, 1].max() < SPEC.size
    assert ev[:, 2].min() >= 0 and ev[:, 2].max() < 1000
    assert set(np.unique(ev[:, 3])) <= {-1, 1}


def test_lidar_cloud_lies_on_scene_surfaces():
    # every return must sit exactly on the surface its class claims: ground
    # hits at Y = camera_height, object hits on the object's plane inside
    # its silhouette, and all ranges within the 100 m cull
    s = generate(SPEC)
    pts, cls = s.cloud.points, s.cloud.class_ids
    assert pts.shape[0] > 0
    assert (np.linalg.norm(pts, axis=1) <= 100.0 + 1e-9).all()
    ground = cls == 0
    assert ground.any()
    np.testing.assert_allclose(pts[ground, 1], SPEC.camera_height, rtol=1e-9)
    for p, c in zip(pts[~ground], cls[~ground]):
        hits = [o for o in s.objects
                if o.class_id == c and abs(o.z - p[2]) < 1e-9
                and o.covers(np.array(p[0]), np.array(p[1]))]
        assert hits, f"point {p} not on any class-{c} object"


def test_modality_frames_shapes():
    s = generate(SPEC)
    for name in ("rgb", "depth", "event", "lidar"):
        arr = s.modality_frame(name)
        assert arr.shape == (3, 64, 64)
        assert np.isfinite(arr).all()
    with pytest.raises(ConfigurationError):
        s.modality_frame("thermal")


# -- splits on disk ----------------------------------------------------------


@pytest.fixture(scope="module")
def split_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    manifest = make_split(SceneSpec(seed=11, size=32), root, n_train=3, n_val=2)
    return root, manifest


def test_split_layout(split_dir):
    root, manifest = split_dir
    assert len(manifest["splits"]["train"]) == 3
    assert len(manifest["splits"]["val"]) == 2
    entry = manifest["splits"]["train"][0]
    sdir = os.path.join(root, entry["dir"])
    for name in ("rgb.ppm", "depth.pgm", "event.evt", "lidar.xyz", "label.pgm"):
        assert os.path.isfile(os.path.join(sdir, name))
    variants = os.listdir(os.path.join(sdir, "variants"))
    assert sorted(variants) == sorted(
        ["rgb_mb.ppm", "rgb_oe.ppm", "rgb_ue.ppm", "lidar_lj.xyz", "event_el.evt"])
    assert entry["variants"] == list(CORRUPTIONS)


def test_manifest_on_disk_matches_return(split_dir):
    root, manifest = split_dir
    with open(os.path.join(root, "manifest.json")) as fh:
        assert json.load(fh) == manifest
    assert load_manifest(root) == manifest


def test_split_regeneration_is_byte_identical(tmp_path):
    spec = SceneSpec(seed=5, size=32)
    make_split(spec, tmp_path / "a", 2, 1)
    make_split(spec, tmp_path / "b", 2, 1)
    assert file_hashes(tmp_path / "a") == file_hashes(tmp_path / "b")


def test_split_rejects_bad_counts(tmp_path):
    with pytest.raises(ConfigurationError):
        make_split(SPEC, tmp_path, 0, 1)


def test_load_manifest_missing(tmp_path):
    with pytest.raises(DataError):
        load_manifest(tmp_path)


# -- loading -----------------------------------------------------------------


def test_load_clean_sample(split_dir):
    root, manifest = split_dir
    entry = manifest["splits"]["train"][1]
    data = load_sample(root, entry, manifest)
    spec = SceneSpec(seed=entry["seed"], size=32)
    sample = generate(spec)
    assert np.array_equal(data["label"], sample.label)
    for name in ("rgb", "depth", "event", "lidar"):
        assert data[name].shape == (3, 32, 32)
    # depth survives 16-bit quantization of d/d_max
    ref = depth_to_frame(sample.depth_map, spec.d_max).data
    assert np.abs(data["depth"] - ref).max() < 1e-3
    # events are text integers, so the frame is exact
    assert np.array_equal(data["event"], sample.modality_frame("event"))


def test_load_underexposed_variant(split_dir):
    root, manifest = split_dir
    entry = manifest["splits"]["train"][0]
    clean = load_sample(root, entry, manifest)
    ue = load_sample(root, entry, manifest, variant="ue")
    assert np.abs(ue["rgb"] - UE_GAIN * clean["rgb"]).max() < 2 / 255
    assert np.array_equal(ue["label"], clean["label"])


def test_load_lowres_event_variant_is_blocky(split_dir):
    root, manifest = split_dir
    entry = manifest["splits"]["train"][0]
    el = load_sample(root, entry, manifest, variant="el")["event"]
    low = max(1, math.ceil(32 * EL_FACTOR))
    block = 32 // low
    for by in range(low):
        for bx in range(low):
            tile = el[:, by * block:(by + 1) * block, bx * block:(bx + 1) * block]
            assert (tile == tile[:, :1, :1]).all()


def test_load_jitter_variant_loads_and_differs(split_dir):
    root, manifest = split_dir
    entry = manifest["splits"]["train"][0]
    clean = load_sample(root, entry, manifest)
    lj = load_sample(root, entry, manifest, variant="lj")
    assert lj["lidar"].shape == clean["lidar"].shape
    assert not np.array_equal(lj["lidar"], clean["lidar"])


def test_load_unknown_variant_rejected(split_dir):
    root, manifest = split_dir
    entry = manifest["splits"]["train"][0]
    with pytest.raises(DataError):
        load_sample(root, entry, manifest, variant="fog")
