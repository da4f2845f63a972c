import math

import numpy as np
import pytest

from amfuse import fileio
from amfuse.errors import ConfigurationError, DataError, FormatError
from amfuse.frames import (CameraIntrinsics, EventStream, ModalityFrame,
                           PointCloud, corrupt_event_lowres, corrupt_exposure,
                           corrupt_lidar_jitter, corrupt_motion_blur,
                           depth_to_frame, depth_to_hha, events_to_frame,
                           lidar_jitter_params, lidar_to_frame,
                           lowres_event_frame)


# -- depth_to_frame ----------------------------------------------------------


def test_depth_endpoints():
    d = np.array([[50.0]])
    assert depth_to_frame(d, 50.0).data[0, 0, 0] == pytest.approx(1.0, abs=1e-15)
    tiny = np.array([[1e-12]])
    assert depth_to_frame(tiny, 50.0).data[0, 0, 0] == pytest.approx(0.0, abs=1e-10)


def test_depth_log_midpoint():
    d_max = 80.0
    mid = math.sqrt(1.0 + d_max) - 1.0
    out = depth_to_frame(np.array([[mid]]), d_max)
    assert out.data[0, 0, 0] == pytest.approx(0.5, abs=1e-12)


def test_depth_monotone_and_replicated():
    d = np.array([[1.0, 2.0, 10.0]])
    out = depth_to_frame(d, 20.0).data
    assert (np.diff(out[0, 0]) > 0).all()
    assert (out[0] == out[1]).all() and (out[1] == out[2]).all()


def test_depth_rejects_nonpositive():
    with pytest.raises(DataError):
        depth_to_frame(np.array([[0.0]]), 10.0)


# -- events_to_frame ---------------------------------------------------------


def test_empty_stream_zero_frame():
    frame = events_to_frame(EventStream(np.empty((0, 4))), 8, 8)
    assert (frame.data == 0).all()


def test_last_event_wins():
    ev = np.array([[2, 3, 1, 1], [2, 3, 2, -1]])
    frame = events_to_frame(EventStream(ev), 8, 8)
    assert frame.data[0, 3, 2] == 1.0  # red: negative was last
    assert frame.data[2, 3, 2] == 0.0
    assert frame.data[1].sum() == 0.0  # green always zero


def test_same_timestamp_later_entry_wins():
    ev = np.array([[1, 1, 5, -1], [1, 1, 5, 1]])
    frame = events_to_frame(EventStream(ev), 4, 4)
    assert frame.data[2, 1, 1] == 1.0 and frame.data[0, 1, 1] == 0.0


@pytest.mark.parametrize("seed", range(50))
def test_events_match_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    n = rng.integers(1, 60)
    ev = np.stack([rng.integers(0, 6, n), rng.integers(0, 6, n),
                   rng.integers(0, 1000, n), rng.choice([-1, 1], n)], axis=1)
    frame = events_to_frame(EventStream(ev, t1=1000), 6, 6)

    expected = np.zeros((3, 6, 6))
    for x in range(6):
        for y in range(6):
            here = [(t, i, p) for i, (xx, yy, t, p) in enumerate(ev) if xx == x and yy == y]
            if here:
                _, _, p = sorted(here)[-1]
                expected[2 if p == 1 else 0, y, x] = 1.0
    np.testing.assert_array_equal(frame.data, expected)


def test_out_of_bounds_event_names_index():
    ev = np.array([[0, 0, 1, 1], [9, 0, 2, 1]])
    with pytest.raises(DataError, match="event 1"):
        events_to_frame(EventStream(ev), 4, 4)


# -- lidar_to_frame ----------------------------------------------------------


def test_optical_axis_hits_principal_point():
    cam = CameraIntrinsics(90.0, 8, 8)
    cloud = PointCloud(np.array([[0.0, 0.0, 10.0]]))
    frame, depth = lidar_to_frame(cloud, cam)
    row, col = int(cam.v_0), int(cam.u_0)
    assert depth[row, col] == 10.0
    assert frame.data[0, row, col] == pytest.approx(0.1)


def test_reference_focal_length():
    cam = CameraIntrinsics(91.0, 1042, 1042)
    expected = 1042.0 / (2.0 * math.tan(91.0 * math.pi / 360.0))
    assert abs(cam.f_x - expected) / expected < 1e-12
    assert cam.f_x == pytest.approx(511.98, abs=0.01)
    assert cam.f_x == cam.f_y


def test_z_buffer_keeps_nearest():
    cam = CameraIntrinsics(90.0, 8, 8)
    cloud = PointCloud(np.array([[0.0, 0.0, 8.0], [0.0, 0.0, 5.0]]))
    _, depth = lidar_to_frame(cloud, cam)
    assert depth[4, 4] == 5.0


def test_points_behind_and_beyond_range_discarded():
    cam = CameraIntrinsics(90.0, 8, 8)
    cloud = PointCloud(np.array([[0.0, 0.0, -5.0], [0.0, 0.0, 200.0]]))
    _, depth = lidar_to_frame(cloud, cam)
    assert not np.isfinite(depth).any()


def test_non_orthonormal_rotation_rejected():
    cam = CameraIntrinsics(90.0, 8, 8)
    cloud = PointCloud(np.array([[0.0, 0.0, 5.0]]))
    with pytest.raises(ConfigurationError):
        lidar_to_frame(cloud, cam, rotation=np.eye(3) * 1.1)


def test_projection_round_trip_half_pixel():
    rng = np.random.default_rng(0)
    cam = CameraIntrinsics(91.0, 64, 64)
    pts = np.stack([rng.uniform(-3, 3, 1000), rng.uniform(-3, 3, 1000),
                    rng.uniform(4, 50, 1000)], axis=1)
    _, depth = lidar_to_frame(cloud := PointCloud(pts), cam)
    rows, cols = np.nonzero(np.isfinite(depth))
    back = cam.back_project(cols + 0.5, rows + 0.5, depth[rows, cols])
    uv = cam.project(back.reshape(-1, 3))
    assert np.abs(uv[:, 0] - (cols + 0.5)).max() <= 0.5
    assert np.abs(uv[:, 1] - (rows + 0.5)).max() <= 0.5


# -- depth_to_hha ------------------------------------------------------------


def test_hha_fronto_parallel_plane_angle_half():
    cam = CameraIntrinsics(90.0, 16, 16)
    hha = depth_to_hha(np.full((16, 16), 5.0), cam)
    np.testing.assert_allclose(hha.data[2], 0.5, atol=1e-6)


def test_hha_nearest_pixel_disparity_one():
    cam = CameraIntrinsics(90.0, 8, 8)
    d = np.full((8, 8), 10.0)
    d[3, 4] = 2.0
    hha = depth_to_hha(d, cam)
    assert hha.data[0, 3, 4] == 1.0
    assert hha.data[0].max() == 1.0


def test_hha_ground_plane_angle_near_zero():
    # horizontal plane below the camera: depth chosen so Y = h for each row
    cam = CameraIntrinsics(90.0, 32, 32)
    h_cam = 2.0
    vv = np.arange(32, dtype=float)[:, None] + 0.5
    y_dir = (vv - cam.v_0) / cam.f_y
    rows_below = y_dir[:, 0] > 0.05
    depth = np.where(y_dir > 0.05, h_cam / np.maximum(y_dir, 0.05), 50.0)
    depth = np.broadcast_to(depth, (32, 32)).copy()
    hha = depth_to_hha(depth, cam)
    interior = hha.data[2][rows_below, :][2:-2, 2:-2]
    assert interior.mean() < 0.05


def test_hha_height_channel_normalized():
    cam = CameraIntrinsics(90.0, 8, 8)
    rng = np.random.default_rng(1)
    hha = depth_to_hha(rng.uniform(2, 20, (8, 8)), cam)
    assert hha.data[1].min() == 0.0 and hha.data[1].max() == pytest.approx(1.0)


# -- corruptors --------------------------------------------------------------


def test_motion_blur_length_one_identity():
    rng = np.random.default_rng(0)
    frame = ModalityFrame("rgb", rng.uniform(size=(3, 8, 8)))
    out = corrupt_motion_blur(frame, 1, 0.7)
    np.testing.assert_array_equal(out.data, frame.data)


def test_motion_blur_preserves_constant_interior():
    frame = ModalityFrame("rgb", np.full((3, 20, 20), 0.5))
    out = corrupt_motion_blur(frame, 5, 0.3)
    np.testing.assert_allclose(out.data[:, 8:12, 8:12], 0.5, atol=1e-12)


def test_overexposure_saturates():
    frame = ModalityFrame("rgb", np.full((3, 4, 4), 0.5))
    out = corrupt_exposure(frame, 4.0)
    assert (out.data == 1.0).all()


def test_underexposure_scales():
    frame = ModalityFrame("rgb", np.full((3, 4, 4), 0.8))
    out = corrupt_exposure(frame, 0.25)
    np.testing.assert_allclose(out.data, 0.2, atol=1e-15)


def test_exposure_rejects_nonpositive_gain():
    frame = ModalityFrame("rgb", np.zeros((3, 2, 2)))
    with pytest.raises(ConfigurationError):
        corrupt_exposure(frame, 0.0)


def test_jitter_zero_ranges_identity():
    cloud = PointCloud(np.random.default_rng(0).normal(size=(20, 3)))
    out = corrupt_lidar_jitter(cloud, seed=3, max_angle_deg=0.0, max_trans_m=0.0)
    np.testing.assert_allclose(out.points, cloud.points, atol=1e-12)


@pytest.mark.parametrize("chunk", range(4))
def test_jitter_bounds_1000_seeds(chunk):
    for seed in range(chunk * 250, (chunk + 1) * 250):
        ang, trans = lidar_jitter_params(seed)
        assert (np.abs(ang) <= 1.0).all()
        assert (np.abs(trans) <= 0.01).all()


def test_jitter_deterministic():
    cloud = PointCloud(np.random.default_rng(1).normal(size=(10, 3)))
    a = corrupt_lidar_jitter(cloud, seed=7).points
    b = corrupt_lidar_jitter(cloud, seed=7).points
    assert (a == b).all()


def test_event_lowres_active_pixel_bound():
    rng = np.random.default_rng(2)
    n = 200
    ev = np.stack([rng.integers(0, 32, n), rng.integers(0, 32, n),
                   rng.integers(0, 1000, n), rng.choice([-1, 1], n)], axis=1)
    stream = EventStream(ev, t1=1000)
    full = events_to_frame(stream, 32, 32)
    low = events_to_frame(corrupt_event_lowres(stream, 0.25), 8, 8)
    full_active = (full.data.sum(axis=0) > 0).sum()
    low_active = (low.data.sum(axis=0) > 0).sum()
    assert low_active <= full_active
    assert low_active <= 8 * 8


def test_event_lowres_no_collision_exact():
    ev = np.array([[0, 0, 1, 1], [16, 16, 2, -1], [28, 4, 3, 1]])
    stream = EventStream(ev, t1=1000)
    low = events_to_frame(corrupt_event_lowres(stream, 0.25), 8, 8)
    assert (low.data.sum(axis=0) > 0).sum() == 3


def test_lowres_frame_upsamples_back():
    ev = np.array([[4, 4, 1, 1]])
    frame = lowres_event_frame(EventStream(ev, t1=1000), 32, 32, 0.25)
    assert frame.data.shape == (3, 32, 32)
    # the single low-res cell covers a 4x4 block at full resolution
    assert frame.data[2, 4:8, 4:8].sum() == 16.0


def test_lowres_factor_validation():
    with pytest.raises(ConfigurationError):
        corrupt_event_lowres(EventStream(np.empty((0, 4))), 0.0)


# -- file formats ------------------------------------------------------------


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    frame = np.rint(rng.uniform(size=(3, 5, 7)) * 255) / 255.0
    p = tmp_path / "x.ppm"
    fileio.write_ppm(p, frame)
    np.testing.assert_allclose(fileio.read_ppm(p), frame, atol=1e-12)


def test_pgm16_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    arr = np.rint(rng.uniform(size=(4, 6)) * 65535) / 65535.0
    p = tmp_path / "d.pgm"
    fileio.write_pgm16(p, arr)
    np.testing.assert_allclose(fileio.read_pgm16(p), arr, atol=1e-12)


def test_pgm8_round_trip(tmp_path):
    labels = np.arange(12).reshape(3, 4) % 5
    p = tmp_path / "l.pgm"
    fileio.write_pgm8(p, labels)
    np.testing.assert_array_equal(fileio.read_pgm8(p), labels)


def test_xyz_round_trip(tmp_path):
    pts = np.array([[1.0, -2.5, 3.25], [0.1, 0.2, 0.3]])
    cls = np.array([4, 7])
    p = tmp_path / "c.xyz"
    fileio.write_xyz(p, pts, cls)
    rp, rc = fileio.read_xyz(p)
    np.testing.assert_allclose(rp, pts, atol=1e-9)
    np.testing.assert_array_equal(rc, cls)


def test_evt_round_trip(tmp_path):
    ev = np.array([[1, 2, 30, 1], [4, 5, 60, -1]])
    p = tmp_path / "e.evt"
    fileio.write_evt(p, ev)
    np.testing.assert_array_equal(fileio.read_evt(p), ev)


def test_bad_files_rejected(tmp_path):
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P6\n4 4\n255\nxx")
    with pytest.raises(FormatError):
        fileio.read_ppm(p)
    q = tmp_path / "bad.evt"
    q.write_text("1 2 3\n")
    with pytest.raises(FormatError):
        fileio.read_evt(q)
