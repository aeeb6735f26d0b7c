import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splatsim.scene import (
    CameraPose,
    FrameState,
    Gaussian3D,
    Intrinsics,
    Scene,
    TileLayout,
    downsample_frame,
    frame_header,
    quat_exp,
    quat_mul,
    quat_to_rotmat,
    read_frame,
    read_scene,
    reconstruct_covariance,
    rotmat_to_quat,
    write_frame,
    write_scene,
)

unit_quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1).map(
    lambda q: q / np.linalg.norm(q)
)
scales = arrays(np.float64, 3, elements=st.floats(0.01, 3.0))


def gaussian(q=(1, 0, 0, 0), s=(1, 1, 1), gid=0):
    return Gaussian3D(gid, np.zeros(3), np.array(s, float), np.array(q, float), 0.5, np.full(3, 0.5))


def test_identity_covariance():
    assert np.array_equal(reconstruct_covariance(gaussian()), np.eye(3))


def test_axis_aligned_covariance():
    np.testing.assert_allclose(reconstruct_covariance(gaussian(s=(2, 1, 1))), np.diag([4.0, 1, 1]), atol=1e-15)


@given(unit_quats, scales)
def test_covariance_eigenvalues_are_squared_scales(q, s):
    cov = reconstruct_covariance(gaussian(q, s))
    assert np.max(np.abs(cov - cov.T)) <= 1e-12
    eig = np.linalg.eigvalsh(cov)
    np.testing.assert_allclose(np.sort(eig), np.sort(s**2), rtol=1e-9, atol=1e-12)
    assert eig.min() >= s.min() ** 2 * (1 - 1e-9)


@given(unit_quats, scales)
def test_covariance_ignores_quaternion_sign(q, s):
    np.testing.assert_allclose(reconstruct_covariance(gaussian(q, s)), reconstruct_covariance(gaussian(-q, s)), atol=1e-12)


@given(unit_quats)
def test_rotmat_roundtrip(q):
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(quat_to_rotmat(rotmat_to_quat(R)), R, atol=1e-9)


def test_quat_exp_composes_about_one_axis():
    a = quat_exp([0, 0, 0.3])
    b = quat_exp([0, 0, 0.2])
    np.testing.assert_allclose(quat_mul(a, b), quat_exp([0, 0, 0.5]), atol=1e-15)


@pytest.mark.parametrize(
    "field,value",
    [("scale", [1.0, 0.0, 1.0]), ("rotation", [1.0, 0.1, 0.0, 0.0]), ("opacity", 1.5), ("color", [0.0, 1.2, 0.0])],
)
def test_gaussian_validation_rejects(field, value):
    g = gaussian()
    setattr(g, field, np.asarray(value, dtype=float) if field != "opacity" else value)
    with pytest.raises(ValueError):
        g.validate()


def test_pose_rejects_bad_inputs():
    intr = Intrinsics(10, 10, 5, 5, 16, 16)
    with pytest.raises(ValueError):
        CameraPose(np.array([1.0, 0.01, 0, 0]), np.zeros(3), intr)
    with pytest.raises(ValueError):
        CameraPose(np.array([1.0, 0, 0, 0]), np.zeros(3), Intrinsics(0, 10, 5, 5, 16, 16))


def test_look_at_points_optical_axis_at_target():
    intr = Intrinsics(10, 10, 5, 5, 16, 16)
    eye = np.array([1.0, -2.0, -3.0])
    pose = CameraPose.look_at(eye, np.zeros(3), intr)
    np.testing.assert_allclose(pose.center, eye, atol=1e-12)
    p = pose.R @ np.zeros(3) + pose.translation
    np.testing.assert_allclose(p[:2], 0, atol=1e-12)
    assert p[2] == pytest.approx(np.linalg.norm(eye))


def test_layout_covers_every_pixel_once():
    layout = TileLayout(40, 24)
    tiles = np.zeros(layout.num_tiles, int)
    subs = np.zeros(layout.num_subtiles, int)
    for i in range(24):
        for j in range(40):
            tiles[layout.tile_of(i, j)] += 1
            subs[layout.subtile_of(i, j)] += 1
    assert subs.sum() == tiles.sum() == 40 * 24
    assert set(subs) == {16}
    assert layout.tile_size // layout.subtile_size == 4


def test_frame_state_checks_buffers():
    intr = Intrinsics(10, 10, 5, 5, 16, 8)
    pose = CameraPose(np.array([1.0, 0, 0, 0]), np.zeros(3), intr)
    FrameState(0, True, (16, 8), np.zeros((8, 16, 3)), np.zeros((8, 16)), pose)
    with pytest.raises(ValueError):
        FrameState(0, True, (16, 8), np.zeros((16, 8, 3)), np.zeros((8, 16)), pose)


def test_downsample_is_decimation():
    color = np.arange(8 * 8 * 3, dtype=float).reshape(8, 8, 3)
    depth = np.arange(64, dtype=float).reshape(8, 8)
    c, d = downsample_frame(color, depth, 4)
    assert c.shape == (2, 2, 3)
    np.testing.assert_array_equal(d, depth[::4, ::4])


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_subnormal=False)


@given(
    st.integers(1, 6).flatmap(
        lambda n: st.tuples(
            arrays(np.float64, (n, 3), elements=finite),
            arrays(np.float64, (n, 3), elements=st.floats(1e-6, 1e3)),
            arrays(np.float64, (n, 4), elements=finite),
            arrays(np.float64, n, elements=st.floats(0, 1)),
            arrays(np.float64, (n, 3), elements=st.floats(0, 1)),
        )
    )
)
def test_scene_file_roundtrip_is_bit_exact(tmp_path_factory, data):
    means, sc, rot, op, col = data
    scene = Scene.from_arrays(means, sc, rot, op, col, ids=np.arange(len(means)) * 7 + 3)
    path = tmp_path_factory.mktemp("scene") / "s.gscene"
    write_scene(path, scene)
    back = read_scene(path)
    for name in ("ids", "means", "scales", "rotations", "opacities", "colors"):
        assert np.array_equal(getattr(back, name), getattr(scene, name)), name


def test_scene_file_header_and_errors(tmp_path):
    scene = Scene.from_gaussians([gaussian(gid=5)])
    path = tmp_path / "one.gscene"
    write_scene(path, scene)
    lines = path.read_text().splitlines()
    assert lines[0] == "GSCENE v1 1"
    assert len(lines[1].split()) == 15
    path.write_text("GSCENE v1 2\n" + lines[1] + "\n")
    with pytest.raises(ValueError):
        read_scene(path)


def test_frame_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    color = rng.integers(0, 256, (6, 10, 3)) / 255.0
    depth = rng.uniform(0, 5, (6, 10)).astype(np.float32).astype(np.float64)
    path = tmp_path / "f.gframe"
    write_frame(path, color, depth)
    assert frame_header(path) == (10, 6)
    c, d = read_frame(path)
    np.testing.assert_array_equal(c, color)
    np.testing.assert_array_equal(d, depth)
    assert path.stat().st_size == len(b"GFRAME v1 10 6\n") + 60 * 3 + 60 * 4


def test_scene_ids_are_never_reused():
    scene = Scene.from_arrays(np.zeros((3, 3)), np.ones((3, 3)), np.tile([1.0, 0, 0, 0], (3, 1)), np.ones(3) * 0.5, np.zeros((3, 3)))
    scene = scene.subset(np.array([True, False, False]))
    new = scene.append(np.zeros((1, 3)), np.ones((1, 3)), [[1.0, 0, 0, 0]], [0.5], np.zeros((1, 3)))
    assert new.tolist() == [3]
