import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from cccae import headmotion as hm
from cccae.errors import DataError


def rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def cloud(seed, m=6):
    return np.random.default_rng(seed).standard_normal((m, 3)) * 0.1


# --------------------------------------------------------------------------
# rigid rotation

def test_identity_cloud():
    a = cloud(0)
    assert np.allclose(hm.estimate_rigid_rotation(a, a), np.eye(3), atol=1e-12)


def test_quarter_turn_about_z():
    a = cloud(1)
    R = hm.estimate_rigid_rotation(a, a @ rz(np.pi / 2).T)
    assert np.allclose(R, rz(np.pi / 2), atol=1e-10)


def test_random_rotations_with_noise():
    rng = np.random.default_rng(2)
    Qs = Rotation.random(200, random_state=3).as_matrix()
    for Q in Qs:
        a = rng.standard_normal((8, 3)) * 0.1
        b = a @ Q.T + 1e-6 * rng.standard_normal(a.shape)
        assert np.linalg.norm(hm.estimate_rigid_rotation(a, b) - Q) < 1e-4


def test_translation_invariance():
    a = cloud(4)
    Q = Rotation.from_rotvec([0.3, -0.2, 0.5]).as_matrix()
    b = a @ Q.T
    R1 = hm.estimate_rigid_rotation(a, b)
    R2 = hm.estimate_rigid_rotation(a + [1.0, 2.0, 3.0], b - [0.5, 0.1, 7.0])
    assert np.allclose(R1, R2, atol=1e-12)


def test_reflection_guard():
    a = cloud(5)
    mirrored = a * [1.0, 1.0, -1.0]
    R = hm.estimate_rigid_rotation(a, mirrored)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)


def test_degenerate_clouds_rejected():
    with pytest.raises(DataError):
        hm.estimate_rigid_rotation(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DataError, match="degenerate"):
        hm.estimate_rigid_rotation(line, line)
    with pytest.raises(DataError):
        hm.estimate_rigid_rotation(cloud(0, 4), cloud(1, 5))


# --------------------------------------------------------------------------
# rotation vectors

def test_rotvec_of_identity():
    assert np.array_equal(hm.rotmat_to_rotvec(np.eye(3)), np.zeros(3))


def test_rotvec_of_quarter_turn():
    assert np.allclose(hm.rotmat_to_rotvec(rz(np.pi / 2)), [0, 0, np.pi / 2], atol=1e-12)


def test_rotmat_of_zero_and_half_turn():
    assert np.array_equal(hm.rotvec_to_rotmat(np.zeros(3)), np.eye(3))
    assert np.allclose(hm.rotvec_to_rotmat([0, 0, np.pi]), np.diag([-1.0, -1.0, 1.0]), atol=1e-12)


def test_rotmat_matches_scipy():
    for v in np.random.default_rng(6).uniform(-2, 2, (50, 3)):
        assert np.allclose(hm.rotvec_to_rotmat(v), Rotation.from_rotvec(v).as_matrix(), atol=1e-12)


def test_matrix_round_trip_500():
    for R in Rotation.random(500, random_state=7).as_matrix():
        R2 = hm.rotvec_to_rotmat(hm.rotmat_to_rotvec(R))
        assert np.linalg.norm(R2 - R) < 1e-9


def _random_rotvec(seed, max_angle):
    rng = np.random.default_rng(seed)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0, max_angle)


@given(st.integers(0, 2**31))
@settings(max_examples=200, deadline=None)
def test_vector_round_trip(seed):
    v = _random_rotvec(seed, np.pi - 1e-6)
    assert np.linalg.norm(hm.rotmat_to_rotvec(hm.rotvec_to_rotmat(v)) - v) < 1e-9


@given(st.floats(1e-12, 1e-6), st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_small_angle_round_trip(angle, seed):
    v = _random_rotvec(seed, 1.0)
    v *= angle / np.linalg.norm(v)
    assert np.linalg.norm(hm.rotmat_to_rotvec(hm.rotvec_to_rotmat(v)) - v) < 1e-12


@pytest.mark.parametrize("eps", [0.0, 1e-9, 1e-7, 3e-6])
def test_near_half_turn(eps):
    axis = np.array([0.3, -0.5, 0.8])
    axis /= np.linalg.norm(axis)
    v = axis * (np.pi - eps)
    out = hm.rotmat_to_rotvec(hm.rotvec_to_rotmat(v))
    assert np.linalg.norm(hm.rotvec_to_rotmat(out) - hm.rotvec_to_rotmat(v)) < 1e-9
    assert np.linalg.norm(out) <= np.pi + 1e-12
    if eps > 0:
        assert np.linalg.norm(out - v) < 1e-8


def test_canonicalize_large_angle():
    v = np.array([0.0, 0.0, 1.5 * np.pi])
    assert np.allclose(hm.canonicalize_rotvec(v), [0, 0, -0.5 * np.pi])


def test_non_orthonormal_rejected():
    with pytest.raises(DataError):
        hm.rotmat_to_rotvec(np.eye(3) * 1.01)
    with pytest.raises(DataError):
        hm.rotmat_to_rotvec(np.diag([1.0, 1.0, -1.0]))


# --------------------------------------------------------------------------
# marker sequences

def test_markers_identical_frames():
    a = cloud(8)
    m = hm.markers_to_motion([a] * 5)
    assert np.array_equal(m.data, np.zeros((5, 3)))


def test_markers_single_frame():
    assert np.array_equal(hm.markers_to_motion([cloud(9)]).data, np.zeros((1, 3)))


def test_markers_recover_generator():
    a = cloud(10)
    t = np.arange(100) / 100
    vs = np.column_stack([0.2 * np.sin(2 * np.pi * t), 0.1 * np.cos(3 * t), 0.3 * t])
    vs[0] = 0.0
    frames = [a @ Rotation.from_rotvec(v).as_matrix().T + [0.0, 0.1 * i, 0.0] for i, v in enumerate(vs)]
    m = hm.markers_to_motion(frames)
    assert np.max(np.abs(m.data - vs)) < 1e-6


def test_markers_reference_frame_is_zero():
    a = cloud(11)
    frames = [a @ Rotation.from_rotvec([0.1 * i, 0, 0]).as_matrix().T for i in range(6)]
    m = hm.markers_to_motion(frames, ref_index=3)
    assert np.array_equal(m.data[3], np.zeros(3))
    assert m.data[5, 0] == pytest.approx(0.2, abs=1e-9)


def test_markers_bad_reference():
    with pytest.raises(DataError):
        hm.markers_to_motion([cloud(0)], ref_index=2)
    with pytest.raises(DataError):
        hm.markers_to_motion([])


# --------------------------------------------------------------------------
# velocity and SD

def test_velocity_constant_and_ramp():
    assert np.array_equal(hm.velocity(hm.HeadMotionSequence(np.ones((10, 3)))), np.zeros((9, 3)))
    ramp = 0.01 * np.arange(50.0)[:, None] * np.ones(3)
    assert np.allclose(hm.velocity(hm.HeadMotionSequence(ramp)), 1.0, atol=1e-12)


def test_velocity_matches_difference():
    x = np.random.default_rng(12).standard_normal((30, 3))
    v = hm.velocity(hm.HeadMotionSequence(x))
    expect = np.array([[(x[t + 1, d] - x[t, d]) * 100 for d in range(3)] for t in range(29)])
    assert np.allclose(v, expect, atol=1e-12, rtol=0)


def test_velocity_needs_two_frames():
    with pytest.raises(DataError):
        hm.velocity(hm.HeadMotionSequence(np.zeros((1, 3))))


def test_sd_profile_constant():
    sd = hm.sd_profile(hm.HeadMotionSequence(np.full((10, 3), 0.2)))
    assert np.allclose(sd, 0.0, atol=1e-15)


def test_sd_profile_sine():
    T, a = 2000, 0.3
    x = np.zeros((T, 3))
    x[:, 0] = a * np.sin(2 * np.pi * np.arange(T) / T)
    assert hm.sd_profile(hm.HeadMotionSequence(x))[0] == pytest.approx(a / np.sqrt(2), rel=0.02)


def _two_pass_sd(col):
    m = sum(col) / len(col)
    return np.sqrt(sum((c - m) ** 2 for c in col) / len(col))


def test_sd_profile_two_pass_oracle():
    x = np.random.default_rng(13).standard_normal((200, 3))
    sd = hm.sd_profile(hm.HeadMotionSequence(x))
    vel = np.diff(x, axis=0) * 100
    expect = [_two_pass_sd(x[:, d]) for d in range(3)] + [_two_pass_sd(vel[:, d]) for d in range(3)]
    assert np.allclose(sd, expect, atol=1e-10, rtol=0)


# --------------------------------------------------------------------------
# CSV

def test_motion_csv_round_trip(tmp_path):
    x = np.random.default_rng(14).standard_normal((25, 3))
    hm.write_motion_csv(tmp_path / "m.csv", hm.HeadMotionSequence(x))
    text = (tmp_path / "m.csv").read_text()
    assert text.startswith("t,rx,ry,rz\n")
    back = hm.read_motion_csv(tmp_path / "m.csv")
    assert np.array_equal(back.data, x) and back.frame_rate == 100


def test_marker_csv_round_trip(tmp_path):
    frames = [cloud(i, 4) for i in range(3)]
    hm.write_marker_csv(tmp_path / "k.csv", [0.0, 0.01, 0.02], frames)
    assert (tmp_path / "k.csv").read_text().startswith("t,m0x,m0y,m0z,m1x")
    times, back = hm.read_marker_csv(tmp_path / "k.csv")
    assert np.array_equal(times, [0.0, 0.01, 0.02])
    assert all(np.array_equal(a, b) for a, b in zip(frames, back))


def test_motion_csv_bad_header(tmp_path):
    (tmp_path / "bad.csv").write_text("t,a,b,c\n0,1,2,3\n")
    with pytest.raises(DataError):
        hm.read_motion_csv(tmp_path / "bad.csv")
