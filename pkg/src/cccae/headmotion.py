"""Head pose from motion-capture markers: rigid rotations, rotation vectors,
velocities and standard-deviation profiles."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError

MOTION_RATE = 100.0


@dataclass
class HeadMotionSequence:
    """T x 3 rotation vectors (radians) sampled at ``frame_rate``."""

    data: np.ndarray
    frame_rate: float = MOTION_RATE

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.data)):
            raise DataError("head motion contains non-finite values")

    def __len__(self):
        return self.data.shape[0]


def _as_cloud(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise DataError(f"marker frame must be M x 3, got shape {p.shape}")
    if p.shape[0] < 3:
        raise DataError(f"need at least 3 markers, got {p.shape[0]}")
    return p


def estimate_rigid_rotation(ref, cur) -> np.ndarray:
    """Least-squares rotation taking the centred ``ref`` cloud onto ``cur``.

    SVD of the 3x3 cross-covariance with a determinant sign fix, so the
    result is always a proper rotation even for mirrored or noisy clouds.
    """
    a = _as_cloud(ref)
    b = _as_cloud(cur)
    if a.shape != b.shape:
        raise DataError(f"marker count mismatch: {a.shape[0]} vs {b.shape[0]}")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    for name, c in (("reference", a), ("current", b)):
        s = np.linalg.svd(c, compute_uv=False)
        if s[1] <= 1e-9 * max(s[0], 1e-300):
            raise DataError(f"{name} marker cloud is degenerate (collinear or coincident)")
    H = b.T @ a
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(U @ Vt))
    if d == 0:
        d = 1.0
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def _skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_rotmat(v) -> np.ndarray:
    """Rodrigues' formula."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(v)
    K = _skew(v)
    if theta < 1e-8:
        # series expansion of sin(t)/t and (1-cos t)/t^2
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def canonicalize_rotvec(v) -> np.ndarray:
    """Map a rotation vector with angle above pi to the equivalent one below."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v)
    if theta > np.pi:
        v = v * (theta - 2 * np.pi) / theta
    return v


def rotmat_to_rotvec(R, tol: float = 1e-6) -> np.ndarray:
    """Inverse of Rodrigues' formula with explicit handling near 0 and pi."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise DataError("rotation matrix must be a finite 3x3 array")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise DataError("matrix is not a proper rotation within tolerance")
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(w)  # sin(theta)
    c = 0.5 * (np.trace(R) - 1.0)  # cos(theta)
    theta = np.arctan2(s, c)
    if theta < 1e-7:
        return w.copy()
    if abs(theta - np.pi) < 1e-5:
        # axis from the symmetric part: (R+R^T)/2 = c I + (1-c) a a^T
        sym = 0.5 * (R + R.T)
        aat = (sym - c * np.eye(3)) / (1.0 - c)
        i = int(np.argmax(np.diag(aat)))
        axis = aat[:, i] / np.sqrt(aat[i, i])
        j = int(np.argmax(np.abs(w)))
        if axis[j] * w[j] < 0:
            axis = -axis
        return canonicalize_rotvec(theta * axis / np.linalg.norm(axis))
    return canonicalize_rotvec(w * (theta / s))


def markers_to_motion(frames, ref_index: int = 0, frame_rate: float = MOTION_RATE) -> HeadMotionSequence:
    """Rotation of every frame relative to ``frames[ref_index]``."""
    frames = list(frames)
    if not frames:
        raise DataError("no marker frames")
    if not -len(frames) <= ref_index < len(frames):
        raise DataError(f"ref_index {ref_index} out of range for {len(frames)} frames")
    ref = np.asarray(frames[ref_index], dtype=np.float64)
    out = np.zeros((len(frames), 3))
    for t, cur in enumerate(frames):
        if np.array_equal(cur, ref):
            # exact zero instead of SVD round-off
            continue
        out[t] = rotmat_to_rotvec(estimate_rigid_rotation(ref, cur))
    return HeadMotionSequence(out, frame_rate)


def velocity(motion: HeadMotionSequence) -> np.ndarray:
    """First difference scaled to radians per second, shape (T-1, 3)."""
    if len(motion) < 2:
        raise DataError("velocity needs at least 2 frames")
    return np.diff(motion.data, axis=0) * motion.frame_rate


def sd_profile(motion: HeadMotionSequence) -> np.ndarray:
    """Population SD of X, Y, Z and of their velocities (6 values)."""
    if len(motion) < 2:
        raise DataError("SD profile needs at least 2 frames")
    return np.concatenate([motion.data.std(axis=0), velocity(motion).std(axis=0)])


# --------------------------------------------------------------------------
# CSV files

def _read_numeric_csv(path, expect_prefix):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    header = [h.strip() for h in rows[0]]
    if header[: len(expect_prefix)] != expect_prefix:
        raise FormatError(f"{path}: header must start with {','.join(expect_prefix)}")
    try:
        body = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if body.size == 0:
        body = np.zeros((0, len(header)))
    if body.shape[1] != len(header):
        raise FormatError(f"{path}: rows do not match header width {len(header)}")
    return header, body


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(x)) for x in r) + "\n")


def read_motion_csv(path) -> HeadMotionSequence:
    header, body = _read_numeric_csv(path, ["t", "rx", "ry", "rz"])
    rate = MOTION_RATE
    if body.shape[0] >= 2:
        dt = np.median(np.diff(body[:, 0]))
        if dt > 0:
            rate = float(np.round(1.0 / dt, 6))
    return HeadMotionSequence(body[:, 1:4], rate)


def write_motion_csv(path, motion: HeadMotionSequence) -> None:
    t = np.arange(len(motion)) / motion.frame_rate
    _write_csv(path, ["t", "rx", "ry", "rz"], np.column_stack([t, motion.data]))


def read_marker_csv(path):
    """Marker CSV ``t,m0x,m0y,m0z,m1x,...`` -> (times, list of M x 3 frames)."""
    header, body = _read_numeric_csv(path, ["t"])
    n = len(header) - 1
    if n < 9 or n % 3:
        raise FormatError(f"{path}: expected 3 coordinates for each of >= 3 markers")
    return body[:, 0], [row[1:].reshape(-1, 3) for row in body]


def write_marker_csv(path, times, frames) -> None:
    m = np.asarray(frames[0]).shape[0]
    header = ["t"] + [f"m{i}{ax}" for i in range(m) for ax in "xyz"]
    _write_csv(path, header, [np.concatenate([[t], np.ravel(f)]) for t, f in zip(times, frames)])
