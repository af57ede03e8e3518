"""Rotation helpers: nearest-rotation projection, yaw bins, camera-local yaw
zeroing, geodesic distance and the orthogonalized MSE rotation loss.

Conventions: world frame is Z-up. Yaw/pitch/roll are intrinsic ZYX angles,
``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``. Yaw bins are half-open five degree
intervals ``[5k, 5k + 5)``.
"""
from __future__ import annotations

import math
import warnings

import numpy as np
import torch

N_YAW_BINS = 72
YAW_BIN_DEG = 360.0 / N_YAW_BINS
SVD_DEGENERACY_TOL = 1e-9
GIMBAL_TOL = 1e-6


class DegenerateInputWarning(UserWarning):
    """Nearest rotation is not unique; an arbitrary minimizer was returned."""


class GimbalDegenerateWarning(UserWarning):
    """Pitch is at +-90 degrees, so yaw and roll are not separable."""


def symmetric_orthogonalize(m) -> np.ndarray:
    """Frobenius-nearest proper rotation to a 3x3 matrix (or 9-vector, row-major)."""
    m = np.asarray(m, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix must be finite")
    u, s, vt = np.linalg.svd(m)
    d = 1.0 if np.linalg.det(u @ vt) > 0 else -1.0
    scale = max(s[0], 1.0)
    # with a reflection the last singular direction is flipped, so a tie
    # between the two smallest singular values leaves the flip ambiguous
    if (d < 0 and s[1] - s[2] <= SVD_DEGENERACY_TOL * scale) or s[1] + s[2] <= SVD_DEGENERACY_TOL * scale:
        warnings.warn(f"degenerate nearest-rotation problem, singular values {s}", DegenerateInputWarning, stacklevel=2)
    u = u.copy()
    u[:, 2] *= d
    return u @ vt


def is_degenerate(m, tol: float = SVD_DEGENERACY_TOL) -> bool:
    m = np.asarray(m, dtype=np.float64).reshape(3, 3)
    u, s, vt = np.linalg.svd(m)
    scale = max(s[0], 1.0)
    d = np.linalg.det(u @ vt)
    return bool((d < 0 and s[1] - s[2] <= tol * scale) or s[1] + s[2] <= tol * scale)


def is_rotation(r, tol: float = 1e-9) -> bool:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    return bool(np.abs(r.T @ r - np.eye(3)).max() <= tol and abs(np.linalg.det(r) - 1.0) <= tol)


def yaw_bin(yaw_deg: float) -> int:
    if not math.isfinite(yaw_deg):
        raise ValueError("yaw must be finite")
    # float modulo can return 360.0 for tiny negative inputs
    return math.floor((yaw_deg % 360.0) / YAW_BIN_DEG) % N_YAW_BINS


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def from_euler_zyx(yaw: float, pitch: float, roll: float) -> np.ndarray:
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def euler_zyx(r) -> tuple[float, float, float]:
    """(yaw, pitch, roll) in radians with ``r = Rz(yaw) Ry(pitch) Rx(roll)``."""
    r = np.asarray(r, dtype=np.float64)
    pitch = math.asin(max(-1.0, min(1.0, -r[2, 0])))
    if math.cos(pitch) < GIMBAL_TOL:
        warnings.warn("pitch at +-90 degrees, yaw/roll split is arbitrary", GimbalDegenerateWarning, stacklevel=2)
        # fold all rotation about the vertical into roll, yaw := 0
        yaw = 0.0
        roll = math.atan2(-r[1, 2], r[1, 1])
        return yaw, pitch, roll
    yaw = math.atan2(r[1, 0], r[0, 0])
    roll = math.atan2(r[2, 1], r[2, 2])
    return yaw, pitch, roll


def camera_local(r, cam) -> np.ndarray:
    return np.asarray(cam, dtype=np.float64).T @ np.asarray(r, dtype=np.float64)


def camera_local_yaw_deg(r, cam) -> float:
    return math.degrees(euler_zyx(camera_local(r, cam))[0])


def zero_yaw_camera_local(r, cam) -> np.ndarray:
    """Remove the yaw of ``r`` measured in the camera frame ``cam``; pitch and roll are kept."""
    cam = np.asarray(cam, dtype=np.float64)
    _, pitch, roll = euler_zyx(camera_local(r, cam))
    return cam @ rot_y(pitch) @ rot_x(roll)


def geodesic_error(ra, rb) -> float:
    ra = np.asarray(ra, dtype=np.float64)
    rb = np.asarray(rb, dtype=np.float64)
    c = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return float(math.acos(max(-1.0, min(1.0, c))))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from a random unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


# -- differentiable versions --------------------------------------------------

def orthogonalize_torch(m: torch.Tensor) -> torch.Tensor:
    """Batched symmetric orthogonalization; ``m`` has shape (..., 9) or (..., 3, 3)."""
    if m.shape[-1] == 9:
        m = m.reshape(*m.shape[:-1], 3, 3)
    u, _, vh = torch.linalg.svd(m)
    d = torch.sign(torch.linalg.det(u @ vh))
    d = torch.where(d == 0, torch.ones_like(d), d)
    flip = torch.ones(*d.shape, 3, dtype=m.dtype, device=m.device)
    flip = torch.cat([flip[..., :2], d.unsqueeze(-1)], dim=-1)
    return (u * flip.unsqueeze(-2)) @ vh


def rotation_loss(pred9, target) -> torch.Tensor:
    """Mean squared error between the orthogonalized prediction and the target rotation.

    Batched inputs return the mean over the batch.
    """
    pred9 = torch.as_tensor(pred9)
    target = torch.as_tensor(target, dtype=pred9.dtype)
    r = orthogonalize_torch(pred9)
    target = target.reshape(r.shape)
    return ((r - target) ** 2).mean()
