"""Rotation representations, the quaternion rotation distance, and the pose loss.

The distance between two rotations is arccos(|q1 . q2|), a pseudo-metric on
unit quaternions (q and -q are the same rotation) and a metric on SO(3), with
range [0, pi/2]. It is evaluated here in a sign-folded atan2 form that is
algebraically identical but keeps full precision near 0 and pi/2, where a
clamped arccos of the dot product loses digits and cannot return an exact 0
for antipodal inputs.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DataError, NumericsError, RotationError

TWO_PI = 2.0 * math.pi
HALF_PI = 0.5 * math.pi

# |dot| is kept this far below 1 inside the gradient path so the arccos
# derivative stays finite near perfect predictions.
_DOT_CLAMP = 1.0 - 1e-7
# raw head outputs shorter than this contribute distance pi/2 with zero grad
_MIN_RAW_NORM = 1e-8


class Azimuth:
    """Heading angle in radians, canonicalized to [0, 2*pi) on construction."""

    __slots__ = ("theta",)

    def __init__(self, theta: float):
        t = float(theta) % TWO_PI
        if t >= TWO_PI:  # fmod of a tiny negative can round up to 2*pi itself
            t = 0.0
        self.theta = t

    def __eq__(self, other):
        return isinstance(other, Azimuth) and self.theta == other.theta

    def __hash__(self):
        return hash(self.theta)

    def __repr__(self):
        return f"Azimuth({self.theta!r})"


class Quaternion:
    """Unit-norm rotation quaternion (w, x, y, z); q and -q are the same rotation."""

    __slots__ = ("w", "x", "y", "z")

    def __init__(self, w: float, x: float, y: float, z: float):
        self.w = float(w)
        self.x = float(x)
        self.y = float(y)
        self.z = float(z)

    def norm(self) -> float:
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n == 0.0:
            raise RotationError("zero-norm quaternion does not define a rotation")
        return Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    def dot(self, other: "Quaternion") -> float:
        return self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z

    def __neg__(self):
        return Quaternion(-self.w, -self.x, -self.y, -self.z)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def __repr__(self):
        return f"Quaternion({self.w!r}, {self.x!r}, {self.y!r}, {self.z!r})"


def quat_from_azimuth(azimuth) -> Quaternion:
    """Rotation about the vertical axis: (cos t/2, 0, 0, sin t/2)."""
    t = azimuth.theta if isinstance(azimuth, Azimuth) else Azimuth(azimuth).theta
    h = 0.5 * t
    return Quaternion(math.cos(h), 0.0, 0.0, math.sin(h))


def quat_dist(q1: Quaternion, q2: Quaternion) -> float:
    """Rotation distance arccos(|q1 . q2|) in [0, pi/2]; symmetric, sign-invariant."""
    u = q1.normalized()
    v = q2.normalized()
    if u.dot(v) < 0.0:
        v = -v
    dm = math.sqrt((u.w - v.w) ** 2 + (u.x - v.x) ** 2 + (u.y - v.y) ** 2 + (u.z - v.z) ** 2)
    dp = math.sqrt((u.w + v.w) ** 2 + (u.x + v.x) ** 2 + (u.y + v.y) ** 2 + (u.z + v.z) ** 2)
    return 2.0 * math.atan2(dm, dp)


def azimuth_dist(t1, t2) -> float:
    """Ground-plane rotation distance arccos(|cos((t1 - t2) / 2)|) in [0, pi/2].

    Equals the distance to the nearest multiple of pi of the half-angle
    difference, which math.remainder delivers without the arccos(cos(...))
    precision loss near coincident angles.
    """
    a1 = t1.theta if isinstance(t1, Azimuth) else Azimuth(t1).theta
    a2 = t2.theta if isinstance(t2, Azimuth) else Azimuth(t2).theta
    return abs(math.remainder(0.5 * (a1 - a2), math.pi))


def negate_azimuth(azimuth) -> Azimuth:
    """(2*pi - t) mod 2*pi; the pose of a left-right mirrored target."""
    t = azimuth.theta if isinstance(azimuth, Azimuth) else Azimuth(azimuth).theta
    return Azimuth(-t)


# ---------------------------------------------------------------------------
# batch variants (float64 ndarrays), used by the pose loss and the test suites


def quat_dist_batch(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Row-wise quat_dist for (N, 4) arrays."""
    a = np.asarray(q1, dtype=np.float64)
    b = np.asarray(q2, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 4:
        raise DataError(f"expected matching (N, 4) arrays, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise RotationError("zero-norm quaternion does not define a rotation")
    u = a / na[:, None]
    v = b / nb[:, None]
    v = np.where((u * v).sum(axis=1)[:, None] < 0.0, -v, v)
    dm = np.linalg.norm(u - v, axis=1)
    dp = np.linalg.norm(u + v, axis=1)
    return 2.0 * np.arctan2(dm, dp)


def azimuth_dist_batch(t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
    half = 0.5 * (np.asarray(t1, dtype=np.float64) - np.asarray(t2, dtype=np.float64))
    return np.abs(half - np.round(half / math.pi) * math.pi)


def azimuth_to_target(truth: np.ndarray) -> np.ndarray:
    """Truth azimuths (N,) -> half-angle pairs (cos t/2, sin t/2) of shape (N, 2)."""
    t = 0.5 * np.asarray(truth, dtype=np.float64)
    return np.stack([np.cos(t), np.sin(t)], axis=1)


def pose_loss(pred_raw, truth):
    """Summed rotation distance between normalized raw predictions and truth poses.

    ``pred_raw`` is (N, 2) for ground-plane mode -- rows (a, b) normalize to
    the quaternion (a, 0, 0, b)/||(a, b)|| -- or (N, 4) for full rotations.
    ``truth`` is (N,) azimuth radians in the first case, (N, 4) unit
    quaternions in the second. The gradient flows through the normalization
    and through arccos with |dot| clamped below 1; rows with raw norm under
    1e-8 contribute the maximum distance pi/2 with zero gradient.

    Returns (loss, gradient w.r.t. pred_raw).
    """
    raw = np.asarray(getattr(pred_raw, "data", pred_raw), dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] not in (2, 4):
        raise DataError(f"pred_raw must be (N, 2) or (N, 4), got shape {raw.shape}")
    n, pd = raw.shape
    tr = np.asarray(truth, dtype=np.float64)
    if pd == 2:
        if tr.shape != (n,):
            raise DataError(f"expected {n} truth azimuths, got shape {tr.shape}")
        target = azimuth_to_target(tr)
    else:
        if tr.shape != (n, 4):
            raise DataError(f"expected (N, 4) truth quaternions for {n} rows, got shape {tr.shape}")
        tn = np.linalg.norm(tr, axis=1)
        if np.any(tn == 0.0):
            raise RotationError("zero-norm truth quaternion")
        target = tr / tn[:, None]

    r = np.linalg.norm(raw, axis=1)
    ok = r >= _MIN_RAW_NORM
    rsafe = np.where(ok, r, 1.0)
    q = raw / rsafe[:, None]
    dot = (q * target).sum(axis=1)

    sign = np.where(dot < 0.0, -1.0, 1.0)
    v = target * sign[:, None]
    dm = np.linalg.norm(q - v, axis=1)
    dp = np.linalg.norm(q + v, axis=1)
    dist = 2.0 * np.arctan2(dm, dp)
    dist = np.where(ok, dist, HALF_PI)
    loss = float(dist.sum())

    # d dist / d dot = -sign(dot) / sqrt(1 - dot^2), clamped away from |dot| = 1
    c = np.minimum(np.abs(dot), _DOT_CLAMP)
    ddist_ddot = -np.sign(dot) / np.sqrt(1.0 - c * c)
    grad = ddist_ddot[:, None] * (target - dot[:, None] * q) / rsafe[:, None]
    grad[~ok] = 0.0
    _ensure_pose_finite(loss, grad)
    return loss, grad


def _ensure_pose_finite(loss, grad):
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericsError("pose_loss produced non-finite values")
