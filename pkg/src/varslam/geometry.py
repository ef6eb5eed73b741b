"""SE(3) and orientation algebra.

Conventions
-----------
* Euler angles are intrinsic Z-Y-X: ``R = Rz(azimuth) @ Ry(elevation) @ Rx(inplane)``.
* Twists are 6-vectors ``[wx, wy, wz, vx, vy, vz]``: rotation first (radians),
  translation second (meters).
* Trig encodings are stored per axis as ``(cos, sin)`` pairs; the flat
  6-vector layout is ``[c_az, s_az, c_el, s_el, c_in, s_in]``.

Most functions accept batched input with arbitrary leading dimensions so the
optimizer can evaluate many edges at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

PI = math.pi
HALF_PI = 0.5 * math.pi

# Below this angle the trig ratios in exp/log switch to Taylor series.
SMALL_ANGLE = 1e-5
# |R[2, 0]| above this means elevation is at +-pi/2 and azimuth/inplane mix.
GIMBAL_TOL = 1e-9
# se3_log refuses rotation angles within this distance of pi.
CUT_TOL = 1e-6
ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    pass


class GimbalLock(GeometryError):
    """Elevation is too close to +-pi/2 for a unique Euler decomposition."""


class LogNearCut(GeometryError):
    """Rotation angle is too close to pi for a well-defined logarithm."""


class DegenerateTrig(GeometryError):
    """A (cos, sin) pair is too close to the origin to define an angle."""


class InvalidRotation(GeometryError):
    pass


def wrap_angle(a):
    """Wrap angle(s) into (-pi, pi]; -pi maps to +pi."""
    a = np.asarray(a, dtype=float)
    # values already in range pass through untouched, so wrapping is idempotent
    out = np.where((a > -PI) & (a <= PI), a, PI - np.mod(PI - a, 2.0 * PI))
    return float(out) if out.ndim == 0 else out


def _normalize_euler(az: float, el: float, inp: float) -> tuple[float, float, float]:
    el = wrap_angle(el)
    if el > HALF_PI:
        az, el, inp = az + PI, PI - el, inp + PI
    elif el < -HALF_PI:
        az, el, inp = az + PI, -PI - el, inp + PI
    return wrap_angle(az), el, wrap_angle(inp)


@dataclass(frozen=True)
class EulerAngle:
    """Object viewpoint orientation (radians), normalized on construction."""

    azimuth: float = 0.0
    elevation: float = 0.0
    inplane: float = 0.0

    def __post_init__(self):
        az, el, inp = _normalize_euler(float(self.azimuth), float(self.elevation), float(self.inplane))
        object.__setattr__(self, "azimuth", az)
        object.__setattr__(self, "elevation", el)
        object.__setattr__(self, "inplane", inp)

    def as_array(self) -> np.ndarray:
        return np.array([self.azimuth, self.elevation, self.inplane])

    @classmethod
    def from_array(cls, a) -> "EulerAngle":
        a = np.asarray(a, dtype=float)
        return cls(float(a[0]), float(a[1]), float(a[2]))


def check_rotation(r: np.ndarray, tol: float = ORTHO_TOL) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        raise InvalidRotation(f"rotation must be 3x3, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise InvalidRotation("rotation has non-finite entries")
    if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
        raise InvalidRotation("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise InvalidRotation("rotation determinant is not +1")
    return r


@dataclass(frozen=True, eq=False)
class Se3Pose:
    """Rigid-body transform mapping body-frame points into the parent frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = check_rotation(self.rotation).copy()
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise GeometryError("translation has non-finite entries")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Se3Pose":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def transform(self, p) -> np.ndarray:
        return self.rotation @ np.asarray(p, dtype=float) + self.translation

    def __matmul__(self, other: "Se3Pose") -> "Se3Pose":
        return se3_compose(self, other)

    def __repr__(self) -> str:
        q = rotation_to_quaternion(self.rotation)
        return f"Se3Pose(t={np.round(self.translation, 6).tolist()}, q={np.round(q, 6).tolist()})"


# ---------------------------------------------------------------------------
# Axis rotations and Euler angles
# ---------------------------------------------------------------------------


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_array_to_rotation(angles) -> np.ndarray:
    """Batched Z-Y-X Euler (..., 3) -> rotation matrices (..., 3, 3)."""
    angles = np.asarray(angles, dtype=float)
    ca, sa = np.cos(angles[..., 0]), np.sin(angles[..., 0])
    ce, se = np.cos(angles[..., 1]), np.sin(angles[..., 1])
    ci, si = np.cos(angles[..., 2]), np.sin(angles[..., 2])
    r = np.empty(angles.shape[:-1] + (3, 3))
    r[..., 0, 0] = ca * ce
    r[..., 0, 1] = ca * se * si - sa * ci
    r[..., 0, 2] = ca * se * ci + sa * si
    r[..., 1, 0] = sa * ce
    r[..., 1, 1] = sa * se * si + ca * ci
    r[..., 1, 2] = sa * se * ci - ca * si
    r[..., 2, 0] = -se
    r[..., 2, 1] = ce * si
    r[..., 2, 2] = ce * ci
    return r


def euler_to_rotation(e: EulerAngle) -> np.ndarray:
    return euler_array_to_rotation(e.as_array())


def rotation_to_euler_array(r) -> np.ndarray:
    """Batched inverse of :func:`euler_array_to_rotation`.

    Raises GimbalLock if any input has ``|R[2, 0]| > 1 - 1e-9``.
    """
    r = np.asarray(r, dtype=float)
    r20 = r[..., 2, 0]
    if np.any(np.abs(r20) > 1.0 - GIMBAL_TOL):
        raise GimbalLock("elevation at +-pi/2; azimuth and in-plane angle are not separable")
    az = np.arctan2(r[..., 1, 0], r[..., 0, 0])
    el = np.arctan2(-r20, np.hypot(r[..., 0, 0], r[..., 1, 0]))
    inp = np.arctan2(r[..., 2, 1], r[..., 2, 2])
    # atan2 already returns (-pi, pi]; only the -pi tie needs fixing
    return np.stack([wrap_angle(az), el, wrap_angle(inp)], axis=-1)


def rotation_to_euler(r: np.ndarray) -> EulerAngle:
    return EulerAngle.from_array(rotation_to_euler_array(r))


# ---------------------------------------------------------------------------
# SO(3) / SE(3)
# ---------------------------------------------------------------------------


def hat(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    k = np.zeros(w.shape[:-1] + (3, 3))
    k[..., 0, 1] = -w[..., 2]
    k[..., 0, 2] = w[..., 1]
    k[..., 1, 0] = w[..., 2]
    k[..., 1, 2] = -w[..., 0]
    k[..., 2, 0] = -w[..., 1]
    k[..., 2, 1] = w[..., 0]
    return k


def vee(k) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    return np.stack([k[..., 2, 1], k[..., 0, 2], k[..., 1, 0]], axis=-1)


def _exp_coeffs(theta: np.ndarray):
    """A = sin t / t, B = (1 - cos t) / t^2, C = (t - sin t) / t^3."""
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(t)) / (t * t))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (t - np.sin(t)) / (t * t * t))
    return a, b, c


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula, batched over leading dims."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    a, b, _ = _exp_coeffs(theta)
    k = hat(w)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def so3_log(r, check_cut: bool = True) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    v = 0.5 * vee(r - np.swapaxes(r, -1, -2))
    s = np.linalg.norm(v, axis=-1)
    c = 0.5 * (np.trace(r, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)
    if check_cut and np.any(theta >= PI - CUT_TOL):
        raise LogNearCut("rotation angle within 1e-6 of pi")
    small = theta < SMALL_ANGLE
    safe_s = np.where(small, 1.0, s)
    scale = np.where(small, 1.0 + theta * theta / 6.0, theta / safe_s)
    return scale[..., None] * v


def se3_exp_arrays(xi):
    """Batched exp: twists (..., 6) -> (R (..., 3, 3), t (..., 3))."""
    xi = np.asarray(xi, dtype=float)
    w, rho = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(w, axis=-1)
    a, b, c = _exp_coeffs(theta)
    k = hat(w)
    kk = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    r = eye + a[..., None, None] * k + b[..., None, None] * kk
    v = eye + b[..., None, None] * k + c[..., None, None] * kk
    t = np.einsum("...ij,...j->...i", v, rho)
    return r, t


def se3_log_arrays(r, t, check_cut: bool = True) -> np.ndarray:
    """Batched log: (R, t) -> twists (..., 6)."""
    w = so3_log(r, check_cut=check_cut)
    theta = np.linalg.norm(w, axis=-1)
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    # V^-1 = I - K/2 + d K^2 with d = (1 - th sin th / (2 (1 - cos th))) / th^2
    d = np.where(
        small,
        1.0 / 12.0 + theta * theta / 720.0,
        (1.0 - th * np.sin(th) / (2.0 * (1.0 - np.cos(th)))) / (th * th),
    )
    k = hat(w)
    eye = np.broadcast_to(np.eye(3), k.shape)
    vinv = eye - 0.5 * k + d[..., None, None] * (k @ k)
    rho = np.einsum("...ij,...j->...i", vinv, np.asarray(t, dtype=float))
    return np.concatenate([w, rho], axis=-1)


def se3_compose(a: Se3Pose, b: Se3Pose) -> Se3Pose:
    return Se3Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def se3_inverse(a: Se3Pose) -> Se3Pose:
    rt = a.rotation.T
    return Se3Pose(rt, -rt @ a.translation)


def se3_exp(xi) -> Se3Pose:
    r, t = se3_exp_arrays(np.asarray(xi, dtype=float).reshape(6))
    return Se3Pose(r, t)


def se3_log(a: Se3Pose) -> np.ndarray:
    return se3_log_arrays(a.rotation, a.translation)


def pose_from_xyz_yaw(x: float, y: float, z: float, yaw: float) -> Se3Pose:
    return Se3Pose(rot_z(yaw), np.array([x, y, z]))


# ---------------------------------------------------------------------------
# Quaternions (serialization only)
# ---------------------------------------------------------------------------


def rotation_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw) with qw >= 0."""
    return Rotation.from_matrix(r).as_quat(canonical=True)


def quaternion_to_rotation(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise InvalidRotation("quaternion has zero or non-finite norm")
    return Rotation.from_quat(q / n).as_matrix()


# ---------------------------------------------------------------------------
# Trigonometric orientation encoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrigOrientation:
    """Per-axis (cos, sin) components for (azimuth, elevation, inplane)."""

    cos: np.ndarray
    sin: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cos, dtype=float).reshape(3).copy()
        s = np.asarray(self.sin, dtype=float).reshape(3).copy()
        c.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "cos", c)
        object.__setattr__(self, "sin", s)

    def as_vector(self) -> np.ndarray:
        return interleave(self.cos, self.sin)

    @classmethod
    def from_vector(cls, v) -> "TrigOrientation":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[0::2], v[1::2])


def interleave(cos_part, sin_part) -> np.ndarray:
    """Stack (..., 3) cos and sin parts into the (..., 6) trig layout."""
    c = np.asarray(cos_part, dtype=float)
    s = np.asarray(sin_part, dtype=float)
    return np.stack([c, s], axis=-1).reshape(c.shape[:-1] + (6,))


def attenuation(sigma_v: float) -> float:
    return math.exp(-0.5 * sigma_v * sigma_v)


def trig_encode(e: EulerAngle, sigma_v: float) -> TrigOrientation:
    if sigma_v < 0:
        raise ValueError("sigma_v must be non-negative")
    a = attenuation(sigma_v)
    v = e.as_array()
    return TrigOrientation(a * np.cos(v), a * np.sin(v))


def trig_decode(t: TrigOrientation) -> EulerAngle:
    sq = t.cos**2 + t.sin**2
    if np.any(sq <= 1e-12):
        raise DegenerateTrig("cos and sin components both near zero")
    return EulerAngle.from_array(np.arctan2(t.sin, t.cos))


def orientation_prior_moments(v, sigma_v: float):
    """Mean and variance of ``cos(v + eps)``, ``sin(v + eps)``, eps ~ N(0, sigma_v^2).

    Works elementwise on array ``v``. Returns ``(mean_cos, mean_sin, var_cos, var_sin)``.
    """
    if sigma_v < 0:
        raise ValueError("sigma_v must be non-negative")
    v = np.asarray(v, dtype=float)
    s2 = sigma_v * sigma_v
    a1 = math.exp(-0.5 * s2)
    a2 = math.exp(-s2)
    one_minus_a2 = -math.expm1(-s2)
    c, s = np.cos(v), np.sin(v)
    cos2v = np.cos(2.0 * v)
    mean_cos = a1 * c
    mean_sin = a1 * s
    # factored form of E[cos^2] - E[cos]^2; exact zero at sigma_v = 0
    var_cos = 0.5 * one_minus_a2 * (1.0 - a2 * cos2v)
    var_sin = 0.5 * one_minus_a2 * (1.0 + a2 * cos2v)
    return mean_cos, mean_sin, var_cos, var_sin


def trig_prior(angles, sigma_v: float, variance_floor: float = 0.0):
    """Prior mean and (floored) variance in the 6-vector trig layout.

    ``angles`` has shape (..., 3); returns two arrays of shape (..., 6).
    """
    mc, ms, vc, vs = orientation_prior_moments(angles, sigma_v)
    mean = interleave(mc, ms)
    var = np.maximum(interleave(vc, vs), variance_floor)
    return mean, var
