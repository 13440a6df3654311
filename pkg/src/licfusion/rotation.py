"""JPL quaternion and SO(3) helpers.

Quaternions are stored as ``np.ndarray([x, y, z, w])`` (scalar last) using the
JPL convention: ``rot_matrix(q)`` is the rotation taking vectors from the
global frame into the local frame, and ``rot_matrix(a ⊗ b) == rot_matrix(a) @
rot_matrix(b)``.

The orientation error is local and left-multiplicative::

    q = exp_quat(dtheta) ⊗ q_hat   <=>   R = (I - skew(dtheta)) R_hat  (first order)
"""

import math

import numpy as np

IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])


def skew(v):
    """Cross-product matrix: ``skew(v) @ w == np.cross(v, w)``."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def cross(a, b):
    """Cross product of two 3-vectors (cheaper than ``np.cross`` for single vectors)."""
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def norm(v):
    return math.sqrt(float(v @ v))


def normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    q = q / n
    # canonical hemisphere keeps serialized output stable
    if q[3] < 0.0:
        q = -q
    return q


def quat_multiply(a, b):
    """JPL product ``a ⊗ b``; the result is renormalized."""
    ax, ay, az, aw = float(a[0]), float(a[1]), float(a[2]), float(a[3])
    bx, by, bz, bw = float(b[0]), float(b[1]), float(b[2]), float(b[3])
    x = aw * bx + bw * ax - (ay * bz - az * by)
    y = aw * by + bw * ay - (az * bx - ax * bz)
    z = aw * bz + bw * az - (ax * by - ay * bx)
    w = aw * bw - (ax * bx + ay * by + az * bz)
    n = math.sqrt(x * x + y * y + z * z + w * w)
    if w < 0.0:
        n = -n
    return np.array([x / n, y / n, z / n, w / n])


def quat_inverse(q):
    return np.array([-q[0], -q[1], -q[2], q[3]])


def rot_matrix(q):
    """Rotation matrix of a JPL quaternion (normalizes the input first)."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    v, w = q[:3], q[3]
    return (2.0 * w * w - 1.0) * np.eye(3) - 2.0 * w * skew(v) + 2.0 * np.outer(v, v)


def rot_to_quat(R):
    """Inverse of :func:`rot_matrix` (Shepperd's method)."""
    # JPL R(q) equals the Hamilton matrix of the conjugate, so work on R^T
    M = np.asarray(R, dtype=float).T
    tr = np.trace(M)
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        w = 0.25 * s
        x = (M[2, 1] - M[1, 2]) / s
        y = (M[0, 2] - M[2, 0]) / s
        z = (M[1, 0] - M[0, 1]) / s
    elif M[0, 0] > M[1, 1] and M[0, 0] > M[2, 2]:
        s = 2.0 * np.sqrt(1.0 + M[0, 0] - M[1, 1] - M[2, 2])
        w = (M[2, 1] - M[1, 2]) / s
        x = 0.25 * s
        y = (M[0, 1] + M[1, 0]) / s
        z = (M[0, 2] + M[2, 0]) / s
    elif M[1, 1] > M[2, 2]:
        s = 2.0 * np.sqrt(1.0 + M[1, 1] - M[0, 0] - M[2, 2])
        w = (M[0, 2] - M[2, 0]) / s
        x = (M[0, 1] + M[1, 0]) / s
        y = 0.25 * s
        z = (M[1, 2] + M[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + M[2, 2] - M[0, 0] - M[1, 1])
        w = (M[1, 0] - M[0, 1]) / s
        x = (M[0, 2] + M[2, 0]) / s
        y = (M[1, 2] + M[2, 1]) / s
        z = 0.25 * s
    return normalize(np.array([x, y, z, w]))


def exp_quat(dtheta):
    """Error quaternion for a local rotation error ``dtheta``.

    Exact exponential map, so ``rot_matrix(exp_quat(d)) == expm(-skew(d))``.
    For small angles this is the familiar ``[dtheta / 2, 1]``.
    """
    dtheta = np.asarray(dtheta, dtype=float)
    angle = np.linalg.norm(dtheta)
    if angle < 1e-12:
        return normalize(np.array([0.5 * dtheta[0], 0.5 * dtheta[1], 0.5 * dtheta[2], 1.0]))
    axis = dtheta / angle
    s = np.sin(0.5 * angle)
    return np.array([s * axis[0], s * axis[1], s * axis[2], np.cos(0.5 * angle)])


def so3_exp(phi):
    """Rodrigues: ``expm(skew(phi))``."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < 1e-10:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(angle) / angle * K
            + (1.0 - np.cos(angle)) / angle ** 2 * K @ K)


def so3_log(R):
    """Rotation vector ``phi`` with ``so3_exp(phi) == R``."""
    R = np.asarray(R, dtype=float)
    cos_angle = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    angle = np.arccos(cos_angle)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-7:
        return 0.5 * w
    if np.pi - angle < 1e-6:
        # near pi the antisymmetric part vanishes; recover the axis from R + I
        B = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        i = int(np.argmax(axis))
        axis = B[i] / axis[i]
        return angle * axis / np.linalg.norm(axis)
    return angle / (2.0 * np.sin(angle)) * w


def rotation_error(R_true, R_est):
    """Local error angle ``d`` such that ``R_true = so3_exp(-d) @ R_est``."""
    return -so3_log(R_true @ R_est.T)


def quat_error(q_true, q_est):
    return rotation_error(rot_matrix(q_true), rot_matrix(q_est))


def omega_matrix(w):
    """4x4 ``Omega(w)`` with ``q_dot = 0.5 * omega_matrix(w) @ q``."""
    O = np.zeros((4, 4))
    O[:3, :3] = -skew(w)
    O[:3, 3] = w
    O[3, :3] = -w
    return O


def euler_to_rot(roll, pitch, yaw):
    """Body-to-global rotation ``Rz(yaw) Ry(pitch) Rx(roll)``."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx
