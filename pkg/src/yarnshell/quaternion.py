"""Quaternion helpers.

Quaternions are stored as arrays ``[w, x, y, z]`` with the scalar part first.
All functions broadcast over leading axes.
"""

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def norm(q):
    return np.linalg.norm(q, axis=-1)


def normalize(q):
    q = np.asarray(q, dtype=float)
    return q / norm(q)[..., None]


def conjugate(q):
    q = np.asarray(q, dtype=float)
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def multiply(a, b):
    """Hamilton product a*b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def left_matrix(a):
    """4x4 matrix L such that L @ b == multiply(a, b)."""
    w, x, y, z = a
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, -z, y],
            [y, z, w, -x],
            [z, -y, x, w],
        ]
    )


def right_matrix(b):
    """4x4 matrix R such that R @ a == multiply(a, b)."""
    w, x, y, z = b
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, z, -y],
            [y, -z, w, x],
            [z, y, -x, w],
        ]
    )


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def rotation_matrix_unchecked(q):
    """Rotation matrix of a unit quaternion (no norm validation)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack(
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        axis=-1,
    )
    row1 = np.stack(
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        axis=-1,
    )
    row2 = np.stack(
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
        axis=-1,
    )
    return np.stack([row0, row1, row2], axis=-2)


def rotate_vector(q, v):
    """Rotate v by unit quaternion q: v + 2w(u x v) + 2 u x (u x v)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    u = q[..., 1:]
    w = q[..., :1]
    t = np.cross(u, v)
    return v + 2.0 * w * t + 2.0 * np.cross(u, t)


def from_rotation_matrix(R):
    """Unit quaternion of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k]) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return normalize(q)


def d3(q):
    """Third director R(q) e3 for unit q (tangent direction)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [2 * (x * z + w * y), 2 * (y * z - w * x), w * w - x * x - y * y + z * z], axis=-1
    )


def d3_jacobian(q):
    """Jacobian of d3 with respect to the 4 quaternion components (unit q).

    Shape (..., 3, 4).
    """
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    row0 = np.stack([y, z, w, x], axis=-1)
    row1 = np.stack([-x, -w, z, y], axis=-1)
    row2 = np.stack([w, -x, -y, z], axis=-1)
    del zero
    return 2.0 * np.stack([row0, row1, row2], axis=-2)
