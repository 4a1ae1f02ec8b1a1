"""Quaternion, dual-quaternion, spherical-harmonics, and covariance primitives.

Conventions used throughout the package:

* Quaternions are ``(..., 4)`` float arrays in scalar-first order ``[w, x, y, z]``.
* Dual quaternions are ``(..., 8)`` float arrays: real part in ``[..., :4]``,
  dual part in ``[..., 4:]``.
* Rotation matrices are ``(..., 3, 3)`` and act on column vectors.
* Spherical-harmonics coefficients are ``(..., 16, 3)``: 16 real bases
  (degrees 0..3) times 3 color channels.

All functions are pure and broadcast over leading dimensions.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "SH_NUM_BASES",
    "SH_NUM_COEFFS",
    "MIN_SCALE",
    "quat_normalize",
    "quat_mul",
    "quat_conj",
    "quat_to_rotmat",
    "quat_to_rotmat_backward",
    "quat_rotate",
    "quat_left_matrix",
    "dq_from_quat_trans",
    "dq_identity",
    "dq_mul",
    "dq_normalize",
    "dq_blend",
    "dq_rotation",
    "dq_translation",
    "dq_transform_point",
    "sh_basis",
    "sh_basis_grad",
    "sh_eval_raw",
    "sh_eval",
    "covariance_from_qs",
]

SH_NUM_BASES = 16
SH_NUM_COEFFS = SH_NUM_BASES * 3

# Scale floor keeping covariances invertible (world units).
MIN_SCALE = 1e-6

_QUAT_EPS = 1e-12


class InvalidInputError(ValueError):
    """Raised when an operation receives inputs violating its preconditions."""


# ---------------------------------------------------------------------------
# quaternions


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    norm2 = np.sum(q * q, axis=-1, keepdims=True)
    if np.any(norm2 <= _QUAT_EPS * _QUAT_EPS):
        raise InvalidInputError("zero-norm quaternion cannot be normalized")
    # already-unit inputs pass through bit-exactly (normalize is idempotent)
    if np.all(np.abs(norm2 - 1.0) < 1e-12):
        return q
    return q / np.sqrt(norm2)


def quat_conj(q):
    q = np.asarray(q)
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_mul(a, b):
    """Hamilton product a ⊗ b, scalar-first."""
    a = np.asarray(a)
    b = np.asarray(b)
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_left_matrix(q):
    """4x4 matrix L(q) with L(q) @ p == quat_mul(q, p)."""
    w, x, y, z = (np.asarray(q)[..., i] for i in range(4))
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, -z, y], axis=-1),
        np.stack([y, z, w, -x], axis=-1),
        np.stack([z, -y, x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def quat_to_rotmat(q):
    """Rotation matrix of a (not necessarily unit) quaternion.

    Normalizes internally; raises on zero norm.
    """
    q = quat_normalize(q)
    w, x, y, z = (q[..., i] for i in range(4))
    rows = [
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def _rotmat_grad_wrt_unit_quat(qn):
    """d vec(R) / d q for a unit quaternion, shape (..., 3, 3, 4)."""
    w, x, y, z = (qn[..., i] for i in range(4))
    zero = np.zeros_like(w)
    # Rows follow quat_to_rotmat entry order; columns are (w, x, y, z).
    g = np.stack(
        [
            np.stack([zero, zero, -4 * y, -4 * z], axis=-1),
            np.stack([-2 * z, 2 * y, 2 * x, -2 * w], axis=-1),
            np.stack([2 * y, 2 * z, 2 * w, 2 * x], axis=-1),
            np.stack([2 * z, 2 * y, 2 * x, 2 * w], axis=-1),
            np.stack([zero, -4 * x, zero, -4 * z], axis=-1),
            np.stack([-2 * x, -2 * w, 2 * z, 2 * y], axis=-1),
            np.stack([-2 * y, 2 * z, -2 * w, 2 * x], axis=-1),
            np.stack([2 * x, 2 * w, 2 * z, 2 * y], axis=-1),
            np.stack([zero, -4 * x, -4 * y, zero], axis=-1),
        ],
        axis=-2,
    )
    return g.reshape(qn.shape[:-1] + (3, 3, 4))


def quat_to_rotmat_backward(q, grad_r):
    """Gradient of sum(grad_r * R(q)) w.r.t. the raw (unnormalized) q."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    g = _rotmat_grad_wrt_unit_quat(qn)
    grad_qn = np.einsum("...ij,...ijk->...k", grad_r, g)
    # Through the normalization: d qn / d q = (I - qn qn^T) / |q|
    proj = grad_qn - qn * np.sum(grad_qn * qn, axis=-1, keepdims=True)
    return proj / norm


def quat_rotate(q, v):
    """Rotate vectors v by quaternion q (normalized internally)."""
    r = quat_to_rotmat(q)
    return np.einsum("...ij,...j->...i", r, np.asarray(v))


# ---------------------------------------------------------------------------
# dual quaternions


def dq_identity():
    return np.array([1.0, 0, 0, 0, 0, 0, 0, 0])


def dq_from_quat_trans(q, t):
    """Rigid transform (rotation q, translation t) as a dual quaternion."""
    q = quat_normalize(q)
    t = np.asarray(t, dtype=np.float64)
    tq = np.concatenate([np.zeros_like(t[..., :1]), t], axis=-1)
    dual = 0.5 * quat_mul(tq, q)
    return np.concatenate([q, dual], axis=-1)


def dq_mul(a, b):
    """Composition a ∘ b (apply b first, then a)."""
    ar, ad = np.asarray(a)[..., :4], np.asarray(a)[..., 4:]
    br, bd = np.asarray(b)[..., :4], np.asarray(b)[..., 4:]
    real = quat_mul(ar, br)
    dual = quat_mul(ar, bd) + quat_mul(ad, br)
    return np.concatenate([real, dual], axis=-1)


def dq_normalize(dq):
    """Project onto the unit, rigid dual-quaternion manifold.

    Divides by the real norm and removes the component of the dual part
    parallel to the real part, so dot(real, dual) == 0 exactly.
    """
    dq = np.asarray(dq, dtype=np.float64)
    real, dual = dq[..., :4], dq[..., 4:]
    norm = np.linalg.norm(real, axis=-1, keepdims=True)
    if np.any(norm <= _QUAT_EPS):
        raise InvalidInputError("dual quaternion has zero-norm real part")
    real = real / norm
    dual = dual / norm
    dual = dual - real * np.sum(real * dual, axis=-1, keepdims=True)
    return np.concatenate([real, dual], axis=-1)


def dq_blend(weights, dqs):
    """Normalized linear blend of dual quaternions (DQ skinning blend).

    ``weights``: (..., J) nonnegative, ``dqs``: (..., J, 8). Real parts are
    sign-aligned against the first element before blending.
    """
    weights = np.asarray(weights, dtype=np.float64)
    dqs = np.asarray(dqs, dtype=np.float64)
    if np.any(weights < 0):
        raise InvalidInputError("dq_blend weights must be nonnegative")
    wsum = weights.sum(axis=-1)
    if np.any(wsum <= 1e-8):
        raise InvalidInputError("dq_blend weights sum to (near) zero")
    ref = dqs[..., :1, :4]
    sign = np.sign(np.sum(dqs[..., :4] * ref, axis=-1, keepdims=True))
    sign = np.where(sign == 0, 1.0, sign)
    blended = np.sum(weights[..., None] * sign * dqs, axis=-2)
    return dq_normalize(blended)


def dq_rotation(dq):
    return quat_normalize(np.asarray(dq)[..., :4])


def dq_translation(dq):
    dq = dq_normalize(dq)
    real, dual = dq[..., :4], dq[..., 4:]
    t = 2.0 * quat_mul(dual, quat_conj(real))
    return t[..., 1:]


def dq_transform_point(dq, p):
    """Apply the rigid transform encoded by dq to points p, (..., 3)."""
    dq = dq_normalize(dq)
    r = quat_to_rotmat(dq[..., :4])
    t = dq_translation(dq)
    return np.einsum("...ij,...j->...i", r, np.asarray(p, dtype=np.float64)) + t


# ---------------------------------------------------------------------------
# real spherical harmonics, degrees 0..3

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)


def sh_basis(dirs):
    """16 real SH basis values for unit directions, shape (..., 16)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    return np.stack(
        [
            np.full_like(x, _C0),
            -_C1 * y,
            _C1 * z,
            -_C1 * x,
            _C2[0] * xy,
            _C2[1] * yz,
            _C2[2] * (2 * zz - xx - yy),
            _C2[3] * xz,
            _C2[4] * (xx - yy),
            _C3[0] * y * (3 * xx - yy),
            _C3[1] * xy * z,
            _C3[2] * y * (4 * zz - xx - yy),
            _C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            _C3[4] * x * (4 * zz - xx - yy),
            _C3[5] * z * (xx - yy),
            _C3[6] * x * (xx - yy),
        ],
        axis=-1,
    )


def sh_basis_grad(dirs):
    """Jacobian of sh_basis w.r.t. the direction, shape (..., 16, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    xx, yy, zz = x * x, y * y, z * z

    def v(gx, gy, gz):
        return np.stack([gx, gy, gz], axis=-1)

    g = [
        v(zero, zero, zero),
        v(zero, np.full_like(x, -_C1), zero),
        v(zero, zero, np.full_like(x, _C1)),
        v(np.full_like(x, -_C1), zero, zero),
        v(_C2[0] * y, _C2[0] * x, zero),
        v(zero, _C2[1] * z, _C2[1] * y),
        v(-2 * _C2[2] * x, -2 * _C2[2] * y, 4 * _C2[2] * z),
        v(_C2[3] * z, zero, _C2[3] * x),
        v(2 * _C2[4] * x, -2 * _C2[4] * y, zero),
        v(_C3[0] * 6 * x * y, _C3[0] * (3 * xx - 3 * yy), zero),
        v(_C3[1] * y * z, _C3[1] * x * z, _C3[1] * x * y),
        v(-2 * _C3[2] * x * y, _C3[2] * (4 * zz - xx - 3 * yy), 8 * _C3[2] * y * z),
        v(-6 * _C3[3] * x * z, -6 * _C3[3] * y * z, _C3[3] * (6 * zz - 3 * xx - 3 * yy)),
        v(_C3[4] * (4 * zz - 3 * xx - yy), -2 * _C3[4] * x * y, 8 * _C3[4] * x * z),
        v(2 * _C3[5] * x * z, -2 * _C3[5] * y * z, _C3[5] * (xx - yy)),
        v(_C3[6] * (3 * xx - yy), -2 * _C3[6] * x * y, zero),
    ]
    return np.stack(g, axis=-2)


def sh_eval_raw(coeffs, dirs):
    """Linear SH color without the +0.5 offset or clamping, (..., 3)."""
    coeffs = np.asarray(coeffs)
    if coeffs.shape[-1] == SH_NUM_COEFFS:
        coeffs = coeffs.reshape(coeffs.shape[:-1] + (SH_NUM_BASES, 3))
    basis = sh_basis(dirs)
    return np.einsum("...b,...bc->...c", basis, coeffs)


def sh_eval(coeffs, dirs):
    """RGB color: clamp(sum_lm c_lm Y_lm(dir) + 0.5, 0)."""
    return np.maximum(sh_eval_raw(coeffs, dirs) + 0.5, 0.0)


# ---------------------------------------------------------------------------
# covariance


def covariance_from_qs(q, s):
    """World covariance Σ = R diag(s)² Rᵀ from rotation q and scales s."""
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(s))):
        raise InvalidInputError("non-finite rotation or scale")
    r = quat_to_rotmat(q)
    m = r * s[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def covariance_from_qs_backward(q, s, grad_cov):
    """Gradients of sum(grad_cov * Σ) w.r.t. raw q and s."""
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    r = quat_to_rotmat(q)
    m = r * s[..., None, :]
    g = grad_cov + np.swapaxes(grad_cov, -1, -2)
    grad_m = g @ m
    grad_r = grad_m * s[..., None, :]
    grad_s = np.sum(r * grad_m, axis=-2)
    grad_q = quat_to_rotmat_backward(q, grad_r)
    return grad_q, grad_s
