"""Rotation-group helpers: sampling, distances, chordal averaging, frames.

Rotations are plain ``(3, 3)`` float arrays.  Point clouds are rows, so a
rotation acts as ``points @ R``.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

GS_EPS = 1e-8
DEGENERACY_TOL = 1e-9


class DegenerateFrameError(ValueError):
    pass


def is_rotation(m, tol: float = 1e-9) -> bool:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    return bool(np.abs(m.T @ m - np.eye(3)).max() < tol and abs(np.linalg.det(m) - 1.0) < tol)


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def sample_uniform(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from a normalized 4D Gaussian quaternion."""
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.standard_normal(4)
    return quaternion_to_matrix(q)


def sample_many(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.stack([sample_uniform(rng) for _ in range(n)])


def axis_angle(axis, theta: float) -> np.ndarray:
    """Rotation by ``theta`` about ``axis`` (column-vector convention)."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def rot_z(theta: float) -> np.ndarray:
    return axis_angle([0.0, 0.0, 1.0], theta)


def angle_between(a, b) -> float:
    """Geodesic angle in radians, ``arccos((tr(a^T b) - 1) / 2)``."""
    c = (np.trace(np.asarray(a).T @ np.asarray(b)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def angles_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized :func:`angle_between` over leading axes."""
    tr = np.einsum("...ij,...ij->...", np.asarray(a), np.asarray(b))
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def project_to_so3(m, return_flag: bool = False):
    """Nearest rotation in Frobenius norm: ``U diag(1, 1, det(U V^T)) V^T``.

    The projection is flagged as ambiguous when the two smallest singular
    values coincide within ``DEGENERACY_TOL``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise ValueError(f"expected a finite 3x3 matrix, got shape {m.shape}")
    u, s, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    if return_flag:
        return r, bool(abs(s[1] - s[2]) < DEGENERACY_TOL)
    return r


def chordal_mean(rs, return_flag: bool = False):
    """Chordal L2 mean of rotations: the arithmetic mean projected onto SO(3)."""
    rs = np.asarray(rs, dtype=np.float64)
    if rs.ndim == 2:
        rs = rs[None]
    if rs.shape[0] == 0:
        raise ValueError("chordal_mean of an empty set")
    return project_to_so3(rs.mean(axis=0), return_flag=return_flag)


def rms_angle_to_mean(rs) -> tuple[float, bool]:
    """Root-mean-square geodesic angle (radians) of ``rs`` around their chordal mean."""
    mean, flag = chordal_mean(rs, return_flag=True)
    ang = angles_between(np.asarray(rs), mean[None])
    return float(np.sqrt(np.mean(ang ** 2))), flag


def gram_schmidt_frame(u, v, eps: float = GS_EPS) -> np.ndarray:
    """Orthonormal frame with columns ``e1 = u/|u|``, ``e2`` from ``v``, ``e3 = e1 x e2``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    if nu <= eps:
        raise DegenerateFrameError(f"first frame vector has norm {nu:.3e} <= {eps:g}")
    e1 = u / nu
    w = v - (v @ e1) * e1
    nw = np.linalg.norm(w)
    if nw <= eps:
        raise DegenerateFrameError(
            f"second frame vector has orthogonal norm {nw:.3e} <= {eps:g} (|u| = {nu:.3e})")
    e2 = w / nw
    return np.stack([e1, e2, np.cross(e1, e2)], axis=1)


def _safe_normalize(x: ad.Tensor, eps: float) -> ad.Tensor:
    # exact normalization above eps; below it divide by eps so gradients stay finite
    n = ad.sqrt(ad.clamp_min(ad.reduce_sum(ad.square(x), axis=-1, keepdims=True), eps * eps))
    return x / n


def gram_schmidt_tensor(u: ad.Tensor, v: ad.Tensor, eps: float = GS_EPS, strict: bool = False) -> ad.Tensor:
    """Differentiable Gram-Schmidt over the last axis; returns a ``(..., 3, 3)``
    tensor whose columns are ``e1, e2, e3`` (same layout as :func:`gram_schmidt_frame`).

    With ``strict`` a degenerate input raises instead of being regularized.
    """
    if strict:
        nu = np.linalg.norm(u.data, axis=-1)
        e1d = u.data / np.maximum(nu, eps)[..., None]
        w = v.data - (v.data * e1d).sum(-1, keepdims=True) * e1d
        nw = np.linalg.norm(w, axis=-1)
        if np.any(nu <= eps) or np.any(nw <= eps):
            raise DegenerateFrameError(
                f"degenerate frame vectors: |u| = {np.min(nu):.3e}, |v_perp| = {np.min(nw):.3e}")
    e1 = _safe_normalize(u, eps)
    proj = ad.reduce_sum(v * e1, axis=-1, keepdims=True)
    e2 = _safe_normalize(v - proj * e1, eps)
    e3 = ad.cross(e1, e2)
    rows = ad.stack([e1, e2, e3], axis=-2)
    return ad.transpose(rows, tuple(range(rows.ndim - 2)) + (rows.ndim - 1, rows.ndim - 2))
