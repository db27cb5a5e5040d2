"""Symmetric 3x3 tensor algebra for diffusion tensors.

Tensors are stored as arrays whose last axis holds the six unique
components in the fixed order ``(xx, yy, zz, xy, xz, yz)``.  Every function
here broadcasts over any leading shape, so a single tensor is an array of
shape ``(6,)`` and a tensor field is ``(nx, ny, nz, 6)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COMPONENTS = ("xx", "yy", "zz", "xy", "xz", "yz")

#: Eigenvalue floor (mm^2/s) applied before taking the matrix logarithm.
EPS_FLOOR = 1e-7

# relative eigenvalue gap below which the closed-form eigenvectors are not trusted
_GAP_TOL = 1e-5
_RESIDUAL_TOL = 1e-12


class TensorError(ValueError):
    """Raised when a tensor violates an operation's precondition."""


@dataclass(frozen=True)
class EigenSystem:
    """Eigenvalues in descending order and the matching unit eigenvectors.

    ``vectors[..., :, i]`` is the eigenvector of ``values[..., i]``.
    """

    values: np.ndarray
    vectors: np.ndarray

    @property
    def e1(self) -> np.ndarray:
        return self.vectors[..., :, 0]


def to_matrix(d) -> np.ndarray:
    """Expand ``(..., 6)`` components to full ``(..., 3, 3)`` matrices."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-1] != 6:
        raise TensorError(f"expected 6 tensor components, got {d.shape[-1]}")
    xx, yy, zz, xy, xz, yz = np.moveaxis(d, -1, 0)
    m = np.empty(d.shape[:-1] + (3, 3))
    m[..., 0, 0], m[..., 1, 1], m[..., 2, 2] = xx, yy, zz
    m[..., 0, 1] = m[..., 1, 0] = xy
    m[..., 0, 2] = m[..., 2, 0] = xz
    m[..., 1, 2] = m[..., 2, 1] = yz
    return m


def from_matrix(m) -> np.ndarray:
    """Collapse ``(..., 3, 3)`` matrices to ``(..., 6)`` components.

    Off-diagonals are symmetrised, so slightly asymmetric round-off is
    averaged away rather than silently dropped.
    """
    m = np.asarray(m, dtype=np.float64)
    return np.stack(
        [
            m[..., 0, 0],
            m[..., 1, 1],
            m[..., 2, 2],
            0.5 * (m[..., 0, 1] + m[..., 1, 0]),
            0.5 * (m[..., 0, 2] + m[..., 2, 0]),
            0.5 * (m[..., 1, 2] + m[..., 2, 1]),
        ],
        axis=-1,
    )


def from_eigen(values, vectors) -> np.ndarray:
    """Rebuild tensor components from ``sum_i values_i * v_i v_i^T``."""
    values = np.asarray(values, dtype=np.float64)
    vectors = np.asarray(vectors, dtype=np.float64)
    m = np.einsum("...ik,...k,...jk->...ij", vectors, values, vectors)
    return from_matrix(m)


def _closed_form_eigenvalues(m):
    # Trigonometric solution of the characteristic cubic; descending order.
    q = np.trace(m, axis1=-2, axis2=-1) / 3.0
    off = m[..., 0, 1] ** 2 + m[..., 0, 2] ** 2 + m[..., 1, 2] ** 2
    diag = (m[..., 0, 0] - q) ** 2 + (m[..., 1, 1] - q) ** 2 + (m[..., 2, 2] - q) ** 2
    p = np.sqrt((diag + 2.0 * off) / 6.0)
    safe_p = np.where(p > 0, p, 1.0)
    b = (m - q[..., None, None] * np.eye(3)) / safe_p[..., None, None]
    r = np.clip(np.linalg.det(b) / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    l1 = q + 2.0 * p * np.cos(phi)
    l3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    l2 = 3.0 * q - l1 - l3
    return np.stack([l1, l2, l3], axis=-1)


def _null_vector(a):
    # Best-conditioned cross product of the rows of a singular 3x3 matrix.
    c = np.stack(
        [
            np.cross(a[..., 0, :], a[..., 1, :]),
            np.cross(a[..., 0, :], a[..., 2, :]),
            np.cross(a[..., 1, :], a[..., 2, :]),
        ],
        axis=-2,
    )
    norms = np.linalg.norm(c, axis=-1)
    best = np.argmax(norms, axis=-1)
    v = np.take_along_axis(c, best[..., None, None], axis=-2)[..., 0, :]
    n = np.take_along_axis(norms, best[..., None], axis=-1)
    return v / np.where(n > 0, n, 1.0)


def _jacobi(m, sweeps=8):
    """Cyclic Jacobi rotations applied to a stack of symmetric 3x3 matrices."""
    a = np.array(m, dtype=np.float64)
    v = np.broadcast_to(np.eye(3), a.shape).copy()
    n = np.arange(a.shape[0])
    for _ in range(sweeps):
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[:, p, q]
            active = np.abs(apq) > 1e-300
            theta = np.where(active, (a[:, q, q] - a[:, p, p]) / np.where(active, 2.0 * apq, 1.0), 0.0)
            with np.errstate(over="ignore"):
                # huge theta gives t -> 0, the correct limit
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.broadcast_to(np.eye(3), a.shape).copy()
            rot[n, p, p] = c
            rot[n, q, q] = c
            rot[n, p, q] = s
            rot[n, q, p] = -s
            a = np.swapaxes(rot, -1, -2) @ a @ rot
            v = v @ rot
    return np.diagonal(a, axis1=-2, axis2=-1).copy(), v


def _sign_convention(vectors):
    # Flip each eigenvector so its largest-magnitude component is positive.
    idx = np.argmax(np.abs(vectors), axis=-2)
    lead = np.take_along_axis(vectors, idx[..., None, :], axis=-2)
    return vectors * np.where(lead < 0, -1.0, 1.0)


def eig3_sym(d) -> EigenSystem:
    """Eigendecomposition of symmetric 3x3 tensors.

    Eigenvalues come from the closed-form cubic solution and eigenvectors
    from cross products of ``D - lambda I``.  Tensors whose eigenvalues are
    nearly repeated, or whose reconstruction residual is too large, are
    redone with cyclic Jacobi rotations.

    Parameters
    ----------
    d : array_like, shape (..., 6)
        Tensor components.

    Returns
    -------
    EigenSystem
        ``values`` of shape (..., 3), descending; ``vectors`` of shape
        (..., 3, 3) with eigenvectors in columns.
    """
    d = np.asarray(d, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise TensorError("tensor components must be finite")
    m = to_matrix(d)
    lead_shape = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    scale = np.max(np.abs(m), axis=(-2, -1))
    safe = np.where(scale > 0, scale, 1.0)
    mn = m / safe[:, None, None]

    vals = _closed_form_eigenvalues(mn)
    eye = np.eye(3)
    v1 = _null_vector(mn - vals[:, 0, None, None] * eye)
    v3 = _null_vector(mn - vals[:, 2, None, None] * eye)
    v3 = v3 - np.sum(v3 * v1, axis=-1, keepdims=True) * v1
    v3 /= np.maximum(np.linalg.norm(v3, axis=-1, keepdims=True), 1e-300)
    v2 = np.cross(v3, v1)
    vecs = np.stack([v1, v2, v3], axis=-1)

    gaps = np.minimum(vals[:, 0] - vals[:, 1], vals[:, 1] - vals[:, 2])
    rebuilt = np.einsum("nik,nk,njk->nij", vecs, vals, vecs)
    residual = np.max(np.abs(rebuilt - mn), axis=(-2, -1))
    redo = (gaps < _GAP_TOL) | (residual > _RESIDUAL_TOL) | ~np.isfinite(residual)
    if np.any(redo):
        w, v = _jacobi(mn[redo])
        order = np.argsort(-w, axis=-1, kind="stable")
        vals[redo] = np.take_along_axis(w, order, axis=-1)
        vecs[redo] = np.take_along_axis(v, order[:, None, :], axis=-1)

    vals = vals * safe[:, None]
    vecs = _sign_convention(vecs)
    return EigenSystem(vals.reshape(lead_shape + (3,)), vecs.reshape(lead_shape + (3, 3)))


def eigenvalues(d) -> np.ndarray:
    return eig3_sym(d).values


def fa(d) -> np.ndarray:
    """Fractional anisotropy in [0, 1]; all-zero tensors give 0."""
    lam = eigenvalues(d)
    mean = lam.mean(axis=-1, keepdims=True)
    num = np.sum((lam - mean) ** 2, axis=-1)
    den = np.sum(lam**2, axis=-1)
    out = np.sqrt(1.5 * num / np.where(den > 0, den, 1.0))
    return np.clip(np.where(den > 0, out, 0.0), 0.0, 1.0)


def md(d) -> np.ndarray:
    """Mean diffusivity, trace / 3."""
    d = np.asarray(d, dtype=np.float64)
    return (d[..., 0] + d[..., 1] + d[..., 2]) / 3.0


def westin_shape(d):
    """Trace-normalised Westin measures ``(cl, cp, cs)``.

    Raises
    ------
    TensorError
        If any tensor has a non-positive trace.
    """
    lam = eigenvalues(d)
    tr = lam.sum(axis=-1)
    if np.any(tr <= 0):
        raise TensorError("Westin measures need a positive trace")
    cl = (lam[..., 0] - lam[..., 1]) / tr
    cp = 2.0 * (lam[..., 1] - lam[..., 2]) / tr
    cs = 3.0 * lam[..., 2] / tr
    return cl, cp, cs


def westin_linearity(d) -> np.ndarray:
    return westin_shape(d)[0]


def tensor_log(d, eps_floor: float = EPS_FLOOR) -> np.ndarray:
    """Matrix logarithm ``sum ln(lambda_i) e_i e_i^T``.

    Eigenvalues are clamped to ``eps_floor`` first so slightly non-SPD
    least-squares fits still produce finite targets.  Tensors that remain
    non-positive after the floor (``eps_floor <= 0``) are rejected.
    """
    es = eig3_sym(d)
    lam = np.maximum(es.values, eps_floor)
    if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
        bad = es.values[np.any(~(lam > 0), axis=-1)]
        raise TensorError(f"tensor is not positive definite; eigenvalues {bad[:3].tolist()}")
    return from_eigen(np.log(lam), es.vectors)


def tensor_exp(log_d) -> np.ndarray:
    """Matrix exponential of symmetric log-tensors; always SPD."""
    es = eig3_sym(log_d)
    return from_eigen(np.exp(es.values), es.vectors)


def frobenius_dist(d1, d2) -> np.ndarray:
    """Frobenius distance of full matrices; off-diagonals count twice."""
    diff = np.asarray(d1, dtype=np.float64) - np.asarray(d2, dtype=np.float64)
    sq = np.sum(diff[..., :3] ** 2, axis=-1) + 2.0 * np.sum(diff[..., 3:] ** 2, axis=-1)
    return np.sqrt(sq)


def rotate(d, r) -> np.ndarray:
    """Return ``R D R^T`` for rotation matrix ``r``."""
    m = to_matrix(d)
    return from_matrix(np.asarray(r) @ m @ np.swapaxes(np.asarray(r), -1, -2))


def frame_from_direction(direction) -> np.ndarray:
    """Rotation matrices whose first column is the unit ``direction``.

    The second column is the normalised component of whichever coordinate
    axis is least parallel to ``direction``.
    """
    u = np.asarray(direction, dtype=np.float64)
    u = u / np.linalg.norm(u, axis=-1, keepdims=True)
    helper = np.zeros_like(u)
    np.put_along_axis(helper, np.argmin(np.abs(u), axis=-1)[..., None], 1.0, axis=-1)
    v = helper - np.sum(helper * u, axis=-1, keepdims=True) * u
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    w = np.cross(u, v)
    return np.stack([u, v, w], axis=-1)


def axis_aligned(direction, lambdas) -> np.ndarray:
    """Tensor ``R diag(lambdas) R^T`` with its first axis along ``direction``."""
    r = frame_from_direction(direction)
    lam = np.broadcast_to(np.asarray(lambdas, dtype=np.float64), r.shape[:-1])
    return from_eigen(lam, r)
