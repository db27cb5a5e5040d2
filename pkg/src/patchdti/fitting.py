"""Conventional tensor estimation by unweighted linear least squares."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .dwi_model import GradientScheme, design_matrix


class FitError(ValueError):
    pass


def lls_fit(signals, scheme: GradientScheme) -> np.ndarray:
    """Fit one tensor to a signal vector.

    S0 is the geometric mean of the b=0 signals and the tensor solves
    ``min || ln(S / S0) + B d ||`` through the pseudoinverse.  Non-positive
    measurements are dropped.  No positive-definiteness is enforced.

    Parameters
    ----------
    signals : array_like, shape (n,)
    scheme : GradientScheme
        Must have ``n`` entries.

    Returns
    -------
    ndarray, shape (6,)
        Tensor components ``(xx, yy, zz, xy, xz, yz)`` in mm^2/s.
    """
    s = np.asarray(signals, dtype=np.float64).reshape(-1)
    if s.size != len(scheme):
        raise FitError(f"{s.size} signals for a {len(scheme)}-entry scheme")
    keep = s > 0
    b0 = scheme.b0_indices[keep[scheme.b0_indices]]
    dw = scheme.dw_indices[keep[scheme.dw_indices]]
    if b0.size == 0:
        raise FitError("no usable b=0 signal")
    if dw.size < 6:
        raise FitError(f"only {dw.size} usable diffusion-weighted signals, need 6")
    b = design_matrix(scheme.subset(dw))
    if np.linalg.matrix_rank(b) < 6:
        raise FitError("design matrix is rank deficient")
    log_s0 = np.mean(np.log(s[b0]))
    y = log_s0 - np.log(s[dw])
    return np.linalg.pinv(b) @ y


def _fit_block(s, b0, dw, pinv):
    log_s = np.log(s)
    log_s0 = log_s[:, b0].mean(axis=1)
    return (log_s0[:, None] - log_s[:, dw]) @ pinv.T


def fit_volume(dwi, scheme: GradientScheme, mask=None, threads: int = 1) -> np.ndarray:
    """Voxel-wise LLS over a 4D volume of shape (nx, ny, nz, n).

    Voxels outside ``mask`` get a zero tensor.  Voxels with every signal
    positive are solved in one batched product; the rest fall back to
    :func:`lls_fit`, which drops the bad measurements.  Voxels that cannot
    be fitted at all are left at zero.
    """
    dwi = np.asarray(dwi, dtype=np.float64)
    if dwi.ndim != 4 or dwi.shape[-1] != len(scheme):
        raise FitError(f"volume shape {dwi.shape} does not match a {len(scheme)}-entry scheme")
    spatial = dwi.shape[:3]
    if mask is None:
        mask = np.ones(spatial, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != spatial:
        raise FitError(f"mask shape {mask.shape} does not match volume {spatial}")

    b0, dw = scheme.b0_indices, scheme.dw_indices
    if b0.size == 0:
        raise FitError("scheme has no b=0 entry")
    bmat = design_matrix(scheme)
    if bmat.shape[0] < 6 or np.linalg.matrix_rank(bmat) < 6:
        raise FitError("design matrix is rank deficient")
    pinv = np.linalg.pinv(bmat)

    out = np.zeros(spatial + (6,))
    coords = np.flatnonzero(mask.reshape(-1))
    sig = dwi.reshape(-1, len(scheme))[coords]
    clean = np.all(sig > 0, axis=1)
    flat = np.zeros((coords.size, 6))

    good = np.flatnonzero(clean)
    chunks = np.array_split(good, max(1, threads)) if good.size else []
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda c: _fit_block(sig[c], b0, dw, pinv), chunks))
    for c, r in zip(chunks, results):
        flat[c] = r
    for i in np.flatnonzero(~clean):
        try:
            flat[i] = lls_fit(sig[i], scheme)
        except FitError:
            pass
    out.reshape(-1, 6)[coords] = flat
    return out
