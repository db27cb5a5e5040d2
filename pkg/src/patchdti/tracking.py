"""FACT deterministic tractography on tensor fields.

Positions are continuous voxel coordinates: voxel ``(i, j, k)`` is the unit
cube centred on ``(i, j, k)``.  A streamline travels in straight segments
along each voxel's principal eigenvector, from the point where it enters
the voxel to the face, edge or corner where it leaves.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor_core


@dataclass
class TrackingParams:
    linearity_threshold: float = 0.6
    angle_threshold_deg: float = 45.0
    max_steps: int = 2000
    seeds_per_voxel: int = 1

    def __post_init__(self):
        if not 0 <= self.linearity_threshold <= 1:
            raise ValueError("linearity_threshold must lie in [0, 1]")
        if not 0 < self.angle_threshold_deg <= 90:
            raise ValueError("angle_threshold_deg must lie in (0, 90]")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.seeds_per_voxel != 1:
            raise ValueError("only one seed per voxel (at the centre) is supported")


def linearity_map(tensors) -> np.ndarray:
    """Westin linearity per voxel; voxels with non-positive trace get 0."""
    t = np.asarray(tensors, dtype=np.float64)
    lam = tensor_core.eigenvalues(t)
    tr = lam.sum(axis=-1)
    ok = tr > 0
    return np.where(ok, (lam[..., 0] - lam[..., 1]) / np.where(ok, tr, 1.0), 0.0)


def wm_mask(tensors, threshold: float = 0.6) -> np.ndarray:
    """Voxels with linearity above ``threshold`` and a positive leading eigenvalue."""
    t = np.asarray(tensors, dtype=np.float64)
    lam = tensor_core.eigenvalues(t)
    return (linearity_map(t) > threshold) & (lam[..., 0] > 0)


def principal_directions(tensors) -> np.ndarray:
    return tensor_core.eig3_sym(tensors).e1


def _half_track(e1, mask, seed, direction, params):
    """Follow the field from the centre of ``seed`` starting along ``direction``."""
    shape = mask.shape
    cos_max = math.cos(math.radians(params.angle_threshold_deg))
    vox = list(seed)
    p = [float(v) for v in seed]
    d = list(direction)
    pts = [tuple(p)]
    for _ in range(params.max_steps):
        t, axis = _exit_from(vox, p, d)
        p = [p[0] + t * d[0], p[1] + t * d[1], p[2] + t * d[2]]
        p[axis] = vox[axis] + (0.5 if d[axis] > 0 else -0.5)
        if t > 0:
            pts.append(tuple(p))
        nxt = list(vox)
        nxt[axis] += 1 if d[axis] > 0 else -1
        if not (0 <= nxt[0] < shape[0] and 0 <= nxt[1] < shape[1] and 0 <= nxt[2] < shape[2]):
            break
        if not mask[nxt[0], nxt[1], nxt[2]]:
            break
        nd = e1[nxt[0], nxt[1], nxt[2]]
        dot = nd[0] * d[0] + nd[1] * d[1] + nd[2] * d[2]
        if abs(dot) < cos_max:
            break
        s = 1.0 if dot >= 0 else -1.0
        d = [s * nd[0], s * nd[1], s * nd[2]]
        vox = nxt
    return pts


def _exit_from(vox, p, d):
    """Ray-box exit of the voxel ``vox`` along ``d`` from ``p``.

    Ties between axes (edge or corner hits) go to the axis with the largest
    ``|d|`` component.
    """
    best_t, axis, best_mag = math.inf, -1, -1.0
    for a in range(3):
        da = d[a]
        if da == 0.0:
            continue
        bound = vox[a] + (0.5 if da > 0 else -0.5)
        t = (bound - p[a]) / da
        if t < best_t - 1e-12 or (abs(t - best_t) <= 1e-12 and abs(da) > best_mag):
            best_t, axis, best_mag = t, a, abs(da)
    return max(best_t, 0.0), axis


def fact_track(tensors, mask, params: TrackingParams | None = None, seed_voxel=(0, 0, 0), e1=None, flip=False):
    """Bidirectional FACT streamline from the centre of ``seed_voxel``.

    The forward half starts along the seed's ``e1`` (``-e1`` when ``flip``),
    the backward half along the opposite sign; the result runs from the end
    of the backward half through the seed to the end of the forward half.

    Returns
    -------
    ndarray, shape (n, 3)
    """
    params = params or TrackingParams()
    mask = np.asarray(mask, dtype=bool)
    seed = tuple(int(v) for v in seed_voxel)
    if not mask[seed]:
        raise ValueError(f"seed {seed} is outside the tracking mask")
    if e1 is None:
        e1 = principal_directions(tensors)
    d0 = [float(v) for v in e1[seed]]
    if flip:
        d0 = [-v for v in d0]
    fwd = _half_track(e1, mask, seed, d0, params)
    bwd = _half_track(e1, mask, seed, [-v for v in d0], params)
    return np.array(bwd[::-1] + fwd[1:], dtype=np.float64)


def track_all(tensors, mask, params: TrackingParams | None = None, threads: int = 1):
    """One streamline per mask voxel, seeded at voxel centres in index order."""
    params = params or TrackingParams()
    mask = np.asarray(mask, dtype=bool)
    e1 = principal_directions(tensors)
    seeds = [tuple(int(v) for v in s) for s in np.argwhere(mask)]

    def run(chunk):
        return [fact_track(None, mask, params, s, e1=e1) for s in chunk]

    if threads <= 1 or len(seeds) < 2:
        return run(seeds)
    chunks = [seeds[i::threads] for i in range(threads)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(run, chunks))
    out = [None] * len(seeds)
    for i, part in enumerate(parts):
        out[i::threads] = part
    return out


def visited_voxels(streamline, sample_step: float = 0.1) -> np.ndarray:
    """Distinct voxels a polyline passes through, as an (m, 3) int array.

    Each segment is sampled at interior points no more than ``sample_step``
    apart, which keeps face-lying vertices from being rounded into the
    wrong voxel.
    """
    pts = np.asarray(streamline, dtype=np.float64)
    if len(pts) == 1:
        return np.round(pts).astype(int)
    seg = pts[1:] - pts[:-1]
    n = np.maximum(1, np.ceil(np.linalg.norm(seg, axis=1) / sample_step).astype(int))
    which = np.repeat(np.arange(len(seg)), n)
    starts = np.cumsum(n) - n
    frac = (np.arange(which.size) - starts[which] + 0.5) / n[which]
    samples = pts[:-1][which] + frac[:, None] * seg[which]
    vox = np.floor(samples + 0.5).astype(int)
    return np.unique(vox, axis=0)


def _in_box(vox, box):
    lo, hi = np.asarray(box[0]), np.asarray(box[1])
    return np.any(np.all((vox >= lo) & (vox <= hi), axis=1))


def filter_bundle(streamlines, roi_a, roi_b):
    """Streamlines visiting at least one voxel of each inclusive box ``((i0, j0, k0), (i1, j1, k1))``."""
    for box in (roi_a, roi_b):
        if np.any(np.asarray(box[0]) > np.asarray(box[1])):
            raise ValueError(f"degenerate ROI box {box}")
    kept = []
    for sl in streamlines:
        vox = visited_voxels(sl)
        if _in_box(vox, roi_a) and _in_box(vox, roi_b):
            kept.append(sl)
    return kept


def density_map(streamlines, dims) -> np.ndarray:
    """Number of distinct streamlines passing through each voxel."""
    out = np.zeros(tuple(dims), dtype=np.int64)
    for sl in streamlines:
        vox = visited_voxels(sl)
        inside = np.all((vox >= 0) & (vox < np.asarray(dims)), axis=1)
        if not np.all(inside):
            raise ValueError("streamline leaves the volume")
        out[vox[:, 0], vox[:, 1], vox[:, 2]] += 1
    return out
