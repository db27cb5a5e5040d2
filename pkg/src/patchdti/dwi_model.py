"""Gradient schemes, the tensor signal model and acquisition design tools."""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor_core

#: b-values below this (s/mm^2) count as non-diffusion-weighted.
B0_THRESHOLD = 10.0

# the exact best-first search is used up to these sizes; larger problems go
# to the Hungarian solver, which is also exact
_SEARCH_MAX_K = 6
_SEARCH_MAX_POOL = 128


class SchemeError(ValueError):
    pass


@dataclass(frozen=True)
class GradientScheme:
    """Per-volume b-values (s/mm^2) and unit gradient directions."""

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        bvecs = np.asarray(self.bvecs, dtype=np.float64).reshape(-1, 3)
        if bvals.size == 0:
            raise SchemeError("a gradient scheme needs at least one entry")
        if bvecs.shape[0] != bvals.size:
            raise SchemeError(f"{bvals.size} b-values but {bvecs.shape[0]} directions")
        dw = bvals >= B0_THRESHOLD
        norms = np.linalg.norm(bvecs[dw], axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise SchemeError("diffusion-weighted directions must have unit norm")
        bvals = np.where(dw, bvals, 0.0)
        bvecs = np.where(dw[:, None], bvecs, 0.0)
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)

    def __len__(self):
        return self.bvals.size

    @property
    def dw_mask(self) -> np.ndarray:
        return self.bvals > 0

    @property
    def b0_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.dw_mask)

    @property
    def dw_indices(self) -> np.ndarray:
        return np.flatnonzero(self.dw_mask)

    def subset(self, indices) -> "GradientScheme":
        idx = np.asarray(indices, dtype=int)
        return GradientScheme(self.bvals[idx], self.bvecs[idx])

    @classmethod
    def from_directions(cls, directions, bvalue=1000.0, n_b0=1) -> "GradientScheme":
        """``n_b0`` b=0 entries followed by one shell of unit directions."""
        g = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        g = g / np.linalg.norm(g, axis=1, keepdims=True)
        bvals = np.concatenate([np.zeros(n_b0), np.full(len(g), float(bvalue))])
        bvecs = np.concatenate([np.zeros((n_b0, 3)), g])
        return cls(bvals, bvecs)


def skare_directions() -> np.ndarray:
    """The six minimum-condition-number directions, renormalised to unit length."""
    text = resources.files("patchdti").joinpath("data/skare6.txt").read_text()
    g = np.loadtxt(text.splitlines(), comments="#")
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def skare_scheme(bvalue=1000.0, n_b0=1) -> GradientScheme:
    return GradientScheme.from_directions(skare_directions(), bvalue, n_b0)


def uniform_directions(n: int, iterations: int = 500, seed: int = 0) -> np.ndarray:
    """Near-uniform axial directions by electrostatic repulsion.

    Each point repels both the other points and their antipodes, so the
    result covers the sphere for an antipodally symmetric encoding.  The
    output is deterministic for a given ``seed`` and sign-normalised to the
    upper hemisphere (z >= 0).
    """
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(n, 3))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    step = 0.01
    for _ in range(iterations):
        force = np.zeros_like(g)
        for sgn in (1.0, -1.0):
            diff = g[:, None, :] - sgn * g[None, :, :]
            dist = np.linalg.norm(diff, axis=-1)
            np.fill_diagonal(dist, np.inf)
            force += np.sum(diff / dist[..., None] ** 3, axis=1)
        force -= np.sum(force * g, axis=1, keepdims=True) * g
        g = g + step * force / max(np.max(np.linalg.norm(force, axis=1)), 1e-12)
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        step *= 0.998
    return np.where(g[:, 2:3] < 0, -g, g)


def hcp_like_scheme(n_b0: int = 18, n_dirs: int = 90, bvalue: float = 1000.0, seed: int = 0):
    """Single-shell stand-in for a high-angular-resolution acquisition."""
    return GradientScheme.from_directions(uniform_directions(n_dirs, seed=seed), bvalue, n_b0)


def design_matrix(scheme: GradientScheme) -> np.ndarray:
    """Log-linear design with rows ``[b gx^2, b gy^2, b gz^2, 2b gx gy, 2b gx gz, 2b gy gz]``.

    One row per diffusion-weighted entry, in scheme order.  With ``d`` the
    tensor components, ``ln(S / S0) = -(B @ d)`` for noiseless signals.
    """
    dw = scheme.dw_indices
    if dw.size == 0:
        raise SchemeError("scheme has no diffusion-weighted entries")
    b = scheme.bvals[dw]
    gx, gy, gz = scheme.bvecs[dw].T
    return np.stack(
        [b * gx * gx, b * gy * gy, b * gz * gz, 2 * b * gx * gy, 2 * b * gx * gz, 2 * b * gy * gz],
        axis=1,
    )


def _full_design(scheme):
    # one row per entry, b=0 rows are all zero
    b = scheme.bvals
    gx, gy, gz = scheme.bvecs.T
    return np.stack(
        [b * gx * gx, b * gy * gy, b * gz * gz, 2 * b * gx * gy, 2 * b * gx * gz, 2 * b * gy * gz],
        axis=1,
    )


def simulate_signal(d, s0, scheme: GradientScheme) -> np.ndarray:
    """Noiseless signals ``S0 exp(-b g^T D g)`` for every scheme entry.

    Broadcasts over tensor fields: ``d`` of shape (..., 6) and ``s0`` scalar
    or (...) give an output of shape (..., len(scheme)).
    """
    d = np.asarray(d, dtype=np.float64)
    s0 = np.asarray(s0, dtype=np.float64)
    if np.any(s0 <= 0):
        raise SchemeError("s0 must be positive")
    lam = tensor_core.eigenvalues(d)
    if np.any(lam[..., 2] <= 0):
        raise tensor_core.TensorError("signal simulation needs SPD tensors")
    adc = d @ _full_design(scheme).T
    return s0[..., None] * np.exp(-adc)


def add_noise(signals, sigma: float, model: str = "rician", seed=None) -> np.ndarray:
    """Add Gaussian or Rician noise of standard deviation ``sigma``.

    Rician noise is the magnitude of the signal after independent Gaussian
    noise in the real and imaginary channels.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    s = np.asarray(signals, dtype=np.float64)
    if sigma == 0:
        return s.copy()
    rng = np.random.default_rng(seed)
    if model == "gaussian":
        return s + rng.normal(0.0, sigma, size=s.shape)
    if model == "rician":
        n1 = rng.normal(0.0, sigma, size=s.shape)
        n2 = rng.normal(0.0, sigma, size=s.shape)
        return np.sqrt((s + n1) ** 2 + n2**2)
    raise ValueError(f"unknown noise model {model!r}")


def condition_number(scheme: GradientScheme) -> float:
    """Ratio of extreme singular values of the design matrix; inf if rank deficient."""
    b = design_matrix(scheme)
    if b.shape[0] < 6:
        raise SchemeError("condition number needs at least 6 diffusion-weighted entries")
    s = np.linalg.svd(b, compute_uv=False)
    if s[-1] <= s[0] * max(b.shape) * np.finfo(float).eps:
        return float("inf")
    return float(s[0] / s[-1])


def axial_distance(u, v) -> np.ndarray:
    """Angle in radians between axes ``u`` and ``v``, blind to sign."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    dot = np.abs(np.sum(u * v, axis=-1))
    return np.arccos(np.clip(dot, 0.0, 1.0))


def _cost_matrix(pool, targets):
    return axial_distance(pool[:, None, :], targets[None, :, :])


def _best_first_assignment(cost):
    """Exact minimum-cost injective assignment of targets (columns) to pool rows."""
    n_pool, k = cost.shape
    # pool rows sorted by cost for each target, for a cheap admissible bound
    order = np.argsort(cost, axis=0, kind="stable").T

    def bound(depth, used):
        total = 0.0
        for j in range(depth, k):
            for i in order[j]:
                if i not in used:
                    total += cost[i, j]
                    break
        return total

    counter = itertools.count()
    heap = [(bound(0, frozenset()), 0.0, next(counter), ())]
    while heap:
        est, spent, _, assigned = heapq.heappop(heap)
        depth = len(assigned)
        if depth == k:
            return list(assigned), spent
        used = frozenset(assigned)
        for i in order[depth]:
            if i in used:
                continue
            child_used = used | {i}
            g = spent + cost[i, depth]
            heapq.heappush(heap, (g + bound(depth + 1, child_used), g, next(counter), assigned + (int(i),)))
    raise SchemeError("no feasible assignment")


def subsample_scheme(full: GradientScheme, target: GradientScheme | np.ndarray, k: int | None = None):
    """Pick the ``k`` entries of ``full`` closest to ``target`` directions.

    Closeness is the summed axial angle under the best one-to-one matching
    of target directions to distinct ``full`` directions.  The search is
    exact.

    Returns
    -------
    indices : list of int
        Indices into ``full`` (b=0 entries are never chosen), ordered to
        match the target directions.
    total : float
        Summed axial distance in radians.
    """
    if isinstance(target, GradientScheme):
        tdirs = target.bvecs[target.dw_mask]
    else:
        tdirs = np.asarray(target, dtype=np.float64).reshape(-1, 3)
        tdirs = tdirs / np.linalg.norm(tdirs, axis=1, keepdims=True)
    if k is None:
        k = len(tdirs)
    if len(tdirs) != k:
        raise SchemeError(f"target has {len(tdirs)} directions, expected {k}")
    pool_idx = full.dw_indices
    if k > pool_idx.size:
        raise SchemeError(f"cannot choose {k} directions from {pool_idx.size}")
    cost = _cost_matrix(full.bvecs[pool_idx], tdirs)
    if k <= _SEARCH_MAX_K and pool_idx.size <= _SEARCH_MAX_POOL:
        rows, total = _best_first_assignment(cost)
    else:
        r, c = linear_sum_assignment(cost)
        rows = [int(i) for _, i in sorted(zip(c, r))]
        total = float(cost[rows, np.arange(k)].sum())
    return [int(pool_idx[i]) for i in rows], float(total)


def six_direction_scheme(full: GradientScheme, n_b0: int = 1):
    """Skare-matched six-direction subset of ``full`` plus its first ``n_b0`` b=0 entries.

    Returns the subset scheme and the indices into ``full`` it was built from.
    """
    picked, _ = subsample_scheme(full, skare_directions(), 6)
    b0 = list(full.b0_indices[:n_b0])
    idx = [int(i) for i in b0] + picked
    return full.subset(idx), idx
