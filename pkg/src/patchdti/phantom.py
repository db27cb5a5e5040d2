"""Synthetic ground-truth tensor fields with labelled fibre bundles.

Geometry is given in millimetres; the centre of voxel ``(i, j, k)`` sits at
``(i, j, k) * voxel_size``.  Each bundle is a tube of fixed radius around a
centreline.  Voxels inside a tube receive a single tensor whose principal
axis follows the local centreline tangent; voxels claimed by more than one
tube go to the nearest centreline.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter

from . import tensor_core

log = logging.getLogger(__name__)


class PhantomError(ValueError):
    pass


@dataclass
class BundleSpec:
    name: str
    kind: str  # "straight" | "arc" | "crossing-pair"
    radius: float  # mm
    eigenvalues: tuple = (1.7e-3, 0.2e-3, 0.2e-3)
    # straight: start, end.  arc: center, arc_radius, axis_u, axis_v, angles (rad).
    # crossing-pair: center, directions (two), half_length.
    start: tuple | None = None
    end: tuple | None = None
    center: tuple | None = None
    arc_radius: float | None = None
    axis_u: tuple | None = None
    axis_v: tuple | None = None
    angles: tuple | None = None
    directions: tuple | None = None
    half_length: float | None = None


@dataclass
class PhantomSpec:
    dims: tuple = (32, 32, 32)
    voxel_size: float = 2.0
    bundles: list = field(default_factory=list)
    background_eigenvalues: tuple = (0.8e-3, 0.8e-3, 0.8e-3)
    # amplitude of smooth relative variation of background diffusivity (stays isotropic)
    background_jitter: float = 0.0
    # amplitude of smooth variation of bundle eigenvalues: l1 scaled by (1 + a f), l2, l3 by (1 - a f)
    bundle_jitter: float = 0.0
    # spatial correlation length (voxels) of both variation fields
    smoothness: float = 2.0
    # extra straight bundles at seeded random positions and orientations, kept
    # clear of the named bundles and their ROIs
    random_bundles: int = 0
    random_bundle_radius: float = 4.0  # mm
    random_bundle_eigenvalues: tuple = (1.7e-3, 0.2e-3, 0.2e-3)
    brain_radius: float | None = None  # mm, sphere about the volume centre; None = whole box
    s0: float = 100.0
    seed: int = 0

    @classmethod
    def from_dict(cls, cfg: dict) -> "PhantomSpec":
        cfg = dict(cfg)
        known = set(cls.__dataclass_fields__)
        unknown = set(cfg) - known
        if unknown:
            raise PhantomError(f"unknown phantom keys: {sorted(unknown)}")
        bundles = []
        for b in cfg.pop("bundles", []):
            bad = set(b) - set(BundleSpec.__dataclass_fields__)
            if bad:
                raise PhantomError(f"unknown bundle keys: {sorted(bad)}")
            bundles.append(BundleSpec(**b))
        for key in ("dims", "background_eigenvalues", "random_bundle_eigenvalues"):
            if key in cfg:
                cfg[key] = tuple(cfg[key])
        return cls(bundles=bundles, **cfg)

    def to_dict(self) -> dict:
        return asdict(self)


def load_phantom_spec(path) -> PhantomSpec:
    with open(path) as fh:
        return PhantomSpec.from_dict(json.load(fh))


def default_spec(seed: int = 0, size: int = 32) -> PhantomSpec:
    """Desk-scale phantom with one straight ("cc") and one 90 degree arc ("cst") bundle.

    At the default ``size`` of 32 the volume is 32^3 voxels of 2 mm, bundle
    radius 3 voxels, with four random straight bundles.  Other sizes scale
    the same anatomy.
    """
    vs = 2.0
    f = size / 32.0
    return PhantomSpec(
        dims=(size, size, size),
        voxel_size=vs,
        bundles=[
            BundleSpec(
                name="cc",
                kind="straight",
                radius=3 * vs * f,
                start=(5 * vs * f, 22 * vs * f, 12 * vs * f),
                end=(26 * vs * f, 17 * vs * f, 20 * vs * f),
            ),
            BundleSpec(
                name="cst",
                kind="arc",
                radius=3 * vs * f,
                center=(8 * vs * f, 10 * vs * f, 8 * vs * f),
                arc_radius=12 * vs * f,
                axis_u=(1.0, 0.0, 0.0),
                axis_v=(0.0, 0.0, 1.0),
                angles=(0.0, np.pi / 2),
            ),
        ],
        brain_radius=15 * vs * f,
        background_jitter=0.2,
        bundle_jitter=0.1,
        random_bundles=int(round(4 * f**2)),
        seed=seed,
    )


@dataclass
class Centerline:
    """Analytic centreline, able to report nearest point and tangent for any position."""

    kind: str
    params: dict

    @property
    def length(self) -> float:
        p = self.params
        if self.kind == "straight":
            return float(np.linalg.norm(p["end"] - p["start"]))
        return float(p["arc_radius"] * (p["angles"][1] - p["angles"][0]))

    def point(self, fraction: float):
        """Position and unit tangent at ``fraction`` of the arclength."""
        p = self.params
        if self.kind == "straight":
            t = p["end"] - p["start"]
            return p["start"] + fraction * t, t / np.linalg.norm(t)
        a0, a1 = p["angles"]
        th = a0 + fraction * (a1 - a0)
        u, v = p["axis_u"], p["axis_v"]
        pos = p["center"] + p["arc_radius"] * (np.cos(th) * u + np.sin(th) * v)
        return pos, -np.sin(th) * u + np.cos(th) * v

    def project(self, x):
        """Distance, tangent and interior flag for positions ``x`` of shape (..., 3)."""
        p = self.params
        if self.kind == "straight":
            seg = p["end"] - p["start"]
            length = np.linalg.norm(seg)
            t = seg / length
            s = (x - p["start"]) @ t
            foot = p["start"] + s[..., None] * t
            dist = np.linalg.norm(x - foot, axis=-1)
            tangent = np.broadcast_to(t, x.shape)
            inside = (s >= 0) & (s <= length)
            return dist, tangent, inside
        u, v = p["axis_u"], p["axis_v"]
        rel = x - p["center"]
        phi = np.arctan2(rel @ v, rel @ u)
        a0, a1 = p["angles"]
        phi = np.where(phi < a0 - 1e-12, phi + 2 * np.pi, phi)
        foot = p["center"] + p["arc_radius"] * (np.cos(phi)[..., None] * u + np.sin(phi)[..., None] * v)
        dist = np.linalg.norm(x - foot, axis=-1)
        tangent = -np.sin(phi)[..., None] * u + np.cos(phi)[..., None] * v
        inside = (phi >= a0) & (phi <= a1)
        return dist, tangent, inside


def _centerlines(b: BundleSpec):
    """Expand a bundle spec into ``(name, Centerline)`` pairs."""
    vec = lambda a: np.asarray(a, dtype=np.float64)  # noqa: E731
    if b.kind == "straight":
        return [(b.name, Centerline("straight", {"start": vec(b.start), "end": vec(b.end)}))]
    if b.kind == "arc":
        u = vec(b.axis_u) / np.linalg.norm(b.axis_u)
        v = vec(b.axis_v) - (vec(b.axis_v) @ u) * u
        v /= np.linalg.norm(v)
        params = {
            "center": vec(b.center),
            "arc_radius": float(b.arc_radius),
            "axis_u": u,
            "axis_v": v,
            "angles": tuple(float(a) for a in b.angles),
        }
        if not 0 < params["angles"][1] - params["angles"][0] < 2 * np.pi:
            raise PhantomError(f"bundle {b.name}: arc angles must span (0, 2 pi)")
        return [(b.name, Centerline("arc", params))]
    if b.kind == "crossing-pair":
        c = vec(b.center)
        out = []
        for tag, d in zip("ab", b.directions):
            d = vec(d) / np.linalg.norm(d)
            out.append(
                (f"{b.name}_{tag}", Centerline("straight", {"start": c - b.half_length * d, "end": c + b.half_length * d}))
            )
        return out
    raise PhantomError(f"bundle {b.name}: unknown kind {b.kind!r}")


@dataclass
class PhantomVolume:
    spec: PhantomSpec
    tensors: np.ndarray  # (nx, ny, nz, 6)
    s0: np.ndarray  # (nx, ny, nz)
    brain_mask: np.ndarray
    bundle_masks: dict
    rois: dict  # name -> (box_a, box_b); box = ((i0, j0, k0), (i1, j1, k1)) inclusive
    centerlines: dict

    @property
    def wm_mask(self) -> np.ndarray:
        out = np.zeros(self.brain_mask.shape, dtype=bool)
        for m in self.bundle_masks.values():
            out |= m
        return out


def _smooth_field(rng, dims, sigma):
    """Gaussian-smoothed white noise rescaled to the range [-1, 1]."""
    raw = rng.standard_normal(dims)
    if sigma > 0:
        raw = gaussian_filter(raw, sigma, mode="wrap")
    peak = np.max(np.abs(raw))
    return raw / peak if peak > 0 else raw


def _roi_box(pos_mm, tangent, radius_vox, voxel_size, dims):
    # one-voxel slab across the tube, normal to the dominant tangent axis
    centre = pos_mm / voxel_size
    axis = int(np.argmax(np.abs(tangent)))
    half = int(np.ceil(radius_vox)) + 1
    lo, hi = [], []
    for ax in range(3):
        c = int(np.round(centre[ax]))
        if ax == axis:
            lo.append(c)
            hi.append(c)
        else:
            lo.append(max(c - half, 0))
            hi.append(min(c + half, dims[ax] - 1))
    return tuple(lo), tuple(hi)


def _fill(tensors, m, tangents, eigenvalues, jitter):
    if not np.any(m):
        return
    f = jitter[m]
    lam = np.asarray(eigenvalues, dtype=np.float64) * np.stack([1 + f, 1 - f, 1 - f], axis=-1)
    tensors[m] = tensor_core.axis_aligned(tangents[m], lam)


def _random_tubes(spec, pos, brain, occupied, rng, gap=2, attempts=2000):
    """Yield ``(centerline, mask, tangents)`` for non-touching random straight tubes."""
    dims = brain.shape
    centre = (np.asarray(dims) - 1) / 2.0 * spec.voxel_size
    reach = spec.brain_radius if spec.brain_radius is not None else min(dims) * spec.voxel_size / 2
    r = spec.random_bundle_radius
    blocked = binary_dilation(occupied, iterations=gap)
    placed = 0
    for _ in range(attempts):
        if placed == spec.random_bundles:
            return
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        c = centre + rng.uniform(-0.6, 0.6, size=3) * reach
        # chord of the brain sphere through c along u, pulled in by the tube radius
        rel = c - centre
        bq = rel @ u
        disc = bq * bq - (rel @ rel - (reach - r) ** 2)
        if disc <= 0:
            continue
        t0, t1 = -bq - np.sqrt(disc), -bq + np.sqrt(disc)
        if t1 - t0 < 6 * spec.voxel_size:
            continue
        max_len = 14 * spec.voxel_size
        if t1 - t0 > max_len:
            t0 = rng.uniform(t0, t1 - max_len)
            t1 = t0 + max_len
        cl = Centerline("straight", {"start": c + t0 * u, "end": c + t1 * u})
        dist, tan, inside = cl.project(pos)
        m = inside & (dist <= r) & brain
        if m.sum() < 10 or np.any(m & blocked):
            continue
        placed += 1
        occupied = occupied | m
        blocked = binary_dilation(occupied, iterations=gap)
        yield cl, m, tan
    if placed < spec.random_bundles:
        log.warning("placed only %d of %d random bundles", placed, spec.random_bundles)


def generate_phantom(spec: PhantomSpec) -> PhantomVolume:
    """Build the tensor field, masks and ROI pairs described by ``spec``."""
    dims = tuple(int(n) for n in spec.dims)
    if len(dims) != 3 or min(dims) < 1:
        raise PhantomError(f"bad dims {spec.dims}")
    if spec.voxel_size <= 0:
        raise PhantomError("voxel_size must be positive")
    bg = np.asarray(spec.background_eigenvalues, dtype=np.float64)
    if np.any(bg <= 0):
        raise PhantomError("background eigenvalues must be positive")
    if not np.allclose(bg, bg[0]):
        raise PhantomError("background must be isotropic")
    if not 0 <= spec.background_jitter < 1 or not 0 <= spec.bundle_jitter < 1:
        raise PhantomError("jitter amplitudes must lie in [0, 1)")

    lines = []
    for b in spec.bundles:
        lam = np.asarray(b.eigenvalues, dtype=np.float64)
        if np.any(lam <= 0) or not (lam[0] >= lam[1] >= lam[2]):
            raise PhantomError(f"bundle {b.name}: eigenvalues must be positive and descending")
        if b.radius <= 0:
            raise PhantomError(f"bundle {b.name}: radius must be positive")
        for name, cl in _centerlines(b):
            lines.append((name, cl, b))
    names = [n for n, _, _ in lines]
    if len(set(names)) != len(names):
        raise PhantomError(f"duplicate bundle names: {names}")

    idx = np.stack(np.meshgrid(*[np.arange(n) for n in dims], indexing="ij"), axis=-1)
    pos = idx * spec.voxel_size
    if spec.brain_radius is None:
        brain = np.ones(dims, dtype=bool)
    else:
        centre = (np.asarray(dims) - 1) / 2.0 * spec.voxel_size
        brain = np.linalg.norm(pos - centre, axis=-1) <= spec.brain_radius

    rng = np.random.default_rng(spec.seed)
    bg_field = _smooth_field(rng, dims, spec.smoothness)
    fibre_field = _smooth_field(rng, dims, spec.smoothness)
    tensors = np.zeros(dims + (6,))
    tensors[..., :3] = bg * (1.0 + spec.background_jitter * bg_field)[..., None]

    best = np.full(dims, np.inf)
    owner = np.full(dims, -1)
    tangents = np.zeros(dims + (3,))
    for i, (_, cl, b) in enumerate(lines):
        dist, tan, inside = cl.project(pos)
        claim = inside & (dist <= b.radius + 1e-9) & brain & (dist < best)
        best = np.where(claim, dist, best)
        owner = np.where(claim, i, owner)
        tangents = np.where(claim[..., None], tan, tangents)

    masks, rois, centerlines = {}, {}, {}
    for i, (name, cl, b) in enumerate(lines):
        m = owner == i
        _fill(tensors, m, tangents, b.eigenvalues, spec.bundle_jitter * fibre_field)
        masks[name] = m
        centerlines[name] = cl
        rad_vox = b.radius / spec.voxel_size
        boxes = []
        for frac in (0.25, 0.75):
            p, t = cl.point(frac)
            boxes.append(_roi_box(p, t, rad_vox, spec.voxel_size, dims))
        rois[name] = tuple(boxes)

    if spec.random_bundles:
        occupied = owner >= 0
        for lo, hi in (box for pair in rois.values() for box in pair):
            occupied[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1] = True
        frng = np.random.default_rng([spec.seed, 1])
        for j, (cl, m, tan) in enumerate(_random_tubes(spec, pos, brain, occupied, frng)):
            name = f"random{j}"
            if name in masks:
                raise PhantomError(f"bundle name {name} is reserved for random bundles")
            _fill(tensors, m, tan, spec.random_bundle_eigenvalues, spec.bundle_jitter * fibre_field)
            masks[name] = m
            centerlines[name] = cl

    tensors[~brain] = 0.0
    s0 = np.where(brain, float(spec.s0), 0.0)
    return PhantomVolume(spec, tensors, s0, brain, masks, rois, centerlines)


def simulate_dwi(phantom: PhantomVolume, scheme, snr=20.0, seed=None, model="rician") -> np.ndarray:
    """Noisy DWI of the phantom; ``snr = s0 / sigma`` (``inf`` gives noiseless data).

    Voxels outside the brain hold zero signal before noise is added.
    """
    from .dwi_model import add_noise, simulate_signal

    out = np.zeros(phantom.brain_mask.shape + (len(scheme),))
    b = phantom.brain_mask
    out[b] = simulate_signal(phantom.tensors[b], phantom.s0[b], scheme)
    if np.isinf(snr):
        return out
    sigma = phantom.spec.s0 / float(snr)
    return add_noise(out, sigma, model, seed)
