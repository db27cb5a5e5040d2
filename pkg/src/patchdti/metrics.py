"""Error maps and summary statistics for comparing tensor estimates."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor_core

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def _check(est, gt, mask):
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if est.shape != gt.shape or est.shape[:-1] != mask.shape:
        raise MetricError(f"shape mismatch: est {est.shape}, gt {gt.shape}, mask {mask.shape}")
    return est, gt, mask


def frobenius_error_map(est, gt, mask) -> np.ndarray:
    est, gt, mask = _check(est, gt, mask)
    out = np.zeros(mask.shape)
    out[mask] = tensor_core.frobenius_dist(est[mask], gt[mask])
    return out


def scalar_error_maps(est, gt, mask):
    """Absolute FA and MD differences inside ``mask``, zero elsewhere."""
    est, gt, mask = _check(est, gt, mask)
    dfa = np.zeros(mask.shape)
    dmd = np.zeros(mask.shape)
    dfa[mask] = np.abs(tensor_core.fa(est[mask]) - tensor_core.fa(gt[mask]))
    dmd[mask] = np.abs(tensor_core.md(est[mask]) - tensor_core.md(gt[mask]))
    return dfa, dmd


def angular_error_map(est, gt, wm_mask, return_invalid=False):
    """Axial angle in degrees between principal eigenvectors inside ``wm_mask``.

    Estimated tensors that are all zero or have a non-positive leading
    eigenvalue have no usable direction and score the worst case, 90 degrees.
    """
    est, gt, wm = _check(est, gt, wm_mask)
    out = np.zeros(wm.shape)
    e = tensor_core.eig3_sym(est[wm])
    g = tensor_core.eig3_sym(gt[wm])
    cos = np.abs(np.sum(e.e1 * g.e1, axis=-1))
    ang = np.degrees(np.arccos(np.clip(cos, 0.0, 1.0)))
    invalid = ~(e.values[..., 0] > 0) | np.all(est[wm] == 0, axis=-1)
    ang[invalid] = 90.0
    n_bad = int(np.count_nonzero(invalid))
    if n_bad:
        log.warning("%d white-matter voxels without a valid estimated direction scored 90 degrees", n_bad)
    out[wm] = ang
    if return_invalid:
        return out, n_bad
    return out


def dice(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.count_nonzero(a & b) / total)


def dice_bundles(density_est, density_gt, threshold: int = 25) -> float:
    """Dice overlap of the voxels reached by at least ``threshold`` streamlines."""
    de = np.asarray(density_est)
    dg = np.asarray(density_gt)
    if de.shape != dg.shape:
        raise MetricError(f"shape mismatch: {de.shape} vs {dg.shape}")
    return dice(de >= threshold, dg >= threshold)


def median_over_mask(values, mask) -> float:
    """Median inside ``mask``; for even counts the lower middle element."""
    values = np.asarray(values)
    mask = np.asarray(mask, dtype=bool)
    if values.shape != mask.shape:
        raise MetricError(f"shape mismatch: {values.shape} vs {mask.shape}")
    v = np.sort(values[mask], kind="stable")
    if v.size == 0:
        raise MetricError("median over an empty mask")
    return float(v[(v.size - 1) // 2])


@dataclass(frozen=True)
class ReportRow:
    method: str
    metric: str
    region: str
    value: float


def tensor_rows(method, est, gt, brain_mask, wm_mask) -> list:
    """Median Frobenius, |dFA|, |dMD| over the brain and median angle over WM."""
    fro = frobenius_error_map(est, gt, brain_mask)
    dfa, dmd = scalar_error_maps(est, gt, brain_mask)
    ang = angular_error_map(est, gt, wm_mask)
    return [
        ReportRow(method, "frobenius", "brain", median_over_mask(fro, brain_mask)),
        ReportRow(method, "abs_dfa", "brain", median_over_mask(dfa, brain_mask)),
        ReportRow(method, "abs_dmd", "brain", median_over_mask(dmd, brain_mask)),
        ReportRow(method, "angle_deg", "wm", median_over_mask(ang, wm_mask)),
    ]


def _fmt(v: float) -> str:
    return repr(float(v))


def format_report(rows, provenance: dict | None = None):
    """Render rows as (text, csv).

    The text form carries a provenance block of ``# key: value`` lines,
    sorted by key, followed by one ``method, metric, region, value`` line per
    row.  The CSV form has the same provenance lines and a header row.
    """
    head = "".join(f"# {k}: {provenance[k]}\n" for k in sorted(provenance or {}))
    text = head + "".join(f"{r.method}, {r.metric}, {r.region}, {_fmt(r.value)}\n" for r in rows)
    csv = head + "method,metric,region,value\n"
    csv += "".join(f"{r.method},{r.metric},{r.region},{_fmt(r.value)}\n" for r in rows)
    return text, csv


def parse_report(text: str) -> list:
    """Inverse of the text form of :func:`format_report` (provenance skipped)."""
    rows = []
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        method, metric, region, value = (p.strip() for p in line.split(","))
        rows.append(ReportRow(method, metric, region, float(value)))
    return rows
