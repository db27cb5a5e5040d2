"""The end-to-end comparison experiment behind the ``repro`` command.

One larger phantom subject provides training data; a second, unseen subject
is scored under several noise realizations.  Each realization compares the
conventional fit on 6 and 30 directions with the voxel-wise and patch
networks, all networks seeing the same single b=0 plus six directions.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import dwi_model, fitting, metrics, neural, phantom, tracking

log = logging.getLogger(__name__)

BUNDLES = ("cc", "cst")
METHODS = ("lls6", "lls30", "voxel1", "patch3")

DEFAULT_MANIFEST = {
    "scheme": {"n_b0": 18, "n_dirs": 90, "bvalue": 1000.0, "seed": 0},
    "dirs30_seed": 1,
    "snr": 20.0,
    "train_subject": {"seed": 0, "size": 48, "noise_seed": 100},
    "test_subject": {"seed": 1, "size": 32, "noise_seeds": [200, 201, 202]},
    "training": {"seed": 0},
    "tracking": {},
    "density_threshold": 2,
}


def merge_manifest(overrides: dict | None) -> dict:
    """Deep-merge ``overrides`` into the default manifest, rejecting unknown keys."""
    out = copy.deepcopy(DEFAULT_MANIFEST)

    def merge(dst, src, where):
        for k, v in src.items():
            if k not in dst:
                raise KeyError(f"unknown manifest key {where}{k}")
            if isinstance(dst[k], dict) and k not in ("training", "tracking"):
                merge(dst[k], v, f"{where}{k}.")
            else:
                dst[k] = copy.deepcopy(v)

    merge(out, overrides or {}, "")
    return out


def manifest_hash(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def schemes(manifest):
    """The full pool, its Skare-matched 6-direction subset and a 30-direction subset.

    Returns (full, six, six_idx, thirty, thirty_idx) with indices into ``full``.
    """
    sc = manifest["scheme"]
    full = dwi_model.hcp_like_scheme(sc["n_b0"], sc["n_dirs"], sc["bvalue"], sc["seed"])
    six, six_idx = dwi_model.six_direction_scheme(full)
    picked, _ = dwi_model.subsample_scheme(full, dwi_model.uniform_directions(30, seed=manifest["dirs30_seed"]))
    thirty_idx = [int(full.b0_indices[0])] + picked
    return full, six, six_idx, full.subset(thirty_idx), thirty_idx


def bundle_densities(tensors, brain, ph: phantom.PhantomVolume, params: tracking.TrackingParams, threads=1):
    """Track the whole estimated WM and return per-bundle density maps."""
    mask = tracking.wm_mask(tensors, params.linearity_threshold) & brain
    streamlines = tracking.track_all(tensors, mask, params, threads=threads)
    return {
        name: tracking.density_map(tracking.filter_bundle(streamlines, *ph.rois[name]), ph.spec.dims)
        for name in BUNDLES
    }


def train_networks(manifest, six, threads=1):
    """Train both network modes on the training subject; returns ({mode: params}, {mode: History})."""
    ts = manifest["train_subject"]
    subject = phantom.generate_phantom(phantom.default_spec(seed=ts["seed"], size=ts["size"]))
    dwi = phantom.simulate_dwi(subject, six, manifest["snr"], seed=ts["noise_seed"])
    data = neural.extract_patches(dwi, six, subject.brain_mask, subject.tensors)
    cfg = neural.TrainingConfig.from_dict(manifest["training"])
    nets, hists = {}, {}
    for mode in ("voxel1", "patch3"):
        t0 = time.perf_counter()
        nets[mode], hists[mode] = neural.train(cfg, data, mode)
        log.info("trained %s in %.1f s (%d epochs)", mode, time.perf_counter() - t0, len(hists[mode].epochs))
    return nets, hists


def run_experiment(manifest: dict | None = None, threads: int = 1, nets=None) -> dict:
    """Run the comparison and return its results.

    Returns a dict with ``rows`` (list of :class:`metrics.ReportRow`), the
    per-realization ``tables`` ``{noise_seed: {method: {metric: value}}}``,
    the ground-truth tracking ``gt_dice`` ``{bundle: dice vs bundle mask}``
    and the trained ``nets``.
    """
    manifest = merge_manifest(manifest)
    full, six, six_idx, thirty, thirty_idx = schemes(manifest)
    if nets is None:
        nets, _ = train_networks(manifest, six, threads)
    ts = manifest["test_subject"]
    test = phantom.generate_phantom(phantom.default_spec(seed=ts["seed"], size=ts["size"]))
    brain, wm, gt = test.brain_mask, test.wm_mask, test.tensors
    tparams = tracking.TrackingParams(**manifest["tracking"])
    thr = int(manifest["density_threshold"])

    gt_dens = bundle_densities(gt, brain, test, tparams, threads)
    gt_dice = {b: metrics.dice(gt_dens[b] >= thr, test.bundle_masks[b]) for b in BUNDLES}
    rows = [metrics.ReportRow("ground_truth", "dice_vs_mask", b, gt_dice[b]) for b in BUNDLES]
    tables = {}
    for noise_seed in ts["noise_seeds"]:
        dwi = phantom.simulate_dwi(test, full, manifest["snr"], seed=noise_seed)
        dwi6 = dwi[..., six_idx]
        est = {
            "lls6": fitting.fit_volume(dwi6, six, brain, threads=threads),
            "lls30": fitting.fit_volume(dwi[..., thirty_idx], thirty, brain, threads=threads),
        }
        for mode in ("voxel1", "patch3"):
            est[mode] = neural.predict_volume(nets[mode], dwi6, six, brain)
        table = {}
        for method in METHODS:
            mrows = metrics.tensor_rows(method, est[method], gt, brain, wm)
            dens = bundle_densities(est[method], brain, test, tparams, threads)
            for b in BUNDLES:
                mrows.append(
                    metrics.ReportRow(method, f"dice_{b}", "density", metrics.dice_bundles(dens[b], gt_dens[b], thr))
                )
            table[method] = {r.metric: r.value for r in mrows}
            rows += [metrics.ReportRow(r.method, r.metric, f"{r.region}:noise{noise_seed}", r.value) for r in mrows]
        tables[noise_seed] = table
    return {"rows": rows, "tables": tables, "gt_dice": gt_dice, "nets": nets, "manifest": manifest}


def repro(manifest: dict | None, out_dir, threads: int = 1, manifest_path: str = "<defaults>") -> dict:
    """Run :func:`run_experiment` and write ``report.txt`` and ``report.csv`` under ``out_dir``."""
    result = run_experiment(manifest, threads=threads)
    prov = {
        "command": "repro",
        "manifest": manifest_path,
        "config_hash": manifest_hash(result["manifest"]),
    }
    text, csv = metrics.format_report(result["rows"], prov)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(csv)
    return result


def orderings(table: dict) -> dict:
    """Check the method orderings on one realization's table; returns {name: bool}."""
    t = {m: table[m] for m in METHODS}
    p, v, c6, c30 = t["patch3"], t["voxel1"], t["lls6"], t["lls30"]
    out = {
        "frobenius": p["frobenius"] < v["frobenius"] < c6["frobenius"]
        and p["frobenius"] <= 1.25 * c30["frobenius"],
        "angle": p["angle_deg"] < c6["angle_deg"] and p["angle_deg"] < v["angle_deg"],
    }
    for m in ("abs_dfa", "abs_dmd"):
        out[m] = p[m] < v[m] and p[m] < c6[m]
    for b in BUNDLES:
        out[f"dice_{b}"] = p[f"dice_{b}"] > c6[f"dice_{b}"] and p[f"dice_{b}"] > v[f"dice_{b}"]
    return out

