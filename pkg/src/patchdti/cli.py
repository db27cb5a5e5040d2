"""Command-line driver for the phantom, fitting, learning and tracking pipeline.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, missing
or malformed inputs and configs).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dwi_model, fitting, io, metrics, neural, phantom, pipeline, tracking

log = logging.getLogger("patchdti")


class UsageError(Exception):
    pass


def _need(path, what="input"):
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} file {path} not found")
    return path


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _provenance(command, inputs: dict, cfg) -> dict:
    prov = {"command": command, "config_hash": _config_hash(cfg)}
    for name in sorted(inputs):
        path = inputs[name]
        if path is not None:
            prov[f"input.{name}"] = f"{path} sha256:{_digest(path)}"
    return prov


def _header(prov: dict) -> str:
    return "".join(f"# {k}: {prov[k]}\n" for k in sorted(prov))


def _load_config(path) -> dict:
    if path is None:
        return {}
    _need(path, "config")
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return cfg


def _scheme(args):
    try:
        return io.read_bvals_bvecs(_need(args.bvals, "bvals"), _need(args.bvecs, "bvecs"))
    except (io.FormatError, dwi_model.SchemeError) as exc:
        raise UsageError(str(exc)) from None


def _volume(path, what):
    try:
        return io.read_nifti(_need(path, what))
    except io.FormatError as exc:
        raise UsageError(str(exc)) from None


def _mask(path, shape):
    if path is None:
        return np.ones(shape, dtype=bool)
    m = _volume(path, "mask").data > 0.5
    if m.shape != tuple(shape):
        raise UsageError(f"mask dims {m.shape} do not match {tuple(shape)}")
    return m


def _tensors(path):
    vol = _volume(path, "tensor")
    if vol.data.ndim != 4 or vol.data.shape[3] != 6:
        raise UsageError(f"{path}: a tensor field needs 6 volumes, dims are {vol.data.shape}")
    return vol.data.astype(np.float64), vol.voxel_size


def _write_mask(mask, path, vs, descrip):
    io.write_nifti(io.Volume(mask.astype(np.float32), vs), path, descrip)


# subcommands


def cmd_scheme(args):
    seed = 0 if args.seed is None else args.seed
    scheme = dwi_model.hcp_like_scheme(args.n_b0, args.n_dirs, args.bvalue, seed)
    io.write_bvals_bvecs(scheme, f"{args.out_prefix}.bval", f"{args.out_prefix}.bvec")


def cmd_phantom(args):
    if args.spec is not None:
        try:
            spec = phantom.load_phantom_spec(_need(args.spec, "phantom spec"))
        except (ValueError, TypeError, KeyError) as exc:
            raise UsageError(f"bad phantom spec {args.spec}: {exc}") from None
    else:
        spec = phantom.default_spec(size=args.size)
    if args.seed is not None:
        spec.seed = args.seed
    try:
        ph = phantom.generate_phantom(spec)
    except phantom.PhantomError as exc:
        raise UsageError(f"bad phantom spec: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"patchdti phantom cfg:{_config_hash(spec.to_dict())}"
    vs = (spec.voxel_size,) * 3
    io.save_tensors(ph.tensors, out / "tensors.nii", vs, tag)
    io.write_nifti(io.Volume(ph.s0, vs), out / "s0.nii", tag)
    _write_mask(ph.brain_mask, out / "brain_mask.nii", vs, tag)
    _write_mask(ph.wm_mask, out / "wm_mask.nii", vs, tag)
    for name in sorted(ph.bundle_masks):
        _write_mask(ph.bundle_masks[name], out / f"bundle_{name}.nii", vs, tag)
    io.save_rois(ph.rois, out / "rois.json")
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


def cmd_simulate(args):
    tensors, vs = _tensors(args.tensors)
    s0 = _volume(args.s0, "s0").data.astype(np.float64)
    scheme = _scheme(args)
    if s0.shape != tensors.shape[:3]:
        raise UsageError(f"s0 dims {s0.shape} do not match tensor dims {tensors.shape[:3]}")
    inside = s0 > 0
    dwi = np.zeros(tensors.shape[:3] + (len(scheme),))
    dwi[inside] = dwi_model.simulate_signal(tensors[inside], s0[inside], scheme)
    if np.isfinite(args.snr):
        if args.snr <= 0:
            raise UsageError("--snr must be positive")
        sigma = float(np.max(s0)) / args.snr
        dwi = dwi_model.add_noise(dwi, sigma, args.noise, seed=args.seed)
    cfg = {"snr": args.snr, "seed": args.seed, "noise": args.noise}
    prov = _provenance("simulate", {"tensors": args.tensors, "s0": args.s0, "bvals": args.bvals}, cfg)
    io.write_nifti(io.Volume(dwi, vs), f"{args.out_prefix}.nii", f"patchdti simulate cfg:{prov['config_hash']}")
    io.write_bvals_bvecs(scheme, f"{args.out_prefix}.bval", f"{args.out_prefix}.bvec")


def cmd_subsample(args):
    full = _scheme(args)
    if args.target == "skare":
        target = dwi_model.skare_directions()
    else:
        try:
            tb, tv = args.target.split(",")
            tscheme = io.read_bvals_bvecs(_need(tb, "target bvals"), _need(tv, "target bvecs"))
        except ValueError as exc:
            raise UsageError(f"--target must be 'skare' or BVALS,BVECS ({exc})") from None
        target = tscheme.bvecs[tscheme.dw_mask]
    k = args.k if args.k is not None else len(target)
    if k != len(target):
        raise UsageError(f"k={k} but the target has {len(target)} directions")
    try:
        picked, total = dwi_model.subsample_scheme(full, target, k)
    except dwi_model.SchemeError as exc:
        raise UsageError(str(exc)) from None
    idx = [int(i) for i in full.b0_indices[: args.n_b0]] + picked
    sub = full.subset(idx)
    io.write_bvals_bvecs(sub, f"{args.out_prefix}.bval", f"{args.out_prefix}.bvec")
    prov = _provenance("subsample", {"bvals": args.bvals, "bvecs": args.bvecs}, {"target": args.target, "k": k})
    body = f"indices: {' '.join(map(str, idx))}\ntotal_axial_distance_rad: {total!r}\n"
    body += f"condition_number: {dwi_model.condition_number(sub)!r}\n"
    Path(f"{args.out_prefix}.idx").write_text(_header(prov) + body)
    if args.dwi is not None:
        vol = _volume(args.dwi, "dwi")
        if vol.data.ndim != 4 or vol.data.shape[3] != len(full):
            raise UsageError(f"dwi has dims {vol.data.shape}, expected {len(full)} volumes")
        io.write_nifti(io.Volume(vol.data[..., idx], vol.voxel_size), f"{args.out_prefix}.nii")


def _dwi_and_scheme(args):
    vol = _volume(args.dwi, "dwi")
    scheme = _scheme(args)
    if vol.data.ndim != 4 or vol.data.shape[3] != len(scheme):
        raise UsageError(f"dwi dims {vol.data.shape} do not match {len(scheme)} scheme entries")
    return vol, scheme


def cmd_fit(args):
    vol, scheme = _dwi_and_scheme(args)
    mask = _mask(args.mask, vol.data.shape[:3])
    est = fitting.fit_volume(vol.data.astype(np.float64), scheme, mask, threads=args.threads)
    io.save_tensors(est, args.out, vol.voxel_size, "patchdti fit lls")


def cmd_train(args):
    vol, scheme = _dwi_and_scheme(args)
    gt, _ = _tensors(args.tensors)
    mask = _mask(args.mask, vol.data.shape[:3])
    cfg = _load_config(args.config)
    for key in ("seed", "max_epochs"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    try:
        config = neural.TrainingConfig.from_dict(cfg)
    except (neural.NetworkError, TypeError) as exc:
        raise UsageError(f"bad training config: {exc}") from None
    data = neural.extract_patches(vol.data.astype(np.float64), scheme, mask, gt)
    params, hist = neural.train(config, data, args.mode)
    io.save_checkpoint(params, args.out)
    if args.history:
        prov = _provenance("train", {"dwi": args.dwi, "tensors": args.tensors}, {"mode": args.mode, **vars(config)})
        Path(args.history).write_text(_header(prov) + hist.to_csv())


def cmd_predict(args):
    try:
        params = io.load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    vol, scheme = _dwi_and_scheme(args)
    mask = _mask(args.mask, vol.data.shape[:3])
    est = neural.predict_volume(params, vol.data.astype(np.float64), scheme, mask)
    io.save_tensors(est, args.out, vol.voxel_size, f"patchdti predict {params.kernel_mode}")


def _tracking_params(args):
    cfg = _load_config(args.config)
    try:
        return tracking.TrackingParams(**cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad tracking config: {exc}") from None


def cmd_track(args):
    tensors, _ = _tensors(args.tensors)
    params = _tracking_params(args)
    mask = tracking.wm_mask(tensors, params.linearity_threshold) & _mask(args.mask, tensors.shape[:3])
    sls = tracking.track_all(tensors, mask, params, threads=args.threads)
    io.save_streamlines(sls, args.out)
    if args.text:
        Path(args.text).write_text(io.streamlines_to_text(sls))


def cmd_bundle(args):
    try:
        sls = io.load_streamlines(_need(args.streamlines, "streamline"))
        rois = io.load_rois(_need(args.rois, "ROI"))
    except io.FormatError as exc:
        raise UsageError(str(exc)) from None
    if args.density and not args.reference:
        raise UsageError("--density needs --reference")
    if args.name not in rois:
        raise UsageError(f"no ROI pair named {args.name!r} in {args.rois}")
    kept = tracking.filter_bundle(sls, *rois[args.name])
    io.save_streamlines(kept, args.out)
    if args.density:
        ref = _volume(args.reference, "reference")
        dens = tracking.density_map(kept, ref.data.shape[:3])
        io.write_nifti(io.Volume(dens.astype(np.float32), ref.voxel_size), args.density, f"patchdti density {args.name}")


def cmd_evaluate(args):
    est, _ = _tensors(args.est)
    gt, _ = _tensors(args.gt)
    if est.shape != gt.shape:
        raise UsageError(f"estimate dims {est.shape} do not match ground truth {gt.shape}")
    brain = _mask(args.brain_mask, gt.shape[:3])
    wm = _mask(args.wm_mask, gt.shape[:3]) if args.wm_mask else tracking.wm_mask(gt) & brain
    rows = metrics.tensor_rows(args.method, est, gt, brain, wm)
    inputs = {"est": args.est, "gt": args.gt, "brain_mask": args.brain_mask, "wm_mask": args.wm_mask}
    if len(args.density_est) != len(args.density_gt):
        raise UsageError("--density-est and --density-gt must be given the same number of times")
    for i, (de, dg) in enumerate(zip(args.density_est, args.density_gt)):
        a = _volume(de, "density").data
        b = _volume(dg, "density").data
        rows.append(metrics.ReportRow(args.method, "dice", Path(de).stem, metrics.dice_bundles(a, b, args.threshold)))
        inputs[f"density_est{i}"], inputs[f"density_gt{i}"] = de, dg
    prov = _provenance("evaluate", inputs, {"method": args.method, "threshold": args.threshold})
    text, csv = metrics.format_report(rows, prov)
    Path(args.out).write_text(text)
    if args.csv:
        Path(args.csv).write_text(csv)


def cmd_repro(args):
    manifest = _load_config(args.manifest)
    if args.seed is not None:
        manifest.setdefault("training", {})["seed"] = args.seed
    try:
        pipeline.merge_manifest(manifest)
    except KeyError as exc:
        raise UsageError(str(exc)) from None
    result = pipeline.repro(manifest, args.out, threads=args.threads, manifest_path=str(args.manifest or "<defaults>"))
    for seed, table in result["tables"].items():
        verdict = pipeline.orderings(table)
        log.info("noise %s: %s", seed, " ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in verdict.items()))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="patchdti", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for voxel-parallel work")
        return sp

    def scheme_args(sp):
        sp.add_argument("--bvals", required=True)
        sp.add_argument("--bvecs", required=True)

    sp = add("scheme", cmd_scheme, "write the single-shell high-angular-resolution pool")
    sp.add_argument("--n-b0", type=int, default=18)
    sp.add_argument("--n-dirs", type=int, default=90)
    sp.add_argument("--bvalue", type=float, default=1000.0)
    sp.add_argument("--out-prefix", required=True)

    sp = add("phantom", cmd_phantom, "generate a ground-truth phantom")
    sp.add_argument("--spec", help="JSON phantom spec (default: built-in phantom)")
    sp.add_argument("--size", type=int, default=32, help="grid size of the built-in phantom")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("simulate", cmd_simulate, "simulate noisy DWIs from a tensor field")
    sp.add_argument("--tensors", required=True)
    sp.add_argument("--s0", required=True)
    scheme_args(sp)
    sp.add_argument("--snr", type=float, default=20.0, help="max(s0) / sigma; inf for noiseless")
    sp.add_argument("--noise", choices=("rician", "gaussian"), default="rician")
    sp.add_argument("--out-prefix", required=True)

    sp = add("subsample", cmd_subsample, "pick the directions closest to a target set")
    scheme_args(sp)
    sp.add_argument("--target", default="skare", help="'skare' or BVALS,BVECS")
    sp.add_argument("--k", type=int, default=None)
    sp.add_argument("--n-b0", type=int, default=1)
    sp.add_argument("--dwi", help="also slice this 4D DWI to the chosen volumes")
    sp.add_argument("--out-prefix", required=True)

    sp = add("fit", cmd_fit, "conventional log-linear least-squares fit")
    sp.add_argument("--dwi", required=True)
    scheme_args(sp)
    sp.add_argument("--mask")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a patch3 or voxel1 network")
    sp.add_argument("--dwi", required=True)
    scheme_args(sp)
    sp.add_argument("--tensors", required=True, help="ground-truth tensor field")
    sp.add_argument("--mask", required=True)
    sp.add_argument("--mode", choices=("patch3", "voxel1"), default="patch3")
    sp.add_argument("--config", help="JSON training config")
    sp.add_argument("--max-epochs", type=int, default=None)
    sp.add_argument("--history", help="write the training history CSV here")
    sp.add_argument("--out", required=True, help="checkpoint path")

    sp = add("predict", cmd_predict, "predict tensors with a trained network")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dwi", required=True)
    scheme_args(sp)
    sp.add_argument("--mask")
    sp.add_argument("--out", required=True)

    sp = add("track", cmd_track, "FACT tractography seeded in every white-matter voxel")
    sp.add_argument("--tensors", required=True)
    sp.add_argument("--mask", help="restrict tracking to this mask (e.g. the brain)")
    sp.add_argument("--config", help="JSON tracking parameters")
    sp.add_argument("--text", help="also write a text export here")
    sp.add_argument("--out", required=True)

    sp = add("bundle", cmd_bundle, "keep streamlines through both ROIs of a bundle")
    sp.add_argument("--streamlines", required=True)
    sp.add_argument("--rois", required=True, help="rois.json from the phantom command")
    sp.add_argument("--name", required=True)
    sp.add_argument("--density", help="write the density map here (needs --reference)")
    sp.add_argument("--reference", help="volume whose grid the density map uses")
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "compare an estimate with the ground truth")
    sp.add_argument("--est", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--brain-mask", required=True)
    sp.add_argument("--wm-mask", help="default: ground-truth linearity > 0.6 inside the brain")
    sp.add_argument("--density-est", action="append", default=[])
    sp.add_argument("--density-gt", action="append", default=[])
    sp.add_argument("--threshold", type=int, default=25)
    sp.add_argument("--method", default="estimate")
    sp.add_argument("--csv")
    sp.add_argument("--out", required=True)

    sp = add("repro", cmd_repro, "run the full comparison and write the report")
    sp.add_argument("--manifest", help="JSON manifest overriding the defaults")
    sp.add_argument("--out", required=True, help="output directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime error
        log.debug("failure", exc_info=True)
        print(f"failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
