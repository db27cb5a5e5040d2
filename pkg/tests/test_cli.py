import json
import subprocess
import sys

import numpy as np
import pytest

from patchdti import cli, dwi_model as dm, io, metrics

spec_example = pytest.mark.spec_example


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Small phantom with a full scheme and its six-direction subset."""
    d = tmp_path_factory.mktemp("cli")
    assert run("phantom", "--size", 16, "--seed", 2, "--out", d / "ph") == 0
    assert run("scheme", "--n-b0", 2, "--n-dirs", 30, "--out-prefix", d / "full") == 0
    assert run("subsample", "--bvals", d / "full.bval", "--bvecs", d / "full.bvec", "--out-prefix", d / "six") == 0
    return d


class TestPhantom:
    @spec_example
    def test_files_and_dims(self, workdir):
        ph = workdir / "ph"
        for name in ("tensors.nii", "s0.nii", "brain_mask.nii", "wm_mask.nii", "rois.json", "spec.json"):
            assert (ph / name).exists(), name
        assert io.read_nifti(ph / "tensors.nii").data.shape == (16, 16, 16, 6)
        assert io.read_nifti(ph / "brain_mask.nii").data.shape == (16, 16, 16)
        assert set(io.load_rois(ph / "rois.json")) >= {"cc", "cst"}
        assert io.read_descrip(ph / "tensors.nii").startswith("patchdti phantom cfg:")

    @spec_example
    def test_same_seed_identical_bytes(self, workdir, tmp_path):
        assert run("phantom", "--size", 16, "--seed", 2, "--out", tmp_path / "again") == 0
        for f in sorted((workdir / "ph").iterdir()):
            assert f.read_bytes() == (tmp_path / "again" / f.name).read_bytes(), f.name

    @spec_example
    def test_missing_spec_exit_2(self, tmp_path, capsys):
        assert run("phantom", "--spec", tmp_path / "nope.json", "--out", tmp_path / "o") == 2
        assert "not found" in capsys.readouterr().err

    def test_bad_spec_exit_2(self, tmp_path):
        (tmp_path / "s.json").write_text(json.dumps({"dimz": [3, 3, 3]}))
        assert run("phantom", "--spec", tmp_path / "s.json", "--out", tmp_path / "o") == 2

    def test_spec_file_roundtrip(self, workdir, tmp_path):
        assert run("phantom", "--spec", workdir / "ph" / "spec.json", "--out", tmp_path / "o") == 0
        a = (workdir / "ph" / "tensors.nii").read_bytes()
        assert a == (tmp_path / "o" / "tensors.nii").read_bytes()


class TestSimulate:
    @spec_example
    def test_noiseless_matches_model(self, workdir, tmp_path):
        ph = workdir / "ph"
        rc = run("simulate", "--tensors", ph / "tensors.nii", "--s0", ph / "s0.nii",
                 "--bvals", workdir / "full.bval", "--bvecs", workdir / "full.bvec", "--snr", "inf", "--out-prefix", tmp_path / "d")
        assert rc == 0
        dwi = io.read_nifti(tmp_path / "d.nii").data.astype(np.float64)
        t = io.load_tensors(ph / "tensors.nii")
        s0 = io.read_nifti(ph / "s0.nii").data.astype(np.float64)
        scheme = io.read_bvals_bvecs(workdir / "full.bval", workdir / "full.bvec")
        inside = s0 > 0
        ref = dm.simulate_signal(t[inside], s0[inside], scheme)
        np.testing.assert_allclose(dwi[inside], ref, rtol=1e-7)
        # b=0 volumes equal s0
        for i in scheme.b0_indices:
            np.testing.assert_array_equal(dwi[..., i], s0)

    @spec_example
    def test_seed_determinism(self, workdir, tmp_path):
        ph = workdir / "ph"
        args = ["simulate", "--tensors", ph / "tensors.nii", "--s0", ph / "s0.nii", "--bvals", workdir / "six.bval",
                "--bvecs", workdir / "six.bvec", "--seed", 9]
        assert run(*args, "--out-prefix", tmp_path / "a") == 0
        assert run(*args, "--out-prefix", tmp_path / "b") == 0
        assert run(*args[:-1], 10, "--out-prefix", tmp_path / "c") == 0
        a = (tmp_path / "a.nii").read_bytes()
        assert a == (tmp_path / "b.nii").read_bytes()
        assert a != (tmp_path / "c.nii").read_bytes()

    def test_bad_snr(self, workdir, tmp_path):
        ph = workdir / "ph"
        rc = run("simulate", "--tensors", ph / "tensors.nii", "--s0", ph / "s0.nii", "--bvals", workdir / "six.bval",
                 "--bvecs", workdir / "six.bvec", "--snr", -1, "--out-prefix", tmp_path / "a")
        assert rc == 2


class TestSubsample:
    @spec_example
    def test_target_subset_exact(self, tmp_path):
        pool = dm.GradientScheme.from_directions(np.vstack([dm.uniform_directions(10, seed=4), dm.skare_directions()]), n_b0=1)
        io.write_bvals_bvecs(pool, tmp_path / "p.bval", tmp_path / "p.bvec")
        assert run("subsample", "--bvals", tmp_path / "p.bval", "--bvecs", tmp_path / "p.bvec", "--out-prefix", tmp_path / "s") == 0
        lines = (tmp_path / "s.idx").read_text().splitlines()
        idx = next(line for line in lines if line.startswith("indices:")).split()[1:]
        assert sorted(map(int, idx[1:])) == list(range(11, 17))
        dist = next(line for line in lines if line.startswith("total_axial_distance_rad:"))
        assert float(dist.split()[1]) == pytest.approx(0.0, abs=1e-6)
        assert lines[0].startswith("# ")

    @spec_example
    def test_k_larger_than_pool(self, tmp_path):
        pool = dm.GradientScheme.from_directions(dm.uniform_directions(4, seed=1), n_b0=1)
        io.write_bvals_bvecs(pool, tmp_path / "p.bval", tmp_path / "p.bvec")
        assert run("subsample", "--bvals", tmp_path / "p.bval", "--bvecs", tmp_path / "p.bvec", "--out-prefix", tmp_path / "s") == 2

    def test_k_mismatch(self, workdir, tmp_path):
        rc = run("subsample", "--bvals", workdir / "full.bval", "--bvecs", workdir / "full.bvec", "--k", 5, "--out-prefix", tmp_path / "s")
        assert rc == 2


@pytest.fixture(scope="module")
def chain(workdir):
    d, ph = workdir, workdir / "ph"
    six = ["--bvals", d / "six.bval", "--bvecs", d / "six.bvec"]
    steps = [
        ["simulate", "--tensors", ph / "tensors.nii", "--s0", ph / "s0.nii", *six, "--seed", 1, "--out-prefix", d / "dwi"],
        ["fit", "--dwi", d / "dwi.nii", *six, "--mask", ph / "brain_mask.nii", "--out", d / "lls.nii"],
        ["train", "--dwi", d / "dwi.nii", *six, "--tensors", ph / "tensors.nii", "--mask", ph / "brain_mask.nii",
         "--max-epochs", 2, "--seed", 0, "--history", d / "hist.csv", "--out", d / "net.ckpt"],
        ["predict", "--checkpoint", d / "net.ckpt", "--dwi", d / "dwi.nii", *six, "--mask", ph / "brain_mask.nii", "--out", d / "nn.nii"],
        ["track", "--tensors", ph / "tensors.nii", "--mask", ph / "brain_mask.nii", "--out", d / "gt.dtks", "--threads", 2],
        ["bundle", "--streamlines", d / "gt.dtks", "--rois", ph / "rois.json", "--name", "cc",
         "--density", d / "cc_density.nii", "--reference", ph / "brain_mask.nii", "--out", d / "cc.dtks"],
    ]
    for s in steps:
        assert run(*s) == 0, s[0]
    return d


class TestPipeline:
    def test_outputs(self, chain):
        assert io.load_tensors(chain / "nn.nii").shape == (16, 16, 16, 6)
        assert io.load_tensors(chain / "lls.nii").shape == (16, 16, 16, 6)
        assert (chain / "hist.csv").read_text().startswith("# ")
        kept = io.load_streamlines(chain / "cc.dtks")
        assert 0 < len(kept) <= len(io.load_streamlines(chain / "gt.dtks"))
        assert io.read_nifti(chain / "cc_density.nii").data.max() >= 1

    @spec_example
    def test_evaluate_identity(self, chain, tmp_path):
        ph = chain / "ph"
        rc = run("evaluate", "--est", ph / "tensors.nii", "--gt", ph / "tensors.nii", "--brain-mask", ph / "brain_mask.nii",
                 "--density-est", chain / "cc_density.nii", "--density-gt", chain / "cc_density.nii", "--threshold", 1,
                 "--csv", tmp_path / "r.csv", "--out", tmp_path / "r.txt")
        assert rc == 0
        text = (tmp_path / "r.txt").read_text()
        rows = metrics.parse_report(text)
        assert {r.metric for r in rows} == {"frobenius", "abs_dfa", "abs_dmd", "angle_deg", "dice"}
        for r in rows:
            assert r.value == (1.0 if r.metric == "dice" else 0.0) or (r.metric == "angle_deg" and r.value < 1e-3)
        assert "# config_hash: " in text
        assert f"# input.est: {ph / 'tensors.nii'} sha256:" in text

    def test_evaluate_unpaired_density(self, chain, tmp_path):
        ph = chain / "ph"
        rc = run("evaluate", "--est", ph / "tensors.nii", "--gt", ph / "tensors.nii", "--brain-mask", ph / "brain_mask.nii",
                 "--density-est", chain / "cc_density.nii", "--out", tmp_path / "r.txt")
        assert rc == 2

    def test_outputs_idempotent(self, chain, tmp_path):
        ph = chain / "ph"
        six = ["--bvals", chain / "six.bval", "--bvecs", chain / "six.bvec"]
        assert run("fit", "--dwi", chain / "dwi.nii", *six, "--mask", ph / "brain_mask.nii", "--threads", 3, "--out", tmp_path / "l.nii") == 0
        assert (tmp_path / "l.nii").read_bytes() == (chain / "lls.nii").read_bytes()
        assert run("track", "--tensors", ph / "tensors.nii", "--mask", ph / "brain_mask.nii", "--out", tmp_path / "g.dtks") == 0
        assert (tmp_path / "g.dtks").read_bytes() == (chain / "gt.dtks").read_bytes()

    def test_bundle_density_needs_reference(self, chain, tmp_path):
        rc = run("bundle", "--streamlines", chain / "gt.dtks", "--rois", chain / "ph" / "rois.json", "--name", "cc",
                 "--density", tmp_path / "x.nii", "--out", tmp_path / "x.dtks")
        assert rc == 2

    def test_unknown_bundle(self, chain, tmp_path):
        rc = run("bundle", "--streamlines", chain / "gt.dtks", "--rois", chain / "ph" / "rois.json", "--name", "ilf",
                 "--out", tmp_path / "x.dtks")
        assert rc == 2


class TestErrors:
    @spec_example
    def test_predict_before_train(self, workdir, tmp_path, capsys):
        rc = run("predict", "--checkpoint", tmp_path / "none.ckpt", "--dwi", tmp_path / "x.nii",
                 "--bvals", workdir / "six.bval", "--bvecs", workdir / "six.bvec", "--out", tmp_path / "o.nii")
        assert rc == 2
        assert "train a model first" in capsys.readouterr().err

    def test_argparse_error(self):
        assert run("fit") == 2
        assert run("bogus") == 2

    def test_threads_must_be_positive(self, tmp_path):
        assert run("scheme", "--threads", 0, "--out-prefix", tmp_path / "s") == 2

    def test_bad_tracking_config(self, workdir, tmp_path):
        (tmp_path / "t.json").write_text(json.dumps({"angle_threshold_deg": 120}))
        rc = run("track", "--tensors", workdir / "ph" / "tensors.nii", "--config", tmp_path / "t.json", "--out", tmp_path / "x")
        assert rc == 2

    def test_malformed_input_exit_2(self, tmp_path):
        (tmp_path / "bad.nii").write_bytes(b"\0" * 10)
        assert run("track", "--tensors", tmp_path / "bad.nii", "--out", tmp_path / "x") == 2

    def test_runtime_failure_exit_1(self, workdir, tmp_path):
        out = tmp_path / "no" / "such" / "dir" / "x.dtks"
        assert run("track", "--tensors", workdir / "ph" / "tensors.nii", "--out", out) == 1

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "patchdti", "--help"], capture_output=True, text=True)
        assert out.returncode == 0
        assert "repro" in out.stdout and "evaluate" in out.stdout
