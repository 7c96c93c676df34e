import csv
import subprocess
import sys

import numpy as np
import pytest

from repfield3d.cli import main
from repfield3d.tensor import load_rt3d

TINY_TRAIN = ["--steps", "3", "--size", "8", "--channels", "2", "--blocks", "1", "--k", "3", "--gen-k", "3",
              "--radius", "1.5,2.5", "--checkpoints", "0,3", "--tail", "2"]


def run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = main([argv[0], "--out", str(out), *argv[1:]])
    return code, out


def manifest(out):
    lines = (out / "manifest.txt").read_text().splitlines()
    return dict(line.split(" = ", 1) for line in lines)


def artifacts(out):
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "manifest.txt"}


class TestGradcheck:
    def test_conv_rows(self, tmp_path, capsys):
        code, out = run(tmp_path, "gradcheck", "--scope", "conv")
        assert code == 0
        rows = list(csv.DictReader(open(out / "gradcheck.csv")))
        assert [r["parameter"] for r in rows] == ["conv.dX", "conv.dW"]
        assert all(r["pass"] == "1" for r in rows)
        assert "PASS conv.dX" in capsys.readouterr().out

    def test_loose_tolerance(self, tmp_path):
        code, out = run(tmp_path, "gradcheck", "--scope", "all", "--tol", "1e-4")
        assert code == 0 and manifest(out)["tol"] == "0.0001"

    def test_impossible_tolerance_fails(self, tmp_path):
        assert run(tmp_path, "gradcheck", "--scope", "conv", "--tol", "1e-30")[0] == 1


class TestConfig:
    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("scope = conv\nbogus_key = 3\n")
        code, _ = run(tmp_path, "gradcheck", "--config", str(cfg))
        assert code == 2 and "bogus-key" in capsys.readouterr().err

    def test_bad_value(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("tol = abc\n")
        assert run(tmp_path, "gradcheck", "--config", str(cfg))[0] == 2

    def test_flags_override_file(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("# comment\nk = 5\nbeta = 2.0\n")
        code, out = run(tmp_path, "prior", "--config", str(cfg), "--beta", "0.5")
        m = manifest(out)
        assert code == 0 and m["k"] == "5" and m["beta"] == "0.5" and m["command"] == "prior"
        assert "timestamp" in m and m["rng"] == "philox4x64-10"

    def test_env_out_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("REPFIELD3D_OUT", str(tmp_path / "env"))
        assert main(["lr-field"]) == 0
        assert (tmp_path / "env" / "lr_field.csv").exists()

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["prior", "--k", "x"])
        assert exc.value.code == 2

    def test_even_kernel_is_usage_error(self, tmp_path):
        assert run(tmp_path, "prior", "--k", "4")[0] == 2

    def test_help_lists_flags(self):
        res = subprocess.run([sys.executable, "-m", "repfield3d", "train-toy", "--help"],
                             capture_output=True, text=True, check=True)
        for flag in ("--arm", "--steps", "--seed", "--config", "--out", "--lr"):
            assert flag in res.stdout


class TestMergeVerify:
    def test_defaults_pass(self, tmp_path, capsys):
        code, out = run(tmp_path, "merge-verify")
        text = capsys.readouterr().out
        assert code == 0 and "PASS" in text
        rows = list(csv.DictReader(open(out / "trajectory.csv")))
        assert len(rows) == 10 and max(float(r["max_kernel_diff"]) for r in rows) < 1e-10

    def test_as_written_mismatch(self, tmp_path, capsys):
        code, _ = run(tmp_path, "merge-verify", "--field-convention", "as-written-eq11", "--alpha-l", "2")
        assert code == 1 and "mismatch expected" in capsys.readouterr().out

    def test_small_branch_off(self, tmp_path):
        code, out = run(tmp_path, "merge-verify", "--alpha-s", "0")
        f = load_rt3d(out / "lr_field.rt3d")
        assert code == 0 and np.all(f == f[0, 0, 0])

    def test_field_matches_lr_field_command(self, tmp_path):
        _, a = run(tmp_path, "merge-verify", "--alpha-l", "0.5", "--alpha-s", "2", name="a")
        _, b = run(tmp_path, "lr-field", "--alpha-l", "0.5", "--alpha-s", "2", name="b")
        assert (a / "lr_field.rt3d").read_bytes() == (b / "lr_field.rt3d").read_bytes()
        assert (a / "lr_field.csv").read_bytes() == (b / "lr_field.csv").read_bytes()


class TestExports:
    def test_lr_field_values(self, tmp_path, capsys):
        code, out = run(tmp_path, "lr-field")
        assert code == 0 and "central=8.000000e-04 peripheral=2.000000e-04" in capsys.readouterr().out
        rows = list(csv.DictReader(open(out / "lr_field.csv")))
        assert len(rows) == 343 and list(rows[0]) == ["x", "y", "z", "value"]

    def test_prior_center(self, tmp_path):
        code, out = run(tmp_path, "prior", "--k", "21", "--beta", "1")
        rows = {(r["x"], r["y"], r["z"]): r for r in csv.DictReader(open(out / "prior.csv"))}
        assert code == 0 and float(rows[("10", "10", "10")]["P"]) == 1.0
        assert rows[("10", "10", "10")]["P"] == "1.000000000000e+00"

    def test_zero_generator_mask_equals_prior(self, tmp_path):
        _, p = run(tmp_path, "prior", "--k", "9", "--beta", "0.3", "--channels", "2", name="p")
        _, m = run(tmp_path, "mask", "--k", "9", "--beta", "0.3", "--channels", "2", name="m")
        assert (p / "prior.rt3d").read_bytes() == (m / "mask.rt3d").read_bytes()

    def test_random_generator_mask_differs(self, tmp_path):
        _, p = run(tmp_path, "prior", "--k", "5", name="p")
        _, m = run(tmp_path, "mask", "--k", "5", "--init", "random", "--gen-k", "3", name="m")
        assert (p / "prior.rt3d").read_bytes() != (m / "mask.rt3d").read_bytes()


class TestErf:
    def test_delta(self, tmp_path, capsys):
        code, out = run(tmp_path, "erf", "--kernel", "delta", "--samples", "2")
        assert code == 0 and "support voxels=1 " in capsys.readouterr().out
        assert (out / "erf_slice.pgm").read_bytes().startswith(b"P5\n9 9\n255\n")
        assert (out / "erf_radial.csv").exists()

    def test_two_layers(self, tmp_path, capsys):
        code, _ = run(tmp_path, "erf", "--kernel", "ones", "--layers", "2", "--samples", "2")
        text = capsys.readouterr().out
        assert code == 0 and "support voxels=125 " in text and "brute-force support match: True" in text

    def test_even_size(self, tmp_path):
        assert run(tmp_path, "erf", "--size", "8")[0] == 2


class TestTrainFold:
    def test_three_arms_and_fold(self, tmp_path, capsys):
        code, out = run(tmp_path, "train-toy", *TINY_TRAIN, "--seeds", "2")
        assert code == 0
        for arm in ("vanilla", "fixed", "lrbm"):
            for s in (0, 1):
                assert (out / f"curve_{arm}_seed{s}.csv").exists()
                assert (out / f"eval_{arm}_seed{s}.csv").exists()
        text = (out / "ordering.txt").read_text()
        assert "seeds = 2" in text and "lrbm_loss_le_vanilla" in text
        rows = list(csv.DictReader(open(out / "summary.csv")))
        assert len(rows) == 6

        code, fold_out = run(tmp_path, "fold", "--checkpoint", str(out / "ckpt_lrbm_seed0"), "--samples", "3",
                             name="fold")
        assert code == 0 and "fold equivalence max diff: 0.0" in capsys.readouterr().out
        assert (fold_out / "folded" / "manifest.txt").exists()

        code, _ = run(tmp_path, "erf", "--checkpoint", str(out / "ckpt_lrbm_seed0"), "--size", "5",
                      "--samples", "2", name="erf")
        assert code == 0

    def test_fold_needs_checkpoint(self, tmp_path):
        assert run(tmp_path, "fold")[0] == 2

    def test_missing_checkpoint(self, tmp_path):
        assert run(tmp_path, "fold", "--checkpoint", str(tmp_path / "none"))[0] == 2


class TestReproducible:
    @pytest.mark.parametrize("argv", [
        ["merge-verify", "--alpha-l", "2"],
        ["mask", "--k", "7", "--init", "random"],
        ["erf", "--kernel", "masked", "--k", "5", "--samples", "3", "--verify-support", "false"],
        ["train-toy", "--arm", "lrbm", *TINY_TRAIN],
        ["gradcheck", "--scope", "lrbm"],
    ])
    def test_byte_identical(self, tmp_path, argv):
        _, a = run(tmp_path, *argv, name="a")
        _, b = run(tmp_path, *argv, name="b")
        fa, fb = artifacts(a), artifacts(b)
        assert fa and fa == fb
        ma, mb = manifest(a), manifest(b)
        ma.pop("timestamp"), mb.pop("timestamp")
        assert ma == mb
