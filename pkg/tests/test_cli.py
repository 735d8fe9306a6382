import json
import subprocess
import sys

import numpy as np
import pytest

from cinn_nmr import chemdata, cli
from cinn_nmr import numeric as nc
from cinn_nmr.checkpoint import save_checkpoint
from cinn_nmr.invnet import InvertibleNet

MENTHOL_PEAKS = "1; 1; 31.6, 34.6, 23.2, 50.2, 71.5, 45.1, 25.8, 21, 16.1, 22.2\n"
MENTHOL_BONDS = "1; 0-1-1; 1-2-1; 2-3-1; 3-4-1; 4-5-1; 5-0-1; 0-6-1; 3-7-1; 7-8-1; 7-9-1\n"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--n", "24", "--seed", "2", "--out", str(d / "data.csv")]) == 0
    assert cli.main(
        ["train", "--data", str(d / "data.csv"), "--epochs", "1", "--blocks", "1", "--seed", "0",
         "--out", str(d / "model.ckpt"), "--log", str(d / "log.csv")]
    ) == 0
    return d


def _run(*args):
    return cli.main([str(a) for a in args])


class TestEncode:
    def test_menthol(self, tmp_path):
        (tmp_path / "b.txt").write_text("# menthol skeleton\n" + MENTHOL_BONDS)
        (tmp_path / "p.txt").write_text(MENTHOL_PEAKS)
        assert _run("encode", "--bonds", tmp_path / "b.txt", "--peaks", tmp_path / "p.txt", "--out", tmp_path / "o.csv") == 0
        rows = chemdata.read_dataset(tmp_path / "o.csv")
        assert len(rows) == 1
        assert rows[0].bins.sum() == 10
        assert len(rows[0].bonds) == 10

    def test_empty_input(self, tmp_path):
        (tmp_path / "b.txt").write_text("")
        (tmp_path / "p.txt").write_text("")
        assert _run("encode", "--bonds", tmp_path / "b.txt", "--peaks", tmp_path / "p.txt", "--out", tmp_path / "o.csv") == 0
        assert (tmp_path / "o.csv").read_text() == ""

    def test_order_four(self, tmp_path, capsys):
        (tmp_path / "b.txt").write_text("1; 0-1-1\n\n2; 0-1-4\n")
        (tmp_path / "p.txt").write_text("1; 1; 10\n2; 2; 20\n")
        code = _run("encode", "--bonds", tmp_path / "b.txt", "--peaks", tmp_path / "p.txt", "--out", tmp_path / "o.csv")
        assert code != 0
        assert "b.txt:3" in capsys.readouterr().err
        assert not (tmp_path / "o.csv").exists()

    def test_bad_shift_line(self, tmp_path, capsys):
        (tmp_path / "b.txt").write_text("1; 0-1-1\n")
        (tmp_path / "p.txt").write_text("1; 1; 10, abc\n")
        assert _run("encode", "--bonds", tmp_path / "b.txt", "--peaks", tmp_path / "p.txt") != 0
        assert "p.txt:1" in capsys.readouterr().err


class TestCommands:
    def test_unknown_flag_rejected(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["synth", "--bogus"])
        assert exc.value.code != 0

    def test_config_echo(self, tmp_path, capsys):
        _run("synth", "--n", 2, "--seed", 13, "--out", tmp_path / "s.csv")
        cfg = json.loads(capsys.readouterr().err.strip().splitlines()[0])
        assert cfg["command"] == "synth" and cfg["seed"] == 13 and cfg["n"] == 2

    def test_train_log(self, workdir):
        lines = (workdir / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,f1,loss_y_train,loss_x_train,loss_y_val,loss_x_val"
        assert len(lines) == 2

    def test_train_default_epochs(self):
        args = cli.build_parser().parse_args(["train", "--data", "d", "--out", "o"])
        assert args.epochs == 5

    def test_predict(self, workdir, capsys):
        assert _run("predict", "--checkpoint", workdir / "model.ckpt", "--data", workdir / "data.csv", "--report", 3, "--out", workdir / "pred.csv") == 0
        lines = (workdir / "pred.csv").read_text().splitlines()
        assert len(lines) == 24
        mol, spec, bits = lines[0].split(",")
        assert len(bits) == 128 and set(bits) <= {"0", "1"}
        assert capsys.readouterr().out.splitlines()[0].split()[:2] == ["molecule", "ID"]

    def test_predict_shape_mismatch(self, workdir, tmp_path):
        arrays = InvertibleNet(blocks_per_stage=1).state_dict()
        arrays["stage0.block0.conv1.weight"] = np.zeros((8, 8, 3, 1), np.float32)
        save_checkpoint(arrays, tmp_path / "bad.ckpt")
        assert _run("predict", "--checkpoint", tmp_path / "bad.ckpt", "--data", workdir / "data.csv") != 0

    def test_invert_distinct_and_reproducible(self, workdir, tmp_path):
        code = "0" * 20 + "1" + "0" * 107
        outs = []
        for name in ("a.json", "b.json"):
            assert _run("invert", "--checkpoint", workdir / "model.ckpt", "--code", code, "--samples", 2, "--seed", 5, "--out", tmp_path / name) == 0
            outs.append((tmp_path / name).read_bytes())
        assert outs[0] == outs[1]
        cands = json.loads(outs[0])["candidates"]
        assert len(cands) == 2
        assert cands[0]["channels"] != cands[1]["channels"]
        assert np.asarray(cands[0]["channels"]).shape == (4, 16, 16)

    @pytest.mark.parametrize("code", ["0101", "2" * 128, "0" * 129])
    def test_invert_malformed_code(self, workdir, code):
        assert _run("invert", "--checkpoint", workdir / "model.ckpt", "--code", code) != 0

    def test_invert_own_latent_reconstructs(self, workdir, tmp_path):
        rows = chemdata.read_dataset(workdir / "data.csv")
        assert _run("invert", "--checkpoint", workdir / "model.ckpt", "--data", workdir / "data.csv", "--row", 4, "--out", tmp_path / "r.json") == 0
        cand = json.loads((tmp_path / "r.json").read_text())["candidates"][0]
        assert np.abs(np.asarray(cand["channels"]) - rows[4].channels).max() <= 1e-3
        assert chemdata.channels_to_bonds(np.asarray(cand["channels"])) == rows[4].bonds

    def test_eval_deterministic(self, workdir, tmp_path):
        for name in ("a", "b"):
            assert _run("eval", "--checkpoint", workdir / "model.ckpt", "--data", workdir / "data.csv", "--seed", 3,
                        "--n-noise", 2, "--n-prior", 2, "--out", tmp_path / f"{name}.txt", "--csv", tmp_path / f"{name}.csv") == 0
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.txt").read_text().startswith("f1=")

    def test_perturb_zero_row(self, workdir, tmp_path):
        assert _run("perturb", "--checkpoint", workdir / "model.ckpt", "--data", workdir / "data.csv", "--eps-sweep", "0,0.1",
                    "--n-noise", 2, "--n-prior", 2, "--out", tmp_path / "p.csv") == 0
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "epsilon,cd_local,cd_prior,rcd_local,rcd_prior"
        assert lines[1] == "0,0,0,0,0"
        assert float(lines[2].split(",")[1]) > 0


class TestGradcheckCommand:
    def test_fresh_build_passes_and_repeats(self, tmp_path):
        assert _run("gradcheck", "--seed", 1, "--out", tmp_path / "a.txt") == 0
        assert _run("gradcheck", "--seed", 1, "--out", tmp_path / "b.txt") == 0
        table = (tmp_path / "a.txt").read_text()
        assert table == (tmp_path / "b.txt").read_text()
        assert "FAIL" not in table and "total_loss" in table

    def test_corrupted_conv_backward_fails(self, tmp_path, monkeypatch):
        real = nc._conv2d_backward

        def corrupted(*args):
            d_x, d_k, d_b = real(*args)
            return d_x, 1.01 * d_k, d_b

        monkeypatch.setattr(nc, "_conv2d_backward", corrupted)
        assert _run("gradcheck", "--seed", 0, "--out", tmp_path / "t.txt") != 0
        assert "FAIL" in (tmp_path / "t.txt").read_text()


class TestEntryPoint:
    def test_module_invocation(self, tmp_path):
        out = tmp_path / "s.csv"
        proc = subprocess.run([sys.executable, "-m", "cinn_nmr", "synth", "--n", "3", "--out", str(out)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert len(out.read_text().splitlines()) == 3
