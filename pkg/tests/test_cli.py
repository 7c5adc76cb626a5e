import filecmp
import os

import numpy as np
import pytest

from warpadapt.cli import main, parse_config_text, write_ppm
from warpadapt.errors import ConfigError


def run(argv, capsys=None):
    code = main(argv)
    return code


class TestGenerate:
    def test_deterministic_directories(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        args = ["generate", "--count", "3", "--seed", "7", "--width", "32",
                "--height", "16", "--max-disp", "8", "--max-flow", "4"]
        assert run(args + ["--out", a]) == 0
        assert run(args + ["--out", b]) == 0
        names = sorted(os.listdir(a))
        assert names == sorted(os.listdir(b))
        for n in names:
            assert filecmp.cmp(os.path.join(a, n), os.path.join(b, n), shallow=False)

    def test_zero_count(self, tmp_path):
        out = str(tmp_path / "empty")
        assert run(["generate", "--count", "0", "--out", out]) == 0
        assert open(os.path.join(out, "manifest.txt")).read() == ""

    def test_counts_and_domains(self, tmp_path):
        from warpadapt.scenegen import read_dataset, split_domains
        out = str(tmp_path / "d")
        assert run(["generate", "--count", "2", "--out", out, "--width", "32",
                    "--height", "16", "--max-disp", "8", "--max-flow", "4"]) == 0
        syn, real = split_domains(read_dataset(out))
        assert len(syn) == 2 and len(real) == 2


class TestConfigParsing:
    def test_key_value_with_comments(self):
        kv = parse_config_text("seed = 3  # rng\n\nk=5\nweights.lambda_ms = 0.2\n", "t")
        assert kv == {"seed": "3", "k": "5", "weights.lambda_ms": "0.2"}

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="mystery"):
            parse_config_text("mystery = 1\n", "t")

    def test_last_wins(self):
        kv = parse_config_text("seed=1\nseed=2\n", "t")
        assert kv["seed"] == "2"


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """One tiny dataset + trained checkpoint shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    out = str(root / "run")
    assert main(["generate", "--count", "4", "--seed", "3", "--out", data,
                 "--width", "32", "--height", "16", "--max-disp", "8",
                 "--max-flow", "4", "--shift-preset", "mild"]) == 0
    assert main(["train", "--data", data, "--out", out,
                 "--total_iters", "4", "--k", "2", "--batch_size", "1",
                 "--channels_base", "4", "--max_disp", "8", "--max_flow", "4",
                 "--val_count", "1", "--eval_every", "0", "--seed", "1"]) == 0
    return {"data": data, "out": out,
            "checkpoint": os.path.join(out, "checkpoint_final.wck")}


class TestTrain:
    def test_unknown_override_exits_2(self, tmp_path, small_run):
        code = main(["train", "--data", small_run["data"], "--out", str(tmp_path / "x"),
                     "--bogus_key", "1"])
        assert code == 2

    def test_unknown_config_key_exits_2(self, tmp_path, small_run):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("nonsense = 5\n")
        code = main(["train", "--config", str(cfg), "--data", small_run["data"],
                     "--out", str(tmp_path / "x")])
        assert code == 2

    def test_missing_data_exits_3(self, tmp_path):
        code = main(["train", "--data", str(tmp_path / "nope"), "--out",
                     str(tmp_path / "x"), "--total_iters", "1"])
        assert code == 3

    def test_weight_override_in_echo(self, tmp_path, small_run, capsys):
        out = str(tmp_path / "w")
        code = main(["train", "--data", small_run["data"], "--out", out,
                     "--total_iters", "2", "--k", "2", "--batch_size", "1",
                     "--channels_base", "4", "--max_disp", "8", "--max_flow", "4",
                     "--val_count", "1", "--eval_every", "0",
                     "--weights.lambda_ms", "0.1"])
        assert code == 0
        assert "weights.lambda_ms=0.1" in capsys.readouterr().out


class TestEval:
    def test_fresh_checkpoint_reports(self, small_run, capsys):
        assert main(["eval", "--checkpoint", small_run["checkpoint"],
                     "--data", small_run["data"]]) == 0
        out = capsys.readouterr().out
        assert "epe_disp=" in out and "psnr=" in out

    def test_oracle_zero_errors(self, small_run, capsys):
        assert main(["eval", "--checkpoint", small_run["checkpoint"],
                     "--data", small_run["data"], "--oracle"]) == 0
        out = capsys.readouterr().out
        assert "epe_disp=0" in out and "f1_all=0" in out

    def test_deterministic_reports(self, small_run, capsys):
        main(["eval", "--checkpoint", small_run["checkpoint"], "--data", small_run["data"]])
        first = capsys.readouterr().out
        main(["eval", "--checkpoint", small_run["checkpoint"], "--data", small_run["data"]])
        second = capsys.readouterr().out
        assert first == second


class TestTranslate:
    def test_cycle_writes_triple(self, small_run, tmp_path, capsys):
        from warpadapt.scenegen import read_dataset, split_domains
        _, real = split_domains(read_dataset(small_run["data"]))
        sample_file = None
        with open(os.path.join(small_run["data"], "manifest.txt")) as fh:
            names = [l.strip() for l in fh]
        # find a real-domain file
        from warpadapt.scenegen import sample_from_bytes
        for n in names:
            with open(os.path.join(small_run["data"], n), "rb") as fh:
                if sample_from_bytes(fh.read(), n).domain == "real":
                    sample_file = os.path.join(small_run["data"], n)
                    break
        out = str(tmp_path / "tr")
        assert main(["translate", "--checkpoint", small_run["checkpoint"],
                     "--in", sample_file, "--out", out, "--direction", "cycle"]) == 0
        for stem in ("original", "fake_synthetic", "reconstructed"):
            assert os.path.exists(os.path.join(out, stem + ".wad"))
            assert os.path.exists(os.path.join(out, stem + ".ppm"))
        assert "reconstruction psnr=" in capsys.readouterr().out

    def test_domain_mismatch_warns_but_proceeds(self, small_run, tmp_path, capsys):
        from warpadapt.scenegen import sample_from_bytes
        with open(os.path.join(small_run["data"], "manifest.txt")) as fh:
            names = [l.strip() for l in fh]
        syn_file = None
        for n in names:
            with open(os.path.join(small_run["data"], n), "rb") as fh:
                if sample_from_bytes(fh.read(), n).domain == "synthetic":
                    syn_file = os.path.join(small_run["data"], n)
                    break
        out = str(tmp_path / "tr2")
        assert main(["translate", "--checkpoint", small_run["checkpoint"],
                     "--in", syn_file, "--out", out, "--direction", "cycle"]) == 0
        assert "warning" in capsys.readouterr().err

    def test_ppm_format(self, tmp_path):
        img = np.zeros((1, 3, 2, 3), dtype=np.float32)
        img[0, 0] = 1.0
        path = str(tmp_path / "x.ppm")
        write_ppm(path, img)
        raw = open(path, "rb").read()
        assert raw.startswith(b"P6\n3 2\n255\n")
        assert len(raw) == len(b"P6\n3 2\n255\n") + 2 * 3 * 3


class TestGradcheckCommand:
    def test_passes_and_exits_zero(self, capsys):
        assert main(["gradcheck", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert "checks passed" in out
        assert "FAIL" not in out


class TestEnvVar:
    def test_invalid_thread_cap(self, monkeypatch):
        monkeypatch.setenv("WARPADAPT_THREADS", "zero")
        assert main(["gradcheck"]) == 2

    def test_valid_thread_cap(self, monkeypatch, tmp_path):
        monkeypatch.setenv("WARPADAPT_THREADS", "2")
        assert main(["generate", "--count", "0", "--out", str(tmp_path / "d")]) == 0
