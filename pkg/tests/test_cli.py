import json
import os
from pathlib import Path

import numpy as np
import pytest

import mmtseg.tensor
from mmtseg.cli import main
from mmtseg.phantom import read_labels, read_volume

from oracles import oracle_quantile


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cases")
    rc = main(["generate", "--seed", "11", "--extents", "16", "--count", "3",
               "--out-dir", str(d)])
    assert rc == 0
    return d


class TestGenerate:
    def test_count_and_files(self, tmp_path):
        out = tmp_path / "out"
        assert main(["generate", "--seed", "2", "--extents", "16", "--count", "2",
                     "--out-dir", str(out)]) == 0
        files = sorted(os.listdir(out))
        assert files == [
            "case_2_0_img.mmts", "case_2_0_lbl.mmts",
            "case_2_1_img.mmts", "case_2_1_lbl.mmts",
            "run_manifest.json",
        ]

    def test_rerun_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["generate", "--seed", "3", "--extents", "16,20,18",
                         "--count", "2", "--out-dir", str(out)]) == 0
        for f in sorted(os.listdir(a)):
            assert (a / f).read_bytes() == (b / f).read_bytes(), f

    def test_too_small_extents_exit_2(self, tmp_path):
        assert main(["generate", "--seed", "0", "--extents", "8", "--count", "1",
                     "--out-dir", str(tmp_path / "x")]) == 2

    def test_bad_extents_string_exit_2(self, tmp_path):
        assert main(["generate", "--extents", "16,banana", "--out-dir",
                     str(tmp_path / "x")]) == 2

    def test_unknown_flag_rejected(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["generate", "--bogus", "1", "--out-dir", str(tmp_path)])
        assert exc.value.code == 2


class TestTrain:
    def test_smoke_run_and_variant_dispatch(self, data_dir, tmp_path):
        out = tmp_path / "run"
        rc = main(["train", "--variant", "unet_pre", "--steps", "4", "--seed", "7",
                   "--data-dir", str(data_dir), "--out-dir", str(out)])
        assert rc == 0
        meta = json.loads((out / "checkpoint.json").read_text())["meta"]
        assert meta["variant"] == "UNET_PRE"
        assert meta["step"] == 4
        assert (out / "loss_log.csv").exists()
        assert (out / "run_manifest.json").exists()

    def test_missing_data_dir_exit_2(self, tmp_path):
        assert main(["train", "--data-dir", str(tmp_path / "missing"),
                     "--out-dir", str(tmp_path / "o")]) == 2

    def test_unknown_variant_exit_2(self, data_dir, tmp_path):
        assert main(["train", "--variant", "resnet", "--data-dir", str(data_dir),
                     "--out-dir", str(tmp_path / "o")]) == 2

    def test_config_file_roundtrip(self, data_dir, tmp_path):
        config = {"variant": "MMTSN_NO_SCFB", "depth": 2, "base_channels": 2,
                  "steps": 2, "seed": 5, "patch_extents": [16, 16, 16]}
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(config))
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg_path), "--data-dir", str(data_dir),
                     "--out-dir", str(out)]) == 0
        meta = json.loads((out / "checkpoint.json").read_text())["meta"]
        assert meta["variant"] == "MMTSN_NO_SCFB"

    def test_bad_config_field_exit_2(self, data_dir, tmp_path):
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps({"lr": 0.1}))
        assert main(["train", "--config", str(cfg_path), "--data-dir", str(data_dir),
                     "--out-dir", str(tmp_path / "o")]) == 2


class TestEval:
    def test_self_check_perfect_report(self, data_dir, tmp_path):
        report = tmp_path / "report.json"
        assert main(["eval", "--data-dir", str(data_dir), "--report", str(report),
                     "--self-check"]) == 0
        payload = json.loads(report.read_text())
        assert len(payload["cases"]) == 3
        for case in payload["cases"].values():
            assert all(case["dice"][r] == 1.0 for r in ("wt", "tc", "et"))
            assert all(case["hd95"][r] == 0.0 for r in ("wt", "tc", "et"))
        assert payload["aggregates"]["dice_wt"]["mean"] == 1.0

    def test_aggregates_match_quantile_oracle(self, data_dir, tmp_path):
        # model eval produces nontrivial per-case spreads
        run = tmp_path / "run"
        assert main(["train", "--variant", "unet_pre", "--steps", "3", "--seed", "1",
                     "--data-dir", str(data_dir), "--out-dir", str(run)]) == 0
        report = tmp_path / "report.json"
        assert main(["eval", "--checkpoint", str(run / "checkpoint"),
                     "--data-dir", str(data_dir), "--report", str(report)]) == 0
        payload = json.loads(report.read_text())
        for key, row in payload["aggregates"].items():
            if key.startswith(("dice_", "hd95_")):
                metric, region = key.split("_")
                values = [c[metric][region] for c in payload["cases"].values()]
            else:
                values = [c[key] for c in payload["cases"].values()]
            defined = [v for v in values if v is not None]
            if not defined:
                assert row["mean"] is None
                continue
            assert row["mean"] == pytest.approx(sum(defined) / len(defined), abs=1e-12)
            assert row["median"] == pytest.approx(oracle_quantile(defined, 0.5), abs=1e-9)
            assert row["q25"] == pytest.approx(oracle_quantile(defined, 0.25), abs=1e-9)
            assert row["q75"] == pytest.approx(oracle_quantile(defined, 0.75), abs=1e-9)
            assert row["undefined"] == len(values) - len(defined)

    def test_eval_deterministic(self, data_dir, tmp_path):
        run = tmp_path / "run"
        main(["train", "--variant", "unet_pre", "--steps", "2", "--seed", "1",
              "--data-dir", str(data_dir), "--out-dir", str(run)])
        r1, r2 = tmp_path / "r1.json", tmp_path / "r2.json"
        for r in (r1, r2):
            assert main(["eval", "--checkpoint", str(run / "checkpoint"),
                         "--data-dir", str(data_dir), "--report", str(r)]) == 0
        assert r1.read_bytes() == r2.read_bytes()

    def test_missing_checkpoint_exit_2(self, data_dir, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "nope"),
                     "--data-dir", str(data_dir),
                     "--report", str(tmp_path / "r.json")]) == 2


class TestInfer:
    def test_predictions_written(self, data_dir, tmp_path):
        run = tmp_path / "run"
        main(["train", "--variant", "unet_pre", "--steps", "2", "--seed", "1",
              "--data-dir", str(data_dir), "--out-dir", str(run)])
        out = tmp_path / "pred"
        assert main(["infer", "--checkpoint", str(run / "checkpoint"),
                     "--data-dir", str(data_dir), "--out-dir", str(out)]) == 0
        preds = sorted(f for f in os.listdir(out) if f.endswith("_pred.mmts"))
        assert len(preds) == 3
        labels = read_labels(out / preds[0])
        assert labels.data.shape == (16, 16, 16)


class TestGradcheckCommand:
    def test_fresh_build_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert "full-model" in out

    def test_injected_sign_flip_fails(self, monkeypatch, capsys):
        real = mmtseg.tensor.conv3d

        def faulty(x, kernel, bias, stride=1, padding=0):
            out = real(x, kernel, bias, stride=stride, padding=padding)
            if out._backward is not None:
                orig_backward = out._backward

                def flipped(g):
                    gx, gk, gb = orig_backward(g)
                    return (-gx, gk, gb)

                out._backward = flipped
            return out

        monkeypatch.setattr(mmtseg.tensor, "conv3d", faulty)
        assert main(["gradcheck"]) == 1
        assert "FAIL" in capsys.readouterr().out


class TestCompare:
    def test_five_method_table(self, tmp_path):
        data = tmp_path / "data"
        assert main(["generate", "--seed", "4", "--extents", "16", "--count", "2",
                     "--out-dir", str(data)]) == 0
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"depth": 2, "base_channels": 2, "steps": 2,
                                   "seed": 9, "patch_extents": [16, 16, 16]}))
        out = tmp_path / "cmp"
        assert main(["compare", "--config", str(cfg), "--data-dir", str(data),
                     "--out-dir", str(out)]) == 0

        table = (out / "table.txt").read_text()
        lines = table.strip().splitlines()
        assert "Phantom benchmark" in lines[0]
        assert lines[1].split() == ["Method", "Dice", "ET", "Dice", "TC", "Dice", "WT",
                                    "HD95", "ET", "HD95", "TC", "HD95", "WT"]
        methods = [l.split()[0] for l in lines[2:7]]
        assert methods == ["MMTSN", "3D", "3D", "MMTSN-no-SCFB", "MMTSN-no-SC"]
        assert lines[-1] == "shared seed: 9"

        csv_lines = (out / "table.csv").read_text().strip().splitlines()
        assert csv_lines[0] == "method,dice_et,dice_tc,dice_wt,hd95_et,hd95_tc,hd95_wt"
        assert len(csv_lines) == 6
