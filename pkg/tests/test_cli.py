import json

import numpy as np
import pytest

from debiaslab.biasness import TheoryParams, marginal_by, nmi_perfect
from debiaslab.cli import main
from debiaslab.data import Dataset


def write_config(tmp_path, **overrides):
    cfg = {
        "data": {
            "kind": "synthetic",
            "rho": 0.999,
            "n_classes": 10,
            "n_train": 400,
            "n_val": 200,
            "n_test": 200,
        },
        "model": {"hidden": [24], "embedding_dim": 12},
        "training": {"epochs": 3, "batch_size": 128, "snapshot_epochs": [1, 3]},
        "search": {"budget": 2},
        "seed": 3,
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestConfigValidation:
    def test_unknown_key_names_path(self, tmp_path, capsys):
        path = write_config(tmp_path, data={"bogus": 1})
        code = main(["generate", "--config", str(path), "--out", str(tmp_path / "o")])
        assert code == 2
        err = json.loads(capsys.readouterr().err)
        assert "bogus" in err["error"]["message"]

    def test_rho_out_of_range(self, tmp_path, capsys):
        path = write_config(tmp_path, data={"rho": 1.5})
        code = main(["generate", "--config", str(path), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "data.rho" in json.loads(capsys.readouterr().err)["error"]["message"]

    def test_missing_idx_file(self, tmp_path, capsys):
        path = write_config(
            tmp_path,
            data={"kind": "idx", "images": str(tmp_path / "none.idx"),
                  "labels": str(tmp_path / "none2.idx"), "rho": 0.9},
        )
        code = main(["generate", "--config", str(path), "--out", str(tmp_path / "o")])
        assert code == 3
        assert "none.idx" in json.loads(capsys.readouterr().err)["error"]["message"]

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        assert main(["generate", "--config", str(path)]) == 2


class TestGenerate:
    def test_writes_datasets(self, tmp_path):
        path = write_config(tmp_path)
        out = tmp_path / "data"
        assert main(["--quiet", "generate", "--config", str(path), "--out", str(out)]) == 0
        train = Dataset.load_csv(out / "train.csv")
        val = Dataset.load_csv(out / "val.csv")
        test = Dataset.load_csv(out / "test.csv")
        assert (len(train), len(val), len(test)) == (400, 200, 200)
        assert val.rho == pytest.approx(0.1)

    def test_identical_files_across_runs(self, tmp_path):
        path = write_config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        main(["--quiet", "generate", "--config", str(path), "--out", str(out1)])
        main(["--quiet", "generate", "--config", str(path), "--out", str(out2)])
        assert (out1 / "train.csv").read_bytes() == (out2 / "train.csv").read_bytes()
        assert (out1 / "test.csv").read_bytes() == (out2 / "test.csv").read_bytes()


class TestPipelineCommand:
    def test_phase_one_stops_after_snapshots(self, tmp_path):
        path = write_config(tmp_path)
        out = tmp_path / "run1"
        code = main(["--quiet", "pipeline", "--config", str(path),
                     "--out", str(out), "--phase", "1"])
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert "vanilla" in manifest and "pseudo" not in manifest
        assert (out / "checkpoints" / "vanilla_epoch001.npz").exists()
        assert (out / "checkpoints" / "vanilla_epoch003.npz").exists()
        assert (out / "config.json").exists()

    def test_full_run_artifacts(self, tmp_path):
        path = write_config(tmp_path)
        out = tmp_path / "run2"
        code = main(["--quiet", "pipeline", "--config", str(path), "--out", str(out)])
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert {"vanilla", "pseudo", "debiased", "phi_curve"} <= set(manifest)
        assert (out / "reports" / "predictor.npz").exists()
        assert (out / "reports" / "pseudo_labels.csv").exists()
        assert (out / "reports" / "trials.csv").exists()
        assert (out / "checkpoints" / "debiased_final.npz").exists()

    def test_repeat_run_identical_manifest(self, tmp_path):
        path = write_config(tmp_path)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        main(["--quiet", "pipeline", "--config", str(path), "--out", str(out1)])
        main(["--quiet", "pipeline", "--config", str(path), "--out", str(out2)])
        assert (out1 / "manifest.json").read_bytes() == (out2 / "manifest.json").read_bytes()

    def test_seed_override_changes_outputs(self, tmp_path):
        path = write_config(tmp_path)
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        main(["--quiet", "pipeline", "--config", str(path), "--out", str(out1),
              "--phase", "1"])
        main(["--quiet", "pipeline", "--config", str(path), "--out", str(out2),
              "--phase", "1", "--seed", "99"])
        m1 = json.loads((out1 / "manifest.json").read_text())
        m2 = json.loads((out2 / "manifest.json").read_text())
        assert m1["seed"] == 3 and m2["seed"] == 99


class TestBiasnessCommand:
    def test_predictions_equal_bias(self, tmp_path, capsys):
        path = tmp_path / "preds.csv"
        rows = ["bias,prediction"] + [f"{i % 10},{i % 10}" for i in range(1000)]
        path.write_text("\n".join(rows) + "\n")
        code = main(["biasness", str(path), "--rho", "0.99"])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["phi_global"] == pytest.approx(1.0)

    def test_sampled_joint_recovers_phi(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        table = marginal_by(TheoryParams(rho=0.99, phi=0.5, eps=0.0, n_t=10)).table
        flat = rng.choice(100, size=150_000, p=table.ravel())
        path = tmp_path / "preds.csv"
        lines = ["bias,prediction"] + [f"{v // 10},{v % 10}" for v in flat]
        path.write_text("\n".join(lines) + "\n")
        out = tmp_path / "report.json"
        code = main(["--quiet", "biasness", str(path), "--rho", "0.99",
                     "--out", str(out)])
        assert code == 0
        report = json.loads(out.read_text())
        assert report["phi_global"] == pytest.approx(0.5, abs=0.05)

    def test_empty_file(self, tmp_path, capsys):
        path = tmp_path / "empty.csv"
        path.write_text("")
        assert main(["biasness", str(path), "--rho", "0.9"]) == 3

    def test_malformed_row_names_line(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("bias,prediction\n1,2\n3;4\n")
        code = main(["biasness", str(path), "--rho", "0.9"])
        assert code == 3
        assert ":3:" in json.loads(capsys.readouterr().err)["error"]["message"]


class TestCurvesCommand:
    def test_grid_values(self, tmp_path):
        out = tmp_path / "curves"
        code = main(["--quiet", "curves", "--rhos", "0.1,0.5,0.999",
                     "--phis", "0.0,1.0", "--out", str(out)])
        assert code == 0
        perfect = {}
        for line in (out / "nmi_perfect.csv").read_text().splitlines()[1:]:
            rho, value = line.split(",")
            perfect[float(rho)] = float(value)
        assert perfect[0.1] == pytest.approx(0.0, abs=1e-12)
        assert perfect[0.999] == pytest.approx(nmi_perfect(0.999, 10), abs=1e-12)

        grid = {}
        for line in (out / "nmi_grid.csv").read_text().splitlines()[1:]:
            rho, phi, value = line.split(",")
            grid[(float(rho), float(phi))] = float(value)
        for rho in (0.1, 0.5, 0.999):
            assert grid[(rho, 0.0)] == pytest.approx(perfect[rho], abs=1e-10)
            assert grid[(rho, 1.0)] == pytest.approx(1.0, abs=1e-10)

    def test_rho_bounds_enforced(self, tmp_path):
        assert main(["--quiet", "curves", "--rhos", "1.0",
                     "--out", str(tmp_path)]) == 3
