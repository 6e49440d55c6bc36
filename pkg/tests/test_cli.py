import csv
import json
import math

import numpy as np
import pytest
import yaml

from gtnscale.cli import main
from gtnscale.errors import ExperimentError, ParameterError
from gtnscale.experiment import (
    FORMAT_VERSION,
    config_from_dict,
    fit_curves,
    load_config,
    read_curves,
    replay,
    run_experiment,
)


@pytest.fixture
def toy_csv(tmp_path):
    """Two classes of nine distinct 6-bit strings: eight to train on, one held out."""
    rng = np.random.default_rng(0)
    codes = rng.choice(64, size=18, replace=False)
    path = tmp_path / "toy.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"b{i}" for i in range(6)] + ["label"])
        for j, c in enumerate(codes):
            w.writerow([(c >> (5 - i)) & 1 for i in range(6)] + ["a" if j < 9 else "b"])
    return path


def toy_config(path, **over):
    raw = {
        "name": "toy",
        "dataset": {"source": "csv", "path": str(path), "normalization": "none", "n_train": 8, "n_test": 1},
        "qfm": {"theta": 1.0},
        "model": {"chi": [8]},
        "training": {"eta": 0.05, "epochs": 200},
        "sweep": {"axis": "chi", "values": [8]},
        "seeds_per_point": 1,
    }
    for k, v in over.items():
        raw[k] = {**raw[k], **v} if isinstance(v, dict) and k in raw else v
    return raw


def logistic_config(**over):
    raw = {
        "dataset": {"source": "logistic", "r_values": [3.6, 3.9], "length": 8, "n_train": 12, "n_test": 8},
        "model": {"chi": [4]},
        "training": {"eta": 0.05, "epochs": 5},
        "sweep": {"axis": "M", "values": [3, 4, 5, 6]},
        "seeds_per_point": 2,
    }
    raw.update(over)
    return raw


def rows_of(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


class TestConfig:
    def test_unknown_key(self, toy_csv):
        raw = toy_config(toy_csv)
        raw["sweep"]["axes"] = "M"
        with pytest.raises(ParameterError, match="unknown key"):
            config_from_dict(raw)

    def test_unknown_top_level_key(self, toy_csv):
        with pytest.raises(ParameterError, match=r"\['sead'\]"):
            config_from_dict({**toy_config(toy_csv), "sead": 1})

    def test_bad_axis(self, toy_csv):
        with pytest.raises(ParameterError, match="sweep.axis"):
            config_from_dict(toy_config(toy_csv, sweep={"axis": "depth"}))

    def test_empty_sweep(self, toy_csv):
        with pytest.raises(ParameterError, match="at least one"):
            config_from_dict(toy_config(toy_csv, sweep={"values": []}))

    def test_missing_path(self, tmp_path):
        with pytest.raises(ParameterError, match="does not exist"):
            config_from_dict(toy_config(tmp_path / "nope.csv"))

    def test_type_errors(self, toy_csv):
        with pytest.raises(ParameterError, match="training.epochs"):
            config_from_dict(toy_config(toy_csv, training={"epochs": "many"}))
        with pytest.raises(ParameterError, match="eta"):
            config_from_dict(toy_config(toy_csv, training={"eta": -1}))

    def test_relative_paths_follow_config_file(self, toy_csv):
        raw = toy_config("toy.csv")
        (toy_csv.parent / "c.yaml").write_text(yaml.safe_dump(raw))
        cfg = load_config(toy_csv.parent / "c.yaml")
        assert cfg.dataset.path == str(toy_csv.resolve())

    def test_hash_ignores_output_and_workers(self, toy_csv):
        a = config_from_dict(toy_config(toy_csv))
        b = config_from_dict({**toy_config(toy_csv), "workers": 3, "output": "elsewhere"})
        c = config_from_dict(toy_config(toy_csv, seed=1))
        assert a.config_hash() == b.config_hash() != c.config_hash()


class TestRun:
    def test_binary_toy(self, toy_csv, tmp_path):
        res = run_experiment(config_from_dict(toy_config(toy_csv)), tmp_path / "out")
        rows = rows_of(tmp_path / "out" / "curves" / "chi.csv")
        intra = {r["class"]: float(r["nll"]) for r in rows if (r["split"], r["pairing"]) == ("train", "intra")}
        inter = {r["class"]: float(r["nll"]) for r in rows if (r["split"], r["pairing"]) == ("train", "inter")}
        for g in ("0", "1"):
            assert abs(intra[g] - math.log(8)) < 0.05
            assert inter[g] > intra[g]
        assert res.report["config_hash"] == res.config_hash

    def test_single_point_without_training(self, toy_csv, tmp_path):
        from gtnscale.data import filter_by_label, load_csv, split_per_class
        from gtnscale.born import nll
        from gtnscale.features import QfmConfig, qfm_encode_batch
        from gtnscale.mps import random_mps

        cfg = config_from_dict(toy_config(toy_csv, training={"eta": 0.0}))
        res = run_experiment(cfg, tmp_path / "out")
        assert (tmp_path / "out" / "curves" / "chi.csv").exists()
        tr, _ = split_per_class(load_csv(toy_csv, normalization="none"), [0, 1], 8, 1, 0)
        x = qfm_encode_batch(filter_by_label(tr, 0).samples, QfmConfig(1.0))
        row = next(r for r in res.rows if r[2:5] == ["train", "intra", "0"])
        assert row[5] == nll(random_mps(6, 2, 8, seed=0), x)
        assert not res.fits.fits
        reasons = [r["reason"] for r in res.report["refused"]]
        assert reasons and all("at least 2 points" in r for r in reasons)

    def test_superposition_init(self, toy_csv, tmp_path):
        cfg = config_from_dict(toy_config(toy_csv, model={"init": "superposition"}, training={"eta": 0.0}))
        rows = rows_of(run_experiment(cfg, tmp_path / "o").out / "curves" / "chi.csv")
        for r in rows:
            if r["pairing"] == "intra" and r["split"] == "train":
                assert float(r["nll"]) == pytest.approx(math.log(8), abs=1e-12)
                assert float(r["accuracy"]) == 1.0
            if r["pairing"] == "inter" or r["split"] == "test":
                assert r["nll"] == "inf"

    def test_m_sweep_outputs(self, tmp_path):
        res = run_experiment(config_from_dict(logistic_config()), tmp_path / "o")
        rows = rows_of(tmp_path / "o" / "curves" / "M.csv")
        # 4 M values x 2 splits x 2 pairings x (2 classes + all)
        assert len(rows) == 48
        assert [int(r["M"]) for r in rows if r["class"] == "all"][::4] == [3, 4, 5, 6]
        names = set(res.fits.fits)
        assert {"M_train_intra_linear", "M_test_inter_quadratic"} <= names
        stored = json.loads((tmp_path / "o" / "fits" / "M_train_intra_quadratic.json").read_text())
        assert stored["meta"]["pairing"] == "intra" and stored["n_points"] == 4
        assert all(float(r["nll_std"]) >= 0 for r in rows)

    def test_chi_sweep_composes(self, tmp_path):
        raw = logistic_config(sweep={"axis": "chi", "values": [1, 2, 4], "M": [3, 4, 5, 6]}, seeds_per_point=1)
        res = run_experiment(config_from_dict(raw), tmp_path / "o")
        assert len(res.fits.comparisons) == 2 * 2 * 4
        assert set(res.fits.divergence) == {"intra", "inter"}
        assert "chi_train_intra_log_alpha" in res.fits.fits
        assert "chi_M5_test_inter_log" in res.fits.fits

    def test_deterministic_and_worker_independent(self, tmp_path):
        cfg = config_from_dict(logistic_config())
        run_experiment(cfg, tmp_path / "a")
        run_experiment(cfg, tmp_path / "b", workers=2)
        for rel in ("curves/M.csv", "report.json", "fits/M_test_intra_quadratic.json"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_failure_names_point_and_keeps_partial(self, tmp_path):
        # M = 9 exceeds the 8 logistic iterates, so the last point fails
        cfg = config_from_dict(logistic_config(sweep={"axis": "M", "values": [3, 4, 9]}, seeds_per_point=1))
        with pytest.raises(ExperimentError, match="M=9") as e:
            run_experiment(cfg, tmp_path / "o")
        assert e.value.point[1] == 9
        partial = rows_of(tmp_path / "o" / "curves" / "M.partial.csv")
        assert {r["M"] for r in partial} == {"3", "4"}


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    run_experiment(config_from_dict(logistic_config()), out / "b")
    return out / "b"


def copy(bundle, tmp_path):
    import shutil

    dst = tmp_path / "copy"
    shutil.copytree(bundle, dst)
    return dst


class TestReplay:
    def test_untouched(self, bundle):
        rep = replay(bundle)
        assert rep.ok and not rep.warnings
        assert rep.fits_checked == 8

    def test_edited_cell(self, bundle, tmp_path):
        b = copy(bundle, tmp_path)
        path = b / "curves" / "M.csv"
        lines = path.read_text().splitlines(keepends=True)
        cells = lines[5].split(",")
        cells[5] = repr(float(cells[5]) + 0.5)
        lines[5] = ",".join(cells)
        path.write_text("".join(lines))
        rep = replay(b)
        assert not rep.ok
        assert "curves/M.csv: row 5 differs from the manifest" in rep.issues

    def test_edited_fit(self, bundle, tmp_path):
        b = copy(bundle, tmp_path)
        path = b / "fits" / "M_train_intra_linear.json"
        doc = json.loads(path.read_text())
        doc["coefficients"]["k"] += 1e-9
        path.write_text(json.dumps(doc))
        issues = replay(b).issues
        assert any(i.startswith("fits/M_train_intra_linear.json: coefficients.k") for i in issues)

    def test_version_drift_warns(self, bundle, tmp_path):
        b = copy(bundle, tmp_path)
        report = json.loads((b / "report.json").read_text())
        report["format_version"] = FORMAT_VERSION - 1
        (b / "report.json").write_text(json.dumps(report))
        rep = replay(b)
        assert any("format version" in w for w in rep.warnings)
        assert rep.fits_checked == 8

    def test_missing_file(self, bundle, tmp_path):
        b = copy(bundle, tmp_path)
        (b / "report.json").unlink()
        with pytest.raises(ExperimentError, match="report.json"):
            replay(b)

    def test_fits_need_no_dataset(self, bundle):
        bundle_fits = fit_curves(read_curves(bundle / "curves" / "M.csv"), "M")
        stored = json.loads((bundle / "fits" / "M_test_inter_linear.json").read_text())
        assert bundle_fits.fits["M_test_inter_linear"]["k"] == stored["coefficients"]["k"]


class TestCommandLine:
    def test_run_replay_fit(self, tmp_path, capsys):
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(logistic_config(seeds_per_point=1)))
        out = tmp_path / "o"
        assert main(["run", "--config", str(tmp_path / "c.yaml"), "--out", str(out), "--seed", "3"]) == 0
        assert "M_train_intra_quadratic" in capsys.readouterr().out
        assert json.loads((out / "report.json").read_text())["seeds"]["base"] == 3
        assert main(["replay", str(out)]) == 0
        assert "0 issue(s)" in capsys.readouterr().out
        assert main(["fit", str(out)]) == 0
        assert main(["replay", str(out)]) == 0

    def test_errors_exit_nonzero(self, tmp_path, capsys):
        (tmp_path / "c.yaml").write_text("dataset: {source: nowhere}\nsweep: {axis: M, values: [4]}\n")
        assert main(["run", "--config", str(tmp_path / "c.yaml")]) == 1
        assert "dataset.source" in capsys.readouterr().err

    def test_replay_flags_tampering(self, bundle, tmp_path, capsys):
        b = copy(bundle, tmp_path)
        with open(b / "curves" / "M.csv", "a") as f:
            f.write("7,7,train,intra,all,1.0,0.0,0.3,0.5\n")
        assert main(["replay", str(b)]) == 1
        assert "row 49" in capsys.readouterr().out
