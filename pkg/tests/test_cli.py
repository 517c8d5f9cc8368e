import json

import numpy as np
import pandas as pd
import pytest

from pamsurv.cli import main

MODEL_CONFIG = {
    "n_causes": 1,
    "cuts": {"strategy": "quantiles", "n_intervals": 8},
    "terms": [
        {"kind": "intercept"},
        {"kind": "smooth_time"},
        {"kind": "smooth", "feature": "x1"},
        {"kind": "linear", "feature": "x2"},
        {"kind": "linear", "feature": "x3"},
    ],
    "deep": {"inputs": ["x1", "x2", "x3"], "widths": [8, 4]},
}


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--scenario", "single_v1", "--n", "250",
                 "--seed", "5", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def fit_dir(sim_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    cfg = out / "model_config.json"
    cfg.write_text(json.dumps(MODEL_CONFIG))
    rc = main(["fit", "--input", str(sim_dir / "records.csv"),
               "--model-config", str(cfg), "--seed", "3",
               "--out", str(out)])
    assert rc == 0
    return out


class TestSimulate:
    def test_outputs_and_manifest(self, sim_dir):
        df = pd.read_csv(sim_dir / "records.csv")
        assert list(df.columns)[:4] == ["id", "entry", "exit", "cause"]
        assert len(df) == 250
        scenario = json.loads((sim_dir / "scenario.json").read_text())
        assert scenario["seed"] == 5
        manifest = json.loads((sim_dir / "manifest.json").read_text())
        assert manifest["command"] == "simulate"

    def test_deterministic_records(self, sim_dir, tmp_path):
        out2 = tmp_path / "again"
        main(["simulate", "--scenario", "single_v1", "--n", "250",
              "--seed", "5", "--out", str(out2)])
        assert (sim_dir / "records.csv").read_bytes() == (out2 / "records.csv").read_bytes()


class TestTransform:
    def test_exposure_conservation_and_clip_count(self, sim_dir, tmp_path):
        out = tmp_path / "ped"
        assert main(["transform", "--input", str(sim_dir / "records.csv"),
                     "--cuts-strategy", "quantiles", "--n-intervals", "8",
                     "--out", str(out)]) == 0
        records = pd.read_csv(sim_dir / "records.csv")
        ped = pd.read_csv(out / "ped.csv")
        cuts = json.loads((out / "cuts.json").read_text())
        assert cuts["kappa"][0] == 0.0
        horizon = cuts["kappa"][-1]
        # independent scan: exits past the horizon are clipped there
        clipped = json.loads((out / "manifest.json").read_text())["n_clipped"]
        assert clipped == int((records["exit"] > horizon).sum())
        total = (np.minimum(records["exit"], horizon) - records["entry"]).sum()
        assert ped["exposure"].sum() == pytest.approx(total, rel=1e-12)

    def test_header_only_file_is_input_error(self, tmp_path):
        bad = tmp_path / "empty.csv"
        bad.write_text("id,exit,cause,x1\n")
        assert main(["transform", "--input", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_all_censored_is_data_error(self, tmp_path):
        bad = tmp_path / "cens.csv"
        bad.write_text("id,exit,cause,x1\n1,1.0,0,0.1\n2,2.0,0,0.2\n")
        assert main(["transform", "--input", str(bad), "--out", str(tmp_path / "o")]) == 3

    def test_malformed_value_is_input_error(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("id,exit,cause,x1\n1,abc,1,0.1\n")
        assert main(["transform", "--input", str(bad), "--out", str(tmp_path / "o")]) == 2


class TestFit:
    def test_outputs(self, fit_dir):
        model = json.loads((fit_dir / "model.json").read_text())
        assert model["n_causes"] == 1
        report = json.loads((fit_dir / "report.json").read_text())
        assert report["optimizer"] == "adam"
        loss = pd.read_csv(fit_dir / "loss.csv")
        assert {"epoch", "train_loss", "val_loss"} <= set(loss.columns)
        effects = pd.read_csv(fit_dir / "effects.csv")
        assert set(effects["term"]) == {"smooth_time", "smooth(x1)"}

    def test_refit_identical_bytes(self, sim_dir, fit_dir, tmp_path):
        out2 = tmp_path / "refit"
        cfg = fit_dir / "model_config.json"
        assert main(["fit", "--input", str(sim_dir / "records.csv"),
                     "--model-config", str(cfg), "--seed", "3",
                     "--out", str(out2)]) == 0
        assert (fit_dir / "model.json").read_bytes() == (out2 / "model.json").read_bytes()

    def test_pamm_only_strips_deep(self, sim_dir, fit_dir, tmp_path):
        out2 = tmp_path / "pamm"
        cfg = fit_dir / "model_config.json"
        assert main(["fit", "--input", str(sim_dir / "records.csv"),
                     "--model-config", str(cfg), "--seed", "3", "--pamm-only",
                     "--out", str(out2)]) == 0
        model = json.loads((out2 / "model.json").read_text())
        assert model["deep"] is None
        report = json.loads((out2 / "report.json").read_text())
        assert report["optimizer"] == "newton"

    def test_fit_from_ped_and_cuts(self, sim_dir, fit_dir, tmp_path):
        ped_dir = tmp_path / "ped"
        assert main(["transform", "--input", str(sim_dir / "records.csv"),
                     "--cuts-strategy", "quantiles", "--n-intervals", "8",
                     "--out", str(ped_dir)]) == 0
        out = tmp_path / "fitped"
        cfg = fit_dir / "model_config.json"
        assert main(["fit", "--ped", str(ped_dir / "ped.csv"),
                     "--cuts", str(ped_dir / "cuts.json"),
                     "--model-config", str(cfg), "--seed", "3",
                     "--out", str(out)]) == 0
        assert (out / "model.json").exists()

    def test_missing_config_is_input_error(self, sim_dir, tmp_path):
        assert main(["fit", "--input", str(sim_dir / "records.csv"),
                     "--model-config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")]) == 2


class TestPredictAndEvaluate:
    def test_predict_curves(self, sim_dir, fit_dir, tmp_path):
        out = tmp_path / "pred"
        assert main(["predict", "--model", str(fit_dir / "model.json"),
                     "--input", str(sim_dir / "records.csv"),
                     "--times", "0.5,1.0", "--out", str(out)]) == 0
        curves = pd.read_csv(out / "curves.csv")
        assert set(curves.columns) == {"id", "t", "S"}
        assert np.all((curves["S"] > 0) & (curves["S"] <= 1))

    def test_evaluate_model_and_km(self, sim_dir, fit_dir, tmp_path):
        out = tmp_path / "eval"
        assert main(["evaluate", "--model", str(fit_dir / "model.json"),
                     "--test", str(sim_dir / "records.csv"),
                     "--out", str(out)]) == 0
        payload = json.loads((out / "evaluation.json").read_text())
        assert set(payload["all"]) >= {"q25", "q50", "q75", "n_events", "warnings"}
        assert (out / "brier_all.csv").exists()

        km_out = tmp_path / "evalkm"
        assert main(["evaluate", "--km", "--test", str(sim_dir / "records.csv"),
                     "--out", str(km_out)]) == 0
        km_payload = json.loads((km_out / "evaluation.json").read_text())
        # the fitted model should beat the KM baseline on its own data
        assert payload["all"]["q50"] < km_payload["all"]["q50"]

    def test_evaluate_empty_test_is_input_error(self, fit_dir, tmp_path):
        bad = tmp_path / "empty.csv"
        bad.write_text("id,exit,cause,x1,x2,x3\n")
        assert main(["evaluate", "--model", str(fit_dir / "model.json"),
                     "--test", str(bad), "--out", str(tmp_path / "o")]) == 2


class TestBenchmarkCommand:
    def test_single_replicate_matches_direct_call(self, tmp_path):
        out = tmp_path / "bench"
        assert main(["benchmark", "--scenario", "single_v1", "--n-reps", "1",
                     "--n-train", "150", "--n-test", "150", "--seed", "3",
                     "--out", str(out)]) == 0
        summary = pd.read_csv(out / "summary.csv")
        assert set(summary["method"]) == {"km", "pamm", "deep", "optimal"}
        reps = pd.read_csv(out / "replicates.csv")
        # summary of a single replicate is just that replicate's values
        merged = summary.merge(reps, on=["cause", "quartile", "method"])
        np.testing.assert_allclose(merged["mean"], 100 * merged["ibs"], rtol=1e-12)
        assert (summary["sd"] == 0).all()
