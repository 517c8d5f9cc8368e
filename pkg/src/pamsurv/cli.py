"""Command-line interface: transform | fit | predict | evaluate | simulate | benchmark.

Every artifact-producing command writes a run manifest (command, input
hashes, seed, version, timings, output paths) next to its outputs.
Timestamps live only in the manifest, so reruns with identical inputs
produce byte-identical artifacts.

Exit codes: 0 ok, 2 input error, 3 data insufficiency, 4 numerical
failure, 5 benchmark failure quota exceeded.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from . import model as hm
from .basis import BasisSpec
from .benchmark import BenchmarkQuotaError, BenchmarkSettings, run_benchmark
from .inference import cif_free_predictor, export_curves, smooth_effect_table, survival_predictor
from .metrics import brier, constant_predictor, ibs_at_quartiles, kaplan_meier
from .model import HazardModel, load_model, save_model
from .ped import (
    CutPoints,
    NoEventsError,
    PedFrame,
    SurvivalRecord,
    expand_competing_risks,
    feature_names_from_dataframe,
    make_cut_points,
    records_from_dataframe,
    to_ped,
    write_ped_csv,
)
from .simulate import get_scenario, make_scenario_dataset
from .training import DivergenceError, TrainConfig, fit, tune

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_BENCH = 5


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)


def _manifest(out_dir: Path, command: str, args: argparse.Namespace,
              inputs: list, outputs: list, seed, started: float,
              extra: dict | None = None) -> None:
    payload = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "data_hash": {str(p): _sha256(p) for p in inputs if Path(p).exists()},
        "outputs": [str(p) for p in outputs],
        "timings": {"started_unix": started, "elapsed_s": time.time() - started},
        "args": {k: v for k, v in vars(args).items() if k != "func"},
    }
    if extra:
        payload.update(extra)
    _write_json(out_dir / "manifest.json", payload)


def _read_records(path):
    df = pd.read_csv(path)
    records = records_from_dataframe(df)
    return records, feature_names_from_dataframe(df)


def _read_feature_rows(path, feature_names):
    """Records for prediction; outcome columns are optional."""
    df = pd.read_csv(path)
    if len(df) == 0:
        raise ValueError("input CSV has no data rows")
    missing = [c for c in feature_names if c not in df.columns]
    if missing:
        raise ValueError(f"input CSV is missing feature columns {missing}")
    has_outcome = "exit" in df.columns and "cause" in df.columns
    records = []
    for i in range(len(df)):
        records.append(SurvivalRecord(
            id=df["id"].iloc[i] if "id" in df.columns else i,
            exit=float(df["exit"].iloc[i]) if has_outcome else 1.0,
            cause=int(df["cause"].iloc[i]) if has_outcome else 0,
            features=df[feature_names].iloc[i].to_numpy(float),
            cluster=df["cluster"].iloc[i] if "cluster" in df.columns else None,
        ))
    return records, has_outcome


# ---------------------------------------------------------------------------
# Model configuration JSON -> HazardModel spec

def _term_from_config(td: dict) -> hm.StructuredTerm:
    kind = td["kind"]
    basis = basis2 = None
    if kind in ("smooth", "smooth_time", "tensor"):
        if any(key in td for key in ("n_basis", "degree", "lo", "hi", "cyclic")):
            if "lo" in td and "hi" in td:
                basis = BasisSpec(
                    kind="cyclic" if td.get("cyclic") else "bspline",
                    n_basis=td.get("n_basis", 10),
                    degree=td.get("degree", 3),
                    lo=td["lo"], hi=td["hi"],
                )
            elif td.get("cyclic"):
                raise ValueError(
                    f"term {kind!r}: cyclic smooths need explicit lo/hi bounds"
                )
    if kind == "tensor" and "lo2" in td and "hi2" in td:
        basis2 = BasisSpec(
            n_basis=td.get("n_basis2", td.get("n_basis", 5)),
            degree=td.get("degree", 3), lo=td["lo2"], hi=td["hi2"],
        )
    return hm.StructuredTerm(
        kind=kind,
        feature=td.get("feature"),
        feature2=td.get("feature2"),
        basis=basis,
        basis2=basis2,
        penalty_order=td.get("penalty_order", 2),
        strength=td.get("strength"),
    )


def _model_from_config(cfg: dict, feature_names, records) -> HazardModel:
    if "kappa" in cfg.get("cuts", {}):
        cuts = CutPoints(np.asarray(cfg["cuts"]["kappa"], float))
    else:
        c = cfg.get("cuts", {})
        cuts = make_cut_points(
            records,
            strategy=c.get("strategy", "event_times"),
            n_intervals=c.get("n_intervals"),
            max_cuts=c.get("max_cuts"),
        )
    terms = [_term_from_config(td) for td in cfg["terms"]]
    deep = None
    if cfg.get("deep"):
        d = cfg["deep"]
        deep = hm.DeepHead(
            inputs=list(d.get("inputs", feature_names)),
            widths=tuple(d.get("widths", (64, 32, 8))),
            activation=d.get("activation", "relu"),
            time_varying=bool(d.get("time_varying", False)),
            shared_trunk=bool(d.get("shared_trunk", True)),
        )
    return HazardModel(
        cuts=cuts, terms=terms, feature_names=list(feature_names),
        n_causes=int(cfg.get("n_causes", 1)), deep=deep,
    )


def _read_ped_csv(path, cuts: CutPoints) -> PedFrame:
    """Reload a non-expanded PED CSV written by `transform`."""
    df = pd.read_csv(path)
    required = ["id", "j", "tj", "delta", "exposure", "offset", "cause"]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise ValueError(f"PED CSV is missing columns {missing}")
    feature_names = [c for c in df.columns if c not in required + ["cluster"]]
    ids = df["id"].to_numpy(object)
    j = df["j"].to_numpy(int)
    new_record = np.ones(len(df), bool)
    new_record[1:] = (ids[1:] != ids[:-1]) | (j[1:] <= j[:-1])
    record_index = np.cumsum(new_record) - 1
    cause = df["cause"].to_numpy(int)
    return PedFrame(
        id=ids, interval=j, t_j=df["tj"].to_numpy(float),
        delta=df["delta"].to_numpy(float),
        exposure=df["exposure"].to_numpy(float),
        offset=df["offset"].to_numpy(float),
        cause=cause,
        features=df[feature_names].to_numpy(float) if feature_names else np.zeros((len(df), 0)),
        feature_names=feature_names, cuts=cuts,
        record_index=record_index,
        n_causes=max(int(cause.max(initial=0)), 1),
        cluster=df["cluster"].astype(object).to_numpy() if "cluster" in df.columns else None,
    )


# ---------------------------------------------------------------------------
# Subcommands

def cmd_transform(args) -> int:
    started = time.time()
    records, feature_names = _read_records(args.input)
    cuts = make_cut_points(records, strategy=args.cuts_strategy,
                           n_intervals=args.n_intervals, max_cuts=args.max_cuts)
    ped = to_ped(records, cuts, feature_names=feature_names)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ped_path = out_dir / "ped.csv"
    cuts_path = out_dir / "cuts.json"
    write_ped_csv(ped, ped_path)
    _write_json(cuts_path, {"kappa": cuts.kappa.tolist()})
    _manifest(out_dir, "transform", args, [args.input], [ped_path, cuts_path],
              seed=None, started=started,
              extra={"n_records": len(records), "n_rows": ped.n_rows,
                     "n_clipped": ped.n_clipped})
    return EXIT_OK


def cmd_fit(args) -> int:
    started = time.time()
    with open(args.model_config) as fh:
        model_cfg = json.load(fh)
    if args.pamm_only:
        model_cfg = {**model_cfg, "deep": None}

    if args.ped:
        with open(args.cuts) as fh:
            cuts = CutPoints(np.asarray(json.load(fh)["kappa"], float))
        ped = _read_ped_csv(args.ped, cuts)
        feature_names = ped.feature_names
        records = None
        model_cfg = {**model_cfg, "cuts": {"kappa": cuts.kappa.tolist()}}
        inputs = [args.ped, args.cuts, args.model_config]
    else:
        records, feature_names = _read_records(args.input)
        inputs = [args.input, args.model_config]

    model_spec = _model_from_config(model_cfg, feature_names, records)
    if records is not None:
        ped = to_ped(records, model_spec.cuts, feature_names=feature_names)
    if model_spec.n_causes > 1 and not ped.expanded:
        ped = expand_competing_risks(ped, model_spec.n_causes)

    if args.train_config:
        config = TrainConfig.from_json(args.train_config)
        inputs.append(args.train_config)
        if args.seed is not None:
            config = config.replace(seed=args.seed)
    else:
        config = TrainConfig(seed=args.seed if args.seed is not None else 0)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.grid:
        best_cfg, model, grid_table = tune(ped, model_spec, config)
        _write_json(out_dir / "tuning.json", grid_table)
        model, report = fit(ped, model_spec, best_cfg)
    else:
        model, report = fit(ped, model_spec, config)

    model_path = out_dir / "model.json"
    save_model(model, model_path)
    report.save(out_dir / "report.json")
    report.save_loss_csv(out_dir / "loss.csv")
    outputs = [model_path, out_dir / "report.json", out_dir / "loss.csv"]
    effects = smooth_effect_table(model)
    if len(effects):
        effects.to_csv(out_dir / "effects.csv", index=False)
        outputs.append(out_dir / "effects.csv")
    _manifest(out_dir, "fit", args, inputs, outputs,
              seed=config.seed, started=started,
              extra={"val_deviance": report.val_deviance,
                     "optimizer": report.optimizer})
    return EXIT_OK


def cmd_predict(args) -> int:
    started = time.time()
    model = load_model(args.model)
    records, _ = _read_feature_rows(args.input, model.feature_names)
    times = None
    if args.times:
        times = np.array([float(t) for t in args.times.split(",")], float)
    curves = export_curves(model, records, times)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "curves.csv"
    curves.to_csv(out_path, index=False)
    _manifest(out_dir, "predict", args, [args.model, args.input], [out_path],
              seed=None, started=started)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = time.time()
    model = None if args.km else load_model(args.model)
    feature_names = model.feature_names if model else None
    if feature_names is None:
        test_records, _ = _read_records(args.test)
        test_records = list(test_records)
    else:
        test_records, has_outcome = _read_feature_rows(args.test, feature_names)
        if not has_outcome:
            raise ValueError("evaluate needs exit and cause columns in the test CSV")

    n_causes = model.n_causes if model else max(r.cause for r in test_records)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def predictor_for(cause):
        if args.km:
            if args.train:
                train_records, _ = _read_records(args.train)
            else:
                train_records = test_records
            curve = kaplan_meier(train_records, cause=cause)
            return constant_predictor(curve, len(test_records))
        if cause is None:
            return survival_predictor(model, test_records)
        return cif_free_predictor(model, test_records, cause)

    payload = {}
    causes = range(1, n_causes + 1) if n_causes > 1 else [None]
    for cause in causes:
        pred = predictor_for(cause)
        result = ibs_at_quartiles(test_records, pred, cause=cause)
        entry = result.to_dict(scale100=True)
        entry["brier_at_quartiles"] = {
            f"q{q}": brier(test_records, pred, tau, cause=cause)
            for q, tau in zip((25, 50, 75), result.quartile_times)
        }
        key = "all" if cause is None else f"cause_{cause}"
        payload[key] = entry
        pd.DataFrame({
            "tau": result.brier_times, "brier": result.brier_values,
        }).to_csv(out_dir / f"brier_{key}.csv", index=False)

    _write_json(out_dir / "evaluation.json", payload)
    inputs = [args.test] + ([args.model] if model else []) + (
        [args.train] if args.train else [])
    _manifest(out_dir, "evaluate", args, inputs, [out_dir / "evaluation.json"],
              seed=None, started=started)
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.time()
    scenario = get_scenario(args.scenario, n_subjects=args.n)
    records, _ = make_scenario_dataset(scenario, args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in records:
        row = {"id": r.id, "entry": r.entry, "exit": r.exit, "cause": r.cause}
        if r.cluster is not None:
            row["cluster"] = r.cluster
        for p in range(r.features.shape[0]):
            row[f"x{p + 1}"] = r.features[p]
        rows.append(row)
    out_path = Path(out_dir) / "records.csv"
    pd.DataFrame(rows).to_csv(out_path, index=False)
    _write_json(out_dir / "scenario.json", {**scenario.manifest(), "seed": args.seed})
    _manifest(out_dir, "simulate", args, [], [out_path, out_dir / "scenario.json"],
              seed=args.seed, started=started)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    started = time.time()
    settings = BenchmarkSettings(
        scenario=args.scenario, n_reps=args.n_reps,
        n_train=args.n_train, n_test=args.n_test,
        seed=args.seed if args.seed is not None else 20240,
        threads=args.threads,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary, per_rep, failures = run_benchmark(settings)
    summary_path = out_dir / "summary.csv"
    summary.to_csv(summary_path, index=False)
    per_rep.to_csv(out_dir / "replicates.csv", index=False)
    _manifest(out_dir, "benchmark", args, [],
              [summary_path, out_dir / "replicates.csv"],
              seed=settings.seed, started=started,
              extra={"failures": failures})
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pamsurv",
        description="Piecewise exponential additive mixed survival modeling",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    default_threads = int(os.environ.get("PAMSURV_THREADS", "1"))

    p = sub.add_parser("transform", help="records CSV -> PED CSV + cuts JSON")
    p.add_argument("--input", required=True)
    p.add_argument("--cuts-strategy", default="event_times",
                   choices=["event_times", "quantiles"])
    p.add_argument("--n-intervals", type=int, default=None)
    p.add_argument("--max-cuts", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("fit", help="fit a hazard model")
    p.add_argument("--input", help="records CSV")
    p.add_argument("--ped", help="PED CSV from `transform` (needs --cuts)")
    p.add_argument("--cuts", help="cuts JSON accompanying --ped")
    p.add_argument("--model-config", required=True, help="model spec JSON")
    p.add_argument("--train-config", help="TrainConfig JSON")
    p.add_argument("--config", dest="train_config", help="alias for --train-config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--pamm-only", action="store_true",
                   help="drop the deep head (structured-only ablation)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="export survival / CIF curves")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--times", help="comma-separated grid (default: cut points)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="IBS at event-time quartiles")
    p.add_argument("--model")
    p.add_argument("--test", required=True)
    p.add_argument("--train", help="records for the KM baseline")
    p.add_argument("--km", action="store_true", help="evaluate the KM baseline")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="generate a scenario dataset")
    p.add_argument("--scenario", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("benchmark", help="replicated ablation study")
    p.add_argument("--scenario", default="cr_v1")
    p.add_argument("--n-reps", type=int, default=25)
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=default_threads)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "fit" and not args.input and not args.ped:
        parser.error("fit needs --input or --ped")
    if args.command == "evaluate" and not args.km and not args.model:
        parser.error("evaluate needs --model (or --km)")
    try:
        return args.func(args)
    except NoEventsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BenchmarkQuotaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BENCH
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError,
            pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
