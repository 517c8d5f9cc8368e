"""Replicated simulate -> fit -> evaluate harness for the ablation study.

Each replicate simulates a train and a test set from a named scenario,
fits the baselines (Kaplan-Meier, the structured-only model) and the full
model with the neural additive term, evaluates everything with the IBS at
the test event-time quartiles, and adds the ground-truth oracle as the
attainable optimum.  Results are aggregated as mean (sd) per quartile,
scaled by 100.
"""

from __future__ import annotations

import concurrent.futures
import copy
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import model as hm
from .inference import cif_free_predictor, survival_predictor
from .metrics import EvalResult, constant_predictor, ibs_at_quartiles, kaplan_meier
from .ped import expand_competing_risks, make_cut_points, to_ped
from .simulate import get_scenario, make_scenario_dataset
from .training import TrainConfig, fit

METHODS = ("km", "pamm", "deep", "optimal")


class BenchmarkQuotaError(RuntimeError):
    """More than the tolerated share of replicates failed."""


@dataclass
class BenchmarkSettings:
    scenario: str = "cr_v1"
    n_reps: int = 25
    n_train: int = 1000
    n_test: int = 1000
    seed: int = 20240
    n_intervals: int = 20
    threads: int = 1
    deep_widths: tuple = (64, 32, 8)
    deep_epochs: int = 400
    deep_patience: int = 60
    deep_lr: float = 1e-2
    struct_lr: float = 1e-3          # keeps the warm-started structured part calm
    deep_weight_decay: float = 1e-2
    psi_scale: float = 1.0
    lambda_re: float = 0.5
    config_overrides: dict = field(default_factory=dict)


def _model_terms(feature_names, with_cluster: bool):
    terms = [hm.intercept(), hm.smooth_time()]
    terms += [hm.smooth(f) for f in feature_names]
    if with_cluster:
        terms.append(hm.random_effect())
    return terms


def _base_config(settings: BenchmarkSettings, seed: int) -> TrainConfig:
    return TrainConfig(
        seed=seed,
        psi_scale=settings.psi_scale,
        lambda_re=settings.lambda_re,
        **settings.config_overrides,
    )


def run_replicate(settings: BenchmarkSettings, rep: int) -> dict:
    """One replicate; returns {method: {cause: EvalResult}}.

    One dataset of n_train + n_test subjects is simulated and split, so
    mixed-effects scenarios share their clusters (and true random effects)
    between training and test data, as repeated measurements require.
    """
    seeds = np.random.SeedSequence([settings.seed, rep]).generate_state(2)
    scenario = get_scenario(settings.scenario,
                            n_subjects=settings.n_train + settings.n_test)
    records, truth = make_scenario_dataset(scenario, int(seeds[0]))
    train_records = records[:settings.n_train]
    test_records = records[settings.n_train:]
    truth_test = truth.subset(np.arange(settings.n_train, len(records)))

    n_causes = scenario.n_causes
    feature_names = [f"x{i + 1}" for i in range(scenario.n_features)]
    cuts = make_cut_points(train_records, "quantiles",
                           n_intervals=settings.n_intervals)
    ped = to_ped(train_records, cuts, feature_names=feature_names)
    if n_causes > 1:
        ped = expand_competing_risks(ped, n_causes)

    with_cluster = scenario.kind == "mixed_effects"
    cfg = _base_config(settings, int(seeds[1]))

    pamm_spec = hm.HazardModel(
        cuts=cuts, terms=_model_terms(feature_names, with_cluster),
        feature_names=feature_names, n_causes=n_causes,
    )
    pamm, _ = fit(ped, pamm_spec, cfg)

    # warm start: the deep model's structured part begins at the fitted
    # structured-only solution
    deep_spec = hm.HazardModel(
        cuts=cuts, terms=copy.deepcopy(pamm.terms),
        feature_names=feature_names, n_causes=n_causes,
        deep=hm.DeepHead(inputs=feature_names, widths=settings.deep_widths),
    )
    deep_cfg = cfg.replace(
        optimizer="adam",
        learning_rate=settings.struct_lr,
        deep_learning_rate=settings.deep_lr,
        max_epochs=settings.deep_epochs,
        patience=settings.deep_patience,
        weight_decay=settings.deep_weight_decay,
    )
    deep, _ = fit(ped, deep_spec, deep_cfg)

    n_test = len(test_records)
    results: dict = {m: {} for m in METHODS}
    causes = range(1, n_causes + 1) if n_causes > 1 else [None]
    for cause in causes:
        key = cause if cause is not None else 1
        km_curve = kaplan_meier(train_records, cause=cause)
        results["km"][key] = ibs_at_quartiles(
            test_records, constant_predictor(km_curve, n_test), cause=cause
        )
        if n_causes > 1:
            results["pamm"][key] = ibs_at_quartiles(
                test_records, cif_free_predictor(pamm, test_records, cause), cause=cause
            )
            results["deep"][key] = ibs_at_quartiles(
                test_records, cif_free_predictor(deep, test_records, cause), cause=cause
            )
            results["optimal"][key] = ibs_at_quartiles(
                test_records, truth_test.cif_free_predictor(cause), cause=cause
            )
        else:
            results["pamm"][key] = ibs_at_quartiles(
                test_records, survival_predictor(pamm, test_records)
            )
            results["deep"][key] = ibs_at_quartiles(
                test_records, survival_predictor(deep, test_records)
            )
            results["optimal"][key] = ibs_at_quartiles(
                test_records, truth_test.survival_predictor()
            )
    return results


def _result_rows(rep: int, results: dict) -> list[dict]:
    rows = []
    for method, per_cause in results.items():
        for cause, ev in per_cause.items():
            for q, value in ev.ibs().items():
                rows.append({
                    "rep": rep, "method": method, "cause": cause,
                    "quartile": q, "ibs": value,
                })
    return rows


def run_benchmark(settings: BenchmarkSettings) -> tuple[pd.DataFrame, pd.DataFrame, list]:
    """All replicates; returns (summary, per-replicate table, failures).

    Raises BenchmarkQuotaError when more than 20% of replicates fail.
    """
    failures: list = []
    rows: list = []

    if settings.threads > 1:
        with concurrent.futures.ProcessPoolExecutor(settings.threads) as pool:
            futures = {pool.submit(run_replicate, settings, rep): rep
                       for rep in range(settings.n_reps)}
            collected = {}
            for fut in concurrent.futures.as_completed(futures):
                rep = futures[fut]
                try:
                    collected[rep] = fut.result()
                except Exception as exc:  # noqa: BLE001 - recorded, run continues
                    failures.append({"rep": rep, "error": repr(exc)})
            for rep in sorted(collected):
                rows.extend(_result_rows(rep, collected[rep]))
    else:
        for rep in range(settings.n_reps):
            try:
                res = run_replicate(settings, rep)
            except Exception as exc:  # noqa: BLE001
                failures.append({"rep": rep, "error": repr(exc)})
                continue
            rows.extend(_result_rows(rep, res))

    if len(failures) > 0.2 * settings.n_reps:
        raise BenchmarkQuotaError(
            f"{len(failures)} of {settings.n_reps} replicates failed"
        )

    per_rep = pd.DataFrame(rows)
    summary = summarize(per_rep)
    return summary, per_rep, failures


def summarize(per_rep: pd.DataFrame) -> pd.DataFrame:
    """Mean (sd) of IBS x 100 per (cause, quartile, method)."""
    grouped = per_rep.groupby(["cause", "quartile", "method"])["ibs"]
    stats = grouped.agg(["mean", "std", "count"]).reset_index()
    stats["mean"] = 100.0 * stats["mean"]
    stats["sd"] = 100.0 * stats["std"].fillna(0.0)
    order = {m: i for i, m in enumerate(METHODS)}
    stats["__m"] = stats["method"].map(order)
    stats = stats.sort_values(["cause", "quartile", "__m"])
    return stats[["cause", "quartile", "method", "mean", "sd", "count"]].reset_index(drop=True)
