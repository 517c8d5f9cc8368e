"""Acceptance suite: one test per release criterion, with stated tolerances.

Each test prints a single `[criterion N] PASS/FAIL` line (visible with
`pytest -s`).  Runtime-bounded criteria assert their own wall-clock caps.
"""

import copy
import time

import numpy as np
import pytest
from scipy import stats

from pamsurv import model as hm
from pamsurv.basis import BasisSpec, evaluate_basis
from pamsurv.benchmark import BenchmarkSettings, run_benchmark
from pamsurv.inference import CifSet, SurvivalCurve
from pamsurv.metrics import brier, ibs_at_quartiles, kaplan_meier, lower_quartiles, _integration_grid
from pamsurv.model import HazardModel, build_design, forward_latent, log_hazard_rows
from pamsurv.ped import CutPoints, SurvivalRecord, to_ped
from pamsurv.simulate import get_scenario, make_scenario_dataset
from pamsurv.training import (
    TrainConfig,
    fit,
    gradient,
    pack_parameters,
    penalized_objective,
    unpack_parameters,
)

from test_metrics import brier_oracle, km_oracle
from test_training import random_gradient_instance


def report(n, ok, text):
    print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {text}")
    assert ok, f"criterion {n} failed: {text}"


def rec(id, exit, cause, entry=0.0, features=(0.0,), cluster=None):
    return SurvivalRecord(id=id, exit=exit, cause=cause, entry=entry,
                          features=np.asarray(features, float), cluster=cluster)


def test_criterion_1_closed_form_pem_equivalence():
    rng = np.random.default_rng(101)
    cuts = CutPoints(np.array([0.0, 0.4, 0.9, 1.5, 2.0]))
    records = [rec(i, float(np.clip(rng.exponential(0.9), 1e-3, 1.99)),
                   1 if rng.uniform() < 0.8 else 0, features=rng.normal(size=2))
               for i in range(50)]
    ped = to_ped(records, cuts)
    spec = HazardModel(cuts=cuts, terms=[hm.interval_dummy()],
                       feature_names=["x1", "x2"])
    started = time.perf_counter()
    model, rep = fit(ped, spec, TrainConfig(seed=7))
    elapsed = time.perf_counter() - started

    train_mask = np.isin(ped.id, list(rep.train_ids))
    fitted = np.exp(model.terms[0].coef[:, 0])
    rel_errors = []
    for j in range(1, cuts.n_intervals + 1):
        rows = train_mask & (ped.interval == j)
        oracle = ped.delta[rows].sum() / ped.exposure[rows].sum()
        rel_errors.append(abs(fitted[j - 1] - oracle) / oracle)
    ok = max(rel_errors) < 1e-6 and elapsed < 1.0
    report(1, ok, f"h_j = d_j/E_j max rel err {max(rel_errors):.2e}, {elapsed:.2f}s")


def test_criterion_2_gradient_suite():
    started = time.perf_counter()
    worst = 0.0
    h = 1e-5
    for seed in range(100):
        ped, model, config = random_gradient_instance(seed)
        g = gradient(ped, model, config)
        theta = pack_parameters(model)
        fd = np.zeros_like(theta)
        for i in range(theta.size):
            up, down = theta.copy(), theta.copy()
            up[i] += h
            down[i] -= h
            unpack_parameters(model, up)
            f_up = penalized_objective(ped, model, config)
            unpack_parameters(model, down)
            f_down = penalized_objective(ped, model, config)
            fd[i] = (f_up - f_down) / (2 * h)
        unpack_parameters(model, theta)
        worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(fd)))))
    elapsed = time.perf_counter() - started
    ok = worst < 1e-5 and elapsed < 30.0
    report(2, ok, f"analytic vs FD over 100 instances: max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_3_pamm_fallback_and_additivity():
    rng = np.random.default_rng(33)
    cuts = CutPoints(np.array([0.0, 0.5, 1.0, 2.0]))
    records = [rec(i, float(np.clip(rng.exponential(1.0), .05, 1.95)),
                   int(rng.uniform() < 0.75), features=rng.normal(size=3))
               for i in range(120)]
    ped = to_ped(records, cuts)
    names = ["x1", "x2", "x3"]
    terms = [hm.intercept(), hm.smooth_time(BasisSpec(n_basis=6, lo=0, hi=2)),
             hm.linear("x1"), hm.smooth("x2", BasisSpec(n_basis=6, lo=-3, hi=3))]

    pamm_spec = HazardModel(cuts=cuts, terms=copy.deepcopy(terms), feature_names=names)
    pamm, rep_pamm = fit(ped, pamm_spec, TrainConfig(seed=9))

    deep_spec = HazardModel(cuts=cuts, terms=copy.deepcopy(terms), feature_names=names,
                            deep=hm.DeepHead(inputs=names, widths=(8, 4)))
    frozen_cfg = TrainConfig(seed=9, deep_learning_rate=0.0)
    frozen, rep_frozen = fit(ped, deep_spec, frozen_cfg)

    rel = abs(rep_frozen.val_deviance - rep_pamm.val_deviance) / abs(rep_pamm.val_deviance)

    # additivity of the predictor: total = structured + deep, exactly
    trained_deep, _ = fit(ped, deep_spec, TrainConfig(seed=9, optimizer="adam",
                                                      max_epochs=15))
    design = build_design(trained_deep, ped)
    cause = np.ones(ped.n_rows, int)
    structured = design.X @ trained_deep.coefficient_matrix()[:, 0]
    deep_part = (forward_latent(trained_deep, ped) @ trained_deep.deep.gamma)[:, 0]
    additive = np.array_equal(log_hazard_rows(trained_deep, ped), structured + deep_part)

    ok = rel < 1e-8 and additive
    report(3, ok, f"frozen-deep vs structured val deviance rel diff {rel:.2e}; "
                  f"additivity exact: {additive}")


def test_criterion_4_simulation_study_ordering_cr():
    settings = BenchmarkSettings(scenario="cr_v1", n_reps=25, n_train=1000,
                                 n_test=1000, seed=20240, threads=2)
    started = time.perf_counter()
    summary, per_rep, failures = run_benchmark(settings)
    elapsed = time.perf_counter() - started

    cause1 = summary[summary["cause"] == 1].set_index(["quartile", "method"])["mean"]
    ordering = all(
        cause1[(q, "optimal")] <= cause1[(q, "deep")] + 1e-9
        and cause1[(q, "deep")] <= cause1[(q, "pamm")]
        and cause1[(q, "pamm")] <= cause1[(q, "km")]
        for q in ("q25", "q50", "q75")
    )
    gap = cause1[("q50", "pamm")] - cause1[("q50", "deep")]
    ok = ordering and gap >= 0.2 and not failures and elapsed < 1200.0
    values = {m: round(cause1[("q50", m)], 2) for m in ("km", "pamm", "deep", "optimal")}
    report(4, ok, f"cause-1 mean IBS ordering holds, Q50 {values}, "
                  f"deep-vs-pamm gap {gap:.2f} (>= 0.2), {elapsed:.0f}s")


def test_criterion_5_mixed_effects_recovery():
    # part 1: correlation between estimated and true random effects
    sc = get_scenario("mixed_v1", n_subjects=3000)
    records, truth = make_scenario_dataset(sc, 777)
    names = [f"x{i + 1}" for i in range(5)]
    from pamsurv.ped import make_cut_points
    cuts = make_cut_points(records, "quantiles", n_intervals=20)
    ped = to_ped(records, cuts, feature_names=names)
    terms = [hm.intercept(), hm.smooth_time()] + [hm.smooth(f) for f in names]
    terms.append(hm.random_effect())
    spec = HazardModel(cuts=cuts, terms=terms, feature_names=names)
    model, _ = fit(ped, spec, TrainConfig(seed=5, lambda_re=0.5))
    re_term = model.term("random_effect")
    estimated = np.array([re_term.coef[i, 0] for i in range(len(re_term.levels))])
    true_values = np.array([truth.re_values[int(lev[1:])] for lev in re_term.levels])
    corr = float(np.corrcoef(estimated, true_values)[0, 1])

    # part 2: deep mean IBS <= structured mean IBS at all quartiles
    settings = BenchmarkSettings(scenario="mixed_v1", n_reps=25, n_train=1000,
                                 n_test=1000, seed=31, threads=2)
    summary, _, failures = run_benchmark(settings)
    means = summary.set_index(["quartile", "method"])["mean"]
    dominated = all(means[(q, "deep")] <= means[(q, "pamm")]
                    for q in ("q25", "q50", "q75"))
    ok = corr > 0.8 and dominated and not failures
    report(5, ok, f"RE correlation {corr:.3f} (> 0.8); deep <= pamm at all "
                  f"quartiles: {dominated}")


def test_criterion_6_metrics_oracle_equivalence():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(5, 31))
        times = np.round(rng.exponential(1.0, n), 2) + 0.01
        causes = rng.integers(0, 3, n)
        if np.sum(causes > 0) < 4:
            causes[:4] = 1
        records = [rec(i, float(t), int(c), features=(0.0,))
                   for i, (t, c) in enumerate(zip(times, causes))]
        events = causes > 0

        km = kaplan_meier(records)
        for t in rng.uniform(0, 3, 3):
            worst = max(worst, abs(km(t) - km_oracle(times, events, t)))

        s_hat = rng.uniform(size=n)
        tau = float(rng.uniform(0.2, 2.0))
        worst = max(worst, abs(brier(records, lambda _t: s_hat, tau)
                               - brier_oracle(records, s_hat, tau)))

        # independent IBS: same declared grid rule, brute-force integrand
        result = ibs_at_quartiles(records, lambda _t: s_hat)
        event_times = times[events]
        for q, mine in zip(lower_quartiles(event_times),
                           (result.ibs_q25, result.ibs_q50, result.ibs_q75)):
            grid = _integration_grid(event_times, q, 50)
            values = [brier_oracle(records, s_hat, t) for t in grid]
            worst = max(worst, abs(mine - np.trapezoid(values, grid) / q))
    ok = worst < 1e-12
    report(6, ok, f"KM/Brier/IBS vs brute force on 200 samples: max abs diff {worst:.2e}")


def test_criterion_7_survival_cif_invariants():
    rng = np.random.default_rng(303)
    ok = True
    for _ in range(1000):
        j = int(rng.integers(1, 8))
        k = int(rng.integers(1, 4))
        kappa = np.concatenate([[0.0], np.cumsum(rng.uniform(0.1, 1.0, j))])
        cuts = CutPoints(kappa)
        hazards = rng.uniform(0.0, 2.0, size=(j, k))
        cs = CifSet(cuts, hazards)
        curve = SurvivalCurve(cuts, hazards.sum(axis=1))
        ts = np.sort(rng.uniform(0.0, kappa[-1], 8))
        s_vals = curve(np.concatenate([[0.0], ts]))
        ok &= s_vals[0] == 1.0
        ok &= bool(np.all(np.diff(s_vals) <= 1e-15))
        ok &= bool(np.all((s_vals > 0) & (s_vals <= 1)))
        total_err = max(
            abs(sum(cs.cif(c, t) for c in range(1, k + 1)) + cs.survival(t) - 1.0)
            for t in [*ts, *kappa]
        )
        ok &= total_err < 1e-10
        if not ok:
            break
    report(7, ok, "S(0)=1, monotonicity, sum CIF + S = 1 (1e-10) on 1000 random models")


def test_criterion_8_simulator_calibration():
    rng = np.random.default_rng(404)
    grid = np.linspace(0.0, 20.0, 401)
    x = np.zeros((100_000, 1))
    from pamsurv.simulate import sample_survival_times
    t, _ = sample_survival_times(lambda z, s: np.zeros(z.shape[0]), x, grid, rng)
    surv_err = max(abs(np.mean(t > u) - np.exp(-u)) for u in (0.5, 1.0, 2.0))

    sc = get_scenario("cr_v1", n_subjects=10_000, censor_rate=0.0,
                      t_max=40.0, n_grid=800)
    records, truth = make_scenario_dataset(sc, 55)
    times = np.array([r.exit for r in records])
    causes = np.array([r.cause for r in records])
    pit = truth.survival_at_own_time(times[causes > 0])
    p_value = float(stats.kstest(pit, "uniform").pvalue)
    ok = surv_err < 0.005 and p_value > 0.01
    report(8, ok, f"constant-hazard survival err {surv_err:.4f} (< 0.005), "
                  f"PIT KS p = {p_value:.3f} (> 0.01)")


def test_criterion_9_cyclic_constraint_bitwise():
    # hour-of-day effect fitted with a cyclic smooth on [0, 24]
    rng = np.random.default_rng(55)
    records = []
    for i in range(300):
        hour = float(rng.uniform(0, 24))
        lam = np.exp(-0.5 + 0.5 * np.sin(2 * np.pi * hour / 24))
        t = float(np.clip(rng.exponential(1 / lam), 1e-3, 2.95))
        records.append(rec(i, t, 1 if t < 2.95 else 0, features=(hour,)))
    cuts = CutPoints(np.array([0.0, 0.5, 1.0, 2.0, 3.0]))
    ped = to_ped(records, cuts, feature_names=["hour"])
    spec = HazardModel(
        cuts=cuts,
        terms=[hm.intercept(),
               hm.smooth("hour", BasisSpec(kind="cyclic", n_basis=8, lo=0.0, hi=24.0))],
        feature_names=["hour"],
    )
    model, _ = fit(ped, spec, TrainConfig(seed=2))
    theta = model.term("smooth").coef[:, 0]
    basis_spec = model.term("smooth").basis
    f_at_0 = float(evaluate_basis(basis_spec, 0.0) @ theta)
    f_at_24 = float(evaluate_basis(basis_spec, 24.0) @ theta)
    ok = f_at_0 == f_at_24   # bitwise by construction
    report(9, ok, f"fitted cyclic effect f(0) == f(24) bitwise: {f_at_0!r}")


def test_criterion_10_benchmark_determinism(tmp_path):
    from pamsurv.cli import main
    out1, out2 = tmp_path / "b1", tmp_path / "b2"
    args = ["benchmark", "--scenario", "cr_v1", "--n-reps", "2",
            "--n-train", "300", "--n-test", "300", "--seed", "77",
            "--threads", "2"]
    assert main([*args, "--out", str(out1)]) == 0
    assert main([*args, "--out", str(out2)]) == 0
    identical = (out1 / "summary.csv").read_bytes() == (out2 / "summary.csv").read_bytes()
    report(10, identical, "summary.csv byte-identical across two runs with a fixed seed")
