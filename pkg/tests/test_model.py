import copy

import numpy as np
import pytest

from pamsurv.basis import BasisSpec
from pamsurv import model as hm
from pamsurv.model import (
    HazardModel,
    build_design,
    forward_latent,
    log_hazard,
    log_hazard_rows,
    model_from_dict,
    model_to_dict,
    resolve_model,
)
from pamsurv.ped import CutPoints, SurvivalRecord, to_ped
from pamsurv.training import TrainConfig, fit, poisson_nll


def rec(id, exit, cause, entry=0.0, features=(0.0,), cluster=None):
    return SurvivalRecord(id=id, exit=exit, cause=cause, entry=entry,
                          features=np.asarray(features, float), cluster=cluster)


CUTS = CutPoints(np.array([0.0, 0.5, 1.0, 2.0]))


def small_ped(cluster=False):
    rng = np.random.default_rng(7)
    records = []
    for i in range(30):
        t = float(np.clip(rng.exponential(0.9), 0.05, 1.95))
        records.append(rec(i, t, int(rng.uniform() < 0.8),
                           features=rng.normal(size=2),
                           cluster=f"c{i % 3}" if cluster else None))
    return to_ped(records, CUTS), records


class TestBuildDesign:
    def test_intercept_only_is_ones(self):
        ped, _ = small_ped()
        model = HazardModel(cuts=CUTS, terms=[hm.intercept()], feature_names=["x1", "x2"])
        design = build_design(model, ped)
        np.testing.assert_array_equal(design.X, np.ones((ped.n_rows, 1)))

    def test_smooth_time_partition_of_unity(self):
        ped, _ = small_ped()
        model = HazardModel(
            cuts=CUTS,
            terms=[hm.smooth_time(BasisSpec(n_basis=10, lo=0.0, hi=2.0))],
            feature_names=["x1", "x2"],
        )
        design = build_design(model, ped)
        assert design.X.shape[1] == 10
        np.testing.assert_allclose(design.X.sum(axis=1), 1.0, atol=1e-10)

    def test_random_effect_one_hot(self):
        ped, _ = small_ped(cluster=True)
        model = HazardModel(cuts=CUTS, terms=[hm.random_effect()], feature_names=["x1", "x2"])
        resolve_model(model, ped)
        design = build_design(model, ped)
        assert design.X.shape[1] == 3
        np.testing.assert_array_equal(design.X.sum(axis=1), 1.0)
        term = model.term("random_effect")
        row = int(np.flatnonzero(ped.cluster == "c1")[0])
        expected = np.zeros(3)
        expected[term.levels.index("c1")] = 1.0
        np.testing.assert_array_equal(design.X[row], expected)

    def test_unseen_cluster_maps_to_zero_with_warning_count(self):
        ped, _ = small_ped(cluster=True)
        model = HazardModel(cuts=CUTS, terms=[hm.random_effect()], feature_names=["x1", "x2"])
        resolve_model(model, ped)
        other = to_ped([rec(99, 0.7, 1, features=(0.0, 0.0), cluster="unknown")], CUTS)
        design = build_design(model, other)
        np.testing.assert_array_equal(design.X, np.zeros((other.n_rows, 3)))
        assert design.warnings["unseen_clusters"] == other.n_rows

    def test_offset_is_log_exposure(self):
        ped, _ = small_ped()
        model = HazardModel(cuts=CUTS, terms=[hm.intercept()], feature_names=["x1", "x2"])
        design = build_design(model, ped)
        np.testing.assert_allclose(design.offset, np.log(ped.exposure))

    def test_unknown_feature_rejected(self):
        ped, _ = small_ped()
        model = HazardModel(cuts=CUTS, terms=[hm.linear("nope")], feature_names=["x1", "x2"])
        with pytest.raises(KeyError, match="nope"):
            build_design(model, ped)


class TestLogHazard:
    def test_intercept_only_constant(self):
        ped, _ = small_ped()
        model = HazardModel(cuts=CUTS, terms=[hm.intercept()], feature_names=["x1", "x2"])
        model.terms[0].coef = np.array([[0.3]])
        np.testing.assert_allclose(log_hazard_rows(model, ped), 0.3)

    def test_single_linear_term(self):
        model = HazardModel(cuts=CUTS, terms=[hm.linear("x1")], feature_names=["x1"])
        model.terms[0].coef = np.array([[2.0]])
        assert log_hazard(model, np.array([1.5]), None) == pytest.approx(3.0)

    def test_zero_gamma_reduces_to_structured(self):
        ped, _ = small_ped()
        rng = np.random.default_rng(0)
        deep = hm.DeepHead(inputs=["x1", "x2"], widths=(4, 3))
        deep.init_params(1, rng)
        model = HazardModel(cuts=CUTS, terms=[hm.intercept(), hm.linear("x1")],
                            feature_names=["x1", "x2"], deep=deep)
        model.terms[0].coef = np.array([[0.1]])
        model.terms[1].coef = np.array([[-0.4]])
        with_deep = log_hazard_rows(model, ped)
        structured = 0.1 - 0.4 * ped.features[:, 0]
        np.testing.assert_array_equal(with_deep, structured)

    def test_additivity_of_deep_contribution(self):
        ped, _ = small_ped()
        rng = np.random.default_rng(1)
        deep = hm.DeepHead(inputs=["x1", "x2"], widths=(4, 3))
        deep.init_params(1, rng)
        deep.gamma = rng.normal(size=deep.gamma.shape)
        model = HazardModel(cuts=CUTS, terms=[hm.intercept()], feature_names=["x1", "x2"], deep=deep)
        model.terms[0].coef = np.array([[0.7]])
        full = log_hazard_rows(model, ped)
        zeroed = copy.deepcopy(model)
        zeroed.deep.gamma = np.zeros_like(deep.gamma)
        base = log_hazard_rows(zeroed, ped)
        deep_part = (forward_latent(model, ped) @ deep.gamma)[:, 0]
        np.testing.assert_allclose(full - base, deep_part, atol=1e-12)

    def test_cause_out_of_range(self):
        model = HazardModel(cuts=CUTS, terms=[hm.intercept()], feature_names=[])
        model.terms[0].coef = np.array([[0.0]])
        with pytest.raises(ValueError, match="cause"):
            log_hazard(model, np.array([1.0]), None, cause=2)

    def test_hazard_positive_finite(self):
        ped, _ = small_ped()
        model = HazardModel(cuts=CUTS, terms=[hm.intercept(), hm.linear("x2")],
                            feature_names=["x1", "x2"])
        model.terms[0].coef = np.array([[-3.0]])
        model.terms[1].coef = np.array([[5.0]])
        h = np.exp(log_hazard_rows(model, ped))
        assert np.all(h > 0) and np.all(np.isfinite(h))


class TestForwardLatent:
    def test_ph_mode_broadcast_bitwise(self):
        # one subject at risk in 4 intervals: 4 bitwise-identical latents
        cuts = CutPoints(np.array([0.0, 0.5, 1.0, 1.5, 2.0]))
        ped = to_ped([rec(1, 1.9, 1, features=(0.3, -0.8))], cuts)
        rng = np.random.default_rng(2)
        deep = hm.DeepHead(inputs=["x1", "x2"], widths=(5, 3))
        deep.init_params(1, rng)
        model = HazardModel(cuts=cuts, terms=[hm.intercept()],
                            feature_names=["x1", "x2"], deep=deep)
        lat = forward_latent(model, ped)
        assert lat.shape == (4, 3)
        for j in range(1, 4):
            assert np.array_equal(lat[0], lat[j])

    def test_zero_weights_zero_biases_give_zeros(self):
        deep = hm.DeepHead(inputs=["x1"], widths=(3, 2))
        deep.weights = [np.zeros((1, 3)), np.zeros((3, 2))]
        deep.biases = [np.zeros(3), np.zeros(2)]
        deep.gamma = np.zeros((2, 1))
        out = deep.forward(np.array([[5.0], [-1.0]]))
        np.testing.assert_array_equal(out, np.zeros((2, 2)))

    def test_rectifier_clamps_negative(self):
        deep = hm.DeepHead(inputs=["x1"], widths=(2,))
        deep.weights = [np.array([[1.0, 1.0]])]
        deep.biases = [np.zeros(2)]
        deep.gamma = np.zeros((2, 1))
        out = deep.forward(np.array([[-1.0]]))
        np.testing.assert_array_equal(out, np.zeros((1, 2)))

    def test_schema_mismatch(self):
        deep = hm.DeepHead(inputs=["x1", "x2"], widths=(2,))
        deep.init_params(1, np.random.default_rng(0))
        with pytest.raises(ValueError, match="columns"):
            deep.forward(np.zeros((3, 5)))

    def test_time_varying_mode_uses_tj(self):
        cuts = CutPoints(np.array([0.0, 1.0, 2.0]))
        ped = to_ped([rec(1, 1.9, 1, features=(0.3,))], cuts)
        deep = hm.DeepHead(inputs=["x1"], widths=(2,), time_varying=True)
        deep.weights = [np.array([[0.0, 0.0], [1.0, 1.0]])]   # reacts to t_j only
        deep.biases = [np.zeros(2)]
        deep.gamma = np.zeros((2, 1))
        model = HazardModel(cuts=cuts, terms=[hm.intercept()], feature_names=["x1"], deep=deep)
        lat = forward_latent(model, ped)
        assert not np.array_equal(lat[0], lat[1])


# ---------------------------------------------------------------------------
# independent penalized Poisson GLM (IRLS) oracle

def irls_poisson(x, delta, offset, penalty, max_iter=300):
    """Minimal second-order solver for sum(mu - delta*eta) + w'Pw."""

    def obj(v):
        e = x @ v
        return float(np.sum(np.exp(e + offset) - delta * e) + v @ penalty @ v)

    w = np.zeros(x.shape[1])
    for _ in range(max_iter):
        eta = x @ w
        mu = np.exp(eta + offset)
        grad = x.T @ (mu - delta) + 2.0 * penalty @ w
        if np.max(np.abs(grad)) < 1e-13 * max(1.0, abs(obj(w))):
            break
        hess = (x * mu[:, None]).T @ x + 2.0 * penalty
        step = np.linalg.solve(hess + 1e-12 * np.eye(len(w)), grad)
        t = 1.0
        base = obj(w)
        while obj(w - t * step) > base and t > 1e-12:
            t /= 2
        w = w - t * step
    return w


def test_pamm_fallback_matches_independent_glm():
    """With no deep head the fit is an ordinary penalized Poisson GLM."""
    ped, _ = small_ped()
    spec = HazardModel(
        cuts=CUTS,
        terms=[hm.intercept(), hm.linear("x1"),
               hm.smooth("x2", BasisSpec(n_basis=6, lo=-3.0, hi=3.0))],
        feature_names=["x1", "x2"],
    )
    config = TrainConfig(seed=5, psi_scale=0.8)
    model, report = fit(ped, spec, config)

    # rebuild the same training design and solve independently
    from pamsurv.training import _make_data, _subset, _split_by_subject, _total_penalty_matrix
    rng = np.random.default_rng(config.seed)
    train_mask, _, _, _ = _split_by_subject(ped, config.validation_fraction, rng)
    ped_train = _subset(ped, train_mask)
    data, design = _make_data(model, ped_train)
    penalty = _total_penalty_matrix(data, config, design.X.shape[1])
    w_oracle = irls_poisson(design.X, data.delta, data.offset, penalty)

    pred_fit = design.X @ model.coefficient_matrix()[:, 0]
    pred_oracle = design.X @ w_oracle
    assert np.max(np.abs(pred_fit - pred_oracle)) < 1e-10

    # objective agreement (relative)
    def objective(w):
        eta = design.X @ w
        return float(np.sum(np.exp(eta + data.offset) - data.delta * eta) + w @ penalty @ w)

    o_fit = objective(model.coefficient_matrix()[:, 0])
    o_oracle = objective(w_oracle)
    assert abs(o_fit - o_oracle) < 1e-6 * abs(o_oracle)


def test_serialization_round_trip_bitwise():
    ped, records = small_ped(cluster=True)
    rng = np.random.default_rng(3)
    deep = hm.DeepHead(inputs=["x1", "x2"], widths=(4, 3))
    deep.init_params(1, rng)
    deep.gamma = rng.normal(size=deep.gamma.shape)
    spec = HazardModel(
        cuts=CUTS,
        terms=[hm.intercept(), hm.linear("x1"),
               hm.smooth("x2", BasisSpec(n_basis=5, lo=-3.0, hi=3.0)),
               hm.smooth_time(BasisSpec(n_basis=5, lo=0.0, hi=2.0)),
               hm.random_effect()],
        feature_names=["x1", "x2"],
        deep=deep,
    )
    resolve_model(spec, ped)
    n_cols = sum(t.n_columns(CUTS) for t in spec.terms)
    spec.set_coefficient_matrix(rng.normal(size=(n_cols, 1)))

    back = model_from_dict(model_to_dict(spec))
    np.testing.assert_array_equal(log_hazard_rows(back, ped), log_hazard_rows(spec, ped))
    assert poisson_nll(ped, back) == poisson_nll(ped, spec)


def test_save_load_file_round_trip(tmp_path):
    ped, _ = small_ped()
    spec = HazardModel(cuts=CUTS, terms=[hm.intercept(), hm.linear("x1")],
                       feature_names=["x1", "x2"])
    model, _ = fit(ped, spec, TrainConfig(seed=0))
    path = tmp_path / "m.json"
    hm.save_model(model, path)
    back = hm.load_model(path)
    np.testing.assert_array_equal(log_hazard_rows(back, ped), log_hazard_rows(model, ped))


class TestPerCauseTrunks:
    def cr_ped(self):
        rng = np.random.default_rng(17)
        records = []
        for i in range(40):
            t = float(np.clip(rng.exponential(0.9), 0.05, 1.95))
            records.append(rec(i, t, int(rng.integers(0, 3)),
                               features=rng.normal(size=2)))
        from pamsurv.ped import expand_competing_risks
        return expand_competing_risks(to_ped(records, CUTS), 2)

    def make_model(self, rng):
        deep = hm.DeepHead(inputs=["x1", "x2"], widths=(4, 3), shared_trunk=False)
        model = HazardModel(cuts=CUTS, terms=[hm.intercept(), hm.linear("x1")],
                            feature_names=["x1", "x2"], n_causes=2, deep=deep)
        deep.init_params(2, rng)
        deep.gamma = rng.normal(0, 0.3, deep.gamma.shape)
        model.set_coefficient_matrix(rng.normal(0, 0.3, (2, 2)))
        return model

    def test_trunks_are_independent_parameter_sets(self):
        rng = np.random.default_rng(0)
        model = self.make_model(rng)
        deep = model.deep
        assert deep.n_trunks == 2
        w0, _ = deep.trunk(0)
        w1, _ = deep.trunk(1)
        assert not np.array_equal(w0[0], w1[0])

    def test_cause_specific_latents_differ(self):
        rng = np.random.default_rng(1)
        model = self.make_model(rng)
        ped = self.cr_ped()
        lat0 = forward_latent(model, ped, trunk=0)
        lat1 = forward_latent(model, ped, trunk=1)
        assert not np.allclose(lat0, lat1)

    def test_serialization_round_trip(self):
        rng = np.random.default_rng(2)
        model = self.make_model(rng)
        ped = self.cr_ped()
        back = model_from_dict(model_to_dict(model))
        assert back.deep.shared_trunk is False
        np.testing.assert_array_equal(log_hazard_rows(back, ped),
                                      log_hazard_rows(model, ped))

    def test_fit_runs_end_to_end(self):
        ped = self.cr_ped()
        deep = hm.DeepHead(inputs=["x1", "x2"], widths=(4, 3), shared_trunk=False)
        spec = HazardModel(cuts=CUTS, terms=[hm.intercept(), hm.linear("x1")],
                           feature_names=["x1", "x2"], n_causes=2, deep=deep)
        model, report = fit(ped, spec, TrainConfig(seed=4, optimizer="adam",
                                                   max_epochs=20))
        assert report.optimizer == "adam"
        assert np.all(np.isfinite(log_hazard_rows(model, ped)))
