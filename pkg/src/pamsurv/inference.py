"""Survival curves and cumulative incidence functions from fitted hazards.

Hazards are piecewise constant on the model's intervals, so all integrals
are exact; no quadrature is involved.  Queries beyond the last cut point
extrapolate with the final interval's hazard and emit a warning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .model import HazardModel, build_design, deep_contribution, structured_predictor
from .ped import CutPoints, PedFrame, SurvivalRecord, expand_competing_risks, to_ped


class ExtrapolationWarning(UserWarning):
    """Curve evaluated past the last training cut point."""


def _cumulative_hazard(kappa: np.ndarray, hazards: np.ndarray, t) -> np.ndarray:
    """H(t) for a step hazard; linear continuation past the last cut."""
    t = np.asarray(t, float)
    h_cum = np.concatenate([[0.0], np.cumsum(hazards * np.diff(kappa))])
    out = np.interp(t, kappa, h_cum)
    over = t > kappa[-1]
    if np.any(over):
        out = np.where(over, h_cum[-1] + hazards[-1] * (t - kappa[-1]), out)
    return out


def _warn_if_extrapolating(kappa: np.ndarray, t) -> None:
    n_over = int(np.sum(np.asarray(t, float) > kappa[-1]))
    if n_over:
        warnings.warn(
            f"{n_over} evaluation time(s) beyond the last cut point "
            f"{kappa[-1]}; extrapolating with the final hazard",
            ExtrapolationWarning,
            stacklevel=3,
        )


@dataclass(frozen=True)
class SurvivalCurve:
    """S(t) = exp(-integral of a piecewise-constant hazard)."""

    cuts: CutPoints
    hazards: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.hazards, float)
        if h.shape != (self.cuts.n_intervals,):
            raise ValueError(
                f"need {self.cuts.n_intervals} hazards, got shape {h.shape}"
            )
        if np.any(h < 0):
            raise ValueError("hazards must be non-negative")
        object.__setattr__(self, "hazards", h)

    def cumulative_hazard(self, t):
        return _cumulative_hazard(self.cuts.kappa, self.hazards, t)

    def __call__(self, t):
        _warn_if_extrapolating(self.cuts.kappa, t)
        s = np.exp(-self.cumulative_hazard(t))
        return float(s) if np.isscalar(t) else s


def survival_curve(hazards, cuts: CutPoints) -> SurvivalCurve:
    """Survival function of a per-interval hazard vector."""
    return SurvivalCurve(cuts=cuts, hazards=np.asarray(hazards, float))


@dataclass(frozen=True)
class CifSet:
    """Cause-specific cumulative incidence functions plus all-cause survival.

    Built from a (J, K) matrix of cause-specific hazards; the all-cause
    survival delegates to a SurvivalCurve on the row sums, and each CIF
    uses the exact piecewise-exponential composition
        CIF_k(t) = sum_m S(kappa_{m-1}) (h_mk / h_m.) (1 - exp(-h_m. dt)).
    """

    cuts: CutPoints
    hazards: np.ndarray     # (J, K)

    def __post_init__(self):
        h = np.asarray(self.hazards, float)
        if h.ndim != 2 or h.shape[0] != self.cuts.n_intervals:
            raise ValueError(f"hazards must be (J, K), got {h.shape}")
        if np.any(h < 0):
            raise ValueError("hazards must be non-negative")
        object.__setattr__(self, "hazards", h)

    @property
    def n_causes(self) -> int:
        return self.hazards.shape[1]

    @property
    def _total_curve(self) -> SurvivalCurve:
        return SurvivalCurve(self.cuts, self.hazards.sum(axis=1))

    def survival(self, t):
        """All-cause survival; identical to the survival_curve of h_m. sums."""
        return self._total_curve(t)

    def cif(self, cause: int, t):
        """CIF of one cause (1-based) at arbitrary times."""
        if not 1 <= cause <= self.n_causes:
            raise ValueError(f"cause {cause} out of range 1..{self.n_causes}")
        _warn_if_extrapolating(self.cuts.kappa, t)
        t = np.asarray(t, float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)

        kappa = self.cuts.kappa
        widths = np.diff(kappa)
        total = self.hazards.sum(axis=1)
        ratio = np.divide(
            self.hazards[:, cause - 1], total,
            out=np.zeros_like(total), where=total > 0,
        )
        curve = self._total_curve
        s_left = curve(kappa[:-1])                      # S at interval starts
        full_terms = s_left * ratio * (1.0 - np.exp(-total * widths))
        cif_at_cuts = np.concatenate([[0.0], np.cumsum(full_terms)])

        # interval containing t (1-based); times past the horizon keep the
        # last hazards, so clip into the final interval for the partial term
        j = np.clip(np.searchsorted(kappa, t, side="left"), 1, len(kappa) - 1)
        left = kappa[j - 1]
        dt = np.maximum(t - left, 0.0)
        tot_j = total[j - 1]
        ratio_j = ratio[j - 1]
        partial = s_left[j - 1] * ratio_j * (1.0 - np.exp(-tot_j * dt))
        out = cif_at_cuts[j - 1] + partial
        out = np.where(t <= 0, 0.0, out)
        return float(out[0]) if scalar else out


def cifs(cause_hazards, cuts: CutPoints) -> CifSet:
    """CifSet from per-cause hazard vectors (rows = intervals)."""
    h = np.asarray(cause_hazards, float)
    if h.ndim == 1:
        h = h[:, None]
    return CifSet(cuts=cuts, hazards=h)


# ---------------------------------------------------------------------------
# Model predictions

def _prediction_frame(model: HazardModel, records) -> PedFrame:
    """One PED row per (record, interval), ignoring observed exit times."""
    kappa = model.cuts.kappa
    horizon = float(kappa[-1])
    synth = [
        SurvivalRecord(id=r.id, entry=0.0, exit=horizon, cause=0,
                       features=r.features, cluster=r.cluster)
        for r in records
    ]
    ped = to_ped(synth, model.cuts, feature_names=model.feature_names)
    if model.n_causes > 1:
        ped = expand_competing_risks(ped, model.n_causes)
    return ped


def predict_hazard_matrix(model: HazardModel, records) -> np.ndarray:
    """Per-interval, per-cause hazards for each record: (n, J, K)."""
    for r in records:
        if r.features.shape[0] != len(model.feature_names):
            raise ValueError(
                f"record {r.id!r} has {r.features.shape[0]} features, "
                f"model expects {len(model.feature_names)}"
            )
    ped = _prediction_frame(model, records)
    design = build_design(model, ped)
    if design.warnings.get("unseen_clusters"):
        warnings.warn(
            f"{design.warnings['unseen_clusters']} PED row(s) from clusters "
            "unseen at training time; their random effect is zero",
            UserWarning,
            stacklevel=2,
        )
    cause = ped.cause if ped.expanded else np.ones(ped.n_rows, int)
    eta = structured_predictor(model, design, cause)
    eta = eta + deep_contribution(model, ped, cause)
    j_max = model.cuts.n_intervals
    k = model.n_causes
    if k > 1:
        return np.exp(eta).reshape(len(records), j_max, k)
    return np.exp(eta).reshape(len(records), j_max, 1)


def predict_hazard(model: HazardModel, record: SurvivalRecord) -> np.ndarray:
    """Hazard vector for one record: (J,) for one cause, else (J, K)."""
    h = predict_hazard_matrix(model, [record])[0]
    return h[:, 0] if model.n_causes == 1 else h


def predict_survival(model: HazardModel, record: SurvivalRecord) -> SurvivalCurve:
    h = predict_hazard_matrix(model, [record])[0]
    return SurvivalCurve(model.cuts, h.sum(axis=1))


def predict_cifs(model: HazardModel, record: SurvivalRecord) -> CifSet:
    return CifSet(model.cuts, predict_hazard_matrix(model, [record])[0])


def step_survival_predictor(kappa: np.ndarray, hz: np.ndarray):
    """Callable tau -> S_i(tau) from a (n, J) step-hazard matrix."""
    kappa = np.asarray(kappa, float)

    def predict(tau: float) -> np.ndarray:
        overlap = np.maximum(0.0, np.minimum(tau, kappa[1:]) - kappa[:-1])
        h_cum = hz @ overlap
        if tau > kappa[-1]:
            h_cum = h_cum + hz[:, -1] * (tau - kappa[-1])
        return np.exp(-h_cum)

    return predict


def step_cif_free_predictor(kappa: np.ndarray, hmat: np.ndarray, cause: int):
    """Callable tau -> 1 - CIF_k,i(tau) from a (n, J, K) step-hazard array."""
    kappa = np.asarray(kappa, float)
    widths = np.diff(kappa)
    total = hmat.sum(axis=2)                                 # (n, J)
    ratio = np.where(total > 0, hmat[:, :, cause - 1] / np.where(total > 0, total, 1.0), 0.0)
    decay = np.exp(-total * widths[None, :])                 # (n, J)
    s_left = np.concatenate(
        [np.ones((total.shape[0], 1)), np.cumprod(decay, axis=1)[:, :-1]], axis=1
    )
    terms = s_left * ratio * (1.0 - decay)
    cif_cuts = np.concatenate(
        [np.zeros((total.shape[0], 1)), np.cumsum(terms, axis=1)], axis=1
    )

    def predict(tau: float) -> np.ndarray:
        j = int(np.clip(np.searchsorted(kappa, tau, side="left"), 1, len(kappa) - 1))
        dt = max(tau - kappa[j - 1], 0.0)
        partial = s_left[:, j - 1] * ratio[:, j - 1] * (
            1.0 - np.exp(-total[:, j - 1] * dt)
        )
        cif = cif_cuts[:, j - 1] + partial if tau > 0 else np.zeros(total.shape[0])
        return 1.0 - cif

    return predict


def survival_predictor(model: HazardModel, records):
    """Callable tau -> array of S_i(tau) over all-cause survival."""
    hz = predict_hazard_matrix(model, records).sum(axis=2)   # (n, J)
    return step_survival_predictor(model.cuts.kappa, hz)


def cif_free_predictor(model: HazardModel, records, cause: int):
    """Callable tau -> array of 1 - CIF_k,i(tau) (cause-k event-free mass)."""
    hmat = predict_hazard_matrix(model, records)             # (n, J, K)
    return step_cif_free_predictor(model.cuts.kappa, hmat, cause)


def smooth_effect_table(model: HazardModel, n_grid: int = 100):
    """Fitted smooth effects evaluated on uniform grids, one tidy table.

    Univariate smooths give (term, cause, x, value); tensor terms walk a
    coarser 2-d grid with both coordinates filled in.
    """
    import pandas as pd

    from .basis import basis_matrix, tensor_matrix

    rows = []
    for term in model.terms:
        if term.kind in ("smooth", "smooth_time"):
            spec = term.basis
            grid = np.linspace(spec.lo, spec.hi, n_grid)
            design = basis_matrix(spec, grid)
            for k in range(model.n_causes):
                values = design @ term.coef[:, k]
                for x, v in zip(grid, values):
                    rows.append({"term": term.label(), "cause": k + 1,
                                 "x1": x, "x2": np.nan, "value": v})
        elif term.kind == "tensor":
            side = max(int(np.sqrt(n_grid)), 5)
            g1 = np.linspace(term.basis.lo, term.basis.hi, side)
            g2 = np.linspace(term.basis2.lo, term.basis2.hi, side)
            xx1, xx2 = np.meshgrid(g1, g2, indexing="ij")
            design = tensor_matrix(term.basis, term.basis2, xx1.ravel(), xx2.ravel())
            for k in range(model.n_causes):
                values = design @ term.coef[:, k]
                for x1, x2, v in zip(xx1.ravel(), xx2.ravel(), values):
                    rows.append({"term": term.label(), "cause": k + 1,
                                 "x1": x1, "x2": x2, "value": v})
    return pd.DataFrame(rows, columns=["term", "cause", "x1", "x2", "value"])


def export_curves(model: HazardModel, records, times=None):
    """Tidy per-record curve table: id, t, S (and cif_1..cif_K for K > 1)."""
    import pandas as pd

    if times is None:
        times = model.cuts.kappa
    times = np.asarray(times, float)
    hmat = predict_hazard_matrix(model, records)
    rows = []
    for i, rec in enumerate(records):
        if model.n_causes == 1:
            curve = SurvivalCurve(model.cuts, hmat[i, :, 0])
            for t in times:
                rows.append({"id": rec.id, "t": t, "S": curve(t)})
        else:
            cs = CifSet(model.cuts, hmat[i])
            for t in times:
                row = {"id": rec.id, "t": t, "S": cs.survival(t)}
                for k in range(1, model.n_causes + 1):
                    row[f"cif_{k}"] = cs.cif(k, t)
                rows.append(row)
    return pd.DataFrame(rows)
