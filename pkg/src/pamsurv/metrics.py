"""Kaplan-Meier estimation and IPCW Brier / integrated Brier scores.

The Brier score at horizon tau weights subjects by the inverse of the
censoring-survival estimate G (a Kaplan-Meier fit with the status flag
inverted), with G evaluated at the left limit for subjects who failed
by tau and at tau itself for subjects still at risk.  The integrated
score runs from 0 to each of the first three quartiles of the observed
event times and is normalized by the quartile.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class KaplanMeierCurve:
    """Right-continuous product-limit step function.

    `times` are the distinct drop times, `values` the survival just after
    each; S(t) = 1 before the first drop.
    """

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, float)
        idx = np.searchsorted(self.times, t, side="right")
        vals = np.concatenate([[1.0], self.values])
        out = vals[idx]
        return float(out) if t.ndim == 0 else out

    def left_limit(self, t):
        """S(t-): the value just before t."""
        t = np.asarray(t, float)
        idx = np.searchsorted(self.times, t, side="left")
        vals = np.concatenate([[1.0], self.values])
        out = vals[idx]
        return float(out) if t.ndim == 0 else out


def kaplan_meier(records, invert: bool = False, cause: int | None = None) -> KaplanMeierCurve:
    """Product-limit estimator over the records' exit times.

    Censoring removes subjects from the risk set after the time point.
    With invert=True, censorings count as events (the censoring
    distribution G); with a cause given, only that cause's events count
    and all other exits censor.  Left-truncated records enter the risk
    set after their entry time.
    """
    if not records:
        raise ValueError("no records")
    exits = np.array([r.exit for r in records], float)
    entries = np.array([r.entry for r in records], float)
    if cause is not None:
        is_event = np.array([r.cause == cause for r in records], bool)
    else:
        is_event = np.array([r.cause > 0 for r in records], bool)
    if invert:
        is_event = ~is_event

    event_times = np.unique(exits[is_event])
    surv = []
    s = 1.0
    for t in event_times:
        at_risk = int(np.sum((entries < t) & (exits >= t)))
        d = int(np.sum(is_event & (exits == t)))
        if at_risk > 0:
            s *= 1.0 - d / at_risk
        surv.append(s)
    return KaplanMeierCurve(times=event_times, values=np.array(surv, float))


def censoring_distribution(records) -> KaplanMeierCurve:
    """Kaplan-Meier estimate of the censoring survival G(t)."""
    return kaplan_meier(records, invert=True)


def _brier_terms(records, predictions: np.ndarray, tau: float,
                 g: KaplanMeierCurve, cause: int | None):
    exits = np.array([r.exit for r in records], float)
    causes = np.array([r.cause for r in records], int)
    is_fail = (causes == cause) if cause is not None else (causes > 0)
    fail_by_tau = (exits <= tau) & is_fail
    at_risk = exits > tau
    # subjects censored before tau contribute 0

    n = len(records)
    g_tau = g(tau)
    g_left = g.left_limit(exits)

    ok1 = fail_by_tau & (g_left > 0.0)
    total = float(np.sum(predictions[ok1] ** 2 / g_left[ok1]))
    dropped = int(np.sum(fail_by_tau & ~ok1))
    if g_tau > 0.0:
        total += float(np.sum((1.0 - predictions[at_risk]) ** 2)) / g_tau
    else:
        dropped += int(np.sum(at_risk))
    return total / n, dropped


def brier(records, predictor, tau: float, cause: int | None = None) -> float:
    """IPCW Brier score at horizon tau.

    `predictor(tau)` must return the predicted event-free probability at
    tau for every record, in order: S_i(tau) for single-risk data, or
    1 - CIF_k,i(tau) when a cause is given.
    """
    predictions = np.asarray(predictor(tau), float)
    if predictions.shape != (len(records),):
        raise ValueError(
            f"predictor returned shape {predictions.shape}, expected ({len(records)},)"
        )
    g = censoring_distribution(records)
    value, _ = _brier_terms(records, predictions, tau, g, cause)
    return value


@dataclass
class EvalResult:
    """IBS at the first three quartiles of observed test event times."""

    ibs_q25: float
    ibs_q50: float
    ibs_q75: float
    quartile_times: tuple
    brier_times: list = field(default_factory=list)
    brier_values: list = field(default_factory=list)
    n_events: int = 0
    n_dropped: int = 0

    def ibs(self) -> dict:
        return {"q25": self.ibs_q25, "q50": self.ibs_q50, "q75": self.ibs_q75}

    def to_dict(self, scale100: bool = False) -> dict:
        f = 100.0 if scale100 else 1.0
        return {
            "q25": f * self.ibs_q25,
            "q50": f * self.ibs_q50,
            "q75": f * self.ibs_q75,
            "quartile_times": list(self.quartile_times),
            "n_events": self.n_events,
            "warnings": self.n_dropped,
        }


def lower_quartiles(values: np.ndarray) -> tuple[float, float, float]:
    """Order statistics at ceil(q n) for q = 0.25, 0.5, 0.75."""
    v = np.sort(np.asarray(values, float))
    n = v.size
    out = []
    for q in (0.25, 0.5, 0.75):
        out.append(float(v[int(np.ceil(q * n)) - 1]))
    return tuple(out)


def _integration_grid(event_times: np.ndarray, q: float, min_points: int) -> np.ndarray:
    pieces = [np.array([0.0, q]), event_times[event_times <= q],
              np.linspace(0.0, q, min_points)]
    return np.unique(np.concatenate(pieces))


def ibs_at_quartiles(records, predictor, cause: int | None = None,
                     min_grid: int = 50) -> EvalResult:
    """Integrated Brier score from 0 to each event-time quartile.

    Integration is by the trapezoid rule on the merged grid of observed
    event times below the quartile, refined to at least `min_grid` points,
    then normalized by the quartile.
    """
    event_times = np.array([r.exit for r in records if r.cause > 0], float)
    if event_times.size < 4:
        raise ValueError(
            f"need at least 4 uncensored events, got {event_times.size}"
        )
    quartiles = lower_quartiles(event_times)

    g = censoring_distribution(records)
    cache: dict = {}
    n_dropped = 0

    def bs(tau: float) -> float:
        nonlocal n_dropped
        if tau not in cache:
            predictions = np.asarray(predictor(tau), float)
            value, dropped = _brier_terms(records, predictions, tau, g, cause)
            n_dropped += dropped
            cache[tau] = value
        return cache[tau]

    scores = []
    last_grid = None
    for q in quartiles:
        grid = _integration_grid(event_times, q, min_grid)
        values = np.array([bs(t) for t in grid])
        scores.append(float(np.trapezoid(values, grid) / q))
        last_grid = (grid, values)

    return EvalResult(
        ibs_q25=scores[0], ibs_q50=scores[1], ibs_q75=scores[2],
        quartile_times=quartiles,
        brier_times=last_grid[0].tolist(),
        brier_values=last_grid[1].tolist(),
        n_events=int(event_times.size),
        n_dropped=n_dropped,
    )


def constant_predictor(curve, n: int):
    """Predictor wrapping a population-level curve (e.g. Kaplan-Meier)."""

    def predict(tau: float) -> np.ndarray:
        return np.full(n, float(curve(tau)))

    return predict
