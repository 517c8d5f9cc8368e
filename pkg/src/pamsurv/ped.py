"""Piecewise exponential data (PED) transformation.

Raw survival records (one row per subject spell) are expanded into one
row per interval the subject was at risk in, with a pseudo-Poisson status
and a log-exposure offset.  Supports right-censoring, left truncation
(entry > 0), recurrent events via repeated ids in start-stop format, and
competing risks via cause-wise replication.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd


class NoEventsError(ValueError):
    """Raised when an operation needs uncensored records and finds none."""


@dataclass(frozen=True)
class SurvivalRecord:
    """One observed spell: (entry, exit] with event cause at exit.

    cause 0 means censored; cause k >= 1 is an event of cause k.
    features is a plain float vector; cluster is an optional group label
    for random effects.
    """

    id: object
    exit: float
    cause: int
    features: np.ndarray
    entry: float = 0.0
    cluster: Optional[object] = None

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, float))
        if not self.exit > self.entry >= 0:
            raise ValueError(
                f"record {self.id!r}: need exit > entry >= 0, got "
                f"entry={self.entry}, exit={self.exit}"
            )
        if self.cause < 0:
            raise ValueError(f"record {self.id!r}: cause must be >= 0")


@dataclass(frozen=True)
class CutPoints:
    """Strictly increasing interval boundaries kappa_0 = 0 < ... < kappa_J."""

    kappa: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.kappa, float)
        if k.ndim != 1 or k.size < 2:
            raise ValueError("need at least two cut points")
        if k[0] != 0.0:
            raise ValueError("first cut point must be 0")
        if not np.all(np.diff(k) > 0):
            raise ValueError("cut points must be strictly increasing")
        object.__setattr__(self, "kappa", k)

    @property
    def n_intervals(self) -> int:
        return self.kappa.size - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.kappa)

    def interval_of(self, t) -> np.ndarray:
        """1-based index j with t in (kappa_{j-1}, kappa_j]; clips outside."""
        j = np.searchsorted(self.kappa, np.asarray(t, float), side="left")
        return np.clip(j, 1, self.n_intervals)


@dataclass
class PedFrame:
    """Long-format PED data, columnar.

    Before competing-risk expansion, `cause` holds the originating record's
    cause on its final at-risk row and 0 elsewhere (so delta == cause > 0).
    After expansion, `cause` is the replicated risk index 1..K and delta
    marks the matching cause on the event row only.
    """

    id: np.ndarray
    interval: np.ndarray          # 1-based interval index j
    t_j: np.ndarray               # representative time (kappa_j)
    delta: np.ndarray
    exposure: np.ndarray
    offset: np.ndarray
    cause: np.ndarray
    features: np.ndarray          # (n_rows, P)
    feature_names: list[str]
    cuts: CutPoints
    record_index: np.ndarray      # originating record per row, contiguous blocks
    n_causes: int = 1
    expanded: bool = False
    cluster: Optional[np.ndarray] = None
    n_clipped: int = 0            # records administratively censored at kappa_J

    @property
    def n_rows(self) -> int:
        return self.id.shape[0]

    def subject_row_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """(unique ids in first-appearance order, contiguous row count per id)."""
        ids, idx, counts = np.unique(self.id, return_index=True, return_counts=True)
        order = np.argsort(idx)
        return ids[order], counts[order]

    def to_dataframe(self) -> pd.DataFrame:
        df = pd.DataFrame(
            {
                "id": self.id,
                "j": self.interval,
                "tj": self.t_j,
                "delta": self.delta.astype(int),
                "exposure": self.exposure,
                "offset": self.offset,
                "cause": self.cause,
            }
        )
        for p, name in enumerate(self.feature_names):
            df[name] = self.features[:, p]
        if self.cluster is not None:
            df["cluster"] = self.cluster
        return df


def make_cut_points(
    records: Sequence[SurvivalRecord],
    strategy: str = "event_times",
    n_intervals: Optional[int] = None,
    max_cuts: Optional[int] = None,
) -> CutPoints:
    """Choose interval cut points from the observed uncensored exit times.

    strategy "event_times" uses the sorted unique event times (prepended
    with 0); "quantiles" uses `n_intervals` lower empirical quantiles.
    `max_cuts` caps the number of intervals by quantile thinning.
    """
    if not records:
        raise ValueError("no records")
    events = np.sort(np.array([r.exit for r in records if r.cause > 0], float))
    if events.size == 0:
        raise NoEventsError("no events: all records are censored")

    if strategy == "event_times":
        kappa = np.unique(events)
    elif strategy == "quantiles":
        if n_intervals is None or n_intervals < 1:
            raise ValueError("strategy 'quantiles' needs n_intervals >= 1")
        kappa = _lower_quantiles(events, n_intervals)
    else:
        raise ValueError(f"unknown cut strategy {strategy!r}")

    if max_cuts is not None and kappa.size > max_cuts:
        kappa = _lower_quantiles(kappa, max_cuts)
    return CutPoints(np.concatenate([[0.0], kappa]))


def _lower_quantiles(sorted_values: np.ndarray, k: int) -> np.ndarray:
    """Order statistics at ceil(q * n), q = i/k for i = 1..k, deduplicated."""
    n = sorted_values.size
    idx = np.ceil(np.arange(1, k + 1) / k * n).astype(int) - 1
    return np.unique(sorted_values[idx])


def to_ped(
    records: Sequence[SurvivalRecord],
    cuts: CutPoints,
    feature_names: Optional[Sequence[str]] = None,
) -> PedFrame:
    """Expand records into one row per at-risk interval.

    Interval j covers (kappa_{j-1}, kappa_j]; a subject entering exactly on
    a cut starts in the interval beginning there, and events at exactly
    kappa_j belong to interval j.  Records with exit beyond the last cut
    are administratively censored there; the count is kept on the frame.
    """
    if not records:
        raise ValueError("no records")
    kappa = cuts.kappa
    horizon = kappa[-1]

    p = records[0].features.shape[0]
    if feature_names is None:
        names = [f"x{i + 1}" for i in range(p)]
    else:
        names = list(feature_names)
        if len(names) != p:
            raise ValueError(f"got {len(names)} feature names for {p} features")
    has_cluster = any(r.cluster is not None for r in records)

    ids, intervals, tj, delta, expo, cause_col = [], [], [], [], [], []
    feats, clusters, rec_idx = [], [], []
    n_clipped = 0

    for ridx, rec in enumerate(records):
        if rec.features.shape[0] != p:
            raise ValueError(f"record {rec.id!r}: inconsistent feature length")
        entry, exit_, cause = rec.entry, rec.exit, rec.cause
        if exit_ > horizon:
            exit_, cause = horizon, 0
            n_clipped += 1
        if entry >= exit_:
            # spell lies entirely past the horizon after clipping
            continue
        a = int(np.searchsorted(kappa, entry, side="right"))
        b = int(np.searchsorted(kappa, exit_, side="left"))
        b = max(b, a)
        for j in range(a, b + 1):
            at_risk = min(exit_, kappa[j]) - max(entry, kappa[j - 1])
            if at_risk <= 0:
                raise RuntimeError(f"record {rec.id!r}: zero exposure in interval {j}")
            ids.append(rec.id)
            intervals.append(j)
            tj.append(kappa[j])
            delta.append(1.0 if (j == b and cause > 0) else 0.0)
            expo.append(at_risk)
            cause_col.append(cause if j == b else 0)
            feats.append(rec.features)
            rec_idx.append(ridx)
            if has_cluster:
                clusters.append(rec.cluster)

    if not ids:
        raise ValueError("no at-risk rows: every record lies past the last cut")

    exposure = np.array(expo, float)
    n_causes = max((r.cause for r in records), default=1)
    return PedFrame(
        id=np.array(ids, object),
        interval=np.array(intervals, int),
        t_j=np.array(tj, float),
        delta=np.array(delta, float),
        exposure=exposure,
        offset=np.log(exposure),
        cause=np.array(cause_col, int),
        features=np.vstack(feats),
        feature_names=names,
        cuts=cuts,
        record_index=np.array(rec_idx, int),
        n_causes=max(n_causes, 1),
        cluster=np.array(clusters, object) if has_cluster else None,
        n_clipped=n_clipped,
    )


def expand_competing_risks(ped: PedFrame, n_causes: int) -> PedFrame:
    """Replicate each row once per cause k = 1..K.

    delta_ijk = 1 only where the original row was the event row and its
    cause matches k; exposure (and offset) are cause-independent.
    """
    if n_causes < 2:
        raise ValueError("competing-risk expansion needs K >= 2")
    if ped.expanded:
        raise ValueError("frame is already cause-expanded")
    if int(ped.cause.max(initial=0)) > n_causes:
        raise ValueError(
            f"records carry cause {int(ped.cause.max())} > K = {n_causes}"
        )
    n = ped.n_rows
    k_col = np.tile(np.arange(1, n_causes + 1), n)
    rep = lambda a: np.repeat(a, n_causes, axis=0)  # noqa: E731

    delta = (rep(ped.cause) == k_col).astype(float)
    return PedFrame(
        id=rep(ped.id),
        interval=rep(ped.interval),
        t_j=rep(ped.t_j),
        delta=delta,
        exposure=rep(ped.exposure),
        offset=rep(ped.offset),
        cause=k_col,
        features=rep(ped.features),
        feature_names=list(ped.feature_names),
        cuts=ped.cuts,
        record_index=rep(ped.record_index),
        n_causes=n_causes,
        expanded=True,
        cluster=rep(ped.cluster) if ped.cluster is not None else None,
        n_clipped=ped.n_clipped,
    )


# ---------------------------------------------------------------------------
# CSV interfaces

RESERVED_COLUMNS = ("id", "entry", "exit", "cause", "cluster")


def read_records_csv(path) -> list[SurvivalRecord]:
    """Read records from CSV: id,entry,exit,cause,cluster,<feature...>.

    `entry` and `cluster` are optional; a missing entry column means 0.
    Feature columns are every remaining column, in file order.
    """
    df = pd.read_csv(path)
    return records_from_dataframe(df)


def records_from_dataframe(df: pd.DataFrame) -> list[SurvivalRecord]:
    for col in ("id", "exit", "cause"):
        if col not in df.columns:
            raise ValueError(f"records CSV is missing required column {col!r}")
    if len(df) == 0:
        raise ValueError("records CSV has no data rows")
    feature_cols = [c for c in df.columns if c not in RESERVED_COLUMNS]
    entry = df["entry"].to_numpy(float) if "entry" in df.columns else np.zeros(len(df))
    exit_ = pd.to_numeric(df["exit"], errors="coerce").to_numpy(float)
    cause = pd.to_numeric(df["cause"], errors="coerce").to_numpy()
    if np.any(~np.isfinite(exit_)):
        bad = int(np.flatnonzero(~np.isfinite(exit_))[0])
        raise ValueError(f"non-numeric exit time at data row {bad}")
    if np.any(~np.isfinite(cause)) or np.any(cause != cause.astype(int)):
        bad = int(np.flatnonzero(~np.isfinite(cause) | (cause != cause.astype(int)))[0])
        raise ValueError(f"cause must be a non-negative integer (data row {bad})")
    feats = df[feature_cols].to_numpy(float) if feature_cols else np.zeros((len(df), 0))
    clusters = df["cluster"].astype(object).to_numpy() if "cluster" in df.columns else None

    records = []
    for i in range(len(df)):
        records.append(
            SurvivalRecord(
                id=df["id"].iloc[i],
                entry=float(entry[i]),
                exit=float(exit_[i]),
                cause=int(cause[i]),
                features=feats[i],
                cluster=clusters[i] if clusters is not None else None,
            )
        )
    return records


def feature_names_from_dataframe(df: pd.DataFrame) -> list[str]:
    return [c for c in df.columns if c not in RESERVED_COLUMNS]


def write_ped_csv(ped: PedFrame, path) -> None:
    ped.to_dataframe().to_csv(path, index=False)
