"""Additive log-hazard model: structured terms plus an optional deep head.

The log hazard of row (i, j) under cause k is

    log h_ijk = B_ij . w_k  +  sum_u zeta_ij,u gamma_k,u

where B_ij collects the structured design (intercept, linear columns,
basis-evaluated smooths, random-effect indicators) and zeta are latent
features produced by a small MLP.  With no deep head the model is a plain
penalized piecewise exponential additive mixed model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .basis import (
    BasisSpec,
    basis_matrix,
    count_out_of_domain,
    penalty_for,
    tensor_matrix,
    tensor_penalty,
)
from .ped import CutPoints, PedFrame

TERM_KINDS = (
    "intercept",
    "linear",
    "smooth",
    "smooth_time",
    "tensor",
    "random_effect",
    "interval_dummy",
)


@dataclass
class StructuredTerm:
    """One additive component of the structured predictor.

    `strength` is the term's penalty weight (psi_l for smooths, lambda_RE
    for random effects); None defers to the training configuration.
    `coef` has one column per cause and is filled by the trainer.
    """

    kind: str
    feature: Optional[str] = None
    feature2: Optional[str] = None
    basis: Optional[BasisSpec] = None
    basis2: Optional[BasisSpec] = None
    penalty_order: int = 2
    strength: Optional[float] = None
    levels: Optional[tuple] = None
    coef: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise ValueError(f"unknown term kind {self.kind!r}")
        needs_feature = {"linear": 1, "smooth": 1, "tensor": 2}
        if self.kind in needs_feature:
            if self.feature is None or (needs_feature[self.kind] == 2 and self.feature2 is None):
                raise ValueError(f"term {self.kind!r} needs feature name(s)")

    def n_columns(self, cuts: CutPoints) -> int:
        if self.kind in ("intercept", "linear"):
            return 1
        if self.kind in ("smooth", "smooth_time"):
            return self.basis.n_basis
        if self.kind == "tensor":
            return self.basis.n_basis * self.basis2.n_basis
        if self.kind == "interval_dummy":
            return cuts.n_intervals
        if self.kind == "random_effect":
            if self.levels is None:
                raise RuntimeError("random-effect levels not resolved yet")
            return len(self.levels)
        raise AssertionError(self.kind)

    def label(self) -> str:
        if self.kind == "tensor":
            return f"tensor({self.feature},{self.feature2})"
        if self.feature is not None:
            return f"{self.kind}({self.feature})"
        return self.kind


def intercept() -> StructuredTerm:
    return StructuredTerm("intercept")


def linear(feature: str) -> StructuredTerm:
    return StructuredTerm("linear", feature=feature)


def smooth(feature: str, basis: Optional[BasisSpec] = None,
           penalty_order: int = 2, strength: Optional[float] = None) -> StructuredTerm:
    return StructuredTerm("smooth", feature=feature, basis=basis,
                          penalty_order=penalty_order, strength=strength)


def smooth_time(basis: Optional[BasisSpec] = None, penalty_order: int = 2,
                strength: Optional[float] = None) -> StructuredTerm:
    return StructuredTerm("smooth_time", basis=basis,
                          penalty_order=penalty_order, strength=strength)


def tensor(feature1: str, feature2: str, basis1: Optional[BasisSpec] = None,
           basis2: Optional[BasisSpec] = None, penalty_order: int = 2,
           strength: Optional[float] = None) -> StructuredTerm:
    return StructuredTerm("tensor", feature=feature1, feature2=feature2,
                          basis=basis1, basis2=basis2,
                          penalty_order=penalty_order, strength=strength)


def random_effect(strength: Optional[float] = None) -> StructuredTerm:
    return StructuredTerm("random_effect", strength=strength)


def interval_dummy() -> StructuredTerm:
    return StructuredTerm("interval_dummy")


@dataclass
class DeepHead:
    """Small fully connected ReLU network feeding U latent features.

    In proportional-hazards mode (time_varying=False) the latents depend
    only on the subject's features and are broadcast over intervals; with
    time_varying=True the interval time t_j joins the inputs.  The final
    map `gamma` (U x K) is linear, one column per cause.

    With shared_trunk=True (default) all causes read the same latents and
    differ only through their gamma column; shared_trunk=False keeps one
    full set of hidden layers per cause, so the latents themselves are
    cause-specific.
    """

    inputs: list[str]
    widths: tuple = (64, 32, 8)
    activation: str = "relu"
    time_varying: bool = False
    shared_trunk: bool = True
    weights: Optional[list] = None    # [W_l]; per-cause: [[W_l] per cause]
    biases: Optional[list] = None
    gamma: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.inputs and not self.time_varying:
            raise ValueError("deep head needs at least one input")
        self.widths = tuple(int(w) for w in self.widths)
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_latent(self) -> int:
        return self.widths[-1]

    @property
    def initialized(self) -> bool:
        return self.weights is not None

    @property
    def n_trunks(self) -> int:
        if self.shared_trunk:
            return 1
        if self.gamma is None:
            raise RuntimeError("per-cause trunks are sized at initialization")
        return self.gamma.shape[1]

    def _init_one_trunk(self, rng: np.random.Generator):
        n_in = len(self.inputs) + (1 if self.time_varying else 0)
        dims = [n_in, *self.widths]
        weights, biases = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(max(a, 1))
            weights.append(rng.uniform(-bound, bound, size=(a, b)))
            biases.append(rng.uniform(-bound, bound, size=b))
        return weights, biases

    def init_params(self, n_causes: int, rng: np.random.Generator) -> None:
        """Symmetric uniform init for hidden weights and biases; gamma starts
        at zero so training begins from the structured-only predictor."""
        if self.shared_trunk:
            self.weights, self.biases = self._init_one_trunk(rng)
        else:
            trunks = [self._init_one_trunk(rng) for _ in range(n_causes)]
            self.weights = [w for w, _ in trunks]
            self.biases = [b for _, b in trunks]
        self.gamma = np.zeros((self.n_latent, n_causes))

    def trunk(self, k: int) -> tuple[list, list]:
        """Weight and bias lists of trunk k (0-based; shared mode has one)."""
        if self.shared_trunk:
            return self.weights, self.biases
        return self.weights[k], self.biases[k]

    def _act(self, z: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        return np.tanh(z)

    def forward(self, z: np.ndarray, return_cache: bool = False, trunk: int = 0):
        """Latent matrix (n, U); optionally the per-layer cache for backprop."""
        if not self.initialized:
            raise RuntimeError("deep head parameters not initialized")
        weights, biases = self.trunk(trunk)
        z = np.asarray(z, float)
        if z.ndim != 2 or z.shape[1] != weights[0].shape[0]:
            raise ValueError(
                f"deep input has {z.shape[1] if z.ndim == 2 else '?'} columns, "
                f"expected {weights[0].shape[0]}"
            )
        acts = [z]
        pre = []
        h = z
        for w, b in zip(weights, biases):
            s = h @ w + b
            pre.append(s)
            h = self._act(s)
            acts.append(h)
        if return_cache:
            return h, (acts, pre)
        return h

    def parameter_arrays(self) -> list:
        """Flat list of parameter arrays: trunk weights, biases, then gamma."""
        if self.shared_trunk:
            arrays = [*self.weights, *self.biases]
        else:
            arrays = [a for trunk in self.weights for a in trunk]
            arrays += [b for trunk in self.biases for b in trunk]
        return [*arrays, self.gamma]

    def set_parameter_arrays(self, arrays: list) -> None:
        n_layers = len(self.widths)
        if self.shared_trunk:
            self.weights = list(arrays[:n_layers])
            self.biases = list(arrays[n_layers:2 * n_layers])
            self.gamma = arrays[2 * n_layers]
        else:
            k = self.n_trunks
            self.weights = [list(arrays[i * n_layers:(i + 1) * n_layers])
                            for i in range(k)]
            offset = k * n_layers
            self.biases = [list(arrays[offset + i * n_layers:offset + (i + 1) * n_layers])
                           for i in range(k)]
            self.gamma = arrays[2 * k * n_layers]

    def decay_flags(self) -> list[bool]:
        """True for arrays subject to weight decay (weights and gamma)."""
        arrays = self.parameter_arrays()
        n_weight = (len(arrays) - 1) // 2
        return [True] * n_weight + [False] * n_weight + [True]


@dataclass
class HazardModel:
    """Cut points, structured terms with per-cause weights, optional deep head."""

    cuts: CutPoints
    terms: list[StructuredTerm]
    feature_names: list[str]
    n_causes: int = 1
    deep: Optional[DeepHead] = None

    def __post_init__(self):
        if self.n_causes < 1:
            raise ValueError("n_causes must be >= 1")
        if sum(1 for t in self.terms if t.kind == "random_effect") > 1:
            raise ValueError("at most one random-effect term is supported")

    @property
    def has_random_effect(self) -> bool:
        return any(t.kind == "random_effect" for t in self.terms)

    def term(self, kind: str) -> StructuredTerm:
        for t in self.terms:
            if t.kind == kind:
                return t
        raise KeyError(f"model has no {kind!r} term")

    def coefficient_matrix(self) -> np.ndarray:
        """Stacked structured coefficients, shape (n_cols, K)."""
        blocks = []
        for t in self.terms:
            if t.coef is None:
                raise RuntimeError(f"term {t.label()} has no coefficients")
            blocks.append(t.coef)
        return np.vstack(blocks)

    def set_coefficient_matrix(self, w: np.ndarray) -> None:
        pos = 0
        for t in self.terms:
            n = t.n_columns(self.cuts)
            t.coef = w[pos:pos + n].copy()
            pos += n
        if pos != w.shape[0]:
            raise ValueError(f"coefficient matrix has {w.shape[0]} rows, expected {pos}")


@dataclass
class PenaltyBlock:
    """A penalty attached to a contiguous slice of design columns."""

    term_index: int
    cols: slice
    matrix: Optional[np.ndarray]    # None for unpenalized blocks
    kind: str                       # "smooth" | "ridge" | "none"
    strength: Optional[float]       # per-term override, None = config default


@dataclass
class DesignInfo:
    """Structured design for a PED frame plus bookkeeping for the trainer."""

    X: np.ndarray
    offset: np.ndarray
    slices: list[slice]
    penalties: list[PenaltyBlock]
    warnings: dict = field(default_factory=dict)

    @property
    def n_cols(self) -> int:
        return self.X.shape[1]


def _default_domain(x: np.ndarray) -> tuple[float, float]:
    lo, hi = float(np.min(x)), float(np.max(x))
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def resolve_model(model: HazardModel, ped: PedFrame) -> None:
    """Fill data-dependent pieces (basis domains, RE levels) from training data."""
    for t in model.terms:
        if t.kind == "smooth" and t.basis is None:
            lo, hi = _default_domain(_feature_column(ped, t.feature))
            t.basis = BasisSpec(lo=lo, hi=hi)
        elif t.kind == "smooth_time" and t.basis is None:
            t.basis = BasisSpec(lo=0.0, hi=float(ped.cuts.kappa[-1]))
        elif t.kind == "tensor":
            if t.basis is None:
                lo, hi = _default_domain(_feature_column(ped, t.feature))
                t.basis = BasisSpec(lo=lo, hi=hi, n_basis=5)
            if t.basis2 is None:
                lo, hi = _default_domain(_feature_column(ped, t.feature2))
                t.basis2 = BasisSpec(lo=lo, hi=hi, n_basis=5)
        elif t.kind == "random_effect" and t.levels is None:
            if ped.cluster is None:
                raise ValueError("model has a random effect but data has no cluster column")
            t.levels = tuple(sorted(set(ped.cluster.tolist()), key=str))


def _feature_column(ped: PedFrame, name: str) -> np.ndarray:
    try:
        p = ped.feature_names.index(name)
    except ValueError:
        raise KeyError(f"unknown feature {name!r}; data has {ped.feature_names}") from None
    return ped.features[:, p]


def build_design(model: HazardModel, ped: PedFrame) -> DesignInfo:
    """Assemble the structured design matrix, offsets and penalty blocks.

    Terms must be resolved (see :func:`resolve_model`) beforehand; cluster
    levels unseen during training contribute zero columns and are counted
    in the returned warnings.
    """
    cols: list[np.ndarray] = []
    slices: list[slice] = []
    penalties: list[PenaltyBlock] = []
    warnings: dict = {}
    pos = 0
    n = ped.n_rows

    for ti, t in enumerate(model.terms):
        if t.kind == "intercept":
            block = np.ones((n, 1))
            pen = PenaltyBlock(ti, slice(pos, pos + 1), None, "none", None)
        elif t.kind == "linear":
            block = _feature_column(ped, t.feature)[:, None]
            pen = PenaltyBlock(ti, slice(pos, pos + 1), None, "none", None)
        elif t.kind in ("smooth", "smooth_time"):
            if t.basis is None:
                raise RuntimeError(f"term {t.label()} not resolved; call resolve_model first")
            x = ped.t_j if t.kind == "smooth_time" else _feature_column(ped, t.feature)
            n_clamped = count_out_of_domain(t.basis, x)
            if n_clamped:
                warnings[f"clamped:{t.label()}"] = n_clamped
            block = basis_matrix(t.basis, x)
            pmat = penalty_for(t.basis, t.penalty_order).matrix
            pen = PenaltyBlock(ti, slice(pos, pos + block.shape[1]), pmat, "smooth", t.strength)
        elif t.kind == "tensor":
            x1 = _feature_column(ped, t.feature)
            x2 = _feature_column(ped, t.feature2)
            n_clamped = count_out_of_domain(t.basis, x1) + count_out_of_domain(t.basis2, x2)
            if n_clamped:
                warnings[f"clamped:{t.label()}"] = n_clamped
            block = tensor_matrix(t.basis, t.basis2, x1, x2)
            pmat = tensor_penalty(
                penalty_for(t.basis, t.penalty_order),
                penalty_for(t.basis2, t.penalty_order),
            ).matrix
            pen = PenaltyBlock(ti, slice(pos, pos + block.shape[1]), pmat, "smooth", t.strength)
        elif t.kind == "interval_dummy":
            j_max = model.cuts.n_intervals
            block = np.zeros((n, j_max))
            block[np.arange(n), ped.interval - 1] = 1.0
            pen = PenaltyBlock(ti, slice(pos, pos + j_max), None, "none", None)
        elif t.kind == "random_effect":
            if t.levels is None:
                raise RuntimeError("random-effect levels not resolved; call resolve_model first")
            if ped.cluster is None:
                raise ValueError("data has no cluster column for the random effect")
            index = {lev: i for i, lev in enumerate(t.levels)}
            block = np.zeros((n, len(t.levels)))
            unseen = 0
            for row, lev in enumerate(ped.cluster):
                i = index.get(lev)
                if i is None:
                    unseen += 1           # prior mean: zero contribution
                else:
                    block[row, i] = 1.0
            if unseen:
                warnings["unseen_clusters"] = unseen
            pen = PenaltyBlock(ti, slice(pos, pos + block.shape[1]),
                               np.eye(len(t.levels)), "ridge", t.strength)
        else:
            raise AssertionError(t.kind)

        slices.append(slice(pos, pos + block.shape[1]))
        penalties.append(pen)
        cols.append(block)
        pos += block.shape[1]

    X = np.hstack(cols) if cols else np.zeros((n, 0))
    return DesignInfo(X=X, offset=ped.offset.copy(), slices=slices,
                      penalties=penalties, warnings=warnings)


def deep_inputs(model: HazardModel, ped: PedFrame) -> Optional[np.ndarray]:
    """Per-row deep input matrix, or None when the model has no deep head."""
    if model.deep is None:
        return None
    cols = [_feature_column(ped, name) for name in model.deep.inputs]
    if model.deep.time_varying:
        cols.append(ped.t_j)
    return np.column_stack(cols) if cols else np.zeros((ped.n_rows, 0))


def forward_latent(model: HazardModel, ped: PedFrame,
                   trunk: int = 0) -> Optional[np.ndarray]:
    """Latent matrix (n_rows, U) for a PED frame.

    In PH mode the network runs once per originating record and the result
    is repeated across that record's rows, so latents are bitwise identical
    over intervals.  With per-cause trunks, `trunk` selects whose latents
    to return.
    """
    if model.deep is None:
        return None
    z = deep_inputs(model, ped)
    if model.deep.time_varying:
        return model.deep.forward(z, trunk=trunk)
    starts, counts = _record_blocks(ped.record_index)
    latent_unique = model.deep.forward(z[starts], trunk=trunk)
    return np.repeat(latent_unique, counts, axis=0)


def deep_contribution(model: HazardModel, ped: PedFrame,
                      cause: np.ndarray) -> np.ndarray:
    """Per-row deep additive term, covering shared and per-cause trunks."""
    if model.deep is None:
        return np.zeros(ped.n_rows)
    if model.deep.shared_trunk:
        return deep_predictor(model, forward_latent(model, ped), cause)
    out = np.zeros(ped.n_rows)
    cause = np.asarray(cause)
    for k in range(1, model.n_causes + 1):
        latent = forward_latent(model, ped, trunk=k - 1)
        mask = cause == k
        out[mask] = latent[mask] @ model.deep.gamma[:, k - 1]
    return out


def _record_blocks(record_index: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First-row positions and lengths of the contiguous record blocks."""
    if record_index.size == 0:
        return np.array([], int), np.array([], int)
    change = np.flatnonzero(np.diff(record_index) != 0) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [record_index.size]])
    return starts, ends - starts


def structured_predictor(model: HazardModel, design: DesignInfo,
                         cause: np.ndarray) -> np.ndarray:
    """B_ij . w_k per row, with k taken from the row's cause column."""
    w = model.coefficient_matrix()
    eta = np.empty(design.X.shape[0])
    for k in range(1, model.n_causes + 1):
        mask = cause == k if model.n_causes > 1 else slice(None)
        eta[mask] = design.X[mask] @ w[:, k - 1]
    return eta


def deep_predictor(model: HazardModel, latent: Optional[np.ndarray],
                   cause: np.ndarray) -> np.ndarray:
    """sum_u zeta_u gamma_k,u per row; zero when there is no deep head."""
    if model.deep is None or latent is None:
        return np.zeros(cause.shape[0] if hasattr(cause, "shape") else 1)
    contrib = latent @ model.deep.gamma          # (n, K)
    if model.n_causes == 1:
        return contrib[:, 0]
    return contrib[np.arange(contrib.shape[0]), np.asarray(cause) - 1]


def log_hazard_rows(model: HazardModel, ped: PedFrame) -> np.ndarray:
    """Log hazard for every PED row (structured + deep parts)."""
    design = build_design(model, ped)
    cause = ped.cause if ped.expanded else np.ones(ped.n_rows, int)
    eta = structured_predictor(model, design, cause)
    eta += deep_contribution(model, ped, cause)
    return eta


def log_hazard(model: HazardModel, design_row: np.ndarray,
               latent_row: Optional[np.ndarray], cause: int = 1) -> float:
    """Scalar log hazard for one design row under the given cause."""
    if not 1 <= cause <= model.n_causes:
        raise ValueError(f"cause {cause} out of range 1..{model.n_causes}")
    w = model.coefficient_matrix()[:, cause - 1]
    eta = float(np.dot(design_row, w))
    if model.deep is not None and latent_row is not None:
        eta += float(np.dot(latent_row, model.deep.gamma[:, cause - 1]))
    return eta


# ---------------------------------------------------------------------------
# Serialization

def model_to_dict(model: HazardModel) -> dict:
    terms = []
    for t in model.terms:
        d = {
            "kind": t.kind,
            "feature": t.feature,
            "feature2": t.feature2,
            "basis": t.basis.to_dict() if t.basis is not None else None,
            "basis2": t.basis2.to_dict() if t.basis2 is not None else None,
            "penalty_order": t.penalty_order,
            "strength": t.strength,
            "levels": list(t.levels) if t.levels is not None else None,
            "coef": t.coef.tolist() if t.coef is not None else None,
        }
        terms.append(d)
    deep = None
    if model.deep is not None:
        dh = model.deep

        def nested(arrays):
            if arrays is None:
                return None
            if dh.shared_trunk:
                return [a.tolist() for a in arrays]
            return [[a.tolist() for a in trunk] for trunk in arrays]

        deep = {
            "inputs": dh.inputs,
            "widths": list(dh.widths),
            "activation": dh.activation,
            "time_varying": dh.time_varying,
            "shared_trunk": dh.shared_trunk,
            "weights": nested(dh.weights),
            "biases": nested(dh.biases),
            "gamma": dh.gamma.tolist() if dh.gamma is not None else None,
        }
    return {
        "cuts": model.cuts.kappa.tolist(),
        "n_causes": model.n_causes,
        "feature_names": model.feature_names,
        "terms": terms,
        "deep": deep,
    }


def model_from_dict(d: dict) -> HazardModel:
    terms = []
    for td in d["terms"]:
        t = StructuredTerm(
            kind=td["kind"],
            feature=td["feature"],
            feature2=td["feature2"],
            basis=BasisSpec.from_dict(td["basis"]) if td["basis"] else None,
            basis2=BasisSpec.from_dict(td["basis2"]) if td["basis2"] else None,
            penalty_order=td["penalty_order"],
            strength=td["strength"],
            levels=tuple(td["levels"]) if td["levels"] is not None else None,
            coef=np.array(td["coef"], float) if td["coef"] is not None else None,
        )
        terms.append(t)
    deep = None
    if d.get("deep") is not None:
        dd = d["deep"]
        shared = dd.get("shared_trunk", True)

        def nested(payload):
            if payload is None:
                return None
            if shared:
                return [np.array(a, float) for a in payload]
            return [[np.array(a, float) for a in trunk] for trunk in payload]

        deep = DeepHead(
            inputs=list(dd["inputs"]),
            widths=tuple(dd["widths"]),
            activation=dd["activation"],
            time_varying=dd["time_varying"],
            shared_trunk=shared,
            weights=nested(dd["weights"]),
            biases=nested(dd["biases"]),
            gamma=np.array(dd["gamma"], float) if dd["gamma"] is not None else None,
        )
    return HazardModel(
        cuts=CutPoints(np.array(d["cuts"], float)),
        terms=terms,
        feature_names=list(d["feature_names"]),
        n_causes=int(d["n_causes"]),
        deep=deep,
    )


def save_model(model: HazardModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, sort_keys=True, separators=(",", ":"))


def load_model(path) -> HazardModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
