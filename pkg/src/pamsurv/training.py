"""Fitting by penalized negative Poisson log likelihood.

The objective is

    sum_rows (mu - delta * log h)  +  sum_l psi_l theta_l' P_l theta_l
                                   +  lambda_RE sum_v b_v^2
                                   +  decay * ||deep weights||^2

with mu = h * exposure.  Structured-only models (no deep head, or a deep
head with zero learning rate) are solved by penalized Newton iterations,
which is the classical fit for this model family; anything with an active
deep part trains end to end with an adaptive-moment first-order optimizer
and analytic gradients.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Optional

import numpy as np

from .model import (
    DesignInfo,
    HazardModel,
    PenaltyBlock,
    build_design,
    deep_inputs,
    resolve_model,
    _record_blocks,
)
from .ped import PedFrame


class DivergenceError(RuntimeError):
    """Loss became non-finite during optimization."""

    def __init__(self, epoch: int, message: Optional[str] = None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; grid axes are used only by :func:`tune`."""

    optimizer: str = "auto"               # auto | adam | newton
    learning_rate: float = 1e-2
    deep_learning_rate: Optional[float] = None   # None: same as learning_rate
    batch_size: Optional[int] = None      # None: full batch up to 65536 rows, else 4096
    max_epochs: int = 500
    patience: int = 25
    validation_fraction: float = 0.2
    psi_scale: float = 1.0
    lambda_re: float = 1.0
    weight_decay: float = 1e-4
    grid: Optional[dict] = None
    seed: int = 0
    max_newton_iter: int = 100

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.psi_scale < 0 or self.lambda_re < 0:
            raise ValueError("penalty strengths must be >= 0")
        if self.optimizer not in ("auto", "adam", "newton"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def effective_deep_lr(self) -> float:
        return self.learning_rate if self.deep_learning_rate is None else self.deep_learning_rate

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls(**json.load(fh))


@dataclass
class TrainReport:
    optimizer: str
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    n_epochs: int = 0
    converged: bool = False
    val_deviance: float = float("nan")
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    warnings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, default=str)

    def save_loss_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,val_loss\n")
            for e, (tr, va) in enumerate(zip(self.train_loss, self.val_loss)):
                fh.write(f"{e},{tr!r},{va!r}\n")


# ---------------------------------------------------------------------------
# Evaluation core

@dataclass
class _Data:
    """Design and targets for one PED frame, ready for repeated evaluation."""

    X: np.ndarray
    offset: np.ndarray
    delta: np.ndarray
    cause: np.ndarray
    masks: Optional[list]             # per-cause row masks, None when K == 1
    penalties: list
    z_rows: Optional[np.ndarray]      # deep input per row (time-varying mode)
    z_unique: Optional[np.ndarray]    # deep input per record (PH mode)
    rep_starts: Optional[np.ndarray]
    rep_counts: Optional[np.ndarray]
    n_causes: int

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]


def _make_data(model: HazardModel, ped: PedFrame) -> tuple[_Data, DesignInfo]:
    design = build_design(model, ped)
    k = model.n_causes
    cause = ped.cause if ped.expanded else np.ones(ped.n_rows, int)
    masks = [cause == c for c in range(1, k + 1)] if k > 1 else None
    z_rows = z_unique = starts = counts = None
    if model.deep is not None:
        z = deep_inputs(model, ped)
        if model.deep.time_varying:
            z_rows = z
        else:
            starts, counts = _record_blocks(ped.record_index)
            z_unique = z[starts]
    return _Data(
        X=design.X, offset=design.offset, delta=ped.delta.astype(float),
        cause=cause, masks=masks, penalties=design.penalties,
        z_rows=z_rows, z_unique=z_unique, rep_starts=starts, rep_counts=counts,
        n_causes=k,
    ), design


def _structured_eta(data: _Data, w: np.ndarray) -> np.ndarray:
    if data.masks is None:
        return data.X @ w[:, 0]
    eta = np.empty(data.n_rows)
    for k, mask in enumerate(data.masks):
        eta[mask] = data.X[mask] @ w[:, k]
    return eta


def _deep_forward(data: _Data, deep):
    """Deep contribution per row plus per-trunk (latent rows, cache) state."""
    if deep is None:
        return np.zeros(data.n_rows), None
    n_trunks = 1 if deep.shared_trunk else data.n_causes
    state = []
    eta = np.zeros(data.n_rows)
    for t in range(n_trunks):
        if data.z_unique is not None:
            lat_u, cache = deep.forward(data.z_unique, return_cache=True, trunk=t)
            lat = np.repeat(lat_u, data.rep_counts, axis=0)
        else:
            lat, cache = deep.forward(data.z_rows, return_cache=True, trunk=t)
        state.append((lat, cache))
        if deep.shared_trunk:
            contrib = lat @ deep.gamma
            if data.masks is None:
                eta = contrib[:, 0]
            else:
                eta = contrib[np.arange(data.n_rows), data.cause - 1]
        else:
            mask = data.masks[t] if data.masks is not None else slice(None)
            eta[mask] = lat[mask] @ deep.gamma[:, t]
    return eta, state


def _forward(data: _Data, w: np.ndarray, deep, want_cache: bool = False):
    eta = _structured_eta(data, w)
    deep_part, state = _deep_forward(data, deep)
    eta = eta + deep_part
    with np.errstate(over="ignore"):   # overflow -> inf, caught as divergence
        mu = np.exp(eta + data.offset)
    return eta, mu, state


def _check_finite(eta: np.ndarray, mu: np.ndarray) -> None:
    bad = ~(np.isfinite(eta) & np.isfinite(mu))
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise ValueError(f"non-finite hazard at PED row {row}")


def _effective_strength(pb: PenaltyBlock, config: TrainConfig) -> float:
    if pb.kind == "none" or pb.matrix is None:
        return 0.0
    if pb.kind == "ridge":
        return pb.strength if pb.strength is not None else config.lambda_re
    base = pb.strength if pb.strength is not None else 1.0
    return config.psi_scale * base


def _penalty_value(data: _Data, w: np.ndarray, deep, config: TrainConfig) -> float:
    val = 0.0
    for pb in data.penalties:
        s = _effective_strength(pb, config)
        if s == 0.0:
            continue
        block = w[pb.cols]
        val += s * float(np.einsum("ik,ij,jk->", block, pb.matrix, block))
    if deep is not None and config.weight_decay > 0:
        for arr, decays in zip(deep.parameter_arrays(), deep.decay_flags()):
            if decays:
                val += config.weight_decay * float(np.sum(arr * arr))
    return val


def _penalty_grad_w(data: _Data, w: np.ndarray, config: TrainConfig,
                    out: np.ndarray) -> None:
    for pb in data.penalties:
        s = _effective_strength(pb, config)
        if s == 0.0:
            continue
        out[pb.cols] += 2.0 * s * (pb.matrix @ w[pb.cols])


def _nll_from(eta: np.ndarray, mu: np.ndarray, delta: np.ndarray) -> float:
    return float(np.sum(mu - delta * eta))


def _mlp_backward(deep, trunk: int, cache, g_lat: np.ndarray):
    weights, _ = deep.trunk(trunk)
    acts, pre = cache
    g_weights = [None] * len(weights)
    g_biases = [None] * len(weights)
    d = g_lat
    for layer in range(len(weights) - 1, -1, -1):
        if deep.activation == "relu":
            d = d * (pre[layer] > 0)
        else:
            d = d * (1.0 - np.tanh(pre[layer]) ** 2)
        g_weights[layer] = acts[layer].T @ d
        g_biases[layer] = d.sum(axis=0)
        if layer > 0:
            d = d @ weights[layer].T
    return g_weights, g_biases


def _collapse_rows(data: _Data, g_lat_rows: np.ndarray) -> np.ndarray:
    """Sum latent-row gradients back onto the unique-record forward pass."""
    if data.z_unique is not None:
        return np.add.reduceat(g_lat_rows, data.rep_starts, axis=0)
    return g_lat_rows


def _grad_core(data: _Data, w: np.ndarray, deep, grad_eta: np.ndarray, state):
    """Gradients of sum(grad_eta * eta) w.r.t. structured and deep params.

    Deep gradients come back as a flat list aligned with
    deep.parameter_arrays(): trunk weights, trunk biases, gamma.
    """
    g_w = np.zeros_like(w)
    if data.masks is None:
        g_w[:, 0] = data.X.T @ grad_eta
    else:
        for k, mask in enumerate(data.masks):
            g_w[:, k] = data.X[mask].T @ grad_eta[mask]

    if deep is None:
        return g_w, None

    g_gamma = np.zeros_like(deep.gamma)
    weight_grads = []
    bias_grads = []
    if deep.shared_trunk:
        lat, cache = state[0]
        if data.masks is None:
            g_gamma[:, 0] = lat.T @ grad_eta
        else:
            for k, mask in enumerate(data.masks):
                g_gamma[:, k] = lat[mask].T @ grad_eta[mask]
        g_lat_rows = grad_eta[:, None] * deep.gamma.T[data.cause - 1]
        g_weights, g_biases = _mlp_backward(deep, 0, cache,
                                            _collapse_rows(data, g_lat_rows))
        weight_grads = g_weights
        bias_grads = g_biases
    else:
        for t in range(data.n_causes):
            lat, cache = state[t]
            mask = data.masks[t] if data.masks is not None else slice(None)
            masked_grad = np.zeros(data.n_rows)
            masked_grad[mask] = grad_eta[mask]
            g_gamma[:, t] = lat.T @ masked_grad
            g_lat_rows = masked_grad[:, None] * deep.gamma[:, t][None, :]
            g_weights, g_biases = _mlp_backward(deep, t, cache,
                                                _collapse_rows(data, g_lat_rows))
            weight_grads += g_weights
            bias_grads += g_biases
    return g_w, [*weight_grads, *bias_grads, g_gamma]


# ---------------------------------------------------------------------------
# Public evaluation operations

def poisson_nll(ped: PedFrame, model: HazardModel) -> float:
    """Negative Poisson log likelihood -sum(delta log h - h t) over all rows."""
    data, _ = _make_data(model, ped)
    eta, mu, _ = _forward(data, model.coefficient_matrix(), model.deep)
    _check_finite(eta, mu)
    return _nll_from(eta, mu, data.delta)


def poisson_deviance(ped: PedFrame, model: HazardModel) -> float:
    """Poisson deviance 2 sum(mu - delta - delta log mu) against saturation."""
    data, _ = _make_data(model, ped)
    eta, mu, _ = _forward(data, model.coefficient_matrix(), model.deep)
    _check_finite(eta, mu)
    log_mu = eta + data.offset
    return float(2.0 * np.sum(mu - data.delta - data.delta * log_mu))


def penalized_objective(ped: PedFrame, model: HazardModel, config: TrainConfig) -> float:
    """NLL plus all quadratic penalties under the given configuration."""
    data, _ = _make_data(model, ped)
    w = model.coefficient_matrix()
    eta, mu, _ = _forward(data, w, model.deep)
    _check_finite(eta, mu)
    return _nll_from(eta, mu, data.delta) + _penalty_value(data, w, model.deep, config)


def pack_parameters(model: HazardModel) -> np.ndarray:
    """Flatten structured coefficients and deep parameters into one vector."""
    parts = [model.coefficient_matrix().ravel()]
    if model.deep is not None:
        parts += [a.ravel() for a in model.deep.parameter_arrays()]
    return np.concatenate(parts)


def unpack_parameters(model: HazardModel, vec: np.ndarray) -> None:
    """Inverse of :func:`pack_parameters`; writes into the model in place."""
    n_cols = sum(t.n_columns(model.cuts) for t in model.terms)
    k = model.n_causes
    pos = n_cols * k
    model.set_coefficient_matrix(vec[:pos].reshape(n_cols, k))
    if model.deep is None:
        if pos != vec.size:
            raise ValueError("parameter vector too long for this model")
        return
    arrays = []
    for a in model.deep.parameter_arrays():
        arrays.append(vec[pos:pos + a.size].reshape(a.shape).copy())
        pos += a.size
    model.deep.set_parameter_arrays(arrays)
    if pos != vec.size:
        raise ValueError("parameter vector length mismatch")


def _apply_decay(grads: list, deep, decay: float) -> list:
    if decay <= 0:
        return grads
    return [g + 2.0 * decay * a if flag else g
            for g, a, flag in zip(grads, deep.parameter_arrays(), deep.decay_flags())]


def gradient(ped: PedFrame, model: HazardModel, config: TrainConfig) -> np.ndarray:
    """Exact gradient of :func:`penalized_objective`, packed like the params."""
    data, _ = _make_data(model, ped)
    w = model.coefficient_matrix()
    eta, mu, state = _forward(data, w, model.deep, want_cache=True)
    _check_finite(eta, mu)
    g_w, deep_grads = _grad_core(data, w, model.deep, mu - data.delta, state)
    _penalty_grad_w(data, w, config, g_w)
    parts = [g_w.ravel()]
    if model.deep is not None:
        deep_grads = _apply_decay(deep_grads, model.deep, config.weight_decay)
        parts += [g.ravel() for g in deep_grads]
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Fitting

def _split_by_subject(ped: PedFrame, fraction: float, rng: np.random.Generator):
    ids = ped.id
    unique_ids = list(dict.fromkeys(ids.tolist()))   # first-appearance order
    n_val = int(np.floor(fraction * len(unique_ids)))
    if n_val == 0 or n_val == len(unique_ids):
        raise ValueError(
            f"validation split of {len(unique_ids)} subjects at fraction "
            f"{fraction} is empty on one side"
        )
    perm = rng.permutation(len(unique_ids))
    val_set = {unique_ids[i] for i in perm[:n_val]}
    val_mask = np.array([i in val_set for i in ids.tolist()], bool)
    return ~val_mask, val_mask, [i for i in unique_ids if i not in val_set], sorted(
        val_set, key=str
    )


def _subset(ped: PedFrame, mask: np.ndarray) -> PedFrame:
    return PedFrame(
        id=ped.id[mask], interval=ped.interval[mask], t_j=ped.t_j[mask],
        delta=ped.delta[mask], exposure=ped.exposure[mask], offset=ped.offset[mask],
        cause=ped.cause[mask], features=ped.features[mask],
        feature_names=list(ped.feature_names), cuts=ped.cuts,
        record_index=ped.record_index[mask], n_causes=ped.n_causes,
        expanded=ped.expanded,
        cluster=ped.cluster[mask] if ped.cluster is not None else None,
        n_clipped=ped.n_clipped,
    )


def _init_coefficients(model: HazardModel) -> np.ndarray:
    blocks = []
    for t in model.terms:
        n = t.n_columns(model.cuts)
        if t.coef is not None and t.coef.shape == (n, model.n_causes):
            blocks.append(t.coef.astype(float))
        else:
            blocks.append(np.zeros((n, model.n_causes)))
    return np.vstack(blocks)


def _total_penalty_matrix(data: _Data, config: TrainConfig, n_cols: int) -> np.ndarray:
    p = np.zeros((n_cols, n_cols))
    for pb in data.penalties:
        s = _effective_strength(pb, config)
        if s == 0.0:
            continue
        p[pb.cols, pb.cols] += s * pb.matrix
    return p


def _newton_fit(data: _Data, w: np.ndarray, deep, config: TrainConfig,
                report: TrainReport) -> np.ndarray:
    """Per-cause penalized Newton iterations to high precision.

    A frozen deep head (gamma fixed, typically zero) contributes a constant
    per-row addition to the predictor and is kept in the objective exactly.
    """
    n_cols = w.shape[0]
    p_total = _total_penalty_matrix(data, config, n_cols)
    fixed_deep, _ = _deep_forward(data, deep)
    fixed_pen = 0.0
    if deep is not None and config.weight_decay > 0:
        for arr, decays in zip(deep.parameter_arrays(), deep.decay_flags()):
            if decays:
                fixed_pen += config.weight_decay * float(np.sum(arr * arr))

    converged_all = True
    for k in range(data.n_causes):
        rows = data.masks[k] if data.masks is not None else slice(None)
        x = data.X[rows]
        delta = data.delta[rows]
        off = data.offset[rows]
        fixed = fixed_deep[rows]
        wk = w[:, k].copy()

        def objective(v):
            eta = x @ v + fixed
            mu = np.exp(eta + off)
            return _nll_from(eta, mu, delta) + float(v @ p_total @ v), eta, mu

        obj, eta, mu = objective(wk)
        converged = False
        for _ in range(config.max_newton_iter):
            grad = x.T @ (mu - delta) + 2.0 * (p_total @ wk)
            if np.max(np.abs(grad)) < 1e-11 * max(1.0, abs(obj)):
                converged = True
                break
            h = (x * mu[:, None]).T @ x + 2.0 * p_total
            jitter = 1e-10 * (np.trace(h) / n_cols + 1.0)
            step = None
            for _ in range(6):
                try:
                    step = np.linalg.solve(h + jitter * np.eye(n_cols), grad)
                    break
                except np.linalg.LinAlgError:
                    jitter *= 100.0
            if step is None:
                step = np.linalg.lstsq(h, grad, rcond=None)[0]
            slope = float(grad @ step)
            t = 1.0
            while t > 1e-10:
                new_obj, new_eta, new_mu = objective(wk - t * step)
                if np.isfinite(new_obj) and new_obj <= obj - 1e-4 * t * slope:
                    break
                t /= 2.0
            improved = obj - new_obj
            wk = wk - t * step
            obj, eta, mu = new_obj, new_eta, new_mu
            report.train_loss.append(obj + fixed_pen)
            if improved <= 1e-14 * max(1.0, abs(obj)):
                converged = True
                break
        converged_all = converged_all and converged
        w[:, k] = wk
    report.converged = converged_all
    report.n_epochs = len(report.train_loss)
    return w


def _subject_batches(ped: PedFrame, batch_size: Optional[int],
                     rng: np.random.Generator) -> list:
    n = ped.n_rows
    if batch_size is None:
        batch_size = n if n <= 65536 else 4096
    if batch_size >= n:
        return [None]
    ids = ped.id.tolist()
    groups: dict = {}
    for row, i in enumerate(ids):
        groups.setdefault(i, []).append(row)
    keys = list(groups)
    rng.shuffle(keys)
    batches, current = [], []
    for key in keys:
        current.extend(groups[key])
        if len(current) >= batch_size:
            batches.append(np.array(sorted(current), int))
            current = []
    if current:
        batches.append(np.array(sorted(current), int))
    return batches


def _slice_data(data: _Data, ped: PedFrame, rows: np.ndarray,
                model: HazardModel) -> _Data:
    cause = data.cause[rows]
    masks = [cause == c for c in range(1, data.n_causes + 1)] if data.masks else None
    z_rows = z_unique = starts = counts = None
    if model.deep is not None:
        if data.z_rows is not None:
            z_rows = data.z_rows[rows]
        else:
            rec = ped.record_index[rows]
            starts, counts = _record_blocks(rec)
            z = deep_inputs(model, _subset(ped, rows))
            z_unique = z[starts]
    return _Data(
        X=data.X[rows], offset=data.offset[rows], delta=data.delta[rows],
        cause=cause, masks=masks, penalties=data.penalties,
        z_rows=z_rows, z_unique=z_unique, rep_starts=starts, rep_counts=counts,
        n_causes=data.n_causes,
    )


def _adam_fit(model: HazardModel, data_train: _Data, data_val: _Data,
              ped_train: PedFrame, w: np.ndarray, config: TrainConfig,
              rng: np.random.Generator, report: TrainReport) -> np.ndarray:
    deep = model.deep
    struct_lr = config.learning_rate
    deep_lr = config.effective_deep_lr
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    params: list = [w]
    lrs = [struct_lr]
    if deep is not None:
        deep_arrays = deep.parameter_arrays()
        params += deep_arrays
        lrs += [deep_lr] * len(deep_arrays)
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]

    def set_deep(plist):
        if deep is not None:
            deep.set_parameter_arrays(plist[1:])

    def full_losses():
        eta, mu, _ = _forward(data_train, params[0], deep)
        if not np.all(np.isfinite(mu)):
            return np.nan, np.nan
        train = _nll_from(eta, mu, data_train.delta) + _penalty_value(
            data_train, params[0], deep, config
        )
        eta_v, mu_v, _ = _forward(data_val, params[0], deep)
        if not np.all(np.isfinite(mu_v)):
            return train, np.nan
        return train, _nll_from(eta_v, mu_v, data_val.delta)

    best_val = np.inf
    best_params = [p.copy() for p in params]
    best_epoch = -1
    step = 0
    n_train = data_train.n_rows

    for epoch in range(config.max_epochs):
        batches = _subject_batches(ped_train, config.batch_size, rng)
        for rows in batches:
            bdata = data_train if rows is None else _slice_data(
                data_train, ped_train, rows, model
            )
            scale = 1.0 if rows is None else n_train / bdata.n_rows
            set_deep(params)
            eta, mu, state = _forward(bdata, params[0], deep, want_cache=True)
            if not np.all(np.isfinite(mu)):
                raise DivergenceError(epoch)
            g_w, deep_grads = _grad_core(
                bdata, params[0], deep, (mu - bdata.delta) * scale, state
            )
            _penalty_grad_w(bdata, params[0], config, g_w)
            grads = [g_w]
            if deep is not None:
                grads += _apply_decay(deep_grads, deep, config.weight_decay)
            step += 1
            corr1 = 1.0 - beta1 ** step
            corr2 = 1.0 - beta2 ** step
            for i, (p, g, lr) in enumerate(zip(params, grads, lrs)):
                if lr == 0.0:
                    continue
                m_state[i] = beta1 * m_state[i] + (1 - beta1) * g
                v_state[i] = beta2 * v_state[i] + (1 - beta2) * g * g
                p -= lr * (m_state[i] / corr1) / (np.sqrt(v_state[i] / corr2) + eps)

        set_deep(params)
        train_loss, val_loss = full_losses()
        if not np.isfinite(train_loss) or not np.isfinite(val_loss):
            raise DivergenceError(epoch)
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_epoch = epoch
            best_params = [p.copy() for p in params]
        elif epoch - best_epoch > config.patience:
            report.converged = True
            break

    for p, b in zip(params, best_params):
        p[...] = b
    set_deep(params)
    report.best_epoch = best_epoch
    report.n_epochs = len(report.train_loss)
    return params[0]


def fit(ped: PedFrame, model_spec: HazardModel, config: TrainConfig) -> tuple[
        HazardModel, TrainReport]:
    """Fit a hazard model; returns the best-validation-loss parameters.

    Deterministic given (seed, config, data).  Terms that already carry
    coefficients of the right shape act as a warm start; an initialized
    deep head is likewise kept.
    """
    model = copy.deepcopy(model_spec)
    rng = np.random.default_rng(config.seed)
    train_mask, val_mask, train_ids, val_ids = _split_by_subject(
        ped, config.validation_fraction, rng
    )
    ped_train = _subset(ped, train_mask)
    ped_val = _subset(ped, val_mask)

    resolve_model(model, ped_train)
    if model.deep is not None and not model.deep.initialized:
        model.deep.init_params(model.n_causes, rng)
    w = _init_coefficients(model)
    model.set_coefficient_matrix(w)

    data_train, design_train = _make_data(model, ped_train)
    data_val, _ = _make_data(model, ped_val)

    deep_active = model.deep is not None and config.effective_deep_lr > 0.0
    if config.optimizer == "newton" and deep_active:
        raise ValueError("newton optimizer cannot train an active deep head")
    use_newton = config.optimizer == "newton" or (
        config.optimizer == "auto" and not deep_active
    )

    report = TrainReport(
        optimizer="newton" if use_newton else "adam",
        train_ids=train_ids, val_ids=val_ids,
        config=asdict(config), warnings=dict(design_train.warnings),
    )

    if use_newton:
        w = _newton_fit(data_train, w, model.deep, config, report)
        model.set_coefficient_matrix(w)
        eta_v, mu_v, _ = _forward(data_val, w, model.deep)
        if not np.all(np.isfinite(mu_v)):
            raise DivergenceError(report.n_epochs)
        report.val_loss = [_nll_from(eta_v, mu_v, data_val.delta)]
        report.best_epoch = report.n_epochs
    else:
        w = _adam_fit(model, data_train, data_val, ped_train, w, config, rng, report)
        model.set_coefficient_matrix(w)

    report.val_deviance = poisson_deviance(ped_val, model)
    return model, report


# ---------------------------------------------------------------------------
# Hyperparameter tuning

_GRID_AXES = ("psi_scale", "lambda_re", "learning_rate")


def _grid_points(grid: dict) -> list[dict]:
    for key in grid:
        if key not in _GRID_AXES:
            raise ValueError(f"unknown grid axis {key!r}; allowed: {_GRID_AXES}")
    axes = [(k, list(dict.fromkeys(grid[k]))) for k in _GRID_AXES if k in grid]
    if not axes:
        raise ValueError("empty hyperparameter grid")
    points = []
    for combo in product(*(vals for _, vals in axes)):
        points.append({k: v for (k, _), v in zip(axes, combo)})
    seen, unique = set(), []
    for p in points:
        key = tuple(sorted(p.items()))
        if key not in seen:
            seen.add(key)
            unique.append(p)
    return unique


def tune(ped: PedFrame, model_spec: HazardModel, config: TrainConfig) -> tuple[
        TrainConfig, HazardModel, list[dict]]:
    """Grid search by validation deviance, with a structured-only pre-fit
    warm start for models that carry random effects."""
    if not config.grid:
        raise ValueError("tune() needs a non-empty config.grid")
    points = _grid_points(config.grid)

    if len(points) == 1:
        best_cfg = config.replace(grid=None, **points[0])
        model, report = fit(ped, model_spec, best_cfg)
        return best_cfg, model, [{**points[0], "val_deviance": report.val_deviance}]

    warm_spec = model_spec
    if model_spec.has_random_effect:
        warm_spec = _pretrain_random_effects(ped, model_spec, config)

    results = []
    best = None
    for point in points:
        cfg = config.replace(grid=None, **point)
        try:
            model, report = fit(ped, warm_spec, cfg)
        except DivergenceError:
            results.append({**point, "val_deviance": float("nan"), "diverged": True})
            continue
        results.append({**point, "val_deviance": report.val_deviance})
        if best is None or report.val_deviance < best[0]:
            best = (report.val_deviance, cfg, model)
    if best is None:
        raise RuntimeError("every grid point diverged")
    return best[1], best[2], results


def _pretrain_random_effects(ped: PedFrame, model_spec: HazardModel,
                             config: TrainConfig) -> HazardModel:
    """Fit the structured part alone (over the lambda_RE axis when given)
    and return a warm-start spec carrying its coefficients."""
    pamm = copy.deepcopy(model_spec)
    pamm.deep = None
    lam_axis = (config.grid or {}).get("lambda_re", [config.lambda_re])
    best = None
    for lam in dict.fromkeys(lam_axis):
        cfg = config.replace(grid=None, lambda_re=lam)
        fitted, report = fit(ped, pamm, cfg)
        if best is None or report.val_deviance < best[0]:
            best = (report.val_deviance, fitted)
    warm = copy.deepcopy(model_spec)
    for target, source in zip(warm.terms, best[1].terms):
        target.coef = source.coef.copy()
        target.basis = source.basis
        target.basis2 = source.basis2
        target.levels = source.levels
    return warm
