"""Moment-matching loss, score-function gradients and the training loop.

The predicted choice statistics are a Monte Carlo average over K cost draws
from the encoder's distribution and L tie-broken solves per draw.  The CPDL
gradient differentiates the squared moment gap exactly:

    grad = -2 (phi_bar - phi_hat)^T  1/K sum_k phi_k  grad log q(c_k | X)

where ``phi_k`` averages the features of the L solutions for draw k.  Because
every feature lies in [0, 1] the per-sample weights are bounded, which keeps
the estimator variance below a multiple of the Fisher diagonal.

Arrays may carry a leading instance axis, so a whole minibatch is sampled,
solved and back-propagated in one pass.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import Encoder, EncoderTape
from .graph import DiGraph, OdSpec, solve_shortest_paths
from .pref_dist import PrefDistParams, score

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MomentSpec:
    """Sufficient statistics: ``z`` (order 1) or ``[z, triu(z z^T)]`` (order 2)."""

    order: int = 1

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError("moment order must be 1 or 2")

    def n_features(self, n_edges: int) -> int:
        if self.order == 1:
            return n_edges
        return n_edges + n_edges * (n_edges + 1) // 2


def moment_features(z: np.ndarray, spec: MomentSpec) -> np.ndarray:
    """Feature vector of a path indicator (broadcasts over leading axes)."""
    z = np.asarray(z, dtype=np.float64)
    if spec.order == 1:
        return z.copy()
    i, j = np.triu_indices(z.shape[-1])
    return np.concatenate([z, z[..., i] * z[..., j]], axis=-1)


def second_moments(Z: np.ndarray, axis: int | tuple = 0) -> np.ndarray:
    """Packed upper-triangular mean of ``z z^T`` over the given sample axes."""
    Z = np.asarray(Z, dtype=np.float64)
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    axes = tuple(a % Z.ndim for a in axes)
    E = Z.shape[-1]
    keep = [a for a in range(Z.ndim - 1) if a not in axes]
    Zm = np.moveaxis(Z, keep + list(axes), list(range(Z.ndim - 1)))
    Zm = Zm.reshape(tuple(Z.shape[a] for a in keep) + (-1, E))
    outer = np.einsum("...si,...sj->...ij", Zm, Zm) / Zm.shape[-2]
    i, j = np.triu_indices(E)
    return outer[..., i, j]


@dataclass
class TrainConfig:
    K: int = 300
    L: int = 1
    lr0: float = 2.5e-3
    plateau_patience: int = 15
    plateau_rel_tol: float = 0.0331
    lr_decay: float = 0.5
    batch_size: int = 128
    epochs: int = 200
    seed: int = 0
    val_fraction: float = 0.2
    init_scale: float = 1.0
    baseline_decay: float = 0.9

    def __post_init__(self):
        if self.K < 1 or self.L < 1:
            raise ValueError("K and L must be >= 1")
        if not 0.0 < self.lr_decay < 1.0:
            raise ValueError("lr_decay must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.lr0 < 0:
            raise ValueError("invalid batch size, epoch count or learning rate")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    @classmethod
    def cpdl_defaults(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def reinforce_defaults(cls, **overrides) -> "TrainConfig":
        base = dict(K=500, lr0=3e-4, plateau_patience=7, plateau_rel_tol=0.0408)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def for_method(cls, method: str, **overrides) -> "TrainConfig":
        if method == "reinforce":
            return cls.reinforce_defaults(**overrides)
        return cls.cpdl_defaults(**overrides)


@dataclass(eq=False)
class MomentEstimate:
    """Monte Carlo choice statistics and the samples that produced them.

    Attributes:
        phi_hat: (..., F) mean features over all K * L solutions.
        costs: (..., K, E) cost draws.
        paths: (..., K, L, E) solutions, L per cost draw.
        dist: distribution the costs were drawn from.
        tape: encoder tape of the forward pass that produced ``dist``.
    """

    phi_hat: np.ndarray
    costs: np.ndarray
    paths: np.ndarray
    spec: MomentSpec
    dist: PrefDistParams | None = None
    tape: EncoderTape | None = None

    @property
    def K(self) -> int:
        return self.costs.shape[-2]

    @property
    def sample_phi(self) -> np.ndarray:
        """(..., K, F) per-draw features averaged over the L solutions."""
        return moment_features(self.paths, self.spec).mean(axis=-2)

    def weighted_features(self, resid: np.ndarray) -> np.ndarray:
        """``resid^T phi_k`` for every draw k, shape (..., K).

        Order-2 features are contracted as a quadratic form so the packed
        feature array is never materialised.
        """
        Z = self.paths.astype(np.float64)
        E = Z.shape[-1]
        out = np.einsum("...kle,...e->...k", Z, resid[..., :E])
        if self.spec.order == 2:
            U = np.zeros(resid.shape[:-1] + (E, E))
            i, j = np.triu_indices(E)
            U[..., i, j] = resid[..., E:]
            out = out + np.einsum("...kli,...ij,...klj->...k", Z, U, Z)
        return out / Z.shape[-2]


def sample_choices(dist, graph: DiGraph, od: OdSpec, K: int, L: int, rng: np.random.Generator):
    """Draw K costs per context and solve each L times with random tie-breaks."""
    costs = dist.sample(rng, K)
    if isinstance(dist, PrefDistParams) and dist.mu.ndim == 2:
        costs = np.moveaxis(costs, 0, 1)  # (B, K, E)
    E = costs.shape[-1]
    flat = costs.reshape(-1, E)
    paths = np.stack([solve_shortest_paths(graph, flat, od, rng) for _ in range(L)], axis=1)
    return costs, paths.reshape(costs.shape[:-1] + (L, E))


def _phi_hat(paths: np.ndarray, spec: MomentSpec) -> np.ndarray:
    first = paths.mean(axis=(-3, -2), dtype=np.float64)
    if spec.order == 1:
        return first
    return np.concatenate([first, second_moments(paths, axis=(-3, -2))], axis=-1)


def estimate_from_dist(dist, graph, od, K, L, spec, rng) -> MomentEstimate:
    costs, paths = sample_choices(dist, graph, od, K, L, rng)
    return MomentEstimate(_phi_hat(paths, spec), costs, paths, spec, dist=dist)


def estimate_moments(
    model: Encoder,
    theta: np.ndarray,
    X: np.ndarray,
    graph: DiGraph,
    od: OdSpec,
    cfg: TrainConfig,
    spec: MomentSpec,
    rng: np.random.Generator,
) -> MomentEstimate:
    """Forward the encoder on ``X`` ((E, n) or (B, E, n)) and estimate phi_hat."""
    dist, tape = model.forward(theta, X)
    est = estimate_from_dist(dist, graph, od, cfg.K, cfg.L, spec, rng)
    est.tape = tape
    return est


def cpdl_loss(phi_bar: np.ndarray, phi_hat: np.ndarray) -> np.ndarray:
    """Squared Euclidean moment gap; reduces only the last axis."""
    phi_bar = np.asarray(phi_bar, dtype=np.float64)
    phi_hat = np.asarray(phi_hat, dtype=np.float64)
    if phi_bar.shape[-1] != phi_hat.shape[-1]:
        raise ValueError(f"moment length mismatch: {phi_bar.shape[-1]} vs {phi_hat.shape[-1]}")
    return ((phi_bar - phi_hat) ** 2).sum(axis=-1)


def _score_cotangents(est: MomentEstimate, weights: np.ndarray):
    """Contract per-draw weights (..., K) with the per-draw score."""
    dist = est.dist
    d_mu, d_sigma = score(est.costs, PrefDistParams(dist.mu[..., None, :], dist.sigma[..., None, :]))
    return (np.einsum("...k,...ke->...e", weights, d_mu), np.einsum("...k,...ke->...e", weights, d_sigma))


def _n_instances(est: MomentEstimate) -> int:
    return est.costs.shape[0] if est.costs.ndim == 3 else 1


def _check_est(phi_bar, est):
    if est.tape is None or est.dist is None:
        raise ValueError("moment estimate carries no encoder tape")
    if np.shape(phi_bar) != est.phi_hat.shape:
        raise ValueError(f"phi_bar shape {np.shape(phi_bar)} does not match estimate {est.phi_hat.shape}")


def cpdl_gradient(model: Encoder, phi_bar: np.ndarray, est: MomentEstimate) -> np.ndarray:
    """Score-function gradient of the moment loss, averaged over instances."""
    _check_est(phi_bar, est)
    resid = np.asarray(phi_bar, dtype=np.float64) - est.phi_hat
    weights = -2.0 * est.weighted_features(resid) / est.K / _n_instances(est)
    d_mu, d_sigma = _score_cotangents(est, weights)
    return model.backward(est.tape, d_mu, d_sigma)


def cpdl_sample_gradients(model: Encoder, phi_bar: np.ndarray, est: MomentEstimate) -> np.ndarray:
    """Single-draw gradient contributions (K, P) for one instance.

    Row k is ``-2 (phi_bar - phi_hat)^T phi_k grad log q(c_k)``; their mean is
    :func:`cpdl_gradient`.
    """
    _check_est(phi_bar, est)
    if est.costs.ndim != 2:
        raise ValueError("per-sample gradients need a single-instance estimate")
    resid = np.asarray(phi_bar, dtype=np.float64) - est.phi_hat
    w = -2.0 * est.weighted_features(resid)
    d_mu, d_sigma = score(est.costs, est.dist)
    return model.backward(est.tape, w[:, None] * d_mu, w[:, None] * d_sigma)


def score_gradients(model: Encoder, est: MomentEstimate) -> np.ndarray:
    """(K, P) matrix of ``grad_theta log q(c_k | X)`` for one instance."""
    if est.costs.ndim != 2:
        raise ValueError("score gradients need a single-instance estimate")
    d_mu, d_sigma = score(est.costs, est.dist)
    return model.backward(est.tape, d_mu, d_sigma)


@dataclass
class BaselineState:
    """Exponential moving average of per-sample REINFORCE losses."""

    value: float = 0.0
    decay: float = 0.9

    def update(self, batch_mean_loss: float) -> None:
        self.value = self.decay * self.value + (1.0 - self.decay) * float(batch_mean_loss)


def reinforce_losses(phi_bar: np.ndarray, est: MomentEstimate) -> np.ndarray:
    """Per-draw losses ``||phi_bar - phi_k||^2``, shape (..., K)."""
    phi_bar = np.asarray(phi_bar, dtype=np.float64)
    if est.costs.ndim == 2:
        return cpdl_loss(phi_bar, est.sample_phi)
    # loop over instances keeps order-2 feature arrays small
    out = np.empty(est.costs.shape[:2])
    for b in range(out.shape[0]):
        phi_k = moment_features(est.paths[b], est.spec).mean(axis=-2)
        out[b] = cpdl_loss(phi_bar[b], phi_k)
    return out


def reinforce_gradient(
    model: Encoder,
    phi_bar: np.ndarray,
    est: MomentEstimate,
    baseline: BaselineState,
) -> np.ndarray:
    """REINFORCE gradient with a moving-average baseline.

    Uses the baseline's current value, then folds this batch's mean
    per-sample loss into it (the state is updated in place).
    """
    _check_est(phi_bar, est)
    losses = reinforce_losses(phi_bar, est)
    weights = (losses - baseline.value) / est.K / _n_instances(est)
    d_mu, d_sigma = _score_cotangents(est, weights)
    grad = model.backward(est.tape, d_mu, d_sigma)
    baseline.update(losses.mean())
    return grad


class Adam:
    def __init__(self, n_params: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - lr * m_hat / (np.sqrt(v_hat) + self.eps)


class PlateauSchedule:
    """Multiply the learning rate by ``decay`` after ``patience`` stale epochs.

    An epoch counts as an improvement when the loss drops below
    ``best * (1 - rel_tol)``.
    """

    def __init__(self, lr: float, patience: int, rel_tol: float, decay: float):
        self.lr = lr
        self.patience = patience
        self.rel_tol = rel_tol
        self.decay = decay
        self.best = np.inf
        self.stale = 0

    def step(self, loss: float) -> float:
        if loss < self.best * (1.0 - self.rel_tol):
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.decay
                self.stale = 0
        return self.lr


@dataclass
class Observation:
    """What the learner sees for one context: features and observed moments."""

    X: np.ndarray
    phi_bar: np.ndarray


@dataclass
class TrainResult:
    theta: np.ndarray
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = np.inf
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def initial_params(model: Encoder, cfg: TrainConfig) -> np.ndarray:
    """Parameters :func:`train` starts from when no ``theta0`` is given."""
    return model.init(_stream(cfg.seed, 1), cfg.init_scale)


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/validation split by instance."""
    perm = _stream(seed, 0).permutation(n)
    n_val = int(round(n * val_fraction))
    if n > 1:
        n_val = min(max(n_val, 1 if val_fraction > 0 else 0), n - 1)
    else:
        n_val = 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def mean_loss(model, theta, data, graph, od, cfg, spec, rng) -> float:
    """Mean moment loss over ``data`` (a list of observations)."""
    if not data:
        raise ValueError("empty evaluation set")
    total = 0.0
    for start in range(0, len(data), cfg.batch_size):
        chunk = data[start : start + cfg.batch_size]
        X = np.stack([o.X for o in chunk])
        phi_bar = np.stack([o.phi_bar for o in chunk])
        est = estimate_moments(model, theta, X, graph, od, cfg, spec, rng)
        total += cpdl_loss(phi_bar, est.phi_hat).sum()
    return total / len(data)


def train(
    model: Encoder,
    data: list[Observation],
    graph: DiGraph,
    od: OdSpec,
    cfg: TrainConfig,
    method: str = "cpdl",
    spec: MomentSpec = MomentSpec(1),
    theta0: np.ndarray | None = None,
) -> TrainResult:
    """Minibatch training with Adam and a plateau learning-rate schedule.

    Random streams derive from ``cfg.seed``: the split, parameter init, a
    fixed validation stream (common random numbers across epochs) and one
    stream per (epoch, batch).  Returns the best-validation parameters,
    counting the initial parameters as epoch 0.
    """
    if method not in ("cpdl", "reinforce"):
        raise ValueError(f"unknown training method {method!r}")
    if not data:
        raise ValueError("empty dataset")
    F = spec.n_features(graph.n_edges)
    for o in data:
        if o.phi_bar.shape != (F,):
            raise ValueError(f"observed moments have shape {o.phi_bar.shape}, expected ({F},)")

    train_idx, val_idx = split_indices(len(data), cfg.val_fraction, cfg.seed)
    train_set = [data[i] for i in train_idx]
    val_set = [data[i] for i in val_idx] or train_set

    theta = initial_params(model, cfg) if theta0 is None else np.array(theta0, dtype=np.float64)
    opt = Adam(model.n_params)
    sched = PlateauSchedule(cfg.lr0, cfg.plateau_patience, cfg.plateau_rel_tol, cfg.lr_decay)
    baseline = BaselineState(decay=cfg.baseline_decay)

    def validate(th):
        loss = mean_loss(model, th, val_set, graph, od, cfg, spec, _stream(cfg.seed, 2))
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite validation loss {loss}")
        return loss

    t0 = time.perf_counter()
    val0 = validate(theta)
    result = TrainResult(theta=theta.copy(), best_epoch=0, best_val_loss=val0, train_idx=train_idx, val_idx=val_idx)
    result.history.append(dict(epoch=0, train_loss=np.nan, val_loss=val0, lr=sched.lr, wall_time_ms=0.0))
    sched.step(val0)

    for epoch in range(1, cfg.epochs + 1):
        order = _stream(cfg.seed, 3, epoch).permutation(len(train_set))
        losses = []
        lr = sched.lr
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_set[i] for i in order[start : start + cfg.batch_size]]
            X = np.stack([o.X for o in batch])
            phi_bar = np.stack([o.phi_bar for o in batch])
            est = estimate_moments(model, theta, X, graph, od, cfg, spec, _stream(cfg.seed, 4, epoch, b))
            batch_loss = cpdl_loss(phi_bar, est.phi_hat)
            if not np.all(np.isfinite(batch_loss)):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}, batch {b}")
            losses.append(batch_loss)
            if method == "cpdl":
                grad = cpdl_gradient(model, phi_bar, est)
            else:
                grad = reinforce_gradient(model, phi_bar, est, baseline)
            if not np.all(np.isfinite(grad)):
                raise FloatingPointError(f"non-finite gradient at epoch {epoch}, batch {b}")
            theta = opt.step(theta, grad, lr)

        val = validate(theta)
        train_loss = float(np.concatenate(losses).mean())
        result.history.append(
            dict(epoch=epoch, train_loss=train_loss, val_loss=val, lr=lr, wall_time_ms=1e3 * (time.perf_counter() - t0))
        )
        if val < result.best_val_loss:
            result.best_val_loss = val
            result.best_epoch = epoch
            result.theta = theta.copy()
        sched.step(val)
        log.debug("epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss, val, lr)
    return result


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "wall_time_ms")


def write_history(path, history: list[dict]) -> None:
    """One CSV row per epoch; keys beyond the standard columns are appended."""
    extra = [k for k in (history[0] if history else {}) if k not in HISTORY_COLUMNS]
    columns = list(HISTORY_COLUMNS) + extra
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in columns})


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
