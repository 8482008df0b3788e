"""Feature-to-distribution encoders with exact reverse-mode gradients.

An encoder is applied row-wise to a feature matrix ``X`` of shape
(..., E, n) and returns per-edge log-normal parameters.  Parameters live in
a flat float64 vector so the optimizer never needs to know the layout.

``backward`` accepts cotangents shaped like ``mu`` (one gradient) or with an
extra leading axis (one gradient per cotangent row), which the variance
diagnostics use to obtain per-sample score gradients in a single pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .pref_dist import SIGMA_FLOOR, PrefDistParams


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(eq=False)
class EncoderTape:
    """Activations cached by one forward pass; usable by one backward call."""

    lead_shape: tuple
    X: np.ndarray
    pre_scale: np.ndarray
    params: list
    hidden: list = field(default_factory=list)
    consumed: bool = False

    def take(self):
        if self.consumed:
            raise RuntimeError("tape already consumed by a backward call")
        self.consumed = True


def _rows(X, n):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2 or X.shape[-1] != n:
        raise ValueError(f"expected features of shape (..., E, {n}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    return X.shape[:-1], X.reshape(-1, n)


def _cotangents(tape, d_mu, d_sigma):
    """Flatten cotangents to (..., R); returns (extra batch shape, d_mu, d_sigma)."""
    d_mu = np.asarray(d_mu, dtype=np.float64)
    d_sigma = np.asarray(d_sigma, dtype=np.float64)
    lead = tape.lead_shape
    if d_mu.shape != d_sigma.shape:
        raise ValueError("d_mu and d_sigma shapes differ")
    if d_mu.shape[d_mu.ndim - len(lead):] != lead:
        raise ValueError(f"cotangent shape {d_mu.shape} does not match outputs {lead}")
    extra = d_mu.shape[: d_mu.ndim - len(lead)]
    if len(extra) > 1:
        raise ValueError("at most one extra batch axis is supported")
    R = tape.X.shape[0]
    return extra, d_mu.reshape(extra + (R,)), d_sigma.reshape(extra + (R,))


class MLPEncoder:
    """Row-wise MLP ``n -> 32 -> 32 -> 2`` with tanh hidden units.

    Output 0 is the location; output 1 passes through softplus and is shifted
    by ``sigma_floor`` to give the scale.
    """

    kind = "mlp"

    def __init__(self, n: int, hidden: tuple[int, ...] = (32, 32), sigma_floor: float = SIGMA_FLOOR):
        if n < 1:
            raise ValueError("feature dimension must be >= 1")
        self.n = n
        self.hidden = tuple(hidden)
        self.sigma_floor = sigma_floor
        self.layer_sizes = (n,) + self.hidden + (2,)
        self._shapes = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self._shapes += [(fan_in, fan_out), (fan_out,)]
        self.n_params = sum(int(np.prod(s)) for s in self._shapes)

    def init(self, rng: np.random.Generator, init_scale: float = 1.0) -> np.ndarray:
        """Uniform(+-init_scale/sqrt(fan_in)) weights, zero biases."""
        parts = []
        for shape in self._shapes:
            if len(shape) == 2:
                bound = init_scale / np.sqrt(shape[0])
                parts.append(rng.uniform(-bound, bound, size=shape).ravel())
            else:
                parts.append(np.zeros(shape))
        return np.concatenate(parts)

    def unflatten(self, theta: np.ndarray) -> list[np.ndarray]:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        out, i = [], 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            out.append(theta[i : i + size].reshape(shape))
            i += size
        return out

    def forward(self, theta: np.ndarray, X: np.ndarray) -> tuple[PrefDistParams, EncoderTape]:
        lead, A = _rows(X, self.n)
        params = self.unflatten(theta)
        tape = EncoderTape(lead_shape=lead, X=A, pre_scale=None, params=params)
        h = A
        for W, b in zip(params[0:-2:2], params[1:-2:2]):
            h = np.tanh(h @ W + b)
            tape.hidden.append(h)
        out = h @ params[-2] + params[-1]
        tape.pre_scale = out[:, 1]
        mu = out[:, 0].reshape(lead)
        sigma = (softplus(out[:, 1]) + self.sigma_floor).reshape(lead)
        return PrefDistParams(mu, sigma), tape

    def backward(self, tape: EncoderTape, d_mu, d_sigma) -> np.ndarray:
        """Gradient of ``sum(d_mu * mu + d_sigma * sigma)`` w.r.t. ``theta``."""
        extra, d_mu, d_sigma = _cotangents(tape, d_mu, d_sigma)
        tape.take()
        delta = np.stack([d_mu, d_sigma * _sigmoid(tape.pre_scale)], axis=-1)
        inputs = [tape.X] + tape.hidden
        weights = tape.params[0::2]
        grads = []
        for layer in range(len(weights) - 1, -1, -1):
            a = inputs[layer]
            grads.append(delta.sum(axis=-2))
            grads.append(np.einsum("ri,...rj->...ij", a, delta))
            if layer > 0:
                delta = (delta @ weights[layer].T) * (1.0 - a**2)
        grads.reverse()
        return np.concatenate([g.reshape(extra + (-1,)) for g in grads], axis=-1)

    def config(self) -> dict:
        return {"kind": self.kind, "n": self.n, "layer_sizes": list(self.layer_sizes), "sigma_floor": self.sigma_floor}


class LinearEncoder:
    """``mu = X @ beta_mu``, ``sigma = softplus(X @ beta_sigma) + floor``; 2n parameters."""

    kind = "linear"

    def __init__(self, n: int, sigma_floor: float = SIGMA_FLOOR):
        if n < 1:
            raise ValueError("feature dimension must be >= 1")
        self.n = n
        self.sigma_floor = sigma_floor
        self.layer_sizes = (n, 2)
        self.n_params = 2 * n

    def init(self, rng: np.random.Generator, init_scale: float = 1.0) -> np.ndarray:
        bound = init_scale / np.sqrt(self.n)
        return rng.uniform(-bound, bound, size=2 * self.n)

    def forward(self, theta: np.ndarray, X: np.ndarray) -> tuple[PrefDistParams, EncoderTape]:
        lead, A = _rows(X, self.n)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        pre = A @ theta[self.n :]
        tape = EncoderTape(lead_shape=lead, X=A, pre_scale=pre, params=[theta])
        mu = (A @ theta[: self.n]).reshape(lead)
        sigma = (softplus(pre) + self.sigma_floor).reshape(lead)
        return PrefDistParams(mu, sigma), tape

    def backward(self, tape: EncoderTape, d_mu, d_sigma) -> np.ndarray:
        extra, d_mu, d_sigma = _cotangents(tape, d_mu, d_sigma)
        tape.take()
        g_mu = d_mu @ tape.X
        g_sigma = (d_sigma * _sigmoid(tape.pre_scale)) @ tape.X
        return np.concatenate([g_mu, g_sigma], axis=-1)

    def config(self) -> dict:
        return {"kind": self.kind, "n": self.n, "layer_sizes": list(self.layer_sizes), "sigma_floor": self.sigma_floor}


Encoder = MLPEncoder | LinearEncoder


def linear_variant(n: int, sigma_floor: float = SIGMA_FLOOR) -> LinearEncoder:
    return LinearEncoder(n, sigma_floor)


def make_encoder(kind: str, n: int, sigma_floor: float = SIGMA_FLOOR) -> Encoder:
    if kind == "mlp":
        return MLPEncoder(n, sigma_floor=sigma_floor)
    if kind == "linear":
        return LinearEncoder(n, sigma_floor=sigma_floor)
    raise ValueError(f"unknown encoder kind {kind!r}")


def checkpoint_dict(model: Encoder, theta: np.ndarray, seed: int | None = None, **extra) -> dict:
    out = model.config()
    out["flat_params"] = [float(v) for v in theta]
    out["seed"] = seed
    out.update(extra)
    return out


def save_checkpoint(path, model: Encoder, theta: np.ndarray, seed: int | None = None, **extra) -> None:
    with open(path, "w") as f:
        json.dump(checkpoint_dict(model, theta, seed, **extra), f, indent=1)
        f.write("\n")


def load_checkpoint(path) -> tuple[Encoder, np.ndarray, dict]:
    with open(path) as f:
        data = json.load(f)
    model = make_encoder(data.get("kind", "mlp"), data["n"], data["sigma_floor"])
    if list(model.layer_sizes) != data["layer_sizes"]:
        raise ValueError(f"layer sizes {data['layer_sizes']} do not match {model.layer_sizes}")
    theta = np.array(data["flat_params"], dtype=np.float64)
    if theta.shape != (model.n_params,):
        raise ValueError("checkpoint parameter count mismatch")
    return model, theta, data
