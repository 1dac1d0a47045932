"""Feed-forward network (dense -> ELU -> batch norm -> dropout blocks) in numpy.

Parameters live in a flat ``dict[str, ndarray]`` so optimisers, gradient
checks and serialisation can treat them uniformly:

    W{i}, b{i}          dense kernel / bias of hidden block i
    gamma{i}, beta{i}   batch-norm scale / shift of hidden block i
    W_out, b_out        single-unit output layer

Batch-norm running statistics are kept separately in ``state``
(``mean{i}``, ``var{i}``) because they are not trained by gradient descent.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from vo2fit.errors import ConfigurationError, TrainingError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NetworkConfig:
    hidden: tuple = (128, 128)
    activation: str = "elu"
    batch_norm: bool = True
    dropout: float = 0.3
    output: str = "linear"
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3
    elu_alpha: float = 1.0

    def __post_init__(self):
        if self.activation not in ("elu", "linear"):
            raise ConfigurationError(f"unknown activation {self.activation}")
        if self.output not in ("linear", "sigmoid"):
            raise ConfigurationError(f"unknown output {self.output}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if not self.hidden or any(h <= 0 for h in self.hidden):
            raise ConfigurationError("hidden layer widths must be positive")

    @property
    def loss(self) -> str:
        return "mse" if self.output == "linear" else "bce"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


REGRESSOR = NetworkConfig()
CLASSIFIER = NetworkConfig(hidden=(128,), output="sigmoid")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    max_epochs: int = 300
    batch_size: int = 32
    patience: int = 15
    lr_patience: int = 5
    lr_factor: float = 0.1
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("max_epochs", "batch_size", "patience", "lr_patience"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(n_inputs: int, cfg: NetworkConfig, rng: np.random.Generator):
    """Glorot-uniform kernels, zero biases, unit BN scale."""
    params, state = {}, {}
    fan_in = n_inputs
    for i, width in enumerate(cfg.hidden):
        limit = math.sqrt(6.0 / (fan_in + width))
        params[f"W{i}"] = rng.uniform(-limit, limit, (fan_in, width))
        params[f"b{i}"] = np.zeros(width)
        if cfg.batch_norm:
            params[f"gamma{i}"] = np.ones(width)
            params[f"beta{i}"] = np.zeros(width)
            state[f"mean{i}"] = np.zeros(width)
            state[f"var{i}"] = np.ones(width)
        fan_in = width
    limit = math.sqrt(6.0 / (fan_in + 1))
    params["W_out"] = rng.uniform(-limit, limit, (fan_in, 1))
    params["b_out"] = np.zeros(1)
    return params, state


def _elu(z, alpha):
    return np.where(z > 0, z, alpha * np.expm1(np.minimum(z, 0.0)))


def sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def dropout_masks(cfg: NetworkConfig, n_rows: int, rng: np.random.Generator) -> list:
    """Inverted-dropout masks (kept units scaled by 1/(1-p)) for every hidden block."""
    if cfg.dropout == 0:
        return [None] * len(cfg.hidden)
    keep = 1.0 - cfg.dropout
    return [(rng.random((n_rows, w)) < keep) / keep for w in cfg.hidden]


def forward(params, state, cfg: NetworkConfig, X, training=False, masks=None, update_state=False,
            stop_after: int | None = None):
    """Run the network; returns (output, cache).

    In training mode batch norm uses the batch statistics and ``masks`` (one
    per hidden block, or None) are applied.  With ``update_state`` the running
    statistics in ``state`` are updated in place.  ``stop_after=i`` returns the
    activation of hidden block i (after the nonlinearity, before batch norm).

    Any parameter may carry extra leading axes (e.g. a stack of perturbed
    copies, with 1-D parameters shaped (..., 1, width)); rows are always the
    second-to-last axis and outputs broadcast accordingly.
    """
    h = np.asarray(X)
    cache = {"blocks": [], "x": h}
    for i, _ in enumerate(cfg.hidden):
        z = h @ params[f"W{i}"] + params[f"b{i}"]
        a = _elu(z, cfg.elu_alpha) if cfg.activation == "elu" else z
        if stop_after == i:
            return a, cache
        blk = {"h_in": h, "z": z, "a": a}
        if cfg.batch_norm:
            if training:
                mu = a.mean(axis=-2, keepdims=True)
                var = a.var(axis=-2, keepdims=True)
                if update_state:
                    m = cfg.bn_momentum
                    state[f"mean{i}"] = m * state[f"mean{i}"] + (1 - m) * mu.reshape(-1)
                    state[f"var{i}"] = m * state[f"var{i}"] + (1 - m) * var.reshape(-1)
            else:
                mu, var = state[f"mean{i}"], state[f"var{i}"]
            inv_std = 1.0 / np.sqrt(var + cfg.bn_epsilon)
            ahat = (a - mu) * inv_std
            out = params[f"gamma{i}"] * ahat + params[f"beta{i}"]
            blk.update(ahat=ahat, inv_std=inv_std)
        else:
            out = a
        if training and masks is not None and masks[i] is not None:
            out = out * masks[i]
            blk["mask"] = masks[i]
        cache["blocks"].append(blk)
        h = out
    cache["h_last"] = h
    logits = (h @ params["W_out"] + params["b_out"])[..., 0]
    cache["logits"] = logits
    out = logits if cfg.output == "linear" else sigmoid(logits)
    return out, cache


def loss_value(cfg: NetworkConfig, logits, y):
    """Mean loss over the last axis (a float for a single network)."""
    y = np.asarray(y)
    if cfg.loss == "mse":
        out = np.mean((logits - y) ** 2, axis=-1)
    else:
        # binary cross-entropy from logits: softplus(z) - y z
        out = np.mean(np.logaddexp(0.0, logits) - y * logits, axis=-1)
    return out[()]


def backward(params, cfg: NetworkConfig, cache, y, training=True):
    """Gradients of the mean loss w.r.t. every parameter.

    Batch-norm gradients assume the batch statistics were used (training
    mode); with ``training=False`` the running statistics are treated as
    constants.
    """
    y = np.asarray(y, float)
    n = len(y)
    logits = cache["logits"]
    if cfg.loss == "mse":
        dlogit = 2.0 * (logits - y) / n
    else:
        dlogit = (sigmoid(logits) - y) / n
    grads = {}
    h = cache["h_last"]
    grads["W_out"] = h.T @ dlogit[:, None]
    grads["b_out"] = np.array([dlogit.sum()])
    dh = dlogit[:, None] @ params["W_out"].T
    for i in reversed(range(len(cfg.hidden))):
        blk = cache["blocks"][i]
        if "mask" in blk:
            dh = dh * blk["mask"]
        if cfg.batch_norm:
            ahat, inv_std = blk["ahat"], blk["inv_std"]
            grads[f"gamma{i}"] = (dh * ahat).sum(axis=0)
            grads[f"beta{i}"] = dh.sum(axis=0)
            dahat = dh * params[f"gamma{i}"]
            if training:
                m = dh.shape[0]
                da = inv_std / m * (m * dahat - dahat.sum(axis=0) - ahat * (dahat * ahat).sum(axis=0))
            else:
                da = dahat * inv_std
        else:
            da = dh
        if cfg.activation == "elu":
            z = blk["z"]
            dz = da * np.where(z > 0, 1.0, cfg.elu_alpha * np.exp(np.minimum(z, 0.0)))
        else:
            dz = da
        grads[f"W{i}"] = blk["h_in"].T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        dh = dz @ params[f"W{i}"].T
    return grads


def loss_and_gradients(params, cfg: NetworkConfig, X, y, masks=None, state=None):
    """Loss and analytic gradients for one batch.

    Batch norm uses the batch statistics and dropout uses the supplied fixed
    ``masks`` (no dropout when None), so the call is a deterministic function
    of ``params`` and can be checked against finite differences.
    """
    state = state if state is not None else {}
    _, cache = forward(params, state, cfg, X, training=True, masks=masks, update_state=False)
    return loss_value(cfg, cache["logits"], y), backward(params, cfg, cache, y, training=True)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-7):
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.epsilon)


@dataclass
class TrainResult:
    params: dict
    state: dict
    history: list = field(default_factory=list)
    best_epoch: int = 0
    validation_ids: np.ndarray | None = None


def split_validation(n: int, fraction: float, rng: np.random.Generator):
    n_val = int(round(n * fraction))
    if n_val < 1 or n - n_val < 1:
        raise ConfigurationError(f"validation split of {n} rows at fraction {fraction} is empty")
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit_network(X, y, net: NetworkConfig, cfg: TrainConfig) -> TrainResult:
    """Mini-batch Adam with plateau LR decay and early stopping on validation loss.

    The weights with the lowest validation loss are restored at the end.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise TrainingError("training data contains non-finite values")
    if net.loss == "bce" and not np.all((y == 0) | (y == 1)):
        raise TrainingError("classifier labels must be 0/1")
    rng = np.random.default_rng(cfg.seed)
    params, state = init_params(X.shape[1], net, rng)
    tr, va = split_validation(len(y), cfg.validation_fraction, rng)
    Xtr, ytr, Xva, yva = X[tr], y[tr], X[va], y[va]
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)

    best = (math.inf, 0, copy.deepcopy(params), copy.deepcopy(state))
    wait = plateau_wait = 0
    plateau_best = math.inf
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(ytr))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            masks = dropout_masks(net, len(idx), rng)
            _, cache = forward(params, state, net, Xtr[idx], training=True, masks=masks, update_state=True)
            batch_losses.append(loss_value(net, cache["logits"], ytr[idx]) * len(idx))
            grads = backward(params, net, cache, ytr[idx])
            opt.step(params, grads)
        train_loss = float(np.sum(batch_losses) / len(ytr))
        _, vcache = forward(params, state, net, Xva)
        val_loss = loss_value(net, vcache["logits"], yva)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingError(f"non-finite loss at epoch {epoch} (train={train_loss}, val={val_loss}, lr={opt.lr})")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": opt.lr})

        if val_loss < best[0]:
            best = (val_loss, epoch, copy.deepcopy(params), copy.deepcopy(state))
            wait = 0
        else:
            wait += 1
        if val_loss < plateau_best:
            plateau_best, plateau_wait = val_loss, 0
        else:
            plateau_wait += 1
            if plateau_wait >= cfg.lr_patience:
                opt.lr *= cfg.lr_factor
                plateau_wait = 0
        if wait >= cfg.patience:
            break
    _, best_epoch, params, state = best
    log.debug("stopped after %d epochs, best epoch %d", len(history), best_epoch)
    return TrainResult(params=params, state=state, history=history, best_epoch=best_epoch,
                       validation_ids=va)


def predict_network(params, state, net: NetworkConfig, X) -> np.ndarray:
    out, _ = forward(params, state, net, X, training=False)
    if net.output == "sigmoid":
        # keep probabilities strictly inside (0, 1) even for saturated logits
        out = np.clip(out, 1e-15, 1.0 - 1e-15)
    return out


def hidden_activations(params, state, net: NetworkConfig, X, layer: int = -1) -> np.ndarray:
    layer = layer % len(net.hidden)
    a, _ = forward(params, state, net, X, training=False, stop_after=layer)
    return a
