"""MLP layers, Gaussian helpers and Adam on top of :mod:`oilca.numkit.tensor`."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, DimensionError
from . import tensor as T
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)
LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0

ACTIVATIONS = ("tanh", "softplus", "identity")

_GRAPH_ACT = {"tanh": T.tanh, "softplus": T.softplus, "identity": lambda x: x}
_NUMPY_ACT = {
    "tanh": np.tanh,
    "softplus": lambda x: np.logaddexp(0.0, x),
    "identity": lambda x: x,
}


class Mlp:
    """Fully connected network with one activation kind per layer."""

    def __init__(self, dims, activations, rng=None, weight_scale=1.0, prefix="net"):
        dims = [int(d) for d in dims]
        if len(dims) < 2:
            raise ContractError("an MLP needs at least input and output dims")
        if len(activations) != len(dims) - 1:
            raise ContractError("one activation per layer is required")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ContractError(f"unknown activation '{act}'")
        self.dims = dims
        self.activations = list(activations)
        self.prefix = prefix
        self.layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, weight_scale / math.sqrt(fan_in), size=(fan_in, fan_out))
            b = np.zeros((1, fan_out))
            self.layers.append((T.parameter(w, f"{prefix}.{i}.W"), T.parameter(b, f"{prefix}.{i}.b")))

    @property
    def in_dim(self):
        return self.dims[0]

    @property
    def out_dim(self):
        return self.dims[-1]

    def parameters(self):
        params = OrderedDict()
        for w, b in self.layers:
            params[w.name] = w
            params[b.name] = b
        return params

    def forward(self, x) -> Tensor:
        """Graph-recording forward pass on a batch (rows are samples)."""
        x = T.constant(x)
        if x.cols != self.in_dim:
            raise DimensionError(f"{self.prefix}: expected {self.in_dim} input columns, got {x.cols}")
        for (w, b), act in zip(self.layers, self.activations):
            x = _GRAPH_ACT[act](x @ w + b)
        return x

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        """Same map as :meth:`forward` in plain numpy, nothing recorded."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"{self.prefix}: expected (n, {self.in_dim}) input, got {x.shape}")
        for (w, b), act in zip(self.layers, self.activations):
            x = _NUMPY_ACT[act](x @ w.value + b.value)
        return x


def gaussian_logpdf(x, mean, logvar) -> Tensor:
    """Per-row diagonal Gaussian log-density, shape (n, 1)."""
    x, mean, logvar = T.constant(x), T.constant(mean), T.constant(logvar)
    if x.shape != mean.shape or (logvar.shape != x.shape and logvar.shape != (1, x.cols)):
        raise DimensionError(f"gaussian_logpdf shapes differ: {x.shape}, {mean.shape}, {logvar.shape}")
    diff = x - mean
    inv_var = T.exp(-logvar)
    per_dim = -0.5 * (T.square(diff) * inv_var + logvar + LOG_2PI)
    return T.row_sum(per_dim)


def kl_diag_gaussians(mean_q, logvar_q, mean_p, logvar_p) -> Tensor:
    """Per-row KL(q || p) between diagonal Gaussians, shape (n, 1)."""
    mean_q, logvar_q = T.constant(mean_q), T.constant(logvar_q)
    mean_p, logvar_p = T.constant(mean_p), T.constant(logvar_p)
    if not (mean_q.shape == logvar_q.shape == mean_p.shape == logvar_p.shape):
        raise DimensionError("kl_diag_gaussians needs four equally shaped inputs")
    diff = mean_q - mean_p
    log_ratio = logvar_q - logvar_p
    per_dim = 0.5 * ((T.exp(log_ratio) - 1.0) - log_ratio + T.square(diff) * T.exp(-logvar_p))
    return T.row_sum(per_dim)


def reparam_sample(mean, logvar, rng) -> Tensor:
    """mean + exp(logvar / 2) * xi with xi ~ N(0, I) from ``rng``."""
    mean, logvar = T.constant(mean), T.constant(logvar)
    if mean.shape != logvar.shape:
        raise DimensionError("reparam_sample needs equally shaped mean and logvar")
    xi = rng.standard_normal(mean.shape)
    return mean + T.exp(0.5 * logvar) * xi


def clamp_logvar(logvar) -> Tensor:
    return T.clamp(T.constant(logvar), LOGVAR_MIN, LOGVAR_MAX)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = OrderedDict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.value)
            self.state.v[name] = np.zeros_like(p.value)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        adam_step(self.state, self.params)


def adam_step(state: AdamState, params, grads=None) -> None:
    """Apply one Adam update in place. ``grads`` defaults to each param's ``.grad``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad if grads is None else grads[name]
        if g is None:
            g = np.zeros_like(p.value)
        if g.shape != p.value.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.value.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.value))
        v = state.v.setdefault(name, np.zeros_like(p.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.value = p.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
