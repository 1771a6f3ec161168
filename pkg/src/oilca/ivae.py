"""Identifiable conditional VAE over transitions.

Generative side: ``u | c ~ N(prior_mean[c], exp(prior_logvar[c]))`` and
``s_next = f(s, a, u) + eps`` with Gaussian ``eps`` of learned per-dimension
variance.  Inference side: ``q(u | s, a, s_next, c)`` is a diagonal
Gaussian produced by an MLP that sees every observable.

Inputs are standardised by a frozen affine map fitted once on the training
data.  Both nets work on the move ``s_next - s - a`` rather than on the raw
next state; that is a fixed invertible re-coordinatisation of the same
inputs and keeps the signal from ``u`` on a usable scale.
"""
from __future__ import annotations

import itertools
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import (
    CategoryError,
    ContractError,
    DegenerateVarianceError,
    DimensionError,
    TrainingDivergedError,
    diverged_at,
)
from .numkit import (
    Adam,
    Mlp,
    backward,
    clamp_logvar,
    constant,
    gaussian_logpdf,
    kl_diag_gaussians,
    parameter,
    reparam_sample,
)
from .numkit import tensor as T
from .numkit.checkpoint import load_into, save_checkpoint


@dataclass
class ElboBreakdown:
    recon: float
    logpc: float
    kl: float
    total: float


class CvaeModel:
    def __init__(self, n_classes, d_u=2, state_dim=2, action_dim=2, hidden=(64, 64), activation="tanh",
                 conditional=True, residual=True, rng=None, class_counts=None, dec_logvar_init=math.log(0.01)):
        if d_u < 1:
            raise ContractError("latent dim must be at least 1")
        if n_classes < 1:
            raise ContractError("need at least one class")
        self.n_classes = int(n_classes)
        self.d_u = int(d_u)
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.conditional = bool(conditional)
        self.residual = bool(residual)
        acts = [activation] * len(self.hidden) + ["identity"]
        enc_in = 2 * self.state_dim + self.action_dim + (self.n_classes if self.conditional else 0)
        self.encoder = Mlp([enc_in, *self.hidden, 2 * self.d_u], acts, rng=rng, prefix="encoder")
        self.decoder = Mlp([self.state_dim + self.action_dim + self.d_u, *self.hidden, self.state_dim], acts,
                           rng=rng, prefix="decoder")
        self.dec_logvar = parameter(np.full((1, self.state_dim), dec_logvar_init), "dec_logvar")
        n_rows = self.n_classes if self.conditional else 1
        if rng is not None and self.conditional:
            prior_mean = rng.normal(0.0, 0.1, size=(n_rows, self.d_u))
        else:
            prior_mean = np.zeros((n_rows, self.d_u))
        self.prior_mean = parameter(prior_mean, "prior_mean")
        self.prior_logvar = parameter(np.zeros((n_rows, self.d_u)), "prior_logvar")
        counts = np.ones(self.n_classes) if class_counts is None else np.asarray(class_counts, dtype=float)
        self.log_pc = np.log(counts / counts.sum())
        # frozen input standardisation: (state, action, move) location and scale
        self.norm = {
            "s_loc": np.zeros((1, self.state_dim)), "s_scale": np.ones((1, self.state_dim)),
            "a_loc": np.zeros((1, self.action_dim)), "a_scale": np.ones((1, self.action_dim)),
            "m_loc": np.zeros((1, self.state_dim)), "m_scale": np.ones((1, self.state_dim)),
        }

    # -- bookkeeping -------------------------------------------------------
    def parameters(self):
        params = OrderedDict()
        params.update(self.encoder.parameters())
        params.update(self.decoder.parameters())
        params["dec_logvar"] = self.dec_logvar
        if self.conditional:
            params["prior_mean"] = self.prior_mean
            params["prior_logvar"] = self.prior_logvar
        return params

    def buffers(self):
        out = OrderedDict((f"norm.{k}", v) for k, v in self.norm.items())
        out["log_pc"] = self.log_pc.reshape(1, -1)
        if not self.conditional:
            out["prior_mean"] = self.prior_mean.value
            out["prior_logvar"] = self.prior_logvar.value
        return out

    def fit_normalizer(self, s, a, s_next, c=None):
        s, a, s_next = (np.asarray(v, dtype=float) for v in (s, a, s_next))
        move = self._move(s, a, s_next)

        def loc_scale(x):
            return x.mean(axis=0, keepdims=True), np.maximum(x.std(axis=0, keepdims=True), 1e-6)

        self.norm["s_loc"], self.norm["s_scale"] = loc_scale(s)
        self.norm["a_loc"], self.norm["a_scale"] = loc_scale(a)
        self.norm["m_loc"], self.norm["m_scale"] = loc_scale(move)
        if c is not None:
            counts = np.bincount(np.asarray(c, dtype=int), minlength=self.n_classes).astype(float)
            counts = np.maximum(counts, 1.0)
            self.log_pc = np.log(counts / counts.sum())

    def _move(self, s, a, s_next):
        return s_next - s - a if self.residual else s_next

    def _check_c(self, c):
        c = np.asarray(c, dtype=int).reshape(-1)
        if ((c < 0) | (c >= self.n_classes)).any():
            raise CategoryError(f"class label out of range 0..{self.n_classes - 1}")
        return c

    def _onehot(self, c):
        out = np.zeros((len(c), self.n_classes))
        out[np.arange(len(c)), c] = 1.0
        return out

    # -- model pieces ------------------------------------------------------
    def _encoder_input(self, s, a, s_next, c):
        n = self.norm
        parts = [(s - n["s_loc"]) / n["s_scale"], (a - n["a_loc"]) / n["a_scale"],
                 (self._move(s, a, s_next) - n["m_loc"]) / n["m_scale"]]
        if self.conditional:
            parts.append(self._onehot(c))
        return np.concatenate(parts, axis=1)

    def encode_graph(self, s, a, s_next, c):
        c = self._check_c(c)
        out = self.encoder(self._encoder_input(s, a, s_next, c))
        return out[:, :self.d_u], clamp_logvar(out[:, self.d_u:])

    def encode(self, s_t, a_t, s_next, c):
        """Posterior mean and log-variance as numpy arrays, shape ``(n, d_u)`` each."""
        s_t, a_t, s_next = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (s_t, a_t, s_next))
        c = self._check_c(np.atleast_1d(c))
        out = self.encoder.predict(self._encoder_input(s_t, a_t, s_next, c))
        return out[:, :self.d_u], np.clip(out[:, self.d_u:], -10.0, 10.0)

    def decode_graph(self, s, a, u):
        n = self.norm
        sa = np.concatenate([(s - n["s_loc"]) / n["s_scale"], (a - n["a_loc"]) / n["a_scale"]], axis=1)
        out = self.decoder(T.concat_cols([constant(sa), u]))
        mean = out * n["m_scale"] + n["m_loc"]
        if self.residual:
            mean = mean + (s + a)
        return mean, clamp_logvar(self.dec_logvar)

    def decode(self, s_t, a_t, u):
        """Decoder mean f(s, a, u) and the shared noise log-variance, as numpy arrays."""
        s_t, a_t, u = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (s_t, a_t, u))
        if not (np.isfinite(s_t).all() and np.isfinite(a_t).all() and np.isfinite(u).all()):
            raise ContractError("decode needs finite inputs")
        n = self.norm
        sa = np.concatenate([(s_t - n["s_loc"]) / n["s_scale"], (a_t - n["a_loc"]) / n["a_scale"], u], axis=1)
        mean = self.decoder.predict(sa) * n["m_scale"] + n["m_loc"]
        if self.residual:
            mean = mean + s_t + a_t
        return mean, self.dec_logvar.value.copy()

    def prior_rows(self, c):
        """Prior mean and log-variance rows selected by class (graph tensors)."""
        if not self.conditional:
            n = len(c)
            return constant(np.repeat(self.prior_mean.value, n, axis=0)), \
                constant(np.repeat(self.prior_logvar.value, n, axis=0))
        sel = constant(self._onehot(c))
        return sel @ self.prior_mean, clamp_logvar(sel @ self.prior_logvar)

    def prior_params(self):
        return self.prior_mean.value.copy(), np.clip(self.prior_logvar.value, -10.0, 10.0)

    # -- objective ---------------------------------------------------------
    def elbo_graph(self, batch, rng):
        s, a, s_next = batch["s"], batch["a"], batch["s_next"]
        if len(s) == 0:
            raise ContractError("elbo needs a nonempty batch")
        c = self._check_c(batch["c"])
        mu_q, lv_q = self.encode_graph(s, a, s_next, c)
        u = reparam_sample(mu_q, lv_q, rng)
        mu_x, lv_x = self.decode_graph(s, a, u)
        recon = T.mean(gaussian_logpdf(s_next, mu_x, lv_x))
        mu_p, lv_p = self.prior_rows(c)
        kl = T.mean(kl_diag_gaussians(mu_q, lv_q, mu_p, lv_p))
        logpc = float(self.log_pc[c].mean())
        total = recon - kl + logpc
        return total, recon, kl, logpc

    def save(self, path, seed=0, step=0):
        tensors = OrderedDict(self.parameters())
        tensors.update((k, v) for k, v in self.buffers().items())
        meta = {"d_u": self.d_u, "n_classes": self.n_classes, "conditional": int(self.conditional),
                "hidden": "x".join(map(str, self.hidden)), "activation": self.activation,
                "residual": int(self.residual)}
        save_checkpoint(path, "cvae", tensors, seed=seed, step=step, meta=meta)

    @classmethod
    def load(cls, path):
        from .numkit.checkpoint import read_checkpoint
        header, arrays = read_checkpoint(path)
        meta = header["meta"]
        hidden = tuple(int(h) for h in meta["hidden"].split("x")) if meta.get("hidden") else ()
        model = cls(int(meta["n_classes"]), d_u=int(meta["d_u"]), hidden=hidden, activation=meta["activation"],
                    conditional=bool(int(meta["conditional"])), residual=bool(int(meta["residual"])))
        params = model.parameters()
        load_into_subset(path, "cvae", params, arrays, header)
        for k in model.norm:
            model.norm[k] = arrays[f"norm.{k}"]
        model.log_pc = arrays["log_pc"].reshape(-1)
        if not model.conditional:
            model.prior_mean.value = arrays["prior_mean"]
            model.prior_logvar.value = arrays["prior_logvar"]
        return model, header

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for p in self.parameters().values():
            h.update(p.value.tobytes())
        for v in self.buffers().values():
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()[:16]


def load_into_subset(path, kind, params, arrays, header):
    if header["kind"] != kind:
        raise DimensionError(f"{path}: checkpoint kind {header['kind']!r}, expected {kind!r}")
    for name, p in params.items():
        if name not in arrays:
            raise DimensionError(f"{path}: missing tensor {name}")
        if arrays[name].shape != p.value.shape:
            raise DimensionError(f"{path}: {name} has shape {arrays[name].shape}, model expects {p.value.shape}")
        p.value = arrays[name]


def elbo(model: CvaeModel, batch, rng) -> ElboBreakdown:
    """Single-sample batch-mean ELBO with its parts."""
    total, recon, kl, logpc = model.elbo_graph(batch, rng)
    r, k = recon.item(), kl.item()
    return ElboBreakdown(recon=r, logpc=logpc, kl=k, total=r + logpc - k)


def _subset(data, idx):
    return {k: data[k][idx] for k in ("s", "a", "s_next", "c")}


def train_cvae(model: CvaeModel, data, epochs, batch_size, lr, rng, steps_per_epoch=None, log=None):
    """Maximise the ELBO with Adam.

    ``data`` holds arrays ``s``, ``a``, ``s_next``, ``c``.  An epoch is one
    pass of shuffled minibatches, or ``steps_per_epoch`` minibatches when
    given (for large datasets).  Returns ``(model, curve)`` where ``curve``
    is the mean training ELBO per epoch.
    """
    n = len(data["s"])
    if n == 0:
        raise ContractError("train_cvae needs a nonempty dataset")
    opt = Adam(model.parameters(), lr=lr)
    curve = []
    for epoch in range(epochs):
        if steps_per_epoch is None:
            order = rng.permutation(n)
            batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
        else:
            batches = [rng.integers(0, n, size=batch_size) for _ in range(steps_per_epoch)]
        total_sum = 0.0
        for i, idx in enumerate(batches):
            with diverged_at(f"CVAE epoch {epoch} batch {i}"):
                total, *_ = model.elbo_graph(_subset(data, idx), rng)
                value = total.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(f"ELBO diverged in epoch {epoch}")
                opt.zero_grad()
                backward(-1.0 * total)
                opt.step()
            total_sum += value
        curve.append(total_sum / len(batches))
        if log is not None:
            log(epoch, curve[-1])
    return model, curve


def posterior_sample(model: CvaeModel, s_t, a_t, s_next, c, rng) -> np.ndarray:
    mu, logvar = model.encode(s_t, a_t, s_next, c)
    return mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)


def mcc(u_true, u_est) -> float:
    """Mean absolute Pearson correlation under the best matching of dimensions."""
    u_true = np.asarray(u_true, dtype=float)
    u_est = np.asarray(u_est, dtype=float)
    if u_true.ndim != 2 or u_true.shape != u_est.shape:
        raise DimensionError(f"mcc needs equal (n, d) matrices, got {u_true.shape} and {u_est.shape}")
    d = u_true.shape[1]
    if d > 6:
        raise ContractError("exhaustive permutation search is limited to small latent dims")
    for name, m in (("u_true", u_true), ("u_est", u_est)):
        if (m.std(axis=0) < 1e-12).any():
            raise DegenerateVarianceError(f"{name} has a constant column")
    corr = np.corrcoef(u_true.T, u_est.T)[:d, d:]
    best = max(sum(abs(corr[i, p[i]]) for i in range(d)) for p in itertools.permutations(range(d)))
    return float(best / d)
