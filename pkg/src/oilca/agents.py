"""Gaussian policies, the policy-aware discriminator, DWBC co-training and BC."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ContractError, TrainingDivergedError, diverged_at
from .numkit import Adam, Mlp, backward, constant, gaussian_logpdf, parameter
from .numkit import tensor as T
from .numkit.checkpoint import read_checkpoint, save_checkpoint

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


class _Normalised:
    """Frozen affine standardisation of state inputs."""

    def _init_norm(self, state_dim):
        self.s_loc = np.zeros((1, state_dim))
        self.s_scale = np.ones((1, state_dim))

    def fit_normalizer(self, states):
        states = np.asarray(states, dtype=float)
        self.s_loc = states.mean(axis=0, keepdims=True)
        self.s_scale = np.maximum(states.std(axis=0, keepdims=True), 1e-6)

    def _norm_s(self, s):
        return (np.asarray(s, dtype=float) - self.s_loc) / self.s_scale


class Policy(_Normalised):
    """State -> diagonal Gaussian over actions, with a state-independent log-std."""

    kind = "policy"

    def __init__(self, state_dim=2, action_dim=2, hidden=(64, 64), rng=None, init_log_std=0.0):
        self.state_dim, self.action_dim = state_dim, action_dim
        self.hidden = tuple(hidden)
        acts = ["tanh"] * len(self.hidden) + ["identity"]
        self.net = Mlp([state_dim, *self.hidden, action_dim], acts, rng=rng, prefix="policy")
        self.log_std = parameter(np.full((1, action_dim), float(init_log_std)), "log_std")
        self._init_norm(state_dim)

    def parameters(self):
        params = self.net.parameters()
        params["log_std"] = self.log_std
        return params

    def mean_graph(self, s):
        return self.net(self._norm_s(s))

    def log_std_graph(self):
        return T.clamp(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def mean_action(self, s) -> np.ndarray:
        return self.net.predict(self._norm_s(np.atleast_2d(s)))

    def __call__(self, states, rng=None):
        return self.mean_action(states)

    def save(self, path, seed=0, step=0):
        tensors = OrderedDict(self.parameters())
        tensors["norm.s_loc"] = self.s_loc
        tensors["norm.s_scale"] = self.s_scale
        save_checkpoint(path, self.kind, tensors, seed=seed, step=step,
                        meta={"hidden": "x".join(map(str, self.hidden))})

    @classmethod
    def load(cls, path):
        header, arrays = read_checkpoint(path)
        hidden = tuple(int(h) for h in header["meta"]["hidden"].split("x")) if header["meta"].get("hidden") else ()
        model = cls(hidden=hidden)
        _restore(path, cls.kind, header, arrays, model.parameters())
        model.s_loc, model.s_scale = arrays["norm.s_loc"], arrays["norm.s_scale"]
        return model, header


class Discriminator(_Normalised):
    """``(s, a, log pi(a|s)) -> d`` with ``d = clip(sigmoid(logit), d_min, d_max)``."""

    kind = "disc"

    def __init__(self, state_dim=2, action_dim=2, hidden=(64, 64), rng=None, d_min=0.1, d_max=0.9):
        if not 0.0 < d_min < d_max < 1.0:
            raise ConfigError("need 0 < d_min < d_max < 1")
        self.state_dim, self.action_dim = state_dim, action_dim
        self.hidden = tuple(hidden)
        self.d_min, self.d_max = d_min, d_max
        acts = ["tanh"] * len(self.hidden) + ["identity"]
        self.net = Mlp([state_dim + action_dim + 1, *self.hidden, 1], acts, rng=rng, prefix="disc")
        self._init_norm(state_dim)

    def parameters(self):
        return self.net.parameters()

    def _inputs(self, s, a, logp):
        return np.concatenate([self._norm_s(s), np.asarray(a, dtype=float),
                               np.asarray(logp, dtype=float).reshape(-1, 1)], axis=1)

    def prob_graph(self, s, a, logp):
        d = T.sigmoid(self.net(self._inputs(s, a, logp)))
        return T.clamp(d, self.d_min, self.d_max)

    def prob(self, s, a, logp) -> np.ndarray:
        logit = self.net.predict(self._inputs(s, a, logp))
        return np.clip(0.5 * (1.0 + np.tanh(0.5 * logit)), self.d_min, self.d_max)

    def save(self, path, seed=0, step=0):
        tensors = OrderedDict(self.parameters())
        tensors["norm.s_loc"] = self.s_loc
        tensors["norm.s_scale"] = self.s_scale
        save_checkpoint(path, self.kind, tensors, seed=seed, step=step,
                        meta={"hidden": "x".join(map(str, self.hidden)), "d_min": self.d_min, "d_max": self.d_max})

    @classmethod
    def load(cls, path):
        header, arrays = read_checkpoint(path)
        meta = header["meta"]
        hidden = tuple(int(h) for h in meta["hidden"].split("x")) if meta.get("hidden") else ()
        model = cls(hidden=hidden, d_min=float(meta["d_min"]), d_max=float(meta["d_max"]))
        _restore(path, cls.kind, header, arrays, model.parameters())
        model.s_loc, model.s_scale = arrays["norm.s_loc"], arrays["norm.s_scale"]
        return model, header


def _restore(path, kind, header, arrays, params):
    from .errors import DimensionError, FormatError
    if header["kind"] != kind:
        raise FormatError(f"{path}: checkpoint kind {header['kind']!r}, expected {kind!r}")
    for name, p in params.items():
        if name not in arrays or arrays[name].shape != p.value.shape:
            got = arrays[name].shape if name in arrays else None
            raise DimensionError(f"{path}: tensor {name} has shape {got}, model expects {p.value.shape}")
        p.value = arrays[name]


def log_prob_graph(policy: Policy, s, a):
    """Per-row log pi(a|s) as a graph tensor of shape (n, 1)."""
    mean = policy.mean_graph(s)
    log_std = policy.log_std_graph()
    return gaussian_logpdf(constant(np.asarray(a, dtype=float)), mean, 2.0 * log_std)


def log_prob(policy: Policy, s, a) -> np.ndarray:
    """Per-row log pi(a|s) as a numpy vector."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    mean = policy.mean_action(s)
    log_std = np.clip(policy.log_std.value, LOG_STD_MIN, LOG_STD_MAX)
    z = (a - mean) / np.exp(log_std)
    return (-0.5 * (z * z + 2.0 * log_std + math.log(2.0 * math.pi))).sum(axis=1)


@dataclass
class DwbcConfig:
    eta: float = 0.5
    alpha: float = 2.0
    d_min: float = 0.1
    d_max: float = 0.9
    disc_update_period: int = 100
    policy_update_period: int = 1
    lr_disc: float = 1e-3
    lr_policy: float = 1e-3
    total_steps: int = 1000
    batch_size: int = 256
    hidden: tuple = (64, 64)

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ConfigError("eta must lie in (0, 1)")
        if not self.alpha > 1.0:
            raise ConfigError("alpha must exceed 1")
        if not 0.0 < self.d_min < self.d_max < 1.0:
            raise ConfigError("need 0 < d_min < d_max < 1")
        if self.disc_update_period < 1 or self.policy_update_period < 1:
            raise ConfigError("update periods must be at least 1")

    def to_dict(self):
        return asdict(self)


def _check_batch(batch, name):
    if len(batch["s"]) == 0:
        raise ContractError(f"{name} batch is empty")


def disc_loss(disc: Discriminator, policy: Policy, expert_batch, unlabeled_batch, eta: float):
    """Positive-unlabeled discriminator objective; gradients reach only ``disc``."""
    _check_batch(expert_batch, "expert")
    _check_batch(unlabeled_batch, "unlabeled")
    lp_e = log_prob(policy, expert_batch["s"], expert_batch["a"])
    lp_u = log_prob(policy, unlabeled_batch["s"], unlabeled_batch["a"])
    d_e = disc.prob_graph(expert_batch["s"], expert_batch["a"], lp_e)
    d_u = disc.prob_graph(unlabeled_batch["s"], unlabeled_batch["a"], lp_u)
    return (eta * T.mean(-1.0 * T.log(d_e))
            + T.mean(-1.0 * T.log(1.0 - d_u))
            - eta * T.mean(-1.0 * T.log(1.0 - d_e)))


def dwbc_weights(d_expert, d_unlabeled, eta, alpha):
    """Per-sample NLL weights of the policy objective: expert ``alpha - eta/(d(1-d))``, unlabeled ``1/(1-d)``."""
    d_expert = np.asarray(d_expert, dtype=float)
    d_unlabeled = np.asarray(d_unlabeled, dtype=float)
    if ((d_expert <= 0) | (d_expert >= 1)).any() or ((d_unlabeled <= 0) | (d_unlabeled >= 1)).any():
        raise AssertionError("discriminator output escaped (0, 1) despite clipping")
    return alpha - eta / (d_expert * (1.0 - d_expert)), 1.0 / (1.0 - d_unlabeled)


def policy_loss(policy: Policy, disc: Discriminator, expert_batch, unlabeled_batch, eta: float, alpha: float):
    """Discriminator-weighted BC objective; ``d`` is a constant here, gradients reach only ``policy``."""
    _check_batch(expert_batch, "expert")
    _check_batch(unlabeled_batch, "unlabeled")
    lp_e = log_prob_graph(policy, expert_batch["s"], expert_batch["a"])
    lp_u = log_prob_graph(policy, unlabeled_batch["s"], unlabeled_batch["a"])
    d_e = disc.prob(expert_batch["s"], expert_batch["a"], lp_e.value[:, 0])
    d_u = disc.prob(unlabeled_batch["s"], unlabeled_batch["a"], lp_u.value[:, 0])
    w_e, w_u = dwbc_weights(d_e, d_u, eta, alpha)
    nll_e = -1.0 * lp_e
    nll_u = -1.0 * lp_u
    return T.mean(nll_e * w_e) + T.mean(nll_u * w_u)


def _sample(data, n, rng):
    idx = rng.integers(0, len(data["s"]), size=n)
    return {"s": data["s"][idx], "a": data["a"][idx]}


def _expert_pairs(data):
    keep = np.isfinite(data["s"]).all(axis=1) & np.isfinite(data["a"]).all(axis=1)
    return {"s": data["s"][keep], "a": data["a"][keep]}


def train_dwbc(expert, unlabeled, cfg: DwbcConfig, rng, eval_hook=None, eval_every=None):
    """Alternating discriminator / policy updates on the configured schedule.

    ``expert`` and ``unlabeled`` are dicts of ``s`` and ``a`` arrays.
    Returns ``(policy, disc, curves)``; ``curves`` is a list of
    ``(step, loss, component)`` rows.
    """
    expert, unlabeled = _expert_pairs(expert), _expert_pairs(unlabeled)
    if len(expert["s"]) == 0 or len(unlabeled["s"]) == 0:
        raise ContractError("train_dwbc needs nonempty expert and unlabeled data")
    policy = Policy(hidden=cfg.hidden, rng=rng)
    disc = Discriminator(hidden=cfg.hidden, rng=rng, d_min=cfg.d_min, d_max=cfg.d_max)
    all_states = np.concatenate([expert["s"], unlabeled["s"]])
    policy.fit_normalizer(all_states)
    disc.fit_normalizer(all_states)
    opt_d = Adam(disc.parameters(), lr=cfg.lr_disc)
    opt_p = Adam(policy.parameters(), lr=cfg.lr_policy)
    curves = []
    counts = {"disc": 0, "policy": 0}
    for step in range(cfg.total_steps):
        eb = _sample(expert, cfg.batch_size, rng)
        ub = _sample(unlabeled, cfg.batch_size, rng)
        if step % cfg.disc_update_period == 0:
            with diverged_at(f"discriminator step {step}"):
                loss = disc_loss(disc, policy, eb, ub, cfg.eta)
                if not math.isfinite(loss.item()):
                    raise TrainingDivergedError(f"discriminator loss diverged at step {step}")
                opt_d.zero_grad()
                backward(loss)
                opt_d.step()
            counts["disc"] += 1
            curves.append((step, loss.item(), "disc"))
        if step % cfg.policy_update_period == 0:
            with diverged_at(f"policy step {step}"):
                loss = policy_loss(policy, disc, eb, ub, cfg.eta, cfg.alpha)
                if not math.isfinite(loss.item()):
                    raise TrainingDivergedError(f"policy loss diverged at step {step}")
                opt_p.zero_grad()
                backward(loss)
                opt_p.step()
            counts["policy"] += 1
            curves.append((step, loss.item(), "policy"))
        if eval_hook is not None and eval_every and (step + 1) % eval_every == 0:
            curves.append((step + 1, float(eval_hook(policy)), "eval_return"))
    policy.update_counts = counts
    return policy, disc, curves


def bc_loss(policy: Policy, batch):
    return -1.0 * T.mean(log_prob_graph(policy, batch["s"], batch["a"]))


def train_bc(data, epochs, rng, batch_size=256, lr=1e-3, steps_per_epoch=None, hidden=(64, 64), curve=None):
    """Maximum-likelihood fit of a Gaussian policy to ``data['s']``, ``data['a']``."""
    data = _expert_pairs(data)
    n = len(data["s"])
    if n == 0:
        raise ContractError("train_bc needs a nonempty dataset")
    policy = Policy(hidden=hidden, rng=rng)
    policy.fit_normalizer(data["s"])
    opt = Adam(policy.parameters(), lr=lr)
    losses = [] if curve is None else curve
    for epoch in range(epochs):
        if steps_per_epoch is None:
            order = rng.permutation(n)
            batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
        else:
            batches = [rng.integers(0, n, size=batch_size) for _ in range(steps_per_epoch)]
        total = 0.0
        for i, idx in enumerate(batches):
            with diverged_at(f"BC epoch {epoch} batch {i}"):
                loss = bc_loss(policy, {"s": data["s"][idx], "a": data["a"][idx]})
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(f"BC loss diverged in epoch {epoch}")
                opt.zero_grad()
                backward(loss)
                opt.step()
            total += value
        losses.append(total / len(batches))
    policy.bc_curve = losses
    return policy
