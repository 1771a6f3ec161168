"""2D navigation with class-conditioned exogenous noise.

The agent moves in a bounding box towards a target.  Each step, a fresh
exogenous sample ``u ~ N(mu(c), diag(sigma2(c)))`` is pushed through a
fixed, randomly initialised transition network together with the current
state and action.  ``u`` is latent: episodes store only what an offline
learner would see.

The transition is residual::

    s_next = clip(s + a + scale * (A @ u + g(s, a, u)), box)

where ``A`` is a random well-conditioned 2x2 mixing matrix and ``g`` a
softplus MLP whose Lipschitz constant in ``u`` is held below the smallest
singular value of ``A``.  That keeps ``u -> s_next`` injective for every
``(s, a)`` away from the walls, which is what makes ``u`` recoverable.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CategoryError, ContractError, NumericError
from .numkit import Mlp, substream

STATE_DIM = 2
ACTION_DIM = 2
LATENT_DIM = 2


@dataclass(frozen=True)
class EnvSpec:
    n_classes: int = 3
    alpha: float = 2.0
    gamma: tuple = (0, 1, 2)
    sigma2: tuple = ((1.0, 1.0), (1.0, 1.0), (1.0, 1.0))
    step_size: float = 1.0
    box_low: tuple = (-10.0, -10.0)
    box_high: tuple = (10.0, 10.0)
    target: tuple = (0.0, 0.0)
    episode_len: int = 500
    transition_seed: int = 7
    noise_scale: float = 0.1
    mix_strength: float = 0.9

    def __post_init__(self):
        if self.n_classes < 2:
            raise ContractError("n_classes must be at least 2")
        if sorted(self.gamma) != list(range(self.n_classes)):
            raise ContractError(f"gamma must be a permutation of 0..{self.n_classes - 1}")
        sig = np.asarray(self.sigma2, dtype=float)
        if sig.shape != (self.n_classes, LATENT_DIM) or (sig <= 0).any():
            raise ContractError("sigma2 must hold a positive 2-vector per class")
        lo, hi, tgt = (np.asarray(v, dtype=float) for v in (self.box_low, self.box_high, self.target))
        if not (lo < hi).all():
            raise ContractError("box_low must be below box_high componentwise")
        if not ((tgt >= lo) & (tgt <= hi)).all():
            raise ContractError("target must lie inside the box")
        if self.step_size <= 0 or self.episode_len < 1:
            raise ContractError("step_size and episode_len must be positive")
        if not 0.0 <= self.mix_strength < 1.0:
            raise ContractError("mix_strength must lie in [0, 1)")

    @property
    def low(self):
        return np.asarray(self.box_low, dtype=float)

    @property
    def high(self):
        return np.asarray(self.box_high, dtype=float)

    def class_means(self) -> np.ndarray:
        """Row c is mu(c) = (0, alpha * gamma(c))."""
        means = np.zeros((self.n_classes, LATENT_DIM))
        means[:, 1] = self.alpha * np.asarray(self.gamma, dtype=float)
        return means

    def class_vars(self) -> np.ndarray:
        return np.asarray(self.sigma2, dtype=float)

    def to_dict(self) -> dict:
        return asdict(self)

    def spec_hash(self) -> str:
        text = repr(sorted((k, repr(v)) for k, v in self.to_dict().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def make_env_spec(seed: int = 0, **overrides) -> EnvSpec:
    """Draw gamma and sigma2 from the ``env`` substream, then apply overrides."""
    n_classes = overrides.get("n_classes", EnvSpec.n_classes)
    rng = substream(seed, "env")
    gamma = tuple(int(g) for g in rng.permutation(n_classes))
    sigma2 = tuple(tuple(float(x) for x in row) for row in rng.uniform(0.25, 2.0, size=(n_classes, LATENT_DIM)))
    fields = {"gamma": gamma, "sigma2": sigma2}
    fields.update(overrides)
    return EnvSpec(**fields)


class TransitionNet:
    """Frozen ground-truth transition; identical for identical ``transition_seed``."""

    hidden = 32

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        rng = substream(spec.transition_seed, "transition")
        while True:
            mix = rng.normal(size=(LATENT_DIM, LATENT_DIM))
            sv = np.linalg.svd(mix, compute_uv=False)
            if sv[-1] / sv[0] > 0.3:
                break
        self.mix = mix / sv[0] * math.sqrt(2.0)
        self.mlp = Mlp([STATE_DIM + ACTION_DIM + LATENT_DIM, self.hidden, self.hidden, STATE_DIM],
                       ["softplus", "softplus", "identity"], rng=rng, weight_scale=2.0, prefix="transition")
        for i, (w, b) in enumerate(self.mlp.layers):
            b.value = rng.normal(0.0, 0.5, size=b.value.shape)
        # scale g so its u-Jacobian stays below mix_strength * sigma_min(mix) on a wide probe set
        probe = np.concatenate([
            rng.uniform(-1.0, 1.0, size=(4096, STATE_DIM)),
            rng.uniform(-1.0, 1.0, size=(4096, ACTION_DIM)),
            rng.uniform(-8.0, 12.0, size=(4096, LATENT_DIM)),
        ], axis=1)
        lip = np.linalg.norm(self._mlp_u_jacobian(probe), ord=2, axis=(1, 2)).max()
        target_lip = spec.mix_strength * np.linalg.svd(self.mix, compute_uv=False)[-1]
        w2 = self.mlp.layers[2][0]
        w2.value = w2.value * (target_lip / lip)
        self.mlp_offset = self.mlp.predict(np.zeros((1, self.mlp.in_dim)))

    def _mlp_u_jacobian(self, x) -> np.ndarray:
        (w0, b0), (w1, b1), (w2, _) = ((w.value, b.value) for w, b in self.mlp.layers)
        z0 = x @ w0 + b0
        h0 = np.logaddexp(0.0, z0)
        z1 = h0 @ w1 + b1
        sig0 = 0.5 * (1.0 + np.tanh(0.5 * z0))
        sig1 = 0.5 * (1.0 + np.tanh(0.5 * z1))
        wu = w0[STATE_DIM + ACTION_DIM:]
        # J[n] = w2^T diag(sig1) w1^T diag(sig0) wu^T
        inner = sig0[:, :, None] * wu.T[None]
        mid = np.einsum("hk,nhd->nkd", w1, inner) * sig1[:, :, None]
        return np.einsum("ko,nkd->nod", w2, mid)

    def inputs(self, s, a, u) -> np.ndarray:
        spec = self.spec
        centre = 0.5 * (spec.low + spec.high)
        half = 0.5 * (spec.high - spec.low)
        return np.concatenate([(s - centre) / half, a / spec.step_size, u], axis=1)

    def displacement(self, s, a, u) -> np.ndarray:
        """Exogenous part of the move, before scaling: A u + g(s, a, u)."""
        return u @ self.mix.T + self.mlp.predict(self.inputs(s, a, u)) - self.mlp_offset

    def forward(self, s, a, u) -> np.ndarray:
        """Unclipped next state for batched ``(n, 2)`` inputs."""
        spec = self.spec
        a = np.clip(a, -spec.step_size, spec.step_size)
        return s + a + spec.noise_scale * self.displacement(s, a, u)

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.mix.tobytes())
        for w, b in self.mlp.layers:
            h.update(w.value.tobytes())
            h.update(b.value.tobytes())
        return h.hexdigest()[:16]


def _check_class(spec, c):
    c = np.asarray(c)
    if ((c < 0) | (c >= spec.n_classes)).any():
        raise CategoryError(f"class label out of range 0..{spec.n_classes - 1}: {c}")
    return c.astype(int)


def sample_exogenous(spec: EnvSpec, c, rng) -> np.ndarray:
    """Draw u | c. ``c`` may be a scalar (returns a 2-vector) or an array (returns (n, 2))."""
    scalar = np.ndim(c) == 0
    c = _check_class(spec, np.atleast_1d(c))
    mean = spec.class_means()[c]
    std = np.sqrt(spec.class_vars()[c])
    u = mean + std * rng.standard_normal(mean.shape)
    return u[0] if scalar else u


def step(spec: EnvSpec, net: TransitionNet, s, a, u) -> np.ndarray:
    """Next state for single 2-vectors ``s``, ``a``, ``u``."""
    s, a, u = (np.asarray(v, dtype=float).reshape(1, -1) for v in (s, a, u))
    return step_batch(spec, net, s, a, u)[0]


def step_batch(spec: EnvSpec, net: TransitionNet, s, a, u) -> np.ndarray:
    if not (np.isfinite(s).all() and np.isfinite(a).all() and np.isfinite(u).all()):
        raise NumericError("non-finite input to the transition")
    return np.clip(net.forward(s, a, u), spec.low, spec.high)


def reward(spec: EnvSpec, s) -> np.ndarray | float:
    d = np.asarray(s, dtype=float) - np.asarray(spec.target, dtype=float)
    r = -np.sqrt((d * d).sum(axis=-1))
    return float(r) if np.ndim(r) == 0 else r


@dataclass
class EnvState:
    s: np.ndarray
    t: int
    c: int


def reset(spec: EnvSpec, c, rng) -> EnvState:
    c = int(_check_class(spec, c))
    return EnvState(s=rng.uniform(spec.low, spec.high), t=0, c=c)


def reset_batch(spec: EnvSpec, n: int, rng) -> np.ndarray:
    return rng.uniform(spec.low, spec.high, size=(n, STATE_DIM))


@dataclass
class Episode:
    """One trajectory.  Arrays are row-aligned by time step."""

    episode_id: int
    c: int
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r: np.ndarray
    u: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.r)

    @property
    def ret(self) -> float:
        return float(np.sum(self.r))

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (self.episode_id == other.episode_id and self.c == other.c
                and all(np.array_equal(getattr(self, k), getattr(other, k), equal_nan=True)
                        for k in ("s", "a", "s_next", "r")))


def rollout_batch(spec: EnvSpec, net: TransitionNet, policy, classes, rng, first_id=0, horizon=None,
                  keep_latent=False) -> list[Episode]:
    """Run one episode per entry of ``classes`` in lockstep.

    ``policy(states, rng) -> actions`` acts on an ``(n, 2)`` batch.
    """
    classes = _check_class(spec, np.asarray(classes))
    n = len(classes)
    horizon = spec.episode_len if horizon is None else horizon
    s = reset_batch(spec, n, rng)
    S = np.empty((horizon, n, STATE_DIM))
    A = np.empty((horizon, n, ACTION_DIM))
    U = np.empty((horizon, n, LATENT_DIM))
    for t in range(horizon):
        a = np.asarray(policy(s, rng), dtype=float)
        u = sample_exogenous(spec, classes, rng)
        S[t], A[t], U[t] = s, a, u
        s = step_batch(spec, net, s, a, u)
    S_next = np.concatenate([S[1:], s[None]], axis=0)
    R = reward(spec, S_next)
    episodes = []
    for i in range(n):
        episodes.append(Episode(
            episode_id=first_id + i, c=int(classes[i]),
            s=S[:, i].copy(), a=A[:, i].copy(), s_next=S_next[:, i].copy(), r=R[:, i].copy(),
            u=U[:, i].copy() if keep_latent else None))
    return episodes


def rollout(spec: EnvSpec, net: TransitionNet, policy, c, rng, episode_id=0, keep_latent=False) -> Episode:
    return rollout_batch(spec, net, policy, [c], rng, first_id=episode_id, keep_latent=keep_latent)[0]
