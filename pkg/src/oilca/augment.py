"""Counterfactual expert-data augmentation.

For an expert transition ``(s, a, s_next, c)`` the fitted CVAE gives a
posterior over the exogenous noise that produced it.  Keeping that noise and
swapping the parents for a pair ``(s~, a~)`` drawn from the unlabeled data
answers "where would the expert's world have gone from here?".  The sampler
policy, trained on the original expert data, labels the resulting state.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .agents import Policy, train_bc
from .datagen import AugmentedRecords, stack_records
from .errors import ConfigError, InsufficientDataError, StalenessError
from .ivae import CvaeModel
from .numkit import child_seed, substream


@dataclass
class AugmentConfig:
    B: int = 0
    batch_size: int = 256
    target_ratio: float | None = None
    parent_source: str = "D_U"

    def __post_init__(self):
        if self.B < 0:
            raise ConfigError("B must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("augmentation batch_size must be at least 1")
        if self.parent_source != "D_U":
            raise ConfigError("counterfactual parents are always drawn from D_U")
        if self.target_ratio is not None and self.target_ratio < 0:
            raise ConfigError("target_ratio must be non-negative")

    def batch_sizes(self, n_expert_records: int, n_unlabeled_records: int) -> list[int]:
        """Sizes of the augmentation batches; the last one may be partial when a ratio is targeted."""
        if self.target_ratio is None:
            return [self.batch_size] * self.B
        wanted = max(0, int(round(self.target_ratio * n_unlabeled_records)) - n_expert_records)
        full, rest = divmod(wanted, self.batch_size)
        return [self.batch_size] * full + ([rest] if rest else [])


@dataclass
class AugmentedPair:
    s_next: np.ndarray
    a_next: np.ndarray
    expert_record: tuple
    parent_record: tuple
    seed: int


def policy_checksum(policy: Policy) -> str:
    h = hashlib.sha256()
    for p in policy.parameters().values():
        h.update(p.value.tobytes())
    h.update(policy.s_loc.tobytes())
    h.update(policy.s_scale.tobytes())
    return h.hexdigest()[:16]


def pretrain_sampler(expert_episodes, epochs, rng, batch_size=256, lr=1e-3, steps_per_epoch=None,
                     hidden=(64, 64)) -> Policy:
    """Behavioural cloning on the original expert data; the result is treated as frozen."""
    data = stack_records(expert_episodes) if not isinstance(expert_episodes, dict) else expert_episodes
    if len(data["s"]) == 0:
        raise InsufficientDataError("the sampler policy needs a nonempty expert set")
    return train_bc(data, epochs, rng, batch_size=batch_size, lr=lr, steps_per_epoch=steps_per_epoch,
                    hidden=hidden)


def counterfactual_arrays(model: CvaeModel, sampler: Policy, expert, parents, rng, box=None, use_posterior=True):
    """Vectorised core: returns ``(s_next~, a_next~, u~)`` arrays.

    ``expert`` holds ``s``, ``a``, ``s_next``, ``c``; ``parents`` holds ``s``, ``a``;
    row ``i`` of each is one counterfactual.  ``use_posterior=False`` draws
    ``u~`` from the class prior instead (an ablation switch).
    """
    n = len(expert["s"])
    if len(parents["s"]) != n:
        raise ConfigError("expert and parent batches must have equal length")
    if use_posterior:
        mu, logvar = model.encode(expert["s"], expert["a"], expert["s_next"], expert["c"])
    else:
        pm, plv = model.prior_params()
        rows = np.asarray(expert["c"], dtype=int) if model.conditional else np.zeros(n, dtype=int)
        mu, logvar = pm[rows], plv[rows]
    u = mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)
    mean, dec_logvar = model.decode(parents["s"], parents["a"], u)
    # sampling path: only the overflow side of the log-variance is clamped
    noise = np.exp(0.5 * np.minimum(dec_logvar, 10.0)) * rng.standard_normal(mean.shape)
    s_next = mean + noise
    if box is not None:
        s_next = np.clip(s_next, box[0], box[1])
    a_next = sampler.mean_action(s_next)
    return s_next, a_next, u


def counterfactual_batch(model: CvaeModel, sampler: Policy, expert_batch, parent_batch, rng, box=None,
                         expected=None) -> list[AugmentedPair]:
    """One augmentation batch as a list of :class:`AugmentedPair`.

    ``expected`` optionally carries ``(cvae_checksum, sampler_checksum)``
    recorded when the frozen models were produced.
    """
    if expected is not None:
        if expected[0] != model.checksum() or expected[1] != policy_checksum(sampler):
            raise StalenessError("frozen model checksum mismatch; re-run train-vae/train-sampler")
    seed = child_seed(rng)
    s_next, a_next, _ = counterfactual_arrays(model, sampler, expert_batch, parent_batch,
                                              substream(seed, "augment"), box=box)
    e_ids = expert_batch.get("episode_id", np.full(len(s_next), -1))
    e_t = expert_batch.get("t", np.full(len(s_next), -1))
    p_ids = parent_batch.get("episode_id", np.full(len(s_next), -1))
    p_t = parent_batch.get("t", np.full(len(s_next), -1))
    return [AugmentedPair(s_next=s_next[i], a_next=a_next[i],
                          expert_record=(int(e_ids[i]), int(e_t[i])),
                          parent_record=(int(p_ids[i]), int(p_t[i])), seed=seed)
            for i in range(len(s_next))]


def _take(data, idx, keys):
    return {k: data[k][idx] for k in keys}


@dataclass
class AugmentedExpert:
    episodes: list
    augmented: AugmentedRecords

    @property
    def n_records(self) -> int:
        return sum(len(e) for e in self.episodes) + len(self.augmented)

    def pairs(self) -> dict:
        """All expert ``(s, a)`` pairs, originals first."""
        orig = stack_records(self.episodes)
        return {"s": np.concatenate([orig["s"], self.augmented.s]),
                "a": np.concatenate([orig["a"], self.augmented.a])}


def augment_expert(expert_episodes, unlabeled_episodes, model: CvaeModel, sampler: Policy, cfg: AugmentConfig, rng,
                   box=None, first_id=None) -> AugmentedExpert:
    """Extend D_E with counterfactual records; originals stay untouched.

    Each counterfactual is a single-step expert record ``(s~_next, a~_next)``.
    Its class is the source expert record's class (bookkeeping only).
    """
    expert_episodes = list(expert_episodes)
    unlabeled_episodes = list(unlabeled_episodes)
    e = stack_records(expert_episodes)
    u = stack_records(unlabeled_episodes)
    sizes = cfg.batch_sizes(len(e["s"]), len(u["s"]))
    if not sizes:
        return AugmentedExpert(expert_episodes, AugmentedRecords.empty())
    if len(e["s"]) == 0 or len(u["s"]) == 0:
        raise InsufficientDataError("augmentation needs nonempty expert and unlabeled data")
    if first_id is None:
        first_id = max(ep.episode_id for ep in expert_episodes + unlabeled_episodes) + 1
    chunks = []
    for size in sizes:
        e_idx = rng.integers(0, len(e["s"]), size=size)
        p_idx = rng.choice(len(u["s"]), size=size, replace=size > len(u["s"]))
        seed = child_seed(rng)
        s_next, a_next, _ = counterfactual_arrays(model, sampler, _take(e, e_idx, ("s", "a", "s_next", "c")),
                                                  _take(u, p_idx, ("s", "a")), substream(seed, "augment"), box=box)
        prov = np.column_stack([e["episode_id"][e_idx], e["t"][e_idx], u["episode_id"][p_idx], u["t"][p_idx],
                                np.full(size, seed)]).astype(np.int64)
        chunks.append((e["c"][e_idx], s_next, a_next, prov))
    total = sum(sizes)
    records = AugmentedRecords(
        episode_id=np.arange(first_id, first_id + total, dtype=np.int64),
        c=np.concatenate([ch[0] for ch in chunks]).astype(np.int64),
        s=np.concatenate([ch[1] for ch in chunks]),
        a=np.concatenate([ch[2] for ch in chunks]),
        provenance=np.concatenate([ch[3] for ch in chunks]))
    return AugmentedExpert(expert_episodes, records)
