"""Config-driven stage functions shared by the experiments and the CLI.

Each stage draws from its own named substream of the run seed, so a stage
run in a separate process sees exactly the numbers it would see in-process.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agents import DwbcConfig, Policy, train_bc, train_dwbc
from .augment import AugmentConfig, AugmentedExpert, augment_expert, pretrain_sampler
from .config import RunConfig, parse_mixture
from .datagen import collect, label_split, stack_records
from .errors import ConfigError, InsufficientDataError
from .ivae import CvaeModel, train_cvae
from .numkit import substream
from .toyenv import EnvSpec, TransitionNet, make_env_spec

ALGOS = ("bc-exp", "bc-all", "dwbc", "oilca")

# stream extras, one per trainable thing
_AGENT_STREAM = {"sampler": 0, "bc-exp": 1, "bc-all": 2, "dwbc": 3, "oilca": 3}


def build_env(cfg: RunConfig) -> tuple[EnvSpec, TransitionNet]:
    e = cfg["env"]
    spec = make_env_spec(
        e["spec_seed"], n_classes=e["n_classes"], alpha=e["alpha"], step_size=e["step_size"],
        box_low=e["box_low"], box_high=e["box_high"], target=e["target"], episode_len=e["episode_len"],
        transition_seed=e["transition_seed"], noise_scale=e["noise_scale"], mix_strength=e["mix_strength"])
    return spec, TransitionNet(spec)


def generate_data(cfg: RunConfig, seed: int, spec: EnvSpec, net: TransitionNet):
    """Collect episodes (latent kept when configured) and split them into D_E / D_U."""
    d = cfg["datagen"]
    episodes = collect(spec, net, parse_mixture(d["mixture"]), d["episodes_per_class"],
                       substream(seed, "datagen"), keep_latent=d["log_latent"])
    manifest = {"seed": seed, "spec_hash": spec.spec_hash(), "mixture": d["mixture"],
                "top_frac": d["top_frac"], "expert_prob": d["expert_prob"]}
    split = label_split(episodes, d["top_frac"], d["expert_prob"], substream(seed, "datagen", 1), manifest)
    if not split.expert:
        raise InsufficientDataError(
            f"seed {seed}: the split drew no expert episodes; raise datagen.episodes_per_class")
    return episodes, split


def train_vae(cfg: RunConfig, seed: int, records: dict, n_classes: int, conditional=True, log=None):
    v = cfg["vae"]
    extra = 0 if conditional else 1
    model = CvaeModel(n_classes, d_u=v["d_u"], hidden=v["hidden"], conditional=conditional,
                      rng=substream(seed, "vae", extra))
    model.fit_normalizer(records["s"], records["a"], records["s_next"], records["c"])
    return train_cvae(model, records, epochs=v["epochs"], batch_size=v["batch_size"], lr=v["lr"],
                      rng=substream(seed, "vae", 10 + extra), steps_per_epoch=v["steps_per_epoch"], log=log)


def train_sampler(cfg: RunConfig, seed: int, expert_episodes) -> Policy:
    s = cfg["sampler"]
    return pretrain_sampler(expert_episodes, s["epochs"], substream(seed, "agent", _AGENT_STREAM["sampler"]),
                            batch_size=s["batch_size"], lr=s["lr"], steps_per_epoch=s["steps_per_epoch"],
                            hidden=s["hidden"])


def augment_config(cfg: RunConfig, ratio=None) -> AugmentConfig:
    a = cfg["augment"]
    return AugmentConfig(B=a["B"], batch_size=a["batch_size"],
                         target_ratio=a["target_ratio"] if ratio is None else ratio)


def run_augment(cfg: RunConfig, seed: int, split, model, sampler, spec: EnvSpec, ratio=None) -> AugmentedExpert:
    return augment_expert(split.expert, split.unlabeled, model, sampler, augment_config(cfg, ratio),
                          substream(seed, "augment"), box=(spec.low, spec.high))


def dwbc_config(cfg: RunConfig) -> DwbcConfig:
    return DwbcConfig(**cfg["dwbc"])


def train_policy(cfg: RunConfig, seed: int, algo: str, split, augmented: AugmentedExpert | None = None,
                 eval_hook=None):
    """Train one method.  Returns ``(policy, curve_rows)`` with rows ``(step, loss, component)``."""
    if algo not in ALGOS:
        raise ConfigError(f"unknown algorithm '{algo}'; choose from {', '.join(ALGOS)}")
    rng = substream(seed, "agent", _AGENT_STREAM[algo])
    every = cfg["eval"]["curve_every"] or None
    if algo in ("bc-exp", "bc-all"):
        b = cfg["bc"]
        episodes = split.expert if algo == "bc-exp" else split.all_episodes
        policy = train_bc(stack_records(episodes), b["epochs"], rng, batch_size=b["batch_size"], lr=b["lr"],
                          steps_per_epoch=b["steps_per_epoch"], hidden=b["hidden"])
        per_epoch = b["steps_per_epoch"] or 1
        rows = [((i + 1) * per_epoch, loss, "bc") for i, loss in enumerate(policy.bc_curve)]
        return policy, rows
    if algo == "oilca":
        if augmented is None:
            raise ConfigError("oilca needs augmented expert data")
        expert = augmented.pairs()
    else:
        expert = stack_records(split.expert)
    unlabeled = stack_records(split.unlabeled)
    policy, _, rows = train_dwbc(expert, unlabeled, dwbc_config(cfg), rng,
                                 eval_hook=eval_hook, eval_every=every if eval_hook else None)
    return policy, rows


def evaluate(cfg: RunConfig, seed: int, policy, spec: EnvSpec, net: TransitionNet):
    from .evaluate import evaluate_policy  # evaluate builds on this module

    return evaluate_policy(policy, spec, net, cfg["eval"]["n_episodes"], substream(seed, "eval"))


@dataclass
class SeedArtifacts:
    """Everything upstream of policy training for one seed."""

    seed: int
    episodes: list
    split: object
    model: CvaeModel
    vae_curve: list
    sampler: Policy


_CACHE: dict = {}


def prepare_seed(cfg: RunConfig, seed: int, spec, net, use_cache=True) -> SeedArtifacts:
    """Data, CVAE and sampler for ``seed``; memoised per (config hash, seed) within a process."""
    key = (cfg.config_hash(), seed)
    if use_cache and key in _CACHE:
        return _CACHE[key]
    episodes, split = generate_data(cfg, seed, spec, net)
    model, curve = train_vae(cfg, seed, stack_records(split.all_episodes), spec.n_classes)
    sampler = train_sampler(cfg, seed, split.expert)
    art = SeedArtifacts(seed, episodes, split, model, curve, sampler)
    if use_cache:
        _CACHE[key] = art
    return art


def clear_cache():
    _CACHE.clear()


def latent_matrix(episodes) -> np.ndarray:
    if any(e.u is None for e in episodes):
        raise ConfigError("ground-truth latents were not logged; set datagen.log_latent = true")
    return np.concatenate([e.u for e in episodes])
