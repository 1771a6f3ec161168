"""Run configuration: a flat ``section.key = value`` text format.

Every key has a default.  Unknown sections or keys are rejected so a typo
never silently falls back to a default.  ``canonical_text`` renders the
config in a fixed order; its hash (minus the ``paths`` section, which only
says *where* to write) labels every report row.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass

from .errors import ConfigError


def _int(text):
    return int(text)


def _float(text):
    return float(text)


def _bool(text):
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text):
    return tuple(int(x) for x in text.split(",") if x.strip())


def _str(text):
    return text.strip()


def _optional_float(text):
    text = text.strip()
    return None if text.lower() in ("", "none") else float(text)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA = {
    "env": {
        "spec_seed": (_int, 0),
        "n_classes": (_int, 3),
        "alpha": (_float, 2.0),
        "step_size": (_float, 1.0),
        "box_low": (_floats, (-10.0, -10.0)),
        "box_high": (_floats, (10.0, 10.0)),
        "target": (_floats, (0.0, 0.0)),
        "episode_len": (_int, 500),
        "transition_seed": (_int, 7),
        "noise_scale": (_float, 0.1),
        "mix_strength": (_float, 0.9),
    },
    "datagen": {
        "episodes_per_class": (_int, 100),
        "top_frac": (_float, 0.2),
        "expert_prob": (_float, 0.1),
        "mixture": (_str, "greedy:5,eps-random@0.3:4,uniform-random:1"),
        "log_latent": (_bool, True),
    },
    "vae": {
        "d_u": (_int, 2),
        "hidden": (_ints, (64, 64)),
        "lr": (_float, 3e-3),
        "epochs": (_int, 150),
        "steps_per_epoch": (_int, 200),
        "batch_size": (_int, 256),
    },
    "sampler": {
        "hidden": (_ints, (64, 64)),
        "lr": (_float, 1e-3),
        "epochs": (_int, 20),
        "steps_per_epoch": (_int, 200),
        "batch_size": (_int, 256),
    },
    "augment": {
        "B": (_int, 0),
        "batch_size": (_int, 256),
        "target_ratio": (_optional_float, 1.0),
    },
    "dwbc": {
        "eta": (_float, 0.5),
        "alpha": (_float, 7.5),
        "d_min": (_float, 0.1),
        "d_max": (_float, 0.9),
        "disc_update_period": (_int, 100),
        "policy_update_period": (_int, 1),
        "lr_disc": (_float, 1e-3),
        "lr_policy": (_float, 1e-3),
        "total_steps": (_int, 4000),
        "batch_size": (_int, 256),
        "hidden": (_ints, (64, 64)),
    },
    "bc": {
        "hidden": (_ints, (64, 64)),
        "lr": (_float, 1e-3),
        "epochs": (_int, 20),
        "steps_per_epoch": (_int, 200),
        "batch_size": (_int, 256),
    },
    "eval": {
        "n_episodes": (_int, 60),
        "seeds": (_ints, (0, 1, 2, 3, 4)),
        "sweep_ratios": (_ints, (10, 30, 50, 70, 90, 100, 200)),
        "curve_every": (_int, 0),
    },
    "paths": {
        "workdir": (_str, "oilca-work"),
    },
}
TOP_LEVEL = {"master_seed": (_int, 0)}
HASH_EXCLUDED_SECTIONS = ("paths",)


@dataclass
class RunConfig:
    values: dict
    master_seed: int = 0

    def __getitem__(self, section):
        return self.values[section]

    def get(self, dotted):
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    def replace(self, **dotted) -> RunConfig:
        """Copy with ``section__key=value`` overrides applied (values already typed)."""
        new = copy.deepcopy(self)
        for name, value in dotted.items():
            if name == "master_seed":
                new.master_seed = int(value)
                continue
            section, key = name.split("__", 1)
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key '{section}.{key}'")
            new.values[section][key] = value
        return new

    def canonical_text(self, include_paths=True) -> str:
        lines = [f"master_seed = {self.master_seed}"] if include_paths else []
        for section in SCHEMA:
            if not include_paths and section in HASH_EXCLUDED_SECTIONS:
                continue
            for key in SCHEMA[section]:
                lines.append(f"{section}.{key} = {_fmt(self.values[section][key])}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        """Hash of the canonical form without ``paths`` or ``master_seed``."""
        return hashlib.sha256(self.canonical_text(include_paths=False).encode()).hexdigest()[:16]


def default_config() -> RunConfig:
    return RunConfig({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()},
                     TOP_LEVEL["master_seed"][1])


def parse_config(text: str, source="<config>") -> RunConfig:
    cfg = default_config()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        name, value = (part.strip() for part in line.split("=", 1))
        if name in seen:
            raise ConfigError(f"{source}:{lineno}: '{name}' set twice")
        seen.add(name)
        if name in TOP_LEVEL:
            parser = TOP_LEVEL[name][0]
            target = None
        else:
            if "." not in name:
                raise ConfigError(f"{source}:{lineno}: unknown key '{name}'")
            section, key = name.split(".", 1)
            if section not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown section '{section}'")
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}:{lineno}: unknown key '{key}' in section '{section}'")
            parser = SCHEMA[section][key][0]
            target = (section, key)
        try:
            parsed = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for '{name}': {exc}") from None
        if target is None:
            cfg.master_seed = parsed
        else:
            cfg.values[target[0]][target[1]] = parsed
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, source=str(path))


def parse_mixture(text: str):
    """``kind[@eps]:weight`` items, comma separated, expanded to a policy list."""
    from .datagen import BehaviorPolicy

    policies = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        head, _, weight = item.partition(":")
        kind, _, eps = head.partition("@")
        try:
            count = int(weight) if weight else 1
            eps_value = float(eps) if eps else 0.0
        except ValueError:
            raise ConfigError(f"bad mixture entry '{item}'") from None
        if count < 1:
            raise ConfigError(f"mixture weight must be positive in '{item}'")
        policies.extend([BehaviorPolicy(kind.strip(), eps_value)] * count)
    if not policies:
        raise ConfigError("behaviour mixture is empty")
    return policies
