"""Behaviour policies, offline data collection, expert/unlabeled split, dataset files."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, FormatError, InsufficientDataError
from .toyenv import ACTION_DIM, LATENT_DIM, STATE_DIM, EnvSpec, Episode, TransitionNet, rollout_batch

MAGIC = "oilca-dataset v1"
LATENT_MAGIC = "oilca-latent v1"

RECORD_DTYPE = np.dtype([
    ("episode_id", "<u4"),
    ("t", "<u4"),
    ("c", "u1"),
    ("s", "<f8", (STATE_DIM,)),
    ("a", "<f8", (ACTION_DIM,)),
    ("s_next", "<f8", (STATE_DIM,)),
    ("r", "<f8"),
])
RECORD_STRIDE = RECORD_DTYPE.itemsize  # 65 bytes, packed

POLICY_KINDS = ("greedy", "eps-random", "uniform-random")
_DIRECTIONS = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


@dataclass(frozen=True)
class BehaviorPolicy:
    kind: str = "greedy"
    eps: float = 0.0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown behaviour policy kind '{self.kind}'")
        if not 0.0 <= self.eps <= 1.0:
            raise ConfigError("eps must lie in [0, 1]")


DEFAULT_MIXTURE = (
    (BehaviorPolicy("greedy"),) * 5
    + (BehaviorPolicy("eps-random", 0.3),) * 4
    + (BehaviorPolicy("uniform-random"),)
)


def greedy_actions(spec: EnvSpec, states: np.ndarray) -> np.ndarray:
    """Axis-aligned move along the coordinate with the largest distance to target."""
    gap = np.asarray(spec.target) - states
    axis = np.argmax(np.abs(gap), axis=1)
    actions = np.zeros_like(states)
    rows = np.arange(len(states))
    actions[rows, axis] = np.where(gap[rows, axis] >= 0.0, 1.0, -1.0)
    return actions * spec.step_size


def random_actions(spec: EnvSpec, n: int, rng) -> np.ndarray:
    return _DIRECTIONS[rng.integers(0, 4, size=n)] * spec.step_size


class MixedBehavior:
    """Vectorised behaviour policy; row ``i`` follows ``policies[i]``."""

    def __init__(self, spec: EnvSpec, policies):
        self.spec = spec
        self.random_prob = np.array([
            1.0 if p.kind == "uniform-random" else (p.eps if p.kind == "eps-random" else 0.0)
            for p in policies
        ])

    def __call__(self, states, rng):
        n = len(states)
        greedy = greedy_actions(self.spec, states)
        rand = random_actions(self.spec, n, rng)
        explore = rng.random(n) < self.random_prob
        return np.where(explore[:, None], rand, greedy)


def collect(spec: EnvSpec, net: TransitionNet, policies, episodes_per_class: int, rng,
            keep_latent: bool = False) -> list[Episode]:
    """Roll out ``episodes_per_class`` episodes for every class, ids ``0..C*n-1`` class-major."""
    policies = list(policies)
    if not policies:
        raise ConfigError("collect needs at least one behaviour policy")
    if episodes_per_class < 1:
        raise ConfigError("episodes_per_class must be at least 1")
    classes = np.repeat(np.arange(spec.n_classes), episodes_per_class)
    chosen = [policies[i] for i in rng.integers(0, len(policies), size=len(classes))]
    episodes = rollout_batch(spec, net, MixedBehavior(spec, chosen), classes, rng, keep_latent=keep_latent)
    return episodes


@dataclass
class AugmentedRecords:
    """Counterfactual expert records held column-wise.

    ``provenance`` columns: expert episode id, expert t, parent episode id,
    parent t, batch seed.
    """

    episode_id: np.ndarray
    c: np.ndarray
    s: np.ndarray
    a: np.ndarray
    provenance: np.ndarray

    def __len__(self):
        return len(self.episode_id)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros((0, 2)),
                   np.zeros((0, 5), dtype=np.int64))

    def __eq__(self, other):
        if not isinstance(other, AugmentedRecords):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("episode_id", "c", "s", "a", "provenance"))


@dataclass
class SplitDataset:
    expert: list
    unlabeled: list
    manifest: dict = field(default_factory=dict)
    augmented: AugmentedRecords | None = None

    @property
    def all_episodes(self) -> list:
        return sorted(self.expert + self.unlabeled, key=lambda e: e.episode_id)

    def __eq__(self, other):
        if not isinstance(other, SplitDataset):
            return NotImplemented
        same_aug = (self.augmented is None and other.augmented is None) or (
            self.augmented is not None and other.augmented is not None and self.augmented == other.augmented)
        return (self.expert == other.expert and self.unlabeled == other.unlabeled
                and self.manifest == other.manifest and same_aug)


def label_split(episodes, top_frac: float = 0.2, expert_prob: float = 0.1, rng=None, manifest=None) -> SplitDataset:
    """Top-``top_frac`` episodes by return are positives; each joins D_E with ``expert_prob``.

    Ties in return are broken by episode id, lower id ranking first.
    """
    if not 0.0 < top_frac < 1.0:
        raise ContractError("top_frac must lie in (0, 1)")
    if not 0.0 <= expert_prob <= 1.0:
        raise ContractError("expert_prob must lie in [0, 1]")
    episodes = list(episodes)
    if len(episodes) < 5:
        raise InsufficientDataError(f"label_split needs at least 5 episodes, got {len(episodes)}")
    ranked = sorted(episodes, key=lambda e: (-e.ret, e.episode_id))
    n_pos = int(round(top_frac * len(episodes)))
    positives = ranked[:n_pos]
    chosen = rng.random(n_pos) < expert_prob
    expert_ids = {e.episode_id for e, keep in zip(positives, chosen) if keep}
    expert = [e for e in episodes if e.episode_id in expert_ids]
    unlabeled = [e for e in episodes if e.episode_id not in expert_ids]
    info = dict(manifest or {})
    info.update(n_positive=n_pos, top_frac=top_frac, expert_prob=expert_prob,
                n_expert=len(expert), n_unlabeled=len(unlabeled))
    return SplitDataset(expert=expert, unlabeled=unlabeled, manifest=info)


def stack_records(episodes) -> dict:
    """Concatenate episodes into flat arrays (s, a, s_next, c, r, episode_id, t)."""
    episodes = list(episodes)
    if not episodes:
        return {"s": np.zeros((0, STATE_DIM)), "a": np.zeros((0, ACTION_DIM)),
                "s_next": np.zeros((0, STATE_DIM)), "c": np.zeros(0, dtype=int),
                "r": np.zeros(0), "episode_id": np.zeros(0, dtype=int), "t": np.zeros(0, dtype=int)}
    return {
        "s": np.concatenate([e.s for e in episodes]),
        "a": np.concatenate([e.a for e in episodes]),
        "s_next": np.concatenate([e.s_next for e in episodes]),
        "c": np.concatenate([np.full(len(e), e.c, dtype=int) for e in episodes]),
        "r": np.concatenate([e.r for e in episodes]),
        "episode_id": np.concatenate([np.full(len(e), e.episode_id, dtype=int) for e in episodes]),
        "t": np.concatenate([np.arange(len(e)) for e in episodes]),
    }


def _encode_value(value) -> str:
    text = str(value)
    if "\n" in text:
        raise FormatError("manifest values must be single-line")
    return text


PROVENANCE_HEADER = "aug_episode_id,expert_episode_id,expert_t,parent_episode_id,parent_t,seed"


def provenance_path(path) -> str:
    return f"{path}.prov"


def _records_from_episodes(episodes) -> np.ndarray:
    n_records = sum(len(e) for e in episodes)
    recs = np.zeros(n_records, dtype=RECORD_DTYPE)
    i = 0
    for e in episodes:
        n = len(e)
        sl = slice(i, i + n)
        recs["episode_id"][sl] = e.episode_id
        recs["t"][sl] = np.arange(n)
        recs["c"][sl] = e.c
        recs["s"][sl] = e.s
        recs["a"][sl] = e.a
        recs["s_next"][sl] = e.s_next
        recs["r"][sl] = e.r
        i += n
    return recs


def _records_from_augmented(aug: AugmentedRecords) -> np.ndarray:
    recs = np.zeros(len(aug), dtype=RECORD_DTYPE)
    recs["episode_id"] = aug.episode_id
    recs["c"] = aug.c
    recs["s"] = aug.s
    recs["a"] = aug.a
    recs["s_next"] = np.nan
    recs["r"] = np.nan
    return recs


def save(dataset: SplitDataset, path, n_classes: int | None = None) -> None:
    """Write the dataset file (and the provenance sidecar when augmented records exist)."""
    episodes = dataset.all_episodes
    aug = dataset.augmented if dataset.augmented is not None else AugmentedRecords.empty()
    recs = np.concatenate([_records_from_episodes(episodes), _records_from_augmented(aug)])
    n_classes = n_classes if n_classes is not None else dataset.manifest.get("n_classes", 0)
    expert_ids = sorted(e.episode_id for e in dataset.expert)
    first_aug = int(aug.episode_id[0]) if len(aug) else -1
    lines = [
        MAGIC,
        f"state_dim {STATE_DIM}",
        f"action_dim {ACTION_DIM}",
        f"n_classes {int(n_classes)}",
        f"n_episodes {len(episodes) + len(aug)}",
        f"n_records {len(recs)}",
        f"env_hash {dataset.manifest.get('env_hash', '-')}",
        f"seeds {dataset.manifest.get('seeds', '-')}",
        "expert_ids " + " ".join(str(i) for i in expert_ids),
        f"augmented {first_aug} {len(aug)}",
    ]
    for key in sorted(dataset.manifest):
        if key in ("env_hash", "seeds", "n_classes"):
            continue
        lines.append(f"meta {key}={_encode_value(dataset.manifest[key])}")
    lines.append("end")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(recs.tobytes())
    os.replace(tmp, path)
    if len(aug):
        table = np.column_stack([aug.episode_id, aug.provenance]).astype(np.int64)
        np.savetxt(provenance_path(path), table, fmt="%d", delimiter=",", header=PROVENANCE_HEADER, comments="")


def _parse_meta(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


_INT_KEYS = ("state_dim", "action_dim", "n_classes", "n_episodes", "n_records")


def _read_header(blob: bytes, path):
    header, meta, offset = {}, {}, 0
    first = True
    while True:
        nl = blob.find(b"\n", offset)
        if nl < 0:
            raise FormatError(f"{path}: header not terminated (offset {offset})")
        line = blob[offset:nl].decode("ascii", errors="replace")
        start = offset
        offset = nl + 1
        if first:
            if line != MAGIC:
                raise FormatError(f"{path}: bad magic at offset 0: {line!r}")
            first = False
            continue
        if line == "end":
            return header, meta, offset
        key, _, rest = line.partition(" ")
        try:
            if key == "meta":
                k, _, v = rest.partition("=")
                meta[k] = _parse_meta(v)
            elif key == "expert_ids":
                header[key] = [int(x) for x in rest.split()]
            elif key == "augmented":
                first_id, count = rest.split()
                header[key] = (int(first_id), int(count))
            elif key in _INT_KEYS:
                header[key] = int(rest)
            elif key in ("env_hash", "seeds"):
                header[key] = rest
            else:
                raise FormatError(f"{path}: unknown header line at offset {start}: {line!r}")
        except ValueError:
            raise FormatError(f"{path}: malformed '{key}' line at offset {start}") from None


def load(path) -> SplitDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    header, meta, offset = _read_header(blob, path)
    for key in (*_INT_KEYS, "expert_ids"):
        if key not in header:
            raise FormatError(f"{path}: header missing '{key}'")
    if header["state_dim"] != STATE_DIM or header["action_dim"] != ACTION_DIM:
        raise DimensionError(f"{path}: dims ({header['state_dim']}, {header['action_dim']}) "
                             f"do not match ({STATE_DIM}, {ACTION_DIM})")
    payload = len(blob) - offset
    expected = header["n_records"] * RECORD_STRIDE
    if payload != expected:
        raise FormatError(f"{path}: payload at offset {offset} has {payload} bytes, "
                          f"header declares {header['n_records']} records ({expected} bytes)")
    recs = np.frombuffer(blob, dtype=RECORD_DTYPE, count=header["n_records"], offset=offset)
    first_aug, n_aug = header.get("augmented", (-1, 0))
    if n_aug > len(recs):
        raise FormatError(f"{path}: header declares {n_aug} augmented records but only {len(recs)} exist")
    base, extra = recs[:len(recs) - n_aug], recs[len(recs) - n_aug:]
    ids = base["episode_id"].astype(np.int64)
    if len(base):
        cuts = np.flatnonzero(np.diff(ids)) + 1
        starts, ends = np.concatenate([[0], cuts]), np.concatenate([cuts, [len(base)]])
    else:
        starts = ends = np.zeros(0, dtype=int)
    if len(starts) + n_aug != header["n_episodes"]:
        raise FormatError(f"{path}: found {len(starts) + n_aug} episodes, header declares {header['n_episodes']}")
    episodes = []
    for lo, hi in zip(starts, ends):
        chunk = base[lo:hi]
        if not np.array_equal(chunk["t"], np.arange(hi - lo)):
            raise FormatError(f"{path}: non-contiguous t in episode {int(chunk['episode_id'][0])} "
                              f"at offset {offset + int(lo) * RECORD_STRIDE}")
        episodes.append(Episode(
            episode_id=int(chunk["episode_id"][0]), c=int(chunk["c"][0]),
            s=chunk["s"].copy(), a=chunk["a"].copy(), s_next=chunk["s_next"].copy(), r=chunk["r"].copy()))
    augmented = None
    if n_aug:
        aug_ids = extra["episode_id"].astype(np.int64)
        if not np.array_equal(aug_ids, np.arange(first_aug, first_aug + n_aug)):
            raise FormatError(f"{path}: augmented record ids are not contiguous from {first_aug}")
        prov_file = provenance_path(path)
        if not os.path.exists(prov_file):
            raise FormatError(f"{path}: augmented records present but provenance sidecar {prov_file} is missing")
        table = np.loadtxt(prov_file, dtype=np.int64, delimiter=",", skiprows=1, ndmin=2).reshape(-1, 6)
        if len(table) != n_aug or not np.array_equal(table[:, 0], aug_ids):
            raise FormatError(f"{prov_file}: provenance rows do not match the augmented records")
        augmented = AugmentedRecords(episode_id=aug_ids, c=extra["c"].astype(np.int64), s=extra["s"].copy(),
                                     a=extra["a"].copy(), provenance=table[:, 1:])
    expert_ids = set(header["expert_ids"])
    manifest = dict(meta)
    manifest["env_hash"] = header.get("env_hash", "-")
    manifest["seeds"] = header.get("seeds", "-")
    manifest["n_classes"] = header["n_classes"]
    return SplitDataset(
        expert=[e for e in episodes if e.episode_id in expert_ids],
        unlabeled=[e for e in episodes if e.episode_id not in expert_ids],
        manifest=manifest, augmented=augmented)


def save_latent(episodes, path) -> None:
    """Ground-truth u per record, same order as :func:`save` writes records."""
    episodes = sorted(episodes, key=lambda e: e.episode_id)
    if any(e.u is None for e in episodes):
        raise ContractError("episodes were collected without latent logging")
    u = np.concatenate([e.u for e in episodes]) if episodes else np.zeros((0, LATENT_DIM))
    with open(path, "wb") as fh:
        fh.write(f"{LATENT_MAGIC} n_records {len(u)} latent_dim {LATENT_DIM}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(u, dtype="<f8").tobytes())


def load_latent(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    parts = blob[:nl].decode("ascii", errors="replace").split()
    if nl < 0 or len(parts) != 6 or " ".join(parts[:2]) != LATENT_MAGIC:
        raise FormatError(f"{path}: bad latent sidecar header at offset 0")
    n, d = int(parts[3]), int(parts[5])
    if len(blob) - nl - 1 != n * d * 8:
        raise FormatError(f"{path}: latent payload size mismatch at offset {nl + 1}")
    return np.frombuffer(blob, dtype="<f8", offset=nl + 1).reshape(n, d).copy()
