"""Offline datasets: generation by tier, normalization, and the binary file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .envs import ToyEnv, make_env, run_episode
from .errors import (
    BadMagicError,
    ContractError,
    MalformedHeaderError,
    TruncatedPayloadError,
    VersionMismatchError,
)

STD_FLOOR = 1e-6
TIERS = ("random", "medium", "mixed", "custom")


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.r)

    @classmethod
    def concat(cls, batches) -> "Batch":
        return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in ("s", "a", "r", "s2", "done")))


@dataclass
class DatasetStats:
    state_mean: np.ndarray
    state_std: np.ndarray
    state_min: np.ndarray
    state_max: np.ndarray
    reward_mean: float
    reward_std: float
    reward_min: float
    reward_max: float

    def normalize_state(self, x):
        return (np.asarray(x, dtype=np.float64) - self.state_mean) / self.state_std

    def denormalize_state(self, x):
        return np.asarray(x, dtype=np.float64) * self.state_std + self.state_mean

    def normalized_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.normalize_state(self.state_min), self.normalize_state(self.state_max)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "state_mean": self.state_mean,
            "state_std": self.state_std,
            "state_min": self.state_min,
            "state_max": self.state_max,
            "reward": np.array([self.reward_mean, self.reward_std, self.reward_min, self.reward_max]),
        }

    @classmethod
    def from_dict(cls, d) -> "DatasetStats":
        rew = np.asarray(d["reward"])
        return cls(
            np.asarray(d["state_mean"]), np.asarray(d["state_std"]),
            np.asarray(d["state_min"]), np.asarray(d["state_max"]),
            *(float(x) for x in rew),
        )


def compute_stats(s: np.ndarray, s2: np.ndarray, r: np.ndarray) -> DatasetStats:
    """Per-dimension statistics over every state seen (s and s') plus rewards.

    Uses the population standard deviation with a floor for constant columns.
    """
    if len(r) == 0:
        raise ContractError("cannot compute statistics of an empty dataset")
    states = np.concatenate([s, s2], axis=0)
    return DatasetStats(
        state_mean=states.mean(axis=0),
        state_std=np.maximum(states.std(axis=0), STD_FLOOR),
        state_min=states.min(axis=0),
        state_max=states.max(axis=0),
        reward_mean=float(r.mean()),
        reward_std=float(r.std()),
        reward_min=float(r.min()),
        reward_max=float(r.max()),
    )


@dataclass
class OfflineDataset:
    env_name: str
    tier: str
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray
    stats: DatasetStats
    normalized: bool = False
    source: str = ""

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64).reshape(len(self.r), -1)
        self.s2 = np.asarray(self.s2, dtype=np.float64).reshape(len(self.r), -1)
        self.a = np.asarray(self.a, dtype=np.float64).reshape(len(self.r), -1)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.done = np.asarray(self.done, dtype=bool)
        n = len(self.r)
        if not (len(self.s) == len(self.a) == len(self.s2) == len(self.done) == n):
            raise ContractError("transition arrays have different lengths")

    @classmethod
    def from_arrays(cls, env_name, tier, s, a, r, s2, done, source="") -> "OfflineDataset":
        s, s2, r = np.asarray(s, float), np.asarray(s2, float), np.asarray(r, float)
        if s.ndim == 1:
            s, s2 = s[:, None], s2[:, None]
        return cls(env_name, tier, s, a, r, s2, done, compute_stats(s, s2, r), source=source)

    def __len__(self) -> int:
        return len(self.r)

    @property
    def state_dim(self) -> int:
        return self.s.shape[1]

    @property
    def action_dim(self) -> int:
        return self.a.shape[1]

    def batch(self, idx) -> Batch:
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx].astype(np.float64))

    def all(self) -> Batch:
        return self.batch(slice(None))

    def start_states(self) -> np.ndarray:
        """Every state in the data, minus successors of terminal transitions."""
        return np.concatenate([self.s, self.s2[~self.done]], axis=0)

    def state_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-dimension [min, max] in the space the payload currently lives in."""
        if self.normalized:
            return self.stats.normalized_bounds()
        return self.stats.state_min, self.stats.state_max


def normalize(dataset: OfflineDataset) -> tuple[OfflineDataset, DatasetStats]:
    if len(dataset) == 0:
        raise ContractError("cannot normalize an empty dataset")
    if dataset.normalized:
        return dataset, dataset.stats
    st = dataset.stats
    out = replace(
        dataset,
        s=st.normalize_state(dataset.s),
        s2=st.normalize_state(dataset.s2),
        normalized=True,
    )
    return out, st


def denormalize(state, stats: DatasetStats) -> np.ndarray:
    return stats.denormalize_state(state)


# ---------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------


def _collect(env: ToyEnv, policy_fn, n: int, rng) -> tuple:
    parts = []
    total = 0
    while total < n:
        ep = run_episode(env, policy_fn, rng)
        parts.append(ep)
        total += len(ep[2])
    cols = [np.concatenate([p[i] for p in parts])[:n] for i in range(5)]
    return tuple(cols)


def generate_dataset(env: ToyEnv | str, tier: str, n_transitions: int, rng: np.random.Generator,
                     medium_budget: int = 30_000) -> OfflineDataset:
    """Build an offline dataset of ``n_transitions`` from a toy environment.

    random: uniform actions. medium: a SAC policy trained online until it
    reaches roughly half the expert's normalized score. mixed: the replay
    buffer of that partial training run (topped up with the medium policy
    when the run was shorter than ``n_transitions``).
    """
    env = make_env(env) if isinstance(env, str) else env
    if n_transitions < 1:
        raise ContractError("n_transitions must be >= 1")
    if tier == "random":
        cols = _collect(env, lambda s: rng.uniform(env.action_low, env.action_high), n_transitions, rng)
        return OfflineDataset.from_arrays(env.name, tier, *cols, source="uniform-random")
    if tier not in ("medium", "mixed"):
        raise ContractError(f"unknown tier {tier!r}")

    from .learners import train_online_sac

    policy, replay, score = train_online_sac(env, rng, target_score=0.5, max_env_steps=medium_budget)
    source = f"online-sac normalized-score={score:.3f}"

    def act(s):
        return policy.sample(s[None], rng)[0]

    if tier == "medium":
        cols = _collect(env, act, n_transitions, rng)
        return OfflineDataset.from_arrays(env.name, tier, *cols, source=source)
    cols = replay
    if len(cols[2]) >= n_transitions:
        cols = tuple(c[-n_transitions:] for c in cols)
    else:
        extra = _collect(env, act, n_transitions - len(cols[2]), rng)
        cols = tuple(np.concatenate([c, e]) for c, e in zip(cols, extra))
    return OfflineDataset.from_arrays(env.name, tier, *cols, source=source + " replay")


# ---------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------

DS_MAGIC = b"ADEPT-DS\0"
DS_VERSION = 1


def save_dataset(dataset: OfflineDataset, path) -> None:
    if dataset.normalized:
        raise ContractError("save the raw dataset; normalization is recomputed on load")
    name = dataset.env_name.encode("utf-8")
    n, ds, da = len(dataset), dataset.state_dim, dataset.action_dim
    parts = [
        DS_MAGIC,
        bytes([DS_VERSION]),
        struct.pack("<I", len(name)),
        name,
        struct.pack("<II", ds, da),
        bytes([TIERS.index(dataset.tier)]),
        struct.pack("<Q", n),
    ]
    for arr in (dataset.s, dataset.a, dataset.r, dataset.s2, dataset.done.astype(np.float64)):
        parts.append(np.asarray(arr, dtype="<f8").T.tobytes(order="C"))
    st = dataset.stats
    for arr in (st.state_mean, st.state_std, st.state_min, st.state_max):
        parts.append(np.asarray(arr, dtype="<f8").tobytes())
    parts.append(np.array([st.reward_mean, st.reward_std, st.reward_min, st.reward_max], dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> OfflineDataset:
    buf = Path(path).read_bytes()
    if not buf.startswith(DS_MAGIC):
        raise BadMagicError(f"bad magic: expected {DS_MAGIC!r}")
    pos = len(DS_MAGIC)

    def take(k: int, what: str) -> bytes:
        nonlocal pos
        if pos + k > len(buf):
            raise TruncatedPayloadError(f"truncated payload while reading {what} at byte {pos}")
        chunk = buf[pos : pos + k]
        pos += k
        return chunk

    version = take(1, "version")[0]
    if version != DS_VERSION:
        raise VersionMismatchError(f"dataset version {version} unsupported (expected {DS_VERSION})")
    (nlen,) = struct.unpack("<I", take(4, "name length"))
    if nlen > 256:
        raise MalformedHeaderError(f"env name length {nlen} is implausible")
    try:
        env_name = take(nlen, "env name").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedHeaderError("env name is not valid utf-8") from exc
    ds, da = struct.unpack("<II", take(8, "dims"))
    if ds == 0 or da == 0:
        raise MalformedHeaderError(f"invalid dims state={ds} action={da}")
    tier_byte = take(1, "tier")[0]
    if tier_byte >= len(TIERS):
        raise MalformedHeaderError(f"unknown tier byte {tier_byte}")
    (n,) = struct.unpack("<Q", take(8, "count"))

    def column_block(width: int, what: str) -> np.ndarray:
        raw = take(8 * n * width, what)
        return np.frombuffer(raw, dtype="<f8").reshape(width, n).T.astype(np.float64)

    s = column_block(ds, "states")
    a = column_block(da, "actions")
    r = column_block(1, "rewards")[:, 0]
    s2 = column_block(ds, "next states")
    done = column_block(1, "done flags")[:, 0]
    vecs = [np.frombuffer(take(8 * ds, "stats"), dtype="<f8").astype(np.float64) for _ in range(4)]
    rew = np.frombuffer(take(32, "reward stats"), dtype="<f8")
    if pos != len(buf):
        raise MalformedHeaderError(f"{len(buf) - pos} unexpected trailing bytes")
    stats = DatasetStats(*vecs, *(float(x) for x in rew))
    return OfflineDataset(env_name, TIERS[tier_byte], s, a, r, s2, done > 0.5, stats)
