"""Policy evaluation inside the world model and the synthetic replay buffer."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dataset import Batch, OfflineDataset
from .diffusion import DiffusionWorldModel, predict_reward_done, sample_next_state
from .errors import ContractError, GenerationError
from .policy import GaussianPolicy

DONE_THRESHOLD = 0.5


@dataclass
class SyntheticTrajectory:
    states: np.ndarray  # (T + 1, ds)
    actions: np.ndarray  # (T, da)
    rewards: np.ndarray  # (T,)
    dones: np.ndarray  # (T,) bool
    terminated: bool

    @property
    def length(self) -> int:
        return len(self.rewards)

    def transitions(self) -> Batch:
        return Batch(self.states[:-1], self.actions, self.rewards, self.states[1:], self.dones.astype(np.float64))


def rollout_batch(model: DiffusionWorldModel, policy: GaussianPolicy, dataset: OfflineDataset, horizon: int,
                  n: int, rng: np.random.Generator, clip: bool = True) -> list[SyntheticTrajectory]:
    """Generate ``n`` independent trajectories of at most ``horizon`` transitions.

    Start states are drawn uniformly from every state in ``dataset``. Each
    step samples an action from ``policy``, a next state from the reverse
    diffusion chain and a reward/terminal from the head; with ``clip`` the
    next state and reward are clamped to the dataset's per-dimension range.
    """
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    pool = dataset.start_states()
    s = pool[rng.integers(0, len(pool), size=n)]
    lo, hi = dataset.state_bounds()
    rlo, rhi = dataset.stats.reward_min, dataset.stats.reward_max

    states = [s]
    actions, rewards, dones = [], [], []
    alive = np.ones(n, dtype=bool)
    lengths = np.zeros(n, dtype=int)
    for t in range(horizon):
        a = policy.sample(s, rng)
        try:
            s2 = sample_next_state(model, s, a, rng)
        except GenerationError as exc:
            exc.prefix = _assemble(states, actions, rewards, dones, lengths, alive)
            raise
        if clip:
            s2 = np.clip(s2, lo, hi)
        r, p_done = predict_reward_done(model, s, a, s2)
        if clip:
            r = np.clip(r, rlo, rhi)
        d = p_done > DONE_THRESHOLD
        actions.append(a)
        rewards.append(r)
        dones.append(d)
        states.append(s2)
        lengths += alive
        alive = alive & ~d
        s = s2
        if not alive.any():
            break
    return _assemble(states, actions, rewards, dones, lengths, alive)


def _assemble(states, actions, rewards, dones, lengths, alive) -> list[SyntheticTrajectory]:
    if not actions:
        return []
    S = np.stack(states, axis=1)
    A = np.stack(actions, axis=1)
    R = np.stack(rewards, axis=1)
    D = np.stack(dones, axis=1)
    out = []
    for i, L in enumerate(lengths):
        L = int(L)
        if L == 0:
            continue
        out.append(SyntheticTrajectory(S[i, : L + 1], A[i, :L], R[i, :L], D[i, :L], bool(D[i, L - 1])))
    return out


def rollout(model, policy, dataset, horizon: int, rng, clip: bool = True) -> SyntheticTrajectory:
    return rollout_batch(model, policy, dataset, horizon, 1, rng, clip)[0]


@dataclass
class ReplayBuffer:
    """Fixed-capacity ring of transitions; oldest entries are overwritten first."""

    capacity: int
    state_dim: int
    action_dim: int
    insertions: int = 0
    _s: np.ndarray = field(init=False, repr=False)
    _a: np.ndarray = field(init=False, repr=False)
    _r: np.ndarray = field(init=False, repr=False)
    _s2: np.ndarray = field(init=False, repr=False)
    _d: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.capacity < 1:
            raise ContractError("replay capacity must be >= 1")
        self._s = np.zeros((self.capacity, self.state_dim))
        self._a = np.zeros((self.capacity, self.action_dim))
        self._r = np.zeros(self.capacity)
        self._s2 = np.zeros((self.capacity, self.state_dim))
        self._d = np.zeros(self.capacity)

    def __len__(self) -> int:
        return min(self.insertions, self.capacity)

    def add(self, batch: Batch) -> None:
        n = len(batch)
        if n > self.capacity:
            batch = Batch(*(np.asarray(x)[-self.capacity :] for x in (batch.s, batch.a, batch.r, batch.s2, batch.done)))
            self.insertions += n - self.capacity
            n = self.capacity
        idx = (self.insertions + np.arange(n)) % self.capacity
        self._s[idx] = batch.s
        self._a[idx] = batch.a
        self._r[idx] = batch.r
        self._s2[idx] = batch.s2
        self._d[idx] = batch.done
        self.insertions += n

    def push(self, trajectory: SyntheticTrajectory) -> None:
        self.add(trajectory.transitions())

    def get(self, idx) -> Batch:
        """Rows by logical position, 0 being the oldest stored transition."""
        idx = np.asarray(idx)
        start = self.insertions - len(self)
        phys = (start + idx) % self.capacity
        return Batch(self._s[phys], self._a[phys], self._r[phys], self._s2[phys], self._d[phys])

    def contents(self) -> Batch:
        return self.get(np.arange(len(self)))


def sample_mixed(buffer: ReplayBuffer | None, dataset: OfflineDataset, batch_size: int, rng: np.random.Generator,
                 real_fraction: float | None = None) -> Batch:
    """Uniform draw over D u D_hat (or a fixed real-data share when given)."""
    if batch_size < 1:
        raise ContractError("batch size must be >= 1")
    n_real = len(dataset)
    n_syn = 0 if buffer is None else len(buffer)
    if n_real + n_syn == 0:
        raise ContractError("both the dataset and the replay buffer are empty")
    if real_fraction is None or n_syn == 0 or n_real == 0:
        idx = rng.integers(0, n_real + n_syn, size=batch_size)
        is_real = idx < n_real
    else:
        is_real = rng.random(batch_size) < real_fraction
        idx = np.where(is_real, rng.integers(0, n_real, batch_size), n_real + rng.integers(0, n_syn, batch_size))
    parts = []
    order = []
    real_idx = idx[is_real]
    if len(real_idx):
        parts.append(dataset.batch(real_idx))
        order.append(np.flatnonzero(is_real))
    syn_idx = idx[~is_real] - n_real
    if len(syn_idx):
        parts.append(buffer.get(syn_idx))
        order.append(np.flatnonzero(~is_real))
    merged = Batch.concat(parts)
    perm = np.argsort(np.concatenate(order), kind="stable")
    return Batch(merged.s[perm], merged.a[perm], merged.r[perm], merged.s2[perm], merged.done[perm])


def write_trajectories_csv(path, trajectories: list[SyntheticTrajectory]) -> None:
    if not trajectories:
        raise ContractError("no trajectories to write")
    ds = trajectories[0].states.shape[1]
    da = trajectories[0].actions.shape[1]
    header = ["episode_id", "t", *[f"s{i}" for i in range(ds)], *[f"a{i}" for i in range(da)], "r", "done"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for ep, traj in enumerate(trajectories):
            for t in range(traj.length):
                w.writerow([ep, t, *map(repr, traj.states[t].tolist()), *map(repr, traj.actions[t].tolist()),
                            repr(float(traj.rewards[t])), int(traj.dones[t])])
