"""Policy-improvement backends: soft actor-critic and implicit Q-learning."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Mlp, Tensor, concat, minimum, mlp_numpy, no_grad
from .dataset import Batch, DatasetStats
from .envs import ToyEnv, run_episode
from .errors import ContractError
from .policy import GaussianPolicy

ADV_WEIGHT_CAP = 100.0


def expectile_loss(u, tau: float):
    """|tau - 1[u < 0]| * u^2, elementwise; accepts arrays or graph tensors."""
    if not 0.0 < tau < 1.0:
        raise ContractError("expectile tau must lie in (0, 1)")
    if isinstance(u, Tensor):
        w = np.where(u.data < 0, 1.0 - tau, tau)
        return u.square() * w
    u = np.asarray(u, dtype=np.float64)
    return np.where(u < 0, 1.0 - tau, tau) * u * u


def soft_update(target: Mlp, online: Mlp, rho: float) -> None:
    for t, o in zip(target.parameters(), online.parameters()):
        t.data = (1.0 - rho) * t.data + rho * o.data


def _sa(s, a) -> np.ndarray:
    return np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1)


@dataclass
class CriticPair:
    q1: Mlp
    q2: Mlp
    q1_target: Mlp
    q2_target: Mlp
    rho: float = 5e-3

    @classmethod
    def init(cls, state_dim, action_dim, rng, hidden=(256, 256), rho=5e-3) -> "CriticPair":
        q1 = Mlp.init([state_dim + action_dim, *hidden, 1], rng)
        q2 = Mlp.init([state_dim + action_dim, *hidden, 1], rng)
        return cls(q1, q2, q1.copy(), q2.copy(), rho)

    def parameters(self) -> list[Tensor]:
        return self.q1.parameters() + self.q2.parameters()

    def target_min(self, s, a) -> np.ndarray:
        x = _sa(s, a)
        return np.minimum(mlp_numpy(self.q1_target, x), mlp_numpy(self.q2_target, x))[:, 0]

    def online_min_numpy(self, s, a) -> np.ndarray:
        x = _sa(s, a)
        return np.minimum(mlp_numpy(self.q1, x), mlp_numpy(self.q2, x))[:, 0]

    def update_targets(self) -> None:
        soft_update(self.q1_target, self.q1, self.rho)
        soft_update(self.q2_target, self.q2, self.rho)


@dataclass
class SAC:
    policy: GaussianPolicy
    critics: CriticPair
    gamma: float = 0.99
    alpha: float = 0.005
    lr: float = 3e-4
    critic_opt: Adam = field(init=False)
    actor_opt: Adam = field(init=False)

    def __post_init__(self):
        self.critic_opt = Adam(self.critics.parameters(), lr=self.lr)
        self.actor_opt = Adam(self.policy.parameters(), lr=self.lr)

    @classmethod
    def create(cls, state_dim, action_dim, low, high, rng, hidden=(256, 256), gamma=0.99, alpha=0.005,
               rho=5e-3, lr=3e-4) -> "SAC":
        policy = GaussianPolicy.init(state_dim, action_dim, low, high, rng, hidden=hidden, squash=True)
        return cls(policy, CriticPair.init(state_dim, action_dim, rng, hidden, rho), gamma, alpha, lr)

    def update(self, batch: Batch, rng: np.random.Generator) -> dict[str, float]:
        return sac_update(self, batch, rng)


def sac_critic_target(agent: SAC, batch: Batch, rng: np.random.Generator) -> np.ndarray:
    """r + gamma (1 - done) (min target Q(s', a') - alpha log pi(a'|s')), a' ~ pi."""
    with no_grad():
        a2, logp2 = agent.policy.rsample(batch.s2, rng)
    if not np.all(np.isfinite(logp2.data)):
        raise ContractError("non-finite log-prob of next actions")
    q_next = agent.critics.target_min(batch.s2, a2.data) - agent.alpha * logp2.data
    return batch.r + agent.gamma * (1.0 - batch.done) * q_next


def sac_update(agent: SAC, batch: Batch, rng: np.random.Generator) -> dict[str, float]:
    c, pi = agent.critics, agent.policy
    y = sac_critic_target(agent, batch, rng)

    x = Tensor(_sa(batch.s, batch.a))
    q1, q2 = c.q1(x)[:, 0], c.q2(x)[:, 0]
    loss_q = ((q1 - y).square() + (q2 - y).square()).mean()
    agent.critic_opt.zero_grad()
    loss_q.backward()
    agent.critic_opt.step()

    a_pi, logp = pi.rsample(batch.s, rng)
    if not np.all(np.isfinite(logp.data)):
        raise ContractError("non-finite policy log-prob")

    x_pi = concat([Tensor(batch.s), a_pi], axis=1)
    q_pi = minimum(c.q1(x_pi), c.q2(x_pi))[:, 0]
    loss_pi = (logp * agent.alpha - q_pi).mean()
    agent.actor_opt.zero_grad()
    loss_pi.backward()
    agent.actor_opt.step()
    c.update_targets()
    return {"loss_q": loss_q.item(), "loss_pi": loss_pi.item(), "loss_v": float("nan")}


@dataclass
class IQL:
    policy: GaussianPolicy
    critics: CriticPair
    value: Mlp
    gamma: float = 0.99
    tau: float = 0.7
    beta: float = 3.0
    lr: float = 3e-4
    adv_cap: float = ADV_WEIGHT_CAP
    critic_opt: Adam = field(init=False)
    value_opt: Adam = field(init=False)
    actor_opt: Adam = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ContractError("IQL expectile must lie in (0, 1)")
        if self.beta < 0:
            raise ContractError("IQL inverse temperature must be non-negative")
        self.critic_opt = Adam(self.critics.parameters(), lr=self.lr)
        self.value_opt = Adam(self.value.parameters(), lr=self.lr)
        self.actor_opt = Adam(self.policy.parameters(), lr=self.lr)

    @classmethod
    def create(cls, state_dim, action_dim, low, high, rng, hidden=(256, 256), gamma=0.99, tau=0.7, beta=3.0,
               rho=5e-3, lr=3e-4) -> "IQL":
        policy = GaussianPolicy.init(state_dim, action_dim, low, high, rng, hidden=hidden, squash=False)
        critics = CriticPair.init(state_dim, action_dim, rng, hidden, rho)
        value = Mlp.init([state_dim, *hidden, 1], rng)
        return cls(policy, critics, value, gamma, tau, beta, lr)

    def update(self, batch: Batch, rng: np.random.Generator | None = None) -> dict[str, float]:
        return iql_update(self, batch)


def iql_critic_target(agent: IQL, batch: Batch) -> np.ndarray:
    """r + gamma (1 - done) V(s')."""
    v_next = mlp_numpy(agent.value, batch.s2)[:, 0]
    return batch.r + agent.gamma * (1.0 - batch.done) * v_next


def iql_update(agent: IQL, batch: Batch) -> dict[str, float]:
    c = agent.critics
    q_t = c.target_min(batch.s, batch.a)

    v = agent.value(Tensor(batch.s))[:, 0]
    loss_v = expectile_loss(v * -1.0 + q_t, agent.tau).mean()
    agent.value_opt.zero_grad()
    loss_v.backward()
    agent.value_opt.step()

    y = iql_critic_target(agent, batch)
    x = Tensor(_sa(batch.s, batch.a))
    q1, q2 = c.q1(x)[:, 0], c.q2(x)[:, 0]
    loss_q = ((q1 - y).square() + (q2 - y).square()).mean()
    agent.critic_opt.zero_grad()
    loss_q.backward()
    agent.critic_opt.step()

    adv = q_t - mlp_numpy(agent.value, batch.s)[:, 0]
    w = np.minimum(np.exp(agent.beta * adv), agent.adv_cap)
    if not np.all(np.isfinite(w)):
        raise ContractError("non-finite advantage weights")
    loss_pi = -(agent.policy.log_prob(batch.s, batch.a) * w).mean()
    agent.actor_opt.zero_grad()
    loss_pi.backward()
    agent.actor_opt.step()
    c.update_targets()
    return {"loss_q": loss_q.item(), "loss_v": loss_v.item(), "loss_pi": loss_pi.item()}


# ---------------------------------------------------------------------
# evaluation in the true environment
# ---------------------------------------------------------------------


def evaluate_policy(policy, env: ToyEnv, episodes: int, rng: np.random.Generator,
                    stats: DatasetStats | None = None, deterministic: bool = True,
                    max_steps: int | None = None) -> tuple[float, float]:
    """Mean and std of undiscounted episode returns.

    ``policy`` is a GaussianPolicy (fed normalized states when ``stats`` is
    given) or any callable mapping a raw state to an action.
    """

    def act(s):
        if callable(policy) and not isinstance(policy, GaussianPolicy):
            return policy(s)
        x = s if stats is None else stats.normalize_state(s)
        x = x[None]
        return (policy.mode(x) if deterministic else policy.sample(x, rng))[0]

    returns = [float(np.sum(run_episode(env, act, rng, max_steps)[2])) for _ in range(episodes)]
    return float(np.mean(returns)), float(np.std(returns))


def reference_returns(env: ToyEnv, rng: np.random.Generator, episodes: int = 20) -> tuple[float, float]:
    """(uniform-random return, expert return) for normalized scoring."""
    rand, _ = evaluate_policy(lambda s: rng.uniform(env.action_low, env.action_high), env, episodes, rng)
    expert, _ = evaluate_policy(env.expert_action, env, episodes, rng)
    return rand, expert


def train_online_sac(env: ToyEnv, rng: np.random.Generator, target_score: float = 0.5,
                     max_env_steps: int = 30_000, start_steps: int = 1_000, eval_every: int = 200,
                     hidden=(64, 64), batch_size: int = 128, lr: float = 3e-4, gamma: float = 0.99,
                     alpha: float = 0.05):
    """Online SAC in a toy env, stopped once its normalized score reaches ``target_score``.

    Returns ``(policy, replay_columns, score)`` where ``replay_columns`` are the
    (s, a, r, s', done) arrays of every transition seen during training.
    """
    rand_ret, expert_ret = reference_returns(env, rng)
    agent = SAC.create(env.state_dim, env.action_dim, env.action_low, env.action_high, rng,
                       hidden=hidden, gamma=gamma, alpha=alpha, lr=lr)
    S, A, R, S2, D = [], [], [], [], []
    s = env.reset(rng)
    ep_len = 0
    score = 0.0
    for step in range(1, max_env_steps + 1):
        if step <= start_steps:
            a = rng.uniform(env.action_low, env.action_high)
        else:
            a = agent.policy.sample(s[None], rng)[0]
        s2, r, d = env.step(s, a)
        S.append(s), A.append(a), R.append(float(r)), S2.append(s2), D.append(bool(d))
        ep_len += 1
        s = s2
        if d or ep_len >= env.episode_cap:
            s, ep_len = env.reset(rng), 0
        if step > start_steps:
            idx = rng.integers(0, len(R), batch_size)
            batch = Batch(np.array([S[i] for i in idx]), np.array([A[i] for i in idx]), np.array([R[i] for i in idx]),
                          np.array([S2[i] for i in idx]), np.array([float(D[i]) for i in idx]))
            agent.update(batch, rng)
        if step > start_steps and step % eval_every == 0:
            ret, _ = evaluate_policy(agent.policy, env, 5, rng)
            score = (ret - rand_ret) / (expert_ret - rand_ret)
            if score >= target_score:
                break
    cols = (np.array(S), np.array(A), np.array(R), np.array(S2), np.array(D))
    return agent.policy, cols, float(score)
