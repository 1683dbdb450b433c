"""Desk-scale experiments shared by the scripts and the acceptance suite."""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adaptation import BCConfig, WorldModelTrainer, fit_behavior_policy, iwu_step
from .autodiff import Adam, Mlp, Tensor, forward_mlp, mlp_numpy
from .config import ExperimentConfig, desk_config
from .dataset import OfflineDataset, normalize
from .diffusion import DiffusionWorldModel, diffusion_loss, sample_next_state
from .envs import make_env
from .harness import RunRecord, init_world_model, make_learner, prepare_dataset, run_adept, stream
from .learners import IQL, expectile_loss
from .policy import GaussianPolicy
from .rollout import rollout_batch

NOISE_STD = 0.1


def linear_gaussian(rng: np.random.Generator, n: int, actions=None):
    """s' = 0.9 s + 0.1 a + N(0, 0.01) with s, a ~ U[-1, 1] unless actions are given."""
    s = rng.uniform(-1.0, 1.0, (n, 1))
    a = rng.uniform(-1.0, 1.0, (n, 1)) if actions is None else np.reshape(actions, (n, 1))
    return s, a, 0.9 * s + 0.1 * a + NOISE_STD * rng.standard_normal((n, 1))


def linear_gaussian_dataset(rng: np.random.Generator, n: int) -> OfflineDataset:
    s, a, s2 = linear_gaussian(rng, n)
    return OfflineDataset.from_arrays("linear-gaussian", "random", s, a, np.zeros(n), s2, np.zeros(n, bool))


# ---------------------------------------------------------------------
# sampler fidelity
# ---------------------------------------------------------------------


@dataclass
class FidelityReport:
    probes: np.ndarray  # (25, 2) of (s, a)
    mean_error: np.ndarray
    std_ratio: np.ndarray
    seconds: float

    @property
    def max_mean_error(self) -> float:
        return float(self.mean_error.max())

    @property
    def ok(self) -> bool:
        return self.max_mean_error < 0.05 and bool(np.all((self.std_ratio >= 0.5) & (self.std_ratio <= 2.0)))


def ddpm_fidelity(steps: int = 20_000, seed: int = 0, hidden: int = 128, batch: int = 256, lr: float = 1e-3,
                  guidance: float = 1.0, n_samples: int = 4000) -> FidelityReport:
    """Train on the linear-Gaussian transition, then compare sampled moments on a 5 x 5 probe grid.

    Data pass through the same per-dimension normalization as any dataset;
    samples are mapped back to raw units before comparison.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    ds, stats = normalize(linear_gaussian_dataset(rng, 50_000))
    model = DiffusionWorldModel.init(1, 1, rng, hidden=hidden, guidance_weight=guidance)
    zeros = np.zeros(len(ds))
    opt = Adam(model.parameters(), lr=lr)
    for _ in range(steps):
        idx = rng.integers(0, len(ds), batch)
        loss = diffusion_loss(model, ds.s[idx], ds.a[idx], zeros[idx], ds.s2[idx], zeros[idx], rng=rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
    grid = np.linspace(-1.0, 1.0, 5)
    probes = np.array([(si, ai) for si in grid for ai in grid])
    err, ratio = [], []
    for si, ai in probes:
        s = stats.normalize_state(np.full((n_samples, 1), si))
        out = stats.denormalize_state(sample_next_state(model, s, np.full((n_samples, 1), ai), rng))[:, 0]
        err.append(abs(out.mean() - (0.9 * si + 0.1 * ai)))
        ratio.append(out.std() / NOISE_STD)
    return FidelityReport(probes, np.array(err), np.array(ratio), time.perf_counter() - t0)


# ---------------------------------------------------------------------
# adaptation under a shifted policy
# ---------------------------------------------------------------------


def shifted_policy(mean: float = 0.75, std: float = 0.15) -> GaussianPolicy:
    """State-independent Gaussian over a scalar action, favoring a in [0.5, 1]."""
    pol = GaussianPolicy.init(1, 1, np.array([-1.0]), np.array([1.0]), np.random.default_rng(0), hidden=(4,))
    for p in pol.parameters():
        p.data[...] = 0.0
    pol.net.biases[-1].data[:] = [mean, np.log(std)]
    return pol


@dataclass
class AdaptationReport:
    seed: int
    mse_pre: float
    mse_post: float
    mse_unweighted: float  # same number of extra steps without importance weights
    mean_weight: float

    @property
    def improved(self) -> bool:
        return self.mse_post <= self.mse_pre


def _one_step_mse(model, s, a, s2, seed: int) -> float:
    pred = sample_next_state(model, s, a, np.random.default_rng(seed))
    return float(np.mean((pred - s2) ** 2))


def adaptation_benefit(seed: int, n: int = 20_000, hidden: int = 16, init_steps: int = 1500,
                       adapt_steps: int = 1500, batch: int = 256, lr: float = 1e-3,
                       n_eval: int = 4000) -> AdaptationReport:
    """One-step prediction MSE under pi_phi before and after importance-weighted updates.

    The small default width makes the model trade accuracy across the action
    range, which is where re-weighting toward pi_phi can pay off.
    """
    rng = np.random.default_rng([seed, 0])
    ds = linear_gaussian_dataset(rng, n)
    pi_d = fit_behavior_policy(ds, BCConfig(steps=1500, batch_size=256, hidden=(32, 32)), np.random.default_rng([seed, 1]))
    pi = shifted_policy()
    model = DiffusionWorldModel.init(1, 1, np.random.default_rng([seed, 2]), hidden=hidden, guidance_weight=1.1)
    trainer = WorldModelTrainer.create(model, pi_d, lr=lr)
    train_rng = np.random.default_rng([seed, 3])
    for _ in range(init_steps):
        iwu_step(trainer, ds, pi_d, batch, train_rng)

    eval_rng = np.random.default_rng([seed, 4])
    a_eval = np.clip(pi.sample(np.zeros((n_eval, 1)), eval_rng), -1.0, 1.0)
    s_e, a_e, s2_e = linear_gaussian(eval_rng, n_eval, a_eval)
    pre = _one_step_mse(model, s_e, a_e, s2_e, seed)

    control_trainer = copy.deepcopy(trainer)  # parameters and optimizer moments together
    control = control_trainer.model
    weights = []
    rng_a, rng_b = np.random.default_rng([seed, 5]), np.random.default_rng([seed, 5])
    for _ in range(adapt_steps):
        _, w = iwu_step(trainer, ds, pi, batch, rng_a)
        weights.append(w)
        iwu_step(control_trainer, ds, pi_d, batch, rng_b)
    return AdaptationReport(seed, pre, _one_step_mse(model, s_e, a_e, s2_e, seed),
                            _one_step_mse(control, s_e, a_e, s2_e, seed), float(np.mean(weights)))


# ---------------------------------------------------------------------
# closed loop on point-mass-2d
# ---------------------------------------------------------------------

ARMS = {
    "adept_sac": dict(learner="sac", use_world_model=True),
    "sac": dict(learner="sac", use_world_model=False),
    "adept_iql": dict(learner="iql", use_world_model=True),
    "iql": dict(learner="iql", use_world_model=False),
    "adept_sac_noclip": dict(learner="sac", use_world_model=True, clipping=False),
}


def arm_config(arm: str, seed: int, **overrides) -> ExperimentConfig:
    return desk_config(seed=seed, **{**ARMS[arm], **overrides})


def run_arm(arm: str, seed: int, out_dir, **overrides) -> tuple[RunRecord, float]:
    """One desk run of ``arm``; returns the record and its wall time in seconds."""
    t0 = time.perf_counter()
    rec = run_adept(arm_config(arm, seed, **overrides), run_id=f"{arm}_s{seed}", out_dir=Path(out_dir) / f"{arm}_s{seed}")
    return rec, time.perf_counter() - t0


def containment_check(config: ExperimentConfig, n_rollouts: int = 200) -> tuple[int, int]:
    """(out-of-range values, values checked) over clipped synthetic rollouts from a fresh model."""
    raw = prepare_dataset(config)
    ds, _ = normalize(raw)
    env = make_env(raw.env_name)
    trainer = init_world_model(config, ds, (env.action_low, env.action_high))
    agent = make_learner(config, ds, env, stream(config.seed, "learner"))
    trajs = rollout_batch(trainer.model, agent.policy, ds, config.H, n_rollouts, stream(config.seed, "rollout"),
                          clip=True)
    lo, hi = ds.state_bounds()
    bad = total = 0
    for tr in trajs:
        bad += int(np.sum((tr.states < lo) | (tr.states > hi)))
        bad += int(np.sum((tr.rewards < ds.stats.reward_min) | (tr.rewards > ds.stats.reward_max)))
        total += tr.states.size + tr.rewards.size
    return bad, total


# ---------------------------------------------------------------------
# gradient and expectile oracles
# ---------------------------------------------------------------------


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def _relu_margin(net: Mlp, x: np.ndarray) -> float:
    h, margin = x, np.inf
    for w, b, act in zip(net.weights, net.biases, net.activations):
        pre = h @ w.data + b.data
        if act == "relu":
            margin = min(margin, float(np.min(np.abs(pre))))
        h = np.maximum(pre, 0.0) if act == "relu" else np.tanh(pre) if act == "tanh" else pre
    return margin


def gradcheck_random_net(rng: np.random.Generator, max_depth: int = 3, max_width: int = 16,
                         min_margin: float = 1e-3) -> float:
    """Worst relative error between backprop and central differences on one random MLP.

    ReLU inputs are redrawn until every pre-activation sits ``min_margin``
    away from the kink, where a finite difference is not a derivative.
    """
    depth = int(rng.integers(1, max_depth + 1))
    widths = [int(rng.integers(1, 9))] + [int(rng.integers(1, max_width + 1))] * depth + [int(rng.integers(1, 4))]
    hidden = "relu" if rng.random() < 0.5 else "tanh"
    net = Mlp.init(widths, rng, hidden=hidden)
    for p in net.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.data.shape)  # keep biases off zero
    x = rng.normal(size=(4, widths[0]))
    while hidden == "relu" and _relu_margin(net, x) < min_margin:
        x = rng.normal(size=(4, widths[0]))
    y = rng.normal(size=(4, widths[-1]))

    loss = (forward_mlp(net, x) - y).square().mean()
    loss.backward()
    worst = 0.0
    for p in net.parameters():
        fd = central_difference(lambda: float(((mlp_numpy(net, x) - y) ** 2).mean()), p.data)
        err = np.abs(p.grad - fd) / np.maximum(1e-8, np.abs(p.grad) + np.abs(fd))
        worst = max(worst, float(err.max()))
    return worst


def expectile_brute(y, tau: float) -> float:
    """The tau-expectile of a sample by bisection on the sign of the loss derivative."""
    y = np.asarray(y, dtype=np.float64)
    lo, hi = float(y.min()), float(y.max())
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        u = y - mid
        if np.mean(np.where(u < 0, 1 - tau, tau) * u) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def value_expectile_fit(tau: float, seed: int = 0, n: int = 400, steps: int = 3000) -> tuple[float, float]:
    """(fitted V, brute-force expectile) for an IQL value net regressed on fixed targets at one state."""
    rng = np.random.default_rng(seed)
    y = rng.gamma(2.0, 1.0, n)
    agent = IQL.create(1, 1, [-1.0], [1.0], rng, hidden=(16,), tau=tau, lr=1e-2)
    s = Tensor(np.ones((n, 1)))
    for _ in range(steps):
        loss = expectile_loss(agent.value(s)[:, 0] * -1.0 + y, tau).mean()
        agent.value_opt.zero_grad()
        loss.backward()
        agent.value_opt.step()
    return float(mlp_numpy(agent.value, np.ones((1, 1)))[0, 0]), expectile_brute(y, tau)


# ---------------------------------------------------------------------
# denoising-step ablation
# ---------------------------------------------------------------------


def one_step_mse_by_K(Ks=(1, 10), seed: int = 0, steps: int = 3000, n_heldout: int = 2000,
                      **overrides) -> dict[int, float]:
    """Held-out one-step state MSE (normalized units) of world models that differ only in K."""
    base = desk_config(seed=seed, importance_sampling=False, wm_init_steps=steps, plateau_window=steps,
                       **overrides)
    raw = prepare_dataset(base)
    env = make_env(raw.env_name)
    ds, stats = normalize(raw)
    rng = np.random.default_rng([seed, 99])
    s_raw = ds.stats.denormalize_state(ds.s[rng.integers(0, len(ds), n_heldout)])
    a = rng.uniform(env.action_low, env.action_high, (n_heldout, env.action_dim))
    s2_raw, _, _ = env.step(s_raw, a)
    s, s2 = stats.normalize_state(s_raw), stats.normalize_state(s2_raw)
    out = {}
    for K in Ks:
        trainer = init_world_model(base.replace(K=K), ds, (env.action_low, env.action_high))
        pred = sample_next_state(trainer.model, s, a, np.random.default_rng([seed, 100]))
        out[K] = float(np.mean((pred - s2) ** 2))
    return out
