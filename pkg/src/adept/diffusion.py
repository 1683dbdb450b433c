"""Conditional DDPM over next states with classifier-free guidance.

The noise network sees ``[x_k, cond, null_flag, time_embedding]`` where
``cond`` is either the normalized ``(s, a)`` pair or a learned null vector
(with ``null_flag = 1``). A separate head maps ``(s, a, s')`` to a reward
and a terminal logit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Mlp, Tensor, concat, mlp_numpy, where
from .errors import ContractError, GenerationError, ShapeError

TIME_EMB_DIM = 16
BETA_MAX = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by ``k - 1`` for ``k = 1..K``."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def K(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or len(beta) == 0 or np.any(beta <= 0) or np.any(beta >= 1):
            raise ContractError("betas must be a non-empty vector in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.empty_like(alpha)
        acc = 1.0
        for i, a in enumerate(alpha):
            acc = acc * a
            alpha_bar[i] = acc
        return cls(beta, alpha, alpha_bar)

    def abar(self, k: int) -> float:
        """alpha_bar at step k, with alpha_bar_0 = 1."""
        return 1.0 if k == 0 else float(self.alpha_bar[k - 1])

    def check_step(self, k: int) -> None:
        if not 1 <= k <= self.K:
            raise ContractError(f"denoising step {k} outside 1..{self.K}")


def cosine_alpha_bar(k, K: int, s: float):
    """Unclamped cosine-schedule alpha_bar = f(k) / f(0)."""
    f = lambda t: np.cos((np.asarray(t, float) / K + s) / (1 + s) * np.pi / 2) ** 2  # noqa: E731
    return f(k) / f(0)


def cosine_schedule(K: int, s: float = 1e-4) -> NoiseSchedule:
    if K < 1:
        raise ContractError("cosine schedule needs K >= 1")
    if s <= 0:
        raise ContractError("cosine schedule offset must be positive")
    ab = cosine_alpha_bar(np.arange(K + 1), K, s)
    beta = np.clip(1.0 - ab[1:] / ab[:-1], 1e-12, BETA_MAX)
    return NoiseSchedule.from_betas(beta)


def forward_noise(x0, k: int, eps, sched: NoiseSchedule) -> np.ndarray:
    sched.check_step(k)
    ab = sched.abar(k)
    return np.sqrt(ab) * np.asarray(x0, float) + np.sqrt(1.0 - ab) * np.asarray(eps, float)


def timestep_embedding(k) -> np.ndarray:
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = TIME_EMB_DIM // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DiffusionWorldModel:
    theta: Mlp
    null_cond: Tensor
    eta: Mlp
    schedule: NoiseSchedule
    state_dim: int
    action_dim: int
    guidance_weight: float = 0.1
    cond_dropout: float = 0.1
    # per-dimension scale of s' - s; when set the chain generates the scaled
    # change instead of s' itself
    delta_scale: np.ndarray | None = None

    def encode(self, s, s2) -> np.ndarray:
        s2 = np.atleast_2d(np.asarray(s2, float))
        if self.delta_scale is None:
            return s2
        return (s2 - np.reshape(s, s2.shape)) / self.delta_scale

    def decode(self, s, x0) -> np.ndarray:
        if self.delta_scale is None:
            return x0
        return np.reshape(s, x0.shape) + self.delta_scale * x0

    @classmethod
    def init(cls, state_dim: int, action_dim: int, rng: np.random.Generator, K: int = 10, s: float = 1e-4,
             hidden: int = 256, guidance_weight: float = 0.1, cond_dropout: float = 0.1,
             eta_depth: int = 3) -> "DiffusionWorldModel":
        cond_dim = state_dim + action_dim
        theta = Mlp.init([state_dim + cond_dim + 1 + TIME_EMB_DIM, hidden, hidden, state_dim], rng)
        eta = Mlp.init([2 * state_dim + action_dim, *([hidden] * (eta_depth - 1)), 2], rng)
        null = Tensor(rng.normal(0.0, 1.0, cond_dim), requires_grad=True)
        return cls(theta, null, eta, cosine_schedule(K, s), state_dim, action_dim, guidance_weight, cond_dropout)

    def parameters(self) -> list[Tensor]:
        return self.theta.parameters() + [self.null_cond] + self.eta.parameters()

    # -- noise network ------------------------------------------------
    def _theta_input(self, x_k, s, a, k, null_mask) -> Tensor:
        n = len(x_k)
        cond = np.concatenate([np.asarray(s, float).reshape(n, -1), np.asarray(a, float).reshape(n, -1)], axis=1)
        if cond.shape[1] != self.state_dim + self.action_dim:
            raise ShapeError(f"condition width {cond.shape[1]} != {self.state_dim + self.action_dim}")
        mask = np.asarray(null_mask, dtype=bool).reshape(n, 1)
        cond_t = where(mask, self.null_cond.reshape(1, -1), Tensor(cond))
        temb = timestep_embedding(np.broadcast_to(k, (n,)))
        return concat([Tensor(x_k), cond_t, Tensor(mask.astype(np.float64)), Tensor(temb)], axis=1)

    def eps_theta(self, x_k, s, a, k, null_mask) -> Tensor:
        """Noise prediction with graph recording (training path)."""
        return self.theta(self._theta_input(np.asarray(x_k, float), s, a, k, null_mask))

    def eps_theta_numpy(self, x_k, s, a, k, null_mask) -> np.ndarray:
        x_k = np.atleast_2d(np.asarray(x_k, float))
        n = len(x_k)
        s = np.asarray(s, float).reshape(n, -1)
        a = np.asarray(a, float).reshape(n, -1)
        mask = np.asarray(null_mask, dtype=bool).reshape(n, 1)
        cond = np.where(mask, self.null_cond.data[None, :], np.concatenate([s, a], axis=1))
        temb = timestep_embedding(np.broadcast_to(k, (n,)))
        return mlp_numpy(self.theta, np.concatenate([x_k, cond, mask.astype(float), temb], axis=1))

    # -- reward / terminal head --------------------------------------
    def eta_out(self, s, a, s2) -> Tensor:
        return self.eta(Tensor(np.concatenate([np.atleast_2d(s), np.atleast_2d(a), np.atleast_2d(s2)], axis=1)))

    # -- checkpoint sections ------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        d = self.theta.state_dict("theta.")
        d["theta.null"] = self.null_cond.data
        d.update(self.eta.state_dict("eta."))
        d["schedule.beta"] = self.schedule.beta
        d["schedule.meta"] = np.array([self.state_dim, self.action_dim, self.guidance_weight, self.cond_dropout,
                                       self.theta.widths[1], len(self.eta.widths) - 1], dtype=np.float64)
        if self.delta_scale is not None:
            d["schedule.delta"] = np.asarray(self.delta_scale, dtype=np.float64)
        return d

    @classmethod
    def from_state_dict(cls, d) -> "DiffusionWorldModel":
        ds, da, w, drop, hidden, depth = d["schedule.meta"]
        model = cls.init(int(ds), int(da), np.random.default_rng(0), K=len(d["schedule.beta"]),
                         hidden=int(hidden), guidance_weight=float(w), cond_dropout=float(drop), eta_depth=int(depth))
        model.theta.load_state_dict(d, "theta.")
        model.eta.load_state_dict(d, "eta.")
        model.null_cond.data = np.array(d["theta.null"], dtype=np.float64)
        model.schedule = NoiseSchedule.from_betas(d["schedule.beta"])
        if "schedule.delta" in d:
            model.delta_scale = np.array(d["schedule.delta"], dtype=np.float64)
        return model


def predict_noise_guided(model: DiffusionWorldModel, x_k, s, a, k) -> np.ndarray:
    """eps(x, null, k) + w * (eps(x, (s, a), k) - eps(x, null, k))."""
    x_k = np.atleast_2d(np.asarray(x_k, float))
    n = len(x_k)
    both = model.eps_theta_numpy(
        np.concatenate([x_k, x_k]),
        np.concatenate([np.reshape(s, (n, -1))] * 2),
        np.concatenate([np.reshape(a, (n, -1))] * 2),
        k,
        np.concatenate([np.ones(n, bool), np.zeros(n, bool)]),
    )
    eps_u, eps_c = both[:n], both[n:]
    w = model.guidance_weight
    # blended form keeps w = 0 and w = 1 bit-exact
    return (1.0 - w) * eps_u + w * eps_c


def denoise_mean_var(sched: NoiseSchedule, x_k, k: int, eps_hat) -> tuple[np.ndarray, float]:
    sched.check_step(k)
    alpha, beta = sched.alpha[k - 1], sched.beta[k - 1]
    ab, ab_prev = sched.abar(k), sched.abar(k - 1)
    mean = (np.asarray(x_k, float) - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return mean, var


def denoise_step(model: DiffusionWorldModel, x_k, s, a, k: int, noise_draw) -> np.ndarray:
    model.schedule.check_step(k)
    eps_hat = predict_noise_guided(model, x_k, s, a, k)
    mean, var = denoise_mean_var(model.schedule, x_k, k, eps_hat)
    if k == 1:
        return mean
    return mean + np.sqrt(var) * noise_draw


def sample_next_state(model: DiffusionWorldModel, s, a, rng: np.random.Generator) -> np.ndarray:
    """Run the reverse chain from pure noise; batched over rows of ``s``."""
    s = np.atleast_2d(np.asarray(s, float))
    a = np.atleast_2d(np.asarray(a, float))
    n = len(s)
    x = rng.standard_normal((n, model.state_dim))
    for k in range(model.schedule.K, 0, -1):
        noise = rng.standard_normal(x.shape) if k > 1 else 0.0
        x = denoise_step(model, x, s, a, k, noise)
        if not np.all(np.isfinite(x)):
            raise GenerationError(k)
    return model.decode(s, x)


def predict_reward_done(model: DiffusionWorldModel, s, a, s2) -> tuple[np.ndarray, np.ndarray]:
    out = mlp_numpy(model.eta, np.concatenate([np.atleast_2d(s), np.atleast_2d(a), np.atleast_2d(s2)], axis=1))
    return out[:, 0], 0.5 * (1.0 + np.tanh(0.5 * out[:, 1]))


def weighted_batch_loss(per_item: Tensor, weights) -> Tensor:
    """(1/N) * sum_i w_i * l_i."""
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != per_item.shape[0]:
        raise ContractError(f"{len(w)} weights for {per_item.shape[0]} items")
    return (per_item * w).sum() * (1.0 / len(w))


def diffusion_loss(model: DiffusionWorldModel, s, a, r, s2, done, weights=None, rng=None, *,
                   k=None, eps=None, null_mask=None, include_done: bool = True) -> Tensor:
    """Importance-weighted denoising + reward (+ terminal BCE) loss over a batch.

    ``k``, ``eps`` and ``null_mask`` default to fresh draws from ``rng``;
    they can be pinned for testing.
    """
    s2 = np.atleast_2d(np.asarray(s2, float))
    n = len(s2)
    if n == 0:
        raise ContractError("diffusion loss of an empty batch")
    K = model.schedule.K
    if k is None:
        k = rng.integers(1, K + 1, size=n)
    if eps is None:
        eps = rng.standard_normal(s2.shape)
    if null_mask is None:
        null_mask = rng.random(n) < model.cond_dropout
    k = np.broadcast_to(np.asarray(k), (n,))
    if np.any(k < 1) or np.any(k > K):
        raise ContractError(f"denoising steps must lie in 1..{K}")
    ab = model.schedule.alpha_bar[k - 1][:, None]
    x_k = np.sqrt(ab) * model.encode(s, s2) + np.sqrt(1.0 - ab) * eps
    eps_pred = model.eps_theta(x_k, s, a, k, null_mask)
    denoise = (eps_pred - eps).square().sum(axis=1)
    head = model.eta_out(s, a, s2)
    reward_err = (head[:, 0] - np.asarray(r, float)).square()
    per_item = denoise + reward_err
    if include_done:
        logit = head[:, 1]
        y = np.asarray(done, dtype=np.float64)
        per_item = per_item + logit.softplus() - logit * y
    w = np.ones(n) if weights is None else weights
    return weighted_batch_loss(per_item, w)
