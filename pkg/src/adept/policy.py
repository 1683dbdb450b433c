"""State-conditional diagonal Gaussian policies, optionally tanh-squashed."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Mlp, Tensor, as_tensor, mlp_numpy

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_2PI = float(np.log(2 * np.pi))
_ATANH_EDGE = 1.0 - 1e-6
_LOG_2 = float(np.log(2.0))


@dataclass
class GaussianPolicy:
    net: Mlp
    action_low: np.ndarray
    action_high: np.ndarray
    squash: bool = False

    @classmethod
    def init(cls, state_dim, action_dim, low, high, rng, hidden=(256, 256), squash=False) -> "GaussianPolicy":
        net = Mlp.init([state_dim, *hidden, 2 * action_dim], rng)
        return cls(net, np.asarray(low, float), np.asarray(high, float), squash)

    @property
    def action_dim(self) -> int:
        return self.net.out_dim // 2

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.action_high + self.action_low)

    @property
    def half_range(self) -> np.ndarray:
        return 0.5 * (self.action_high - self.action_low)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.net.copy(), self.action_low.copy(), self.action_high.copy(), self.squash)

    # -- distribution parameters --------------------------------------
    def dist(self, states) -> tuple[Tensor, Tensor]:
        out = self.net(as_tensor(states))
        d = self.action_dim
        return out[:, :d], out[:, d:].clip(LOG_STD_MIN, LOG_STD_MAX)

    def dist_numpy(self, states) -> tuple[np.ndarray, np.ndarray]:
        out = mlp_numpy(self.net, np.atleast_2d(states))
        d = self.action_dim
        return out[:, :d], np.clip(out[:, d:], LOG_STD_MIN, LOG_STD_MAX)

    # -- densities ----------------------------------------------------
    def _pre_squash(self, actions: np.ndarray) -> np.ndarray:
        y = (np.asarray(actions, float) - self.center) / self.half_range
        return np.arctanh(np.clip(y, -_ATANH_EDGE, _ATANH_EDGE))

    def _log_det(self, u: np.ndarray) -> np.ndarray:
        log_one_minus_t2 = 2.0 * (_LOG_2 - u - np.logaddexp(0.0, -2.0 * u))
        return np.sum(log_one_minus_t2 + np.log(self.half_range), axis=1)

    def log_prob(self, states, actions) -> Tensor:
        """log pi(a|s) in action space, with the tanh change of variables when squashed."""
        mean, log_std = self.dist(states)
        acts = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        u = self._pre_squash(acts) if self.squash else acts
        z = (Tensor(u) - mean) / log_std.exp()
        lp = (z.square() * -0.5 - log_std - 0.5 * _LOG_2PI).sum(axis=1)
        if self.squash:
            lp = lp - self._log_det(u)
        return lp

    def log_prob_numpy(self, states, actions) -> np.ndarray:
        mean, log_std = self.dist_numpy(states)
        acts = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        u = self._pre_squash(acts) if self.squash else acts
        z = (u - mean) / np.exp(log_std)
        lp = np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI, axis=1)
        if self.squash:
            lp = lp - self._log_det(u)
        return lp

    # -- sampling -----------------------------------------------------
    def rsample(self, states, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        """Reparameterized draw; returns (actions, log_prob) as graph tensors."""
        mean, log_std = self.dist(states)
        noise = rng.standard_normal(mean.shape)
        u = mean + log_std.exp() * noise
        lp = (log_std * -1.0 - 0.5 * _LOG_2PI - 0.5 * noise * noise).sum(axis=1)
        if not self.squash:
            return u, lp
        a = u.tanh() * self.half_range + self.center
        # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
        corr = ((u * -1.0 - (u * -2.0).softplus() + _LOG_2) * 2.0 + np.log(self.half_range)).sum(axis=1)
        return a, lp - corr

    def sample(self, states, rng: np.random.Generator) -> np.ndarray:
        mean, log_std = self.dist_numpy(states)
        u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        if self.squash:
            return np.tanh(u) * self.half_range + self.center
        return np.clip(u, self.action_low, self.action_high)

    def mode(self, states) -> np.ndarray:
        mean, _ = self.dist_numpy(states)
        if self.squash:
            return np.tanh(mean) * self.half_range + self.center
        return np.clip(mean, self.action_low, self.action_high)
