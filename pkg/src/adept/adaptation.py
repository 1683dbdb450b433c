"""Importance-sampled world-model update.

The behavior policy is estimated once by behavior cloning; every later
world-model step re-weights dataset transitions by pi(a|s) / pi_D(a|s).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Adam
from .dataset import Batch, OfflineDataset
from .diffusion import DiffusionWorldModel, diffusion_loss
from .errors import ContractError, NumericError
from .policy import GaussianPolicy

DEFAULT_CLIP = (0.1, 10.0)


@dataclass
class BCConfig:
    steps: int = 50_000
    batch_size: int = 256
    lr: float = 1e-3
    hidden: tuple = (256, 256)
    squash: bool = False
    plateau_window: int = 5_000
    plateau_tol: float = 1e-4


@dataclass
class WeightedBatch:
    batch: Batch
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if len(w) != len(self.batch):
            raise ContractError(f"{len(w)} weights for {len(self.batch)} transitions")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ContractError("importance weights must be finite and non-negative")
        self.weights = w


def _plateaued(history: list[float], window: int, tol: float) -> bool:
    if len(history) < 2 * window:
        return False
    prev = float(np.mean(history[-2 * window : -window]))
    cur = float(np.mean(history[-window:]))
    return (prev - cur) < tol * max(abs(prev), 1e-12)


def fit_behavior_policy(dataset: OfflineDataset, config: BCConfig | None = None,
                        rng: np.random.Generator | None = None,
                        action_bounds: tuple | None = None,
                        history: list | None = None) -> GaussianPolicy:
    """Maximum-likelihood Gaussian policy on the dataset's (s, a) pairs."""
    config = config or BCConfig()
    rng = rng or np.random.default_rng(0)
    if len(dataset) == 0:
        raise ContractError("behavior cloning on an empty dataset")
    if action_bounds is None:
        low, high = dataset.a.min(axis=0), dataset.a.max(axis=0)
        low, high = low - 1e-3, high + 1e-3
    else:
        low, high = action_bounds
    policy = GaussianPolicy.init(dataset.state_dim, dataset.action_dim, low, high, rng,
                                 hidden=config.hidden, squash=config.squash)
    opt = Adam(policy.parameters(), lr=config.lr)
    losses = history if history is not None else []
    n = len(dataset)
    for _ in range(config.steps):
        idx = rng.integers(0, n, size=min(config.batch_size, max(n, 1)))
        loss = -policy.log_prob(dataset.s[idx], dataset.a[idx]).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if len(losses) % config.plateau_window == 0 and _plateaued(losses, config.plateau_window, config.plateau_tol):
            break
    return policy


def importance_weights(batch: Batch, pi: GaussianPolicy, pi_d: GaussianPolicy,
                       clip: tuple[float, float] | None = DEFAULT_CLIP) -> WeightedBatch:
    """w_i = pi(a_i|s_i) / pi_D(a_i|s_i), computed in log space, then clamped."""
    lp = pi.log_prob_numpy(batch.s, batch.a)
    lq = pi_d.log_prob_numpy(batch.s, batch.a)
    bad = ~(np.isfinite(lp) & np.isfinite(lq))
    if bad.any():
        raise ContractError(f"non-finite log-density at sample {int(np.argmax(bad))}")
    w = np.exp(lp - lq)
    if clip is not None:
        w = np.clip(w, clip[0], clip[1])
    if not np.all(np.isfinite(w)):
        raise NumericError(f"importance weight overflow at sample {int(np.argmax(~np.isfinite(w)))}")
    return WeightedBatch(batch, w)


@dataclass
class WorldModelTrainer:
    """A world model plus its optimizer and the frozen behavior estimate."""

    model: DiffusionWorldModel
    optimizer: Adam
    pi_d: GaussianPolicy | None = None
    clip: tuple[float, float] | None = DEFAULT_CLIP

    @classmethod
    def create(cls, model, pi_d=None, lr: float = 3e-4, clip=DEFAULT_CLIP) -> "WorldModelTrainer":
        return cls(model, Adam(model.parameters(), lr=lr), pi_d, clip)


def iwu_step(trainer: WorldModelTrainer, dataset: OfflineDataset, pi: GaussianPolicy | None,
             batch_size: int, rng: np.random.Generator) -> tuple[float, float]:
    """One importance-weighted gradient step on (theta, eta).

    Samples ``batch_size`` transitions uniformly with replacement. ``pi`` is
    the numerator policy; ``None`` (or ``pi is pi_D``) gives unit weights.
    Returns ``(loss, mean_weight)``.
    """
    idx = rng.integers(0, len(dataset), size=batch_size)
    batch = dataset.batch(idx)
    if pi is None or trainer.pi_d is None or pi is trainer.pi_d:
        weights = np.ones(batch_size)
    else:
        weights = importance_weights(batch, pi, trainer.pi_d, trainer.clip).weights
    loss = diffusion_loss(trainer.model, batch.s, batch.a, batch.r, batch.s2, batch.done, weights, rng)
    trainer.optimizer.zero_grad()
    loss.backward()
    trainer.optimizer.step(allow_missing=True)
    return loss.item(), float(weights.mean())


def train_world_model(trainer: WorldModelTrainer, dataset: OfflineDataset, steps: int, batch_size: int,
                      rng: np.random.Generator, plateau_window: int = 5_000, plateau_tol: float = 1e-4,
                      history: list | None = None) -> list[float]:
    """Initialization phase: IWU with the behavior policy until a step cap or plateau."""
    losses = history if history is not None else []
    for i in range(1, steps + 1):
        loss, _ = iwu_step(trainer, dataset, trainer.pi_d, batch_size, rng)
        losses.append(loss)
        if i % plateau_window == 0 and _plateaued(losses, plateau_window, plateau_tol):
            break
    return losses
