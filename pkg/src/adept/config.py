"""Experiment configuration: defaults, the desk profile, and flat key = value files."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

LEARNERS = ("sac", "iql")
WM_TARGETS = ("state", "delta")


@dataclass
class ExperimentConfig:
    env: str = "point-mass-2d"
    tier: str = "random"
    dataset: str = ""  # path to an .ads file; empty means generate in-process
    n_transitions: int = 100_000
    learner: str = "sac"
    # diffusion world model
    K: int = 10
    cosine_s: float = 1e-4
    guidance: float = 0.1
    cond_dropout: float = 0.1
    wm_hidden: int = 256
    lr_wm: float = 3e-4
    B_m: int = 1024
    wm_init_steps: int = 50_000
    plateau_window: int = 5_000
    plateau_tol: float = 1e-4
    wm_target: str = "state"  # "state" generates s'; "delta" generates the scaled change s' - s
    # behavior cloning
    bc_steps: int = 50_000
    bc_batch: int = 256
    lr_bc: float = 1e-3
    # adaptation and rollouts
    importance_sampling: bool = True
    weight_clip_min: float = 0.1
    weight_clip_max: float = 10.0
    weight_clipping: bool = True
    clipping: bool = True
    use_world_model: bool = True
    H: int = 10
    N_e: int = 1000  # rollouts per epoch, not trajectory steps
    real_fraction: float = -1.0  # < 0 means uniform over D u D_hat
    buffer_capacity: int = 1_000_000
    # learner
    B_p: int = 256
    rl_hidden: int = 256
    lr: float = 3e-4
    gamma: float = 0.99
    alpha: float = 0.005
    rho: float = 0.005
    tau: float = 0.7
    beta: float = 3.0
    # schedule
    epochs: int = 1000
    steps_per_epoch: int = 1000
    rollout_every: int = 1  # epochs between PE phases
    eval_episodes: int = 20
    checkpoint_every: int = 0  # 0: final checkpoint only
    record_wallclock: bool = False
    seed: int = 0
    out_dir: str = "runs/adept"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.wm_target not in WM_TARGETS:
            raise ConfigError(f"wm_target must be one of {WM_TARGETS}, got {self.wm_target!r}")
        if self.learner not in LEARNERS:
            raise ConfigError(f"learner must be one of {LEARNERS}, got {self.learner!r}")
        for name in ("K", "H", "N_e", "B_m", "B_p", "wm_hidden", "rl_hidden", "buffer_capacity", "bc_batch",
                     "plateau_window", "rollout_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("epochs", "steps_per_epoch", "wm_init_steps", "bc_steps", "eval_episodes", "checkpoint_every",
                     "n_transitions"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ConfigError("cond_dropout must lie in [0, 1)")
        if not 0.0 < self.weight_clip_min <= self.weight_clip_max:
            raise ConfigError("weight clip needs 0 < min <= max")
        if self.real_fraction > 1.0:
            raise ConfigError("real_fraction must be <= 1")
        for name in ("lr", "lr_wm", "lr_bc", "rho"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def weight_clip(self) -> tuple[float, float] | None:
        return (self.weight_clip_min, self.weight_clip_max) if self.weight_clipping else None

    def replace(self, **changes) -> "ExperimentConfig":
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **changes)

    def resolved_out_dir(self) -> Path:
        return Path(os.environ.get("ADEPT_OUT") or self.out_dir)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls(**parse_overrides(text.splitlines()))


# Budget-sized profile for a single CPU. The guidance weight here uses the
# eps_u + w (eps_c - eps_u) form, so 1.1 matches 0.1 in the (1 + w) form.
# Generating the scaled change s' - s keeps a small network's one-step error
# well below the per-step motion.
DESK_PROFILE = dict(
    epochs=100, steps_per_epoch=200, n_transitions=100_000,
    wm_hidden=128, rl_hidden=64, B_m=256, N_e=50, wm_init_steps=4_000, bc_steps=2_000,
    plateau_window=1_000, guidance=1.1, eval_episodes=20, wm_target="delta",
)

PROFILES = {"paper": {}, "desk": DESK_PROFILE}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    t = _TYPES[key]
    raw = raw.strip()
    try:
        if t == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if t == "int":
            return int(raw.replace("_", ""))
        if t == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key} ({t}): {raw!r}") from None


def parse_overrides(items) -> dict:
    """Parse ``key = value`` strings; ``profile`` entries expand to a preset first."""
    base: dict = {}
    explicit: dict = {}
    for n, line in enumerate(items, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key == "profile":
            if raw not in PROFILES:
                raise ConfigError(f"unknown profile {raw!r}; known: {sorted(PROFILES)}")
            base.update(PROFILES[raw])
            continue
        if key not in _TYPES:
            raise ConfigError(f"line {n}: unknown config key {key!r}")
        if key in explicit:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        explicit[key] = _coerce(key, raw)
    return {**base, **explicit}


def load_config(path=None, overrides=(), profile: str | None = None) -> ExperimentConfig:
    """Profile preset, then the config file, then command-line overrides (later wins)."""
    merged = parse_overrides([f"profile = {profile}"]) if profile else {}
    if path is not None:
        try:
            merged.update(parse_overrides(Path(path).read_text().splitlines()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    merged.update(parse_overrides(overrides))
    return ExperimentConfig(**merged)


def desk_config(**changes) -> ExperimentConfig:
    return ExperimentConfig(**{**DESK_PROFILE, **changes})
