"""The outer training loop as a batch experiment runner.

Phases per epoch: guided rollouts into the synthetic buffer, learner updates
on mixed batches, and importance-weighted world-model updates interleaved
with them. Metrics go to ``metrics.csv`` one row per epoch, flushed as they
are produced, so an aborted run leaves everything up to the failure.
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
import subprocess
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .adaptation import BCConfig, WorldModelTrainer, fit_behavior_policy, iwu_step, train_world_model
from .autodiff import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, _coerce, _fmt
from .dataset import DatasetStats, OfflineDataset, generate_dataset, load_dataset, normalize
from .diffusion import DiffusionWorldModel
from .envs import make_env
from .errors import ConfigError, ContractError
from .learners import IQL, SAC, evaluate_policy
from .policy import GaussianPolicy
from .rollout import ReplayBuffer, rollout_batch, sample_mixed

log = logging.getLogger("adept")

METRIC_COLUMNS = (
    "epoch", "learner_loss_q", "learner_loss_v", "learner_loss_pi", "diffusion_loss",
    "mean_importance_weight", "eval_return_mean", "eval_return_std", "wallclock_s",
)

# stream ids for the seed chain; fixed so ablations that vary one component
# keep every other stream identical
STREAMS = {"dataset": 0, "behavior": 1, "diffusion": 2, "rollout": 3, "learner": 4, "eval": 5, "adaptation": 6}


def seed_chain(seed: int) -> dict[str, list[int]]:
    return {name: [int(seed), sid] for name, sid in STREAMS.items()}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(seed_chain(seed)[name])


def build_id() -> str:
    try:
        from importlib.metadata import version

        ver = version("artifact")
    except Exception:
        ver = "unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"artifact-{ver}" + (f"+{rev}" if rev else "")


@dataclass
class RunRecord:
    config: ExperimentConfig
    rows: list[dict] = field(default_factory=list)
    build: str = ""
    seeds: dict = field(default_factory=dict)
    out_dir: Path | None = None
    run_id: str = "run"

    def append(self, row: dict) -> None:
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ContractError("epoch index must increase strictly")
        self.rows.append(row)

    @property
    def metrics_path(self) -> Path | None:
        return None if self.out_dir is None else self.out_dir / "metrics.csv"

    def final(self, metric: str) -> float:
        return float(self.rows[-1][metric]) if self.rows else math.nan


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class MetricsWriter:
    def __init__(self, path: Path):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh)
        self.w.writerow(METRIC_COLUMNS)
        self.fh.flush()

    def write(self, row: dict) -> None:
        self.w.writerow([_cell(row[c]) for c in METRIC_COLUMNS])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------
# datasets, policies, checkpoints
# ---------------------------------------------------------------------


@lru_cache(maxsize=8)
def _generated(env: str, tier: str, n: int, seed: int) -> OfflineDataset:
    return generate_dataset(env, tier, n, stream(seed, "dataset"))


def prepare_dataset(config: ExperimentConfig) -> OfflineDataset:
    """Load ``config.dataset`` or generate one from the dataset stream (cached per process)."""
    if config.dataset:
        return load_dataset(config.dataset)
    if config.n_transitions < 1:
        raise ConfigError("n_transitions must be >= 1 when no dataset file is given")
    return _generated(config.env, config.tier, config.n_transitions, config.seed)


def policy_state(policy: GaussianPolicy, stats: DatasetStats | None = None) -> dict[str, np.ndarray]:
    d = policy.net.state_dict("policy.")
    d["policy.low"] = policy.action_low
    d["policy.high"] = policy.action_high
    d["policy.meta"] = np.array([float(policy.squash), len(policy.net.widths) - 1])
    if stats is not None:
        d.update({f"stats.{k}": v for k, v in stats.as_dict().items()})
    return d


def save_policy(path, policy: GaussianPolicy, stats: DatasetStats | None = None) -> None:
    save_checkpoint(path, policy_state(policy, stats))


def load_policy(path) -> tuple[GaussianPolicy, DatasetStats | None]:
    d = load_checkpoint(path)
    try:
        squash = bool(d["policy.meta"][0])
        n_layers = int(d["policy.meta"][1])
        widths = [d["policy.0.W"].shape[0]] + [d[f"policy.{i}.b"].shape[0] for i in range(n_layers)]
        low, high = d["policy.low"], d["policy.high"]
    except KeyError as exc:
        raise ContractError(f"not a policy checkpoint: missing {exc}") from None
    policy = GaussianPolicy.init(widths[0], widths[-1] // 2, low, high, np.random.default_rng(0),
                                 hidden=tuple(widths[1:-1]), squash=squash)
    policy.net.load_state_dict(d, "policy.")
    stats_d = {k[6:]: v for k, v in d.items() if k.startswith("stats.")}
    return policy, (DatasetStats.from_dict(stats_d) if stats_d else None)


# ---------------------------------------------------------------------
# phases
# ---------------------------------------------------------------------


def _bc_config(config: ExperimentConfig) -> BCConfig:
    return BCConfig(steps=config.bc_steps, batch_size=config.bc_batch, lr=config.lr_bc,
                    hidden=(config.rl_hidden, config.rl_hidden), squash=False,
                    plateau_window=config.plateau_window, plateau_tol=config.plateau_tol)


def init_world_model(config: ExperimentConfig, ds_norm: OfflineDataset, action_bounds) -> WorldModelTrainer:
    """Behavior cloning, then the initialization phase of the world model."""
    pi_d = None
    if config.importance_sampling:
        pi_d = fit_behavior_policy(ds_norm, _bc_config(config), stream(config.seed, "behavior"), action_bounds)
        log.info("phase=BC done")
    rng = stream(config.seed, "diffusion")
    model = DiffusionWorldModel.init(ds_norm.state_dim, ds_norm.action_dim, rng, K=config.K, s=config.cosine_s,
                                     hidden=config.wm_hidden, guidance_weight=config.guidance,
                                     cond_dropout=config.cond_dropout)
    if config.wm_target == "delta":
        model.delta_scale = np.maximum((ds_norm.s2 - ds_norm.s).std(axis=0), 1e-6)
    trainer = WorldModelTrainer.create(model, pi_d, lr=config.lr_wm, clip=config.weight_clip)
    losses = train_world_model(trainer, ds_norm, config.wm_init_steps, config.B_m, rng,
                               config.plateau_window, config.plateau_tol)
    log.info("phase=WM-init steps=%d final_loss=%s", len(losses), f"{losses[-1]:.5f}" if losses else "nan")
    return trainer


def make_learner(config: ExperimentConfig, ds_norm: OfflineDataset, env, rng):
    hidden = (config.rl_hidden, config.rl_hidden)
    if config.learner == "sac":
        return SAC.create(ds_norm.state_dim, ds_norm.action_dim, env.action_low, env.action_high, rng, hidden=hidden,
                          gamma=config.gamma, alpha=config.alpha, rho=config.rho, lr=config.lr)
    return IQL.create(ds_norm.state_dim, ds_norm.action_dim, env.action_low, env.action_high, rng, hidden=hidden,
                      gamma=config.gamma, tau=config.tau, beta=config.beta, rho=config.rho, lr=config.lr)


def _nanmean(xs) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else math.nan


# ---------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------


def run_adept(config: ExperimentConfig, run_id: str = "run", out_dir=None) -> RunRecord:
    """One full training run; see the module docstring for the phase order."""
    config.validate()
    out = Path(out_dir) if out_dir is not None else config.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text())
    record = RunRecord(config, build=build_id(), seeds=seed_chain(config.seed), out_dir=out, run_id=run_id)

    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(handler)
    old_level = log.level
    if log.getEffectiveLevel() > logging.INFO:
        log.setLevel(logging.INFO)
    writer = MetricsWriter(out / "metrics.csv")
    timing = open(out / "timing.csv", "w", newline="")
    timing.write("epoch,wallclock_s\n")
    epoch, phase = 0, "setup"
    try:
        log.info("run=%s build=%s seed=%d learner=%s", run_id, record.build, config.seed, config.learner)
        phase = "data"
        raw = prepare_dataset(config)
        ds, stats = normalize(raw)
        env = make_env(raw.env_name)
        bounds = (env.action_low, env.action_high)

        trainer = None
        if config.use_world_model:
            phase = "init"
            trainer = init_world_model(config, ds, bounds)
            save_checkpoint(out / "world_model_init.ckpt", trainer.model.state_dict())

        t0 = time.perf_counter()
        rng_roll = stream(config.seed, "rollout")
        rng_learn = stream(config.seed, "learner")
        rng_eval = stream(config.seed, "eval")
        rng_wm = stream(config.seed, "adaptation")
        agent = make_learner(config, ds, env, rng_learn)
        buffer = ReplayBuffer(config.buffer_capacity, ds.state_dim, ds.action_dim) if trainer else None
        adapt = trainer is not None and config.importance_sampling
        real_fraction = None if config.real_fraction < 0 else config.real_fraction

        for epoch in range(1, config.epochs + 1):
            if trainer is not None and (epoch - 1) % config.rollout_every == 0:
                phase = "PE"
                trajs = rollout_batch(trainer.model, agent.policy, ds, config.H, config.N_e, rng_roll,
                                      clip=config.clipping)
                for tr in trajs:
                    buffer.push(tr)
                log.info("epoch=%d phase=PE rollouts=%d buffer=%d", epoch, len(trajs), len(buffer))
            lq, lv, lpi, ld, mw = [], [], [], [], []
            for _ in range(config.steps_per_epoch):
                phase = "policy-update"
                batch = sample_mixed(buffer, ds, config.B_p, rng_learn, real_fraction)
                losses = agent.update(batch, rng_learn)
                lq.append(losses["loss_q"]), lv.append(losses["loss_v"]), lpi.append(losses["loss_pi"])
                if adapt:
                    phase = "IWU"
                    loss, w = iwu_step(trainer, ds, agent.policy, config.B_m, rng_wm)
                    ld.append(loss), mw.append(w)
            log.info("epoch=%d phase=policy-update steps=%d", epoch, config.steps_per_epoch)
            if adapt:
                log.info("epoch=%d phase=IWU steps=%d", epoch, config.steps_per_epoch)
            phase = "eval"
            if config.eval_episodes:
                ret_mean, ret_std = evaluate_policy(agent.policy, env, config.eval_episodes, rng_eval, stats=stats)
            else:
                ret_mean = ret_std = math.nan
            elapsed = time.perf_counter() - t0
            row = {
                "epoch": epoch, "learner_loss_q": _nanmean(lq), "learner_loss_v": _nanmean(lv),
                "learner_loss_pi": _nanmean(lpi), "diffusion_loss": _nanmean(ld),
                "mean_importance_weight": _nanmean(mw), "eval_return_mean": ret_mean, "eval_return_std": ret_std,
                "wallclock_s": elapsed if config.record_wallclock else 0.0,
            }
            record.append(row)
            writer.write(row)
            timing.write(f"{epoch},{elapsed!r}\n")
            timing.flush()
            log.info("epoch=%d phase=eval return=%.3f", epoch, ret_mean)
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                phase = "checkpoint"
                _checkpoint(out, trainer, agent, stats, suffix=f"_e{epoch}")

        phase = "checkpoint"
        _checkpoint(out, trainer, agent, stats)
        log.info("run=%s finished epochs=%d", run_id, config.epochs)
    except Exception as exc:
        log.error("run=%s aborted epoch=%d phase=%s: %s: %s", run_id, epoch, phase, type(exc).__name__, exc)
        exc.epoch, exc.phase = epoch, phase
        raise
    finally:
        writer.close()
        timing.close()
        log.removeHandler(handler)
        log.setLevel(old_level)
        handler.close()
    return record


def _checkpoint(out: Path, trainer, agent, stats, suffix: str = "") -> None:
    if trainer is not None:
        save_checkpoint(out / f"world_model{suffix}.ckpt", trainer.model.state_dict())
    save_policy(out / f"policy{suffix}.ckpt", agent.policy, stats)


def train_wm_only(config: ExperimentConfig, out_dir=None) -> tuple[WorldModelTrainer, DatasetStats]:
    """Behavior cloning plus world-model initialization; writes ``world_model.ckpt``."""
    out = Path(out_dir) if out_dir is not None else config.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    raw = prepare_dataset(config)
    ds, stats = normalize(raw)
    env = make_env(raw.env_name)
    trainer = init_world_model(config, ds, (env.action_low, env.action_high))
    save_checkpoint(out / "world_model.ckpt", trainer.model.state_dict())
    if trainer.pi_d is not None:
        save_policy(out / "behavior_policy.ckpt", trainer.pi_d, stats)
    return trainer, stats


# ---------------------------------------------------------------------
# ablations and plot data
# ---------------------------------------------------------------------


def parse_sweep(items) -> dict[str, list]:
    """``["K=5,10,20", "clipping=true,false"]`` -> ``{"K": [5, 10, 20], ...}``."""
    sweep = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"sweep entry needs key=v1,v2,...: {item!r}")
        key, raw = (p.strip() for p in item.split("=", 1))
        try:
            values = [_coerce(key, v) for v in raw.split(",") if v.strip()]
        except KeyError:
            raise ConfigError(f"unknown sweep key {key!r}") from None
        if not values:
            raise ConfigError(f"empty sweep for {key!r}")
        sweep[key] = values
    return sweep


def sweep_points(sweep: dict[str, list]) -> list[dict]:
    keys = list(sweep)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(sweep[k] for k in keys))]


def point_id(point: dict) -> str:
    return "_".join(f"{k}-{_fmt(v)}" for k, v in point.items()) or "base"


def run_ablation(config: ExperimentConfig, sweep: dict[str, list], out_dir=None) -> list[RunRecord]:
    """One run per grid point, all sharing ``config.seed``; writes ``ablation.csv``."""
    points = sweep_points(sweep)
    for p in points:
        config.replace(**p)  # validate every point before spending compute
    base = Path(out_dir) if out_dir is not None else config.resolved_out_dir()
    base.mkdir(parents=True, exist_ok=True)
    records = []
    for p in points:
        rid = point_id(p)
        records.append(run_adept(config.replace(**p), run_id=rid, out_dir=base / rid))
    keys = list(sweep)
    with open(base / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", *keys, "epochs", "final_return_mean", "final_return_std", "final_diffusion_loss",
                    "final_mean_importance_weight"])
        for p, rec in zip(points, records):
            w.writerow([rec.run_id, *(_fmt(p[k]) for k in keys), len(rec.rows),
                        *(_cell(rec.final(m)) for m in ("eval_return_mean", "eval_return_std", "diffusion_loss",
                                                          "mean_importance_weight"))])
    return records


def plot_export(records, path, metrics=None) -> Path:
    """Long-format series ``run_id, epoch, metric, value`` for any plotting tool.

    ``records`` holds RunRecords or ``(run_id, rows)`` pairs. Repeated run ids
    get a ``#n`` suffix so merged runs never collide.
    """
    seen: dict[str, int] = {}
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "epoch", "metric", "value"])
        for rec in records:
            rid, rows = (rec.run_id, rec.rows) if isinstance(rec, RunRecord) else rec
            seen[rid] = seen.get(rid, 0) + 1
            if seen[rid] > 1:
                rid = f"{rid}#{seen[rid]}"
            names = metrics or [c for c in METRIC_COLUMNS if c != "epoch"]
            for row in rows:
                for m in names:
                    w.writerow([rid, row["epoch"], m, _cell(float(row[m]))])
    return path


def read_series(path) -> list[tuple[str, int, str, float]]:
    with open(path, newline="") as fh:
        return [(r["run_id"], int(r["epoch"]), r["metric"], float(r["value"])) for r in csv.DictReader(fh)]
