import math

import numpy as np
import pytest

from adept.autodiff import load_checkpoint
from adept.config import DESK_PROFILE, ExperimentConfig, desk_config, load_config, parse_overrides
from adept.errors import ConfigError, ContractError
from adept.harness import (
    METRIC_COLUMNS,
    RunRecord,
    load_policy,
    parse_sweep,
    plot_export,
    read_metrics,
    read_series,
    run_ablation,
    run_adept,
    seed_chain,
    sweep_points,
)


def tiny(**kw) -> ExperimentConfig:
    base = dict(n_transitions=400, wm_hidden=16, rl_hidden=16, B_m=32, B_p=32, N_e=4, H=3, wm_init_steps=20,
                bc_steps=20, plateau_window=10, epochs=2, steps_per_epoch=4, eval_episodes=2, guidance=1.1)
    return desk_config(**{**base, **kw})


# -- configuration -------------------------------------------------------------

def test_defaults():
    c = ExperimentConfig()
    assert (c.K, c.H, c.gamma, c.guidance, c.B_m, c.B_p) == (10, 10, 0.99, 0.1, 1024, 256)
    assert (c.weight_clip_min, c.weight_clip_max, c.tau, c.beta, c.alpha, c.rho) == (0.1, 10.0, 0.7, 3.0, 0.005, 0.005)
    assert c.wm_target == "state" and c.weight_clip == (0.1, 10.0)
    assert c.replace(weight_clipping=False).weight_clip is None


def test_text_round_trip():
    c = tiny(seed=3, clipping=False, lr=1.25e-4, learner="iql")
    assert ExperimentConfig.from_text(c.to_text()) == c


def test_bad_configs():
    with pytest.raises(ConfigError, match="unknown"):
        parse_overrides(["horizon = 3"])
    with pytest.raises(ConfigError, match="duplicate"):
        parse_overrides(["H = 3", "H = 4"])
    with pytest.raises(ConfigError):
        parse_overrides(["H = three"])
    with pytest.raises(ConfigError):
        parse_overrides(["profile = huge"])
    with pytest.raises(ConfigError):
        ExperimentConfig(learner="td3")
    with pytest.raises(ConfigError):
        ExperimentConfig(gamma=1.0)
    with pytest.raises(ConfigError):
        ExperimentConfig().replace(bogus=1)


def test_precedence(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("# comment\nH = 5\nepochs = 7  # trailing\n")
    c = load_config(f, ["epochs=9"], profile="desk")
    assert (c.H, c.epochs, c.N_e) == (5, 9, DESK_PROFILE["N_e"])
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.txt")


def test_seed_chain_streams_distinct():
    chain = seed_chain(4)
    assert len({tuple(v) for v in chain.values()}) == len(chain)
    assert all(v[0] == 4 for v in chain.values())


# -- runs -------------------------------------------------------------------------

def test_zero_epochs_still_checkpoints(tmp_path):
    rec = run_adept(tiny(epochs=0), out_dir=tmp_path)
    assert rec.rows == []
    assert (tmp_path / "world_model_init.ckpt").exists() and (tmp_path / "world_model.ckpt").exists()
    assert (tmp_path / "metrics.csv").read_text().strip() == ",".join(METRIC_COLUMNS)


def test_same_seed_byte_identical(tmp_path):
    run_adept(tiny(seed=5), out_dir=tmp_path / "a")
    run_adept(tiny(seed=5), out_dir=tmp_path / "b")
    for name in ("metrics.csv", "world_model.ckpt", "policy.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    run_adept(tiny(seed=6), out_dir=tmp_path / "c")
    assert (tmp_path / "c" / "metrics.csv").read_bytes() != (tmp_path / "a" / "metrics.csv").read_bytes()


def test_metrics_rows(tmp_path):
    rec = run_adept(tiny(), out_dir=tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert [r["epoch"] for r in rows] == [1, 2]
    assert all(r["wallclock_s"] == 0.0 for r in rows)
    assert all(math.isnan(r["learner_loss_v"]) for r in rows)  # SAC has no value net
    assert all(0.1 <= r["mean_importance_weight"] <= 10.0 for r in rows)
    assert rec.final("eval_return_mean") == rows[-1]["eval_return_mean"]


def test_phase_order_in_log(tmp_path):
    run_adept(tiny(epochs=1), out_dir=tmp_path)
    log = (tmp_path / "run.log").read_text()
    marks = ["phase=BC", "phase=WM-init", "phase=PE", "phase=policy-update", "phase=IWU", "phase=eval", "finished"]
    pos = [log.index(m) for m in marks]
    assert pos == sorted(pos)


def test_importance_sampling_off_freezes_model(tmp_path):
    run_adept(tiny(importance_sampling=False), out_dir=tmp_path)
    assert (tmp_path / "world_model.ckpt").read_bytes() == (tmp_path / "world_model_init.ckpt").read_bytes()
    rows = read_metrics(tmp_path / "metrics.csv")
    assert all(math.isnan(r["diffusion_loss"]) for r in rows)
    assert "phase=BC" not in (tmp_path / "run.log").read_text()


def test_dataset_only_run(tmp_path):
    run_adept(tiny(use_world_model=False, learner="iql"), out_dir=tmp_path)
    assert not (tmp_path / "world_model.ckpt").exists()
    assert all(not math.isnan(r["learner_loss_v"]) for r in read_metrics(tmp_path / "metrics.csv"))


def test_delta_target_run(tmp_path):
    run_adept(tiny(wm_target="delta"), out_dir=tmp_path)
    d = load_checkpoint(tmp_path / "world_model.ckpt")
    assert d["schedule.delta"].shape == (4,) and np.all(d["schedule.delta"] > 0)


def test_saved_policy_round_trip(tmp_path):
    run_adept(tiny(), out_dir=tmp_path)
    policy, stats = load_policy(tmp_path / "policy.ckpt")
    again, _ = load_policy(tmp_path / "policy.ckpt")
    x = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_array_equal(policy.mode(x), again.mode(x))
    assert stats is not None and stats.state_mean.shape == (4,)
    with pytest.raises(ContractError):
        load_policy(tmp_path / "world_model.ckpt")


def test_abort_records_phase(tmp_path):
    with pytest.raises(OSError) as info:
        run_adept(tiny(dataset=str(tmp_path / "missing.ads")), out_dir=tmp_path / "run")
    assert info.value.phase == "data" and info.value.epoch == 0
    assert "aborted epoch=0 phase=data" in (tmp_path / "run" / "run.log").read_text()


def test_record_rejects_non_increasing_epochs():
    rec = RunRecord(tiny())
    rec.append({"epoch": 1})
    with pytest.raises(ContractError):
        rec.append({"epoch": 1})


# -- ablations and plot data ------------------------------------------------------------

def test_sweep_parsing():
    sweep = parse_sweep(["K=5,10", "clipping=true,false"])
    assert sweep == {"K": [5, 10], "clipping": [True, False]}
    assert len(sweep_points(sweep)) == 4
    with pytest.raises(ConfigError):
        parse_sweep(["nothing=1,2"])
    with pytest.raises(ConfigError):
        parse_sweep(["K=5,x"])


def test_one_point_sweep_matches_plain_run(tmp_path):
    cfg = tiny(epochs=1)
    run_adept(cfg.replace(H=2), out_dir=tmp_path / "plain")
    run_ablation(cfg, {"H": [2]}, out_dir=tmp_path / "sweep")
    assert (tmp_path / "sweep" / "H-2" / "metrics.csv").read_bytes() == (tmp_path / "plain" / "metrics.csv").read_bytes()
    lines = (tmp_path / "sweep" / "ablation.csv").read_text().splitlines()
    assert lines[0].startswith("run_id,H,epochs,final_return_mean") and len(lines) == 2


def test_invalid_sweep_point_fails_before_running(tmp_path):
    with pytest.raises(ConfigError):
        run_ablation(tiny(), {"H": [2, 0]}, out_dir=tmp_path)
    assert not (tmp_path / "H-2").exists()


def test_plot_export(tmp_path):
    rows = [{c: float(i) for c in METRIC_COLUMNS} | {"epoch": i} for i in range(1, 4)]
    path = plot_export([("a", rows), ("a", rows), ("b", rows[:1])], tmp_path / "s.csv")
    series = read_series(path)
    n_metrics = len(METRIC_COLUMNS) - 1
    assert len(series) == (3 + 3 + 1) * n_metrics
    assert {s[0] for s in series} == {"a", "a#2", "b"}
    assert ("a#2", 3, "eval_return_mean", 3.0) in series
    only = read_series(plot_export([("a", rows)], tmp_path / "t.csv", ["diffusion_loss"]))
    assert [s[3] for s in only] == [1.0, 2.0, 3.0]


@pytest.mark.slow
def test_ten_denoising_steps_beat_one():
    from adept.experiments import one_step_mse_by_K

    mse = one_step_mse_by_K((1, 10), steps=2000, n_transitions=20_000)
    assert mse[10] <= mse[1]
