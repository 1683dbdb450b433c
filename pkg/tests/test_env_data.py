import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adept.dataset import (
    OfflineDataset,
    compute_stats,
    denormalize,
    generate_dataset,
    load_dataset,
    normalize,
    save_dataset,
)
from adept.envs import make_env, run_episode
from adept.errors import (
    BadMagicError,
    ConfigError,
    ContractError,
    FormatError,
    MalformedHeaderError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from adept.learners import evaluate_policy


def small(rng, n=50, env="point-mass-2d"):
    return generate_dataset(env, "random", n, rng)


# -- environments -----------------------------------------------------------

@pytest.mark.parametrize("name", ["point-mass-2d", "pendulum-1d"])
def test_env_determinism_and_bounds(name):
    env = make_env(name)
    pol = lambda s: np.sin(np.arange(env.action_dim) + s.sum()) * 3  # noqa: E731
    a = run_episode(env, pol, np.random.default_rng(3))
    b = run_episode(env, pol, np.random.default_rng(3))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    assert len(a[2]) == env.episode_cap
    assert np.all(np.abs(a[2]) <= env.r_max)
    assert np.all((a[1] >= env.action_low) & (a[1] <= env.action_high))


def test_point_mass_step_by_hand():
    env = make_env("point-mass-2d")
    s = np.array([0.5, -1.0, 0.2, 0.0])
    a = np.array([1.0, -0.5])
    s2, r, d = env.step(s, a)
    v2 = np.array([0.2 + 0.1, 0.0 - 0.05])
    p2 = np.array([0.5, -1.0]) + 0.1 * v2
    np.testing.assert_allclose(s2, np.concatenate([p2, v2]), rtol=1e-15)
    assert r == pytest.approx(-(0.25 + 1.0) - 0.01 * 1.25)
    assert not d


def test_pendulum_wraps_angle():
    env = make_env("pendulum-1d")
    s2, _, _ = env.step(np.array([np.pi - 0.01, 8.0]), np.array([2.0]))
    assert -np.pi <= s2[0] < np.pi


def test_unknown_env():
    with pytest.raises(ConfigError):
        make_env("cartpole")


# -- generation -------------------------------------------------------------

def test_random_tier_actions_uniform():
    ds = generate_dataset("point-mass-2d", "random", 20_000, np.random.default_rng(0))
    for j in range(2):
        hist, _ = np.histogram(ds.a[:, j], bins=10, range=(-1, 1))
        assert np.max(np.abs(hist / len(ds) - 0.1)) < 0.02
        # KS distance against U[-1, 1]
        x = np.sort(ds.a[:, j])
        cdf = (x + 1) / 2
        ks = np.max(np.abs(np.arange(1, len(x) + 1) / len(x) - cdf))
        assert ks < 0.02


def test_single_transition_dataset(rng):
    ds = small(rng, n=1)
    assert len(ds) == 1
    both = np.concatenate([ds.s, ds.s2])
    np.testing.assert_array_equal(ds.stats.state_min, both.min(0))
    np.testing.assert_array_equal(ds.stats.state_max, both.max(0))
    assert ds.stats.reward_mean == ds.r[0] == ds.stats.reward_min == ds.stats.reward_max


def test_zero_transitions_rejected(rng):
    with pytest.raises(ContractError):
        generate_dataset("point-mass-2d", "random", 0, rng)


@pytest.mark.slow
def test_medium_tier_between_random_and_expert():
    env = make_env("point-mass-2d")
    rng = np.random.default_rng(0)
    ds = generate_dataset(env, "medium", 2000, rng)
    ret = np.sum(ds.r) / (len(ds) / env.episode_cap)
    rand, _ = evaluate_policy(lambda s: rng.uniform(-1, 1, 2), env, 20, rng)
    expert, _ = evaluate_policy(env.expert_action, env, 20, rng)
    assert rand < ret < expert
    mixed = generate_dataset(env, "mixed", 2000, np.random.default_rng(0))
    assert mixed.tier == "mixed" and len(mixed) == 2000


# -- normalization ----------------------------------------------------------

def test_hand_normalization():
    col = np.array([[1.0], [2.0], [3.0]])
    st_ = compute_stats(col, col, np.zeros(3))
    assert st_.state_mean[0] == 2.0
    assert st_.state_std[0] == pytest.approx(np.sqrt(2 / 3), rel=1e-15)
    np.testing.assert_allclose(st_.normalize_state(col)[:, 0], [-1.2247449, 0.0, 1.2247449], atol=1e-7)


def test_constant_dimension_gets_floor():
    col = np.ones((4, 1))
    assert compute_stats(col, col, np.zeros(4)).state_std[0] == 1e-6


def test_normalized_moments_and_round_trip(rng):
    ds = small(rng, n=500)
    nd, stats = normalize(ds)
    both = np.concatenate([nd.s, nd.s2])
    np.testing.assert_allclose(both.mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(both.std(0), 1.0, atol=1e-12)
    np.testing.assert_allclose(denormalize(nd.s, stats), ds.s, atol=1e-12)
    # normalizing already-normalized numbers leaves them alone
    restat = compute_stats(nd.s, nd.s2, nd.r)
    np.testing.assert_allclose(restat.normalize_state(nd.s), nd.s, atol=1e-12)


@given(data=st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40))
def test_round_trip_property(data):
    x = np.array(data)[:, None]
    stats = compute_stats(x, x, np.zeros(len(x)))
    np.testing.assert_allclose(stats.denormalize_state(stats.normalize_state(x)), x, atol=1e-12 * (1 + np.abs(x).max()))


def test_stats_match_payload(rng):
    ds = small(rng, n=300)
    fresh = compute_stats(ds.s, ds.s2, ds.r)
    for k, v in fresh.as_dict().items():
        np.testing.assert_allclose(v, ds.stats.as_dict()[k], atol=1e-9)


# -- file format ------------------------------------------------------------

def test_dataset_round_trip(tmp_path, rng):
    ds = small(rng, n=120, env="pendulum-1d")
    path = tmp_path / "d.ads"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert (back.env_name, back.tier, len(back)) == (ds.env_name, ds.tier, len(ds))
    for f in ("s", "a", "r", "s2"):
        assert getattr(back, f).tobytes() == getattr(ds, f).tobytes()
    np.testing.assert_array_equal(back.done, ds.done)
    for k, v in ds.stats.as_dict().items():
        assert np.asarray(back.stats.as_dict()[k]).tobytes() == np.asarray(v).tobytes()
    save_dataset(back, tmp_path / "again.ads")
    assert (tmp_path / "again.ads").read_bytes() == path.read_bytes()


def test_dataset_file_errors(tmp_path, rng):
    path = tmp_path / "d.ads"
    save_dataset(small(rng, n=10), path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.ads"
    bad.write_bytes(b"XXXXXXXX\0" + raw[9:])
    with pytest.raises(BadMagicError, match="ADEPT-DS"):
        load_dataset(bad)
    bad.write_bytes(raw[:-9])
    with pytest.raises(TruncatedPayloadError, match="truncated payload"):
        load_dataset(bad)
    bad.write_bytes(raw[:9] + b"\x02" + raw[10:])
    with pytest.raises(VersionMismatchError):
        load_dataset(bad)
    bad.write_bytes(raw + b"\0")
    with pytest.raises(MalformedHeaderError):
        load_dataset(bad)


def test_normalized_dataset_not_saved(tmp_path, rng):
    with pytest.raises(ContractError):
        save_dataset(normalize(small(rng))[0], tmp_path / "x.ads")


@settings(max_examples=100)
@given(cut=st.integers(0, 400), flip=st.integers(0, 399), byte=st.integers(0, 255))
def test_corrupted_files_raise_typed_errors(tmp_path_factory, cut, flip, byte):
    d = tmp_path_factory.mktemp("c")
    path = d / "d.ads"
    save_dataset(small(np.random.default_rng(0), n=3), path)
    raw = bytearray(path.read_bytes())
    if flip < len(raw):
        raw[flip] = byte
    path.write_bytes(bytes(raw[: len(raw) - cut % len(raw)]))
    try:
        load_dataset(path)
    except FormatError:
        pass
