import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adept.autodiff import Adam, Mlp
from adept.dataset import Batch
from adept.envs import make_env
from adept.errors import ContractError
from adept.learners import (
    IQL,
    SAC,
    CriticPair,
    evaluate_policy,
    expectile_loss,
    iql_critic_target,
    iql_update,
    sac_critic_target,
    sac_update,
    soft_update,
)


def expectile_brute(y, tau, grid=200_001):
    """argmin_m mean |tau - 1[y < m]| (y - m)^2 by dense grid then bisection on the gradient."""
    lo, hi = float(np.min(y)), float(np.max(y))

    def grad(m):
        u = y - m
        return np.mean(np.where(u < 0, 1 - tau, tau) * u)

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if grad(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def random_batch(rng, n=32, ds=3, da=2):
    return Batch(rng.normal(size=(n, ds)), rng.uniform(-0.9, 0.9, (n, da)), rng.normal(size=n),
                 rng.normal(size=(n, ds)), (rng.random(n) < 0.2).astype(float))


# -- expectile --------------------------------------------------------------

def test_expectile_examples():
    assert expectile_loss(2.0, 0.5) == 2.0
    assert expectile_loss(1.0, 0.7) == pytest.approx(0.7)
    assert expectile_loss(-1.0, 0.7) == pytest.approx(0.3)


@given(u=st.floats(-1e3, 1e3), v=st.floats(-1e3, 1e3), tau=st.floats(0.01, 0.99), t=st.floats(0, 1))
def test_expectile_properties(u, v, tau, t):
    L = lambda x, q=tau: float(expectile_loss(x, q))  # noqa: E731
    assert L(u) == pytest.approx(L(-u, 1 - tau), rel=1e-12, abs=1e-300)
    assert (L(u) == 0.0) == (u == 0.0) or abs(u) < 1e-150
    assert L(t * u + (1 - t) * v) <= t * L(u) + (1 - t) * L(v) + 1e-9 * (1 + abs(u) + abs(v)) ** 2


def test_expectile_tau_range():
    with pytest.raises(ContractError):
        expectile_loss(1.0, 1.0)


def test_brute_expectile_matches_mean_at_half(rng):
    y = rng.normal(size=101)
    assert expectile_brute(y, 0.5) == pytest.approx(y.mean(), abs=1e-9)


# -- soft updates -----------------------------------------------------------

def _scalar_net(value):
    rng = np.random.default_rng(0)
    net = Mlp.init([1, 1], rng)
    net.weights[0].data[:] = value
    net.biases[0].data[:] = value
    return net


def test_soft_update_cases():
    tgt, onl = _scalar_net(0.0), _scalar_net(1.0)
    soft_update(tgt, onl, 0.005)
    assert tgt.weights[0].data[0, 0] == pytest.approx(0.005, abs=1e-18)
    tgt = _scalar_net(0.3)
    soft_update(tgt, onl, 1.0)
    assert tgt.weights[0].data[0, 0] == 1.0
    tgt = _scalar_net(0.3)
    soft_update(tgt, onl, 0.0)
    assert tgt.weights[0].data[0, 0] == 0.3


@given(rho=st.floats(0.0, 1.0), n=st.integers(0, 60), gap=st.floats(-5, 5))
def test_soft_update_contraction(rho, n, gap):
    tgt, onl = _scalar_net(gap), _scalar_net(0.0)
    for _ in range(n):
        soft_update(tgt, onl, rho)
    assert abs(tgt.weights[0].data[0, 0]) == pytest.approx(abs(gap) * (1 - rho) ** n, rel=1e-9, abs=1e-300)


def test_targets_share_architecture(rng):
    c = CriticPair.init(3, 2, rng, hidden=(8, 8))
    assert c.q1_target.widths == c.q1.widths and c.q2_target.widths == c.q2.widths


# -- IQL --------------------------------------------------------------------

def test_iql_terminal_targets_are_rewards(rng):
    ag = IQL.create(3, 2, [-1, -1], [1, 1], rng, hidden=(8,))
    b = random_batch(rng)
    b = Batch(b.s, b.a, b.r, b.s2, np.ones(len(b.r)))
    np.testing.assert_array_equal(iql_critic_target(ag, b), b.r)


def test_iql_zero_beta_is_behavior_cloning():
    rng = np.random.default_rng(0)
    ag = IQL.create(3, 2, [-1, -1], [1, 1], rng, hidden=(8,), beta=0.0, lr=1e-3)
    ref = ag.policy.copy()
    opt = Adam(ref.parameters(), lr=1e-3)
    b = random_batch(rng)
    iql_update(ag, b)
    loss = -ref.log_prob(b.s, b.a).mean()
    opt.zero_grad()
    loss.backward()
    opt.step()
    for p, q in zip(ag.policy.parameters(), ref.parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_iql_parameter_checks(rng):
    with pytest.raises(ContractError):
        IQL.create(2, 1, [-1], [1], rng, tau=1.0)
    with pytest.raises(ContractError):
        IQL.create(2, 1, [-1], [1], rng, beta=-1.0)


def _two_state_problem():
    S = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], float)
    A = np.array([[-0.5], [0.5], [-0.5], [0.5]])
    R = np.array([0.0, 1.0, 0.0, 0.5])
    S2 = np.array([[1, 0], [0, 1], [1, 0], [0, 1]], float)
    return Batch(S, A, R, S2, np.zeros(4))


def iql_fixed_point(batch, gamma, tau, iters=5000):
    """Tabular iteration of Q = r + gamma V(s'), V(s) = tau-expectile of Q(s, .) under the data."""
    nxt = np.argmax(batch.s2, axis=1)
    Q = np.zeros(4)
    for _ in range(iters):
        V = np.array([expectile_brute(Q[2 * i : 2 * i + 2], tau) for i in range(2)])
        Q = batch.r + gamma * V[nxt]
    return Q


@pytest.mark.slow
def test_iql_two_state_fixed_point():
    b = _two_state_problem()
    oracle = iql_fixed_point(b, 0.9, 0.7, iters=300)
    ag = IQL.create(2, 1, [-1], [1], np.random.default_rng(0), hidden=(32, 32), gamma=0.9, lr=1e-3)
    for _ in range(15_000):
        ag.update(b)
    np.testing.assert_allclose(ag.critics.online_min_numpy(b.s, b.a), oracle, atol=0.05)


@pytest.mark.parametrize("tau", [0.5, 0.7, 0.9])
def test_value_regression_hits_expectile(tau):
    rng = np.random.default_rng(int(tau * 10))
    y = rng.gamma(2.0, 1.0, 400)
    ag = IQL.create(1, 1, [-1], [1], rng, hidden=(16,), tau=tau, lr=1e-2)
    s = np.ones((400, 1))
    from adept.autodiff import Tensor
    opt = ag.value_opt
    for _ in range(3000):
        v = ag.value(Tensor(s))[:, 0]
        loss = expectile_loss(v * -1.0 + y, tau).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    got = float(ag.value(Tensor(s[:1])).data[0, 0])
    assert got == pytest.approx(expectile_brute(y, tau), abs=1e-2)


# -- SAC --------------------------------------------------------------------

def test_sac_terminal_targets_are_rewards(rng):
    ag = SAC.create(3, 2, [-1, -1], [1, 1], rng, hidden=(8,))
    b = random_batch(rng)
    b = Batch(b.s, b.a, b.r, b.s2, np.ones(len(b.r)))
    np.testing.assert_array_equal(sac_critic_target(ag, b, rng), b.r)


def test_sac_nonfinite_logprob(rng):
    ag = SAC.create(3, 2, [-1, -1], [1, 1], rng, hidden=(8,))
    ag.policy.net.biases[-1].data[:] = np.nan
    with pytest.raises(ContractError), np.errstate(invalid="ignore"):
        sac_update(ag, random_batch(rng), rng)


@settings(max_examples=15)
@given(seed=st.integers(0, 10_000), learner=st.sampled_from(["sac", "iql"]))
def test_updates_stay_finite(seed, learner):
    rng = np.random.default_rng(seed)
    make = SAC if learner == "sac" else IQL
    ag = make.create(3, 2, [-1, -1], [1, 1], rng, hidden=(8,), lr=1e-2)
    for _ in range(20):
        out = ag.update(random_batch(rng), rng)
        assert np.isfinite(out["loss_q"]) and np.isfinite(out["loss_pi"])
    params = ag.policy.parameters() + ag.critics.parameters()
    assert all(np.all(np.isfinite(p.data)) for p in params)


def test_sac_learns_bandit():
    # one-step problem with reward -(a - 0.5)^2: the policy mode should move to 0.5
    rng = np.random.default_rng(0)
    ag = SAC.create(1, 1, [-1], [1], rng, hidden=(32, 32), lr=3e-3, alpha=0.005)
    s = np.zeros((256, 1))
    for _ in range(1500):
        a = rng.uniform(-1, 1, (256, 1))
        ag.update(Batch(s, a, -((a[:, 0] - 0.5) ** 2), s, np.ones(256)), rng)
    assert ag.policy.mode(s[:1])[0, 0] == pytest.approx(0.5, abs=0.1)


# -- evaluation -------------------------------------------------------------

def test_zero_action_return_by_simulation():
    env = make_env("point-mass-2d")
    mean, std = evaluate_policy(lambda s: np.zeros(2), env, 3, np.random.default_rng(5))
    starts = [np.random.default_rng(5).uniform(-1, 1, 2)]
    r = np.random.default_rng(5)
    starts = [r.uniform(-1, 1, 2) for _ in range(3)]
    # from rest with no thrust the mass never moves: 100 steps of -|p0|^2
    expect = [-100.0 * float(p @ p) for p in starts]
    assert mean == pytest.approx(np.mean(expect), rel=1e-12)
    assert std == pytest.approx(np.std(expect), rel=1e-9)


def test_single_step_cap():
    env = make_env("point-mass-2d")
    a = np.array([0.5, -1.0])
    mean, _ = evaluate_policy(lambda s: a, env, 1, np.random.default_rng(2), max_steps=1)
    p = np.random.default_rng(2).uniform(-1, 1, 2)
    assert mean == pytest.approx(-(p @ p) - 0.01 * (a @ a), rel=1e-12)


def test_evaluation_is_deterministic(rng):
    ag = SAC.create(4, 2, [-1, -1], [1, 1], rng, hidden=(8,))
    env = make_env("point-mass-2d")
    for det in (True, False):
        a = evaluate_policy(ag.policy, env, 4, np.random.default_rng(1), deterministic=det)
        b = evaluate_policy(ag.policy, env, 4, np.random.default_rng(1), deterministic=det)
        assert a == b
