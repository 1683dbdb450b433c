"""Exact return-gap verification on enumerable MDPs.

Everything here is computed exactly (linear solves and forward occupancy
recursions), so each inequality can be checked to 1e-9 on random instances.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

SIMPLEX_TOL = 1e-12
CHECK_TOL = 1e-9


def _check_rows(arr: np.ndarray, what: str) -> None:
    if np.any(arr < 0):
        raise ContractError(f"{what} has negative entries")
    if np.any(np.abs(arr.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ContractError(f"{what} rows do not sum to 1")


@dataclass(frozen=True)
class TabularMDP:
    P: np.ndarray  # [s, a, s']
    Rdist: np.ndarray  # [s, a, j] over reward support
    support: np.ndarray  # [j]
    mu0: np.ndarray
    gamma: float

    def __post_init__(self):
        nS, nA, nS2 = self.P.shape
        if nS != nS2 or self.Rdist.shape[:2] != (nS, nA) or self.Rdist.shape[2] != len(self.support):
            raise ContractError("inconsistent MDP array shapes")
        if len(self.mu0) != nS:
            raise ContractError("initial distribution has the wrong length")
        if not 0.0 < self.gamma < 1.0:
            raise ContractError("gamma must lie in (0, 1)")
        _check_rows(self.P, "P")
        _check_rows(self.Rdist, "Rdist")
        _check_rows(self.mu0, "mu0")

    @property
    def nS(self) -> int:
        return self.P.shape[0]

    @property
    def nA(self) -> int:
        return self.P.shape[1]

    @property
    def R(self) -> np.ndarray:
        """Expected reward r(s, a)."""
        return self.Rdist @ self.support

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.support)))

    def with_(self, **kw) -> "TabularMDP":
        d = dict(P=self.P, Rdist=self.Rdist, support=self.support, mu0=self.mu0, gamma=self.gamma)
        d.update(kw)
        return TabularMDP(**d)


@dataclass(frozen=True)
class TabularPolicy:
    pi: np.ndarray  # [s, a]

    def __post_init__(self):
        _check_rows(self.pi, "policy")


@dataclass(frozen=True)
class BoundInputs:
    eps_r: float
    eps_m: float
    eps_pi: float
    r_max: float
    gamma: float

    def __post_init__(self):
        vals = (self.eps_r, self.eps_m, self.eps_pi, self.r_max, self.gamma)
        if not all(np.isfinite(v) for v in vals):
            raise ContractError("bound inputs must be finite")
        if min(self.eps_r, self.eps_m, self.eps_pi, self.r_max) < 0:
            raise ContractError("bound inputs must be non-negative")
        if not 0.0 < self.gamma < 1.0:
            raise ContractError("gamma must lie in (0, 1)")


def _pi(p) -> np.ndarray:
    return p.pi if isinstance(p, TabularPolicy) else np.asarray(p, dtype=np.float64)


def tv_distance(p, q) -> float:
    p, q = np.asarray(p, float), np.asarray(q, float)
    if p.shape != q.shape:
        raise ContractError(f"support mismatch: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def _row_tv(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(p - q).sum(axis=-1)


def exact_return(mdp: TabularMDP, policy) -> float:
    pi = _pi(policy)
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    R_pi = np.einsum("sa,sa->s", pi, mdp.R)
    V = np.linalg.solve(np.eye(mdp.nS) - mdp.gamma * P_pi, R_pi)
    return float(mdp.mu0 @ V)


def horizon_for(gamma: float, tail: float = 1e-13) -> int:
    """Smallest T with sum_{t>=T} gamma^t (t + 1) below ``tail``."""
    T = 1
    while gamma**T * (T + 1 + gamma / (1 - gamma)) / (1 - gamma) > tail:
        T += 1
    return T


def occupancies(mdp: TabularMDP, policy, T: int) -> np.ndarray:
    """P_t(s, a) for t = 0..T-1 under (mdp, policy); shape (T, nS, nA)."""
    pi = _pi(policy)
    out = np.empty((T, mdp.nS, mdp.nA))
    d = mdp.mu0.copy()
    for t in range(T):
        out[t] = d[:, None] * pi
        d = np.einsum("sa,sat->t", out[t], mdp.P)
    return out


def _same_supports(M: TabularMDP, M_hat: TabularMDP) -> None:
    if M.P.shape != M_hat.P.shape or M.Rdist.shape != M_hat.Rdist.shape:
        raise ContractError("models do not share state/action/reward supports")
    if not np.array_equal(M.support, M_hat.support):
        raise ContractError("models use different reward supports")


def error_quantities(M: TabularMDP, M_hat: TabularMDP, pi_phi, T: int | None = None) -> tuple[float, float]:
    """(eps_r, eps_m): max over t of occupancy-weighted reward / transition TV."""
    _same_supports(M, M_hat)
    T = T or horizon_for(M.gamma)
    occ = occupancies(M, pi_phi, T)
    tv_r = _row_tv(M.Rdist, M_hat.Rdist)
    tv_m = _row_tv(M.P, M_hat.P)
    eps_r = float(np.max(np.einsum("tsa,sa->t", occ, tv_r)))
    eps_m = float(np.max(np.einsum("tsa,sa->t", occ, tv_m)))
    return eps_r, eps_m


def policy_shift(pi, pi_phi) -> float:
    return float(np.max(_row_tv(_pi(pi), _pi(pi_phi))))


def bound_value(inputs: BoundInputs) -> float:
    g = inputs.gamma
    return 2.0 * inputs.r_max * (
        (inputs.eps_r + 2.0 * inputs.eps_pi) / (1.0 - g) + g * (2.0 * inputs.eps_pi + inputs.eps_m) / (1.0 - g) ** 2
    )


@dataclass
class TheoremReport:
    J: float
    J_hat: float
    eps_r: float
    eps_m: float
    eps_pi: float
    C: float

    @property
    def gap(self) -> float:
        return abs(self.J - self.J_hat)

    @property
    def one_sided_ok(self) -> bool:
        return self.J >= self.J_hat - self.C - CHECK_TOL

    @property
    def two_sided_ok(self) -> bool:
        return self.gap <= self.C + CHECK_TOL

    @property
    def violated(self) -> bool:
        return not (self.one_sided_ok and self.two_sided_ok)


def check_theorem(M: TabularMDP, M_hat: TabularMDP, pi, pi_phi) -> TheoremReport:
    eps_r, eps_m = error_quantities(M, M_hat, pi_phi)
    eps_pi = policy_shift(pi, pi_phi)
    C = bound_value(BoundInputs(eps_r, eps_m, eps_pi, M.r_max, M.gamma))
    return TheoremReport(exact_return(M, pi), exact_return(M_hat, pi), eps_r, eps_m, eps_pi, C)


# ---------------------------------------------------------------------
# lemmas
# ---------------------------------------------------------------------


@dataclass
class LemmaCheck:
    name: str
    lhs: float
    rhs: float

    @property
    def ok(self) -> bool:
        return self.lhs <= self.rhs + CHECK_TOL


def check_joint_decomposition(d: np.ndarray, d_hat: np.ndarray, pi, pi_hat) -> LemmaCheck:
    """TV of state-action joints <= TV of state marginals + max_s TV of policies."""
    p, q = _pi(pi), _pi(pi_hat)
    lhs = tv_distance(d[:, None] * p, d_hat[:, None] * q)
    rhs = tv_distance(d, d_hat) + float(np.max(_row_tv(p, q)))
    return LemmaCheck("joint_decomposition", lhs, rhs)


def _conditional_joint(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    """P(s', a' | s, a) = P(s' | s, a) pi(a' | s'); shape (nS, nA, nS, nA)."""
    return mdp.P[:, :, :, None] * pi[None, None, :, :]


def check_occupancy_drift(M: TabularMDP, M_hat: TabularMDP, pi, pi_hat, T: int | None = None) -> list[LemmaCheck]:
    """TV(P_t, P_hat_t) <= t * delta + TV(P_0, P_hat_0) for every t < T."""
    _same_supports(M, M_hat)
    p, q = _pi(pi), _pi(pi_hat)
    T = T or horizon_for(M.gamma)
    occ = occupancies(M, p, T)
    occ_hat = occupancies(M_hat, q, T)
    cond_tv = 0.5 * np.abs(_conditional_joint(M, p) - _conditional_joint(M_hat, q)).sum(axis=(2, 3))
    delta = float(np.max(np.einsum("tsa,sa->t", occ[:-1], cond_tv))) if T > 1 else 0.0
    tv0 = tv_distance(occ[0], occ_hat[0])
    checks = []
    for t in range(T):
        checks.append(LemmaCheck(f"occupancy_drift[t={t}]", tv_distance(occ[t], occ_hat[t]), t * delta + tv0))
    return checks


def check_return_decomposition(M: TabularMDP, M_hat: TabularMDP, pi, pi_hat, T: int | None = None) -> LemmaCheck:
    """|J(pi) - J_hat(pi_hat)| <= r_max sum_t gamma^t (2 eps_r + 2 TV(P_t, P_hat_t)).

    The right side is summed only to T, which can only shrink it, so the
    truncated check is conservative.
    """
    _same_supports(M, M_hat)
    p, q = _pi(pi), _pi(pi_hat)
    T = T or horizon_for(M.gamma)
    occ = occupancies(M, p, T)
    occ_hat = occupancies(M_hat, q, T)
    eps_r = float(np.max(np.einsum("tsa,sa->t", occ, _row_tv(M.Rdist, M_hat.Rdist))))
    tv_t = 0.5 * np.abs(occ - occ_hat).sum(axis=(1, 2))
    disc = M.gamma ** np.arange(T)
    r_max = max(M.r_max, M_hat.r_max)
    rhs = r_max * float(np.sum(disc * (2 * eps_r + 2 * tv_t)))
    lhs = abs(exact_return(M, p) - exact_return(M_hat, q))
    return LemmaCheck("return_decomposition", lhs, rhs)


@dataclass
class LemmaReport:
    joint: list[LemmaCheck]
    drift: list[LemmaCheck]
    returns: LemmaCheck

    @property
    def violations(self) -> list[LemmaCheck]:
        return [c for c in (*self.joint, *self.drift, self.returns) if not c.ok]


def check_lemmas(M: TabularMDP, M_hat: TabularMDP, pi, pi_hat, T: int | None = None) -> LemmaReport:
    T = T or horizon_for(M.gamma)
    p, q = _pi(pi), _pi(pi_hat)
    occ = occupancies(M, p, T)
    occ_hat = occupancies(M_hat, q, T)
    joint = [check_joint_decomposition(occ[t].sum(1), occ_hat[t].sum(1), p, q) for t in range(T)]
    return LemmaReport(joint, check_occupancy_drift(M, M_hat, p, q, T), check_return_decomposition(M, M_hat, p, q, T))


# ---------------------------------------------------------------------
# random instances
# ---------------------------------------------------------------------


def random_mdp(rng: np.random.Generator, nS: int, nA: int, n_rewards: int, gamma: float) -> TabularMDP:
    P = rng.dirichlet(np.ones(nS), size=(nS, nA))
    Rdist = rng.dirichlet(np.ones(n_rewards), size=(nS, nA))
    support = rng.uniform(-1.0, 1.0, n_rewards)
    mu0 = rng.dirichlet(np.ones(nS))
    return TabularMDP(P, Rdist, support, mu0, gamma)


def random_policy(rng: np.random.Generator, nS: int, nA: int) -> np.ndarray:
    return rng.dirichlet(np.ones(nA), size=nS)


def _mix(rng, rows: np.ndarray, max_mix: float) -> np.ndarray:
    lam = rng.uniform(0.0, max_mix, size=rows.shape[:-1] + (1,))
    other = rng.dirichlet(np.ones(rows.shape[-1]), size=rows.shape[:-1])
    out = (1 - lam) * rows + lam * other
    return out / out.sum(axis=-1, keepdims=True)


def perturb_mdp(rng, M: TabularMDP, max_mix: float = 0.3, transitions: bool = True, rewards: bool = True) -> TabularMDP:
    return M.with_(
        P=_mix(rng, M.P, max_mix) if transitions else M.P,
        Rdist=_mix(rng, M.Rdist, max_mix) if rewards else M.Rdist,
    )


def perturb_policy(rng, pi: np.ndarray, max_mix: float = 0.3) -> np.ndarray:
    return _mix(rng, pi, max_mix)


def random_instance(rng: np.random.Generator, gamma: float | None = None, max_states: int = 5, max_actions: int = 3,
                    max_rewards: int = 3):
    nS = int(rng.integers(1, max_states + 1))
    nA = int(rng.integers(1, max_actions + 1))
    nR = int(rng.integers(1, max_rewards + 1))
    g = float(rng.choice([0.5, 0.9])) if gamma is None else gamma
    M = random_mdp(rng, nS, nA, nR, g)
    M_hat = perturb_mdp(rng, M, float(rng.uniform(0.0, 0.5)))
    pi = random_policy(rng, nS, nA)
    pi_phi = perturb_policy(rng, pi, float(rng.uniform(0.0, 0.5)))
    return M, M_hat, pi, pi_phi


def verify_bounds(trials: int, seed: int, gamma: float | None = None, out=None) -> list[dict]:
    """Randomized zero-violation suite for the return-gap bound; optional CSV report."""
    rng = np.random.default_rng(seed)
    rows = []
    for trial in range(trials):
        M, M_hat, pi, pi_phi = random_instance(rng, gamma)
        rep = check_theorem(M, M_hat, pi, pi_phi)
        rows.append({
            "trial": trial, "J": rep.J, "J_hat": rep.J_hat, "eps_r": rep.eps_r, "eps_m": rep.eps_m,
            "eps_pi": rep.eps_pi, "C": rep.C, "gap": rep.gap, "violated": int(rep.violated),
        })
    if out is not None:
        with open(out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["trial"])
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows
