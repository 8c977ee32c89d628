"""Tabular MDPs and three reinforcement-learning instances of the SA recursion.

State-action functions are flat vectors indexed by ``s * n_actions + a``.
Transitions are stored as ``P[a, s, s']`` and rewards as ``R[s, a]``. Every
instance comes with an exact expected operator and a sampling operator, and
can be packaged as an :class:`~contractive_sa.engine.SAProblem`.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from .bounds import BoundCurve, ConditionError, ConditionItem, ConditionReport, _check_delta, _ks
from .core import NormSpec, StepSchedule, norm_eval
from .engine import NoiseModel, SAProblem, solve_fixed_point
from .linear_sa import LinearSASpec, linear_sa_problem, remodel

ROW_TOL = 1e-12
POWER_ITERATIONS = 10_000
PATH_ENUMERATION_CAP = 200_000
L_O_INFLATION = 1.05


# MDPs and policies ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite discounted MDP with rewards in ``[0, 1]``."""

    P: np.ndarray
    R: np.ndarray
    gamma: float

    def __post_init__(self) -> None:
        P = np.array(self.P, dtype=float)
        R = np.array(self.R, dtype=float)
        if P.ndim != 3 or P.shape[1] != P.shape[2]:
            raise ValueError("P must have shape (n_actions, n_states, n_states)")
        if R.shape != (P.shape[1], P.shape[0]):
            raise ValueError("R must have shape (n_states, n_actions)")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > ROW_TOL:
            raise ValueError("every transition row must be a probability vector")
        if np.any(R < 0) or np.any(R > 1):
            raise ValueError("rewards must lie in [0, 1]")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        P.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.P.shape[1]

    @property
    def n_actions(self) -> int:
        return self.P.shape[0]

    @property
    def n_sa(self) -> int:
        return self.n_states * self.n_actions

    @property
    def q_max(self) -> float:
        """Uniform bound ``1 / (1 - gamma)`` on value functions."""
        return 1.0 / (1.0 - self.gamma)

    def sa_transition(self, policy: "Policy") -> np.ndarray:
        """``T[(s, a), (s', a')] = P_a(s, s') pi(a' | s')``."""
        S, A = self.n_states, self.n_actions
        Psa = self.P.transpose(1, 0, 2).reshape(S * A, S)
        return (Psa[:, :, None] * policy.table[None, :, :]).reshape(S * A, S * A)

    def state_transition(self, policy: "Policy") -> np.ndarray:
        """``P_pi(s, s') = sum_a pi(a | s) P_a(s, s')``."""
        return np.einsum("sa,ast->st", policy.table, self.P)

    def describe(self) -> dict:
        return {"n_states": self.n_states, "n_actions": self.n_actions, "gamma": self.gamma}

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "P": self.P.tolist(),
            "R": self.R.tolist(),
        }


@dataclass(frozen=True, eq=False)
class Policy:
    """Stationary randomized policy ``table[s, a] = pi(a | s)``."""

    table: np.ndarray

    def __post_init__(self) -> None:
        t = np.array(self.table, dtype=float)
        if t.ndim != 2:
            raise ValueError("policy table must be (n_states, n_actions)")
        if np.any(t < 0) or np.max(np.abs(t.sum(axis=1) - 1.0)) > ROW_TOL:
            raise ValueError("policy rows must be probability vectors")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @classmethod
    def uniform(cls, mdp: TabularMDP) -> "Policy":
        return cls(np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions))

    def check_shape(self, mdp: TabularMDP) -> None:
        if self.table.shape != (mdp.n_states, mdp.n_actions):
            raise ValueError("policy shape does not match the MDP")


@dataclass(frozen=True, eq=False)
class ISFactors:
    """Truncated importance weights ``c <= rho`` and the lookahead ``n``."""

    c: np.ndarray
    rho: np.ndarray
    n: int = 1

    def __post_init__(self) -> None:
        c = np.array(self.c, dtype=float)
        rho = np.array(self.rho, dtype=float)
        if c.shape != rho.shape or c.ndim != 2:
            raise ValueError("c and rho must be tables of equal shape")
        if np.any(c < 0) or np.any(rho < 0):
            raise ValueError("importance factors must be nonnegative")
        if np.any(rho < c):
            raise ValueError("rho must dominate c everywhere")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("the lookahead n must be a positive integer")
        c.setflags(write=False)
        rho.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "n", int(self.n))

    @classmethod
    def ratio(cls, target: Policy, behavior: Policy, n: int = 1, *, c_cap: float = math.inf, rho_cap: float = math.inf):
        """Clipped ratios ``min(cap, pi / pi_b)`` (zero where ``pi_b = 0``)."""
        pb = behavior.table
        r = np.divide(target.table, pb, out=np.zeros_like(pb), where=pb > 0)
        return cls(np.minimum(r, c_cap), np.minimum(r, rho_cap), n)

    def validate(self, mdp: TabularMDP, behavior: Policy) -> None:
        """Raise unless ``max_s sum_a pi_b(a|s) rho(s, a) <= 1 / gamma``."""
        if self.c.shape != (mdp.n_states, mdp.n_actions):
            raise ValueError("importance factor shape does not match the MDP")
        worst = float(np.max(np.sum(behavior.table * self.rho, axis=1)))
        if worst > 1.0 / mdp.gamma + ROW_TOL:
            raise ValueError(f"max_s sum_a pi_b rho = {worst:.6g} exceeds 1/gamma = {1.0 / mdp.gamma:.6g}")


class ReducibleChainError(ValueError):
    """The policy-induced chain lacks a unique positive stationary distribution."""


def stationary_distribution(mdp: TabularMDP, policy: Policy) -> np.ndarray:
    """Unique stationary law of the state chain under ``policy``.

    Requires the chain to be irreducible, so every entry is positive. Uses
    power iteration on the lazy chain and falls back to a direct solve.
    """
    policy.check_shape(mdp)
    Pp = mdp.state_transition(policy)
    n_comp, labels = connected_components(Pp > 0, directed=True, connection="strong")
    if n_comp > 1:
        # a class is closed when no mass leaves it
        closed = [c for c in range(n_comp) if np.all(Pp[np.ix_(labels == c, labels != c)] == 0)]
        if len(closed) > 1:
            raise ReducibleChainError(f"chain has {len(closed)} recurrent classes")
        raise ReducibleChainError("chain has transient states with zero stationary mass")
    S = mdp.n_states
    lazy = 0.5 * (np.eye(S) + Pp)
    kappa = np.full(S, 1.0 / S)
    for _ in range(POWER_ITERATIONS):
        nxt = kappa @ lazy
        if np.max(np.abs(nxt - kappa)) <= 1e-15:
            kappa = nxt
            break
        kappa = nxt
    else:
        M = np.vstack([Pp.T - np.eye(S), np.ones((1, S))])
        rhs = np.zeros(S + 1)
        rhs[-1] = 1.0
        kappa = np.linalg.lstsq(M, rhs, rcond=None)[0]
    kappa = np.clip(kappa, 0.0, None)
    return kappa / kappa.sum()


def behavior_weights(mdp: TabularMDP, behavior: Policy) -> np.ndarray:
    """``D_b(s, a) = kappa_b(s) pi_b(a | s)`` as a flat vector."""
    return (stationary_distribution(mdp, behavior)[:, None] * behavior.table).reshape(-1)


def check_coverage(target: Policy, behavior: Policy) -> None:
    """Raise unless ``pi(a|s) > 0`` implies ``pi_b(a|s) > 0``."""
    bad = (target.table > 0) & (behavior.table == 0)
    if np.any(bad):
        s, a = np.argwhere(bad)[0]
        raise ValueError(f"behavior policy does not cover target action {a} in state {s}")


def _inverse_cdf(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise inverse-CDF draw: ``cdf`` has shape ``(B, m)``, ``u`` shape ``(B,)``."""
    idx = np.sum(u[:, None] >= cdf, axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


# MDP constructors -------------------------------------------------------------


def constant_reward_mdp(n_states: int = 2, n_actions: int = 2, gamma: float = 0.9, reward: float = 1.0) -> TabularMDP:
    """Uniform transitions with a constant reward, so ``Q* = reward / (1 - gamma)``."""
    P = np.full((n_actions, n_states, n_states), 1.0 / n_states)
    return TabularMDP(P, np.full((n_states, n_actions), reward), gamma)


def garnet_mdp(n_states: int, n_actions: int, branching: int, gamma: float, seed: int) -> TabularMDP:
    """Random MDP with ``branching`` successors per pair and uniform rewards.

    Successor weights are the gaps of sorted uniforms. Irreducibility is not
    guaranteed; it is checked when a stationary law is requested.
    """
    if not 1 <= branching <= n_states:
        raise ValueError("branching must lie in [1, n_states]")
    gen = np.random.default_rng(seed)
    P = np.zeros((n_actions, n_states, n_states))
    for a in range(n_actions):
        for s in range(n_states):
            succ = gen.choice(n_states, size=branching, replace=False)
            cuts = np.sort(gen.random(branching - 1))
            w = np.diff(np.concatenate([[0.0], cuts, [1.0]]))
            P[a, s, succ] = w
    R = gen.random((n_states, n_actions))
    return TabularMDP(P, R, gamma)


def mdp_from_dict(doc: dict) -> TabularMDP:
    """Build an MDP from ``{"n_states", "n_actions", "gamma", "P", "R"}``.

    ``P`` is nested as ``[action][state][next_state]`` and ``R`` as
    ``[state][action]``.
    """
    try:
        S, A = int(doc["n_states"]), int(doc["n_actions"])
        P = np.asarray(doc["P"], dtype=float)
        R = np.asarray(doc["R"], dtype=float)
        gamma = float(doc["gamma"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed MDP document: {exc}") from exc
    if P.shape != (A, S, S) or R.shape != (S, A):
        raise ValueError("P or R does not match n_states and n_actions")
    return TabularMDP(P, R, gamma)


def load_mdp(path) -> TabularMDP:
    """Read an MDP from a JSON document (see :func:`mdp_from_dict`)."""
    return mdp_from_dict(json.loads(Path(path).read_text()))


# contraction estimate ----------------------------------------------------------


def estimate_contraction_factor(expected_op, norm: NormSpec, n_pairs: int, generator: np.random.Generator, *, scale: float = 1.0):
    """Largest observed ``||F(Q1) - F(Q2)|| / ||Q1 - Q2||`` over Gaussian pairs.

    A lower estimate of the true factor. Returns ``(ratio, (Q1, Q2))``.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    d = norm.dim
    Q1 = scale * generator.standard_normal((n_pairs, d))
    Q2 = scale * generator.standard_normal((n_pairs, d))
    num = np.asarray(norm_eval(norm, expected_op(Q1) - expected_op(Q2)))
    den = np.asarray(norm_eval(norm, Q1 - Q2))
    ratio = num / den
    i = int(np.argmax(ratio))
    return float(ratio[i]), (Q1[i].copy(), Q2[i].copy())


# off-policy n-step TD -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OffPolicyTD:
    """Off-policy n-step TD with generalized importance sampling factors.

    The expected operator is affine, ``F_bar(Q) = G Q + g``, with
    ``G = I + diag(D) M (gamma T diag(rho) - I)``, ``g = diag(D) M R`` and
    ``M = sum_{i<n} (gamma T diag(c))^i`` where ``T`` is the behavior
    state-action transition matrix and ``D = kappa_b pi_b``.
    """

    mdp: TabularMDP
    behavior: Policy
    target: Policy
    factors: ISFactors

    def __post_init__(self) -> None:
        self.behavior.check_shape(self.mdp)
        self.target.check_shape(self.mdp)
        check_coverage(self.target, self.behavior)
        self.factors.validate(self.mdp, self.behavior)
        mdp = self.mdp
        kappa = stationary_distribution(mdp, self.behavior)
        D = (kappa[:, None] * self.behavior.table).reshape(-1)
        T = mdp.sa_transition(self.behavior)
        c = self.factors.c.reshape(-1)
        rho = self.factors.rho.reshape(-1)
        step = mdp.gamma * T * c[None, :]
        M = np.eye(mdp.n_sa)
        term = np.eye(mdp.n_sa)
        for _ in range(1, self.factors.n):
            term = term @ step
            M = M + term
        DM = D[:, None] * M
        G = np.eye(mdp.n_sa) + DM @ (mdp.gamma * T * rho[None, :] - np.eye(mdp.n_sa))
        g = DM @ mdp.R.reshape(-1)
        for name, val in (("kappa", kappa), ("D", D), ("T", T), ("G", G), ("g", g)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        # cumulative tables for inverse-CDF sampling
        object.__setattr__(self, "_kappa_cdf", np.cumsum(kappa))
        object.__setattr__(self, "_pi_cdf", np.cumsum(self.behavior.table, axis=1))
        object.__setattr__(self, "_p_cdf", np.cumsum(mdp.P, axis=2))

    @property
    def gamma_o(self) -> float:
        """Exact max-norm Lipschitz constant ``||G||_inf`` of the affine map."""
        return float(np.max(np.sum(np.abs(self.G), axis=1)))

    def expected(self, Q) -> np.ndarray:
        Q = np.asarray(Q, dtype=float)
        return Q @ self.G.T + self.g

    def draw(self, gen, steps: int) -> np.ndarray:
        """Paths ``(S0, A0, ..., Sn, An)`` as flat state-action indices, shape ``(steps, n + 1)``."""
        n, A = self.factors.n, self.mdp.n_actions
        u = gen.random((steps, 2 * (n + 1)))
        out = np.empty((steps, n + 1), dtype=np.int64)
        s = _inverse_cdf(np.broadcast_to(self._kappa_cdf, (steps, self.kappa.size)), u[:, 0])
        for i in range(n + 1):
            if i > 0:
                s = _inverse_cdf(self._p_cdf[a, s], u[:, 2 * i])
            a = _inverse_cdf(self._pi_cdf[s], u[:, 2 * i + 1])
            out[:, i] = s * A + a
        return out

    def _path_terms(self, paths: np.ndarray):
        """Per-path discounted trace weights ``w_i`` for ``i < n``."""
        n, gamma = self.factors.n, self.mdp.gamma
        c = self.factors.c.reshape(-1)
        w = np.ones((paths.shape[0], n))
        for i in range(1, n):
            w[:, i] = w[:, i - 1] * gamma * c[paths[:, i]]
        return w

    def apply(self, Q, paths) -> np.ndarray:
        """``F(Q, y)``: the n-step corrected update on coordinate ``(S0, A0)``."""
        Q = np.asarray(Q, dtype=float)
        paths = np.asarray(paths, dtype=np.int64)
        gamma = self.mdp.gamma
        R = self.mdp.R.reshape(-1)
        rho = self.factors.rho.reshape(-1)
        rows = np.arange(Q.shape[0])
        w = self._path_terms(paths)
        corr = np.zeros(Q.shape[0])
        for i in range(self.factors.n):
            cur, nxt = paths[:, i], paths[:, i + 1]
            corr += w[:, i] * (R[cur] + gamma * rho[nxt] * Q[rows, nxt] - Q[rows, cur])
        out = Q.copy()
        out[rows, paths[:, 0]] += corr
        return out

    def sample(self, Q, gen) -> np.ndarray:
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        return self.apply(Q, self.draw(gen, Q.shape[0]))

    def fixed_point(self, tol: float = 1e-12) -> np.ndarray:
        """``Q_{pi, rho}`` by Banach iteration on the exact operator."""
        if not self.gamma_o < 1:
            raise ValueError(f"operator is not a max-norm contraction (factor {self.gamma_o:.6g})")
        return solve_fixed_point(self.expected, NormSpec.max_norm(self.mdp.n_sa), self.gamma_o, tol)

    def enumerate_paths(self, cap: int = PATH_ENUMERATION_CAP):
        """All positive-probability paths with their probabilities, or ``None`` past ``cap``."""
        n, mdp = self.factors.n, self.mdp
        m = mdp.n_sa
        if m ** (n + 1) > cap:
            return None
        paths = np.array(list(itertools.product(range(m), repeat=n + 1)), dtype=np.int64)
        prob = self.D[paths[:, 0]].copy()
        for i in range(1, n + 1):
            prob *= self.T[paths[:, i - 1], paths[:, i]]
        keep = prob > 0
        return paths[keep], prob[keep]

    def path_affine(self, paths: np.ndarray):
        """Per-path ``(u_y, r_y)`` with ``F(Q, y) = Q + e_{(S0,A0)} (u_y . Q + r_y)``."""
        gamma = self.mdp.gamma
        R = self.mdp.R.reshape(-1)
        rho = self.factors.rho.reshape(-1)
        m = self.mdp.n_sa
        w = self._path_terms(paths)
        U = np.zeros((paths.shape[0], m))
        r = np.zeros(paths.shape[0])
        rows = np.arange(paths.shape[0])
        for i in range(self.factors.n):
            cur, nxt = paths[:, i], paths[:, i + 1]
            np.add.at(U, (rows, nxt), w[:, i] * gamma * rho[nxt])
            np.add.at(U, (rows, cur), -w[:, i])
            r += w[:, i] * R[cur]
        return U, r

    def expected_by_enumeration(self):
        """``(G, g)`` summed over enumerated paths: an independent route to the affine map."""
        found = self.enumerate_paths()
        if found is None:
            raise ValueError("too many paths to enumerate")
        paths, prob = found
        U, r = self.path_affine(paths)
        m = self.mdp.n_sa
        G = np.eye(m)
        g = np.zeros(m)
        np.add.at(G, paths[:, 0], prob[:, None] * U)
        np.add.at(g, paths[:, 0], prob * r)
        return G, g

    def noise_constant(self, *, gen: np.random.Generator | None = None, n_audit: int = 20_000) -> tuple[float, bool]:
        """``L_o`` with ``||F(Q, y) - F_bar(Q)||_inf <= L_o (1 + ||Q||_inf)``.

        Certified as ``max_y max(||H_y||_inf, ||h_y||_inf)`` over enumerated
        paths when feasible; otherwise the largest ratio seen in an audit
        sweep, inflated by 5%. Returns ``(L_o, certified)``.
        """
        found = self.enumerate_paths()
        Gm = self.G - np.eye(self.mdp.n_sa)
        row_abs = np.sum(np.abs(Gm), axis=1)
        if found is not None:
            paths, _ = found
            U, r = self.path_affine(paths)
            i0 = paths[:, 0]
            own = np.sum(np.abs(U - Gm[i0]), axis=1)
            others = np.array([np.max(np.delete(row_abs, j), initial=0.0) for j in range(row_abs.size)])
            H_norm = np.maximum(own, others[i0])
            g_abs = np.abs(self.g)
            h_own = np.abs(r - self.g[i0])
            g_others = np.array([np.max(np.delete(g_abs, j), initial=0.0) for j in range(g_abs.size)])
            h_norm = np.maximum(h_own, g_others[i0])
            return float(np.max(np.maximum(H_norm, h_norm))), True
        gen = np.random.default_rng(0) if gen is None else gen
        Q = self.mdp.q_max * (2.0 * gen.random((n_audit, self.mdp.n_sa)) - 1.0)
        Q[: n_audit // 2] *= 10.0 ** gen.uniform(-3, 3, size=(n_audit // 2, 1))
        dev = np.max(np.abs(self.apply(Q, self.draw(gen, n_audit)) - self.expected(Q)), axis=1)
        ratio = dev / (1.0 + np.max(np.abs(Q), axis=1))
        return L_O_INFLATION * float(np.max(ratio)), False

    def problem(self, *, Q0=None, name: str = "offpolicy_td") -> SAProblem:
        """The instance with multiplicative noise in the max norm."""
        L_o, certified = self.noise_constant()
        m = self.mdp.n_sa
        return SAProblem(
            dim=m,
            draw=self.draw,
            apply=self.apply,
            expected=self.expected,
            norm_c=NormSpec.max_norm(m),
            gamma_c=self.gamma_o,
            noise=NoiseModel.multiplicative(L_o),
            x_star=self.fixed_point(),
            x0=np.zeros(m) if Q0 is None else Q0,
            name=name,
            params={**self.mdp.describe(), "n": self.factors.n, "L_o_certified": certified},
        )


def offpolicy_td_expected(mdp: TabularMDP, behavior: Policy, target: Policy, factors: ISFactors, Q) -> np.ndarray:
    return OffPolicyTD(mdp, behavior, target, factors).expected(Q)


def offpolicy_td_sample(mdp: TabularMDP, behavior: Policy, target: Policy, factors: ISFactors, Q, generator) -> np.ndarray:
    return OffPolicyTD(mdp, behavior, target, factors).sample(Q, generator)


def policy_q_values(mdp: TabularMDP, policy: Policy) -> np.ndarray:
    """``Q^pi = (I - gamma T_pi)^{-1} R`` by a linear solve."""
    T = mdp.sa_transition(policy)
    return np.linalg.solve(np.eye(mdp.n_sa) - mdp.gamma * T, mdp.R.reshape(-1))


def policy_values(mdp: TabularMDP, policy: Policy) -> np.ndarray:
    """``V^pi = (I - gamma P_pi)^{-1} r_pi``."""
    r_pi = np.sum(policy.table * mdp.R, axis=1)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * mdp.state_transition(policy), r_pi)


# TD with linear function approximation ---------------------------------------


@dataclass(frozen=True, eq=False)
class TDLFA:
    """On-policy TD(0) with features; ``Phi`` has one row per state."""

    mdp: TabularMDP
    policy: Policy
    Phi: np.ndarray
    A_bar: np.ndarray
    b_bar: np.ndarray
    kappa: np.ndarray
    rescaled: bool

    def sampler(self, gen, steps: int):
        """Stacks ``A_o(y)`` and ``b_o(y)`` for ``y = (s, a, s')`` drawn from ``kappa_Y``."""
        mdp = self.mdp
        u = gen.random((steps, 3))
        s = _inverse_cdf(np.broadcast_to(np.cumsum(self.kappa), (steps, mdp.n_states)), u[:, 0])
        a = _inverse_cdf(np.cumsum(self.policy.table, axis=1)[s], u[:, 1])
        s2 = _inverse_cdf(np.cumsum(mdp.P, axis=2)[a, s], u[:, 2])
        phi, phi2 = self.Phi[s], self.Phi[s2]
        A = phi[:, :, None] * (mdp.gamma * phi2 - phi)[:, None, :]
        b = -phi * mdp.R[s, a][:, None]
        return A, b

    @property
    def theta_star(self) -> np.ndarray:
        return np.linalg.solve(self.A_bar, self.b_bar)


def tdlfa_build(mdp: TabularMDP, policy: Policy, Phi) -> TDLFA:
    """Exact TD-LFA expectations ``A_bar = Phi^T K (gamma P_pi - I) Phi``, ``b_bar = -Phi^T K r_pi``.

    Features are rescaled (with a warning) when some row has norm above 1.
    """
    policy.check_shape(mdp)
    Phi = np.array(Phi, dtype=float)
    if Phi.ndim != 2 or Phi.shape[0] != mdp.n_states:
        raise ValueError("Phi must have one row per state")
    if np.linalg.matrix_rank(Phi) < Phi.shape[1]:
        raise ValueError("feature columns are linearly dependent")
    top = float(np.max(np.linalg.norm(Phi, axis=1)))
    rescaled = top > 1.0
    if rescaled:
        warnings.warn(f"feature rows rescaled by 1/{top:.6g} to unit norm bound", stacklevel=2)
        Phi = Phi / top
    kappa = stationary_distribution(mdp, policy)
    Pp = mdp.state_transition(policy)
    r_pi = np.sum(policy.table * mdp.R, axis=1)
    KPhi = kappa[:, None] * Phi
    A_bar = KPhi.T @ (mdp.gamma * Pp @ Phi - Phi)
    b_bar = -KPhi.T @ r_pi
    return TDLFA(mdp, policy, Phi, A_bar, b_bar, kappa, rescaled)


def tdlfa_problem(lfa: TDLFA, *, x0=None) -> tuple[LinearSASpec, SAProblem]:
    """Remodel TD-LFA as a contraction using the per-sample caps 2 and 1."""
    spec, _ = remodel(lfa.sampler, lfa.Phi.shape[1], A_bar=lfa.A_bar, b_bar=lfa.b_bar, A_max=2.0, b_max=1.0, name="td_lfa")
    return spec, linear_sa_problem(spec, x0=x0, name="td_lfa")


# Q-learning --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QLearning:
    """Asynchronous Q-learning: one state-action coordinate per draw."""

    mdp: TabularMDP
    behavior: Policy

    def __post_init__(self) -> None:
        self.behavior.check_shape(self.mdp)
        D = behavior_weights(self.mdp, self.behavior)
        if np.any(D <= 0):
            raise ValueError("behavior policy must visit every state-action pair")
        D.setflags(write=False)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "_d_cdf", np.cumsum(D))
        object.__setattr__(self, "_p_cdf", np.cumsum(self.mdp.P, axis=2))

    @property
    def d_min(self) -> float:
        return float(np.min(self.D))

    @property
    def gamma_hat(self) -> float:
        """Max-norm contraction factor ``1 - D_min (1 - gamma)``."""
        return 1.0 - self.d_min * (1.0 - self.mdp.gamma)

    @property
    def sigma_bar(self) -> float:
        return 4.0 / (1.0 - self.mdp.gamma)

    def bellman(self, Q) -> np.ndarray:
        """``H(Q)(s, a) = R(s, a) + gamma sum_s' P_a(s, s') max_a' Q(s', a')``."""
        mdp = self.mdp
        Q = np.asarray(Q, dtype=float)
        vmax = Q.reshape(Q.shape[:-1] + (mdp.n_states, mdp.n_actions)).max(axis=-1)
        nxt = np.einsum("ast,...t->...sa", mdp.P, vmax)
        return (mdp.R + mdp.gamma * nxt).reshape(Q.shape)

    def expected(self, Q) -> np.ndarray:
        Q = np.asarray(Q, dtype=float)
        return self.D * self.bellman(Q) + (1.0 - self.D) * Q

    def draw(self, gen, steps: int) -> np.ndarray:
        """Rows ``(s, a, s')``; ``(s, a)`` drawn as one flat index."""
        mdp = self.mdp
        u = gen.random((steps, 2))
        sa = _inverse_cdf(np.broadcast_to(self._d_cdf, (steps, mdp.n_sa)), u[:, 0])
        s, a = np.divmod(sa, mdp.n_actions)
        s2 = _inverse_cdf(self._p_cdf[a, s], u[:, 1])
        return np.stack([s, a, s2], axis=1)

    def apply(self, Q, Y) -> np.ndarray:
        mdp = self.mdp
        Q = np.asarray(Q, dtype=float)
        Y = np.asarray(Y, dtype=np.int64)
        rows = np.arange(Q.shape[0])
        s, a, s2 = Y[:, 0], Y[:, 1], Y[:, 2]
        Qs = Q.reshape(-1, mdp.n_states, mdp.n_actions)
        target = mdp.R[s, a] + mdp.gamma * Qs[rows, s2].max(axis=1)
        idx = s * mdp.n_actions + a
        out = Q.copy()
        out[rows, idx] = target
        return out

    def sample(self, Q, gen) -> np.ndarray:
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        return self.apply(Q, self.draw(gen, Q.shape[0]))

    def q_star(self, tol: float = 1e-12) -> np.ndarray:
        return solve_fixed_point(self.bellman, NormSpec.max_norm(self.mdp.n_sa), self.mdp.gamma, tol)

    def problem(self, *, Q0=None, noise: str = "additive", name: str = "q_learning") -> SAProblem:
        """The instance in the max norm.

        ``noise="additive"`` declares sub-Gaussian noise with ``sigma_bar =
        4/(1-gamma)`` and ``c_d = 1``; ``"multiplicative"`` declares
        ``sigma = 2`` from ``||F - F_bar|| <= 1 + 2 ||Q||``.
        """
        m = self.mdp.n_sa
        Q0 = np.zeros(m) if Q0 is None else np.asarray(Q0, dtype=float)
        if np.max(np.abs(Q0)) > self.mdp.q_max + 1e-12:
            raise ValueError("Q0 must satisfy ||Q0||_inf <= 1/(1-gamma)")
        if noise == "additive":
            model = NoiseModel.additive(self.sigma_bar, 1.0)
        elif noise == "multiplicative":
            model = NoiseModel.multiplicative(2.0)
        else:
            raise ValueError("noise must be 'additive' or 'multiplicative'")
        return SAProblem(
            dim=m,
            draw=self.draw,
            apply=self.apply,
            expected=self.expected,
            norm_c=NormSpec.max_norm(m),
            gamma_c=self.gamma_hat,
            noise=model,
            x_star=self.q_star(),
            x0=Q0,
            name=name,
            params={**self.mdp.describe(), "d_min": self.d_min, "gamma_hat": self.gamma_hat},
        )

    def bound_constant(self) -> float:
        """``c_q = log(|S||A|) / (D_min^3 (1 - gamma)^5)``."""
        return math.log(self.mdp.n_sa) / (self.d_min**3 * (1.0 - self.mdp.gamma) ** 5)

    def default_schedule(self, alpha: float | None = None) -> StepSchedule:
        """``alpha = 4 / (1 - gamma_hat)`` unless given, with ``h = max(alpha, 1)`` so ``alpha_0 <= 1``."""
        alpha = 4.0 / (1.0 - self.gamma_hat) if alpha is None else float(alpha)
        return StepSchedule(alpha, max(alpha, 1.0))

    def conditions(self, schedule: StepSchedule) -> ConditionReport:
        return ConditionReport((
            ConditionItem("z == 1", schedule.z, 1.0, ">="),
            ConditionItem("alpha > 2/(1 - gamma_hat)", schedule.alpha, 2.0 / (1.0 - self.gamma_hat), ">"),
            ConditionItem("alpha0 <= 1", schedule.alpha0, 1.0, "<="),
        ))

    def bound_curve(
        self, schedule: StepSchedule, delta: float, K: int, k_range, *, enforce_conditions: bool = True
    ) -> BoundCurve:
        """Bound on ``||Q_k - Q*||_inf^2`` for all ``k >= K`` with probability ``1 - delta``.

        Needs ``z = 1``, ``alpha > 2 / (1 - gamma_hat)`` and ``alpha_0 <= 1``.
        """
        _check_delta(delta)
        rep = self.conditions(schedule)
        if enforce_conditions and not rep.passed:
            raise ConditionError(rep)
        ks = _ks(k_range).astype(float)
        if np.any(ks < K):
            raise ValueError("k must be at least K")
        h = schedule.h
        rate = (1.0 - self.gamma_hat) * schedule.alpha / 2.0
        vals = self.bound_constant() * (
            math.log(1.0 / delta) / (ks + h)
            + (h / (ks + h)) ** rate
            + (1.0 + np.log((ks + 1.0) / math.sqrt(max(K, 1)))) / (ks + h)
        )
        return BoundCurve(ks.astype(np.int64), vals, delta, K, "q_learning", params={"c_q": self.bound_constant()})


def qlearning_expected(mdp: TabularMDP, behavior: Policy, Q) -> np.ndarray:
    return QLearning(mdp, behavior).expected(Q)


def qlearning_sample(mdp: TabularMDP, behavior: Policy, Q, generator) -> np.ndarray:
    return QLearning(mdp, behavior).sample(Q, generator)
