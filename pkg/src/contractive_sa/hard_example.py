"""A one-dimensional multiplicative-noise example with provably heavy tails.

``F(x, y) = y x`` with ``Y = a + N`` w.p. ``1/(N+1)`` and ``Y = a - 1``
otherwise, so ``F_bar(x) = a x`` contracts with factor ``a`` and ``x* = 0``.
Every iterate is ``x_0 prod_i (1 + alpha_i (Y_i - 1))``, which allows exact
enumeration of the law of ``x_k`` for small ``k`` and an explicit
single-path lower bound on its rescaled moment generating function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import NormSpec, StepSchedule
from .engine import NoiseModel, SAProblem, run_ensemble

ENUMERATION_CAP = 24
OVERFLOW_EXPONENT = 700.0


@dataclass(frozen=True)
class HardExampleSpec:
    """Parameters ``a`` in (0, 1), ``N >= 1``, ``x0 > 0`` and the stepsizes."""

    a: float
    N: float
    x0: float
    schedule: StepSchedule

    def __post_init__(self) -> None:
        if not 0 < self.a < 1:
            raise ValueError("a must lie in (0, 1)")
        if not self.N >= 1:
            raise ValueError("N must be at least 1")
        if not self.x0 > 0:
            raise ValueError("x0 must be positive")
        if not self.schedule.alpha0 < 0.5:
            raise ValueError("alpha_0 must be below 1/2 to keep iterates positive")

    @property
    def D(self) -> float:
        return self.a + self.N - 1.0

    @property
    def sigma(self) -> float:
        """Noise level: ``|Y - a| <= max(N, 1) = N``."""
        return float(max(self.N, 1.0))

    @property
    def m_e(self) -> int:
        return math.ceil(2.0 * self.schedule.alpha * self.D) + 1

    @property
    def p_high(self) -> float:
        return 1.0 / (self.N + 1.0)

    @property
    def support(self) -> tuple[float, float]:
        return (self.a + self.N, self.a - 1.0)

    def describe(self) -> dict:
        return {
            "a": self.a,
            "N": self.N,
            "x0": self.x0,
            "D": self.D,
            "m_e": self.m_e,
            "schedule": self.schedule.describe(),
        }


def hard_example_problem(spec: HardExampleSpec) -> SAProblem:
    """The example as an :class:`SAProblem` (noise drawn by inverse CDF)."""
    y_hi, y_lo = spec.support
    p_hi = spec.p_high

    def draw(gen, steps):
        u = gen.random((steps, 1))
        return np.where(u < p_hi, y_hi, y_lo)

    def apply(X, Y):
        return Y * X

    return SAProblem(
        dim=1,
        draw=draw,
        apply=apply,
        expected=lambda X: spec.a * X,
        norm_c=NormSpec.euclidean(1),
        gamma_c=spec.a,
        noise=NoiseModel.multiplicative(spec.sigma),
        x_star=np.zeros(1),
        x0=np.array([spec.x0]),
        name="hard_example",
        params=spec.describe(),
    )


def exact_distribution(spec: HardExampleSpec, k: int) -> tuple[np.ndarray, np.ndarray]:
    """All ``2^k`` atoms ``(values, probabilities)`` of ``x_k``."""
    if not 0 <= k <= ENUMERATION_CAP:
        raise ValueError(f"k must lie in [0, {ENUMERATION_CAP}]")
    s = spec.schedule
    y_hi, y_lo = spec.support
    vals = np.array([spec.x0])
    probs = np.array([1.0])
    for i in range(k):
        a_i = s(i)
        vals = np.concatenate([vals * (1.0 + a_i * (y_hi - 1.0)), vals * (1.0 + a_i * (y_lo - 1.0))])
        probs = np.concatenate([probs * spec.p_high, probs * (1.0 - spec.p_high)])
    return vals, probs


def exact_cdf(spec: HardExampleSpec, k: int):
    """Sorted support and cumulative probabilities of ``x_k``."""
    v, p = exact_distribution(spec, k)
    order = np.argsort(v, kind="stable")
    return v[order], np.cumsum(p[order])


@dataclass(frozen=True)
class MGFValue:
    """``E exp(lambda [(k+h)^{1/2} x_k]^beta)`` with its logarithm."""

    log_value: float
    overflow: bool

    @property
    def value(self) -> float:
        return math.inf if self.overflow else math.exp(self.log_value)


def exact_rescaled_mgf(spec: HardExampleSpec, k: int, lam: float, beta_tilde: float) -> MGFValue:
    """Exact rescaled moment generating function from the enumerated law.

    ``value`` is ``+inf`` when any exponent exceeds 700; ``log_value`` stays
    finite and is what monotonicity checks should compare.
    """
    if not lam > 0 or not beta_tilde > 0:
        raise ValueError("lambda and beta_tilde must be positive")
    v, p = exact_distribution(spec, k)
    expo = lam * (math.sqrt(k + spec.schedule.h) * v) ** beta_tilde
    log_value = float(logsumexp(expo + np.log(p)))
    return MGFValue(log_value, bool(np.max(expo) > OVERFLOW_EXPONENT))


def k_epsilon(spec: HardExampleSpec, eps: float, *, k_max: int = 10**9) -> int:
    """First ``k`` with ``exp(alpha_k D / (1 + eps)) <= 1 + alpha_k D``.

    ``alpha_k`` decreases, so the inequality then holds for all later ``k``;
    the search is a bisection on that monotone predicate.
    """
    s = spec.schedule
    D = spec.D

    def ok(k):
        t = s(k) * D
        return math.exp(t / (1.0 + eps)) <= 1.0 + t

    if ok(0):
        return 0
    lo, hi = 0, 1
    while not ok(hi):
        lo, hi = hi, 2 * hi
        if hi > k_max:
            raise ValueError("k_epsilon beyond search budget")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def admissible(spec: HardExampleSpec, beta_tilde: float, eps: float) -> bool:
    """Whether ``eps`` witnesses divergence for ``beta_tilde`` (``z = 1``)."""
    ad = spec.schedule.alpha * spec.D
    return beta_tilde > 2.0 / (1.0 + 2.0 * ad / (1.0 + eps))


@dataclass(frozen=True)
class EpsilonWitness:
    eps: float
    k_eps: int


def find_epsilon_witness(spec: HardExampleSpec, beta_tilde: float, *, j_max: int = 60) -> EpsilonWitness | None:
    """Largest admissible ``eps = 2^{-j}`` and its ``k_eps``.

    A larger ``eps`` gives a smaller ``k_eps``, hence a larger certificate.
    For ``z < 1`` the high-path product grows like ``exp(c k^(1-z))`` for any
    ``eps > 0``, so every ``beta_tilde`` diverges and ``eps = 1`` is used.
    """
    if spec.schedule.z < 1:
        return EpsilonWitness(1.0, k_epsilon(spec, 1.0))
    for j in range(j_max + 1):
        eps = 2.0**-j
        if admissible(spec, beta_tilde, eps):
            return EpsilonWitness(eps, k_epsilon(spec, eps))
    return None


def mgf_lower_bound(
    spec: HardExampleSpec,
    k,
    lam: float,
    beta_tilde: float,
    k_eps: int,
    *,
    beta_prime: float | None = None,
):
    """Log of the all-high-path lower bound on the rescaled MGF.

    For ``z = 1`` this is ``lam x0^b (k+h)^{b/2} prod_{i=k_eps}^{k-1}
    (1 + alpha_i D)^b - k log(N + 1)``. For ``z < 1`` the ``(k+h)^{b/2}``
    factor becomes ``(k+h)^{beta_prime}``. Accepts a scalar or an array of
    ``k``; values for ``k < k_eps`` are NaN.
    """
    s = spec.schedule
    ks = np.atleast_1d(np.asarray(k, dtype=np.int64))
    if np.any(ks < 0):
        raise ValueError("k must be nonnegative")
    if s.z < 1 and beta_prime is None:
        raise ValueError("beta_prime is required when z < 1")
    kmax = int(ks.max())
    i = np.arange(k_eps, max(kmax, k_eps), dtype=float)
    # cumulative log of the high-path growth from k_eps
    cum = np.concatenate([[0.0], np.cumsum(np.log1p(s.alpha / (i + s.h) ** s.z * spec.D))])
    out = np.full(ks.shape, np.nan)
    valid = ks >= k_eps
    kv = ks[valid]
    logprod = cum[kv - k_eps]
    rescale = 0.5 * beta_tilde if s.z == 1 else beta_prime
    log_inner = (
        math.log(lam)
        + beta_tilde * math.log(spec.x0)
        + rescale * np.log(kv + s.h)
        + beta_tilde * logprod
    )
    out[valid] = np.exp(log_inner) - kv * math.log(spec.N + 1.0)
    return float(out[0]) if np.ndim(k) == 0 else out


def first_exceedance(values: np.ndarray, ks: np.ndarray, threshold: float) -> int | None:
    """Smallest ``k`` whose value exceeds ``threshold``."""
    hit = np.flatnonzero(np.asarray(values) > threshold)
    return None if hit.size == 0 else int(np.asarray(ks)[hit[0]])


def rescaled_samples(spec: HardExampleSpec, k: int, n_samples: int, master_seed: int, *, workers: int = 1) -> np.ndarray:
    """``sqrt(k + h) x_k`` for ``n_samples`` seeded trajectories."""
    ens = run_ensemble(
        hard_example_problem(spec), spec.schedule, k, n_samples, master_seed,
        workers=workers, record_ks=[k],
    )
    return math.sqrt(k + spec.schedule.h) * ens.errors[:, 0]


def tail_exponent_empirical(
    spec: HardExampleSpec,
    k: int,
    n_samples: int,
    master_seed: int,
    fit_range=None,
    *,
    workers: int = 1,
    n_boot: int = 200,
):
    """Fitted tail exponent of ``sqrt(k + h) x_k`` with a bootstrap interval."""
    from .verify import empirical_ccdf, fit_tail_exponent

    if n_samples < 10_000:
        raise ValueError("n_samples must be at least 1e4")
    samples = rescaled_samples(spec, k, n_samples, master_seed, workers=workers)
    return fit_tail_exponent(empirical_ccdf(samples), fit_range, n_boot=n_boot, seed=master_seed)
