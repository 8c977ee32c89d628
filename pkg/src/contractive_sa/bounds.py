"""Explicit concentration bounds and the constants behind them.

Two families are covered. Multiplicative noise (``||F - F_bar|| <= sigma
(1 + ||x||)``) gets an almost-sure envelope, maximal bounds, a log-free
variant, fixed-time and tail forms and a sample-complexity scan.
Sub-Gaussian additive noise gets maximal bounds for ``z = 1`` and ``z < 1``
by two derivations, plus fixed-time and tail forms.

Every curve bounds the squared error ``||x_k - x*||_c^2`` except
:func:`worst_case_bound`, which bounds the error itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.optimize import minimize_scalar

from .core import StepSchedule
from .moreau import MoreauConfig

E = math.e

MULT_VARIANTS = ("worst_case", "thm1_D0", "thm1_Dpos", "thm1_prime", "fixed_time_mult")
ADD_VARIANTS = ("thm2_z1", "thm2_zlt1", "fixed_time_add")


# condition reports ---------------------------------------------------------------


@dataclass(frozen=True)
class ConditionItem:
    """One clause: ``margin > 0`` (or ``>= 0`` when not strict) means satisfied."""

    name: str
    value: float
    threshold: float
    relation: str
    gating: bool = True

    @property
    def margin(self) -> float:
        if self.relation in (">", ">="):
            return self.value - self.threshold
        return self.threshold - self.value

    @property
    def passed(self) -> bool:
        m = self.margin
        return m > 0 if self.relation in (">", "<") else m >= 0

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "threshold": self.threshold,
            "relation": self.relation,
            "margin": self.margin,
            "passed": self.passed,
            "gating": self.gating,
        }


@dataclass(frozen=True)
class ConditionReport:
    items: tuple[ConditionItem, ...]

    @property
    def passed(self) -> bool:
        return all(it.passed for it in self.items if it.gating)

    def failures(self) -> list[ConditionItem]:
        return [it for it in self.items if it.gating and not it.passed]

    def __getitem__(self, name: str) -> ConditionItem:
        for it in self.items:
            if it.name == name:
                return it
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {"passed": self.passed, "items": [it.as_dict() for it in self.items]}


class ConditionError(ValueError):
    """A bound was requested for parameters that violate its conditions."""

    def __init__(self, report: ConditionReport) -> None:
        self.report = report
        names = ", ".join(it.name for it in report.failures())
        super().__init__(f"conditions violated: {names}")


# curves ------------------------------------------------------------------------


@dataclass
class BoundCurve:
    """Values of a bound over ``ks`` with its confidence and anchor."""

    ks: np.ndarray
    values: np.ndarray
    delta: float | None
    K: int
    variant: str
    params: dict = field(default_factory=dict)

    @property
    def k_nonincreasing_from(self) -> int:
        """First ``k`` after which the evaluated values never increase."""
        v = self.values
        up = np.flatnonzero(np.diff(v) > 0)
        if up.size == 0:
            return int(self.ks[0])
        return int(self.ks[up[-1] + 1])

    def at(self, k: int) -> float:
        idx = np.searchsorted(self.ks, k)
        if idx >= self.ks.size or self.ks[idx] != k:
            raise KeyError(k)
        return float(self.values[idx])

    def describe(self) -> dict:
        return {
            "variant": self.variant,
            "delta": self.delta,
            "K": self.K,
            "k_first": int(self.ks[0]),
            "k_last": int(self.ks[-1]),
            "k_nonincreasing_from": self.k_nonincreasing_from,
            **self.params,
        }


def _ks(k_range) -> np.ndarray:
    if isinstance(k_range, tuple) and len(k_range) == 2:
        return np.arange(int(k_range[0]), int(k_range[1]) + 1)
    return np.asarray(list(k_range) if not isinstance(k_range, np.ndarray) else k_range, dtype=np.int64)


def _check_delta(delta: float) -> None:
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")


# multiplicative noise -------------------------------------------------------------


@dataclass(frozen=True)
class MultLedger:
    """Constants of the multiplicative-noise analysis for one instance.

    ``sigma`` is the declared noise level and ``sigma_used`` the smallest
    value at least as large that makes ``2 alpha D`` an integer; every
    constant uses ``sigma_used``.
    """

    gamma_c: float
    sigma: float
    sigma_used: float
    D: float
    x0_err: float
    xstar_norm: float
    moreau: MoreauConfig
    schedule: StepSchedule
    gamma_tilde: float
    D0: float
    D1: float
    D2: float
    D3: float
    D4: float
    theta: float
    m: int | None
    c1: float
    c2: float
    c3: float
    c4: float
    c1_prime: float
    c1_dprime: float
    c5: float

    @property
    def regime(self) -> str:
        if abs(self.D) <= 1e-12:
            return "D=0"
        return "D>0" if self.D > 0 else "D<0"

    @property
    def noise_scale(self) -> float:
        """``sigma (1 + ||x*||)``, the additive part of the envelope growth."""
        return self.sigma_used * (1.0 + self.xstar_norm)

    def describe(self) -> dict:
        out = {
            k: getattr(self, k)
            for k in (
                "gamma_c sigma sigma_used D x0_err xstar_norm gamma_tilde D0 D1 D2 D3 D4 "
                "theta m c1 c2 c3 c4 c1_prime c1_dprime c5"
            ).split()
        }
        out["regime"] = self.regime
        out["moreau"] = self.moreau.describe()
        out["schedule"] = self.schedule.describe()
        return out


def integral_sigma(sigma: float, gamma_c: float, alpha: float) -> float:
    """Smallest ``sigma' >= sigma`` with ``2 alpha (sigma' + gamma_c - 1)`` integral.

    Returned unchanged when ``D <= 0``.
    """
    D = sigma + gamma_c - 1.0
    if D <= 0:
        return sigma
    two_a_d = 2.0 * alpha * D
    target = math.ceil(two_a_d - 1e-9)
    if abs(two_a_d - target) <= 1e-9:
        return sigma
    return target / (2.0 * alpha) + 1.0 - gamma_c


def _mult_base(gamma_c: float, sigma: float, moreau: MoreauConfig):
    gt = gamma_c * moreau.u_cM / moreau.l_cM
    if gt >= 1:
        raise ValueError(f"smoothed contraction factor {gt:.6g} is not below 1; lower mu")
    D0 = 2.0 * (1.0 - gt)
    D1 = 4.0 * sigma**2 / moreau.l_cM**2
    D2 = 2.0 * moreau.L * (2.0 + sigma) ** 2 * moreau.u_cM**2 / (moreau.mu * moreau.l_cs**2)
    return gt, D0, D1, D2


def condition1_min_h(alpha: float, gamma_c: float, sigma: float, moreau: MoreauConfig, z: float = 1.0) -> float:
    """Smallest ``h > 1`` (to within ``1e-6``) whose ``alpha_0`` meets the stepsize clause."""
    sigma = integral_sigma(sigma, gamma_c, alpha)
    _, D0, _, D2 = _mult_base(gamma_c, sigma, moreau)
    cap = min(1.0, D0, D0 / (4.0 * D2))
    # pad by one part in 1e12 so alpha / h cannot round above the cap
    return max(1.0 + 1e-6, (alpha / cap) ** (1.0 / z) * (1.0 + 1e-12))


def _c5(alpha: float, h: float, C: float, c4: float, m: int) -> float:
    """``sup_k alpha_k (C + c4 log((k - 1 + h)/(h - 1)))^m`` over integers ``k >= 0``."""

    def logf(t):  # t = k + h
        inner = C + c4 * math.log((t - 1.0) / (h - 1.0))
        return math.log(alpha / t) + m * math.log(inner)

    # log f is unimodal in t: scan geometrically until it decreases
    t_lo, t = h, h
    best_t, best = h, logf(h)
    while True:
        t_next = t * 2.0
        v = logf(t_next)
        if v < best:
            break
        best_t, best = t_next, v
        t_lo, t = t, t_next
        if t > 1e300:
            break
    hi = min(best_t * 2.0, 1e300)
    res = minimize_scalar(lambda s: -logf(math.exp(s)), bounds=(math.log(max(t_lo, h)), math.log(hi)), method="bounded", options={"xatol": 1e-12})
    t_star = math.exp(res.x)
    cands = {0.0}
    for kk in (math.floor(t_star - h), math.ceil(t_star - h), math.floor(best_t - h), math.ceil(best_t - h)):
        if kk >= 0:
            cands.add(float(kk))
    top = max(logf(k + h) for k in cands)
    return math.exp(top) if top < 709.0 else math.inf


def _power(base: float, m: int) -> float:
    """``base ** m`` saturating to ``inf`` instead of raising on overflow."""
    try:
        return base**m
    except OverflowError:
        return math.inf


def build_mult_ledger(
    gamma_c: float,
    sigma: float,
    x0_err: float,
    xstar_norm: float,
    moreau: MoreauConfig,
    schedule: StepSchedule,
) -> MultLedger:
    """Constants for multiplicative noise with stepsizes ``alpha/(k + h)``."""
    if not gamma_c < 1:
        raise ValueError("gamma_c must be below 1")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not x0_err > 0:
        raise ValueError("x0_err must be positive")
    alpha, h = schedule.alpha, schedule.h
    sigma_used = integral_sigma(sigma, gamma_c, alpha)
    D = sigma_used + gamma_c - 1.0
    gt, D0, D1, D2 = _mult_base(gamma_c, sigma_used, moreau)
    e2 = x0_err**2
    theta = D0 * e2 / (8.0 * D1 * ((1.0 + xstar_norm) ** 2 + e2))
    D3 = D0 * D2 / (4.0 * D1)
    D4 = (1.0 + xstar_norm) ** 2 / e2
    alpha0 = schedule.alpha0
    u2 = moreau.u_cM**2
    c2 = D0 / (16.0 * alpha0 * D1 * moreau.l_cM**2)
    c3 = 8.0 * alpha * E * D2 * D4 / (alpha * D0 - 2.0) if alpha * D0 > 2 else math.inf
    c4 = alpha * D3
    c1_prime = 32.0 * u2 * D1 * (1.0 + sigma_used * D4 * alpha**2) * (D4 + 1.0) / D0
    m = None
    c1 = c1_dprime = c5 = math.nan
    if D > 1e-12:
        m = int(round(2.0 * alpha * D)) + 1
        tail = 1.0 + sigma_used**2 * D4 / D**2
        c1 = _power(32.0 * D1 * (1.0 + D4) * u2 / D0, m) * tail
        if h > 1 and math.isfinite(c3):
            c5 = _c5(alpha, h, c2 + c3, c4, m)
            c1_dprime = _power(64.0 * D1 * (1.0 + D4) * u2 / D0, m + 1) * tail * (1.0 + c5)
    return MultLedger(
        gamma_c=gamma_c,
        sigma=sigma,
        sigma_used=sigma_used,
        D=D,
        x0_err=x0_err,
        xstar_norm=xstar_norm,
        moreau=moreau,
        schedule=schedule,
        gamma_tilde=gt,
        D0=D0,
        D1=D1,
        D2=D2,
        D3=D3,
        D4=D4,
        theta=theta,
        m=m,
        c1=c1,
        c2=c2,
        c3=c3,
        c4=c4,
        c1_prime=c1_prime,
        c1_dprime=c1_dprime,
        c5=c5,
    )


def mult_ledger_for(problem, moreau: MoreauConfig, schedule: StepSchedule) -> MultLedger:
    """Ledger for an :class:`~contractive_sa.engine.SAProblem` with multiplicative noise."""
    return build_mult_ledger(
        problem.gamma_c, problem.noise.sigma, problem.x0_err, problem.xstar_norm, moreau, schedule
    )


def validate_mult(ledger: MultLedger) -> ConditionReport:
    s = ledger.schedule
    a0 = s.alpha0
    items = [
        # z lies in (0, 1], so z >= 1 means z == 1
        ConditionItem("z == 1", s.z, 1.0, ">="),
        ConditionItem("alpha * D0 > 2", s.alpha * ledger.D0, 2.0, ">"),
        ConditionItem("h > 1", s.h, 1.0, ">"),
        ConditionItem("alpha0 <= 1", a0, 1.0, "<="),
        ConditionItem("alpha0 <= D0", a0, ledger.D0, "<="),
        ConditionItem("alpha0 <= D0/(4 D2)", a0, ledger.D0 / (4.0 * ledger.D2), "<="),
        ConditionItem("D >= 0", ledger.D, 0.0, ">=", gating=False),
    ]
    return ConditionReport(tuple(items))


def worst_case_bound(ledger, k):
    """Almost-sure envelope ``B_k(D)`` on ``||x_k - x*||_c``.

    Accepts any object with ``D``, ``sigma_used`` (or ``sigma``), ``x0_err``,
    ``xstar_norm`` and ``schedule`` attributes. Needs ``z = 1``,
    ``alpha_0 <= 1`` and, when ``D >= 0``, ``h > 1``.
    """
    s = ledger.schedule
    sigma = getattr(ledger, "sigma_used", None) or ledger.sigma
    D = ledger.D
    if s.z != 1:
        raise ValueError("the almost-sure envelope needs z = 1")
    if s.alpha0 > 1:
        raise ValueError("the almost-sure envelope needs alpha_0 <= 1")
    k = np.asarray(k, dtype=float)
    scale = sigma * (1.0 + ledger.xstar_norm)
    e0 = ledger.x0_err
    if D < -1e-12:
        out = np.full(k.shape, e0 - scale / D)
    else:
        if not s.h > 1:
            raise ValueError("h must exceed 1 when D >= 0")
        lr = np.log((k - 1.0 + s.h) / (s.h - 1.0))
        if D <= 1e-12:
            out = e0 + scale * s.alpha * lr
        else:
            c = scale / D
            out = np.exp(s.alpha * D * lr) * (e0 + c) - c
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class WorstCaseParams:
    """Minimal inputs of :func:`worst_case_bound` without a full ledger."""

    D: float
    sigma: float
    x0_err: float
    xstar_norm: float
    schedule: StepSchedule


def _require(ledger: MultLedger, regime: str) -> None:
    if ledger.regime != regime:
        raise ValueError(f"variant needs regime {regime}, ledger has {ledger.regime}")


def _second_bracket(ledger: MultLedger, ks: np.ndarray, K: int, log_term: float) -> np.ndarray:
    s = ledger.schedule
    a, h = s.alpha, s.h
    return (
        log_term
        + ledger.c2 * (h / (K + h)) ** (a * ledger.D0 / 2.0 - 1.0)
        + ledger.c3
        + ledger.c4 * np.log((ks - 1.0 + h) / (K - 1.0 + h))
    )


def mult_bound_curve(
    ledger: MultLedger,
    delta: float,
    K: int,
    variant: str,
    k_range,
    *,
    enforce_conditions: bool = True,
    literal: bool = False,
) -> BoundCurve:
    """Evaluate a multiplicative-noise bound on ``||x_k - x*||_c^2`` over ``k_range``.

    ``k_range`` is ``(k_first, k_last)`` or an explicit sequence. For
    ``thm1_D0`` the squared log factor is floored at 1 so the bound covers
    small ``k``; ``literal=True`` evaluates it without the floor.
    ``fixed_time_mult`` ignores ``K`` and anchors each ``k`` at itself.
    """
    if variant not in MULT_VARIANTS:
        raise ValueError(f"unknown multiplicative variant {variant!r}")
    ks = _ks(k_range).astype(float)
    if variant != "fixed_time_mult" and np.any(ks < K):
        raise ValueError("k must be at least K")
    if variant == "worst_case":
        vals = np.asarray(worst_case_bound(ledger, ks)) ** 2
        return BoundCurve(ks.astype(np.int64), np.atleast_1d(vals), None, K, variant)
    _check_delta(delta)
    if enforce_conditions:
        rep = validate_mult(ledger)
        if not rep.passed:
            raise ConditionError(rep)
    s = ledger.schedule
    a, h = s.alpha, s.h
    e2 = ledger.x0_err**2
    lg = np.log((ks - 1.0 + h) / (h - 1.0))
    if variant == "thm1_D0":
        _require(ledger, "D=0")
        lg2 = lg**2 if literal else np.maximum(lg, 1.0) ** 2
        vals = ledger.c1_prime * a * e2 / (ks + h) * lg2 * _second_bracket(ledger, ks, K, math.log(1 / delta))
    else:
        _require(ledger, "D>0")
        m = ledger.m
        if variant == "thm1_Dpos":
            L = math.log(m / delta)
            first = L + ledger.c2 + ledger.c3 + ledger.c4 * lg
            with np.errstate(over="ignore"):
                vals = ledger.c1 * a * e2 / (ks + h) * first ** (m - 1) * _second_bracket(ledger, ks, K, L)
        elif variant == "thm1_prime":
            L = math.log((m + 1) / delta)
            with np.errstate(over="ignore"):
                vals = ledger.c1_dprime * (a / (ks + h)) * e2 * (_power(L, m) + 1.0) * _second_bracket(ledger, ks, K, L)
        else:
            vals = _mult_fixed_time(ledger, delta, ks)
    return BoundCurve(
        ks.astype(np.int64), np.asarray(vals, dtype=float), delta, K, variant,
        params={"literal": literal} if variant == "thm1_D0" else {},
    )


def _mult_fixed_time(ledger: MultLedger, delta: float, ks):
    s = ledger.schedule
    A = ledger.c1 * s.alpha * ledger.x0_err**2 / (ks + s.h)
    C = ledger.c2 + ledger.c3 + ledger.c4 * np.log((ks - 1.0 + s.h) / (s.h - 1.0))
    return A * (math.log(ledger.m / delta) + C) ** ledger.m


def mult_fixed_time(ledger: MultLedger, delta: float, k: int) -> float:
    """Fixed-time bound on ``||x_k - x*||_c^2`` holding with probability ``1 - delta``."""
    _require(ledger, "D>0")
    _check_delta(delta)
    return float(_mult_fixed_time(ledger, delta, float(k)))


def mult_tail(ledger: MultLedger, k: int, epsilon: float) -> float:
    """Probability bound on ``||x_k - x*||_c > epsilon`` from the fixed-time bound.

    The fixed-time bound ``A (log(m/delta) + C)^m`` is inverted in closed
    form, giving ``m exp(C - (epsilon^2/A)^{1/m})``, clamped to ``[0, 1]``.
    """
    _require(ledger, "D>0")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    s = ledger.schedule
    A = ledger.c1 * s.alpha * ledger.x0_err**2 / (k + s.h)
    C = ledger.c2 + ledger.c3 + ledger.c4 * math.log((k - 1.0 + s.h) / (s.h - 1.0))
    expo = C - (epsilon**2 / A) ** (1.0 / ledger.m)
    if expo >= 0:
        return 1.0
    return float(min(1.0, ledger.m * math.exp(expo)))


@dataclass(frozen=True)
class SampleComplexity:
    k: int | None
    attainable: bool
    epsilon: float
    delta: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def mult_sample_complexity(ledger: MultLedger, epsilon: float, delta: float, *, k_cap: float = 1e300) -> SampleComplexity:
    """Smallest ``k`` after which the fixed-time bound stays at or below ``epsilon^2``.

    The bound rises, peaks and then decreases, so the scan first finds the
    peak, then doubles ``k`` and bisects on the decreasing branch.
    """
    _require(ledger, "D>0")
    _check_delta(delta)
    if not epsilon > 0:
        return SampleComplexity(None, False, epsilon, delta)
    target = epsilon**2
    f = lambda k: float(_mult_fixed_time(ledger, delta, float(k)))  # noqa: E731
    # locate the peak on a doubling grid, then refine by integer ternary search
    k = 1
    while f(2 * k) > f(k):
        k *= 2
        if k > k_cap:
            return SampleComplexity(None, False, epsilon, delta)
    lo, hi = max(0, k // 2), 2 * k
    while hi - lo > 2:
        m1 = lo + (hi - lo) // 3
        m2 = hi - (hi - lo) // 3
        if f(m1) < f(m2):
            lo = m1
        else:
            hi = m2
    peak = max(range(lo, hi + 1), key=f)
    if max(f(0), f(peak)) <= target:
        return SampleComplexity(0, True, epsilon, delta)
    lo = peak
    hi = max(peak + 1, 2 * peak)
    while f(hi) > target:
        lo, hi = hi, 2 * hi
        if hi > k_cap:
            return SampleComplexity(None, False, epsilon, delta)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if f(mid) > target:
            lo = mid
        else:
            hi = mid
    return SampleComplexity(int(hi), True, epsilon, delta)


# additive noise ----------------------------------------------------------------


@dataclass(frozen=True)
class AddLedger:
    """Constants of the sub-Gaussian additive-noise analysis for one instance."""

    gamma_c: float
    sigma_bar: float
    c_d: float
    x0_err: float
    moreau: MoreauConfig
    schedule: StepSchedule
    gamma_tilde: float
    Dbar0: float
    Dbar1: float
    Dbar2: float
    Dbar3: float
    Dbar4: float
    Dbar5: float
    theta_bar: float
    cbar1: float
    cbar2: float
    cbar3: float
    cbar4: float
    cbar5: float

    def describe(self) -> dict:
        out = {
            k: getattr(self, k)
            for k in (
                "gamma_c sigma_bar c_d x0_err gamma_tilde Dbar0 Dbar1 Dbar2 Dbar3 Dbar4 "
                "Dbar5 theta_bar cbar1 cbar2 cbar3 cbar4 cbar5"
            ).split()
        }
        out["moreau"] = self.moreau.describe()
        out["schedule"] = self.schedule.describe()
        return out


def _add_base(gamma_c: float, sigma_bar: float, c_d: float, moreau: MoreauConfig):
    gt = gamma_c * moreau.u_cM / moreau.l_cM
    if gt >= 1:
        raise ValueError(f"smoothed contraction factor {gt:.6g} is not below 1; lower mu")
    mu, L, l2 = moreau.mu, moreau.L, moreau.l_cs**2
    D0 = mu * l2 / (8.0 * sigma_bar**2 * L)
    D1 = 2.0 * (1.0 - gt)
    D2 = 8.0 * L * moreau.u_cM**2 / (mu * l2)
    D3 = 2.0 * sigma_bar**2 * moreau.u_cM_star**2
    D4 = 2.0 * c_d * sigma_bar**2 * L / (mu * l2)
    return gt, D0, D1, D2, D3, D4


def build_add_ledger(
    gamma_c: float,
    sigma_bar: float,
    c_d: float,
    x0_err: float,
    moreau: MoreauConfig,
    schedule: StepSchedule,
) -> AddLedger:
    """Constants for sub-Gaussian additive noise with stepsizes ``alpha/(k + h)^z``."""
    if not gamma_c < 1:
        raise ValueError("gamma_c must be below 1")
    if not (sigma_bar > 0 and c_d > 0):
        raise ValueError("sigma_bar and c_d must be positive")
    gt, D0, D1, D2, D3, D4 = _add_base(gamma_c, sigma_bar, c_d, moreau)
    a = schedule.alpha
    u2 = moreau.u_cM**2
    slack = D1 * a / 2.0 - 1.0
    return AddLedger(
        gamma_c=gamma_c,
        sigma_bar=sigma_bar,
        c_d=c_d,
        x0_err=x0_err,
        moreau=moreau,
        schedule=schedule,
        gamma_tilde=gt,
        Dbar0=D0,
        Dbar1=D1,
        Dbar2=D2,
        Dbar3=D3,
        Dbar4=D4,
        Dbar5=D1 * D4 / (4.0 * D3),
        theta_bar=D1 / (8.0 * D3),
        cbar1=16.0 * D3 * u2 * a / D1,
        cbar2=u2 / moreau.l_cM**2,
        cbar3=16.0 * E * u2 * D4 * a**2 / slack if slack > 0 else math.inf,
        cbar4=32.0 * u2 * D3 * a / D1,
        cbar5=16.0 * E * u2 * D4 * a / D1,
    )


def add_ledger_for(problem, moreau: MoreauConfig, schedule: StepSchedule) -> AddLedger:
    """Ledger for an :class:`~contractive_sa.engine.SAProblem` with sub-Gaussian noise."""
    nz = problem.noise
    return build_add_ledger(problem.gamma_c, nz.sigma_bar, nz.c_d, problem.x0_err, moreau, schedule)


def _stepsize_cap_add(D0: float, D1: float, D2: float, D3: float) -> float:
    return min(4.0 * D0 * D3 / D1, 1.0 / D1, D1 / (4.0 * D2))


def condition2_min_h(
    alpha: float, z: float, gamma_c: float, sigma_bar: float, c_d: float, moreau: MoreauConfig
) -> float:
    """Smallest ``h`` meeting the stepsize clauses and, for ``z < 1``, the ``4z`` threshold."""
    _, D0, D1, D2, D3, _ = _add_base(gamma_c, sigma_bar, c_d, moreau)
    h = max(1.0, (alpha / _stepsize_cap_add(D0, D1, D2, D3)) ** (1.0 / z) * (1.0 + 1e-12))
    if z < 1:
        h = max(h, (4.0 * z / (D1 * alpha)) ** (1.0 / (1.0 - z)))
    return h


def validate_add(ledger: AddLedger) -> ConditionReport:
    s = ledger.schedule
    a0 = s.alpha0
    D0, D1, D2, D3 = ledger.Dbar0, ledger.Dbar1, ledger.Dbar2, ledger.Dbar3
    items = [
        ConditionItem("alpha0 <= 4 D0 D3 / D1", a0, 4.0 * D0 * D3 / D1, "<="),
        ConditionItem("alpha0 <= 1 / D1", a0, 1.0 / D1, "<="),
        ConditionItem("alpha0 <= D1 / (4 D2)", a0, D1 / (4.0 * D2), "<="),
        ConditionItem("h >= 1", s.h, 1.0, ">="),
    ]
    if s.z == 1:
        items.append(ConditionItem("alpha * D1 > 2", s.alpha * D1, 2.0, ">"))
    else:
        items.append(
            ConditionItem("h >= (4z/(D1 alpha))^(1/(1-z))", s.h, (4.0 * s.z / (D1 * s.alpha)) ** (1.0 / (1.0 - s.z)), ">=")
        )
        items.append(
            ConditionItem("h >= (2z/(D1 alpha))^(1/(1-z))", s.h, (2.0 * s.z / (D1 * s.alpha)) ** (1.0 / (1.0 - s.z)), ">=", gating=False)
        )
    return ConditionReport(tuple(items))


def validate_conditions(ledger) -> ConditionReport:
    """Itemized clause-by-clause check for either ledger type."""
    if isinstance(ledger, MultLedger):
        return validate_mult(ledger)
    if isinstance(ledger, AddLedger):
        return validate_add(ledger)
    raise TypeError("expected a MultLedger or AddLedger")


def _decay(ledger: AddLedger, ks, start) -> np.ndarray:
    """Deterministic transient ``c2 e0^2``-term multiplier from ``start`` to ``k``."""
    s = ledger.schedule
    D1a = ledger.Dbar1 * s.alpha
    if s.z == 1:
        return (start / (ks + s.h)) ** (D1a / 2.0)
    return np.exp(-D1a / (2.0 * (1.0 - s.z)) * ((ks + s.h) ** (1.0 - s.z) - start ** (1.0 - s.z)))


def _check_add(ledger: AddLedger, enforce: bool) -> None:
    if enforce:
        rep = validate_add(ledger)
        if not rep.passed:
            raise ConditionError(rep)


def add_bound_curve(
    ledger: AddLedger,
    delta: float,
    K: int,
    k_range,
    *,
    derivation: str = "telescoping",
    enforce_conditions: bool = True,
) -> BoundCurve:
    """Maximal bound on ``||x_k - x*||_c^2`` for all ``k >= K`` under additive noise.

    ``derivation="telescoping"`` gives the ``log((k+1)/K^{1/2})`` form (with
    ``K`` read as ``max(K, 1)`` inside that log); ``"ville"`` gives the
    supermartingale form with ``log((k-1+h)/(K-1+h))`` growth and needs
    ``h > 1``.
    """
    _check_delta(delta)
    _check_add(ledger, enforce_conditions)
    ks = _ks(k_range).astype(float)
    if np.any(ks < K):
        raise ValueError("k must be at least K")
    s = ledger.schedule
    a, h, z = s.alpha, s.h, s.z
    u2 = ledger.moreau.u_cM**2
    e2 = ledger.x0_err**2
    scale = (ks + h) ** z
    lead = ledger.cbar1 * math.log(1.0 / delta) / scale
    variant = "thm2_z1" if z == 1 else "thm2_zlt1"
    if derivation == "telescoping":
        tele = np.log((ks + 1.0) / math.sqrt(max(K, 1)))
        const = ledger.cbar3 if z == 1 else ledger.cbar5
        vals = lead + ledger.cbar2 * e2 * _decay(ledger, ks, h) + (const + ledger.cbar4 * tele) / scale
    elif derivation == "ville":
        if not h > 1:
            raise ValueError("the supermartingale derivation needs h > 1")
        D1, D3, D4, D5 = ledger.Dbar1, ledger.Dbar3, ledger.Dbar4, ledger.Dbar5
        drift_coef = 16.0 * D3 * D5 * u2 * a**2 / D1
        if z == 1:
            trans = ledger.cbar2 * e2 * h ** (D1 * a / 2.0) / ((ks + h) * (K + h) ** (D1 * a / 2.0 - 1.0))
            const = ledger.cbar3 / scale
            drift = drift_coef * np.log((ks - 1.0 + h) / (K - 1.0 + h)) / scale
        else:
            trans = ledger.cbar2 * e2 * ((K + h) / (ks + h)) ** z * np.exp(
                -D1 * a / (2.0 * (1.0 - z)) * ((K + h) ** (1.0 - z) - h ** (1.0 - z))
            )
            const = 16.0 * D4 * u2 * a / (D1 * scale)
            drift = drift_coef / (1.0 - z) * ((ks - 1.0 + h) ** (1.0 - z) - (K - 1.0 + h) ** (1.0 - z)) / scale
        vals = lead + trans + const + drift
    else:
        raise ValueError("derivation must be 'telescoping' or 'ville'")
    return BoundCurve(ks.astype(np.int64), np.asarray(vals), delta, K, variant, params={"derivation": derivation})


def _add_deterministic(ledger: AddLedger, k) -> np.ndarray:
    s = ledger.schedule
    ks = np.asarray(k, dtype=float)
    const = ledger.cbar3 + ledger.cbar4 if s.z == 1 else ledger.cbar4 + ledger.cbar5
    return ledger.cbar2 * ledger.x0_err**2 * _decay(ledger, ks, s.h) + const / (ks + s.h) ** s.z


def add_fixed_time(ledger: AddLedger, delta: float, k, *, enforce_conditions: bool = True):
    """Fixed-time bound on ``||x_k - x*||_c^2`` holding with probability ``1 - delta``.

    For ``z < 1`` the transient decays as ``exp(-...)``, matching the tail form.
    """
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    _check_add(ledger, enforce_conditions)
    s = ledger.schedule
    ks = np.asarray(k, dtype=float)
    out = ledger.cbar1 * math.log(1.0 / delta) / (ks + s.h) ** s.z + _add_deterministic(ledger, ks)
    return float(out) if out.ndim == 0 else out


def add_fixed_time_curve(ledger: AddLedger, delta: float, k_range, **kw) -> BoundCurve:
    ks = _ks(k_range)
    return BoundCurve(ks, np.atleast_1d(add_fixed_time(ledger, delta, ks, **kw)), delta, int(ks[0]), "fixed_time_add")


def add_tail(ledger: AddLedger, k, epsilon, *, enforce_conditions: bool = True):
    """Bound on ``P(||x_k - x*||_c > epsilon)``, clamped to ``[0, 1]``."""
    _check_add(ledger, enforce_conditions)
    s = ledger.schedule
    ks = np.asarray(k, dtype=float)
    eps = np.asarray(epsilon, dtype=float)
    expo = -((ks + s.h) ** s.z) / ledger.cbar1 * (eps**2 - _add_deterministic(ledger, ks))
    out = np.clip(np.exp(np.minimum(expo, 0.0)), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def curve_family(ledger, delta: float, K: int, k_range, variants: Iterable[str]) -> dict[str, BoundCurve]:
    """Several variants at matched parameters, keyed by variant name."""
    out = {}
    for v in variants:
        if v in MULT_VARIANTS:
            out[v] = mult_bound_curve(ledger, delta, K, v, k_range)
        elif v == "fixed_time_add":
            out[v] = add_fixed_time_curve(ledger, delta, k_range)
        else:
            out[v] = add_bound_curve(ledger, delta, K, k_range)
    return out
