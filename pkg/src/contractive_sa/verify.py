"""Statistical checks that tie simulated ensembles to the bounds.

Contents: whole-trajectory violation audits with exact Clopper-Pearson
limits, empirical survival curves with a tail-exponent fit, and Monte Carlo
checks of the moment-generating-function recursion and of the exponential
supermartingale used by the maximal bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.optimize import minimize
from scipy.special import gammaincc

from .bounds import (
    AddLedger,
    BoundCurve,
    ConditionError,
    MultLedger,
    validate_conditions,
    worst_case_bound,
)
from .engine import EnsembleResult, SAProblem, run_ensemble
from .moreau import moreau_eval

#: Points required above the upper end of a tail-fit range.
TAIL_MIN_ABOVE = 20
#: Minimum number of survival points (and likelihood bins) used by a fit.
TAIL_MIN_POINTS = 20
#: Standard errors allowed by the Monte Carlo gates.
SE_GATE = 3.0


# violation audits --------------------------------------------------------------


def clopper_pearson_upper(violations: int, n: int, conf: float = 0.95) -> float:
    """Exact one-sided upper confidence limit on a binomial proportion."""
    if not 0 <= violations <= n or n < 1:
        raise ValueError("need 0 <= violations <= n and n >= 1")
    if violations == n:
        return 1.0
    return float(stats.beta.ppf(conf, violations + 1, n - violations))


@dataclass(frozen=True)
class ViolationAudit:
    """Whole-trajectory violations of a bound curve on ``[K, horizon]``."""

    n: int
    K: int
    violations: int
    cp_upper: float
    conf: float
    horizon: int
    faults: int
    first_violation_k: int | None
    max_ratio: float
    variant: str

    @property
    def rate(self) -> float:
        return self.violations / self.n

    def passes(self, delta: float) -> bool:
        return self.cp_upper <= delta

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "K": self.K,
            "violations": self.violations,
            "cp_upper": self.cp_upper,
            "conf": self.conf,
            "horizon": self.horizon,
            "faults": self.faults,
            "first_violation_k": self.first_violation_k,
            "max_ratio": self.max_ratio,
            "variant": self.variant,
        }


def audit_violations(
    ens: EnsembleResult,
    curve: BoundCurve,
    *,
    tol: float = 1e-9,
    conf: float = 0.95,
) -> ViolationAudit:
    """Count trajectories with ``errors[k]^2 > bound_k`` for some recorded ``k >= K``.

    ``tol`` is a relative slack (absolute below 1) for float rounding.
    Trajectories that hit a non-finite iterate count as violations.
    """
    K = int(curve.K)
    sel = ens.ks >= K
    ks = ens.ks[sel]
    if ks.size == 0:
        raise ValueError("the ensemble records no step at or after K")
    pos = np.searchsorted(curve.ks, ks)
    if np.any(pos >= curve.ks.size) or np.any(curve.ks[np.minimum(pos, curve.ks.size - 1)] != ks):
        raise ValueError("the bound curve does not cover the recorded steps from K")
    bound = np.asarray(curve.values, dtype=float)[pos]
    err2 = ens.errors[:, sel] ** 2
    slack = tol * np.maximum(1.0, np.abs(bound))
    with np.errstate(invalid="ignore"):
        over = err2 > bound + slack
    faulted = ens.fault_steps >= 0
    per_traj = np.any(over, axis=1) | faulted
    violations = int(per_traj.sum())
    first = None
    if np.any(over):
        first = int(ks[np.flatnonzero(np.any(over, axis=0))[0]])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, err2 / bound, np.where(err2 > 0, np.inf, 0.0))
    finite = ratio[np.isfinite(err2)]
    return ViolationAudit(
        n=ens.n,
        K=K,
        violations=violations,
        cp_upper=clopper_pearson_upper(violations, ens.n, conf),
        conf=conf,
        horizon=int(ks[-1]),
        faults=int(faulted.sum()),
        first_violation_k=first,
        max_ratio=float(np.max(finite)) if finite.size else math.nan,
        variant=curve.variant,
    )


# survival curves and tail fits ---------------------------------------------------


@dataclass(frozen=True)
class EmpiricalCCDF:
    """Sorted samples with ``survival[i]`` the fraction strictly above ``values[i]``."""

    values: np.ndarray
    survival: np.ndarray

    @property
    def n(self) -> int:
        return self.values.size


def empirical_ccdf(samples) -> EmpiricalCCDF:
    """Empirical complementary CDF of nonnegative samples."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if x.size < 2:
        raise ValueError("need at least two samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    if x[0] < 0:
        raise ValueError("samples must be nonnegative")
    if x[0] == x[-1]:
        raise ValueError("degenerate support: all samples are equal")
    n = x.size
    above = n - np.searchsorted(x, x, side="right")
    return EmpiricalCCDF(values=x, survival=above / n)


@dataclass(frozen=True)
class TailFit:
    """Fit of ``S(eps) ~ K1 exp(-K2 eps^beta)`` with a bootstrap interval on ``beta``.

    ``r_squared`` belongs to the linearized first stage; ``shape`` is the
    power-law index ``d`` of the refined generalized-gamma stage.
    """

    beta_hat: float
    k2_hat: float
    log_k1_hat: float
    r_squared: float
    ci: tuple[float, float]
    beta_linear: float
    shape: float
    fit_range: tuple[float, float]
    n_points: int
    n_bins: int
    n_boot: int
    boot_failures: int = 0
    bootstrap: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)

    def as_dict(self) -> dict:
        return {
            "beta_hat": self.beta_hat,
            "k2_hat": self.k2_hat,
            "log_k1_hat": self.log_k1_hat,
            "r_squared": self.r_squared,
            "ci": list(self.ci),
            "beta_linear": self.beta_linear,
            "shape": self.shape,
            "fit_range": list(self.fit_range),
            "n_points": self.n_points,
            "n_bins": self.n_bins,
            "n_boot": self.n_boot,
            "boot_failures": self.boot_failures,
        }


def _gg_survival(params, edges):
    """Generalized-gamma survival at ``edges`` for ``(log d, log p, log a)``."""
    ld, lp, la = params
    d, p = math.exp(ld), math.exp(lp)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        y = np.exp(p * (np.log(edges) - la))
    y = np.where(edges > 0, y, 0.0)
    return gammaincc(d / p, y)


#: Finite stand-in for an infeasible likelihood (keeps simplex arithmetic finite).
_INFEASIBLE = 1e300


def _gg_nll(params, edges, counts):
    if np.any(np.abs(params) > 700):
        return _INFEASIBLE
    Q = _gg_survival(params, edges)
    mass = Q[:-1] - Q[1:]
    if not Q[0] > 0 or np.any(mass[counts > 0] <= 0) or not np.all(np.isfinite(mass)):
        return _INFEASIBLE
    used = counts > 0
    total = counts.sum()
    return -(counts[used] @ np.log(mass[used]) - total * math.log(Q[0])) / total


def _nelder_mead(x0, edges, counts):
    return minimize(
        _gg_nll,
        np.asarray(x0, dtype=float),
        args=(edges, counts),
        method="Nelder-Mead",
        options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20_000, "maxfev": 20_000},
    )


#: Relative grid (in bits) that normalized samples are snapped to.
SNAP_BITS = 32


def _snap(v: np.ndarray) -> np.ndarray:
    """Round to ``SNAP_BITS`` significant bits.

    Rescaled copies of a sample differ from the original by a few ulps after
    normalization; snapping makes them bit-identical (barring a value within
    an ulp of a grid midpoint), so the fit is exactly scale invariant.
    """
    mant, ex = np.frexp(v)
    return np.ldexp(np.round(np.ldexp(mant, SNAP_BITS)), ex - SNAP_BITS)


def _linear_stage(eps, surv):
    """Least squares of ``log(-log S)`` on ``log eps``: slope, intercept, R^2."""
    xs = np.log(eps)
    ys = np.log(-np.log(surv))
    slope, intercept, r, _, _ = stats.linregress(xs, ys)
    return float(slope), float(intercept), float(min(max(r * r, 0.0), 1.0))


def _thin(n_avail: int, n_keep: int) -> np.ndarray:
    if n_avail <= n_keep:
        return np.arange(n_avail)
    return np.unique(np.round(np.linspace(0, n_avail - 1, n_keep)).astype(int))


def fit_tail_exponent(
    curve: EmpiricalCCDF,
    fit_range=None,
    *,
    n_boot: int = 200,
    seed: int = 0,
    n_bins: int = 200,
    conf: float = 0.95,
) -> TailFit:
    """Tail exponent ``beta`` of an empirical survival curve.

    Stage one regresses ``log(-log S)`` on ``log eps`` over ``fit_range``,
    which yields starting values and ``r_squared``. Stage two refines
    ``beta`` by binned maximum likelihood in the generalized-gamma family
    ``S(eps) = Gamma(d/p, (eps/a)^p) / Gamma(d/p)``, whose tail is
    ``K1 eps^(d-p) exp(-(eps/a)^p)``, so ``beta = p`` and ``K2 = a^-p``.
    Samples below ``fit_range[0]`` are conditioned away; everything above
    ``fit_range[1]`` forms one open bin. ``log_k1_hat`` is the smallest
    ``log K1`` for which ``K1 exp(-K2 eps^beta)`` dominates the empirical
    curve on the range. Samples are normalized by their median above the
    lower end, which makes ``beta`` invariant to rescaling. The interval
    is a percentile bootstrap over ``n_boot`` multinomial resamples.
    """
    x = curve.values
    n = x.size
    lo_default, hi_default = 0.0, float(x[-(TAIL_MIN_ABOVE + 1)]) if n > TAIL_MIN_ABOVE else math.nan
    lo, hi = (lo_default, hi_default) if fit_range is None else (float(fit_range[0]), float(fit_range[1]))
    if not (0 <= lo < hi):
        raise ValueError("fit_range must satisfy 0 <= lo < hi")
    if int(np.sum(x > hi)) < TAIL_MIN_ABOVE:
        raise ValueError(f"insufficient tail mass: fewer than {TAIL_MIN_ABOVE} samples above {hi:g}")
    inside = (x > lo) & (x <= hi)
    if int(inside.sum()) < TAIL_MIN_POINTS:
        raise ValueError("insufficient samples inside fit_range")
    ref = float(np.median(x[x > lo]))
    z = _snap(x / ref)

    # stage one on the survival curve
    mask = inside & (curve.survival > 0) & (curve.survival < 1) & (x > 0)
    idx = np.flatnonzero(mask)
    _, first = np.unique(z[idx], return_index=True)
    idx = idx[first]
    idx = idx[_thin(idx.size, max(n_bins, TAIL_MIN_POINTS))]
    if idx.size < TAIL_MIN_POINTS:
        raise ValueError(f"fewer than {TAIL_MIN_POINTS} distinct survival points in fit_range")
    slope, intercept, r2 = _linear_stage(z[idx], curve.survival[idx])

    # stage two: binned conditional likelihood; bins are fixed by ranks so
    # that rescaling the samples cannot move a point across an edge
    i_lo = int(np.searchsorted(x, lo, side="right"))
    i_hi = int(np.searchsorted(x, hi, side="right"))
    cuts = np.unique(np.round(np.linspace(i_lo, i_hi, n_bins + 1)).astype(np.int64))
    interior = cuts[1:-1]
    interior = interior[z[interior - 1] < z[interior]]
    cuts = np.concatenate([[i_lo], interior, [i_hi]])

    def edge(i):
        if i == 0:
            return 0.0
        return 0.5 * (z[i - 1] + z[i]) if i < n else math.inf

    edges = np.array([edge(int(i)) for i in cuts] + [math.inf])
    counts = np.append(np.diff(cuts), n - i_hi).astype(float)
    n_below = i_lo
    if counts.size < TAIL_MIN_POINTS:
        raise ValueError("too few distinct bins inside fit_range")

    starts = []
    if slope > 0:
        # a Weibull with the stage-one slope and scale
        starts.append([math.log(slope), math.log(slope), -intercept / slope])
    for p0 in (0.5, 1.0, 2.0):
        starts.append([math.log(p0), math.log(p0), 0.0])
    best = None
    for s0 in starts:
        res = _nelder_mead(s0, edges, counts)
        if res.fun < _INFEASIBLE and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise RuntimeError("tail likelihood could not be evaluated at any start")
    ld, lp, la = best.x
    beta = math.exp(lp)
    k2_norm = math.exp(-beta * la)
    k2 = k2_norm * ref ** (-beta)
    log_k1 = float(np.max(np.log(curve.survival[idx]) + k2_norm * z[idx] ** beta))

    rng = np.random.default_rng(seed)
    probs = np.append(counts, n_below) / n
    boot = []
    failures = 0
    for _ in range(n_boot):
        c = rng.multinomial(n, probs)[:-1].astype(float)
        res = _nelder_mead(best.x, edges, c)
        if res.fun < _INFEASIBLE:
            boot.append(math.exp(res.x[1]))
        else:
            failures += 1
    boot = np.asarray(boot)
    if boot.size:
        tail = (1.0 - conf) / 2.0
        ci = (float(np.quantile(boot, tail)), float(np.quantile(boot, 1.0 - tail)))
    else:
        ci = (math.nan, math.nan)
    return TailFit(
        beta_hat=beta,
        k2_hat=k2,
        log_k1_hat=log_k1,
        r_squared=r2,
        ci=ci,
        beta_linear=slope,
        shape=math.exp(ld),
        fit_range=(lo, hi),
        n_points=int(idx.size),
        n_bins=int(counts.size),
        n_boot=n_boot,
        boot_failures=failures,
        bootstrap=boot,
    )


# proof-machinery checks ----------------------------------------------------------


class NonFiniteMGF(FloatingPointError):
    """A Monte Carlo moment generating function estimate overflowed."""

    def __init__(self, k: int, what: str) -> None:
        super().__init__(f"non-finite {what} estimate at k = {k}")
        self.k = k


@dataclass(frozen=True)
class MachineryReport:
    """Per-step Monte Carlo comparison with a ``SE_GATE`` standard-error gate.

    For the recursion ``lhs``/``rhs`` are the two sides; for the
    supermartingale ``lhs`` holds ``E M_{k+1}`` and ``rhs`` holds ``E M_k``.
    """

    check: str
    regime: str
    ks: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    se: np.ndarray
    n: int
    lambda_scale: float
    drift_scale: float
    indicator_failures: int

    @property
    def slack(self) -> np.ndarray:
        """``rhs + gate * se - lhs``; negative entries fail."""
        return self.rhs + SE_GATE * self.se - self.lhs

    @property
    def failing_ks(self) -> np.ndarray:
        return self.ks[self.slack < 0]

    @property
    def passed(self) -> bool:
        return bool(np.all(self.slack >= 0))

    def as_dict(self) -> dict:
        return {
            "check": self.check,
            "regime": self.regime,
            "passed": self.passed,
            "n": self.n,
            "lambda_scale": self.lambda_scale,
            "drift_scale": self.drift_scale,
            "indicator_failures": self.indicator_failures,
            "ks": self.ks.tolist(),
            "lhs": self.lhs.tolist(),
            "rhs": self.rhs.tolist(),
            "se": self.se.tolist(),
            "failing_ks": self.failing_ks.tolist(),
        }


def _ks_range(k_range) -> np.ndarray:
    if isinstance(k_range, tuple) and len(k_range) == 2:
        ks = np.arange(int(k_range[0]), int(k_range[1]) + 1)
    else:
        ks = np.asarray(list(k_range), dtype=np.int64)
    if ks.size == 0 or np.any(ks < 0) or np.any(np.diff(ks) != 1):
        raise ValueError("k_range must be a nonempty run of consecutive nonnegative steps")
    return ks


@dataclass(frozen=True)
class _Potential:
    """``lambda_k``, the indicator and the envelope values along a window."""

    regime: str
    lam: np.ndarray  # lambda_k for k in steps
    env: np.ndarray  # M(x_k - x*) per trajectory and step
    ind: np.ndarray  # indicator of the good event up to k
    steps: np.ndarray
    alphas: np.ndarray
    cum_alpha: np.ndarray  # sum_{i<k} alpha_i
    indicator_failures: int


def _potential(p: SAProblem, ledger, steps: np.ndarray, n: int, master_seed: int, workers: int, lambda_scale: float):
    s = ledger.schedule
    k_last = int(steps[-1])
    ens = run_ensemble(p, s, k_last, n, master_seed, workers=workers, iterate_ks=steps)
    if ens.faults.size:
        raise NonFiniteMGF(int(ens.fault_steps[ens.faults[0]]), "iterate")
    diffs = ens.iterates - p.x_star
    env = np.asarray(moreau_eval(ledger.moreau, diffs.reshape(-1, p.dim))).reshape(n, steps.size)
    alphas = s(steps)
    cum = np.concatenate([[0.0], np.cumsum(s(np.arange(k_last + 1)))])[steps]
    if isinstance(ledger, MultLedger):
        T = np.asarray(worst_case_bound(ledger, steps)) ** 2
        lam = ledger.theta / (alphas * T)
        T_all = np.asarray(worst_case_bound(ledger, np.arange(k_last + 1))) ** 2
        good = ens.errors**2 <= T_all * (1.0 + 1e-9)
        # the good event requires every step so far to be inside the envelope
        ind = np.logical_and.accumulate(good, axis=1)[:, steps]
        regime = "multiplicative"
    else:
        lam = ledger.theta_bar / alphas
        ind = np.ones_like(env, dtype=bool)
        regime = "additive"
    return _Potential(
        regime=regime,
        lam=lam * lambda_scale,
        env=env,
        ind=ind,
        steps=steps,
        alphas=alphas,
        cum_alpha=cum,
        indicator_failures=int(np.sum(~ind[:, -1])),
    )


def _require_conditions(ledger, enforce: bool) -> None:
    if enforce:
        rep = validate_conditions(ledger)
        if not rep.passed:
            raise ConditionError(rep)


def _paired_gate(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    d = a - b
    return float(a.mean()), float(b.mean()), float(d.std(ddof=1) / math.sqrt(d.size))


def check_mgf_recursion(
    p: SAProblem,
    ledger,
    k_range,
    n: int,
    master_seed: int,
    *,
    workers: int = 1,
    lambda_scale: float = 1.0,
    enforce_conditions: bool = True,
    min_n: int = 10_000,
) -> MachineryReport:
    """Unconditional one-step MGF inequality at every ``k`` in ``k_range``.

    Multiplicative noise (``MultLedger``): with ``lambda_k = theta / (alpha_k
    B_k^2)``, ``E exp(lambda_{k+1} 1_{k+1} M_{k+1})`` must not exceed
    ``E exp(rho_k lambda_k 1_k M_k) exp(2 alpha_k^2 lambda_k D2 (1 + ||x*||)^2)``
    with ``rho_k = exp(-(alpha D0/2 - 1) alpha_k / alpha)``.
    Additive noise (``AddLedger``): with ``lambda_k = theta_bar / alpha_k``,
    ``E exp(lambda_{k+1} M_{k+1})`` must not exceed
    ``E exp((alpha_k/alpha_{k+1})(1 - D1 alpha_k/2) lambda_k M_k) exp(D5 alpha_k)``.
    Both sides use the same trajectories. ``lambda_scale`` multiplies every
    ``lambda_k`` and exists for negative controls.
    """
    if n < min_n:
        raise ValueError(f"n must be at least {min_n}")
    _require_conditions(ledger, enforce_conditions)
    ks = _ks_range(k_range)
    steps = np.append(ks, ks[-1] + 1)
    pot = _potential(p, ledger, steps, n, master_seed, workers, lambda_scale)
    a = ledger.schedule.alpha
    lhs, rhs, se = [], [], []
    for j, k in enumerate(ks):
        ak, ak1 = pot.alphas[j], pot.alphas[j + 1]
        cur = pot.lam[j] * pot.ind[:, j] * pot.env[:, j]
        nxt = pot.lam[j + 1] * pot.ind[:, j + 1] * pot.env[:, j + 1]
        if isinstance(ledger, MultLedger):
            rho = math.exp(-(a * ledger.D0 / 2.0 - 1.0) * ak / a)
            extra = 2.0 * ak**2 * pot.lam[j] * ledger.D2 * (1.0 + p.xstar_norm) ** 2
        else:
            rho = (ak / ak1) * (1.0 - ledger.Dbar1 * ak / 2.0)
            extra = ledger.Dbar5 * ak
        with np.errstate(over="ignore"):
            left = np.exp(nxt)
            right = np.exp(rho * cur + extra)
        if not (np.all(np.isfinite(left)) and np.all(np.isfinite(right))):
            raise NonFiniteMGF(int(k), "moment generating function")
        lm, rm, s = _paired_gate(left, right)
        lhs.append(lm)
        rhs.append(rm)
        se.append(s)
    return MachineryReport(
        check="mgf_recursion",
        regime=pot.regime,
        ks=ks,
        lhs=np.asarray(lhs),
        rhs=np.asarray(rhs),
        se=np.asarray(se),
        n=n,
        lambda_scale=lambda_scale,
        drift_scale=1.0,
        indicator_failures=pot.indicator_failures,
    )


def check_supermartingale(
    p: SAProblem,
    ledger,
    k_range,
    n: int,
    master_seed: int,
    *,
    workers: int = 1,
    drift_scale: float = 1.0,
    enforce_conditions: bool = True,
    min_n: int = 10_000,
) -> MachineryReport:
    """``E[Mbar_k]`` must be nonincreasing along ``k_range`` up to the gate.

    ``Mbar_k = exp(lambda_k 1_k M_k - C sum_{i<k} alpha_i)`` with ``C = D3``
    for multiplicative noise and ``C = D5`` for additive noise.
    ``drift_scale`` multiplies ``C`` and exists for negative controls.
    A single-step range passes trivially.
    """
    if n < min_n:
        raise ValueError(f"n must be at least {min_n}")
    _require_conditions(ledger, enforce_conditions)
    ks = _ks_range(k_range)
    if ks.size == 1:
        empty = np.empty(0)
        return MachineryReport(
            "supermartingale",
            "multiplicative" if isinstance(ledger, MultLedger) else "additive",
            np.empty(0, dtype=np.int64), empty, empty, empty, n, 1.0, drift_scale, 0,
        )
    pot = _potential(p, ledger, ks, n, master_seed, workers, 1.0)
    drift = (ledger.D3 if isinstance(ledger, MultLedger) else ledger.Dbar5) * drift_scale
    with np.errstate(over="ignore"):
        mbar = np.exp(pot.lam * pot.ind * pot.env - drift * pot.cum_alpha)
    bad = ~np.all(np.isfinite(mbar), axis=0)
    if np.any(bad):
        raise NonFiniteMGF(int(ks[np.flatnonzero(bad)[0]]), "supermartingale")
    lhs, rhs, se = [], [], []
    for j in range(ks.size - 1):
        lm, rm, s = _paired_gate(mbar[:, j + 1], mbar[:, j])
        lhs.append(lm)
        rhs.append(rm)
        se.append(s)
    return MachineryReport(
        check="supermartingale",
        regime=pot.regime,
        ks=ks[1:],
        lhs=np.asarray(lhs),
        rhs=np.asarray(rhs),
        se=np.asarray(se),
        n=n,
        lambda_scale=1.0,
        drift_scale=drift_scale,
        indicator_failures=pot.indicator_failures,
    )


def ledger_regime(ledger) -> str:
    if isinstance(ledger, MultLedger):
        return "multiplicative"
    if isinstance(ledger, AddLedger):
        return "additive"
    raise TypeError("expected a MultLedger or AddLedger")
