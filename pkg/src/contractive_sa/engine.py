"""The stochastic approximation recursion and its Monte Carlo driver.

A problem splits each operator evaluation into a noise draw, which depends
only on the random stream, and a deterministic batched map ``apply(X, Y)``.
Because noise never depends on the iterate, a trajectory's draws are a pure
function of its stream. That makes ensembles bit-identical for any block
size or worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from .core import NormSpec, SeedSpec, StepSchedule, derive_stream, norm_eval

#: Trajectories simulated together in lockstep. Fixed so results never
#: depend on how work is split.
BLOCK_SIZE = 1024
#: Steps of noise drawn per trajectory per call to ``draw``.
NOISE_CHUNK = 256


@dataclass(frozen=True)
class NoiseModel:
    """Noise class: multiplicative with ``sigma`` or sub-Gaussian additive."""

    kind: Literal["multiplicative", "additive_subgaussian"]
    sigma: float | None = None
    sigma_bar: float | None = None
    c_d: float | None = None

    def __post_init__(self) -> None:
        if self.kind == "multiplicative":
            if self.sigma is None or not self.sigma > 0:
                raise ValueError("multiplicative noise needs sigma > 0")
        elif self.kind == "additive_subgaussian":
            if self.sigma_bar is None or not self.sigma_bar > 0:
                raise ValueError("sub-Gaussian noise needs sigma_bar > 0")
            if self.c_d is None or not self.c_d > 0:
                raise ValueError("sub-Gaussian noise needs c_d > 0")
        else:
            raise ValueError(f"unknown noise kind {self.kind!r}")

    @classmethod
    def multiplicative(cls, sigma: float) -> "NoiseModel":
        return cls("multiplicative", sigma=float(sigma))

    @classmethod
    def additive(cls, sigma_bar: float, c_d: float) -> "NoiseModel":
        return cls("additive_subgaussian", sigma_bar=float(sigma_bar), c_d=float(c_d))

    def describe(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass(frozen=True, eq=False)
class SAProblem:
    """A random fixed-point problem ``x = E[F(x, Y)]``.

    Parameters
    ----------
    dim
        Dimension of the iterate.
    draw
        ``draw(gen, steps)`` returns noise for ``steps`` consecutive
        iterations as an array with leading axis ``steps``.
    apply
        ``apply(X, Y)`` maps a batch of iterates ``X`` of shape ``(B, d)`` and
        matching noise ``Y`` (leading axis ``B``) to ``F(X, Y)``.
    expected
        Batched exact ``F_bar`` or ``None`` when unavailable.
    norm_c, gamma_c
        Contraction norm and factor.
    noise
        Noise class parameters.
    x_star
        Fixed point. ``None`` means solve it from ``expected``.
    x0
        Initial iterate.
    pseudo_contraction
        When true only ``||F_bar(x) - x*|| <= gamma_c ||x - x*||`` is claimed.
    exact
        False for instances whose expectations were estimated; those are
        excluded from almost-sure audits.
    """

    dim: int
    draw: Callable[[np.random.Generator, int], np.ndarray]
    apply: Callable[[np.ndarray, np.ndarray], np.ndarray]
    expected: Callable[[np.ndarray], np.ndarray] | None
    norm_c: NormSpec
    gamma_c: float
    noise: NoiseModel
    x_star: np.ndarray | None
    x0: np.ndarray
    name: str = "custom"
    params: dict = field(default_factory=dict)
    pseudo_contraction: bool = False
    exact: bool = True

    def __post_init__(self) -> None:
        if self.norm_c.dim != self.dim:
            raise ValueError("norm dimension does not match the problem")
        if not 0 <= self.gamma_c < 1:
            raise ValueError("gamma_c must lie in [0, 1)")
        x0 = np.array(self.x0, dtype=float).reshape(self.dim)
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        if self.x_star is None:
            if self.expected is None:
                raise ValueError("x_star is required when no expected operator is given")
            xs = solve_fixed_point(self.expected, self.norm_c, self.gamma_c)
        else:
            xs = np.array(self.x_star, dtype=float).reshape(self.dim)
        xs.setflags(write=False)
        object.__setattr__(self, "x_star", xs)

    @property
    def x0_err(self) -> float:
        return float(norm_eval(self.norm_c, self.x0 - self.x_star))

    @property
    def xstar_norm(self) -> float:
        return float(norm_eval(self.norm_c, self.x_star))

    @property
    def D(self) -> float:
        """Net expansion rate ``sigma + gamma_c - 1`` (multiplicative noise)."""
        if self.noise.kind != "multiplicative":
            raise ValueError("D is defined for multiplicative noise only")
        return self.noise.sigma + self.gamma_c - 1.0

    def sample(self, x, gen: np.random.Generator) -> np.ndarray:
        """One draw of ``F(x, Y)``."""
        x = np.asarray(x, dtype=float).reshape(1, self.dim)
        return self.apply(x, self.draw(gen, 1))[0]

    def expected_op(self, x) -> np.ndarray:
        if self.expected is None:
            raise ValueError(f"{self.name} has no exact expected operator")
        x = np.asarray(x, dtype=float)
        return self.expected(x.reshape(-1, self.dim)).reshape(x.shape)

    def describe(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "norm_c": self.norm_c.describe(),
            "gamma_c": self.gamma_c,
            "noise": self.noise.describe(),
            "x_star": self.x_star.tolist(),
            "x0": self.x0.tolist(),
            "x0_err": self.x0_err,
            "exact": self.exact,
            "params": self.params,
        }


class ForcedUniformGenerator:
    """Stand-in generator whose uniforms are a constant.

    Lets tests pin every draw of an inverse-CDF sampler to one branch.
    """

    def __init__(self, value: float = 0.0) -> None:
        self.value = float(value)

    def random(self, size=None):
        if size is None:
            return self.value
        return np.full(size, self.value)


# single steps and trajectories ------------------------------------------------


def sa_step(p: SAProblem, x, alpha_k: float, g) -> np.ndarray:
    """``x + alpha_k (F(x, Y) - x)`` with one fresh draw."""
    if not 0 < alpha_k <= 1:
        raise ValueError("alpha_k must lie in (0, 1]")
    x = np.asarray(x, dtype=float).reshape(p.dim)
    return x + alpha_k * (p.sample(x, g) - x)


@dataclass
class Trajectory:
    """Error record ``||x_k - x*||_c`` of one run.

    ``errors`` covers ``ks`` (all of ``0..k_max`` unless a subset was
    requested). ``fault_step`` is the first step whose iterate was not finite;
    later entries are NaN.
    """

    k_max: int
    errors: np.ndarray
    seed: SeedSpec
    ks: np.ndarray
    fault_step: int | None = None
    iterates: np.ndarray | None = None


@dataclass
class EnsembleResult:
    """Errors of ``n`` trajectories, one row per stream index."""

    errors: np.ndarray
    ks: np.ndarray
    schedule: StepSchedule
    problem: dict
    master_seed: int
    k_max: int
    fault_steps: np.ndarray
    iterates: np.ndarray | None = None
    iterate_ks: np.ndarray | None = None
    peak_norms: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.errors.shape[0]

    @property
    def faults(self) -> np.ndarray:
        """Indices of trajectories that hit a non-finite iterate."""
        return np.flatnonzero(self.fault_steps >= 0)

    def trajectory(self, i: int) -> Trajectory:
        fs = int(self.fault_steps[i])
        return Trajectory(
            k_max=self.k_max,
            errors=self.errors[i],
            seed=SeedSpec(self.master_seed, i),
            ks=self.ks,
            fault_step=None if fs < 0 else fs,
            iterates=None if self.iterates is None else self.iterates[i],
        )

    def quantiles(self, qs: Sequence[float] = (0.05, 0.5, 0.95)) -> np.ndarray:
        """Per-k quantiles of the error over non-faulted trajectories."""
        ok = self.fault_steps < 0
        return np.quantile(self.errors[ok], qs, axis=0)


def _simulate_block(
    p: SAProblem,
    s: StepSchedule,
    k_max: int,
    gens: list,
    record_ks: np.ndarray,
    iterate_ks: np.ndarray | None,
    track_peak: bool = False,
):
    B = len(gens)
    X = np.tile(p.x0, (B, 1))
    errs = np.full((B, record_ks.size), np.nan)
    its = None if iterate_ks is None else np.full((B, iterate_ks.size, p.dim), np.nan)
    fault = np.full(B, -1, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    rec_pos = {int(k): j for j, k in enumerate(record_ks)}
    it_pos = {} if iterate_ks is None else {int(k): j for j, k in enumerate(iterate_ks)}
    alphas = s.alpha / (np.arange(k_max, dtype=float) + s.h) ** s.z
    peak = np.zeros(B) if track_peak else None

    def record(k):
        if track_peak:
            np.maximum(peak, np.where(alive, np.asarray(norm_eval(p.norm_c, X)), 0.0), out=peak)
        if k in rec_pos:
            e = np.asarray(norm_eval(p.norm_c, X - p.x_star))
            errs[alive, rec_pos[k]] = e[alive]
        if k in it_pos:
            its[alive, it_pos[k]] = X[alive]

    record(0)
    noise = None
    for k in range(k_max):
        j = k % NOISE_CHUNK
        if j == 0:
            noise = np.stack([np.asarray(p.draw(g, NOISE_CHUNK)) for g in gens])
        Y = noise[:, j]
        with np.errstate(over="ignore", invalid="ignore"):
            X = X + alphas[k] * (p.apply(X, Y) - X)
        bad = alive & ~np.all(np.isfinite(X), axis=1)
        if np.any(bad):
            fault[bad] = k + 1
            alive &= ~bad
            X[bad] = 0.0
        record(k + 1)
    return errs, its, fault, peak


def _normalize_ks(ks, k_max: int) -> np.ndarray:
    if ks is None:
        return np.arange(k_max + 1)
    out = np.unique(np.asarray(ks, dtype=np.int64))
    if out.size and (out[0] < 0 or out[-1] > k_max):
        raise ValueError("recorded steps must lie in [0, k_max]")
    return out


def run_trajectory(
    p: SAProblem,
    s: StepSchedule,
    k_max: int,
    seed: SeedSpec,
    *,
    record_ks=None,
    record_iterates: bool = False,
    generator=None,
) -> Trajectory:
    """Run one trajectory on the stream given by ``seed``.

    ``generator`` replaces the derived stream, which is how tests force
    particular draws.
    """
    if k_max < 0:
        raise ValueError("k_max must be nonnegative")
    ks = _normalize_ks(record_ks, k_max)
    gen = derive_stream(seed) if generator is None else generator
    errs, its, fault, _ = _simulate_block(
        p, s, k_max, [gen], ks, ks if record_iterates else None
    )
    fs = int(fault[0])
    return Trajectory(
        k_max=k_max,
        errors=errs[0],
        seed=seed,
        ks=ks,
        fault_step=None if fs < 0 else fs,
        iterates=None if its is None else its[0],
    )


def run_ensemble(
    p: SAProblem,
    s: StepSchedule,
    k_max: int,
    n: int,
    master_seed: int,
    *,
    workers: int = 1,
    record_ks=None,
    iterate_ks=None,
    track_peak_norm: bool = False,
) -> EnsembleResult:
    """Run ``n`` trajectories on streams ``0..n-1`` of ``master_seed``.

    Trajectories are simulated in fixed blocks of ``BLOCK_SIZE``; ``workers``
    only changes how many blocks run concurrently, never the numbers.
    ``iterate_ks`` opts into storing full iterates at those steps and
    ``track_peak_norm`` into the running maximum of ``||x_k||_c`` over every step.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if workers < 1:
        raise ValueError("workers must be at least 1")
    ks = _normalize_ks(record_ks, k_max)
    iks = None if iterate_ks is None else _normalize_ks(iterate_ks, k_max)
    starts = list(range(0, n, BLOCK_SIZE))

    def job(start: int):
        stop = min(start + BLOCK_SIZE, n)
        gens = [derive_stream(SeedSpec(master_seed, i)) for i in range(start, stop)]
        return _simulate_block(p, s, k_max, gens, ks, iks, track_peak_norm)

    if workers == 1:
        parts = [job(st) for st in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, starts))
    errors = np.concatenate([pt[0] for pt in parts], axis=0)
    faults = np.concatenate([pt[2] for pt in parts])
    iterates = None if iks is None else np.concatenate([pt[1] for pt in parts], axis=0)
    peaks = np.concatenate([pt[3] for pt in parts]) if track_peak_norm else None
    return EnsembleResult(
        errors=errors,
        ks=ks,
        schedule=s,
        problem=p.describe(),
        master_seed=int(master_seed),
        k_max=k_max,
        fault_steps=faults,
        iterates=iterates,
        iterate_ks=iks,
        peak_norms=peaks,
    )


# fixed points -------------------------------------------------------------------


class FixedPointBudgetExceeded(RuntimeError):
    """Fixed-point iteration did not settle; the operator is likely not a contraction."""


def solve_fixed_point(
    expected_op: Callable[[np.ndarray], np.ndarray],
    norm_c: NormSpec,
    gamma_c: float,
    tol: float = 1e-12,
    *,
    max_iter: int | None = None,
) -> np.ndarray:
    """Banach iteration from the origin until ``||F(x) - x|| <= tol (1 - gamma_c)``.

    ``expected_op`` is batched: it maps ``(B, d)`` to ``(B, d)``. The stopping
    rule certifies ``||x - x*|| <= tol``.
    """
    if not gamma_c < 1:
        raise ValueError("gamma_c must be below 1")
    d = norm_c.dim
    x = np.zeros((1, d))
    fx = np.asarray(expected_op(x), dtype=float).reshape(1, d)
    r0 = float(norm_eval(norm_c, fx - x)[0])
    target = tol * (1.0 - gamma_c)
    if max_iter is None:
        if r0 <= target:
            return fx[0] if r0 == 0 else x[0]
        # geometric convergence plus a generous margin
        rate = max(gamma_c, 1e-300)
        need = math.log(target / r0) / math.log(rate) if gamma_c > 0 else 1
        max_iter = int(2 * need) + 1000
    for _ in range(max_iter):
        res = float(norm_eval(norm_c, fx - x)[0])
        if res <= target:
            return x[0]
        x = fx
        fx = np.asarray(expected_op(x), dtype=float).reshape(1, d)
    raise FixedPointBudgetExceeded(
        f"no fixed point within {max_iter} iterations; residual {res:.3e}"
    )


# assumption audit -------------------------------------------------------------------


@dataclass
class AssumptionAudit:
    contraction_ratio: float
    contraction_ok: bool
    unbiased_max_z: float
    unbiased_ok: bool
    noise_ratio: float | None
    noise_ok: bool | None

    @property
    def passed(self) -> bool:
        return self.contraction_ok and self.unbiased_ok and self.noise_ok is not False

    def as_dict(self) -> dict:
        return dict(self.__dict__, passed=self.passed)


def audit_assumptions(
    p: SAProblem,
    gen: np.random.Generator,
    *,
    n_probes: int = 1000,
    n_mc: int = 20_000,
    n_mc_points: int = 5,
    scale: float | None = None,
    z_gate: float = 4.0,
) -> AssumptionAudit:
    """Check contraction, unbiasedness and the multiplicative noise bound.

    Probes are ``x* + scale * N(0, I)``. Contraction is checked on random
    pairs (against ``x*`` for pseudo-contractions). Unbiasedness compares a
    Monte Carlo mean of ``F(x, .)`` with ``F_bar(x)`` in standard errors.
    The noise bound is checked on every draw.
    """
    if p.expected is None:
        raise ValueError("the audit needs an exact expected operator")
    d = p.dim
    if scale is None:
        scale = max(1.0, p.xstar_norm, p.x0_err)
    X1 = p.x_star + scale * gen.standard_normal((n_probes, d))
    X2 = p.x_star + scale * gen.standard_normal((n_probes, d))
    if p.pseudo_contraction:
        X2 = np.tile(p.x_star, (n_probes, 1))
    num = np.asarray(norm_eval(p.norm_c, p.expected(X1) - p.expected(X2)))
    den = np.asarray(norm_eval(p.norm_c, X1 - X2))
    ratio = float(np.max(num / den))
    contraction_ok = ratio <= p.gamma_c + 1e-10

    worst_z = 0.0
    noise_ratio = 0.0
    for x in X1[:n_mc_points]:
        Xb = np.tile(x, (n_mc, 1))
        Y = p.draw(gen, n_mc)
        F = p.apply(Xb, Y)
        Fbar = p.expected(x[None])[0]
        mean = F.mean(axis=0)
        se = F.std(axis=0, ddof=1) / math.sqrt(n_mc)
        # differences at roundoff level count as exact agreement
        diff = np.abs(mean - Fbar)
        diff = np.where(diff <= 1e-12 * (1.0 + np.abs(Fbar)), 0.0, diff)
        z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff > 0, np.inf, 0.0))
        worst_z = max(worst_z, float(np.max(z)))
        if p.noise.kind == "multiplicative":
            dev = np.asarray(norm_eval(p.norm_c, F - Fbar))
            cap = 1.0 + float(norm_eval(p.norm_c, x))
            noise_ratio = max(noise_ratio, float(np.max(dev)) / cap)
    if p.noise.kind == "multiplicative":
        noise_ok = noise_ratio <= p.noise.sigma * (1 + 1e-12)
        nr = noise_ratio
    else:
        noise_ok, nr = None, None
    return AssumptionAudit(ratio, contraction_ok, worst_z, worst_z <= z_gate, nr, noise_ok)


# shipped generic instances ----------------------------------------------------


def affine_gaussian_problem(
    A,
    b,
    noise_scale: float = 1.0,
    *,
    x0=None,
    norm_c: NormSpec | None = None,
    gamma_c: float | None = None,
) -> SAProblem:
    """``F(x, Y) = A x + b + Y`` with ``Y ~ N(0, noise_scale^2 I)``.

    In the euclidean norm the noise is sub-Gaussian with ``sigma_bar =
    noise_scale`` and ``c_d = d`` (the chi-square moment generating function).
    ``gamma_c`` defaults to the spectral norm of ``A``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    b = np.asarray(b, dtype=float).reshape(d)
    norm_c = NormSpec.euclidean(d) if norm_c is None else norm_c
    if gamma_c is None:
        gamma_c = float(np.linalg.norm(A, 2))
    x_star = np.linalg.solve(np.eye(d) - A, b)
    x0 = np.zeros(d) if x0 is None else x0
    At = A.T.copy()

    def draw(gen, steps):
        return noise_scale * gen.standard_normal((steps, d))

    def apply(X, Y):
        return X @ At + b + Y

    def expected(X):
        return X @ At + b

    return SAProblem(
        dim=d,
        draw=draw,
        apply=apply,
        expected=expected,
        norm_c=norm_c,
        gamma_c=gamma_c,
        noise=NoiseModel.additive(noise_scale, d),
        x_star=x_star,
        x0=x0,
        name="affine_gaussian",
        params={"A": A.tolist(), "b": b.tolist(), "noise_scale": noise_scale},
    )


def deterministic_linear_problem(gamma: float, dim: int = 1, *, x0=None) -> SAProblem:
    """Noise-free ``F(x) = gamma x`` with fixed point 0.

    Declared with a tiny multiplicative ``sigma`` so the noise class is valid.
    """
    x0 = np.ones(dim) if x0 is None else x0

    def draw(gen, steps):
        return np.zeros((steps, 1))

    def apply(X, Y):
        return gamma * X

    return SAProblem(
        dim=dim,
        draw=draw,
        apply=apply,
        expected=lambda X: gamma * X,
        norm_c=NormSpec.euclidean(dim),
        gamma_c=gamma,
        noise=NoiseModel.multiplicative(1e-12),
        x_star=np.zeros(dim),
        x0=x0,
        name="deterministic_linear",
        params={"gamma": gamma},
    )
