"""Linear recursions ``x_{k+1} = x_k + alpha_k (A(Y_k) x_k - b(Y_k))`` as contractive SA.

With ``P`` solving ``A_bar^T P + P A_bar + I = 0`` and ``beta = 1 / (2
lambda_max(A_bar^T P A_bar))``, the map ``F_beta(x, y) = beta A(y) x - beta
b(y) + x`` has an expectation that contracts in ``||.||_P`` and multiplicative
noise. Running SA on ``F_beta`` with stepsizes ``alpha_k`` is the original
recursion with stepsizes ``beta alpha_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import NormSpec
from .engine import NoiseModel, SAProblem

#: Largest dimension accepted by the dense Kronecker Lyapunov solve.
LYAPUNOV_MAX_DIM = 200
#: Samples used when expectations are estimated.
ESTIMATE_SAMPLES = 1_000_000

Sampler = Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]]


def hurwitz_check(A_bar) -> bool:
    """True iff every eigenvalue has real part below ``-1e-12``."""
    A = np.atleast_2d(np.asarray(A_bar, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A_bar must be square")
    eig = np.linalg.eigvals(A)
    return bool(np.max(eig.real) < -1e-12)


def solve_lyapunov(A_bar) -> np.ndarray:
    """Symmetric positive-definite ``P`` with ``A^T P + P A + I = 0``.

    Solved as the vectorized system ``(I kron A^T + A^T kron I) vec(P) =
    -vec(I)``, which is exact linear algebra for the small dimensions used
    here.
    """
    A = np.atleast_2d(np.asarray(A_bar, dtype=float))
    d = A.shape[0]
    if A.shape != (d, d):
        raise ValueError("A_bar must be square")
    if d > LYAPUNOV_MAX_DIM:
        raise ValueError(f"dimension {d} exceeds the dense solver limit {LYAPUNOV_MAX_DIM}")
    if not hurwitz_check(A):
        raise ValueError("A_bar is not Hurwitz")
    eye = np.eye(d)
    K = np.kron(eye, A.T) + np.kron(A.T, eye)
    rhs = -eye.reshape(-1, order="F")
    if np.linalg.cond(K) > 1e14:
        raise np.linalg.LinAlgError("Kronecker system is numerically singular")
    P = np.linalg.solve(K, rhs).reshape(d, d, order="F")
    return 0.5 * (P + P.T)


def lyapunov_residual(A_bar, P) -> float:
    A = np.atleast_2d(np.asarray(A_bar, dtype=float))
    return float(np.linalg.norm(A.T @ P + P @ A + np.eye(A.shape[0]), "fro"))


def _sqrt_pair(P: np.ndarray):
    w, V = np.linalg.eigh(P)
    return (V * np.sqrt(w)) @ V.T, (V / np.sqrt(w)) @ V.T


def contraction_in_P(M, P) -> float:
    """Operator norm of ``M`` in ``||.||_P``: ``||P^{1/2} M P^{-1/2}||_2``."""
    half, inv_half = _sqrt_pair(np.asarray(P, dtype=float))
    return float(np.linalg.norm(half @ np.asarray(M, dtype=float) @ inv_half, 2))


def estimate_expectations(sampler: Sampler, dim: int, n: int, seed: int):
    """Monte Carlo means and standard errors of ``A(Y)`` and ``b(Y)``."""
    gen = np.random.default_rng(seed)
    sA = np.zeros((dim, dim))
    sA2 = np.zeros((dim, dim))
    sb = np.zeros(dim)
    sb2 = np.zeros(dim)
    left = n
    while left > 0:
        m = min(left, 100_000)
        A, b = sampler(gen, m)
        sA += A.sum(axis=0)
        sA2 += (A * A).sum(axis=0)
        sb += b.sum(axis=0)
        sb2 += (b * b).sum(axis=0)
        left -= m
    mA, mb = sA / n, sb / n
    seA = np.sqrt(np.maximum(sA2 / n - mA**2, 0.0) / (n - 1))
    seb = np.sqrt(np.maximum(sb2 / n - mb**2, 0.0) / (n - 1))
    return mA, mb, seA, seb


@dataclass(frozen=True, eq=False)
class LinearSASpec:
    """A remodeled linear recursion with its contraction certificate.

    ``gamma_bar_uncorrected_bound`` is ``1 - beta / lambda_max(P)`` as usually
    stated; ``gamma_bar_sq_corrected`` is ``1 - beta / (2 lambda_max(P))``,
    the bound the derivation actually yields for the squared norm.
    ``sigma_hat`` is the larger of the stated constant and the one with
    square roots of the eigenvalues of ``P``, so it is always valid.
    """

    dim: int
    sampler: Sampler = field(repr=False)
    A_bar: np.ndarray
    b_bar: np.ndarray
    A_max: float
    b_max: float
    P_bar: np.ndarray
    beta: float
    gamma_bar_exact: float
    gamma_bar_uncorrected_bound: float
    gamma_bar_sq_corrected: float
    sigma_hat: float
    sigma_hat_uncorrected: float
    sigma_hat_corrected: float
    x_star: np.ndarray
    approximate: bool = False
    A_bar_se: np.ndarray | None = None
    b_bar_se: np.ndarray | None = None

    @property
    def norm(self) -> NormSpec:
        return NormSpec.weighted_quadratic(self.P_bar)

    @property
    def lyapunov_residual(self) -> float:
        return lyapunov_residual(self.A_bar, self.P_bar)

    def describe(self) -> dict:
        return {
            "dim": self.dim,
            "A_bar": self.A_bar.tolist(),
            "b_bar": self.b_bar.tolist(),
            "A_max": self.A_max,
            "b_max": self.b_max,
            "P_bar": self.P_bar.tolist(),
            "beta": self.beta,
            "gamma_bar_exact": self.gamma_bar_exact,
            "gamma_bar_uncorrected_bound": self.gamma_bar_uncorrected_bound,
            "gamma_bar_sq_corrected": self.gamma_bar_sq_corrected,
            "sigma_hat": self.sigma_hat,
            "sigma_hat_uncorrected": self.sigma_hat_uncorrected,
            "sigma_hat_corrected": self.sigma_hat_corrected,
            "x_star": self.x_star.tolist(),
            "approximate": self.approximate,
            "lyapunov_residual": self.lyapunov_residual,
        }


def remodel(
    sampler: Sampler,
    dim: int,
    *,
    A_bar=None,
    b_bar=None,
    A_max: float | None = None,
    b_max: float | None = None,
    x0=None,
    estimate_seed: int = 0,
    estimate_samples: int = ESTIMATE_SAMPLES,
    name: str = "linear_sa",
) -> tuple[LinearSASpec, SAProblem]:
    """Contractive SA form of a linear recursion.

    ``sampler(gen, steps)`` returns stacks ``A`` of shape ``(steps, d, d)``
    and ``b`` of shape ``(steps, d)``. When ``A_bar``/``b_bar`` are omitted
    they are estimated from ``estimate_samples`` draws and the instance is
    marked approximate. ``A_max`` (spectral) and ``b_max`` (euclidean)
    bound the samples and are required.
    """
    if A_max is None or b_max is None:
        raise ValueError("A_max and b_max are required")
    d = int(dim)
    approximate = A_bar is None or b_bar is None
    seA = seb = None
    if approximate:
        mA, mb, seA, seb = estimate_expectations(sampler, d, estimate_samples, estimate_seed)
        A_bar = mA if A_bar is None else A_bar
        b_bar = mb if b_bar is None else b_bar
    A = np.atleast_2d(np.asarray(A_bar, dtype=float)).reshape(d, d)
    b = np.asarray(b_bar, dtype=float).reshape(d)
    P = solve_lyapunov(A)
    beta = 0.5 / float(np.linalg.eigvalsh(A.T @ P @ A)[-1])
    lam = np.linalg.eigvalsh(P)
    lmin, lmax = float(lam[0]), float(lam[-1])
    M = beta * A + np.eye(d)
    gamma_exact = contraction_in_P(M, P)
    if not gamma_exact < 1:
        raise ValueError(f"remodeled operator is not a contraction (factor {gamma_exact})")
    sig_uncorrected = 2.0 * beta * lmax * (A_max / lmin + b_max)
    sig_corr = 2.0 * beta * math.sqrt(lmax) * (A_max / math.sqrt(lmin) + b_max)
    sigma_hat = max(sig_uncorrected, sig_corr)
    x_star = np.linalg.solve(A, b)
    spec = LinearSASpec(
        dim=d,
        sampler=sampler,
        A_bar=A,
        b_bar=b,
        A_max=float(A_max),
        b_max=float(b_max),
        P_bar=P,
        beta=beta,
        gamma_bar_exact=gamma_exact,
        gamma_bar_uncorrected_bound=1.0 - beta / lmax,
        gamma_bar_sq_corrected=1.0 - beta / (2.0 * lmax),
        sigma_hat=sigma_hat,
        sigma_hat_uncorrected=sig_uncorrected,
        sigma_hat_corrected=sig_corr,
        x_star=x_star,
        approximate=approximate,
        A_bar_se=seA,
        b_bar_se=seb,
    )
    return spec, linear_sa_problem(spec, x0=x0, name=name)


def linear_sa_problem(spec: LinearSASpec, *, x0=None, name: str = "linear_sa") -> SAProblem:
    """``F_beta`` as an :class:`SAProblem`; noise rows pack ``[vec(A), b]``."""
    d = spec.dim
    beta = spec.beta
    sampler = spec.sampler
    Mbar_T = (beta * spec.A_bar + np.eye(d)).T
    shift = beta * spec.b_bar

    def draw(gen, steps):
        A, b = sampler(gen, steps)
        return np.concatenate([np.asarray(A).reshape(steps, d * d), np.asarray(b).reshape(steps, d)], axis=1)

    def apply(X, Y):
        A = Y[:, : d * d].reshape(-1, d, d)
        b = Y[:, d * d :]
        return X + beta * (np.einsum("bij,bj->bi", A, X) - b)

    def expected(X):
        return X @ Mbar_T - shift

    return SAProblem(
        dim=d,
        draw=draw,
        apply=apply,
        expected=expected,
        norm_c=spec.norm,
        gamma_c=spec.gamma_bar_exact,
        noise=NoiseModel.multiplicative(spec.sigma_hat),
        x_star=spec.x_star,
        x0=np.zeros(d) if x0 is None else x0,
        name=name,
        params={"beta": beta, "approximate": spec.approximate},
        exact=not spec.approximate,
    )


def discrete_sampler(A_list, b_list, probs=None) -> tuple[Sampler, np.ndarray, np.ndarray, float, float]:
    """Sampler for ``Y`` uniform (or ``probs``-weighted) over finitely many pairs.

    Returns the sampler with exact ``A_bar``, ``b_bar``, ``A_max`` and ``b_max``.
    """
    As = np.asarray(A_list, dtype=float)
    if As.ndim == 2:
        As = As[None]
    bs = np.asarray(b_list, dtype=float).reshape(As.shape[0], As.shape[1])
    m = As.shape[0]
    w = np.full(m, 1.0 / m) if probs is None else np.asarray(probs, dtype=float)
    if w.shape != (m,) or np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=1e-12):
        raise ValueError("probs must be a distribution over the pairs")
    cdf = np.cumsum(w)
    cdf[-1] = 1.0

    def sampler(gen, steps):
        idx = np.searchsorted(cdf, gen.random(steps), side="right")
        return As[idx], bs[idx]

    A_bar = np.tensordot(w, As, axes=1)
    b_bar = w @ bs
    A_max = max(float(np.linalg.norm(Ai, 2)) for Ai in As)
    b_max = max(float(np.linalg.norm(bi)) for bi in bs)
    return sampler, A_bar, b_bar, A_max, b_max


def linear_sa_from_pairs(A_list, b_list, probs=None, *, x0=None, name: str = "linear_sa"):
    """Remodel a recursion whose ``(A(Y), b(Y))`` ranges over finitely many pairs."""
    sampler, A_bar, b_bar, A_max, b_max = discrete_sampler(A_list, b_list, probs)
    d = A_bar.shape[0]
    return remodel(sampler, d, A_bar=A_bar, b_bar=b_bar, A_max=A_max, b_max=b_max, x0=x0, name=name)


def scalar_instance(a: float = -1.0, b: float = -2.0, **kw):
    """Deterministic one-dimensional recursion ``x <- x + alpha (a x - b)``."""
    return linear_sa_from_pairs([[[a]]], [[b]], name="linear_scalar", **kw)


def diagonal_instance(diag=(1.0, 2.0), b=None, **kw):
    """Deterministic recursion with ``A = -diag(diag)``."""
    dvals = np.asarray(diag, dtype=float)
    bb = np.zeros(dvals.size) if b is None else np.asarray(b, dtype=float)
    return linear_sa_from_pairs([-np.diag(dvals)], [bb], name="linear_diagonal", **kw)
