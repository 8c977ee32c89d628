"""Generalized Moreau envelope and the smoothing constants derived from it.

The envelope is

    M(x) = min_u  1/2 ||u||_c^2 + 1/(2 mu) ||x - u||_s^2,

the infimal convolution of half the squared contraction norm with a scaled
smooth squared norm. It is the Lyapunov function behind every bound in
:mod:`contractive_sa.bounds`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import NormSpec, dual_norm, norm_equiv_constants, norm_eval

MU_GRID_MAX = 1e6


class MoreauConvergenceWarning(RuntimeWarning):
    """The numeric envelope solver hit its iteration budget."""


def smoothness_constant(norm_s: NormSpec) -> float:
    """Smoothness of 1/2 ||.||_s^2 with respect to ||.||_s."""
    if norm_s.kind in ("euclidean", "weighted_quadratic"):
        return 1.0
    if norm_s.kind == "p_norm":
        if norm_s.p < 2:
            raise ValueError("p_norm smoothing needs p >= 2")
        return norm_s.p - 1.0
    raise ValueError("the max norm is not smooth and cannot serve as ||.||_s")


@dataclass(frozen=True)
class MoreauConfig:
    """Norm pair, smoothing parameter and the constants they imply.

    ``l_cs``/``u_cs`` default to :func:`norm_equiv_constants`, ``L`` to
    :func:`smoothness_constant`, and ``u_cM_star`` (the constant with
    ``||x||_M <= u_cM_star ||x||_{c,*}``) to the ratio bound between
    ``||.||_c`` and its dual divided by ``l_cM``.
    """

    norm_c: NormSpec
    norm_s: NormSpec
    mu: float
    L: float | None = None
    l_cs: float | None = None
    u_cs: float | None = None
    u_cM_star: float | None = None

    def __post_init__(self) -> None:
        if self.norm_c.dim != self.norm_s.dim:
            raise ValueError("norm_c and norm_s must share the dimension")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.L is None:
            object.__setattr__(self, "L", smoothness_constant(self.norm_s))
        if self.l_cs is None or self.u_cs is None:
            l, u = norm_equiv_constants(self.norm_c, self.norm_s)
            if self.l_cs is None:
                object.__setattr__(self, "l_cs", l)
            if self.u_cs is None:
                object.__setattr__(self, "u_cs", u)
        if self.u_cM_star is None:
            _, ratio = norm_equiv_constants(self.norm_c, dual_norm(self.norm_c))
            object.__setattr__(self, "u_cM_star", ratio / self.l_cM)

    @property
    def dim(self) -> int:
        return self.norm_c.dim

    @property
    def l_cM(self) -> float:
        return math.sqrt(1.0 + self.mu * self.l_cs**2)

    @property
    def u_cM(self) -> float:
        return math.sqrt(1.0 + self.mu * self.u_cs**2)

    def describe(self) -> dict:
        return {
            "norm_c": self.norm_c.describe(),
            "norm_s": self.norm_s.describe(),
            "mu": self.mu,
            "L": self.L,
            "l_cs": self.l_cs,
            "u_cs": self.u_cs,
            "l_cM": self.l_cM,
            "u_cM": self.u_cM,
            "u_cM_star": self.u_cM_star,
        }


@dataclass(frozen=True)
class MoreauConstants:
    l_cM: float
    u_cM: float
    gamma_tilde: float


def moreau_constants(cfg: MoreauConfig, gamma_c: float) -> MoreauConstants:
    """``l_cM``, ``u_cM`` and the smoothed contraction factor ``gamma_c u_cM / l_cM``."""
    return MoreauConstants(cfg.l_cM, cfg.u_cM, gamma_c * cfg.u_cM / cfg.l_cM)


def _gamma_tilde(gamma_c: float, mu: float, l_cs: float, u_cs: float) -> float:
    return gamma_c * math.sqrt((1.0 + mu * u_cs**2) / (1.0 + mu * l_cs**2))


def q_learning_mu(gamma_hat: float) -> float:
    """The smoothing parameter ``((1 + g) / (2 g))^2 - 1`` for the max-norm recipe."""
    return ((1.0 + gamma_hat) / (2.0 * gamma_hat)) ** 2 - 1.0


def choose_mu(
    norm_c: NormSpec,
    norm_s: NormSpec,
    gamma_c: float,
    target: float | None = None,
    *,
    q_learning_recipe: bool = False,
    iterations: int = 200,
) -> float:
    """Largest ``mu`` in ``(0, 1e6]`` whose smoothed factor stays below ``target``.

    ``target`` defaults to ``(1 + gamma_c) / 2``. The smoothed factor is
    increasing in ``mu`` and tends to ``gamma_c`` as ``mu -> 0``, so bisection
    on ``mu`` always finds a feasible value.
    """
    if gamma_c >= 1:
        raise ValueError("gamma_c must be below 1")
    if q_learning_recipe:
        return q_learning_mu(gamma_c)
    if target is None:
        target = 0.5 * (1.0 + gamma_c)
    if target < gamma_c:
        raise ValueError("target must be at least gamma_c")
    l_cs, u_cs = norm_equiv_constants(norm_c, norm_s)
    if _gamma_tilde(gamma_c, MU_GRID_MAX, l_cs, u_cs) <= target:
        return MU_GRID_MAX
    lo, hi = 0.0, MU_GRID_MAX
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if _gamma_tilde(gamma_c, mid, l_cs, u_cs) <= target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return lo


def q_learning_config(n_sa: int, gamma_hat: float) -> MoreauConfig:
    """Max-norm contraction smoothed by the p-norm with ``p = 2 log d``.

    Uses ``l_cs = e^{-1/2}``, ``u_cs = 1``, ``L = p - 1`` and
    ``u_cM_star = sqrt(e)``.
    """
    p = 2.0 * math.log(n_sa)
    if p < 2:
        raise ValueError("the recipe needs at least 3 state-action pairs (p >= 2)")
    return MoreauConfig(
        norm_c=NormSpec.max_norm(n_sa),
        norm_s=NormSpec.p_norm(n_sa, p),
        mu=q_learning_mu(gamma_hat),
        L=p - 1.0,
        l_cs=math.exp(-0.5),
        u_cs=1.0,
        u_cM_star=math.sqrt(math.e),
    )


# numeric envelope -----------------------------------------------------------


def _half_sq_grad(norm: NormSpec, v: np.ndarray) -> np.ndarray:
    """Row-wise gradient of 1/2 ||v||^2 for smooth norms."""
    if norm.kind == "euclidean":
        return v
    if norm.kind == "weighted_quadratic":
        return v @ norm.P
    if norm.kind == "p_norm":
        p = norm.p
        nrm = np.asarray(norm_eval(norm, v))[..., None]
        safe = np.where(nrm > 0, nrm, 1.0)
        g = np.sign(v) * (np.abs(v) / safe) ** (p - 1.0) * safe
        return np.where(nrm > 0, g, 0.0)
    raise ValueError(f"1/2||.||^2 is not differentiable for {norm.kind}")


def _euclid_lipschitz(norm: NormSpec) -> float:
    """Euclidean Lipschitz constant of the gradient of 1/2 ||.||^2."""
    if norm.kind == "euclidean":
        return 1.0
    if norm.kind == "weighted_quadratic":
        return float(norm.eigenvalues[-1])
    if norm.kind == "p_norm":
        return norm.p - 1.0
    raise ValueError(norm.kind)


def prox_half_sq_max(v: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise ``argmin_u tau/2 ||u||_inf^2 + 1/2 ||u - v||_2^2``.

    The minimizer clips ``v`` at level ``t`` where ``tau t = sum (|v_i| - t)_+``,
    which is ``max_k (sum of the k largest |v_i|) / (tau + k)``.
    """
    a = -np.sort(-np.abs(v), axis=-1)
    k = np.arange(1, v.shape[-1] + 1)
    t = np.max(np.cumsum(a, axis=-1) / (tau + k), axis=-1, keepdims=True)
    return np.clip(v, -t, t)


def _objective(cfg: MoreauConfig, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    uc = np.asarray(norm_eval(cfg.norm_c, u))
    rs = np.asarray(norm_eval(cfg.norm_s, x - u))
    return 0.5 * uc**2 + rs**2 / (2.0 * cfg.mu)


def _fista(cfg: MoreauConfig, x: np.ndarray, tol: float, max_iter: int):
    c_smooth = cfg.norm_c.kind != "max_norm"
    lip = _euclid_lipschitz(cfg.norm_s) / cfg.mu
    if c_smooth:
        lip += _euclid_lipschitz(cfg.norm_c)
    step = 1.0 / lip

    def grad(u):
        g = -_half_sq_grad(cfg.norm_s, x - u) / cfg.mu
        if c_smooth:
            g = g + _half_sq_grad(cfg.norm_c, u)
        return g

    def prox(v):
        return v if c_smooth else prox_half_sq_max(v, step)

    # start from the minimizer of the identical-norm problem
    u = x / (1.0 + cfg.mu)
    y = u.copy()
    t = 1.0
    f_prev = _objective(cfg, x, u)
    best_u, best_f = u.copy(), f_prev.copy()
    stall = np.zeros(x.shape[0], dtype=int)
    done = np.zeros(x.shape[0], dtype=bool)
    for it in range(max_iter):
        u_new = prox(y - step * grad(y))
        f_new = _objective(cfg, x, u_new)
        # adaptive restart when the objective goes up
        up = f_new > f_prev
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = u_new + ((t - 1.0) / t_new) * (u_new - u)
        y[up] = u_new[up]
        t = t_new if not np.any(up) else 1.0
        improved = f_new < best_f
        best_u[improved] = u_new[improved]
        best_f = np.minimum(best_f, f_new)
        small = np.abs(f_prev - f_new) <= tol * np.maximum(1.0, np.abs(f_new))
        stall = np.where(small, stall + 1, 0)
        done |= stall >= 20
        u, f_prev = u_new, f_new
        if np.all(done):
            return best_u, best_f, it + 1, True
    return best_u, best_f, max_iter, False


def moreau_minimizer(cfg: MoreauConfig, x, *, tol: float = 1e-14, max_iter: int = 100_000):
    """Numeric minimizer ``u*`` and value of the envelope for each row of ``x``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[-1] != cfg.dim:
        raise ValueError(f"expected dimension {cfg.dim}")
    u, f, iters, ok = _fista(cfg, X, tol, max_iter)
    if not ok:
        warnings.warn(
            f"Moreau envelope solver stopped after {iters} iterations without stalling",
            MoreauConvergenceWarning,
            stacklevel=2,
        )
    if single:
        return u[0], float(f[0])
    return u, f


def moreau_eval(cfg: MoreauConfig, x, *, method: str = "auto", **solver_kw):
    """Envelope value ``M(x)`` for a vector or a stack of vectors.

    With identical norms the minimizer is ``x / (1 + mu)`` and
    ``M(x) = ||x||^2 / (2 (1 + mu))``; ``method="auto"`` uses that closed form
    and otherwise runs the numeric solver. ``method`` may force either path.
    """
    x = np.asarray(x, dtype=float)
    if method not in ("auto", "closed", "numeric"):
        raise ValueError("method must be auto, closed or numeric")
    identical = cfg.norm_c == cfg.norm_s
    if method == "closed" or (method == "auto" and identical):
        if not identical:
            raise ValueError("closed form needs identical norms")
        n = np.asarray(norm_eval(cfg.norm_c, x))
        out = n**2 / (2.0 * (1.0 + cfg.mu))
        return float(out) if out.ndim == 0 else out
    _, f = moreau_minimizer(cfg, x, **solver_kw)
    return f


def moreau_grad(cfg: MoreauConfig, x, **solver_kw) -> np.ndarray:
    """Gradient ``(1/mu) grad(1/2 ||.||_s^2)(x - u*)`` of the envelope."""
    x = np.asarray(x, dtype=float)
    if cfg.norm_c == cfg.norm_s and cfg.norm_c.kind == "euclidean":
        return x / (1.0 + cfg.mu)
    u, _ = moreau_minimizer(cfg, x, **solver_kw)
    return _half_sq_grad(cfg.norm_s, x - u) / cfg.mu
