"""Norms, stepsize schedules and the seeding contract shared by every module.

All objects here are immutable after construction, so they can be shared
read-only between worker threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

NormKind = Literal["euclidean", "max_norm", "p_norm", "weighted_quadratic"]

#: Widening applied to numerically estimated equivalence constants.
NUMERIC_WIDENING = 1.01
#: Number of random directions used by the numeric equivalence fallback.
NUMERIC_SAMPLE_BUDGET = 100_000


@dataclass(frozen=True, eq=False)
class NormSpec:
    """A norm on R^d.

    Parameters
    ----------
    kind
        One of ``euclidean``, ``max_norm``, ``p_norm`` or ``weighted_quadratic``.
    dim
        Dimension ``d``.
    p
        Exponent for ``p_norm``. Values in ``[1, inf)`` are accepted so that
        dual norms can be represented; smoothing norms need ``p >= 2``.
    P
        Symmetric positive-definite matrix for ``weighted_quadratic``,
        giving ``||x||_P = sqrt(x^T P x)``.
    """

    kind: NormKind
    dim: int
    p: float | None = None
    P: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        if self.kind == "p_norm":
            if self.p is None or not (1.0 <= self.p < math.inf):
                raise ValueError("p_norm needs a finite exponent p >= 1")
        elif self.kind == "weighted_quadratic":
            if self.P is None:
                raise ValueError("weighted_quadratic needs a matrix P")
            P = np.array(self.P, dtype=float)
            if P.shape != (self.dim, self.dim):
                raise ValueError(f"P must be {self.dim}x{self.dim}, got {P.shape}")
            if not np.allclose(P, P.T, rtol=1e-10, atol=1e-12):
                raise ValueError("P must be symmetric")
            P = 0.5 * (P + P.T)
            eig = np.linalg.eigvalsh(P)
            if eig[0] <= 0.0:
                raise ValueError("P must be positive definite (lambda_min(P) > 0)")
            P.setflags(write=False)
            object.__setattr__(self, "P", P)
            object.__setattr__(self, "_eig", eig)
        elif self.kind not in ("euclidean", "max_norm"):
            raise ValueError(f"unknown norm kind {self.kind!r}")

    # convenience constructors
    @classmethod
    def euclidean(cls, dim: int) -> "NormSpec":
        return cls("euclidean", dim)

    @classmethod
    def max_norm(cls, dim: int) -> "NormSpec":
        return cls("max_norm", dim)

    @classmethod
    def p_norm(cls, dim: int, p: float) -> "NormSpec":
        return cls("p_norm", dim, p=float(p))

    @classmethod
    def weighted_quadratic(cls, P) -> "NormSpec":
        P = np.atleast_2d(np.asarray(P, dtype=float))
        return cls("weighted_quadratic", P.shape[0], P=P)

    @property
    def lp_exponent(self) -> float | None:
        """The exponent when the norm belongs to the l_p family, else None."""
        if self.kind == "euclidean":
            return 2.0
        if self.kind == "max_norm":
            return math.inf
        if self.kind == "p_norm":
            return float(self.p)
        return None

    @property
    def eigenvalues(self) -> np.ndarray:
        """Ascending eigenvalues of ``P`` (weighted_quadratic only)."""
        return self._eig  # type: ignore[attr-defined]

    def __call__(self, x) -> np.ndarray | float:
        return norm_eval(self, x)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NormSpec):
            return NotImplemented
        if (self.kind, self.dim, self.p) != (other.kind, other.dim, other.p):
            return False
        if self.kind == "weighted_quadratic":
            return bool(np.array_equal(self.P, other.P))
        return True

    def __hash__(self) -> int:
        return hash((self.kind, self.dim, self.p))

    def describe(self) -> dict:
        out: dict = {"kind": self.kind, "dim": self.dim}
        if self.p is not None:
            out["p"] = self.p
        if self.P is not None:
            out["P"] = self.P.tolist()
        return out


def norm_eval(norm: NormSpec, x) -> np.ndarray | float:
    """Evaluate ``norm`` along the last axis of ``x``.

    A 1-d input returns a float; stacked inputs of shape ``(..., d)`` return
    an array of norms.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (norm.dim,):
        raise ValueError(f"expected trailing dimension {norm.dim}, got shape {x.shape}")
    if norm.kind == "euclidean":
        out = np.sqrt(np.sum(x * x, axis=-1))
    elif norm.kind == "max_norm":
        out = np.max(np.abs(x), axis=-1)
    elif norm.kind == "p_norm":
        a = np.abs(x)
        scale = np.max(a, axis=-1, keepdims=True)
        safe = np.where(scale > 0, scale, 1.0)
        out = safe[..., 0] * np.sum((a / safe) ** norm.p, axis=-1) ** (1.0 / norm.p)
        out = np.where(scale[..., 0] > 0, out, 0.0)
    else:
        Px = x @ norm.P
        out = np.sqrt(np.maximum(np.sum(x * Px, axis=-1), 0.0))
    if out.ndim == 0:
        return float(out)
    return out


def dual_norm(norm: NormSpec) -> NormSpec:
    """Closed-form dual of ``norm``.

    euclidean is self-dual, the max norm pairs with the 1-norm, ``p`` pairs
    with ``q = p/(p-1)`` and ``||.||_P`` pairs with ``||.||_{P^{-1}}``.
    """
    if norm.kind == "euclidean":
        return norm
    if norm.kind == "max_norm":
        return NormSpec.p_norm(norm.dim, 1.0)
    if norm.kind == "p_norm":
        if norm.p == 1.0:
            return NormSpec.max_norm(norm.dim)
        if norm.p == 2.0:
            return NormSpec.euclidean(norm.dim)
        return NormSpec.p_norm(norm.dim, norm.p / (norm.p - 1.0))
    return NormSpec.weighted_quadratic(np.linalg.inv(norm.P))


def _lp_pair(pc: float, ps: float, d: int) -> tuple[float, float]:
    # ||x||_a <= ||x||_b when a >= b, and ||x||_b <= d^{1/b - 1/a} ||x||_a.
    inv = lambda p: 0.0 if math.isinf(p) else 1.0 / p  # noqa: E731
    gap = d ** (inv(min(pc, ps)) - inv(max(pc, ps)))
    if pc <= ps:
        return 1.0, gap
    return 1.0 / gap, 1.0


def norm_equiv_constants(
    norm_c: NormSpec,
    norm_s: NormSpec,
    *,
    budget: int = NUMERIC_SAMPLE_BUDGET,
    seed: int = 0,
) -> tuple[float, float]:
    """Constants ``(l_cs, u_cs)`` with ``l_cs ||x||_s <= ||x||_c <= u_cs ||x||_s``.

    Closed forms are used for l_p pairs and any pair involving a weighted
    quadratic norm together with the euclidean norm or another weighted
    quadratic norm. Remaining pairs fall back to sampling ``budget`` random
    directions and widening the observed extremes by ``NUMERIC_WIDENING``.
    """
    if norm_c.dim != norm_s.dim:
        raise ValueError("norms must share the dimension")
    d = norm_c.dim
    if norm_c == norm_s:
        return 1.0, 1.0
    pc, ps = norm_c.lp_exponent, norm_s.lp_exponent
    if pc is not None and ps is not None:
        return _lp_pair(pc, ps, d)
    wq_c = norm_c.kind == "weighted_quadratic"
    wq_s = norm_s.kind == "weighted_quadratic"
    if wq_c and norm_s.kind == "euclidean":
        eig = norm_c.eigenvalues
        return math.sqrt(eig[0]), math.sqrt(eig[-1])
    if wq_s and norm_c.kind == "euclidean":
        eig = norm_s.eigenvalues
        return 1.0 / math.sqrt(eig[-1]), 1.0 / math.sqrt(eig[0])
    if wq_c and wq_s:
        import scipy.linalg

        gen = scipy.linalg.eigh(norm_c.P, norm_s.P, eigvals_only=True)
        return math.sqrt(gen[0]), math.sqrt(gen[-1])
    if budget <= 0:
        raise ValueError(
            f"no closed form for ({norm_c.kind}, {norm_s.kind}) and no sample budget"
        )
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((budget, d))
    ratio = np.asarray(norm_eval(norm_c, x)) / np.asarray(norm_eval(norm_s, x))
    return float(ratio.min()) / NUMERIC_WIDENING, float(ratio.max()) * NUMERIC_WIDENING


@dataclass(frozen=True)
class StepSchedule:
    """Stepsizes ``alpha_k = alpha / (k + h)^z``."""

    alpha: float
    h: float
    z: float = 1.0

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.h >= 1:
            raise ValueError("h must be at least 1")
        if not 0 < self.z <= 1:
            raise ValueError("z must lie in (0, 1]")

    @property
    def alpha0(self) -> float:
        return self.alpha / self.h**self.z

    def __call__(self, k):
        return stepsize_at(self, k)

    def partial_sum(self, k_from: int, k_to: int) -> float:
        """Exact ``sum_{i=k_from}^{k_to - 1} alpha_i``."""
        if k_to <= k_from:
            return 0.0
        i = np.arange(k_from, k_to, dtype=float)
        return float(np.sum(self.alpha / (i + self.h) ** self.z))

    def describe(self) -> dict:
        return {"alpha": self.alpha, "h": self.h, "z": self.z}


def stepsize_at(s: StepSchedule, k):
    """``alpha / (k + h)^z``; accepts scalars or integer arrays."""
    k_arr = np.asarray(k)
    if np.any(k_arr < 0):
        raise ValueError("k must be nonnegative")
    out = s.alpha / (k_arr + s.h) ** s.z
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class SeedSpec:
    """Counter-based stream identity: one generator per (master_seed, index)."""

    master_seed: int
    stream_index: int

    def __post_init__(self) -> None:
        for name in ("master_seed", "stream_index"):
            v = getattr(self, name)
            if not (0 <= int(v) < 2**64):
                raise ValueError(f"{name} must be a 64-bit unsigned integer")


def derive_stream(seed: SeedSpec) -> np.random.Generator:
    """A Philox generator whose state depends only on ``seed``.

    The master seed is the entropy and the stream index is the spawn key, so
    stream ``i`` is the same no matter how many other streams exist or which
    worker builds it.
    """
    ss = np.random.SeedSequence(entropy=int(seed.master_seed), spawn_key=(int(seed.stream_index),))
    return np.random.Generator(np.random.Philox(ss))
