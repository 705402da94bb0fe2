"""Photon-number distributions, damping generators and their exact propagation.

A generator ``K`` acts on column vectors of probabilities, ``dP/dt = K @ P``,
so ``K[n, m]`` is the rate of flow from ``m`` into ``n`` and every column sums
to zero.  All times are in seconds and all rates in 1/s.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg
from scipy.stats import poisson

__all__ = [
    "CavityParams",
    "GeneratorMatrix",
    "PhotonDistribution",
    "PropagationError",
    "Propagator",
    "build_generator",
    "mean_photon",
    "propagate",
    "propagate_rk4",
    "stationary_distribution",
]

NORM_TOL = 1e-10


class PropagationError(ArithmeticError):
    """Raised when a propagated distribution loses normalization or finiteness."""


def _as_probs(P) -> np.ndarray:
    if isinstance(P, PhotonDistribution):
        return P.probs
    return np.asarray(P, dtype=float)


def _as_rates(K) -> np.ndarray:
    if isinstance(K, GeneratorMatrix):
        return K.rates
    return np.asarray(K, dtype=float)


@dataclass(frozen=True, eq=False)
class PhotonDistribution:
    """Probability vector over photon numbers ``0..n_max``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 1 or p.size < 2:
            raise ValueError("probs must be a 1-d vector with at least two entries")
        if not np.all(np.isfinite(p)):
            raise ValueError("probs must be finite")
        if np.any(p < -1e-12) or np.any(p > 1 + 1e-12):
            raise ValueError("probabilities must lie in [0, 1]")
        p = np.clip(p, 0.0, 1.0)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def n_max(self) -> int:
        return self.probs.size - 1

    def __len__(self):
        return self.probs.size

    def __getitem__(self, n):
        return self.probs[n]

    def __eq__(self, other):
        if not isinstance(other, PhotonDistribution):
            return NotImplemented
        return np.array_equal(self.probs, other.probs)

    def __repr__(self):
        return f"PhotonDistribution({np.array2string(self.probs, precision=4)})"

    def normalized(self) -> "PhotonDistribution":
        total = self.probs.sum()
        if total <= 0:
            raise ValueError("cannot normalize an all-zero distribution")
        return PhotonDistribution(self.probs / total)

    @classmethod
    def delta(cls, n: int, n_max: int = 7) -> "PhotonDistribution":
        if not 0 <= n <= n_max:
            raise ValueError(f"photon number {n} outside 0..{n_max}")
        p = np.zeros(n_max + 1)
        p[n] = 1.0
        return cls(p)

    @classmethod
    def flat(cls, n_max: int = 7) -> "PhotonDistribution":
        return cls(np.full(n_max + 1, 1.0 / (n_max + 1)))

    @classmethod
    def poisson(cls, mean: float, n_max: int = 7) -> "PhotonDistribution":
        """Poisson law truncated at ``n_max`` and renormalized."""
        if mean < 0 or not math.isfinite(mean):
            raise ValueError("mean must be finite and non-negative")
        p = poisson.pmf(np.arange(n_max + 1), mean) if mean > 0 else np.eye(n_max + 1)[0]
        return cls(p / p.sum())


@dataclass(frozen=True)
class CavityParams:
    """Cavity damping rate ``kappa`` (1/s), blackbody photon number and truncation."""

    kappa: float = 1.0 / 0.130
    n_b: float = 0.06
    n_max: int = 7

    def __post_init__(self):
        if not (math.isfinite(self.kappa) and math.isfinite(self.n_b)):
            raise ValueError("cavity parameters must be finite")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.n_b < 0:
            raise ValueError("n_b must be non-negative")
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise ValueError("n_max must be an integer >= 1")

    @property
    def damping_time(self) -> float:
        return 1.0 / self.kappa


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    """Rate matrix with ``rates[n, m]`` the flow rate from ``m`` to ``n``.

    Construction checks the generator conditions (zero column sums,
    non-negative off-diagonals) unless ``validate=False``; fitted generators
    in unconstrained mode are built that way.
    """

    rates: np.ndarray
    validate: bool = True

    def __post_init__(self):
        K = np.array(self.rates, dtype=float)
        if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape[0] < 2:
            raise ValueError("rates must be a square matrix of size >= 2")
        if not np.all(np.isfinite(K)):
            raise ValueError("rates must be finite")
        if self.validate:
            scale = max(1.0, np.abs(K).max())
            if np.abs(K.sum(axis=0)).max() > 1e-12 * scale:
                raise ValueError("generator columns must sum to zero")
            off = K - np.diag(np.diag(K))
            if off.min() < 0:
                raise ValueError("off-diagonal rates must be non-negative")
        K.setflags(write=False)
        object.__setattr__(self, "rates", K)

    @property
    def n_max(self) -> int:
        return self.rates.shape[0] - 1

    def __getitem__(self, idx):
        return self.rates[idx]

    def __eq__(self, other):
        if not isinstance(other, GeneratorMatrix):
            return NotImplemented
        return np.array_equal(self.rates, other.rates)

    def __repr__(self):
        return f"GeneratorMatrix(n_max={self.n_max})"

    @classmethod
    def zero(cls, n_max: int = 7) -> "GeneratorMatrix":
        return cls(np.zeros((n_max + 1, n_max + 1)))


def build_generator(params: CavityParams) -> GeneratorMatrix:
    """Quantum-optical damping generator, truncated at ``params.n_max``.

    The upward rate out of the top state is dropped so that the truncated
    chain still conserves probability exactly.
    """
    kappa, nb, n_max = float(params.kappa), float(params.n_b), int(params.n_max)
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    K = np.zeros((n_max + 1, n_max + 1))
    for m in range(n_max + 1):
        if m > 0:
            K[m - 1, m] = kappa * (1 + nb) * m
        if m < n_max:
            K[m + 1, m] = kappa * nb * (m + 1)
        K[m, m] = -K[:, m].sum()
    return GeneratorMatrix(K)


def _check(p: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(p)):
        raise PropagationError(f"{what}: non-finite probabilities")
    if abs(p.sum() - 1.0) > NORM_TOL or p.min() < -NORM_TOL:
        raise PropagationError(
            f"{what}: normalization drift {p.sum() - 1.0:.3e}, min {p.min():.3e}")
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def propagate(P, K, dt: float) -> PhotonDistribution:
    """Solve ``dP/dt = K P`` over ``dt`` seconds with a matrix exponential."""
    if dt < 0 or not math.isfinite(dt):
        raise ValueError("dt must be finite and non-negative")
    p = _as_probs(P)
    if dt == 0:
        return PhotonDistribution(p)
    out = linalg.expm(_as_rates(K) * dt) @ p
    return PhotonDistribution(_check(out, "propagate"))


def propagate_rk4(P, K, dt: float, steps: int | None = None) -> PhotonDistribution:
    """Fixed-step classical Runge-Kutta solution of ``dP/dt = K P``.

    Independent of :func:`propagate`; used to cross-check it. By default the
    step count keeps ``h * max|K_nn|`` below 0.01.
    """
    if dt < 0 or not math.isfinite(dt):
        raise ValueError("dt must be finite and non-negative")
    K = _as_rates(K)
    p = _as_probs(P).copy()
    if dt == 0:
        return PhotonDistribution(p)
    if steps is None:
        steps = max(1, int(math.ceil(dt * np.abs(np.diag(K)).max() / 0.01)))
    h = dt / steps
    for _ in range(steps):
        k1 = K @ p
        k2 = K @ (p + 0.5 * h * k1)
        k3 = K @ (p + 0.5 * h * k2)
        k4 = K @ (p + h * k3)
        p = p + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return PhotonDistribution(_check(p, "propagate_rk4"))


def stationary_distribution(K) -> PhotonDistribution:
    """Normalized null vector of ``K``; raises if the null space is not 1-d."""
    K = _as_rates(K)
    _, s, vh = linalg.svd(K)
    tol = max(K.shape) * np.finfo(float).eps * max(1.0, s[0])
    null_dim = int(np.sum(s <= tol))
    if null_dim != 1:
        raise ValueError(f"generator null space has dimension {null_dim}, expected 1")
    A = np.vstack([K, np.ones(K.shape[0])])
    b = np.zeros(K.shape[0] + 1)
    b[-1] = 1.0
    v, *_ = linalg.lstsq(A, b)
    v = np.clip(v, 0.0, None)
    return PhotonDistribution(v / v.sum())


def mean_photon(P) -> float:
    p = _as_probs(P)
    return float(np.dot(np.arange(p.size), p))


class Propagator:
    """Cached eigendecomposition of a generator for many short propagations.

    Generators with detailed balance (anything from :func:`build_generator`
    with ``n_b > 0``) are diagonalized through their symmetrized form; other
    generators use a general eigendecomposition when it is real and well
    conditioned, and ``scipy.linalg.expm`` per call otherwise.
    """

    def __init__(self, K):
        self.K = np.array(_as_rates(K), dtype=float)
        self._decomp = _reversible_decomposition(self.K)
        if self._decomp is None:
            self._decomp = _general_decomposition(self.K)

    @cached_property
    def is_spectral(self) -> bool:
        return self._decomp is not None

    @property
    def eigenvalues(self) -> np.ndarray:
        return self._decomp[0]

    @property
    def right(self) -> np.ndarray:
        return self._decomp[1]

    @property
    def left(self) -> np.ndarray:
        return self._decomp[2]

    def __call__(self, p: np.ndarray, dt: float) -> np.ndarray:
        if dt == 0:
            return np.array(p, dtype=float)
        if self._decomp is None:
            return linalg.expm(self.K * dt) @ p
        lam, V, W = self._decomp
        return V @ (np.exp(lam * dt) * (W @ p))


def _reversible_decomposition(K: np.ndarray):
    """Symmetrize a detailed-balance generator and diagonalize it.

    Returns ``(lam, V, W)`` with ``K = V diag(lam) W`` or ``None`` when the
    generator is not reversible with a strictly positive stationary law.
    """
    D = K.shape[0]
    if np.allclose(K, 0.0):
        return np.zeros(D), np.eye(D), np.eye(D)
    try:
        pi = stationary_distribution(K).probs
    except ValueError:
        return None
    if pi.min() <= 0:
        return None
    flux = K * pi[None, :]
    if not np.allclose(flux, flux.T, atol=1e-12 * np.abs(flux).max()):
        return None
    s = np.sqrt(pi)
    S = K * s[None, :] / s[:, None]
    S = 0.5 * (S + S.T)
    lam, B = linalg.eigh(S)
    V = B * s[:, None]
    W = B.T / s[None, :]
    return lam, np.ascontiguousarray(V), np.ascontiguousarray(W)


def _general_decomposition(K: np.ndarray, max_cond: float = 1e8):
    lam, V = linalg.eig(K)
    if np.abs(lam.imag).max() > 1e-12 * max(1.0, np.abs(lam).max()):
        return None
    V = V.real
    if np.linalg.cond(V) > max_cond:
        return None
    return lam.real, np.ascontiguousarray(V), np.ascontiguousarray(linalg.inv(V))
