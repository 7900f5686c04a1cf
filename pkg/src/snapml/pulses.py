"""Quadratic B-spline envelopes for the in-phase and quadrature drives."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["PulseParams", "SplineBasis", "make_basis", "eval_envelope", "N_COEFFS", "DURATION"]

N_COEFFS = 16
DURATION = 290.0


@dataclass(frozen=True)
class SplineBasis:
    """Clamped uniform B-spline basis on ``[0, duration]``."""

    n_basis: int
    duration: float
    degree: int = 2
    knots: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_basis < self.degree + 1:
            raise ValueError(f"need at least {self.degree + 1} basis functions, got {self.n_basis}")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        n_spans = self.n_basis - self.degree
        inner = np.linspace(0.0, self.duration, n_spans + 1)
        knots = np.concatenate([np.zeros(self.degree), inner, np.full(self.degree, self.duration)])
        object.__setattr__(self, "knots", knots)

    def __call__(self, t) -> np.ndarray:
        """Basis values, shape ``(len(t), n_basis)``; ``t`` must lie in ``[0, duration]``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > self.duration):
            raise ValueError(f"t outside [0, {self.duration}]")
        return _cox_de_boor(self.knots, self.degree, self.n_basis, t)


def _cox_de_boor(knots: np.ndarray, p: int, n: int, t: np.ndarray) -> np.ndarray:
    m = len(knots) - 1
    # degree-0 indicator; the right end point belongs to the last nonempty span
    last = np.max(np.nonzero(knots[:-1] < knots[1:])[0])
    B = np.zeros((len(t), m))
    for i in range(m):
        lo, hi = knots[i], knots[i + 1]
        if lo == hi:
            continue
        if i == last:
            B[:, i] = (t >= lo) & (t <= hi)
        else:
            B[:, i] = (t >= lo) & (t < hi)
    for k in range(1, p + 1):
        nxt = np.zeros((len(t), m - k))
        for i in range(m - k):
            den1 = knots[i + k] - knots[i]
            den2 = knots[i + k + 1] - knots[i + 1]
            if den1 > 0:
                nxt[:, i] += (t - knots[i]) / den1 * B[:, i]
            if den2 > 0:
                nxt[:, i] += (knots[i + k + 1] - t) / den2 * B[:, i + 1]
        B = nxt
    return B[:, :n]


def make_basis(n_basis: int = N_COEFFS, duration: float = DURATION) -> SplineBasis:
    return SplineBasis(n_basis, duration)


def eval_envelope(coeffs, basis: SplineBasis, t):
    """Envelope ``Σ_k coeffs[k] B_k(t)``; scalar in, scalar out."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (basis.n_basis,):
        raise ValueError(f"expected {basis.n_basis} coefficients, got {coeffs.shape}")
    vals = basis(t) @ coeffs
    return float(vals[0]) if np.ndim(t) == 0 else vals


@dataclass(frozen=True)
class PulseParams:
    """In-phase and quadrature spline coefficients (rad/ns) plus duration (ns)."""

    theta_i: np.ndarray
    theta_q: np.ndarray
    duration: float = DURATION

    def __post_init__(self):
        ti = np.array(self.theta_i, dtype=float).reshape(-1)
        tq = np.array(self.theta_q, dtype=float).reshape(-1)
        if ti.shape != (N_COEFFS,) or tq.shape != (N_COEFFS,):
            raise ValueError(f"need {N_COEFFS}+{N_COEFFS} coefficients, got {ti.size}+{tq.size}")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        ti.flags.writeable = False
        tq.flags.writeable = False
        object.__setattr__(self, "theta_i", ti)
        object.__setattr__(self, "theta_q", tq)

    @classmethod
    def from_vector(cls, theta, duration: float = DURATION) -> "PulseParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (2 * N_COEFFS,):
            raise ValueError(f"expected a {2 * N_COEFFS}-vector, got shape {theta.shape}")
        return cls(theta[:N_COEFFS], theta[N_COEFFS:], duration)

    @classmethod
    def zeros(cls, duration: float = DURATION) -> "PulseParams":
        return cls(np.zeros(N_COEFFS), np.zeros(N_COEFFS), duration)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.theta_i, self.theta_q])

    def envelopes(self, t, basis: SplineBasis | None = None) -> tuple[np.ndarray, np.ndarray]:
        basis = basis or make_basis(N_COEFFS, self.duration)
        B = basis(t)
        return B @ self.theta_i, B @ self.theta_q
