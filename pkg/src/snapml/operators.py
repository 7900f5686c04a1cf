"""Hilbert-space operators for a cavity qudit dispersively coupled to an ancilla.

Ordering convention: the product space is ``qudit ⊗ qubit`` so the basis index
of ``|k⟩|q⟩`` is ``k * qubit_levels + q``. Levels are 0-based.

Frequencies are given in MHz and converted to angular units (rad/ns) when
``two_pi_units`` is set; time is in ns throughout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SystemSpec",
    "SnapSpec",
    "annihilation",
    "static_hamiltonian",
    "control_operators",
    "snap_unitary",
    "embedded_snap",
    "trace_fidelity",
    "fidelity_from_overlaps",
    "snap_phases",
]


@dataclass(frozen=True)
class SystemSpec:
    """Qudit/ancilla system constants.

    Parameters
    ----------
    d : int
        Number of logical qudit levels.
    qubit_levels : int
        Truncation of the ancilla.
    chi, xi : float
        Dispersive coupling and ancilla nonlinearity in MHz.
    two_pi_units : bool
        Multiply ``chi`` and ``xi`` by 2π so that ``H`` is in rad/ns.
    """

    d: int = 5
    qubit_levels: int = 3
    chi: float = 5.0
    xi: float = 200.0
    two_pi_units: bool = True

    def __post_init__(self):
        if self.d < 2:
            raise ValueError(f"qudit levels must be >= 2, got {self.d}")
        if self.qubit_levels < 2:
            raise ValueError(f"qubit levels must be >= 2, got {self.qubit_levels}")
        if not (self.chi > 0 and self.xi > 0):
            raise ValueError("chi and xi must be positive")

    @property
    def dim(self) -> int:
        return self.d * self.qubit_levels

    @property
    def omega_chi(self) -> float:
        """Dispersive shift in rad/ns."""
        return self._angular(self.chi)

    @property
    def omega_xi(self) -> float:
        return self._angular(self.xi)

    def _angular(self, mhz: float) -> float:
        # MHz -> 1/ns
        f = mhz * 1e-3
        return 2 * np.pi * f if self.two_pi_units else f

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "qubit_levels": self.qubit_levels,
            "chi": self.chi,
            "xi": self.xi,
            "two_pi_units": self.two_pi_units,
        }


@dataclass(frozen=True)
class SnapSpec:
    """Target SNAP gate: phase ``alpha`` on qudit level ``n``."""

    alpha: float
    n: int = 2


def annihilation(levels: int) -> np.ndarray:
    """Truncated lowering operator with ``a[k, k+1] = sqrt(k+1)``."""
    if levels < 2:
        raise ValueError(f"invalid dimension: levels must be >= 2, got {levels}")
    return np.diag(np.sqrt(np.arange(1, levels)), k=1).astype(complex)


def static_hamiltonian(sys: SystemSpec) -> np.ndarray:
    """Drift Hamiltonian ``-chi a†a ⊗ b†b - xi I ⊗ b†² b²`` (diagonal)."""
    a = annihilation(sys.d)
    b = annihilation(sys.qubit_levels)
    n_a = a.conj().T @ a
    n_b = b.conj().T @ b
    bd = b.conj().T
    kerr = bd @ bd @ b @ b
    return (-sys.omega_chi * np.kron(n_a, n_b)
            - sys.omega_xi * np.kron(np.eye(sys.d), kerr))


def control_operators(sys: SystemSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(Bx, By)`` such that ``H_ctrl = I(t) Bx + Q(t) By``."""
    b = annihilation(sys.qubit_levels)
    eye = np.eye(sys.d)
    bx = np.kron(eye, b + b.conj().T)
    by = np.kron(eye, 1j * (b - b.conj().T))
    return bx, by


def snap_unitary(spec: SnapSpec, d: int) -> np.ndarray:
    if not 0 <= spec.n < d:
        raise IndexError(f"SNAP level {spec.n} outside 0..{d - 1}")
    diag = np.ones(d, dtype=complex)
    diag[spec.n] = np.exp(1j * spec.alpha)
    return np.diag(diag)


def embedded_snap(spec: SnapSpec, sys: SystemSpec) -> np.ndarray:
    """SNAP on the qudit, identity on the ancilla."""
    return np.kron(snap_unitary(spec, sys.d), np.eye(sys.qubit_levels))


def snap_phases(alpha, n: int, d: int) -> np.ndarray:
    """Diagonal of SNAP for one or many angles, shape ``(..., d)``."""
    alpha = np.asarray(alpha, dtype=float)
    out = np.ones(alpha.shape + (d,), dtype=complex)
    out[..., n] = np.exp(1j * alpha)
    return out


def fidelity_from_overlaps(overlaps: np.ndarray, target_diag: np.ndarray) -> np.ndarray:
    """``|Σ_k conj(v_k) u_k|² / d²`` along the last axis.

    ``overlaps[..., k]`` is ``⟨k,0|U|k,0⟩`` and ``target_diag`` the SNAP diagonal.
    """
    d = overlaps.shape[-1]
    s = np.sum(np.conj(target_diag) * overlaps, axis=-1)
    return np.abs(s) ** 2 / d**2


def trace_fidelity(U: np.ndarray, spec: SnapSpec, sys: SystemSpec) -> float:
    """Gate trace fidelity on the ``qudit ⊗ |0⟩_qubit`` subspace.

    ``f = |Tr(Π V† U Π)|² / d²``; invariant under a global phase of ``U``.
    """
    U = np.asarray(U)
    if U.shape != (sys.dim, sys.dim):
        raise ValueError(f"expected a {sys.dim}x{sys.dim} operator, got {U.shape}")
    idx = np.arange(sys.d) * sys.qubit_levels
    overlaps = U[idx, idx]
    return float(fidelity_from_overlaps(overlaps, snap_phases(spec.alpha, spec.n, sys.d)))
