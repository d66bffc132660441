"""Model and time-grid value types shared by all integrators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import SIGMA_Z, as_hermitian, as_matrix, commutator, dag


@dataclass(frozen=True)
class ModelSpec:
    """Open system ``(H, L, eta)`` observed through one homodyne channel."""

    H: np.ndarray
    L: np.ndarray
    eta: float
    qnd: bool = False

    def __post_init__(self):
        H = as_hermitian(self.H, "H")
        L = as_matrix(self.L, "L")
        if H.shape != L.shape:
            raise ValueError(f"H and L dimensions differ: {H.shape} vs {L.shape}")
        if not 0.0 < float(self.eta) <= 1.0:
            raise ValueError(f"detector efficiency out of range: eta={self.eta!r} not in (0, 1]")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "eta", float(self.eta))
        if self.qnd:
            self.check_qnd()

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def check_qnd(self, tol: float = 1e-10) -> None:
        if np.max(np.abs(self.L - dag(self.L))) > tol:
            raise ValueError("QND mode requires a Hermitian coupling operator L")
        err = np.max(np.abs(commutator(self.H, self.L)))
        if err > tol:
            raise ValueError(f"QND mode requires [H, L] = 0 (max entry {err:.3e})")

    def is_qnd(self, tol: float = 1e-10) -> bool:
        try:
            self.check_qnd(tol)
        except ValueError:
            return False
        return True


@dataclass(frozen=True)
class SdeGrid:
    t_final: float
    n_steps: int
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.t_final > 0:
            raise ValueError("t_final must be positive")

    @property
    def dt(self) -> float:
        return self.t_final / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


@dataclass(frozen=True)
class SpinHalfParams:
    """Physical parameters of the driven spin-1/2 QND example."""

    omega_eg: float = 1.0
    M: float = 1.0
    eta: float = 0.5
    rho0_bloch: tuple = (-1.0, 0.0, 0.0)
    T: float = 5.0
    n_steps: int = 4096

    def model(self) -> ModelSpec:
        return spin_half_model(self.omega_eg, self.M, self.eta)


def spin_half_model(omega_eg: float = 1.0, M: float = 1.0, eta: float = 0.5) -> ModelSpec:
    """H = omega_eg/2 sz, L = sqrt(M)/2 sz."""
    return ModelSpec(H=0.5 * omega_eg * SIGMA_Z, L=0.5 * np.sqrt(M) * SIGMA_Z, eta=eta, qnd=True)
