"""Exact finite-dimensional solution of the QND filter.

For ``L = L^dag`` and ``[H, L] = 0`` the unnormalized filter stays on the
chart

    rho(phi) = exp(L_theta/2 + i H_gamma/2) rho_alpha exp(L_theta/2 - i H_gamma/2)

with ``L_theta = sum_k theta_k P_k``, ``H_gamma = sum_j gamma_j Q_j`` and
``rho_alpha`` a reweighting of the blocks ``P_k rho0 P_j``. Only ``theta``
is random; it is an affine function of the record ``Y``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .linalg import (
    SpectralDecomposition,
    as_density,
    commutator,
    dag,
    frobenius_norm,
    rtrace,
    spectral_decompose,
)
from .model import ModelSpec, SdeGrid
from .rng import wiener_increments
from .sde import iterate_filter, stratonovich_F

TANGENCY_TOL = 1e-9
GRAM_TOL = 1e-10


@dataclass(frozen=True)
class ExactChart:
    """Chart data: spectral blocks of L and H (zero-eigenvalue blocks dropped) and rho0.

    ``l_shift``/``h_shift`` record the multiples of the identity removed from
    L and H. Removing ``c*I`` from L leaves normalized states unchanged
    provided the record is shifted to ``Y - 2 sqrt(eta) c t``.
    """

    L_decomp: SpectralDecomposition
    H_decomp: SpectralDecomposition
    rho0: np.ndarray
    l_shift: float = 0.0
    h_shift: float = 0.0
    pairs: tuple = field(init=False)
    blocks: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        K = len(self.L_decomp)
        pairs = tuple((k, j) for k in range(K) for j in range(k, K))
        P = self.L_decomp.projectors
        blocks = []
        for k, j in pairs:
            b = P[k] @ self.rho0 @ P[j]
            if k != j:
                b = b + P[j] @ self.rho0 @ P[k]
            blocks.append(b)
        n = self.rho0.shape[0]
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "blocks", np.array(blocks).reshape(len(pairs), n, n))
        for Pk in P:
            for Qj in self.H_decomp.projectors:
                if np.max(np.abs(commutator(Pk, Qj))) > 1e-10:
                    raise ValueError("spectral projectors of L and H do not commute")

    @classmethod
    def from_model(cls, model: ModelSpec, rho0, shift: bool = True, cluster_tol: float = 1e-8) -> "ExactChart":
        """Build the chart; with ``shift`` the top eigenvalue of L and H is moved to zero."""
        model.check_qnd()
        rho0 = as_density(rho0, "rho0")
        Ld = spectral_decompose(model.L, cluster_tol)
        Hd = spectral_decompose(model.H, cluster_tol)
        lc = float(Ld.eigenvalues[-1]) if shift else 0.0
        hc = float(Hd.eigenvalues[-1]) if shift else 0.0
        if shift:
            Ld = SpectralDecomposition(Ld.eigenvalues - lc, Ld.projectors, Ld.multiplicities)
            Hd = SpectralDecomposition(Hd.eigenvalues - hc, Hd.projectors, Hd.multiplicities)
        return cls(Ld.nonzero(), Hd.nonzero(), rho0, lc, hc)

    @property
    def K(self) -> int:
        return len(self.L_decomp)

    @property
    def D(self) -> int:
        return len(self.H_decomp)

    @property
    def n_params(self) -> int:
        return self.K + self.D + len(self.pairs)

    @property
    def lam(self) -> np.ndarray:
        return self.L_decomp.eigenvalues

    @property
    def beta(self) -> np.ndarray:
        return self.H_decomp.eigenvalues

    @property
    def L(self) -> np.ndarray:
        """The (shifted) coupling operator the chart is built on."""
        return self.L_decomp.reconstruct().astype(complex) if self.K else np.zeros_like(self.rho0)

    @property
    def H(self) -> np.ndarray:
        return self.H_decomp.reconstruct().astype(complex) if self.D else np.zeros_like(self.rho0)

    def active_pairs(self, tol: float = 1e-12) -> np.ndarray:
        """False where ``P_k rho0 P_j = 0``: that alpha direction does not move the state."""
        return frobenius_norm(self.blocks) > tol if len(self.pairs) else np.zeros(0, dtype=bool)

    def split(self, phi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        phi = np.asarray(phi, dtype=float)
        K, D = self.K, self.D
        return phi[..., :K], phi[..., K : K + D], phi[..., K + D :]

    def _factors(self, theta, gamma):
        n = self.rho0.shape[0]
        eye = np.eye(n, dtype=complex)
        theta = np.asarray(theta, dtype=float)
        gamma = np.asarray(gamma, dtype=float)
        E = eye + np.tensordot(np.expm1(theta / 2), self.L_decomp.projectors, axes=([-1], [0])) if self.K else eye
        U = eye + np.tensordot(np.exp(0.5j * gamma) - 1, self.H_decomp.projectors, axes=([-1], [0])) if self.D else eye
        # E and U commute, so exp(L/2 + iH/2) = E U and exp(L/2 - iH/2) = E U^dag
        return E @ U, E @ dag(U)

    def rho_alpha(self, alpha) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=float)
        if not len(self.pairs):
            return np.broadcast_to(self.rho0, alpha.shape[:-1] + self.rho0.shape).copy()
        return self.rho0 + np.tensordot(np.expm1(alpha), self.blocks, axes=([-1], [0]))

    def state(self, theta, gamma, alpha) -> np.ndarray:
        """Unnormalized chart state; all arguments may carry matching leading axes."""
        left, right = self._factors(theta, gamma)
        return left @ self.rho_alpha(alpha) @ right

    def state_phi(self, phi) -> np.ndarray:
        return self.state(*self.split(phi))

    def partials(self, theta, gamma, alpha) -> np.ndarray:
        """Closed-form derivatives, shape ``(N_params, n, n)`` in order (theta, gamma, alpha)."""
        rho = self.state(theta, gamma, alpha)
        out = []
        for P in self.L_decomp.projectors:
            out.append(0.5 * (P @ rho + rho @ P))
        for Q in self.H_decomp.projectors:
            out.append(0.5j * (Q @ rho - rho @ Q))
        left, right = self._factors(theta, gamma)
        for b, a in zip(self.blocks, np.asarray(alpha, dtype=float)):
            out.append(left @ b @ right * np.exp(a))
        return np.array(out).reshape((-1,) + rho.shape)


def chart_state(chart: ExactChart, phi=None) -> np.ndarray:
    """Unnormalized state at ``phi`` (zero when omitted, which returns ``rho0``)."""
    if phi is None:
        phi = np.zeros(chart.n_params)
    return chart.state_phi(phi)


def finite_difference_partials(chart: ExactChart, phi, h: float = 1e-6) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    out = []
    for i in range(len(phi)):
        e = np.zeros_like(phi)
        e[i] = h
        out.append((chart.state_phi(phi + e) - chart.state_phi(phi - e)) / (2 * h))
    return np.array(out)


def gram_matrix(chart: ExactChart, phi) -> np.ndarray:
    """Hilbert-Schmidt Gram matrix Re Tr(d_i^dag d_j) of the chart partials."""
    d = chart.partials(*chart.split(phi))
    flat = d.reshape(len(d), -1)
    return (np.conj(flat) @ flat.T).real


def linear_independence(chart: ExactChart, phi, tol: float = GRAM_TOL) -> tuple[bool, float]:
    w = np.linalg.eigvalsh(gram_matrix(chart, phi))
    return bool(w[0] > tol), float(w[0])


@dataclass
class TangencyReport:
    hamiltonian: float
    dissipation: float
    measurement: float
    tol: float = TANGENCY_TOL

    @property
    def worst(self) -> float:
        return max(self.hamiltonian, self.dissipation, self.measurement)

    @property
    def ok(self) -> bool:
        return self.worst < self.tol


def tangency_check(chart: ExactChart, model: ModelSpec, phi=None, tol: float = TANGENCY_TOL) -> TangencyReport:
    """Residuals of the three tangency identities at ``phi`` (Frobenius norms)."""
    model.check_qnd()
    if phi is None:
        phi = np.zeros(chart.n_params)
    theta, gamma, alpha = chart.split(phi)
    rho = chart.state(theta, gamma, alpha)
    d = chart.partials(theta, gamma, alpha)
    K, D = chart.K, chart.D
    d_theta, d_gamma, d_alpha = d[:K], d[K : K + D], d[K + D :]
    lam, beta, eta = chart.lam, chart.beta, model.eta
    L = chart.L

    lhs_h = 1j * commutator(model.H, rho)
    rhs_h = 2 * np.tensordot(beta, d_gamma, axes=1) if D else np.zeros_like(rho)

    lhs_f = stratonovich_F(rho, L, eta)
    w_alpha = np.array([lam[k] * lam[j] for k, j in chart.pairs])
    rhs_f = np.zeros_like(rho)
    if K:
        rhs_f = (1 - eta) * np.tensordot(w_alpha, d_alpha, axes=1) - (1 + eta) * np.tensordot(lam**2, d_theta, axes=1)

    lhs_m = L @ rho + rho @ L
    rhs_m = 2 * np.tensordot(lam, d_theta, axes=1) if K else np.zeros_like(rho)

    return TangencyReport(
        float(frobenius_norm(lhs_h - rhs_h)),
        float(frobenius_norm(lhs_f - rhs_f)),
        float(frobenius_norm(lhs_m - rhs_m)),
        tol,
    )


@dataclass
class ExactTrajectory:
    chart: ExactChart
    times: np.ndarray
    theta: np.ndarray  # (..., steps+1, K)
    gamma: np.ndarray  # (steps+1, D)
    alpha: np.ndarray  # (steps+1, n_pairs)

    def unnormalized_states(self) -> np.ndarray:
        return self.chart.state(self.theta, self.gamma, self.alpha)

    def states(self) -> np.ndarray:
        rho = self.unnormalized_states()
        return rho / rtrace(rho)[..., None, None]

    def phi(self) -> np.ndarray:
        shape = self.theta.shape[:-1]
        return np.concatenate(
            [self.theta, np.broadcast_to(self.gamma, shape + self.gamma.shape[-1:]),
             np.broadcast_to(self.alpha, shape + self.alpha.shape[-1:])],
            axis=-1,
        )


def propagate_exact(chart: ExactChart, model: ModelSpec, times, Y) -> ExactTrajectory:
    """Evaluate the parameters along a record ``Y`` sampled at ``times``.

    theta_k = -(1+eta) lam_k^2 t + 2 sqrt(eta) lam_k Y'_t with the shifted
    record ``Y' = Y - 2 sqrt(eta) l_shift t``; gamma_j = -2 beta_j t;
    alpha_kj = (1-eta) lam_k lam_j t. ``Y`` may carry leading batch axes.
    """
    model.check_qnd()
    eta = model.eta
    t = np.asarray(times, dtype=float)
    Yp = np.asarray(Y, dtype=float) - 2 * np.sqrt(eta) * chart.l_shift * t
    lam, beta = chart.lam, chart.beta
    theta = -(1 + eta) * lam**2 * t[:, None] + 2 * np.sqrt(eta) * lam * Yp[..., None]
    gamma = -2 * beta * t[:, None]
    w = np.array([lam[k] * lam[j] for k, j in chart.pairs]).reshape(-1)
    alpha = (1 - eta) * w * t[:, None]
    return ExactTrajectory(chart, t, theta, gamma, alpha)


@dataclass
class ExactComparison:
    times: np.ndarray
    gap: np.ndarray  # (N, steps+1)
    Y: np.ndarray
    min_eig: float

    @property
    def max_gap(self) -> np.ndarray:
        return self.gap.max(axis=-1)


def exact_vs_filter(
    model: ModelSpec,
    rho0,
    grid: SdeGrid,
    dW: np.ndarray | None = None,
    n_traj: int = 1,
    scheme: str = "euler",
    shift: bool = True,
) -> ExactComparison:
    """Frobenius gap between the stepped filter and the exact chart on one record.

    The filter is driven by the Wiener increments ``dW``; the record it
    produces drives the chart, so the gap is pure discretization error.
    """
    chart = ExactChart.from_model(model, rho0, shift=shift)
    if dW is None:
        dW = wiener_increments(grid.seed, n_traj, grid.n_steps, grid.dt)
    dW = np.atleast_2d(dW)
    n = dW.shape[0]
    rho_f = np.empty((n, grid.n_steps + 1) + chart.rho0.shape, dtype=complex)
    rho_f[:, 0] = chart.rho0
    Y = np.zeros((n, grid.n_steps + 1))
    lowest = 0.0
    for rec in iterate_filter(model, chart.rho0, grid.dt, dW, "P", scheme):
        k = rec["k"]
        rho_f[:, k] = rec["rho"]
        Y[:, k] = Y[:, k - 1] + rec["dY"]
        lowest = min(lowest, float(rec["min_eig"].min()))
    traj = propagate_exact(chart, model, grid.times, Y)
    gap = frobenius_norm(rho_f - traj.states())
    return ExactComparison(grid.times, gap, Y, lowest)


def write_phi_csv(path, traj: ExactTrajectory, index: int = 0) -> None:
    chart = traj.chart
    names = [f"theta_{k + 1}" for k in range(chart.K)] + [f"gamma_{j + 1}" for j in range(chart.D)]
    names += [f"alpha_{k + 1}{j + 1}" for k, j in chart.pairs]
    phi = traj.phi()
    if phi.ndim == 3:
        phi = phi[index]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + names)
        for t, row in zip(traj.times, phi):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
