"""Projection filter on an exponential family of unnormalized states.

The family is ``rho(theta) = exp(S/2) rho0 exp(S/2)`` with
``S = sum_i theta_i A_i`` for commuting Hermitian generators ``A_i``.
Tangent vectors are handled in the mixture (m) representation, i.e. as
Hermitian matrices; the exponential (e) representation of the basis vector
``d_i`` is ``A_i``, so the Fisher metric reads ``g_ij = Tr(rho A_i A_j)`` and
a vector ``X`` projects with coefficients ``G^{-1} [Tr(X A_j)]_j``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .linalg import (
    as_density,
    as_hermitian,
    commutator,
    dag,
    density_to_bloch,
    hermitian_exp,
    rtrace,
    spectral_decompose,
)
from .model import ModelSpec
from .sde import stratonovich_F_adjoint

logger = logging.getLogger(__name__)

COND_LIMIT = 1e12
TIKHONOV = 1e-12
DEFAULT_BOUND = 50.0


class SingularMetricError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class ExponentialFamily:
    generators: np.ndarray  # (m, n, n)
    rho0: np.ndarray
    bounds: tuple[float, float] = (-DEFAULT_BOUND, DEFAULT_BOUND)

    def __post_init__(self):
        gens = np.array([as_hermitian(a, f"A_{i + 1}", tol=1e-10) for i, a in enumerate(self.generators)])
        rho0 = as_density(self.rho0, "rho0")
        if gens.ndim != 3 or gens.shape[1:] != rho0.shape:
            raise ValueError("generators must match the dimension of rho0")
        for i in range(len(gens)):
            for j in range(i + 1, len(gens)):
                if np.max(np.abs(commutator(gens[i], gens[j]))) > 1e-10:
                    raise ValueError(f"generators A_{i + 1} and A_{j + 1} do not commute")
        object.__setattr__(self, "generators", gens)
        object.__setattr__(self, "rho0", rho0)
        w = np.linalg.eigvalsh(fisher_matrix(self, np.zeros(len(gens))))
        if w[0] <= 1e-10:
            raise ValueError(f"tangent vectors at theta=0 are not linearly independent (min Gram eigenvalue {w[0]:.3e})")

    @classmethod
    def from_observable(cls, L, rho0, **kw) -> "ExponentialFamily":
        """Generators = spectral projectors of ``L`` for its nonzero eigenvalues."""
        dec = spectral_decompose(L).nonzero()
        return cls(dec.projectors, rho0, **kw)

    @property
    def m(self) -> int:
        return len(self.generators)

    def exponent(self, theta) -> np.ndarray:
        return 0.5 * np.tensordot(np.asarray(theta, dtype=float), self.generators, axes=([-1], [0]))

    def rho(self, theta) -> np.ndarray:
        """Unnormalized family member; ``theta`` may carry leading batch axes."""
        E = hermitian_exp(self.exponent(theta))
        return E @ self.rho0 @ E

    def normalized(self, theta) -> np.ndarray:
        r = self.rho(theta)
        return r / rtrace(r)[..., None, None]

    def tangent_basis(self, theta) -> np.ndarray:
        """m-representations ``(A_i rho + rho A_i)/2``, shape (..., m, n, n)."""
        r = self.rho(theta)[..., None, :, :]
        A = self.generators
        return 0.5 * (A @ r + r @ A)

    @property
    def is_resolution(self) -> bool:
        """True when the generators sum to the identity (a complete set of projectors)."""
        return bool(np.allclose(self.generators.sum(axis=0), np.eye(self.rho0.shape[0]), atol=1e-10))

    def gauge_fix(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Representative of ``theta`` modulo normalization, saturated to the box.

        If the generators resolve the identity, shifting every ``theta_i`` by
        ``c`` only rescales the state by ``e^c``; the spread is centred on zero
        and then clipped. Returns ``(theta, clipped_mask)``.
        """
        theta = np.asarray(theta, dtype=float)
        if self.is_resolution:
            theta = theta - 0.5 * (theta.max(axis=-1, keepdims=True) + theta.min(axis=-1, keepdims=True))
        lo, hi = self.bounds
        clipped = ~self.in_bounds(theta)
        return np.clip(theta, lo, hi), clipped

    def in_bounds(self, theta) -> np.ndarray:
        lo, hi = self.bounds
        th = np.asarray(theta)
        return np.all((th > lo) & (th < hi), axis=-1)


@dataclass
class ProjState:
    theta: np.ndarray
    rho: np.ndarray

    @classmethod
    def initial(cls, fam: ExponentialFamily, batch: tuple = ()) -> "ProjState":
        theta = np.zeros(batch + (fam.m,))
        return cls(theta, fam.rho(theta))


def _pair_traces(rho, ops_left, ops_right) -> np.ndarray:
    """Re Tr(rho A_i B_j) for stacks A (m,n,n), B (m,n,n); rho batched."""
    prod = ops_left[:, None] @ ops_right[None, :]
    return np.einsum("...ab,ijba->...ij", rho, prod).real


def fisher_matrix(fam: ExponentialFamily, theta, rho: np.ndarray | None = None) -> np.ndarray:
    """G(theta)_ij = Tr(rho(theta) A_i A_j)."""
    if rho is None:
        rho = fam.rho(theta)
    G = _pair_traces(rho, fam.generators, fam.generators)
    return 0.5 * (G + np.swapaxes(G, -1, -2))


def solve_metric(G: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """G^{-1} rhs by Cholesky on the diagonally equilibrated metric.

    The condition number is judged after scaling ``G`` to unit diagonal, so a
    well-posed but badly scaled metric (e.g. diagonal with entries e^{theta_i})
    is not regularized. Above ``COND_LIMIT`` a Tikhonov shift is added to the
    scaled matrix.
    """
    G = np.asarray(G)
    d = np.sqrt(np.diagonal(G, axis1=-2, axis2=-1))
    if np.any(~(d > 0)):
        raise SingularMetricError("Fisher matrix has a non-positive diagonal entry")
    Gs = G / (d[..., :, None] * d[..., None, :])
    cond = np.linalg.cond(Gs)
    if np.any(~np.isfinite(cond)):
        raise SingularMetricError("Fisher matrix is singular")
    bad = cond > COND_LIMIT
    if np.any(bad):
        logger.warning("Fisher matrix condition number %.3e exceeds %.0e; regularizing", np.max(cond), COND_LIMIT)
        Gs = Gs + bad[..., None, None] * TIKHONOV * np.eye(G.shape[-1])
    c = np.linalg.cholesky(Gs)
    y = np.linalg.solve(c, (rhs / d)[..., None])
    return np.linalg.solve(dag(c), y)[..., 0] / d


def tangent_pairing(fam: ExponentialFamily, x: np.ndarray) -> np.ndarray:
    """Tr(x A_j) for every generator: the metric pairing of ``x`` with ``d_j``."""
    return np.einsum("...ab,jba->...j", x, fam.generators).real


def project(fam: ExponentialFamily, theta, x: np.ndarray, rho: np.ndarray | None = None) -> np.ndarray:
    """Coefficients ``c`` of the orthogonal projection of ``x`` onto the tangent space."""
    if rho is None:
        rho = fam.rho(theta)
    G = fisher_matrix(fam, theta, rho)
    return solve_metric(G, tangent_pairing(fam, x))


def tangent_vector(fam: ExponentialFamily, theta, coeffs, rho: np.ndarray | None = None) -> np.ndarray:
    """Sum_i c_i d_i in m-representation."""
    if rho is None:
        rho = fam.rho(theta)
    A = fam.generators
    S = np.tensordot(np.asarray(coeffs, dtype=float), A, axes=([-1], [0]))
    return 0.5 * (S @ rho + rho @ S)


def project_matrix(fam: ExponentialFamily, theta, x: np.ndarray, rho: np.ndarray | None = None) -> np.ndarray:
    """Pi_theta(x) as a matrix."""
    if rho is None:
        rho = fam.rho(theta)
    return tangent_vector(fam, theta, project(fam, theta, x, rho), rho)


def symmetrized_inner(rho, a, b) -> np.ndarray:
    """<<a, b>>_rho = Tr(rho (a b + b a)) / 2."""
    return 0.5 * rtrace(rho @ (a @ b + b @ a))


def e_representation(rho: np.ndarray, x: np.ndarray, floor: float = 1e-14) -> np.ndarray:
    """Solve (rho X + X rho)/2 = x for X; ``rho`` must be positive definite."""
    w, v = np.linalg.eigh(rho)
    if np.min(w) <= floor:
        raise SingularMetricError("e-representation needs a full-rank state")
    xt = dag(v) @ x @ v
    X = 2 * xt / (w[..., :, None] + w[..., None, :])
    return v @ X @ dag(v)


def fisher_inner(rho, x, y) -> np.ndarray:
    """<x, y>_rho = Tr(x^(m) y^(e)) for m-representations ``x``, ``y``."""
    return rtrace(x @ e_representation(rho, y))


def drift_xi(fam: ExponentialFamily, theta, model: ModelSpec, rho=None, H=None) -> np.ndarray:
    """Xi_j = Tr(rho (i[H, A_j] + F^dag(A_j))) = Tr((-i[H, rho] + F(rho)) A_j)."""
    if rho is None:
        rho = fam.rho(theta)
    H = model.H if H is None else H
    A = fam.generators
    ops = 1j * (H[..., None, :, :] @ A - A @ H[..., None, :, :]) + stratonovich_F_adjoint(A, model.L, model.eta)
    return np.einsum("...ab,...jba->...j", rho, ops).real


def diffusion_gamma(fam: ExponentialFamily, theta, model: ModelSpec, rho=None) -> np.ndarray:
    """Gamma_j = sqrt(eta) Tr(rho (A_j L + L^dag A_j))."""
    if rho is None:
        rho = fam.rho(theta)
    A, L = fam.generators, model.L
    ops = np.sqrt(model.eta) * (A @ L + dag(L) @ A)
    return np.einsum("...ab,jba->...j", rho, ops).real


def parameter_fields(fam: ExponentialFamily, theta, model: ModelSpec, H=None):
    """Drift ``G^{-1} Xi`` and diffusion ``G^{-1} Gamma`` of the parameter SDE."""
    rho = fam.rho(theta)
    G = fisher_matrix(fam, theta, rho)
    return solve_metric(G, drift_xi(fam, theta, model, rho, H)), solve_metric(G, diffusion_gamma(fam, theta, model, rho))


def projection_step(
    state: ProjState, fam: ExponentialFamily, model: ModelSpec, dY, dt: float, H=None, warn: bool = True
) -> ProjState:
    """Euler-Heun step of the Stratonovich parameter SDE (batched over leading axes)."""
    theta = state.theta
    dY = np.asarray(dY, dtype=float)[..., None]
    a0, b0 = parameter_fields(fam, theta, model, H)
    pred = theta + a0 * dt + b0 * dY
    a1, b1 = parameter_fields(fam, pred, model, H)
    new = theta + 0.5 * (a0 + a1) * dt + 0.5 * (b0 + b1) * dY
    inside = fam.in_bounds(new)
    if warn and not np.all(inside):
        logger.warning("theta left the parameter box %s in %d trajectories", fam.bounds, int(np.sum(~inside)))
    return ProjState(new, fam.rho(new))


def qnd_theta(eigenvalues, eta: float, times, Y) -> np.ndarray:
    """Closed form theta_i(t) = -2 eta lam_i^2 t + 2 sqrt(eta) lam_i Y_t.

    ``times`` and ``Y`` broadcast against each other; a trailing axis of
    length m is appended.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    t = np.asarray(times, dtype=float)[..., None]
    return -2 * eta * lam**2 * t + 2 * np.sqrt(eta) * lam * np.asarray(Y, dtype=float)[..., None]


def normalized_projection_step(rho, model: ModelSpec, dY, dt: float) -> np.ndarray:
    """Euler-Maruyama step of the normalized reduced filter (QND, Hermitian L).

    d rho = eta (L rho L - (L^2 rho + rho L^2)/2) dt
            + sqrt(eta) (L rho + rho L - 2 Tr(L rho) rho) dWhat,
    with the innovation dWhat = dY - 2 sqrt(eta) Tr(L rho) dt.
    """
    L, eta = model.L, model.eta
    mean = rtrace(L @ rho)[..., None, None]
    dWhat = np.asarray(dY, dtype=float)[..., None, None] - 2 * np.sqrt(eta) * mean * dt
    L2 = L @ L
    drift = eta * (L @ rho @ L - 0.5 * (L2 @ rho + rho @ L2))
    diff = np.sqrt(eta) * (L @ rho + rho @ L - 2 * mean * rho)
    out = rho + drift * dt + diff * dWhat
    return 0.5 * (out + dag(out))


def write_theta_csv(path, times, theta, normalized: np.ndarray | None = None) -> None:
    theta = np.asarray(theta)
    names = [f"theta_{i + 1}" for i in range(theta.shape[-1])]
    extra_names: list[str] = []
    extra = None
    if normalized is not None and normalized.shape[-1] == 2:
        extra = density_to_bloch(normalized)
        extra_names = ["x", "y", "z"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + names + extra_names)
        for k, t in enumerate(times):
            row = [repr(float(t))] + [repr(float(v)) for v in theta[k]]
            if extra is not None:
                row += [repr(float(v)) for v in extra[k]]
            w.writerow(row)
