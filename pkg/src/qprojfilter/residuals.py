"""Projection residuals, their QND closed forms and the averaged residual bound."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .linalg import (
    as_density,
    commutator,
    dag,
    frobenius_norm,
    hermitian_exp,
    singular_values,
    spectral_decompose,
)
from .model import ModelSpec, SdeGrid
from .projection import ExponentialFamily, project_matrix, qnd_theta
from .rng import wiener_increments
from .sde import iterate_filter, stratonovich_F


class HypothesisError(ValueError):
    """The commutation/structure assumptions a closed form relies on do not hold."""


def _require_qnd_projectors(fam: ExponentialFamily, model: ModelSpec, tol: float = 1e-10) -> np.ndarray:
    """Check ``A_i = P_i`` (nonzero spectral projectors of L) and return the eigenvalues."""
    if not model.is_qnd(tol):
        raise HypothesisError("closed form needs L = L^dag and [H, L] = 0")
    dec = spectral_decompose(model.L).nonzero()
    if len(dec) != fam.m or np.max(np.abs(dec.projectors - fam.generators)) > tol:
        raise HypothesisError("closed form needs the generators to be the nonzero spectral projectors of L")
    return dec.eigenvalues


def vector_fields(rho, model: ModelSpec, H=None):
    """Hamiltonian, dissipative and measurement fields of the Stratonovich Zakai equation."""
    H = model.H if H is None else H
    L = model.L
    Lr = L @ rho
    return (
        -1j * commutator(H, rho),
        stratonovich_F(rho, L, model.eta),
        np.sqrt(model.eta) * (Lr + rho @ dag(L)),
    )


def residuals(fam: ExponentialFamily, theta, model: ModelSpec):
    """(Omega, C1, C2): each field minus its projection onto the family's tangent space."""
    rho = fam.rho(theta)
    out = []
    for field in vector_fields(rho, model):
        out.append(field - project_matrix(fam, theta, field, rho))
    return tuple(out)


def c1_closed_form(fam: ExponentialFamily, theta, model: ModelSpec) -> np.ndarray:
    """sum_k (eta - 1) lam_k^2 ((A_k rho + rho A_k)/2 - A_k rho A_k) for A_k = P_k.

    This is the diagonal-block expression; it omits the ``lam_k lam_j P_k rho P_j``
    cross terms of ``L rho L`` and therefore differs from :func:`residuals`
    whenever ``rho`` has off-diagonal blocks (see :func:`c1_block_form`).
    """
    lam = _require_qnd_projectors(fam, model)
    rho = fam.rho(theta)
    A = fam.generators
    r = rho[..., None, :, :]
    terms = 0.5 * (A @ r + r @ A) - A @ r @ A
    return (model.eta - 1) * np.einsum("k,...kab->...ab", lam**2, terms)


def c1_block_form(fam: ExponentialFamily, theta, model: ModelSpec) -> np.ndarray:
    """C1 = F(rho) - Pi(F(rho)) = (1 - eta) (L rho L - sum_k lam_k^2 (P_k rho + rho P_k)/2).

    Derived from the projection coefficients ``-2 eta lam_k^2`` of ``F``; it
    keeps every block ``P_k rho P_j`` of ``L rho L``.
    """
    lam = _require_qnd_projectors(fam, model)
    rho = fam.rho(theta)
    L = model.L
    A = fam.generators
    r = rho[..., None, :, :]
    anti = np.einsum("k,...kab->...ab", lam**2, 0.5 * (A @ r + r @ A))
    return (1 - model.eta) * (L @ rho @ L - anti)


def omega_closed_form(fam: ExponentialFamily, theta, model: ModelSpec) -> np.ndarray:
    """exp(S/2) X0 exp(S/2) with X0 = -i[H, rho0]."""
    _require_qnd_projectors(fam, model)
    X0 = -1j * commutator(model.H, fam.rho0)
    E = hermitian_exp(fam.exponent(theta))
    return E @ X0 @ E


@dataclass(frozen=True)
class BoundIngredients:
    X0: np.ndarray
    Y: np.ndarray  # (m, n, n)
    sigma: float

    @classmethod
    def from_family(cls, fam: ExponentialFamily, model: ModelSpec) -> "BoundIngredients":
        lam = _require_qnd_projectors(fam, model)
        rho0 = fam.rho0
        A = fam.generators
        Y = 0.5 * (A @ rho0 + rho0 @ A) - A @ rho0 @ A
        sigma = (1 - model.eta) * float(np.max(lam**2))
        return cls(-1j * commutator(model.H, rho0), Y, sigma)


def bound_rhs(ing: BoundIngredients, m: int | None = None) -> float:
    """Time-independent upper bound on the averaged residual norm.

    The cross term runs over ordered pairs ``j != j'``.
    """
    Y = ing.Y if m is None else ing.Y[:m]
    sq = sum(np.trace(y @ y).real for y in Y)
    s = [singular_values(y) for y in Y]
    cross = sum(s[j][0] * s[jp].sum() for j in range(len(Y)) for jp in range(len(Y)) if j != jp)
    return float(ing.sigma * np.sqrt(sq + cross) + np.sqrt(np.trace(ing.X0 @ ing.X0).real))


@dataclass
class ResidualReport:
    times: np.ndarray
    e_t: np.ndarray
    stderr: np.ndarray
    omega_norms: np.ndarray
    c1_norms: np.ndarray
    c2_norms: np.ndarray
    bound_rhs: float
    max_c2: float = 0.0
    max_c1_closed_gap: float = 0.0
    max_c1_block_gap: float = 0.0
    max_omega_gap: float = 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "e_t", "stderr", "bound_rhs", "omega_norm", "c1_norm", "c2_norm"])
            for k, t in enumerate(self.times):
                w.writerow([repr(float(v)) for v in (t, self.e_t[k], self.stderr[k], self.bound_rhs,
                                                      self.omega_norms[k], self.c1_norms[k], self.c2_norms[k])])


def residual_series(fam: ExponentialFamily, model: ModelSpec, times, Y: np.ndarray) -> dict:
    """Per-trajectory residual norms along QND parameter paths driven by ``Y``.

    ``Y`` has shape ``(N, len(times))``. Returns arrays of shape ``(N, T)``
    under ``total``, ``omega``, ``c1`` and ``c2``, plus the largest C2 norm and
    the largest gaps between the generic route and the closed forms.
    By convention the total residual at ``t = 0`` is set to zero; the
    component norms keep their actual values there.
    """
    lam = _require_qnd_projectors(fam, model)
    Y = np.atleast_2d(Y)
    theta = np.swapaxes(qnd_theta(lam, model.eta, times, Y), 0, 1)  # (T, N, m)
    out = {k: np.empty((Y.shape[0], len(times))) for k in ("total", "omega", "c1", "c2")}
    gaps = np.zeros(3)
    for i, th in enumerate(theta):
        om, c1, c2 = residuals(fam, th, model)
        out["total"][:, i] = frobenius_norm(om + c1 + c2)
        out["omega"][:, i] = frobenius_norm(om)
        out["c1"][:, i] = frobenius_norm(c1)
        out["c2"][:, i] = frobenius_norm(c2)
        gaps[0] = max(gaps[0], float(frobenius_norm(c1 - c1_closed_form(fam, th, model)).max()))
        gaps[1] = max(gaps[1], float(frobenius_norm(c1 - c1_block_form(fam, th, model)).max()))
        gaps[2] = max(gaps[2], float(frobenius_norm(om - omega_closed_form(fam, th, model)).max()))
    out["total"][:, np.asarray(times) == 0] = 0.0
    out["max_c2"] = float(out["c2"].max())
    out["max_c1_closed_gap"], out["max_c1_block_gap"], out["max_omega_gap"] = (float(g) for g in gaps)
    return out


def brownian_paths(seed: int, indices, n_steps: int, dt: float) -> np.ndarray:
    """Wiener paths ``Y`` (starting at 0) of shape ``(N, n_steps + 1)``."""
    dY = wiener_increments(seed, indices, n_steps, dt)
    return np.concatenate([np.zeros((dY.shape[0], 1)), np.cumsum(dY, axis=1)], axis=1)


def _mean_se(a: np.ndarray):
    n = a.shape[0]
    se = a.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(a.shape[1])
    return a.mean(axis=0), se


def empirical_e_t(
    fam: ExponentialFamily,
    model: ModelSpec,
    grid: SdeGrid,
    n_traj: int,
    stride: int = 1,
    Y: np.ndarray | None = None,
) -> ResidualReport:
    """Monte-Carlo mean of ||C1 + C2 + Omega||_F when the record is a Wiener process.

    Residuals are evaluated by the generic projection route every ``stride``
    steps; the closed forms are compared against it along the way.
    """
    if Y is None:
        Y = brownian_paths(grid.seed, n_traj, grid.n_steps, grid.dt)
    idx = np.arange(0, grid.n_steps + 1, stride)
    ser = residual_series(fam, model, grid.times[idx], Y[:, idx])
    e, se = _mean_se(ser["total"])
    bound = bound_rhs(BoundIngredients.from_family(fam, model))
    return ResidualReport(
        grid.times[idx], e, se, ser["omega"].mean(0), ser["c1"].mean(0), ser["c2"].mean(0), bound,
        ser["max_c2"], ser["max_c1_closed_gap"], ser["max_c1_block_gap"], ser["max_omega_gap"],
    )


def equivalence_check(
    model: ModelSpec,
    fam: ExponentialFamily,
    grid: SdeGrid,
    n_traj: int = 1,
    dW: np.ndarray | None = None,
    scheme: str = "split",
    tol: float = 1e-10,
) -> np.ndarray:
    """Max over time of ||rho_t - rho_theta_t||_F per trajectory.

    Requires [H, L] = [H, rho0] = [L, rho0] = 0; both filters are driven by the
    same record.
    """
    lam = _require_qnd_projectors(fam, model, tol)
    rho0 = as_density(fam.rho0)
    for name, a, b in (("H, rho0", model.H, rho0), ("L, rho0", model.L, rho0)):
        if np.max(np.abs(commutator(a, b))) > tol:
            raise HypothesisError(f"[{name}] != 0")
    if dW is None:
        dW = wiener_increments(grid.seed, n_traj, grid.n_steps, grid.dt)
    dW = np.atleast_2d(dW)
    Y = np.zeros(dW.shape[0])
    worst = np.zeros(dW.shape[0])
    for rec in iterate_filter(model, rho0, grid.dt, dW, "P", scheme):
        Y = Y + rec["dY"]
        t = rec["k"] * grid.dt
        theta = qnd_theta(lam, model.eta, t, Y)
        worst = np.maximum(worst, frobenius_norm(rec["rho"] - fam.normalized(theta)))
    return worst
