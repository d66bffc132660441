"""Quantum filter, observation record and Zakai equation.

Step functions are vectorized: ``rho`` may carry leading batch axes and the
scalar increments broadcast against them. The single-trajectory driver
:func:`simulate_filter` and the batched :func:`iterate_filter` share the same
step code.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .linalg import (
    as_density,
    commutator,
    dag,
    density_to_bloch,
    hermitian_exp,
    min_eigenvalue,
    repair_positivity,
    rtrace,
    symmetrize,
)
from .model import ModelSpec, SdeGrid
from .rng import wiener_increments

logger = logging.getLogger(__name__)

BLOWUP_NORM = 1e6
ZAKAI_TRACE_WINDOW = (1e-6, 1e6)
SYMMETRIZE_WARN = 1e-6


class SimulationError(RuntimeError):
    """An integration diverged; carries the trajectory index and step."""

    def __init__(self, message: str, trajectory: int | None = None, step: int | None = None):
        super().__init__(message)
        self.trajectory = trajectory
        self.step = step


def _col(x) -> np.ndarray:
    return np.asarray(x, dtype=float)[..., None, None]


def lindblad_drift(rho: np.ndarray, H: np.ndarray, L: np.ndarray) -> np.ndarray:
    """-i[H, rho] + L rho L^dag - (L^dag L rho + rho L^dag L)/2."""
    Ld = dag(L)
    LdL = Ld @ L
    return -1j * commutator(H, rho) + L @ rho @ Ld - 0.5 * (LdL @ rho + rho @ LdL)


def measurement_backaction(rho: np.ndarray, L: np.ndarray, eta: float) -> np.ndarray:
    """sqrt(eta) (L rho + rho L^dag - Tr[(L + L^dag) rho] rho)."""
    Lr = L @ rho
    m = Lr + dag(Lr)
    return np.sqrt(eta) * (m - rtrace(m)[..., None, None] * rho)


def _backaction_derivative(rho: np.ndarray, X: np.ndarray, L: np.ndarray, eta: float) -> np.ndarray:
    """Directional derivative of :func:`measurement_backaction` at ``rho`` along ``X``."""
    LX = L @ X
    Lr = L @ rho
    mX = LX + dag(LX)
    mr = Lr + dag(Lr)
    return np.sqrt(eta) * (mX - rtrace(mX)[..., None, None] * rho - rtrace(mr)[..., None, None] * X)


def _resymmetrize(rho: np.ndarray) -> np.ndarray:
    out = symmetrize(rho)
    drift = np.max(np.abs(out - rho), initial=0.0)
    if drift > SYMMETRIZE_WARN:
        logger.warning("Hermiticity correction of %.3e after integration step", drift)
    return out


def ito_filter_step(rho, model: ModelSpec, dW, dt: float, H: np.ndarray | None = None) -> np.ndarray:
    """One Euler-Maruyama step of the normalized filter driven by the innovation ``dW``.

    ``H`` overrides ``model.H`` (used for control Hamiltonians; may be batched).
    """
    H = model.H if H is None else H
    out = rho + lindblad_drift(rho, H, model.L) * dt + measurement_backaction(rho, model.L, model.eta) * _col(dW)
    return _resymmetrize(out)


def milstein_filter_step(rho, model: ModelSpec, dW, dt: float, H: np.ndarray | None = None) -> np.ndarray:
    """Euler-Maruyama plus the Milstein correction ``b'(b) (dW^2 - dt) / 2``.

    The correction cancels the ``eta dW^2`` term that pushes pure states out of
    the positive cone, so runs started from a pure state stay PSD.
    """
    H = model.H if H is None else H
    dW = _col(dW)
    b = measurement_backaction(rho, model.L, model.eta)
    out = (
        rho
        + lindblad_drift(rho, H, model.L) * dt
        + b * dW
        + 0.5 * _backaction_derivative(rho, b, model.L, model.eta) * (dW**2 - dt)
    )
    return _resymmetrize(out)


def unitary_propagator(H, dt: float) -> np.ndarray:
    """exp(-i H dt); ``H`` may be batched."""
    return hermitian_exp(-1j * dt * np.asarray(H, dtype=complex), skew=True)


def split_filter_step(rho, model: ModelSpec, dW, dt: float, H: np.ndarray | None = None) -> np.ndarray:
    """Exact unitary step for ``H`` followed by a Milstein step of the measurement part.

    Large control Hamiltonians make the explicit commutator term inflate the
    state by O((|H| dt)^2) per step; the exact rotation removes that source of
    positivity loss.
    """
    H = model.H if H is None else H
    U = unitary_propagator(H, dt)
    rho = U @ rho @ dag(U)
    zero = np.zeros_like(model.H)
    return milstein_filter_step(rho, model, dW, dt, H=zero)


FILTER_SCHEMES = {"euler": ito_filter_step, "milstein": milstein_filter_step, "split": split_filter_step}


def observation_increment(rho, model: ModelSpec, dW, dt: float):
    """dY = dW + sqrt(eta) Tr[(L + L^dag) rho] dt."""
    Lr = model.L @ rho
    return dW + np.sqrt(model.eta) * rtrace(Lr + dag(Lr)) * dt


def innovation_increment(rho, model: ModelSpec, dY, dt: float):
    """Inverse of :func:`observation_increment`."""
    Lr = model.L @ rho
    return dY - np.sqrt(model.eta) * rtrace(Lr + dag(Lr)) * dt


def zakai_step(rho_u, model: ModelSpec, dY, dt: float, H: np.ndarray | None = None) -> np.ndarray:
    """Euler-Maruyama step of the linear (unnormalized) filter driven by ``dY``."""
    H = model.H if H is None else H
    Lr = model.L @ rho_u
    out = rho_u + lindblad_drift(rho_u, H, model.L) * dt + np.sqrt(model.eta) * (Lr + dag(Lr)) * _col(dY)
    return _resymmetrize(out)


def stratonovich_F(rho_u, L: np.ndarray, eta: float) -> np.ndarray:
    """Drift of the Stratonovich Zakai equation besides the Hamiltonian part."""
    Ld = dag(L)
    return (1 - eta) * L @ rho_u @ Ld - 0.5 * ((eta * L + Ld) @ L @ rho_u + rho_u @ Ld @ (L + eta * Ld))


def stratonovich_F_adjoint(A, L: np.ndarray, eta: float) -> np.ndarray:
    """Hilbert-Schmidt adjoint of :func:`stratonovich_F`: Tr(F(rho) A) = Tr(rho F^dag(A))."""
    Ld = dag(L)
    return (1 - eta) * Ld @ A @ L - 0.5 * (A @ (eta * L + Ld) @ L + Ld @ (L + eta * Ld) @ A)


def stratonovich_zakai_step(rho_u, model: ModelSpec, dY, dt: float) -> np.ndarray:
    """Euler-Heun step of the Stratonovich form of the Zakai equation."""
    L, eta = model.L, model.eta
    dY = _col(dY)

    def drift(r):
        return -1j * commutator(model.H, r) + stratonovich_F(r, L, eta)

    def diff(r):
        Lr = L @ r
        return np.sqrt(eta) * (Lr + dag(Lr))

    a0, b0 = drift(rho_u), diff(rho_u)
    pred = rho_u + a0 * dt + b0 * dY
    return _resymmetrize(rho_u + 0.5 * (a0 + drift(pred)) * dt + 0.5 * (b0 + diff(pred)) * dY)


def variance_functional(rho, L: np.ndarray) -> np.ndarray:
    """V(rho) = Tr(L^2 rho) - Tr(L rho)^2 (Lyapunov function for state reduction)."""
    return rtrace(L @ L @ rho) - rtrace(L @ rho) ** 2


@dataclass
class TrajectoryRecord:
    """One sample path. ``dW[k]``, ``dY[k]`` drive the step from ``times[k]`` to ``times[k+1]``.

    Under ``measure='P'`` the states are normalized filter states. Under
    ``measure='P_prime'`` they are unnormalized Zakai states stored as
    ``states[k] * exp(log_scale[k])``.
    """

    times: np.ndarray
    dW: np.ndarray
    dY: np.ndarray
    states: np.ndarray
    measure: str
    log_scale: np.ndarray | None = None
    min_eig_pre_repair: float = 0.0
    repairs: int = 0

    def unnormalized(self, k: int) -> np.ndarray:
        scale = 1.0 if self.log_scale is None else np.exp(self.log_scale[k])
        return self.states[k] * scale

    def normalized_states(self) -> np.ndarray:
        return self.states / rtrace(self.states)[:, None, None]

    @property
    def Y(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.dY)])


def _check_blowup(rho, step: int, indices=None):
    """Raise :class:`SimulationError` naming the first diverged trajectory of the batch."""
    norms = np.max(np.abs(rho), axis=(-2, -1)).reshape(-1)
    bad = ~np.isfinite(norms) | (norms > BLOWUP_NORM)
    if np.any(bad):
        i = int(np.argmax(bad))
        traj = int(indices[i]) if indices is not None else i
        raise SimulationError(
            f"trajectory {traj} diverged at step {step} (max entry {norms[i]:.3e})", trajectory=traj, step=step
        )


def iterate_filter(
    model: ModelSpec,
    rho0: np.ndarray,
    dt: float,
    increments: np.ndarray,
    measure: str = "P",
    scheme: str = "split",
    repair: bool = True,
    indices=None,
) -> Iterator[dict]:
    """Advance a batch of normalized filters, yielding per-step diagnostics.

    ``increments`` has shape ``(N, n_steps)``. Under ``'P'`` they are the
    Wiener increments ``dW`` and the record ``dY`` follows from the state;
    under ``'P_prime'`` they are the record ``dY`` itself (a Wiener process)
    and ``dW`` is the innovation.

    Yields dicts with keys ``k`` (step index of the *new* state), ``rho``,
    ``dW``, ``dY``, ``min_eig`` (pre-repair) and ``repaired`` (mask).
    ``indices`` labels the batch rows in error messages.
    """
    step_fn = FILTER_SCHEMES[scheme]
    n_traj, n_steps = increments.shape
    rho = np.broadcast_to(rho0, (n_traj,) + rho0.shape).astype(complex).copy()
    for k in range(n_steps):
        inc = increments[:, k]
        if measure == "P":
            dW = inc
            dY = observation_increment(rho, model, dW, dt)
        elif measure == "P_prime":
            dY = inc
            dW = innovation_increment(rho, model, dY, dt)
        else:
            raise ValueError(f"unknown measure {measure!r}")
        rho = step_fn(rho, model, dW, dt)
        _check_blowup(rho, k + 1, indices)
        lo = np.linalg.eigvalsh(rho)[:, 0]
        repaired = np.zeros(n_traj, dtype=bool)
        if repair:
            rho, repaired = repair_positivity(rho)
        rho = rho / rtrace(rho)[:, None, None]
        yield {"k": k + 1, "rho": rho, "dW": dW, "dY": dY, "min_eig": lo, "repaired": repaired}


def iterate_zakai(model: ModelSpec, rho0: np.ndarray, dt: float, dY: np.ndarray, indices=None) -> Iterator[dict]:
    """Euler-Maruyama for the unnormalized filter with log-trace bookkeeping.

    Yields ``rho_u`` (rescaled copy) and ``log_scale`` such that the actual
    unnormalized state is ``rho_u * exp(log_scale)``.
    """
    n_traj, n_steps = dY.shape
    rho = np.broadcast_to(rho0, (n_traj,) + rho0.shape).astype(complex).copy()
    log_scale = np.zeros(n_traj)
    lo_w, hi_w = ZAKAI_TRACE_WINDOW
    for k in range(n_steps):
        rho = zakai_step(rho, model, dY[:, k], dt)
        tr = rtrace(rho)
        out = (tr < lo_w) | (tr > hi_w)
        if np.any(out):
            rho[out] /= tr[out][:, None, None]
            log_scale[out] += np.log(tr[out])
        _check_blowup(rho, k + 1, indices)
        yield {"k": k + 1, "rho_u": rho, "log_scale": log_scale.copy()}


def simulate_filter(
    model: ModelSpec,
    rho0,
    grid: SdeGrid,
    measure: str = "P",
    scheme: str = "split",
    index: int = 0,
    increments: np.ndarray | None = None,
) -> TrajectoryRecord:
    """Integrate one trajectory with seed ``(grid.seed, index)``.

    Under ``'P'`` the states are the normalized filter; under ``'P_prime'`` the
    record is a Wiener process and the states are Zakai states.
    """
    rho0 = as_density(rho0, "rho0")
    dt = grid.dt
    if increments is None:
        increments = wiener_increments(grid.seed, [index], grid.n_steps, dt)[0]
    inc = np.asarray(increments, dtype=float).reshape(1, -1)
    states = np.empty((grid.n_steps + 1,) + rho0.shape, dtype=complex)
    states[0] = rho0
    dW = np.empty(grid.n_steps)
    dY = np.empty(grid.n_steps)
    if measure == "P":
        lowest, repairs = float(min_eigenvalue(rho0)), 0
        for rec in iterate_filter(model, rho0, dt, inc, "P", scheme, indices=[index]):
            k = rec["k"]
            states[k] = rec["rho"][0]
            dW[k - 1], dY[k - 1] = rec["dW"][0], rec["dY"][0]
            lowest = min(lowest, float(rec["min_eig"][0]))
            repairs += int(rec["repaired"][0])
        if repairs:
            logger.info("trajectory %d: %d positivity repairs", index, repairs)
        return TrajectoryRecord(grid.times, dW, dY, states, "P", None, lowest, repairs)
    if measure == "P_prime":
        log_scale = np.zeros(grid.n_steps + 1)
        dY[:] = inc[0]
        for rec in iterate_zakai(model, rho0, dt, inc, indices=[index]):
            k = rec["k"]
            states[k] = rec["rho_u"][0]
            log_scale[k] = rec["log_scale"][0]
            prev = states[k - 1] / np.trace(states[k - 1]).real
            dW[k - 1] = innovation_increment(prev, model, dY[k - 1], dt)
        return TrajectoryRecord(grid.times, dW, dY, states, "P_prime", log_scale)
    raise ValueError(f"unknown measure {measure!r}")


def state_columns(states: np.ndarray) -> tuple[list[str], np.ndarray]:
    """Flatten states for CSV: Bloch coordinates for qubits, re/im entries otherwise."""
    n = states.shape[-1]
    if n == 2:
        b = density_to_bloch(states / rtrace(states)[..., None, None])
        return ["x", "y", "z"], b
    names, cols = [], []
    for i in range(n):
        for j in range(n):
            names += [f"re_{i}{j}", f"im_{i}{j}"]
            cols += [states[..., i, j].real, states[..., i, j].imag]
    return names, np.stack(cols, axis=-1)


def write_trajectory_csv(path, record: TrajectoryRecord) -> None:
    names, vals = state_columns(record.states)
    dW = np.concatenate([record.dW, [np.nan]])
    dY = np.concatenate([record.dY, [np.nan]])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "dW", "dY"] + names)
        for k, t in enumerate(record.times):
            w.writerow([repr(float(t)), repr(float(dW[k])), repr(float(dY[k]))] + [repr(float(v)) for v in vals[k]])
