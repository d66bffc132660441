"""Dense Hermitian linear algebra for small quantum systems.

Matrices are plain ``numpy`` complex arrays. Functions that act on states
accept arbitrary leading batch axes, so a stack of ``N`` density matrices of
shape ``(N, n, n)`` can be processed in one call.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-9
PSD_TOL = 1e-9

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
IDENTITY_2 = np.eye(2, dtype=complex)


def dag(a: np.ndarray) -> np.ndarray:
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(a, -1, -2))


def trace(a: np.ndarray) -> np.ndarray:
    """Trace over the last two axes (complex)."""
    return np.trace(a, axis1=-2, axis2=-1)


def rtrace(a: np.ndarray) -> np.ndarray:
    """Real part of the trace over the last two axes."""
    return np.trace(a, axis1=-2, axis2=-1).real


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + dag(a))


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite square complex matrix, raising ``ValueError`` otherwise."""
    m = np.asarray(a, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def is_hermitian(a: np.ndarray, tol: float = HERMITIAN_TOL) -> bool:
    return bool(np.max(np.abs(a - dag(a)), initial=0.0) <= tol)


def as_hermitian(a, name: str = "operator", tol: float = HERMITIAN_TOL) -> np.ndarray:
    m = as_matrix(a, name)
    if not is_hermitian(m, tol):
        err = np.max(np.abs(m - dag(m)))
        raise ValueError(f"{name} is not Hermitian (max |A - A^dag| = {err:.3e})")
    return symmetrize(m)


def as_density(a, name: str = "rho", normalized: bool = True) -> np.ndarray:
    """Validate a density matrix (or an unnormalized PSD state)."""
    m = as_hermitian(a, name, tol=1e-10)
    w = np.linalg.eigvalsh(m)
    if w[0] < -PSD_TOL:
        raise ValueError(f"{name} is not positive semidefinite (min eigenvalue {w[0]:.3e})")
    if normalized and abs(np.trace(m).real - 1.0) > TRACE_TOL:
        raise ValueError(f"{name} has trace {np.trace(m).real!r}, expected 1")
    return m


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if np.shape(a)[-2:] != np.shape(b)[-2:]:
        raise ValueError(f"dimension mismatch: {np.shape(a)} vs {np.shape(b)}")
    return a @ b - b @ a


def anticommutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b + b @ a


def frobenius_norm(a: np.ndarray) -> np.ndarray | float:
    """sqrt(Tr(A^dag A)); batched over leading axes."""
    out = np.sqrt(np.sum(np.abs(a) ** 2, axis=(-2, -1)))
    return float(out) if np.ndim(out) == 0 else out


def singular_values(a: np.ndarray) -> np.ndarray:
    """Singular values in descending order; null directions give zeros."""
    return np.linalg.svd(np.asarray(a, dtype=complex), compute_uv=False)


def hermitian_exp(a: np.ndarray, skew: bool = False) -> np.ndarray:
    """Matrix exponential through the eigendecomposition.

    With ``skew=True`` the argument must be skew-Hermitian (``A = iK`` with
    ``K`` Hermitian) and the unitary ``exp(A)`` is returned. Batched.
    """
    a = np.asarray(a, dtype=complex)
    if skew:
        w, v = np.linalg.eigh(-1j * a)
        ew = np.exp(1j * w)
    else:
        w, v = np.linalg.eigh(a)
        ew = np.exp(w)
    return (v * ew[..., None, :]) @ dag(v)


@dataclass(frozen=True)
class SpectralDecomposition:
    """Distinct eigenvalues of a Hermitian operator with their projectors."""

    eigenvalues: np.ndarray  # (K,) descending
    projectors: np.ndarray  # (K, n, n)
    multiplicities: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.eigenvalues)

    def reconstruct(self) -> np.ndarray:
        return np.tensordot(self.eigenvalues, self.projectors, axes=1)

    def nonzero(self, tol: float = 1e-12) -> "SpectralDecomposition":
        """Drop the zero eigenvalue block (if any)."""
        keep = np.abs(self.eigenvalues) > tol
        return SpectralDecomposition(
            self.eigenvalues[keep],
            self.projectors[keep],
            tuple(m for m, k in zip(self.multiplicities, keep) if k),
        )

    def shifted(self, c: float) -> "SpectralDecomposition":
        """Decomposition of ``op - c*I``; projectors are unchanged."""
        return SpectralDecomposition(self.eigenvalues - c, self.projectors, self.multiplicities)


def spectral_decompose(op, cluster_tol: float = 1e-8) -> SpectralDecomposition:
    """Group eigenvalues closer than ``cluster_tol * max(1, spectral radius)``.

    Distinct eigenvalues are returned in descending order.
    """
    h = as_hermitian(op, "op", tol=1e-10)
    w, v = np.linalg.eigh(h)
    w, v = w[::-1], v[:, ::-1]
    scale = max(1.0, float(np.max(np.abs(w))))
    groups: list[list[int]] = [[0]]
    for i in range(1, len(w)):
        if w[groups[-1][0]] - w[i] > cluster_tol * scale:
            groups.append([i])
        else:
            groups[-1].append(i)
    eigvals = np.array([w[g].mean() for g in groups])
    projs = np.array([v[:, g] @ dag(v[:, g]) for g in groups])
    return SpectralDecomposition(eigvals, projs, tuple(len(g) for g in groups))


def repair_positivity(rho: np.ndarray, floor: float = -PSD_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Clip eigenvalues below ``floor`` to zero and renormalize the trace.

    Returns the repaired stack and a boolean mask of which entries were touched.
    """
    w, v = np.linalg.eigh(rho)
    bad = w[..., 0] < floor
    if not np.any(bad):
        return rho, bad
    out = np.array(rho, copy=True)
    wc = np.clip(w[bad], 0.0, None)
    fixed = (v[bad] * wc[..., None, :]) @ dag(v[bad])
    out[bad] = fixed / rtrace(fixed)[..., None, None]
    return out, bad


def min_eigenvalue(rho: np.ndarray) -> np.ndarray | float:
    w = np.linalg.eigvalsh(rho)[..., 0]
    return float(w) if np.ndim(w) == 0 else w


class BlochVector(NamedTuple):
    x: float
    y: float
    z: float

    def norm(self) -> float:
        return float(np.sqrt(self.x**2 + self.y**2 + self.z**2))


def bloch_to_density(v) -> np.ndarray:
    """rho = (I + x sx + y sy + z sz) / 2; ``v`` may be a stack of shape (..., 3)."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != 3:
        raise ValueError("Bloch vector needs 3 components")
    if np.any(np.sum(v**2, axis=-1) > 1 + 1e-9):
        raise ValueError("Bloch vector lies outside the unit ball")
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    rho = np.empty(v.shape[:-1] + (2, 2), dtype=complex)
    rho[..., 0, 0] = 1 + z
    rho[..., 0, 1] = x - 1j * y
    rho[..., 1, 0] = x + 1j * y
    rho[..., 1, 1] = 1 - z
    return 0.5 * rho


def density_to_bloch(rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.shape[-2:] != (2, 2):
        raise ValueError(f"Bloch coordinates need a 2x2 state, got {rho.shape[-2:]}")
    x = 2 * rho[..., 1, 0].real
    y = 2 * rho[..., 1, 0].imag
    z = (rho[..., 0, 0] - rho[..., 1, 1]).real
    return np.stack([x, y, z], axis=-1)


def matrix_to_json(a: np.ndarray) -> list:
    """Nested lists of ``[re, im]`` pairs."""
    a = np.asarray(a, dtype=complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in a]


def matrix_from_json(data) -> np.ndarray:
    arr = np.asarray(data, dtype=float)
    if arr.ndim == 2:  # real-only shorthand
        return arr.astype(complex)
    if arr.ndim != 3 or arr.shape[-1] != 2:
        raise ValueError("matrix JSON must be rows of [re, im] pairs")
    return arr[..., 0] + 1j * arr[..., 1]


def dumps_matrix(a: np.ndarray) -> str:
    return json.dumps(matrix_to_json(a))
