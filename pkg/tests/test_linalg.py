import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qprojfilter.linalg import (
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    as_density,
    as_hermitian,
    bloch_to_density,
    commutator,
    density_to_bloch,
    frobenius_norm,
    hermitian_exp,
    matrix_from_json,
    matrix_to_json,
    repair_positivity,
    singular_values,
    spectral_decompose,
)

from conftest import random_density, random_hermitian

seeds = st.integers(0, 2**32 - 1)
dims = st.integers(2, 6)


def test_pauli_commutator():
    np.testing.assert_allclose(commutator(SIGMA_X, SIGMA_Y), 2j * SIGMA_Z, atol=1e-15)


def test_self_commutator_vanishes(rng):
    a = random_hermitian(rng, 4)
    assert np.max(np.abs(commutator(a, a))) == 0


def test_commutator_hand_example():
    H = 0.5 * SIGMA_Z
    rho0 = 0.5 * np.array([[1, -1], [-1, 1]])
    np.testing.assert_allclose(commutator(H, rho0), 0.5 * np.array([[0, -1], [1, 0]]), atol=1e-15)


def test_commutator_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        commutator(np.eye(2), np.eye(3))


def test_spectral_spin_half():
    dec = spectral_decompose(0.5 * SIGMA_Z)
    np.testing.assert_allclose(dec.eigenvalues, [0.5, -0.5])
    np.testing.assert_allclose(dec.projectors[0], np.diag([1, 0]), atol=1e-15)
    np.testing.assert_allclose(dec.projectors[1], np.diag([0, 1]), atol=1e-15)


def test_spectral_identity():
    dec = spectral_decompose(np.eye(3))
    assert len(dec) == 1 and dec.multiplicities == (3,)
    np.testing.assert_allclose(dec.projectors[0], np.eye(3), atol=1e-14)


def test_spectral_degenerate_diagonal():
    dec = spectral_decompose(np.diag([2.0, 2.0, -1.0]))
    np.testing.assert_allclose(dec.eigenvalues, [2, -1])
    np.testing.assert_allclose(dec.projectors[0], np.diag([1, 1, 0]), atol=1e-14)
    np.testing.assert_allclose(dec.projectors[1], np.diag([0, 0, 1]), atol=1e-14)


def test_spectral_rejects_non_hermitian():
    with pytest.raises(ValueError, match="not Hermitian"):
        spectral_decompose(np.array([[0, 1], [0, 0]]))


@given(seeds, dims)
def test_projector_algebra(seed, n):
    rng = np.random.default_rng(seed)
    U = np.linalg.qr(rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n)))[0]
    w = rng.integers(-2, 3, size=n).astype(float)  # forces degeneracies
    op = (U * w) @ U.conj().T
    dec = spectral_decompose(op)
    P = dec.projectors
    np.testing.assert_allclose(P.sum(axis=0), np.eye(n), atol=1e-10)
    for i in range(len(P)):
        for j in range(len(P)):
            target = P[i] if i == j else np.zeros((n, n))
            np.testing.assert_allclose(P[i] @ P[j], target, atol=1e-10)
    np.testing.assert_allclose(dec.reconstruct(), op, atol=1e-10)
    assert np.all(np.diff(dec.eigenvalues) < 0)


def test_frobenius_examples():
    assert frobenius_norm(np.eye(2)) == pytest.approx(np.sqrt(2))
    assert frobenius_norm(np.array([[0, -0.25], [-0.25, 0]])) == pytest.approx(np.sqrt(1 / 8))
    assert frobenius_norm(np.zeros((3, 3))) == 0


def test_singular_value_examples():
    np.testing.assert_allclose(singular_values(np.diag([3.0, -4.0])), [4, 3])
    np.testing.assert_allclose(singular_values(np.array([[0, -0.25], [-0.25, 0]])), [0.25, 0.25])


def test_hermitian_exp_examples():
    np.testing.assert_allclose(hermitian_exp(np.zeros((2, 2))), np.eye(2), atol=1e-15)
    np.testing.assert_allclose(hermitian_exp(np.diag([0.3, -1.2])), np.diag(np.exp([0.3, -1.2])), atol=1e-14)
    np.testing.assert_allclose(hermitian_exp(0.15 * SIGMA_Z), np.diag([np.exp(0.15), np.exp(-0.15)]), atol=1e-14)


@given(seeds, dims)
def test_hermitian_exp_matches_series(seed, n):
    rng = np.random.default_rng(seed)
    a = random_hermitian(rng, n, 0.3)
    series = np.eye(n, dtype=complex)
    term = np.eye(n, dtype=complex)
    for k in range(1, 30):
        term = term @ a / k
        series = series + term
    np.testing.assert_allclose(hermitian_exp(a), series, atol=1e-12)
    U = hermitian_exp(1j * a, skew=True)
    np.testing.assert_allclose(U @ U.conj().T, np.eye(n), atol=1e-12)


def test_bloch_examples():
    np.testing.assert_allclose(bloch_to_density((0, 0, 1)), np.diag([1, 0]))
    np.testing.assert_allclose(bloch_to_density((-1, 0, 0)), 0.5 * np.array([[1, -1], [-1, 1]]))
    np.testing.assert_allclose(bloch_to_density((0, 0, -1)), np.diag([0, 1]))


def test_bloch_outside_ball_rejected():
    with pytest.raises(ValueError, match="outside the unit ball"):
        bloch_to_density((1, 1, 0))


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_bloch_round_trip(x, y, z):
    v = np.array([x, y, z])
    nrm = np.linalg.norm(v)
    if nrm > 1:
        v = v / nrm
    rho = bloch_to_density(v)
    np.testing.assert_allclose(density_to_bloch(rho), v, atol=1e-14)
    assert np.trace(rho).real == pytest.approx(1.0)


def test_density_validation():
    with pytest.raises(ValueError, match="trace"):
        as_density(np.eye(2))
    with pytest.raises(ValueError, match="positive semidefinite"):
        as_density(np.diag([1.5, -0.5]))
    with pytest.raises(ValueError, match="not Hermitian"):
        as_hermitian(np.array([[0, 1], [2, 0]]))


def test_repair_positivity_clips_and_renormalizes():
    rho = np.array([np.diag([1.001, -0.001]), np.diag([0.5, 0.5])], dtype=complex)
    out, bad = repair_positivity(rho)
    assert bad.tolist() == [True, False]
    np.testing.assert_allclose(out[0], np.diag([1.0, 0.0]), atol=1e-15)
    np.testing.assert_allclose(out[1], rho[1])


def test_matrix_json_round_trip(rng):
    a = random_hermitian(rng, 3)
    np.testing.assert_array_equal(matrix_from_json(matrix_to_json(a)), a)
    np.testing.assert_array_equal(matrix_from_json([[1, 0], [0, -1]]), np.diag([1, -1]).astype(complex))


@given(seeds, dims)
def test_lemma_a1_singular_value_inequalities(seed, n):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    B = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    sA, sB, sAB = singular_values(A), singular_values(B), singular_values(A @ B)
    assert np.all(np.cumsum(sAB) <= np.cumsum(sA * sB) + 1e-9)
    assert sAB[0] <= sA[0] * sB[0] + 1e-9
    np.testing.assert_allclose(singular_values(A @ A.conj().T), sA**2, rtol=1e-9, atol=1e-9)
    assert singular_values(A @ A.conj().T).sum() == pytest.approx(np.trace(A @ A.conj().T).real, rel=1e-9)


def test_random_density_helper_is_valid(rng):
    for n in range(2, 7):
        as_density(random_density(rng, n))
