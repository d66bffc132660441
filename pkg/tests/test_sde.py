import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qprojfilter.linalg import SIGMA_Z, bloch_to_density, frobenius_norm, rtrace
from qprojfilter.model import ModelSpec, SdeGrid, spin_half_model
from qprojfilter.rng import coarsen, wiener_increments
from qprojfilter.sde import (
    FILTER_SCHEMES,
    SimulationError,
    _backaction_derivative,
    iterate_filter,
    iterate_zakai,
    lindblad_drift,
    measurement_backaction,
    observation_increment,
    simulate_filter,
    stratonovich_F,
    stratonovich_F_adjoint,
    unitary_propagator,
    zakai_step,
)

from conftest import random_density, random_hermitian

seeds = st.integers(0, 2**32 - 1)

ZERO2 = np.zeros((2, 2))


def _random_model(rng, n, eta=0.6):
    L = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return ModelSpec(random_hermitian(rng, n), 0.5 * L, eta)


@pytest.mark.parametrize("scheme", sorted(FILTER_SCHEMES))
def test_trivial_model_is_static(scheme, rng):
    model = ModelSpec(ZERO2, ZERO2, 0.7)
    rho = random_density(rng, 2)
    out = FILTER_SCHEMES[scheme](rho, model, 0.37, 1e-3)
    np.testing.assert_allclose(out, rho, atol=1e-15)


@pytest.mark.parametrize("scheme", sorted(FILTER_SCHEMES))
def test_eigenstate_is_fixed_point(scheme):
    model = spin_half_model()
    rho = np.diag([1.0, 0.0]).astype(complex)
    assert np.max(np.abs(measurement_backaction(rho, model.L, model.eta))) == 0
    out = FILTER_SCHEMES[scheme](rho, model, 0.5, 1e-3)
    np.testing.assert_allclose(out, rho, atol=1e-15)


def test_observation_increment_examples():
    model = spin_half_model(M=1.0, eta=0.5)
    for z in (-1.0, -0.3, 0.0, 0.8):
        rho = bloch_to_density((0, 0, z))
        assert observation_increment(rho, model, 0.01, 1e-3) == pytest.approx(0.01 + np.sqrt(0.5) * z * 1e-3)
    assert observation_increment(np.eye(2) / 2, model, 0.02, 1e-3) == pytest.approx(0.02)
    assert observation_increment(np.eye(2) / 2, ModelSpec(ZERO2, ZERO2, 0.3), 0.02, 1e-3) == 0.02


def test_zakai_linear_and_trivial(rng):
    model = _random_model(rng, 3)
    rho = random_density(rng, 3)
    a = zakai_step(2.5 * rho, model, 0.03, 1e-3)
    np.testing.assert_allclose(a, 2.5 * zakai_step(rho, model, 0.03, 1e-3), atol=1e-14)
    triv = ModelSpec(np.zeros((3, 3)), np.zeros((3, 3)), 0.5)
    np.testing.assert_allclose(zakai_step(rho, triv, 0.4, 1e-3), rho, atol=1e-15)


def test_stratonovich_F_hand_example():
    L = 0.5 * SIGMA_Z
    np.testing.assert_allclose(stratonovich_F(np.eye(2), L, 0.5), -0.25 * np.eye(2), atol=1e-15)
    np.testing.assert_array_equal(stratonovich_F(np.eye(2), ZERO2, 0.5), ZERO2)


@given(seeds, st.integers(2, 5), st.floats(0.05, 1.0))
def test_ito_stratonovich_correction(seed, n, eta):
    """Ito drift = Stratonovich drift + (1/2) Db[b], derivative by finite differences."""
    rng = np.random.default_rng(seed)
    model = _random_model(rng, n, eta)
    rho = random_density(rng, n)

    def b(r):
        Lr = model.L @ r
        return np.sqrt(eta) * (Lr + Lr.conj().T)

    h = 1e-6
    Db_b = (b(rho + h * b(rho)) - b(rho - h * b(rho))) / (2 * h)
    strat = -1j * (model.H @ rho - rho @ model.H) + stratonovich_F(rho, model.L, eta)
    np.testing.assert_allclose(strat + 0.5 * Db_b, lindblad_drift(rho, model.H, model.L), atol=1e-8)


@given(seeds, st.integers(2, 6), st.floats(0.05, 1.0))
def test_F_adjoint_identity(seed, n, eta):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    rho = random_density(rng, n)
    A = random_hermitian(rng, n)
    lhs = np.trace(stratonovich_F(rho, L, eta) @ A)
    rhs = np.trace(rho @ stratonovich_F_adjoint(A, L, eta))
    assert abs(lhs - rhs) < 1e-10


def test_backaction_derivative_finite_difference(rng):
    model = _random_model(rng, 3)
    rho = random_density(rng, 3)
    X = random_hermitian(rng, 3)
    h = 1e-6
    fd = (
        measurement_backaction(rho + h * X, model.L, model.eta) - measurement_backaction(rho - h * X, model.L, model.eta)
    ) / (2 * h)
    np.testing.assert_allclose(_backaction_derivative(rho, X, model.L, model.eta), fd, atol=1e-8)


def test_split_step_is_unitary_without_measurement(rng):
    H = random_hermitian(rng, 3)
    model = ModelSpec(H, np.zeros((3, 3)), 0.5)
    rho = random_density(rng, 3)
    U = unitary_propagator(H, 0.01)
    out = FILTER_SCHEMES["split"](rho, model, 0.2, 0.01)
    np.testing.assert_allclose(out, U @ rho @ U.conj().T, atol=1e-14)


def test_schemes_agree_to_first_order(rng):
    model = _random_model(rng, 3)
    rho = random_density(rng, 3, floor=0.1)
    dt = 1e-6
    dW = 1e-3
    e = FILTER_SCHEMES["euler"](rho, model, dW, dt)
    for name in ("milstein", "split"):
        assert frobenius_norm(FILTER_SCHEMES[name](rho, model, dW, dt) - e) < 1e-5


def test_simulate_filter_trivial_single_step(rng):
    rho0 = random_density(rng, 2)
    rec = simulate_filter(ModelSpec(ZERO2, ZERO2, 0.5), rho0, SdeGrid(1.0, 1, 3))
    assert rec.states.shape == (2, 2, 2)
    np.testing.assert_allclose(rec.states[1], rho0, atol=1e-15)


def test_simulate_filter_deterministic_and_normalized():
    model = spin_half_model()
    rho0 = bloch_to_density((-1, 0, 0))
    grid = SdeGrid(5.0, 4096, 11)
    a = simulate_filter(model, rho0, grid, index=3)
    b = simulate_filter(model, rho0, grid, index=3)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.dY, b.dY)
    assert np.max(np.abs(rtrace(a.states) - 1)) < 1e-9
    assert a.min_eig_pre_repair >= -1e-6
    c = simulate_filter(model, rho0, grid, index=4)
    assert not np.array_equal(a.dW, c.dW)


def test_zakai_tracks_normalized_filter():
    """Normalized linear filter and the nonlinear filter, same Wiener record."""
    model = spin_half_model()
    rho0 = bloch_to_density((-1, 0, 0))
    grid = SdeGrid(5.0, 4096, 5)
    dY = wiener_increments(grid.seed, 4, grid.n_steps, grid.dt)
    worst = 0.0
    for rz, rf in zip(iterate_zakai(model, rho0, grid.dt, dY), iterate_filter(model, rho0, grid.dt, dY, "P_prime", "euler")):
        z = rz["rho_u"] / rtrace(rz["rho_u"])[:, None, None]
        worst = max(worst, float(frobenius_norm(z - rf["rho"]).max()))
    assert worst < 0.05


def test_zakai_trace_bookkeeping():
    model = ModelSpec(ZERO2, 3.0 * SIGMA_Z, 1.0)
    dY = np.full((1, 400), 0.2)
    last = None
    for rec in iterate_zakai(model, np.eye(2) / 2, 1e-3, dY):
        last = rec
    assert 1e-6 <= rtrace(last["rho_u"])[0] <= 1e6
    assert last["log_scale"][0] > 0


def test_wiener_increments_are_per_trajectory():
    full = wiener_increments(9, 6, 100, 0.01)
    part = wiener_increments(9, [2, 5], 100, 0.01)
    np.testing.assert_array_equal(full[[2, 5]], part)
    assert full.std() == pytest.approx(0.1, rel=0.1)
    np.testing.assert_allclose(coarsen(full, 4)[:, 0], full[:, :4].sum(axis=1))


def test_divergence_reports_trajectory():
    model = ModelSpec(ZERO2, 0.5 * SIGMA_Z, 1.0)
    inc = np.array([[0.0, 0.0], [0.0, 1e9]])
    with pytest.raises(SimulationError) as info:
        for _ in iterate_filter(model, np.eye(2) / 2, 1e-3, inc, "P_prime", "euler", repair=False, indices=[5, 7]):
            pass
    assert info.value.trajectory == 7 and info.value.step == 2
