import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def random_hermitian(rng, n, scale=1.0):
    a = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return scale * 0.5 * (a + a.conj().T)


def random_unitary(rng, n):
    q, r = np.linalg.qr(rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n)))
    return q * (np.diag(r) / np.abs(np.diag(r)))


def random_density(rng, n, rank=None, floor=0.0):
    rank = n if rank is None else rank
    g = rng.normal(size=(n, rank)) + 1j * rng.normal(size=(n, rank))
    rho = g @ g.conj().T + floor * np.eye(n)
    return rho / np.trace(rho).real


def random_partition(rng, n, k):
    """Split range(n) into k non-empty blocks."""
    cuts = np.sort(rng.choice(np.arange(1, n), size=k - 1, replace=False)) if k > 1 else []
    perm = rng.permutation(n)
    return [perm[a:b] for a, b in zip([0, *cuts], [*cuts, n])]


def projectors_in_basis(U, blocks):
    n = U.shape[0]
    out = []
    for b in blocks:
        d = np.zeros(n)
        d[b] = 1.0
        out.append((U * d) @ U.conj().T)
    return np.array(out)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def pytest_configure(config):
    config._criteria = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criteria", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
