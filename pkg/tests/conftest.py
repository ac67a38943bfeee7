import numpy as np
import pytest
import scipy.sparse as sp

from mgrf.mesh import build_mesh, project
from mgrf.mgrf_prior import sample_joint_pair
from mgrf.sampler import SpatialData
from mgrf.spde import interpretable_to_params


def tridiag(n):
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]).tocsc()


def random_spd(n, rng, density=0.3):
    A = sp.random(n, n, density=density, random_state=rng)
    A = A + A.T
    return (A + sp.diags(np.abs(A).sum(axis=1).A1 + 1.0)).tocsc()


def dense_root(Q, perm):
    """Dense ``R = P^T chol(P Q P^T)`` for the permutation ``perm``, via numpy."""
    L = np.linalg.cholesky(Q[np.ix_(perm, perm)])
    R = np.empty_like(L)
    R[perm] = L
    return R


@pytest.fixture(scope="session")
def tiny_mesh():
    return build_mesh(target_nodes=25, extension_fraction=0.2)


@pytest.fixture(scope="session")
def small_mesh():
    return build_mesh(target_nodes=40, extension_fraction=0.2)


def make_data(mesh, n, rho=0.6, r_gamma=0.3, r_z=0.8, seed=0, B=1):
    rng = np.random.default_rng(seed)
    fem = mesh.fem
    sg = interpretable_to_params(1.0, r_gamma, fem)
    zs = []
    gamma = None
    for b in range(B):
        sz = interpretable_to_params(1.0, r_z, fem)
        g, z = sample_joint_pair(sg, sz, 0.0, rho, rng)
        gamma = g if gamma is None else gamma
        zs.append(z)
    Z = np.column_stack(zs)
    loc = rng.uniform(size=(n, 2))
    psi = project(mesh, loc).psi
    x = psi @ Z
    beta = np.array([-1.5, 1.0, -0.5][: B + 1])
    y = beta[0] + x @ beta[1:] + psi @ gamma + rng.normal(0, 0.3, n)
    return SpatialData(y, x, psi, Z, fem)


@pytest.fixture(scope="session")
def tiny_data(tiny_mesh):
    return make_data(tiny_mesh, 40)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


def report(criterion: int, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
