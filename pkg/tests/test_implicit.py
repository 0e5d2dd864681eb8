import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from structsieve import implicit as im
from structsieve import network as nw
from structsieve import synth
from structsieve.network import StateVector, state_index, unflatten


def random_sparse(rng, D, density=0.3, scale=0.3):
    A = rng.normal(size=(D, D)) * scale * (rng.random((D, D)) < density)
    r, c = np.nonzero(A)
    return im.SparseJacobian(r, c, A[r, c], (D, D)), A


def test_sparse_products_against_dense():
    rng = np.random.default_rng(0)
    J, A = random_sparse(rng, 7)
    g = rng.normal(size=7)
    np.testing.assert_allclose(J.matvec(g), A @ g, atol=1e-14)
    np.testing.assert_allclose(J.rmatvec(g), A.T @ g, atol=1e-14)
    np.testing.assert_allclose(J.toarray(), A)
    dup = im.SparseJacobian([0, 0, 1], [1, 1, 0], [1.0, 2.0, 4.0], (2, 2))
    np.testing.assert_array_equal(dup.toarray(), [[0.0, 3.0], [4.0, 0.0]])
    with pytest.raises(IndexError):
        im.SparseJacobian([5], [0], [1.0], (2, 2))


def test_batched_products():
    rng = np.random.default_rng(1)
    vals = rng.normal(size=(3, 4))
    J = im.SparseJacobian([0, 1, 2, 2], [1, 2, 0, 2], vals, (3, 3))
    g = rng.normal(size=(3, 3))
    dense = J.toarray()
    np.testing.assert_allclose(J.matvec(g), np.einsum("nij,nj->ni", dense, g), atol=1e-14)
    np.testing.assert_allclose(J.row(1).toarray(), dense[1])


def test_series_and_direct_solve():
    rng = np.random.default_rng(2)
    J, A = random_sparse(rng, 6, scale=0.2)
    g = rng.normal(size=6)
    want = sum(np.linalg.matrix_power(A, q) @ g for q in range(9))
    np.testing.assert_allclose(im.neumann_apply(J, g, 8), want, atol=1e-13)
    np.testing.assert_allclose(im.direct_solve(J, g)[0], np.linalg.solve(np.eye(6) - A, g), atol=1e-12)
    with pytest.raises(ValueError):
        im.neumann_apply(J, g, -1)


def test_spectral_norm_and_radius():
    rng = np.random.default_rng(3)
    J, A = random_sparse(rng, 8, density=0.6)
    assert im.spectral_bound(J, iters=300) == pytest.approx(np.linalg.norm(A, 2), rel=1e-6)
    # strictly upper triangular: nilpotent, radius estimate collapses
    U = np.triu(rng.normal(size=(5, 5)), 1)
    r, c = np.nonzero(U)
    N = im.spectral_bound(im.SparseJacobian(r, c, U[r, c], (5, 5)), iters=20, method="radius")
    assert N < 1e-12
    with pytest.raises(ValueError):
        im.spectral_bound(J, method="nope")


def test_truncation_order_rule():
    # DERIVED: smallest Q with 0.5^(Q+1) / 0.5 <= 1e-8, i.e. 2^-Q <= 1e-8 -> Q = 27 (2^27 = 1.34e8)
    assert im.choose_Q(0.5, 1e-8) == 27
    assert im.choose_Q(0.0) == 0
    assert im.choose_Q(0.9, 1e-3) == 87   # DERIVED: 0.9^88 / 0.1 = 9.5e-4, 0.9^87 / 0.1 = 1.05e-3
    with pytest.raises(im.NeumannDivergence):
        im.choose_Q(1 - 1e-9)
    assert im.choose_Q(0.999, 1e-300) == im.Q_CAP


@settings(max_examples=40, deadline=None)
@given(lam=st.floats(1e-3, 0.99), tol=st.floats(1e-14, 1e-2))
def test_truncation_order_is_minimal(lam, tol):
    q = im.choose_Q(lam, tol, cap=10**6)
    assert lam ** (q + 1) / (1 - lam) <= tol
    assert q == 0 or lam ** q / (1 - lam) > tol


def test_balancing_preserves_the_series():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(6, 6)) * (rng.random((6, 6)) < 0.5)
    A *= np.logspace(-4, 4, 6)[:, None] / np.logspace(-4, 4, 6)[None, :]
    r, c = np.nonzero(A)
    J = im.SparseJacobian(r, c, A[r, c], (6, 6))
    B, s = im.balance(J)
    g = rng.normal(size=6)
    lhs = im.neumann_apply(J, g, 5)
    rhs = s[0] * im.neumann_apply(B, g / s[0], 5)[0]
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9 * np.max(np.abs(lhs)))
    assert im.spectral_bound(B) <= im.spectral_bound(J)



@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_perron_scaling_certifies_the_absolute_spectral_radius(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(6, 6)) * (rng.random((6, 6)) < 0.4)
    A *= np.logspace(-3, 3, 6)[:, None] / np.logspace(-3, 3, 6)[None, :]
    r, c = np.nonzero(A)
    if r.size == 0:
        return
    J = im.SparseJacobian(r, c, A[r, c], (6, 6))
    B, s = im.perron_scaling(J)
    rho = np.max(np.abs(np.linalg.eigvals(np.abs(A))))
    lam = im.spectral_bound(B, method="inf")
    assert lam == pytest.approx(np.max(np.abs(B.toarray()[0]).sum(1)), rel=1e-12)
    cap = rho + 0.05 * (1 - rho) if rho < 1 else rho * 1.05
    assert rho * (1 - 1e-9) <= lam <= cap * (1 + 1e-9) + 1e-12
    g = rng.normal(size=6)
    lhs = im.neumann_apply(J, g, 4)
    rhs = s[0] * im.neumann_apply(B, g / s[0], 4)[0]
    np.testing.assert_allclose(lhs, rhs, rtol=1e-8, atol=1e-8 * np.max(np.abs(lhs)))

def fd_state_jacobian(net, st, h=1e-7):
    flat = st.flat()
    D = flat.shape[1]
    out = np.zeros((D, D))
    for i in range(D):
        up, dn = flat.copy(), flat.copy()
        step = h * max(1.0, abs(flat[0, i]))
        up[0, i] += step
        dn[0, i] -= step
        a = nw.activation_map(net, StateVector(*unflatten(up, net.widths))).flat()
        b = nw.activation_map(net, StateVector(*unflatten(dn, net.widths))).flat()
        out[i] = ((a - b) / (2 * step))[0]
    return out


def clamped_rows(net):
    idx = state_index(net.widths)
    D = 2 * sum(net.widths)
    keep = np.ones(D, bool)
    keep[idx[("pi", 0)]] = False
    keep[idx[("v", net.S)]] = False
    return keep


@pytest.mark.parametrize("kind", ["production", "choice"])
def test_state_jacobian_against_finite_differences(kind):
    if kind == "production":
        net = synth.random_production_net([2, 3, 1], seed=3, tau_range=(0.85, 1.0), beta0_max=0.2)
        fr = nw.frontier(net, np.array([[1.0, 1.5]]))
        st = nw.solve_production(net, fr.prices, 0.8 * fr.y, tol=1e-14)
    else:
        net = synth.random_choice_net(3, 2, seed=3)
        st = nw.solve_choice(net, np.array([[0.3, -0.2, 0.5]]))
    J = im.jacobian_states(net, st).toarray()[0]
    F = fd_state_jacobian(net, st)
    keep = clamped_rows(net)
    np.testing.assert_allclose(J[keep], F[keep], atol=1e-6 * max(1.0, np.max(np.abs(F))))
    assert not np.any(J[~keep])


def test_parameter_jacobian_against_finite_differences():
    net = synth.random_production_net([2, 2, 1], seed=1, tau_range=(0.9, 1.0))
    fr = nw.frontier(net, np.array([[1.0, 2.0]]))
    st = nw.solve_production(net, fr.prices, 0.8 * fr.y, tol=1e-14)
    Jt = im.jacobian_params(net, st).toarray()[0]
    th = net.get_theta()
    for i in range(th.size):
        e = np.zeros(th.size)
        e[i] = 1e-7 * max(1.0, abs(th[i]))
        a = nw.activation_map(net.with_theta(th + e), st).flat()[0]
        b = nw.activation_map(net.with_theta(th - e), st).flat()[0]
        np.testing.assert_allclose(Jt[i], (a - b) / (2 * e[i]), atol=1e-6)


def test_nilpotency_index_of_choice_nets():
    for S in (1, 2, 3, 4):
        net = synth.random_choice_net(3, S, seed=S)
        st = nw.solve_choice(net, np.random.default_rng(S).normal(size=(1, 3)))
        A = im.jacobian_states(net, st).toarray()[0]
        order = im.acyclic_order(net)
        assert order == 2 * S - 2
        assert not np.any(np.linalg.matrix_power(A, order + 1))
        if order > 0:
            assert np.any(np.linalg.matrix_power(A, order))


def test_gradient_report_paths():
    net = synth.random_production_net([2, 3, 1], seed=0, tau_range=(0.85, 1.0), beta0_max=0.2)
    fr = nw.frontier(net, np.array([[1.0, 1.5]]))
    st = nw.solve_production(net, fr.prices, 0.8 * fr.y, tol=1e-14)
    idx = state_index(net.widths)
    gh = np.zeros((1, st.flat().shape[1]))
    gh[:, idx[("v", 0)]] = 1.0
    g, rep = im.implicit_gradient(net, st, gh, return_report=True)
    assert rep.method == "neumann" and rep.lam is not None and rep.lam < 1
    g_direct = im.direct_solve(im.jacobian_states(net, st), gh)
    want = im.jacobian_params(net, st).matvec(g_direct).sum(0)
    np.testing.assert_allclose(g, want, rtol=1e-7, atol=1e-12)
    frozen = net.copy()
    for l in frozen.layers:
        for k in l.frozen:
            l.frozen[k][:] = True
    assert im.implicit_gradient(frozen, st, gh).size == 0
