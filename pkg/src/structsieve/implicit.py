"""Gradients through equilibrium states via the implicit function theorem.

Convention: Jacobian entry (i, j) is d upsilon_j / d h_i, so that

    dL/dtheta = Y_theta (I - Y_h)^{-1} dL/dh

and the inverse is replaced by the truncated series sum_{q<=Q} Y_h^q applied
to a vector.  Local derivatives of each block map are taken by complex-step
differentiation, which is exact to rounding on every smooth branch; at
Leontief/max kinks the branch selected by the real part is differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .network import PARAM_NAMES, NetworkSpec, StateVector, block_map, state_index

CS_STEP = 1e-20
Q_CAP = 200
DIVERGENCE_MARGIN = 1e-6


class NeumannDivergence(ArithmeticError):
    """Spectral bound too close to one for the series to be trusted."""


class SparseJacobian:
    """Triplet sparse matrix; values may be batched over observations.

    ``vals`` has shape (nnz,) or (n, nnz) on a shared (rows, cols) pattern.
    Duplicate (row, col) pairs are summed on assembly.
    """

    def __init__(self, rows, cols, vals, shape):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        if rows.size and (rows.min() < 0 or rows.max() >= shape[0] or cols.min() < 0 or cols.max() >= shape[1]):
            raise IndexError("triplet index out of range")
        key = rows * shape[1] + cols
        uniq, inv = np.unique(key, return_inverse=True)
        if uniq.size != key.size:
            summed = np.zeros(vals.shape[:-1] + (uniq.size,))
            for pos in range(key.size):
                summed[..., inv[pos]] += vals[..., pos]
            vals = summed
        self.rows = (uniq // shape[1]).astype(np.int64)
        self.cols = (uniq % shape[1]).astype(np.int64)
        if uniq.size == key.size:
            order = np.argsort(key, kind="stable")
            vals = vals[..., order]
        self.vals = vals
        self.shape = tuple(shape)
        nnz = self.rows.size
        self._row_scatter = sp.csr_matrix((np.ones(nnz), (np.arange(nnz), self.rows)), shape=(nnz, shape[0]))
        self._col_scatter = sp.csr_matrix((np.ones(nnz), (np.arange(nnz), self.cols)), shape=(nnz, shape[1]))

    @property
    def batched(self):
        return self.vals.ndim == 2

    @property
    def nnz(self):
        return self.rows.size

    def matvec(self, g):
        """(J g)_i = sum_j J_ij g_j; g has shape (shape[1],) or (n, shape[1])."""
        g = np.asarray(g, dtype=float)
        prod = self.vals * g[..., self.cols]
        return np.asarray(self._row_scatter.T.dot(np.atleast_2d(prod).T)).T.reshape(prod.shape[:-1] + (self.shape[0],))

    def rmatvec(self, x):
        """(J^T x)_j = sum_i J_ij x_i."""
        x = np.asarray(x, dtype=float)
        prod = self.vals * x[..., self.rows]
        return np.asarray(self._col_scatter.T.dot(np.atleast_2d(prod).T)).T.reshape(prod.shape[:-1] + (self.shape[1],))

    def toarray(self):
        lead = self.vals.shape[:-1]
        out = np.zeros(lead + self.shape)
        out[..., self.rows, self.cols] = self.vals
        return out

    def row(self, k):
        """Unbatched matrix of observation k."""
        v = self.vals[k] if self.batched else self.vals
        return SparseJacobian(self.rows, self.cols, v, self.shape)

    def to_scipy(self, k=None):
        v = self.vals if not self.batched else self.vals[k]
        return sp.csr_matrix((v, (self.rows, self.cols)), shape=self.shape)


# ---------------------------------------------------------------------------
# local Jacobians
# ---------------------------------------------------------------------------

def _block_io(widths, s):
    idx = state_index(widths)
    ins = np.r_[np.arange(widths[s]) + idx[("pi", s)].start, np.arange(widths[s + 1]) + idx[("v", s + 1)].start]
    outs = np.r_[np.arange(widths[s + 1]) + idx[("pi", s + 1)].start, np.arange(widths[s]) + idx[("v", s)].start]
    return ins, outs


CHUNK_ELEMS = 4_000_000


def _complex_sweep(net, s, h: StateVector, perturb):
    """Complex-step derivatives of block s for many perturbations at once.

    perturb is a list of ("pi", k), ("v", k) or (param name, flat index);
    the perturbed copies are stacked along the observation axis so one
    vectorised block evaluation serves a whole chunk.  Returns an array of
    shape (len(perturb), n, n_outputs).
    """
    layer = net.layers[s]
    pi0, v0 = h.pi[s], h.v[s + 1]
    n = pi0.shape[0]
    per = n * max(layer.beta.size, 1) * 4
    step = max(1, CHUNK_ELEMS // per)
    out = []
    for c0 in range(0, len(perturb), step):
        chunk = perturb[c0:c0 + step]
        P = len(chunk)
        pi_in = np.tile(pi0.astype(complex), (P, 1)).reshape(P, n, -1)
        v_in = np.tile(v0.astype(complex), (P, 1)).reshape(P, n, -1)
        params = {}
        for p, (kind, k) in enumerate(chunk):
            if kind == "pi":
                pi_in[p, :, k] += 1j * CS_STEP
            elif kind == "v":
                v_in[p, :, k] += 1j * CS_STEP
            else:
                if kind not in params:
                    params[kind] = np.broadcast_to(getattr(layer, kind).astype(complex),
                                                   (P,) + getattr(layer, kind).shape).copy()
                params[kind][p].reshape(-1)[k] += 1j * CS_STEP
        overrides = None
        if params:
            overrides = {}
            for name in PARAM_NAMES:
                arr = params.get(name)
                if arr is None:
                    arr = np.broadcast_to(getattr(layer, name), (P,) + getattr(layer, name).shape)
                full = np.broadcast_to(arr[:, None], (P, n) + arr.shape[1:])
                overrides[name] = full.reshape((P * n,) + arr.shape[1:])
        with np.errstate(all="ignore"):
            a, b = block_map(net, s, pi_in.reshape(P * n, -1), v_in.reshape(P * n, -1), overrides)
        d = np.concatenate([np.imag(a), np.imag(b)], -1) / CS_STEP
        out.append(d.reshape(P, n, -1))
    return np.concatenate(out, 0)


def jacobian_states(net: NetworkSpec, h: StateVector) -> SparseJacobian:
    """Y_h with entries d upsilon_j / d h_i, batched over observations.

    Rows of the clamped states pi^(0) and v^(S) are zero: they are data.
    """
    widths = net.widths
    D = 2 * sum(widths)
    rows, cols, vals = [], [], []
    n = h.pi[0].shape[0]
    for s in range(net.S):
        ins, outs = _block_io(widths, s)
        local = [("pi", k) for k in range(widths[s])] + [("v", k) for k in range(widths[s + 1])]
        # pi^(0) and v^(S) are data: upsilon treats them as constants
        keep = [(a, w) for a, w in zip(ins, local)
                if not ((w[0] == "pi" and s == 0) or (w[0] == "v" and s == net.S - 1))]
        if not keep:
            continue
        # a node's own target (production) or reach probability (choice)
        # only enters that node, so those columns use the one-node sweep
        own = "v" if net.kind == "production" else "pi"
        loc = [(a, w) for a, w in keep if w[0] == own]
        glob = [(a, w) for a, w in keep if w[0] != own]
        for group, sweep in ((loc, _param_sweep), (glob, _complex_sweep)):
            if not group:
                continue
            d = sweep(net, s, h, [w for _, w in group])
            for (a, _), dk in zip(group, d):
                rows.append(np.full(outs.size, a))
                cols.append(outs)
                vals.append(dk)
    if not rows:
        return SparseJacobian([], [], np.zeros((n, 0)), (D, D))
    return SparseJacobian(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals, -1), (D, D))


def _param_sweep(net, s, h: StateVector, perturb):
    """Complex-step derivatives of block s in node-local quantities.

    perturb holds (param name, flat index) pairs, or ("v", k) / ("pi", k)
    for the node's own target (production) or reach probability (choice).
    Such a quantity of node k only moves that node's price (production) or
    inclusive value (choice) and its own contribution to the summed
    demands or reach probabilities, so each perturbation re-evaluates a
    one-node block.  Returns (len(perturb), n, n_outputs).
    """
    from .network import choice_block, production_block

    layer = net.layers[s]
    n = h.pi[0].shape[0]
    n_a, n_b = net.widths[s + 1], net.widths[s]
    prod = net.kind == "production"
    n_in = layer.beta.shape[1]
    step = max(1, CHUNK_ELEMS // (n * max(n_in, 1) * 4))
    out = []
    for c0 in range(0, len(perturb), step):
        chunk = perturb[c0:c0 + step]
        P = len(chunk)
        node = np.array([j // n_in if name == "beta" else j for name, j in chunk])
        own = np.array([name in ("v", "pi") for name, _ in chunk])
        prm = {}
        for name in PARAM_NAMES:
            arr = getattr(layer, name)[node].astype(complex)  # (P, n_in) or (P,)
            for p, (nm, j) in enumerate(chunk):
                if nm == name:
                    if name == "beta":
                        arr[p, j % n_in] += 1j * CS_STEP
                    else:
                        arr[p] += 1j * CS_STEP
            arr = arr[:, None]  # one node per perturbation
            prm[name] = np.broadcast_to(arr[:, None], (P, n) + arr.shape[1:]).reshape((P * n,) + arr.shape[1:])
        mask = np.broadcast_to(layer.mask[node][:, None, None, :], (P, n, 1, n_in)).reshape(P * n, 1, n_in)
        prm["active"] = mask & (np.real(prm["beta"]) > 0)
        d = np.zeros((P, n, n_a + n_b))
        with np.errstate(all="ignore"):
            bump = np.where(own, 1j * CS_STEP, 0.0)[:, None]
            if prod:
                pi_in = np.tile(h.pi[s], (P, 1))
                v_t = (h.v[s + 1][:, node].T + bump).reshape(P * n, 1)
                price, dem, _ = production_block(pi_in, v_t, prm)
                d[np.arange(P), :, node] = (np.imag(price) / CS_STEP).reshape(P, n)
                d[:, :, n_a:] = (np.imag(dem) / CS_STEP).reshape(P, n, n_b)
            else:
                pi_par = (h.pi[s][:, node].T + bump).reshape(P * n, 1)
                v_ch = np.tile(h.v[s + 1], (P, 1))
                pi_ch, v_par = choice_block(pi_par, v_ch, prm)
                d[:, :, :n_a] = (np.imag(pi_ch) / CS_STEP).reshape(P, n, n_a)
                d[np.arange(P), :, n_a + node] = (np.imag(v_par) / CS_STEP).reshape(P, n)
        out.append(d)
    return np.concatenate(out, 0)


def jacobian_params(net: NetworkSpec, h: StateVector) -> SparseJacobian:
    """Y_theta with entries d upsilon_j / d theta_i over the free parameters."""
    widths = net.widths
    D = 2 * sum(widths)
    slots = net.theta_slots()
    n = h.pi[0].shape[0]
    rows, cols, vals = [], [], []
    for s in range(net.S):
        mine = [(i, name, j) for i, (ss, name, j) in enumerate(slots) if ss == s]
        if not mine:
            continue
        d = _param_sweep(net, s, h, [(name, j) for _, name, j in mine])
        _, outs = _block_io(widths, s)
        for (i, _, _), dk in zip(mine, d):
            rows.append(np.full(outs.size, i))
            cols.append(outs)
            vals.append(dk)
    if not rows:
        return SparseJacobian([], [], np.zeros((n, 0)), (0, D))
    return SparseJacobian(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals, -1), (len(slots), D))


# ---------------------------------------------------------------------------
# series, bounds and the gradient
# ---------------------------------------------------------------------------

def balance(J: SparseJacobian):
    """Diagonal similarity B = S^-1 J S that balances row and column norms.

    The truncated series is invariant under the similarity,
    sum_q J^q g = S sum_q B^q S^-1 g, but the spectral norm of B is usually
    far smaller than that of J when prices and quantities differ in scale.
    Returns (B, s) with s of shape (n, D).
    """
    from scipy.linalg import matrix_balance

    vals = J.vals if J.batched else J.vals[None]
    dense = SparseJacobian(J.rows, J.cols, vals, J.shape).toarray()
    s = np.ones((dense.shape[0], J.shape[0]))
    for k in range(dense.shape[0]):
        if np.any(dense[k]):
            _, (sk, _) = matrix_balance(dense[k], permute=False, separate=True)
            s[k] = sk
    bvals = vals * s[:, J.cols] / s[:, J.rows]
    return SparseJacobian(J.rows, J.cols, bvals, J.shape), s


def perron_scaling(J: SparseJacobian, margin: float = 0.05):
    """Diagonal similarity B = S^-1 J S whose max row sum is below r.

    With rho the spectral radius of |J| and r = rho + margin (1 - rho)
    (or rho (1 + margin) when rho >= 1), s = (r I - |J|)^-1 r 1 is positive
    and |J| s = r (s - 1) < r s, so ||B||_inf < r.  The matrix_balance
    scaling is applied first to keep the solve well conditioned.  Returns
    (B, s) like balance().
    """
    B0, s0 = balance(J)
    dense = np.abs(SparseJacobian(B0.rows, B0.cols, B0.vals if B0.batched else B0.vals[None], B0.shape).toarray())
    D = J.shape[0]
    s = s0.copy()
    for k in range(dense.shape[0]):
        A = dense[k]
        if not np.any(A):
            continue
        rho = float(np.max(np.abs(np.linalg.eigvals(A))))
        r = rho + margin * (1 - rho) if rho < 1 else rho * (1 + margin)
        v = np.linalg.solve(r * np.eye(D) - A, np.full(D, r))
        if np.all(np.isfinite(v)) and np.all(v > 0):
            s[k] = s0[k] * v
    vals = J.vals if J.batched else J.vals[None]
    bvals = vals * s[:, J.cols] / s[:, J.rows]
    return SparseJacobian(J.rows, J.cols, bvals, J.shape), s


def neumann_apply(J: SparseJacobian, g, Q: int):
    """sum_{q=0}^{Q} J^q g by repeated matrix-vector products."""
    if Q < 0:
        raise ValueError("truncation order must be nonnegative")
    g = np.asarray(g, dtype=float)
    term = g.copy()
    total = g.copy()
    for _ in range(Q):
        term = J.matvec(term)
        total = total + term
    return total


def direct_solve(J: SparseJacobian, g):
    """Solve (I - J) x = g row by row with a sparse LU factorisation."""
    g = np.atleast_2d(np.asarray(g, dtype=float))
    D = J.shape[0]
    out = np.empty_like(g)
    I = sp.identity(D, format="csc")
    for k in range(g.shape[0]):
        A = (I - J.to_scipy(k if J.batched else None)).tocsc()
        out[k] = spla.spsolve(A, g[k])
    return out


def spectral_bound(J: SparseJacobian, iters: int = 100, method: str = "norm", per_row: bool = False, seed: int = 0):
    """Power-iteration estimate of the spectral norm ||J||_2 (or spectral radius).

    ``method="norm"`` iterates on J^T J, giving the norm that bounds every
    power ||J^q|| <= lambda^q.  ``method="inf"`` is the exact max absolute
    row sum, the matching norm for perron_scaling.  ``method="radius"`` reports ||J^k x||^{1/k}
    for the last iterate, which tends to zero for nilpotent matrices.
    """
    if iters < 1:
        raise ValueError("iters must be at least 1")
    n = J.vals.shape[0] if J.batched else 1
    D = J.shape[0]
    rng = np.random.default_rng(seed)
    x = 1.0 + 0.1 * rng.standard_normal((n, D))
    x /= np.linalg.norm(x, axis=-1, keepdims=True)
    vals = J.vals if J.batched else J.vals[None]
    Jb = SparseJacobian(J.rows, J.cols, vals, J.shape)
    if method == "norm":
        lam = np.zeros(n)
        for _ in range(iters):
            y = Jb.rmatvec(x)           # J^T acting as the map x -> x J
            z = Jb.matvec(y)
            nz = np.linalg.norm(z, axis=-1)
            lam = np.sqrt(nz)
            safe = np.where(nz > 0, nz, 1.0)
            x = np.where(nz[:, None] > 0, z / safe[:, None], x)
        # final Rayleigh-type refinement: ||J^T x|| for unit x
        lam = np.maximum(lam, np.linalg.norm(Jb.rmatvec(x), axis=-1))
    elif method == "inf":
        absrow = SparseJacobian(Jb.rows, Jb.cols, np.abs(Jb.vals), Jb.shape)
        lam = np.max(absrow.matvec(np.ones((n, Jb.shape[1]))), axis=-1)
    elif method == "radius":
        logn = np.zeros(n)
        for _ in range(iters):
            y = Jb.matvec(x)
            ny = np.linalg.norm(y, axis=-1)
            with np.errstate(divide="ignore"):
                logn = logn + np.log(ny)
            x = np.where(ny[:, None] > 0, y / np.where(ny > 0, ny, 1.0)[:, None], 0.0)
        lam = np.exp(logn / iters)
    else:
        raise ValueError(f"unknown method {method!r}")
    return lam if per_row else float(np.max(lam))


def choose_Q(lam: float, tol: float = 1e-8, cap: int = Q_CAP) -> int:
    """Smallest Q with lam^(Q+1) / (1 - lam) <= tol, capped."""
    if lam <= 0:
        return 0
    if lam >= 1 - DIVERGENCE_MARGIN:
        raise NeumannDivergence(f"spectral bound {lam:.6g} too close to one")
    q = int(np.ceil(np.log(tol * (1 - lam)) / np.log(lam) - 1))
    q = max(q, 0)
    # guard against rounding at the boundary
    while q > 0 and lam ** q / (1 - lam) <= tol:
        q -= 1
    while lam ** (q + 1) / (1 - lam) > tol:
        q += 1
    return min(q, cap)


def acyclic_order(net: NetworkSpec) -> int | None:
    """Order Q at which the series is exact when Y_h is nilpotent, else None.

    For choice nets with clamped leaves and root the longest dependency path
    runs v^(S-1) -> ... -> v^(1) -> pi^(1) -> ... -> pi^(S), which has 2S-2
    edges.  Acyclic production nets have the same structure mirrored.
    """
    from .network import is_acyclic
    if not is_acyclic(net):
        return None
    return max(2 * net.S - 2, 0)


@dataclass
class GradientReport:
    grad: np.ndarray
    Q: int
    lam: float | None
    method: str


def implicit_gradient(net: NetworkSpec, h: StateVector, grad_h, Q: int | None = None, tol: float = 1e-8,
                      return_report: bool = False):
    """Gradient of a loss over the free parameters, summed over observations.

    grad_h has shape (n, D) in the flat StateVector layout.  With Q=None the
    order is exact for acyclic nets and otherwise picked from the spectral
    bound; a bound too close to one switches to a direct sparse solve.
    """
    grad_h = np.atleast_2d(np.asarray(grad_h, dtype=float))
    if net.n_free() == 0:
        g = np.zeros(0)
        return (g, GradientReport(g, 0, None, "none")) if return_report else g
    Jh = jacobian_states(net, h)
    Jt = jacobian_params(net, h)
    lam = None
    method = "neumann"
    if Q is None:
        Q = acyclic_order(net)
        if Q is None:
            # any operator norm bounds the remainder; take the smaller certificate
            lam = min(spectral_bound(balance(Jh)[0]), spectral_bound(perron_scaling(Jh)[0], method="inf"))
            try:
                Q = choose_Q(lam, tol)
            except NeumannDivergence:
                method = "direct"
    if method == "direct":
        r = direct_solve(Jh, grad_h)
        Q = -1
    else:
        r = neumann_apply(Jh, grad_h, Q)
    g = Jt.matvec(r).sum(0)
    if return_report:
        return g, GradientReport(g, Q, lam, method)
    return g
