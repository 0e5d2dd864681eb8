"""Network builders and complexity formulas.

Constructive builders:
  build_two_stage_production  polytope technology from frontier support points
  build_cnl_grid_approximator  piecewise-linear generating function on a contour grid
Restricted sieves:
  build_sp_ces   sparse stage technologies, blocks of widths (3 d*, Q, 1)
  build_4l_ces   separable stage technologies, blocks of widths (Q, 1, Q, 1)
  build_ces_sieve  plain one-hidden-layer CES sieve used by the rate experiment
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from . import ces
from .network import Layer, NetworkSpec, validate

ALL_FROZEN = {"beta": True, "beta0": True, "rho": True, "tau": True}


def _frozen(**kw):
    fr = {"beta": False, "beta0": True, "rho": False, "tau": False}
    fr.update(kw)
    return fr


def _init_weights(rng, mask, rho):
    """Jittered weights scaled so each node maps a unit input vector to about 1."""
    mask = np.asarray(mask, bool)
    n = np.maximum(mask.sum(1), 1).astype(float)
    rho = np.broadcast_to(np.asarray(rho, float), n.shape)
    with np.errstate(divide="ignore"):
        scale = np.where(np.isfinite(rho), n ** (-1.0 / rho), 1.0)
    return np.where(mask, rng.uniform(0.5, 1.5, mask.shape) * scale[:, None], 0.0)


def _init_rho(rng, n, lo=(-1.5, -0.3), hi=(0.3, 0.8)):
    """Curvatures drawn on both sides of zero, never near the singular value."""
    neg = rng.random(n) < 0.5
    return np.where(neg, rng.uniform(*lo, n), rng.uniform(*hi, n))


def _checked(net):
    diag = validate(net)
    if diag:
        raise RuntimeError("builder produced an invalid network: " + "; ".join(diag))
    return net


# ---------------------------------------------------------------------------
# two-stage polytope technology
# ---------------------------------------------------------------------------

def build_two_stage_production(support_points) -> NetworkSpec:
    """Two-stage technology whose frontier is spanned by the support points.

    Each point (y_q, w_q) gets M Leontief nodes l = q M + m in layer 1 with
    weights y_qm / (w_ql / M) on the basic inputs and M y_qm on an extra
    capacity good fixed at 1.  Layer 2 sums the nodes of output m.  Giving
    node (q, m) the inputs lam_q w_q / M and capacity lam_q / M yields
    lam_q y_qm, so every combination sum lam_q (y_q, w_q) with sum lam_q <= 1
    is feasible.  For M > 1 the per-output shares may differ, so the set can
    be larger than the convex hull.
    """
    pts = [(np.atleast_1d(np.asarray(y, float)), np.atleast_1d(np.asarray(w, float)))
           for y, w in support_points]
    if not pts:
        raise ValueError("need at least one support point")
    M, K = pts[0][0].size, pts[0][1].size
    for y, w in pts:
        if y.size != M or w.size != K:
            raise ValueError("support points have inconsistent dimensions")
        if np.any(y <= 0) or np.any(w <= 0) or not (np.all(np.isfinite(y)) and np.all(np.isfinite(w))):
            raise ValueError("support points must be strictly positive")
    Q = len(pts)
    beta1 = np.zeros((M * Q, K + 1))
    for q, (y, w) in enumerate(pts):
        for m in range(M):
            beta1[q * M + m, :K] = y[m] / (w / M)
            beta1[q * M + m, K] = M * y[m]
    l1 = Layer.create(M * Q, K + 1, beta=beta1, rho=ces.LEONTIEF, tau=1.0,
                      frozen=_frozen(rho=True, tau=True))
    pattern = np.zeros((M, M * Q))
    for q in range(Q):
        for m in range(M):
            pattern[m, q * M + m] = 1.0
    l2 = Layer.create(M, M * Q, beta=pattern, mask=pattern > 0, rho=1.0, tau=1.0, frozen=ALL_FROZEN)
    net = NetworkSpec(kind="production", widths=[K + 1, M * Q, M], layers=[l1, l2],
                      io={"fixed_inputs": [[K, 1.0]], "builder": "two_stage"})
    return _checked(net)


def support_points_from_data(x, y, max_points: int | None = None):
    """Non-dominated observations as frontier support points.

    An observation is dropped when another uses no more of every input and
    produces at least as much of every output, with one strict inequality.
    With ``max_points`` the survivors with the largest output per unit of
    input (sum norms) are kept.
    """
    x = np.atleast_2d(np.asarray(x, float))
    y = np.asarray(y, float).reshape(x.shape[0], -1)
    ok = np.all(x > 0, 1) & np.all(y > 0, 1)
    x, y = x[ok], y[ok]
    keep = []
    for i in range(x.shape[0]):
        le = np.all(x <= x[i], 1) & np.all(y >= y[i], 1)
        strict = np.any(x < x[i], 1) | np.any(y > y[i], 1)
        if not np.any(le & strict):
            keep.append(i)
    keep = np.array(keep, dtype=int)
    if max_points is not None and keep.size > max_points:
        score = y[keep].sum(1) / x[keep].sum(1)
        keep = keep[np.sort(np.argsort(-score, kind="stable")[:max_points])]
    return [(y[i], x[i]) for i in keep]


def grid_support_points(f, lo, hi, per_axis: int):
    """Support points (f(w), w) on a regular grid over the box [lo, hi]."""
    lo, hi = np.atleast_1d(np.asarray(lo, float)), np.atleast_1d(np.asarray(hi, float))
    axes = [np.linspace(a, b, per_axis) for a, b in zip(lo, hi)]
    return [(np.atleast_1d(f(np.array(w))), np.array(w)) for w in itertools.product(*axes)]


# ---------------------------------------------------------------------------
# generating-function approximator
# ---------------------------------------------------------------------------

def simplex_lattice(M: int, L: int):
    """Interior lattice directions k / L with k >= 1 integer and sum k = L.

    Directions at resolution L reappear unchanged (bitwise) at resolution 2L.
    """
    if L < M:
        raise ValueError(f"resolution L={L} must be at least M={M}")
    pts = [k for k in itertools.product(range(1, L + 1), repeat=M - 1) if sum(k) <= L - 1]
    out = np.array([list(k) + [L - sum(k)] for k in pts], dtype=float)
    return out / L


def _call(F0, w):
    return float(np.asarray(F0(np.asarray(w, float))).reshape(()))


def _gradient(F0, c, rel=1e-3):
    g = np.empty(c.size)
    for j in range(c.size):
        h = rel * c[j]
        e = np.zeros(c.size)
        e[j] = h
        g[j] = (8 * (_call(F0, c + e) - _call(F0, c - e)) - (_call(F0, c + 2 * e) - _call(F0, c - 2 * e))) / (12 * h)
    return g


def check_monotone(F0, M: int, lo=0.25, hi=4.0, n: int = 200, seed: int = 0):
    """Sample pairs w <= w' in the box and require F0(w) <= F0(w')."""
    rng = np.random.default_rng(seed)
    for _ in range(n):
        w = rng.uniform(lo, hi, M)
        w2 = w + rng.uniform(0, hi - lo, M) * (rng.random(M) < 0.5)
        a, b = _call(F0, w), _call(F0, w2)
        if not (a > 0 and np.isfinite(a)):
            raise ValueError(f"generating oracle is not positive at {w}")
        if b < a - 1e-10 * abs(a):
            raise ValueError(f"generating oracle decreases from {w} to {w2}")


def build_cnl_grid_approximator(F0, M: int, L: int, variant: str = "tangent", dense: bool = False,
                                grad_F0=None, check: bool = True) -> NetworkSpec:
    """Choice network for a degree-1 homogeneous generating function F0.

    The anchors c_k are the lattice directions k / L rescaled onto F0 = 1.

    variant "tangent" (default): root max over linear nests with weights
    grad F0(c_k).  By convexity and Euler's identity each nest is a
    supporting plane, so F_hat <= F0 everywhere, with equality at the anchors.

    variant "vertex": max nodes with weights 1 / c_kj, averaging nests over
    M-subsets of them (tessellation-adjacent subsets, or all subsets with
    ``dense``), and a max root.  Here every max node satisfies F_k >= F0,
    so this variant over-approximates.
    """
    if M < 1:
        raise ValueError("M must be positive")
    if check:
        check_monotone(F0, M)
    if M == 1:
        c = 1.0 / _call(F0, np.ones(1))
        l0 = Layer.create(1, 1, beta=[[1.0 / c]], rho=1.0, tau=1.0, frozen=ALL_FROZEN)
        return _checked(NetworkSpec(kind="choice", widths=[1, 1], layers=[l0], io={"builder": "cnl_grid"}))
    dirs = simplex_lattice(M, L)
    anchors = np.array([d / _call(F0, d) for d in dirs])
    K = anchors.shape[0]
    if variant == "tangent":
        grad = grad_F0 or (lambda c: _gradient(F0, c))
        B = np.array([np.maximum(np.asarray(grad(c), float), 0.0) for c in anchors])
        root = Layer.create(1, K, rho=np.inf, tau=1.0, frozen=ALL_FROZEN)
        nests = Layer.create(K, M, beta=B, mask=B > 0, rho=1.0, tau=1.0,
                             frozen=_frozen(rho=True, tau=True))
        net = NetworkSpec(kind="choice", widths=[1, K, M], layers=[root, nests],
                          io={"builder": "cnl_grid", "variant": "tangent", "L": L})
        return _checked(net)
    if variant != "vertex":
        raise ValueError(f"unknown variant {variant!r}")
    subsets = _all_subsets(K, M) if dense else _adjacent_subsets(dirs, L)
    avg = np.zeros((len(subsets), K))
    for i, P in enumerate(subsets):
        avg[i, list(P)] = 1.0 / M
    root = Layer.create(1, len(subsets), rho=np.inf, tau=1.0, frozen=ALL_FROZEN)
    l1 = Layer.create(len(subsets), K, beta=avg, mask=avg > 0, rho=1.0, tau=1.0, frozen=ALL_FROZEN)
    l2 = Layer.create(K, M, beta=1.0 / anchors, rho=np.inf, tau=1.0, frozen=_frozen(rho=True, tau=True))
    net = NetworkSpec(kind="choice", widths=[1, len(subsets), K, M], layers=[root, l1, l2],
                      io={"builder": "cnl_grid", "variant": "vertex", "L": L, "dense": bool(dense)})
    return _checked(net)


def _all_subsets(K, M):
    if math.comb(K, M) > 200_000:
        raise ValueError("dense subset layer too large; use the sparse variant")
    return list(itertools.combinations(range(K), M))


def _adjacent_subsets(dirs, L):
    M = dirs.shape[1]
    if M == 2:
        order = np.argsort(dirs[:, 0])
        return [(int(order[i]), int(order[i + 1])) for i in range(len(order) - 1)] or [(0,)]
    from scipy.spatial import Delaunay

    tri = Delaunay(dirs[:, :-1])
    return [tuple(int(i) for i in simplex) for simplex in tri.simplices]


# ---------------------------------------------------------------------------
# restricted sieves
# ---------------------------------------------------------------------------

def _passthrough(n, n_in, idx):
    """n frozen identity nodes copying the goods idx of the previous layer."""
    b = np.zeros((n, n_in))
    b[np.arange(n), idx] = 1.0
    return b


def _stack(parts):
    """Concatenate (beta, mask, rho, tau, frozen) row blocks into one Layer."""
    beta = np.vstack([p[0] for p in parts])
    mask = np.vstack([p[1] for p in parts])
    rho = np.concatenate([np.broadcast_to(p[2], (p[0].shape[0],)) for p in parts])
    tau = np.concatenate([np.broadcast_to(p[3], (p[0].shape[0],)) for p in parts])
    layer = Layer.create(beta.shape[0], beta.shape[1], beta=beta, mask=mask, rho=rho, tau=tau)
    for name in ("beta", "beta0", "rho", "tau"):
        blocks = []
        for b, *_, fr in parts:
            shape = b.shape if name == "beta" else b.shape[:1]
            blocks.append(np.broadcast_to(np.asarray(fr[name], bool), shape))
        layer.frozen[name] = np.concatenate(blocks)
    return layer


def _block(beta, mask, rho, tau, frozen):
    return (beta, mask, np.asarray(rho, float), np.asarray(tau, float), frozen)


def _carry(n_in, idx):
    b = _passthrough(len(idx), n_in, idx)
    return _block(b, b > 0, 1.0, 1.0, ALL_FROZEN)


def build_sp_ces(S: int, d_star: int, Q: int, input_dim: int, seed: int = 0,
                 rho0: float | None = None) -> NetworkSpec:
    """Sparse CES sieve: one three-layer block (3 d*, Q, 1) per stage.

    Stage 1 reads raw inputs 0..d*-1.  Stage s > 1 reads the previous stage
    output and the next d*-1 raw inputs (cyclically); raw inputs are carried
    forward by frozen identity nodes.  Bottom nodes use d* of the stage
    inputs with beta, rho, tau free; middle nodes read d* bottom nodes
    (cyclic window) with tau frozen to 1; the top node is a frozen sum.
    """
    if not (S >= 1 and Q >= 1 and 1 <= d_star <= input_dim):
        raise ValueError("need S >= 1, Q >= 1 and 1 <= d_star <= input_dim")
    rng = np.random.default_rng(seed)
    D = input_dim
    raw_next = d_star
    layers, widths = [], [D]
    prev_out = None  # index of the previous stage output in the current layer
    for s in range(S):
        last = s == S - 1
        if s == 0:
            stage_in = list(range(d_star))
        else:
            extra = [(raw_next + i) % D for i in range(d_star - 1)]
            raw_next += d_star - 1
            stage_in = [prev_out] + extra
        n_in = widths[-1]
        carry = [] if last else list(range(D))
        # bottom layer: 3 d* nodes over the stage inputs
        nb = 3 * d_star
        mb = np.zeros((nb, n_in), bool)
        mb[:, stage_in] = True
        rb = _init_rho(rng, nb) if rho0 is None else np.full(nb, rho0)
        bb = _init_weights(rng, mb, rb)
        parts = [_block(bb, mb, rb, 1.0, _frozen())]
        if carry:
            parts.append(_carry(n_in, carry))
        layers.append(_stack(parts))
        widths.append(nb + len(carry))
        # middle layer: Q nodes over a cyclic window of d* bottom nodes
        n_in = widths[-1]
        mm = np.zeros((Q, n_in), bool)
        for q in range(Q):
            mm[q, [(q + i) % nb for i in range(d_star)]] = True
        rm = _init_rho(rng, Q) if rho0 is None else np.full(Q, rho0)
        bm = _init_weights(rng, mm, rm)
        parts = [_block(bm, mm, rm, 1.0, _frozen(tau=True))]
        if carry:
            parts.append(_carry(n_in, [nb + i for i in range(D)]))
        layers.append(_stack(parts))
        widths.append(Q + len(carry))
        # top layer: frozen linear sum of the middle nodes
        n_in = widths[-1]
        mt = np.zeros((1, n_in), bool)
        mt[0, :Q] = True
        parts = [_block(mt.astype(float) / Q, mt, 1.0, 1.0, ALL_FROZEN)]
        if carry:
            parts.append(_carry(n_in, [Q + i for i in range(D)]))
        layers.append(_stack(parts))
        widths.append(1 + len(carry))
        if carry:
            # reorder so raw carries come first, stage output last
            L = layers[-1]
            order = list(range(1, 1 + D)) + [0]
            _permute_rows(L, order)
            prev_out = D
    net = NetworkSpec(kind="production", widths=widths, layers=layers,
                      io={"builder": "sp_ces", "S": S, "d_star": d_star, "Q": Q})
    return _checked(net)


def _permute_rows(layer, order):
    for name in ("beta", "mask", "beta0", "rho", "tau"):
        setattr(layer, name, getattr(layer, name)[order])
    for name in layer.frozen:
        layer.frozen[name] = layer.frozen[name][order]


def build_4l_ces(S: int, input_dim: int, Q: int, modules: int = 1, seed: int = 0,
                 rho0: float | None = None) -> NetworkSpec:
    """Separable CES sieve: self-contained four-layer modules (Q, 1, Q, 1).

    Each stage before the last holds ``modules`` modules, the last stage one.
    Every module reads all outputs of the previous stage (the raw inputs for
    stage 1).  Layer 1: Q nodes, beta and rho free, tau = 1.  Layer 2: one
    linear node with free beta.  Layer 3: Q nodes on that single good, beta
    and rho free, tau = 1.  Layer 4: linear with free beta.
    """
    if not (S >= 1 and Q >= 1 and input_dim >= 1 and modules >= 1):
        raise ValueError("need S, Q, input_dim, modules >= 1")
    rng = np.random.default_rng(seed)
    widths, layers = [input_dim], []
    for s in range(S):
        nmod = 1 if s == S - 1 else modules
        n_in = widths[-1]
        # layer 1: every module sees all n_in goods
        r1 = _init_rho(rng, nmod * Q) if rho0 is None else np.full(nmod * Q, rho0)
        b = _init_weights(rng, np.ones((nmod * Q, n_in), bool), r1)
        layers.append(Layer.create(nmod * Q, n_in, beta=b, rho=r1, tau=1.0, frozen=_frozen(tau=True)))
        widths.append(nmod * Q)
        # layer 2: module sums
        m2 = np.kron(np.eye(nmod), np.ones((1, Q))) > 0
        layers.append(Layer.create(nmod, nmod * Q, beta=m2 / Q, mask=m2, rho=1.0, tau=1.0,
                                   frozen=_frozen(rho=True, tau=True)))
        widths.append(nmod)
        # layer 3: Q nodes on the module's single good
        m3 = np.kron(np.eye(nmod), np.ones((Q, 1))) > 0
        r3 = _init_rho(rng, nmod * Q) if rho0 is None else np.full(nmod * Q, rho0)
        b3 = _init_weights(rng, m3, r3)
        layers.append(Layer.create(nmod * Q, nmod, beta=b3, mask=m3, rho=r3, tau=1.0,
                                   frozen=_frozen(tau=True)))
        widths.append(nmod * Q)
        layers.append(Layer.create(nmod, nmod * Q, beta=m2 / Q, mask=m2, rho=1.0, tau=1.0,
                                   frozen=_frozen(rho=True, tau=True)))
        widths.append(nmod)
    net = NetworkSpec(kind="production", widths=widths, layers=layers,
                      io={"builder": "4l_ces", "S": S, "Q": Q, "modules": modules})
    return _checked(net)


def build_ces_sieve(K: int, Q: int, M: int = 1, seed: int = 0, rho0: float = 0.5) -> NetworkSpec:
    """Inputs -> Q CES nodes (beta, rho free; tau = 1) -> M CES outputs (beta, rho, tau free)."""
    if not (K >= 1 and Q >= 1 and M >= 1):
        raise ValueError("need K, Q, M >= 1")
    rng = np.random.default_rng(seed)
    r1 = _init_rho(rng, Q)
    l1 = Layer.create(Q, K, beta=_init_weights(rng, np.ones((Q, K), bool), r1), rho=r1,
                      tau=1.0, frozen=_frozen(tau=True))
    l2 = Layer.create(M, Q, beta=_init_weights(rng, np.ones((M, Q), bool), rho0), rho=rho0, tau=1.0,
                      frozen=_frozen())
    net = NetworkSpec(kind="production", widths=[K, Q, M], layers=[l1, l2],
                      io={"builder": "ces_sieve", "Q": Q})
    return _checked(net)


def widen_ces_sieve(net: NetworkSpec, Q: int, seed: int = 0, weight: float = 1e-3) -> NetworkSpec:
    """Embed a fitted ces_sieve in a wider one (the sieve spaces are nested).

    The first hidden nodes and the output block are copied; the new nodes
    get fresh seeded curvatures and enter the outputs with a small weight
    (``weight`` times the mean existing output weight), so the wider net
    starts close to the fitted one and can still grow the new nodes.
    """
    old = net.widths[1]
    if net.S != 2 or net.io.get("builder") != "ces_sieve":
        raise ValueError("widen_ces_sieve needs a network built by build_ces_sieve")
    if Q < old:
        raise ValueError(f"cannot narrow a width-{old} sieve to {Q}")
    K, M = net.widths[0], net.widths[2]
    wide = build_ces_sieve(K, Q, M, seed=seed)
    a, b = wide.layers
    pa, pb = net.layers
    a.beta[:old], a.rho[:old] = pa.beta, pa.rho
    b.beta[:, :old] = pb.beta
    b.beta[:, old:] = weight * pb.beta.mean(1, keepdims=True)
    b.rho[:], b.tau[:], b.beta0[:] = pb.rho, pb.tau, pb.beta0
    return _checked(wide)


def build_from_widths(kind: str, widths, seed: int = 0, rho0: float | None = None) -> NetworkSpec:
    """Fully connected network with seeded weights.

    production: widths K_0 (inputs) .. K_S (outputs); rho starts at rho0
    (default 0.5), tau at 1 frozen except in the top block.
    choice: widths 1 (root) .. M (alternatives); rho starts at rho0
    (default 1.5), tau frozen at 1.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ValueError("need at least two positive widths")
    rng = np.random.default_rng(seed)
    S = len(widths) - 1
    layers = []
    if kind == "production":
        r = 0.5 if rho0 is None else rho0
        for s in range(S):
            top = s == S - 1
            layers.append(Layer.create(widths[s + 1], widths[s],
                                       beta=_init_weights(rng, np.ones((widths[s + 1], widths[s]), bool), r),
                                       rho=r, tau=1.0, frozen=_frozen(tau=not top)))
    elif kind == "choice":
        if widths[0] != 1:
            raise ValueError("a choice network has a single root")
        r = 1.5 if rho0 is None else rho0
        for s in range(S):
            layers.append(Layer.create(widths[s], widths[s + 1],
                                       beta=rng.uniform(0.5, 1.5, (widths[s], widths[s + 1])),
                                       rho=r, tau=1.0, frozen=_frozen(tau=True)))
    else:
        raise ValueError(f"unknown kind {kind!r}")
    return _checked(NetworkSpec(kind=kind, widths=widths, layers=layers, io={"builder": "widths"}))


# ---------------------------------------------------------------------------
# complexity formulas
# ---------------------------------------------------------------------------

def param_count(net: NetworkSpec) -> int:
    """Number of free (unfrozen, unmasked, finite) parameters."""
    return net.n_free()


def vc_bound(W: int) -> float:
    return 2.0 * W * math.log(2.0 * math.e)


def sieve_width(n: int, d: int) -> int:
    """Sieve width round((n / ln n)^(d / (4 + d)))."""
    if n < 3 or d < 1:
        raise ValueError("need n >= 3 and d >= 1")
    return int(round((n / math.log(n)) ** (d / (4.0 + d))))
