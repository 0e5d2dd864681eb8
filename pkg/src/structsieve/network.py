"""Network topology, parameter storage and the equilibrium state solver.

A network has layers 0..S of goods/nests with widths K_0..K_S and one
parameter block per pair of adjacent layers.

* production: ``layers[s]`` holds the nodes of layer s+1, each aggregating
  goods of layer s.  Layer 0 are the basic inputs, layer S the outputs.
* choice: ``layers[s]`` holds the nests of layer s, each aggregating the
  children of layer s+1.  Layer 0 is the single root, layer S are the
  alternatives.

In both cases block s couples (pi^(s), v^(s+1)) to (pi^(s+1), v^(s)), which
is what the implicit-gradient code relies on.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import ces, cnl

FORMAT_VERSION = 1
PARAM_NAMES = ("beta", "beta0", "rho", "tau")


BLOWUP = 1e100


class SolveError(RuntimeError):
    """Equilibrium solve failed (non-convergence or persistent infeasibility)."""

    def __init__(self, msg, residual=None, rows=None):
        super().__init__(msg)
        self.residual = residual
        self.rows = rows


def _fit_shape(a, dtype, n_out, n_in):
    # scalars broadcast; anything else must hold exactly n_out * n_in entries
    a = np.asarray(a, dtype=dtype)
    if a.size == 1:
        return np.full((n_out, n_in), a.ravel()[0], dtype=dtype)
    return a.reshape(n_out, n_in).copy()


@dataclass
class Layer:
    beta: np.ndarray
    mask: np.ndarray
    beta0: np.ndarray
    rho: np.ndarray
    tau: np.ndarray
    frozen: dict = field(default_factory=dict)

    @classmethod
    def create(cls, n_out, n_in, beta=None, mask=None, beta0=0.0, rho=1.0, tau=1.0, frozen=None):
        beta = np.ones((n_out, n_in)) if beta is None else _fit_shape(beta, float, n_out, n_in)
        mask = np.ones((n_out, n_in), bool) if mask is None else _fit_shape(mask, bool, n_out, n_in)
        beta = np.where(mask, beta, 0.0)
        layer = cls(
            beta=beta, mask=mask,
            beta0=np.broadcast_to(np.asarray(beta0, float), (n_out,)).copy(),
            rho=np.broadcast_to(np.asarray(rho, float), (n_out,)).copy(),
            tau=np.broadcast_to(np.asarray(tau, float), (n_out,)).copy(),
        )
        fr = {k: np.zeros(getattr(layer, k).shape, bool) for k in PARAM_NAMES}
        for k, val in (frozen or {}).items():
            fr[k] = np.broadcast_to(np.asarray(val, bool), fr[k].shape).copy()
        layer.frozen = fr
        return layer

    @property
    def shape(self):
        return self.beta.shape

    def free_mask(self, name):
        val = getattr(self, name)
        free = ~self.frozen[name] & np.isfinite(val)
        if name == "beta":
            free &= self.mask
        return free


@dataclass
class NetworkSpec:
    kind: str
    widths: list
    layers: list
    io: dict = field(default_factory=dict)

    @property
    def S(self):
        return len(self.layers)

    def copy(self):
        return copy.deepcopy(self)

    # -- free parameters -------------------------------------------------
    def theta_slots(self):
        """(layer, name, flat index) for every free parameter, in theta order."""
        slots = []
        for s, layer in enumerate(self.layers):
            for name in PARAM_NAMES:
                for j in np.flatnonzero(layer.free_mask(name)):
                    slots.append((s, name, int(j)))
        return slots

    def n_free(self):
        return sum(int(l.free_mask(n).sum()) for l in self.layers for n in PARAM_NAMES)

    def get_theta(self):
        out = [getattr(l, n).ravel()[l.free_mask(n).ravel()] for l in self.layers for n in PARAM_NAMES]
        return np.concatenate(out) if out else np.zeros(0)

    def with_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        net = self.copy()
        pos = 0
        for l_new, l_old in zip(net.layers, self.layers):
            for n in PARAM_NAMES:
                fm = l_old.free_mask(n)
                k = int(fm.sum())
                arr = getattr(l_new, n)
                arr[fm] = theta[pos:pos + k]
                pos += k
        if pos != theta.size:
            raise ValueError(f"theta has {theta.size} entries, network has {pos} free parameters")
        return net

    # -- io helpers --------------------------------------------------------
    def fixed_inputs(self):
        return {int(i): float(v) for i, v in self.io.get("fixed_inputs", [])}

    def expand_inputs(self, x):
        """Insert fixed (non-data) inputs such as a capacity good into x."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        K0 = self.widths[0]
        fixed = self.fixed_inputs()
        if x.shape[1] == K0:
            return x
        if x.shape[1] != K0 - len(fixed):
            raise ValueError(f"expected {K0 - len(fixed)} input columns, got {x.shape[1]}")
        out = np.empty((x.shape[0], K0))
        data_cols = [k for k in range(K0) if k not in fixed]
        out[:, data_cols] = x
        for k, v in fixed.items():
            out[:, k] = v
        return out

    def expand_prices(self, p, n):
        """Full price matrix with NaN marking latent prices."""
        K0 = self.widths[0]
        fixed = self.fixed_inputs()
        if p is None:
            return np.full((n, K0), np.nan)
        p = np.atleast_2d(np.asarray(p, dtype=float))
        if p.shape[1] == K0:
            out = p.copy()
        elif p.shape[1] == K0 - len(fixed):
            out = np.full((p.shape[0], K0), np.nan)
            out[:, [k for k in range(K0) if k not in fixed]] = p
        else:
            raise ValueError(f"price matrix has {p.shape[1]} columns")
        for k in fixed:
            out[:, k] = np.nan
        return np.broadcast_to(out, (n, K0)).copy()


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate(net: NetworkSpec) -> list:
    """Full list of invariant violations; an empty list means the net is valid."""
    diag = []
    if net.kind not in ("production", "choice"):
        diag.append(f"unknown kind {net.kind!r}")
    if len(net.widths) != net.S + 1:
        diag.append(f"{len(net.widths)} widths for {net.S} parameter blocks")
        return diag
    if any(int(w) < 1 for w in net.widths):
        diag.append("empty layer")
    for s, layer in enumerate(net.layers):
        if net.kind == "choice":
            want = (net.widths[s], net.widths[s + 1])
        else:
            want = (net.widths[s + 1], net.widths[s])
        if layer.beta.shape != want:
            diag.append(f"block {s}: beta shape {layer.beta.shape}, expected {want}")
            continue
        if layer.mask.shape != want:
            diag.append(f"block {s}: mask shape mismatch")
        for n in ("beta0", "rho", "tau"):
            if getattr(layer, n).shape != (want[0],):
                diag.append(f"block {s}: {n} shape mismatch")
        for n in PARAM_NAMES:
            if layer.frozen.get(n) is None or layer.frozen[n].shape != getattr(layer, n).shape:
                diag.append(f"block {s}: frozen mask for {n} missing or misshaped")
        if np.any(layer.beta < 0) or np.any(layer.beta0 < 0):
            diag.append(f"block {s}: negative weight")
        if np.any((layer.beta != 0) & ~layer.mask):
            diag.append(f"block {s}: nonzero weight outside the sparsity mask")
        active = layer.mask & (layer.beta > 0)
        if np.any(active.sum(1) == 0):
            diag.append(f"block {s}: node without inputs")
        if not np.all(layer.tau > 0):
            diag.append(f"block {s}: tau must be positive")
        if np.any(np.isnan(layer.rho)) or np.any(np.isnan(layer.beta)):
            diag.append(f"block {s}: NaN parameter")
        if net.kind == "production":
            if np.any(layer.rho > 1):
                diag.append(f"block {s}: convexity bound violated (rho > 1)")
            if np.any(layer.tau > 1):
                diag.append(f"block {s}: increasing returns (tau > 1)")
        elif net.kind == "choice":
            if np.any(layer.rho < 1):
                diag.append(f"block {s}: nesting coefficient below 1")
            if np.any(active.sum(0) == 0):
                diag.append(f"block {s}: child not covered by any nest")
            if np.ptp(layer.tau) > 0:
                diag.append(f"block {s}: tau differs within a layer")
    if net.kind == "choice" and net.widths[0] != 1:
        diag.append("multiple roots")
    for k, v in net.fixed_inputs().items():
        if not 0 <= k < net.widths[0]:
            diag.append(f"fixed input index {k} out of range")
        if not v > 0:
            diag.append(f"fixed input {k} must be positive")
    return diag


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _enc(x):
    if isinstance(x, np.ndarray):
        if x.dtype == bool:
            return _enc(x.astype(int).tolist())
        return _enc(x.tolist())
    if isinstance(x, list):
        return [_enc(v) for v in x]
    if isinstance(x, float):
        if np.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return x


def _dec(x):
    if isinstance(x, list):
        return [_dec(v) for v in x]
    if x == "inf":
        return np.inf
    if x == "-inf":
        return -np.inf
    return x


def to_dict(net: NetworkSpec) -> dict:
    return {
        "version": FORMAT_VERSION,
        "kind": net.kind,
        "widths": [int(w) for w in net.widths],
        "io": net.io,
        "layers": [
            {
                "beta": _enc(l.beta), "mask": _enc(l.mask), "beta0": _enc(l.beta0),
                "rho": _enc(l.rho), "tau": _enc(l.tau),
                "frozen": {n: _enc(l.frozen[n]) for n in PARAM_NAMES},
            }
            for l in net.layers
        ],
    }


def from_dict(d: dict) -> NetworkSpec:
    if d.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported network format version {d.get('version')!r}")
    layers = []
    for ld in d["layers"]:
        layers.append(Layer(
            beta=np.array(_dec(ld["beta"]), float), mask=np.array(ld["mask"], bool),
            beta0=np.array(_dec(ld["beta0"]), float), rho=np.array(_dec(ld["rho"]), float),
            tau=np.array(_dec(ld["tau"]), float),
            frozen={n: np.array(ld["frozen"][n], bool) for n in PARAM_NAMES},
        ))
    return NetworkSpec(kind=d["kind"], widths=list(d["widths"]), layers=layers, io=d.get("io", {}))


def _dump(obj, indent=0):
    # nested dicts get one key per line, lists of numbers stay on one line
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad}  {json.dumps(k)}: {_dump(v, indent + 1)}' for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, list) and obj and all(isinstance(v, dict) for v in obj):
        items = [pad + "  " + _dump(v, indent + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if isinstance(obj, list) and obj and all(isinstance(v, list) for v in obj):
        items = [pad + "  " + json.dumps(v) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    return json.dumps(obj)


def dumps(net: NetworkSpec) -> str:
    return _dump(to_dict(net)) + "\n"


def loads(text: str) -> NetworkSpec:
    return from_dict(json.loads(text))


def save(net: NetworkSpec, path):
    from .data import atomic_write
    atomic_write(path, dumps(net))


def load(path) -> NetworkSpec:
    with open(path) as f:
        return loads(f.read())


# ---------------------------------------------------------------------------
# states
# ---------------------------------------------------------------------------

@dataclass
class StateVector:
    """Prices/reach probabilities and quantities/inclusive values per layer.

    Each entry of ``pi`` and ``v`` has shape (n, K_s).  The flat layout is
    layer-major: [pi^(0), v^(0), pi^(1), v^(1), ..., pi^(S), v^(S)].
    """

    pi: list
    v: list
    iterations: int = 0
    residual: float = 0.0
    clamped: np.ndarray | None = None

    @property
    def widths(self):
        return [p.shape[-1] for p in self.pi]

    def index_map(self):
        return state_index(self.widths)

    def flat(self):
        return np.concatenate([a for s in range(len(self.pi)) for a in (self.pi[s], self.v[s])], -1)


def state_index(widths):
    """Map ('pi'|'v', s) -> slice into the flat state vector."""
    idx, pos = {}, 0
    for s, k in enumerate(widths):
        idx[("pi", s)] = slice(pos, pos + k)
        pos += k
        idx[("v", s)] = slice(pos, pos + k)
        pos += k
    return idx


def unflatten(flat, widths):
    idx = state_index(widths)
    S = len(widths) - 1
    return ([flat[..., idx[("pi", s)]] for s in range(S + 1)],
            [flat[..., idx[("v", s)]] for s in range(S + 1)])


# ---------------------------------------------------------------------------
# local block maps
# ---------------------------------------------------------------------------

def layer_params(layer, overrides=None):
    """Parameter arrays of a block, optionally replaced (e.g. complex copies)."""
    out = {n: getattr(layer, n) for n in PARAM_NAMES}
    if overrides:
        out.update(overrides)
    out["active"] = layer.mask & (np.real(out["beta"]) > 0)
    return out


def production_capacity(beta0, rho, tau):
    """Upper / lower bounds on feasible node output implied by beta0."""
    br = ces.branch_of(rho)
    b0 = np.real(beta0)
    upper = np.full(b0.shape, np.inf)
    lower = np.zeros(b0.shape)
    tr = np.real(tau)
    has0 = b0 > 0
    cap = has0 & ((br == ces.LEONTIEF_BRANCH) | ((br == ces.GENERAL) & (np.real(rho) < 0)))
    upper[cap] = b0[cap] ** tr[cap]
    floor = has0 & ((br == ces.LINEAR) | ((br == ces.GENERAL) & (np.real(rho) > 0)))
    lower[floor] = b0[floor] ** tr[floor]
    return lower, upper


CLAMP_MARGIN = 1e-9
V_FLOOR = 1e-300


def clamp_targets(v, beta0, rho, tau):
    """Clamp node targets into the feasible region; returns (v, lo_flag, hi_flag)."""
    lower, upper = production_capacity(beta0, rho, tau)
    lo = lower * (1 + CLAMP_MARGIN)
    br = ces.branch_of(rho)
    hi = np.where(br == ces.LEONTIEF_BRANCH, upper, upper * (1 - CLAMP_MARGIN))
    flag_lo = np.real(v) < lo
    flag_hi = np.real(v) > hi
    v = np.where(flag_lo, lo, v)
    v = np.where(flag_hi, hi, v)
    return v, flag_lo, flag_hi


def production_block(pi_in, v_out_target, prm):
    """Block s of a production net: (pi^(s), v^(s+1)) -> (pi^(s+1), v^(s)).

    Returns (prices of layer s+1, demands for layer-s goods, infeasible flags).
    """
    v_t, flo, fhi = clamp_targets(v_out_target, prm["beta0"], prm["rho"], prm["tau"])
    # zero targets (goods nobody demands) are priced at a vanishing output
    v_t = np.where(np.real(v_t) < V_FLOOR, V_FLOOR, v_t)
    with np.errstate(divide="ignore"):
        logpi = np.log(pi_in)
    logP, shares, logG, logdG, _ = ces.layer_cost_terms(
        logpi, v_t, prm["beta"], prm["active"], prm["beta0"], prm["rho"], prm["tau"])
    price = np.exp(logP + logdG)
    act = prm["active"]
    with np.errstate(divide="ignore"):
        logs = np.log(np.where(act & (np.real(shares) > 0), shares, 1.0))
    dem = np.where(act & (np.real(shares) > 0),
                   np.exp(logG[..., None] + logP[..., None] + logs - logpi[..., None, :]), 0.0)
    return price, dem.sum(-2), fhi


def choice_block(pi_parent, v_child, prm):
    """Block s of a choice net: (pi^(s), v^(s+1)) -> (pi^(s+1), v^(s))."""
    args = (prm["beta"], prm["active"], prm["rho"], prm["tau"])
    v_parent = cnl.nest_value(v_child, *args)
    T = cnl.nest_shares(v_child, *args)
    pi_child = np.einsum("...k,...kl->...l", pi_parent, T)
    return pi_child, v_parent


def block_map(net, s, pi_in, v_in, overrides=None):
    """(pi^(s), v^(s+1)) -> (pi^(s+1), v^(s)) for either kind."""
    prm = layer_params(net.layers[s], overrides)
    if net.kind == "production":
        price, dem, _ = production_block(pi_in, v_in, prm)
        return price, dem
    return choice_block(pi_in, v_in, prm)


def activation_map(net, st: StateVector):
    """One undamped application of the activation mapping to all states."""
    S = net.S
    pi = [st.pi[0]] + [None] * S
    v = [None] * S + [st.v[S]]
    for s in range(S):
        pi[s + 1], v[s] = block_map(net, s, st.pi[s], st.v[s + 1])
    return StateVector(pi=pi, v=v)


def residual(net, st: StateVector):
    new = activation_map(net, st)
    return float(np.max(np.abs(new.flat() - st.flat()))) if st.flat().size else 0.0


def is_acyclic(net) -> bool:
    """Whether prices do not feed back from quantities (two passes are exact)."""
    if net.kind == "choice":
        return True
    # the top block prices the clamped outputs, so it cannot close a cycle
    return all(np.all(l.tau == 1.0) and np.all(l.beta0 == 0.0) for l in net.layers[:-1])


def is_piecewise_linear(net) -> bool:
    if net.kind != "production":
        return False
    for l in net.layers:
        br = ces.branch_of(l.rho)
        if not np.all((br == ces.LEONTIEF_BRANCH) | (br == ces.LINEAR)) or np.any(l.tau != 1.0):
            return False
    return True


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------

def solve_choice(net, U) -> StateVector:
    U = np.atleast_2d(np.asarray(U))
    cs = cnl.choice_states(net, U)
    return StateVector(pi=cs.pi, v=cs.v, iterations=2, residual=0.0)


def _mix(a, b, d):
    """Damped update, geometric where both iterates are positive."""
    d = d[:, None]
    pos = (a > 0) & (b > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        geo = np.exp((1 - d) * np.log(np.where(pos, a, 1.0)) + d * np.log(np.where(pos, b, 1.0)))
    return np.where(pos, geo, (1 - d) * a + d * b)


def solve_production(net, p, y_target, init: StateVector | None = None, damping=0.5,
                     tol=1e-10, max_iter=500, x=None, check: bool = False) -> StateVector:
    """Equilibrium prices and quantities of a production net.

    p: (n, K_0) input prices, y_target: (n, K_S) output targets.  Acyclic
    nets are solved by one forward price pass and one backward demand pass;
    otherwise damped alternating sweeps run until the scaled sup-norm change
    drops below tol.  The residual of the fixed-point equation is stored on
    the result; for acyclic nets it is only computed when ``check`` is set.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    y = np.atleast_2d(np.asarray(y_target, dtype=float))
    n = max(p.shape[0], y.shape[0])
    p = np.broadcast_to(p, (n, p.shape[1]))
    y = np.broadcast_to(y, (n, y.shape[1]))
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise ValueError("input prices must be positive and finite")
    if np.any(y <= 0):
        raise ValueError("output targets must be positive")
    S = net.S
    W = net.widths
    params = [layer_params(l) for l in net.layers]

    def forward(pi, v):
        pi = list(pi)
        for s in range(S):
            pi[s + 1], _, _ = production_block(pi[s], v[s + 1], params[s])
        return pi

    def backward(pi, v):
        v = list(v)
        hi = []
        for s in range(S - 1, -1, -1):
            _, v[s], f = production_block(pi[s], v[s + 1], params[s])
            hi.append(f)
        return v, np.any(np.concatenate([h for h in hi], -1), -1) if hi else np.zeros(n, bool)

    acyclic = is_acyclic(net)
    if init is not None:
        pi = [a.copy() for a in init.pi]
        v = [a.copy() for a in init.v]
        pi[0] = p.copy()
        v[S] = y.copy()
    else:
        pi = [p.copy()] + [np.ones((n, W[s])) for s in range(1, S + 1)]
        v = [np.ones((n, W[s])) for s in range(S)] + [y.copy()]
        if not acyclic:
            v, _ = backward(pi, v)

    if acyclic:
        # interior prices ignore quantities, so one pass each way is exact
        pi = forward(pi, v)
        v, hi = backward(pi, v)
        st = StateVector(pi=pi, v=v, iterations=2)
    else:
        it = 0
        d = np.full(n, float(damping))
        prev_change = None
        for it in range(1, max_iter + 1):
            pi_new = forward(pi, v)
            v_new, hi = backward(pi_new, v)
            old = np.concatenate(pi[1:] + v[:S], -1)
            new = np.concatenate(pi_new[1:] + v_new[:S], -1)
            with np.errstate(invalid="ignore", over="ignore"):
                row_change = np.max(np.abs(new - old) / np.maximum(1.0, np.abs(old)), -1)
            blown = ~np.isfinite(row_change) | (np.max(np.abs(new), -1) > BLOWUP)
            if np.any(blown):
                # iterates run off to infinity: the target is beyond what the net can supply
                rows = np.flatnonzero(blown)
                raise SolveError(f"production solve diverged for observations {rows[:10].tolist()}", rows=rows)
            change = float(np.max(row_change))
            if change < tol:
                pi, v = pi_new, v_new
                break
            # per-row step: halve it when a row's change grows, regrow it slowly otherwise
            if prev_change is not None:
                d = np.where(row_change > prev_change, np.maximum(d * 0.5, damping / 64),
                             np.minimum(d * 1.25, damping))
            prev_change = row_change
            pi = [pi[0]] + [_mix(a, b, d) for a, b in zip(pi[1:], pi_new[1:])]
            v = [_mix(a, b, d) for a, b in zip(v[:S], v_new[:S])] + [v[S]]
        else:
            st = StateVector(pi=pi, v=v, iterations=max_iter)
            res = residual(net, st)
            raise SolveError(f"production solve did not converge in {max_iter} iterations "
                             f"(last change {change:.3e}, residual {res:.3e})", residual=res,
                             rows=np.flatnonzero(row_change >= tol))
        st = StateVector(pi=pi, v=v, iterations=it)
    if np.any(hi):
        rows = np.flatnonzero(hi)
        raise SolveError(f"output target exceeds node capacity for observations {rows[:10].tolist()}",
                         rows=rows)
    st.residual = 0.0 if acyclic and not check else residual(net, st)
    if x is not None:
        st.clamped = np.asarray(st.v[0] > net.expand_inputs(x) * (1 + 1e-9))
    return st


def solve_states(net, x=None, p=None, y_target=None, **kw) -> StateVector:
    """Equilibrium states.  For choice nets ``x`` are the utilities."""
    if net.kind == "choice":
        return solve_choice(net, x if y_target is None else y_target)
    if p is None:
        raise ValueError("production solve needs input prices (latent ones must be supplied)")
    return solve_production(net, p, y_target, x=x, **kw)


# ---------------------------------------------------------------------------
# frontier predictions for production nets
# ---------------------------------------------------------------------------

@dataclass
class Frontier:
    """Radial frontier output t*u together with the supporting equilibrium."""

    t: np.ndarray
    u: np.ndarray
    prices: np.ndarray
    states: StateVector | None
    budget: np.ndarray
    dual: np.ndarray | None = None
    lp_grad: np.ndarray | None = None

    @property
    def y(self):
        return self.t[:, None] * self.u


def _scale_for_budget(net, prices, u, budget, t0=None, init=None, tol=1e-12, max_iter=60, solve_kw=None):
    """Largest t with C(prices, t u) = budget, by Newton steps on log t."""
    solve_kw = solve_kw or {}
    n = prices.shape[0]
    logt = np.zeros(n) if t0 is None else np.log(t0)
    st = init
    prev = None
    for _ in range(max_iter):
        logt, st = _solve_feasible(net, prices, u, logt, prev, st, solve_kw)
        C = np.sum(prices * st.v[0], -1)
        dC = np.exp(logt) * np.sum(u * st.pi[-1], -1)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            f = np.log(C) - np.log(budget)
            step = -f * C / dC
        bad = ~np.isfinite(step)
        if np.any(bad):
            rows = np.flatnonzero(bad)
            raise SolveError(f"output scale search left the representable range for observations "
                             f"{rows[:10].tolist()} (cost {C[rows[0]]:.3g})", rows=rows)
        step = np.clip(step, -20, 20)
        if np.max(np.abs(step)) < tol:
            # the state already solved at logt is accurate to within tol
            return np.exp(logt), st
        prev = logt
        logt = logt + step
    logt, st = _solve_feasible(net, prices, u, logt, prev, st, solve_kw)
    return np.exp(logt), st


def _solve_feasible(net, prices, u, logt, prev, init, solve_kw, tries=60):
    """Solve at output scale exp(logt), backing off rows whose target exceeds capacity."""
    logt = logt.copy()
    for _ in range(tries):
        try:
            return logt, solve_production(net, prices, np.exp(logt)[:, None] * u, init=init, **solve_kw)
        except SolveError as e:
            if e.rows is None:
                raise
            r = e.rows
            # halfway back to the last feasible scale, or halve the output
            logt[r] = 0.5 * (logt[r] + prev[r]) if prev is not None else logt[r] - np.log(2.0)
    return logt, solve_production(net, prices, np.exp(logt)[:, None] * u, init=init, **solve_kw)


def _latent_objective(net, x, p_obs, latent, z, u, t0, init, solve_kw):
    prices = np.where(latent, np.exp(z), p_obs)
    budget = np.sum(prices * x, -1)
    t, st = _scale_for_budget(net, prices, u, budget, t0=t0, init=init, solve_kw=solve_kw)
    mc = np.sum(u * st.pi[-1], -1)
    g = np.where(latent, prices * (x - st.v[0]) / (t * mc)[:, None], 0.0)
    return np.log(t), g, t, st, prices, budget


Z_BOUND = 50.0


def frontier(net, x, p=None, direction=None, z0=None, tol=1e-9, max_iter=100, solve_kw=None,
             want_lp_grad=False, t0=None) -> Frontier:
    """Maximal radial output at inputs x given observed and latent prices.

    With latent prices the prediction is min over those prices of the budget
    rule output, which by duality is the largest feasible output along u.
    Returns the supporting prices so the caller can warm start (z0 for the
    log prices, t0 for the output scale) and take envelope derivatives.
    """
    solve_kw = solve_kw or {}
    x = net.expand_inputs(x)
    n, K0 = x.shape
    if np.any(x <= 0):
        raise ValueError("inputs must be strictly positive")
    M = net.widths[-1]
    u = np.ones((n, M)) if direction is None else np.broadcast_to(np.asarray(direction, float), (n, M)).copy()
    if np.any(u < 0) or np.any(u.sum(-1) <= 0):
        raise ValueError("output direction must be nonnegative and nonzero")
    p_full = net.expand_prices(p, n)
    latent = np.isnan(p_full)
    if is_piecewise_linear(net):
        return _frontier_lp(net, x, p_full, latent, u, want_grad=want_lp_grad)
    free = latent.copy()
    no_obs = ~np.any(~latent, -1)
    first = np.argmax(latent, -1)
    free[no_obs, first[no_obs]] = False  # numeraire keeps price one
    z = np.zeros((n, K0)) if z0 is None else np.array(z0, float).copy()
    z = np.where(free, np.clip(z, -Z_BOUND, Z_BOUND), 0.0)
    p_obs = np.where(latent, 0.0, p_full)
    if t0 is not None:
        t0 = np.asarray(t0, float)
        t0 = np.where(np.isfinite(t0) & (t0 > 0), t0, 1.0)
    f, g, t, st, prices, budget = _latent_objective(net, x, p_obs, latent, z, u, t0, None, solve_kw)
    if not np.any(free):
        return Frontier(t=t, u=u, prices=prices, states=st, budget=budget, dual=z)
    h = 1e-5
    for _ in range(max_iter):
        at_lo = free & (z <= -Z_BOUND) & (g > 0)
        at_hi = free & (z >= Z_BOUND) & (g < 0)
        move = free & ~at_lo & ~at_hi
        gm = np.where(move, g, 0.0)
        if np.max(np.abs(gm)) < tol:
            break
        # finite-difference Hessian in the moving coordinates
        H = np.zeros((n, K0, K0))
        for k in range(K0):
            if not np.any(move[:, k]):
                continue
            zk = z.copy()
            zk[:, k] += np.where(move[:, k], h, 0.0)
            _, gk, _, _, _, _ = _latent_objective(net, x, p_obs, latent, zk, u, t, st, solve_kw)
            H[:, :, k] = (gk - g) / h
        H = 0.5 * (H + np.swapaxes(H, 1, 2))
        mm = move[:, :, None] & move[:, None, :]
        H = np.where(mm, H, 0.0)
        # eigenvalue floor relative to the moving block (the unit padding of
        # fixed coordinates must not set the scale)
        scale = np.max(np.abs(H), axis=(1, 2))[:, None]
        H = H + np.eye(K0)[None] * (~move)[:, :, None] * np.maximum(scale, 1e-300)[:, :, None]
        w, V = np.linalg.eigh(H)
        w = np.maximum(w, 1e-300 + 1e-3 * scale)
        step = -np.einsum("nij,nj->ni", V, np.einsum("nji,nj->ni", V, gm) / w)
        step = np.where(move, np.clip(step, -5.0, 5.0), 0.0)
        # per-row backtracking (Armijo) on log t
        alpha = np.ones(n)
        accepted = ~np.any(move, -1)
        z_new = z.copy()
        for _bt in range(40):
            zt = np.where(free, np.clip(z + alpha[:, None] * step, -Z_BOUND, Z_BOUND), 0.0)
            ft, _, _, _, _, _ = _latent_objective(net, x, p_obs, latent, zt, u, t, st, solve_kw)
            ok = ~accepted & (ft <= f + 1e-4 * np.sum(gm * (zt - z), -1) + 1e-13)
            z_new[ok] = zt[ok]
            accepted |= ok
            if accepted.all():
                break
            alpha = np.where(accepted, alpha, alpha * 0.5)
        if np.all(z_new == z):
            break
        z = z_new
        f, g, t, st, prices, budget = _latent_objective(net, x, p_obs, latent, z, u, t, None, solve_kw)
    return Frontier(t=t, u=u, prices=prices, states=st, budget=budget, dual=z)


def _frontier_lp(net, x, p_full, latent, u, want_grad=False):
    """Exact frontier of a net built from Leontief and linear nodes (LP per row).

    With ``want_grad`` the derivative of t in the free weights is read off the
    constraint duals: d t / d a_ij = -y_i z_j for a row a_i z <= b_i, and
    d t / d b_i = y_i.  Curvature parameters of such nets get zero gradient.
    """
    from scipy.optimize import linprog

    n = x.shape[0]
    S = net.S
    W = net.widths
    edges = []  # (block, node, input)
    for s, l in enumerate(net.layers):
        act = l.mask & (l.beta > 0)
        for j, k in zip(*np.nonzero(act)):
            edges.append((s, int(j), int(k)))
    nodes = [(s, j) for s in range(S) for j in range(W[s + 1])]
    e_index = {e: i for i, e in enumerate(edges)}
    q_index = {nd: len(edges) + i for i, nd in enumerate(nodes)}
    nv = len(edges) + len(nodes) + 1
    ti = nv - 1
    rows, rhs = [], []

    slot_pos = {(s, nm, j): i for i, (s, nm, j) in enumerate(net.theta_slots())}
    sens = []  # (slot, row, var or -1)

    def row():
        r = np.zeros(nv)
        rows.append(r)
        return r

    def note(s, name, flat, var):
        key = (s, name, flat)
        if key in slot_pos:
            sens.append((slot_pos[key], len(rows) - 1, var))

    for s, l in enumerate(net.layers):
        br = ces.branch_of(l.rho)
        for j in range(W[s + 1]):
            ins = [e for e in edges if e[0] == s and e[1] == j]
            if br[j] == ces.LEONTIEF_BRANCH:
                for e in ins:
                    r = row()
                    r[q_index[(s, j)]] = 1.0
                    r[e_index[e]] = -l.beta[j, e[2]]
                    rhs.append(0.0)
                    note(s, "beta", j * W[s] + e[2], e_index[e])
                if l.beta0[j] > 0:
                    r = row()
                    r[q_index[(s, j)]] = 1.0
                    rhs.append(l.beta0[j])
                    note(s, "beta0", j, -1)
            else:
                r = row()
                r[q_index[(s, j)]] = 1.0
                for e in ins:
                    r[e_index[e]] = -l.beta[j, e[2]]
                    note(s, "beta", j * W[s] + e[2], e_index[e])
                rhs.append(l.beta0[j])
                note(s, "beta0", j, -1)
    # goods balance for intermediate layers
    for s in range(1, S):
        for k in range(W[s]):
            r = row()
            for e in edges:
                if e[0] == s and e[2] == k:
                    r[e_index[e]] = 1.0
            r[q_index[(s - 1, k)]] = -1.0
            rhs.append(0.0)
    base = len(rows)
    # layer-0 usage rows (filled per observation), outputs and budget
    use0 = np.zeros((W[0], nv))
    for e in edges:
        if e[0] == 0:
            use0[e[2], e_index[e]] = 1.0
    out_rows = np.zeros((W[S], nv))
    for m in range(W[S]):
        out_rows[m, q_index[(S - 1, m)]] = -1.0
    A_static = np.array(rows) if rows else np.zeros((0, nv))
    b_static = np.array(rhs)
    c = np.zeros(nv)
    c[ti] = -1.0
    t = np.zeros(n)
    duals = np.zeros((n, W[0]))
    grad = np.zeros((n, len(slot_pos))) if want_grad else None
    for i in range(n):
        A = [A_static]
        b = [b_static]
        lat = latent[i]
        if np.any(lat):
            A.append(use0[lat])
            b.append(x[i, lat])
        if np.any(~lat):
            A.append((p_full[i, ~lat] @ use0[~lat])[None])
            b.append([p_full[i, ~lat] @ x[i, ~lat]])
        orow = out_rows.copy()
        orow[:, ti] = u[i]
        A.append(orow)
        b.append(np.zeros(W[S]))
        res = linprog(c, A_ub=np.vstack(A), b_ub=np.concatenate([np.atleast_1d(bb) for bb in b]),
                      bounds=[(0, None)] * nv, method="highs")
        if res.status != 0:
            raise SolveError(f"frontier linear program failed for observation {i}: {res.message}", rows=[i])
        t[i] = res.x[ti]
        marg = -res.ineqlin.marginals
        if want_grad:
            for slot, r_i, var in sens:
                grad[i, slot] += marg[r_i] * (res.x[var] if var >= 0 else 1.0)
        off = base
        if np.any(lat):
            duals[i, lat] = marg[off:off + lat.sum()]
            off += lat.sum()
    return Frontier(t=t, u=u, prices=duals, states=None, budget=np.sum(np.nan_to_num(p_full) * x, -1),
                    lp_grad=grad)


def predict_outputs(net, x, p=None, direction=None, **kw):
    """Top-layer quantities (production) or leaf probabilities (choice)."""
    if net.kind == "choice":
        return cnl.ccp(net, np.atleast_2d(np.asarray(x, dtype=float)))
    return frontier(net, x, p=p, direction=direction, **kw).y
