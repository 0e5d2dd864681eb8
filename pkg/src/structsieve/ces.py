"""CES primitives for production nodes.

One node turns K intermediate inputs w_1..w_K plus a fixed non-discretionary
input w_0 = 1 into output

    F(w) = [ sum_{l=0}^K (beta_l w_l)^rho ]^(tau/rho)

The module provides the production function, its cost function, marginal
cost (the price passed to the next layer), conditional factor demands and
the numeraire first-order condition for latent input prices.

Every formula is evaluated in the log domain.  The vectorised layer
functions accept complex arrays so that the network module can take
complex-step derivatives through them; branch decisions always use real
parts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEONTIEF = -np.inf

CD_TOL = 1e-6
LEONTIEF_RHO = -30.0
LINEAR_TOL = 1e-9

GENERAL, COBB_DOUGLAS, LEONTIEF_BRANCH, LINEAR = 0, 1, 2, 3


class InfeasibleTarget(ValueError):
    """Requested output cannot be produced by the node."""


@dataclass
class CesParams:
    """Parameters of a single CES production node."""

    beta: np.ndarray
    beta0: float = 0.0
    rho: float = 1.0
    tau: float = 1.0
    _checked: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        self.beta0 = float(self.beta0)
        self.rho = float(self.rho)
        self.tau = float(self.tau)
        if self.beta.ndim != 1:
            raise ValueError("beta must be one-dimensional")
        if np.any(self.beta < 0) or self.beta0 < 0:
            raise ValueError("share weights must be nonnegative")
        if not np.any(self.beta > 0):
            raise ValueError("at least one share weight must be positive")
        if not self.rho <= 1.0 or np.isnan(self.rho):
            raise ValueError(f"rho must lie in [-inf, 1], got {self.rho}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @property
    def branch(self) -> int:
        return int(branch_of(np.array([self.rho]))[0])


def branch_of(rho) -> np.ndarray:
    """Branch code per node: general, Cobb-Douglas, Leontief or linear."""
    r = np.real(np.asarray(rho))
    out = np.full(r.shape, GENERAL, dtype=int)
    out[np.abs(r) < CD_TOL] = COBB_DOUGLAS
    out[r < LEONTIEF_RHO] = LEONTIEF_BRANCH
    out[np.abs(r - 1.0) < LINEAR_TOL] = LINEAR
    return out


def _lse(x, active, axis=-1):
    """Shifted log-sum-exp over the active entries; works for complex input."""
    xr = np.where(active, np.real(x), -np.inf)
    m = np.max(xr, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    terms = np.where(active, np.exp(np.where(active, x, 0.0) - m), 0.0)
    s = np.sum(terms, axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = np.log(s) + m
    return np.squeeze(out, axis=axis)


def _safe_log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


# ---------------------------------------------------------------------------
# vectorised layer kernels (nodes on axis -2, inputs on axis -1)
# ---------------------------------------------------------------------------

def unit_cost(logpi, beta, active, rho):
    """Log unit-cost index log P and cost shares s for every node.

    logpi: (..., n_in) log input prices; beta, active: (n_out, n_in) or with
    the same leading batch shape; rho: (n_out,).  Returns log P with shape
    (..., n_out) and shares with shape (..., n_out, n_in).
    """
    br = branch_of(rho)
    logc = logpi[..., None, :] - _safe_log(np.where(active, beta, 1.0))
    logc = np.where(active, logc, 0.0)

    logP = shares = None

    def put(cond, lp, sh):
        nonlocal logP, shares
        if logP is None:
            logP, shares = lp, sh
        else:
            logP = np.where(cond, lp, logP)
            shares = np.where(cond[..., None], sh, shares)

    # only the branches present in the layer are evaluated
    if np.any(br == GENERAL):
        rho_g = np.where(br == GENERAL, rho, 0.5)
        r = (rho_g / (rho_g - 1.0))[..., :, None]
        la = r * logc
        logA = _lse(la, active)
        put(br == GENERAL, logA / r[..., 0], np.where(active, np.exp(la - logA[..., None]), 0.0))
    if np.any(br == COBB_DOUGLAS):
        d = np.sum(active, axis=-1)
        put(br == COBB_DOUGLAS, np.log(d) + np.sum(np.where(active, logc, 0.0), axis=-1) / d,
            np.where(active, 1.0 / d[..., None], 0.0))
    if np.any(br == LEONTIEF_BRANCH):
        lp = _lse(logc, active)
        put(br == LEONTIEF_BRANCH, lp, np.where(active, np.exp(logc - lp[..., None]), 0.0))
    if np.any(br == LINEAR):
        masked = np.where(active, np.real(logc), np.inf)
        jstar = np.argmin(masked, axis=-1)
        put(br == LINEAR, np.take_along_axis(logc, jstar[..., None], axis=-1)[..., 0],
            (np.arange(logc.shape[-1]) == jstar[..., None]).astype(float))
    logP = np.broadcast_to(logP, logc.shape[:-1])
    shares = np.broadcast_to(shares, logc.shape)
    return logP, shares


def output_requirement(v, beta0, rho, tau, n_active):
    """Log of G(v) and log of G'(v), plus infeasibility flags.

    G(v) = (v^(rho/tau) - beta0^rho)^(1/rho) is the CES aggregate of the
    discretionary inputs needed for output v, so that cost = P * G(v).
    Returns (logG, logdG, infeasible) with the shape of v.
    """
    br = branch_of(rho)
    logv = _safe_log(v)
    logq = logv / tau
    has0 = np.real(beta0) > 0
    logb0 = _safe_log(np.where(has0, beta0, 1.0))
    logt = np.log(tau)

    logG = logdG = feas = None

    def put(cond, g, dg, f):
        nonlocal logG, logdG, feas
        if logG is None:
            logG, logdG, feas = g, dg, f
        else:
            logG, logdG, feas = np.where(cond, g, logG), np.where(cond, dg, logdG), np.where(cond, f, feas)

    if np.any(br == GENERAL):
        rho_g = np.where(br == GENERAL, rho, 0.5)
        expo = rho_g * (logb0 - logq)
        feas_gen = ~has0 | (np.real(expo) < 0)
        expo_safe = np.where(has0 & feas_gen, expo, -1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            logbase = rho_g * logq + np.where(has0, np.log(-np.expm1(expo_safe)), 0.0)
        put(br == GENERAL, logbase / rho_g, (1.0 / rho_g - 1.0) * logbase + rho_g * logq - logt - logv,
            feas_gen)
    if np.any(br == COBB_DOUGLAS):
        d = n_active
        nn = d + has0
        g = (nn * logq - np.where(has0, logb0, 0.0)) / d
        put(br == COBB_DOUGLAS, g, g + np.log(nn / (d * tau)) - logv, np.ones(np.shape(g), bool))
    if np.any(br == LEONTIEF_BRANCH):
        put(br == LEONTIEF_BRANCH, logq, logq - logt - logv, ~has0 | (np.real(logq) <= np.real(logb0)))
    if np.any(br == LINEAR):
        ratio = np.where(has0, np.exp(logb0 - logq), 0.0)
        feas_lin = np.real(ratio) <= 1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            g = logq + np.log1p(-np.where(feas_lin, ratio, 0.0))
        put(br == LINEAR, g, logq - logt - logv, feas_lin)
    shape = np.broadcast_shapes(np.shape(logv), np.shape(br))
    logG, logdG, feas = (np.broadcast_to(a, shape) for a in (logG, logdG, feas))
    return logG, logdG, ~feas


def layer_cost_terms(logpi, v, beta, active, beta0, rho, tau):
    """Unit cost, shares and output requirement for a whole layer."""
    logP, shares = unit_cost(logpi, beta, active, rho)
    n_active = np.sum(active, axis=-1)
    logG, logdG, infeasible = output_requirement(v, beta0, rho, tau, n_active)
    return logP, shares, logG, logdG, infeasible


def layer_prices(logpi, v, beta, active, beta0, rho, tau):
    """Marginal cost of every node in a layer (log scale) and infeasibility."""
    logP, _, _, logdG, infeasible = layer_cost_terms(logpi, v, beta, active, beta0, rho, tau)
    return logP + logdG, infeasible


def layer_demands(logpi, v, beta, active, beta0, rho, tau):
    """Conditional factor demands of every node: shape (..., n_out, n_in)."""
    logP, shares, logG, _, infeasible = layer_cost_terms(logpi, v, beta, active, beta0, rho, tau)
    with np.errstate(divide="ignore"):
        logs = np.log(np.where(active, shares, 1.0))
    logd = logG[..., None] + logP[..., None] + logs - logpi[..., None, :]
    dem = np.where(active & (np.real(shares) > 0), np.exp(np.where(active, logd, 0.0)), 0.0)
    return dem, infeasible


# ---------------------------------------------------------------------------
# single-node operations
# ---------------------------------------------------------------------------

def _node_arrays(p: CesParams):
    beta = p.beta[None, :]
    active = beta > 0
    return beta, active, np.array([p.beta0]), np.array([p.rho]), np.array([p.tau])


def _check_dim(x, p: CesParams, name: str):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != p.beta.shape:
        raise ValueError(f"{name} has dimension {x.shape[-1:]} but beta has {p.beta.shape}")
    return x


def eval_ces(w, p: CesParams, branches: bool = True):
    """Evaluate the CES production function at input vector(s) w.

    With ``branches=False`` the power form is used even near the singular
    values of rho (only meaningful for finite, nonzero rho); this is what the
    limit-continuity checks compare against the dedicated branches.
    """
    w = _check_dim(w, p, "w")
    if np.any(w < 0):
        raise ValueError("inputs must be nonnegative")
    act = p.beta > 0
    logbw = np.log(np.where(act, p.beta, 1.0)) + _safe_log(w)
    if p.beta0 > 0:
        logbw = np.concatenate([np.broadcast_to(np.log(p.beta0), w.shape[:-1] + (1,)), logbw], -1)
        act = np.concatenate([[True], act])
    br = p.branch if branches else GENERAL
    if br == GENERAL:
        if not np.isfinite(p.rho) or p.rho == 0:
            raise ValueError("power form requires finite nonzero rho")
        with np.errstate(invalid="ignore"):
            inner = _lse(p.rho * logbw, np.broadcast_to(act, logbw.shape))
        logF = p.tau / p.rho * inner
    elif br == COBB_DOUGLAS:
        logF = p.tau * np.sum(np.where(act, logbw, 0.0), -1) / act.sum()
    elif br == LEONTIEF_BRANCH:
        logF = p.tau * np.min(np.where(act, logbw, np.inf), -1)
    else:
        lin = np.sum(np.where(act, np.exp(logbw), 0.0), -1)
        logF = p.tau * _safe_log(lin)
    return np.exp(logF)


def _cost_terms(prices, v, p: CesParams):
    prices = _check_dim(prices, p, "prices")
    if np.any(prices <= 0):
        raise ValueError("prices must be positive")
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0):
        raise ValueError("target output must be positive")
    beta, active, b0, rho, tau = _node_arrays(p)
    logpi = np.log(prices)
    logP, shares, logG, logdG, infeasible = layer_cost_terms(
        logpi[..., :], v[..., None], beta, active, b0, rho, tau)
    if np.any(infeasible):
        raise InfeasibleTarget(
            f"target {v} is not attainable with beta0={p.beta0}, rho={p.rho}, tau={p.tau}")
    return logpi, logP[..., 0], shares[..., 0, :], logG[..., 0], logdG[..., 0]


def ces_cost(prices, v, p: CesParams, pi0: float = 0.0):
    """Minimum cost of producing output v at input prices (pi_1..pi_K).

    pi0 is the price of the non-discretionary input; it enters additively.
    """
    _, logP, _, logG, _ = _cost_terms(prices, v, p)
    return pi0 + np.exp(logP + logG)


def price_activation(prices_prev, v, p: CesParams):
    """Marginal cost dC/dv of the node: the price of its output good."""
    _, logP, _, _, logdG = _cost_terms(prices_prev, v, p)
    return np.exp(logP + logdG)


def node_demand(prices, v, p: CesParams):
    """Cost-minimising input bundle of a single node producing v."""
    logpi, logP, shares, logG, _ = _cost_terms(prices, v, p)
    with np.errstate(divide="ignore"):
        logs = np.log(shares)
    return np.where(shares > 0, np.exp(logG[..., None] + logP[..., None] + logs - logpi), 0.0)


def demand_activation(prices, v_next, params_next: list[CesParams]):
    """Total demand for each good of a layer from all downstream nodes."""
    prices = np.asarray(prices, dtype=float)
    v_next = np.atleast_1d(np.asarray(v_next, dtype=float))
    if len(v_next) != len(params_next):
        raise ValueError("one target per downstream node is required")
    total = np.zeros_like(prices)
    for vl, pl in zip(v_next, params_next):
        total = total + node_demand(prices, vl, pl)
    return total


def infer_input_prices(allocations, p: CesParams):
    """Latent input prices from node-1 allocations, with good 1 as numeraire.

    Interior first-order conditions give
        pi_k = (beta_k / beta_1)^rho * (v_k / v_1)^(rho - 1),   pi_1 = 1.
    """
    a = _check_dim(allocations, p, "allocations")
    if a.ndim != 1:
        raise ValueError("allocations must be the input vector of one node")
    if np.any(a <= 0) or np.any(p.beta <= 0):
        raise ValueError("node-1 allocations must be strictly positive to infer prices")
    br = p.branch
    if br == LEONTIEF_BRANCH:
        raise ValueError("prices are not identified at a Leontief node")
    rho = 0.0 if br == COBB_DOUGLAS else (1.0 if br == LINEAR else p.rho)
    out = (p.beta / p.beta[0]) ** rho * (a / a[0]) ** (rho - 1.0)
    out[0] = 1.0
    return out
