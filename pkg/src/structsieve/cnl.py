"""Cross-nested logit primitives.

Layer 0 holds the single root, layer S holds the M alternatives.  Node k of
layer s aggregates the children of layer s+1 through

    F_k(w) = ( sum_l (beta_kl w_l^tau_k)^rho_k )^(1/rho_k),   rho_k >= 1.

Inclusive values travel leaf to root, reach probabilities root to leaf.
Everything is computed in shifted log-sum-exp form and accepts complex
utilities or parameters so the implicit-gradient code can take complex-step
derivatives.

The functions only rely on the attributes ``widths`` and ``layers`` of a
choice network (see ``structsieve.network``); ``layers[s]`` stores the
parameters of the nodes of layer s as arrays of shape (K_s, K_{s+1}).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ces import _lse

MAX_RHO = 30.0
ADAPTER_FLOOR = 1e-12


@dataclass
class CnlNodeParams:
    """Parameters of one nest: allocation weights and nesting coefficient."""

    beta: np.ndarray
    rho: float = 1.0

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if np.any(self.beta < 0):
            raise ValueError("allocation weights must be nonnegative")
        if not self.rho >= 1.0:
            raise ValueError(f"nesting coefficient must be >= 1, got {self.rho}")


@dataclass
class ChoiceStates:
    """Inclusive values and reach probabilities, one array per layer."""

    v: list
    pi: list

    @property
    def probs(self):
        return self.pi[-1]


def _layer_arrays(layer):
    beta = layer.beta
    active = layer.mask & (np.real(beta) > 0)
    return beta, active, layer.rho, layer.tau


def nest_logits(v_child, beta, active, rho, tau):
    """Per-edge log terms x_kl = log beta_kl + tau_k v_l, shape (..., K_s, K_s1)."""
    with np.errstate(divide="ignore"):
        logb = np.log(np.where(active, beta, 1.0))
    return np.where(active, logb + tau[..., :, None] * v_child[..., None, :], 0.0)


def nest_value(v_child, beta, active, rho, tau):
    """Inclusive values of one layer from the child-layer values."""
    x = nest_logits(v_child, beta, active, rho, tau)
    smooth = np.real(rho) < MAX_RHO
    rho_s = np.where(smooth, rho, 1.0)[..., :, None]
    v_smooth = _lse(rho_s * x, active) / rho_s[..., 0]
    j = _argmax_active(x, active)
    v_max = np.take_along_axis(x, j[..., None], axis=-1)[..., 0]
    return np.where(smooth, v_smooth, v_max)


def _argmax_active(x, active):
    # np.argmax returns the first maximiser, so ties go to the lowest index
    return np.argmax(np.where(active, np.real(x), -np.inf), axis=-1)


def nest_shares(v_child, beta, active, rho, tau):
    """Transition shares parent -> child, rows sum to one.

    share_kl = (beta_kl e^{tau_k v_l})^rho_k / sum_m (beta_km e^{tau_k v_m})^rho_k,
    normalised with the child-layer values.
    """
    x = nest_logits(v_child, beta, active, rho, tau)
    smooth = np.real(rho) < MAX_RHO
    rho_s = np.where(smooth, rho, 1.0)[..., :, None]
    z = rho_s * x
    lse = _lse(z, active)
    s_smooth = np.where(active, np.exp(z - lse[..., None]), 0.0)
    j = _argmax_active(x, active)
    s_max = (np.arange(x.shape[-1]) == j[..., None]).astype(float)
    return np.where(smooth[..., :, None], s_smooth, s_max)


def inclusive_values(net, U):
    """Inclusive value of every node, leaf to root; U has shape (..., M)."""
    U = np.asarray(U)
    if not np.all(np.isfinite(U)):
        raise ValueError("utilities must be finite")
    S = len(net.layers)
    v = [None] * (S + 1)
    v[S] = U
    for s in range(S - 1, -1, -1):
        v[s] = nest_value(v[s + 1], *_layer_arrays(net.layers[s]))
    return v


def reach_probabilities(net, v):
    """Reach probability of every node, root to leaf."""
    S = len(net.layers)
    lead = np.shape(v[S])[:-1]
    pi = [None] * (S + 1)
    pi[0] = np.ones(lead + (net.widths[0],))
    for s in range(S):
        T = nest_shares(v[s + 1], *_layer_arrays(net.layers[s]))
        pi[s + 1] = np.einsum("...k,...kl->...l", pi[s], T)
    return pi


def choice_states(net, U) -> ChoiceStates:
    v = inclusive_values(net, U)
    return ChoiceStates(v=v, pi=reach_probabilities(net, v))


def ccp(net, U):
    """Conditional choice probabilities over the M alternatives."""
    return choice_states(net, U).probs


def eval_generating(net, w):
    """Generating function F(w) via the nested recursion."""
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0):
        raise ValueError("generating function needs a strictly positive argument")
    return np.exp(inclusive_values(net, np.log(w))[0][..., 0])


def ccp_direct(F, U, tau: float = 1.0, one_sided: bool = False, rel_step: float = 1e-6):
    """Choice probabilities from numeric partial derivatives of F.

    mu_m = e^{U_m} dF/dw_m / (tau F) at w = e^U.  Central differences with
    step rel_step * w_m, or right differences when ``one_sided``.
    """
    U = np.asarray(U, dtype=float)
    w = np.exp(U)
    F0 = float(F(w))
    if not F0 > 0:
        raise ValueError("generating function is not positive at the evaluation point")
    M = len(w)
    mu = np.empty(M)
    for m in range(M):
        h = rel_step * w[m]
        up = w.copy()
        up[m] += h
        if one_sided:
            d = (F(up) - F0) / h
        else:
            dn = w.copy()
            dn[m] -= h
            d = (F(up) - F(dn)) / (2 * h)
        mu[m] = w[m] * d / (tau * F0)
    return mu


def marginal_adapter_eval(coeffs, w):
    """Polynomial marginal adapter sum_l beta_l w^l, floored at 1e-12."""
    c = np.atleast_1d(np.asarray(coeffs, dtype=float))
    if c.size == 0:
        raise ValueError("adapter needs at least one coefficient")
    w = np.asarray(w, dtype=float)
    powers = w[..., None] ** np.arange(1, c.size + 1)
    return np.maximum(powers @ c, ADAPTER_FLOOR)


def adapted_generating(net, coeffs_per_alt):
    """Generating function with a polynomial adapter ahead of each alternative."""
    if len(coeffs_per_alt) != net.widths[-1]:
        raise ValueError("one coefficient list per alternative is required")

    def F(w):
        w = np.asarray(w, dtype=float)
        z = np.stack([marginal_adapter_eval(c, w[..., m]) for m, c in enumerate(coeffs_per_alt)], -1)
        return eval_generating(net, z)

    return F
