"""Synthetic production data and simulated discrete choices."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ces, cnl
from .data import Dataset
from .network import Layer, NetworkSpec, predict_outputs, validate

DEFAULT_BOX = (0.5, 2.0)


@dataclass
class Technology:
    """Known frontier y = f(x), vectorized over rows of x."""

    name: str
    K: int
    M: int
    f: object
    params: dict = field(default_factory=dict)

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        if x.shape[1] != self.K:
            raise ValueError(f"{self.name} expects {self.K} inputs, got {x.shape[1]}")
        return np.asarray(self.f(x), float).reshape(x.shape[0], self.M)


def cobb_douglas(*alpha) -> Technology:
    """y = prod x_l^alpha_l (unnormalized exponents)."""
    a = np.asarray(alpha, float).ravel()
    if np.any(a < 0):
        raise ValueError("exponents must be nonnegative")
    return Technology("cobb_douglas", a.size, 1, lambda x: np.exp(np.log(x) @ a), {"alpha": a.tolist()})


def ces_technology(beta, rho, tau=1.0, beta0=0.0) -> Technology:
    p = ces.CesParams(beta=np.asarray(beta, float), rho=float(rho), tau=float(tau), beta0=float(beta0))
    return Technology("ces", p.beta.size, 1, lambda x: ces.eval_ces(x, p),
                      {"beta": p.beta.tolist(), "rho": p.rho, "tau": p.tau, "beta0": p.beta0})


def two_layer(net: NetworkSpec) -> Technology:
    """Frontier of a production network along the unit output direction."""
    if net.kind != "production":
        raise ValueError("two_layer truth needs a production network")
    K = net.widths[0] - len(net.fixed_inputs())
    return Technology("two_layer", K, net.widths[-1], lambda x: predict_outputs(net, x), {"widths": net.widths})


def technology_from_config(cfg: dict) -> Technology:
    """Build a truth from {"type": ..., params}."""
    kind = cfg.get("type")
    if kind == "cobb_douglas":
        return cobb_douglas(*cfg["alpha"])
    if kind == "ces":
        return ces_technology(cfg["beta"], cfg["rho"], cfg.get("tau", 1.0), cfg.get("beta0", 0.0))
    if kind == "two_layer":
        from .network import from_dict, load

        net = load(cfg["network"]) if isinstance(cfg.get("network"), str) else from_dict(cfg["network"])
        return two_layer(net)
    raise ValueError(f"unknown technology type {kind!r}")


def sample_production(truth: Technology, n: int, noise_sd: float = 0.0, seed: int = 0,
                      box=DEFAULT_BOX) -> Dataset:
    """Uniform inputs on box^K, outputs f(x) plus N(0, sd^2) noise truncated at 0."""
    if n < 1:
        raise ValueError("n must be positive")
    if noise_sd < 0:
        raise ValueError("noise_sd must be nonnegative")
    lo, hi = box
    if not 0 < lo < hi:
        raise ValueError("input box must lie inside the positive orthant")
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, (n, truth.K))
    f = truth(x)
    e = rng.normal(0.0, 1.0, f.shape) * noise_sd
    y = np.maximum(f + e, 0.0)
    return Dataset(kind="production", x=x, y=y)


def sample_paths(net: NetworkSpec, U, rng) -> np.ndarray:
    """One root-to-leaf path per row of U; returns the leaf indices."""
    U = np.atleast_2d(np.asarray(U, float))
    n = U.shape[0]
    v = cnl.inclusive_values(net, U)
    node = np.zeros(n, dtype=int)
    rows = np.arange(n)
    for s, layer in enumerate(net.layers):
        T = cnl.nest_shares(v[s + 1], layer.beta, layer.mask & (layer.beta > 0), layer.rho, layer.tau)
        probs = T[rows, node]
        cum = np.cumsum(probs, -1)
        r = rng.random(n) * cum[:, -1]
        nxt = np.sum(cum <= r[:, None], -1)
        # guard against landing on a zero-probability child through rounding
        nxt = np.minimum(nxt, probs.shape[1] - 1)
        bad = probs[rows, nxt] <= 0
        if np.any(bad):
            nxt[bad] = np.argmax(probs[bad], -1)
        node = nxt
    return node


def simulate_choices(net: NetworkSpec, U=None, x_sampler=None, n: int = 1000, seed: int = 0) -> Dataset:
    """Choices by sequential nest sampling.

    x_sampler(rng, n) draws covariates (default: standard normal utilities);
    U maps covariates to (n, M) systematic utilities (default: identity).
    The dataset stores the utilities together with the sampled labels.
    """
    if net.kind != "choice":
        raise ValueError("simulate_choices needs a choice network")
    diag = validate(net)
    if diag:
        raise ValueError("invalid network: " + "; ".join(diag))
    rng = np.random.default_rng(seed)
    M = net.widths[-1]
    x = x_sampler(rng, n) if x_sampler is not None else rng.normal(size=(n, M))
    util = np.asarray(U(x) if U is not None else x, float).reshape(n, M)
    labels = sample_paths(net, util, rng)
    return Dataset(kind="choice", x=util, labels=labels)


# ---------------------------------------------------------------------------
# random networks for test fleets
# ---------------------------------------------------------------------------

def random_choice_net(M: int, S: int, seed: int = 0, rho_range=(1.0, 5.0), density: float = 0.7,
                      widths=None) -> NetworkSpec:
    """Seeded cross-nested network with S parameter blocks and M alternatives."""
    rng = np.random.default_rng(seed)
    if widths is None:
        widths = [1] + [int(rng.integers(1, M + 2)) for _ in range(S - 1)] + [M]
    layers = []
    for s in range(S):
        a, b = widths[s], widths[s + 1]
        mask = rng.random((a, b)) < density
        # every parent needs a child and every child a parent
        mask[np.arange(a), rng.integers(0, b, a)] = True
        mask[rng.integers(0, a, b), np.arange(b)] = True
        beta = np.where(mask, rng.uniform(0.1, 2.0, (a, b)), 0.0)
        rho = rng.uniform(*rho_range, a)
        layers.append(Layer.create(a, b, beta=beta, mask=mask, rho=rho, tau=1.0,
                                   frozen={"tau": True, "beta0": True}))
    return NetworkSpec(kind="choice", widths=list(widths), layers=layers)


def random_production_net(widths, seed: int = 0, rho_range=(-2.0, 0.9), tau_range=(1.0, 1.0),
                          beta0_max: float = 0.0, density: float = 1.0, rho_gap: float = 0.2) -> NetworkSpec:
    """Seeded production network; widths run from the K inputs to the M outputs.

    Curvatures closer to zero than rho_gap are pushed out to +-rho_gap: the
    power form scales like K^(1/rho) there, which gives astronomically
    large outputs.  Fixed-input terms beta0 go only to nodes with rho > 0;
    with rho < 0 they cap the node's output at beta0^tau, and a fleet of
    such caps makes most targets infeasible.  The zero beta0 of those nodes
    is frozen.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for s in range(len(widths) - 1):
        a, b = widths[s + 1], widths[s]
        mask = rng.random((a, b)) < density
        mask[np.arange(a), rng.integers(0, b, a)] = True
        beta = np.where(mask, rng.uniform(0.3, 1.5, (a, b)), 0.0)
        rho = rng.uniform(*rho_range, a)
        rho = np.where(np.abs(rho) < rho_gap, np.where(rho < 0, -rho_gap, rho_gap), rho)
        tau = rng.uniform(*tau_range, a)
        beta0 = np.where(rho > 0, rng.uniform(0.0, beta0_max, a), 0.0) if beta0_max > 0 else 0.0
        # a structural zero beta0 stays frozen, so it is never a free parameter sitting on its bound
        layers.append(Layer.create(a, b, beta=beta, mask=mask, rho=rho, tau=tau, beta0=beta0,
                                   frozen={"beta0": (rho <= 0) | (beta0_max <= 0)}))
    return NetworkSpec(kind="production", widths=list(widths), layers=layers)


# ---------------------------------------------------------------------------
# generating-function oracles
# ---------------------------------------------------------------------------

def generating_from_config(cfg: dict):
    """(F0, M) for {"type": logit | ces | nested, ...}.

    logit:  F0 = sum w
    ces:    F0 = (sum w^rho)^(1/rho), rho >= 1
    nested: F0 = sum_k (sum_{j in nest k} w_j^rho_k)^(1/rho_k), nests 1-based
    """
    typ = cfg.get("type")
    if typ == "logit":
        M = int(cfg["M"])
        return (lambda w: float(np.sum(w))), M
    if typ == "ces":
        M, rho = int(cfg["M"]), float(cfg["rho"])
        if rho < 1:
            raise ValueError("generating ces needs rho >= 1")
        return (lambda w: float(np.sum(np.asarray(w) ** rho) ** (1.0 / rho))), M
    if typ == "nested":
        nests = [[int(j) - 1 for j in nest] for nest in cfg["nests"]]
        rho = [float(r) for r in cfg.get("rho", [1.0] * len(nests))]
        if len(rho) != len(nests) or any(r < 1 for r in rho):
            raise ValueError("nested generating function needs one rho >= 1 per nest")
        M = max(max(n) for n in nests) + 1
        if sorted({j for n in nests for j in n}) != list(range(M)):
            raise ValueError("every alternative must belong to a nest")

        def F0(w):
            w = np.asarray(w, float)
            return float(sum(np.sum(w[n] ** r) ** (1.0 / r) for n, r in zip(nests, rho)))

        return F0, M
    raise ValueError(f"unknown generating function type {typ!r}")


def gev_ccp(F0, U):
    """Choice probabilities of a GEV model with generating function F0."""
    return cnl.ccp_direct(F0, U)
