"""Losses, constraint projection and the projected-gradient training loop."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ces
from . import network as nw
from .data import Dataset
from .implicit import implicit_gradient
from .network import NetworkSpec, SolveError, state_index

NLL_FLOOR = 1e-12


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or a failed equilibrium solve."""


@dataclass
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 256
    epochs: int = 50
    optimizer: str = "adam"          # plain | momentum | adam | lbfgs (full batch)
    momentum: float = 0.9
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    rho_min: float = -20.0           # production lower bound on rho
    rho_max: float = 20.0            # choice upper bound on rho
    tau_min: float = 1e-3
    output_bound: float | None = None
    seed: int = 0
    val_frac: float = 0.2
    lr_decay: float = 1.0            # multiplicative learning-rate factor per epoch
    halve_on_increase: bool = False
    window: int | None = None        # stop after this many epochs without validation improvement
    Q: int | None = None             # None: exact for acyclic nets, adaptive otherwise

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.output_bound is not None and not self.output_bound > 0:
            raise ValueError("output bound must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.optimizer not in ("plain", "momentum", "adam", "lbfgs"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in (d or {}).items() if k in cls.__dataclass_fields__}
        unknown = set(d or {}) - set(known)
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**known)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_squared(y, v):
    """Squared error sum_m (y_m - v_m)^2 and its gradient in v."""
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    if y.shape != v.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {v.shape}")
    r = y - v
    return np.sum(r * r, -1), -2.0 * r


def loss_nll(label, pi):
    """Negative log probability of the 1-based label and its gradient in pi."""
    pi = np.asarray(pi, dtype=float)
    lab = np.asarray(label)
    M = pi.shape[-1]
    if np.any(lab < 1) or np.any(lab > M) or np.any(lab != np.round(lab)):
        raise ValueError(f"label must lie in 1..{M}")
    idx = lab.astype(int) - 1
    p = np.take_along_axis(np.atleast_2d(pi), np.atleast_1d(idx)[:, None], -1)[:, 0]
    pc = np.maximum(p, NLL_FLOOR)
    grad = np.zeros(np.atleast_2d(pi).shape)
    grad[np.arange(grad.shape[0]), np.atleast_1d(idx)] = np.where(p > NLL_FLOOR, -1.0 / pc, 0.0)
    loss = -np.log(pc)
    if np.ndim(label) == 0 and pi.ndim == 1:
        return float(loss[0]), grad[0]
    return loss, grad


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

BETA_FLOOR = 1e-10
RHO_GAP = 1e-2


def bounds_for(net: NetworkSpec, cfg: TrainConfig | None = None):
    """Box constraints per free parameter.

    Weights stay positive (beta above a tiny floor so no node loses its
    inputs).  Production rho keeps the sign it currently has: the power
    family diverges as rho -> 0, so a step across zero would jump between
    unrelated functions.  Values inside the Cobb-Douglas band stay put.
    """
    cfg = cfg or TrainConfig()
    lo, hi = [], []
    for s, name, j in net.theta_slots():
        layer = net.layers[s]
        if name == "beta":
            lo.append(BETA_FLOOR), hi.append(np.inf)
        elif name == "beta0":
            lo.append(0.0), hi.append(np.inf)
        elif name == "rho":
            if net.kind == "production":
                r = float(layer.rho[j])
                if abs(r) < ces.CD_TOL:
                    lo.append(r), hi.append(r)
                elif r > 0:
                    lo.append(RHO_GAP), hi.append(1.0)
                else:
                    lo.append(cfg.rho_min), hi.append(-RHO_GAP)
            else:
                lo.append(1.0), hi.append(cfg.rho_max)
        else:
            lo.append(cfg.tau_min), hi.append(1.0)
    return np.array(lo), np.array(hi)


def project(theta, net: NetworkSpec, cfg: TrainConfig | None = None):
    """Clamp theta onto the constraint set; returns (theta, number clamped)."""
    lo, hi = bounds_for(net, cfg)
    out = np.clip(theta, lo, hi)
    return out, int(np.sum(out != theta))


# ---------------------------------------------------------------------------
# predictions and batch gradients
# ---------------------------------------------------------------------------

def output_direction(y):
    """Unit-sum direction of the observed outputs (ones where y is zero)."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    s = y.sum(-1, keepdims=True)
    return np.where(s > 0, y / np.where(s > 0, s, 1.0), 1.0 / y.shape[1])


def _direction(net, y):
    M = net.widths[-1]
    if M == 1 or y is None:
        return None
    return output_direction(y)


def production_batch(net: NetworkSpec, x, y, p=None, z0=None, Q=None, want_grad=True, t0=None):
    """Loss per row, gradient of the summed loss, and the latent price solution."""
    u = _direction(net, y)
    fr = nw.frontier(net, x, p=p, direction=u, z0=z0, want_lp_grad=want_grad, t0=t0)
    yhat = fr.y
    loss, dv = loss_squared(y, yhat)
    if not want_grad or net.n_free() == 0:
        return loss, np.zeros(net.n_free()), fr
    dldt = np.sum(dv * fr.u, -1)
    if fr.states is None:
        grad = dldt @ fr.lp_grad
        return loss, grad, fr
    st = fr.states
    D = st.flat().shape[1]
    idx = state_index(net.widths)
    mc = np.sum(fr.u * st.pi[-1], -1)
    gh = np.zeros((x.shape[0], D))
    gh[:, idx[("v", 0)]] = fr.prices * (-dldt / mc)[:, None]
    grad = implicit_gradient(net, st, gh, Q=Q)
    return loss, grad, fr


def choice_batch(net: NetworkSpec, U, labels0, Q=None, want_grad=True):
    st = nw.solve_choice(net, U)
    loss, gpi = loss_nll(labels0 + 1, st.pi[-1])
    if not want_grad or net.n_free() == 0:
        return loss, np.zeros(net.n_free()), st
    D = st.flat().shape[1]
    idx = state_index(net.widths)
    gh = np.zeros((U.shape[0], D))
    gh[:, idx[("pi", net.S)]] = gpi
    return loss, implicit_gradient(net, st, gh, Q=Q), st


def batch_loss_grad(net, ds: Dataset, rows, z=None, Q=None, want_grad=True):
    """Mean loss and mean gradient over the given rows; updates warm starts in z."""
    try:
        if net.kind == "production":
            # warm starts: latent log prices, then log output scale in the last column
            z0 = None if z is None else z[rows, :-1]
            t0 = None if z is None else np.exp(z[rows, -1])
            p = None if ds.p is None else ds.p[rows]
            loss, grad, fr = production_batch(net, ds.x[rows], ds.y[rows], p=p, z0=z0, Q=Q,
                                              want_grad=want_grad, t0=t0)
            if z is not None and fr.dual is not None:
                z[rows, :-1] = fr.dual
                z[rows, -1] = np.log(fr.t)
        else:
            loss, grad, _ = choice_batch(net, ds.x[rows], ds.labels[rows], Q=Q, want_grad=want_grad)
    except SolveError as e:
        bad = [] if e.rows is None else [int(rows[r]) for r in np.atleast_1d(e.rows)[:10]]
        raise TrainingError(f"equilibrium solve failed (observations {bad}): {e}") from e
    if not np.all(np.isfinite(loss)):
        bad = rows[~np.isfinite(loss)][:10].tolist()
        raise TrainingError(f"non-finite loss at observations {bad}")
    return float(np.mean(loss)), grad / len(rows)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class _Optimizer:
    def __init__(self, cfg: TrainConfig, n):
        self.cfg = cfg
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta, grad, lr):
        c = self.cfg
        self.t += 1
        if c.optimizer == "plain":
            return theta - lr * grad
        if c.optimizer == "momentum":
            self.m = c.momentum * self.m + grad
            return theta - lr * self.m
        self.m = c.adam_b1 * self.m + (1 - c.adam_b1) * grad
        self.v = c.adam_b2 * self.v + (1 - c.adam_b2) * grad * grad
        mh = self.m / (1 - c.adam_b1 ** self.t)
        vh = self.v / (1 - c.adam_b2 ** self.t)
        return theta - lr * mh / (np.sqrt(vh) + c.adam_eps)


def calibrate_scale(net: NetworkSpec, ds: Dataset) -> NetworkSpec:
    """Rescale the top production block so mean predictions match mean outputs.

    Multiplying the weights (and intercept) of output node m by c scales
    its output by c^tau_m, exactly so for a single output.  Choice networks
    are returned unchanged.
    """
    if net.kind != "production":
        return net
    pred = predict(net, ds)
    ratio = np.mean(ds.y, 0) / np.maximum(np.mean(pred, 0), 1e-300)
    if not np.all(np.isfinite(ratio)) or np.any(ratio <= 0):
        return net
    out = net.copy()
    top = out.layers[-1]
    c = ratio ** (1.0 / top.tau)
    top.beta = top.beta * c[:, None]
    top.beta0 = top.beta0 * c
    return out


def split_indices(n, val_frac, seed):
    """Deterministic shuffled train/validation split."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = int(round(val_frac * n)) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@dataclass
class FitResult:
    net: NetworkSpec
    history: list = field(default_factory=list)


def fit(net: NetworkSpec, ds: Dataset, cfg: TrainConfig | None = None, val: Dataset | None = None,
        on_epoch=None) -> FitResult:
    """Projected gradient descent on the mean training loss.

    History records one dict per epoch with epoch, train_loss, val_loss,
    grad_norm and projections.  Epoch 0 is the initial network, with the
    full training gradient norm; later epochs report the norm of the mean
    minibatch gradient over the epoch.
    """
    cfg = cfg or TrainConfig()
    diag = nw.validate(net)
    if diag:
        raise ValueError("invalid network: " + "; ".join(diag))
    if ds.n == 0:
        raise ValueError("empty dataset")
    if val is None and cfg.val_frac > 0 and ds.n >= 5:
        tr_idx, va_idx = split_indices(ds.n, cfg.val_frac, cfg.seed)
        train, val = ds.subset(tr_idx), ds.subset(va_idx)
    else:
        train = ds
    rng = np.random.default_rng(cfg.seed + 1)
    z_tr = np.zeros((train.n, net.widths[0] + 1)) if net.kind == "production" else None
    z_va = None if val is None or net.kind != "production" else np.zeros((val.n, net.widths[0] + 1))
    all_tr = np.arange(train.n)

    def full(netx, dset, z, grad=True):
        if dset is None:
            return None, None
        rowsets = np.array_split(np.arange(dset.n), max(1, int(np.ceil(dset.n / 2048))))
        tot, g = 0.0, np.zeros(netx.n_free())
        for r in rowsets:
            l, gg = batch_loss_grad(netx, dset, r, z=z, Q=cfg.Q, want_grad=grad)
            tot += l * len(r)
            g += gg * len(r)
        return tot / dset.n, g / dset.n

    theta = net.get_theta()
    theta, _ = project(theta, net, cfg)
    net = net.with_theta(theta)
    loss0, g0 = full(net, train, z_tr)
    vloss0 = full(net, val, z_va, grad=False)[0]
    history = [dict(epoch=0, train_loss=loss0, val_loss=vloss0, grad_norm=float(np.linalg.norm(g0)),
                    projections=0, lr=cfg.lr)]
    if on_epoch:
        on_epoch(history[-1])
    if cfg.optimizer == "lbfgs":
        return _fit_lbfgs(net, train, val, cfg, z_tr, z_va, full, history, on_epoch)
    opt = _Optimizer(cfg, theta.size)
    lr = cfg.lr
    prev_loss = loss0
    best_val, since_best = (vloss0 if vloss0 is not None else np.inf), 0
    for epoch in range(1, cfg.epochs + 1):
        theta_prev, opt_prev = theta.copy(), (opt.m.copy(), opt.v.copy(), opt.t)
        perm = rng.permutation(train.n)
        gsum = np.zeros(theta.size)
        nproj = 0
        nb = 0
        for start in range(0, train.n, cfg.batch_size):
            rows = np.sort(perm[start:start + cfg.batch_size])
            _, g = batch_loss_grad(net, train, rows, z=z_tr, Q=cfg.Q)
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in epoch {epoch}")
            gsum += g
            nb += 1
            if lr > 0 and theta.size:
                theta, k = project(opt.step(theta, g, lr), net, cfg)
                nproj += k
                net = net.with_theta(theta)
        tl = full(net, train, z_tr, grad=False)[0]
        if cfg.halve_on_increase and tl > prev_loss:
            theta = theta_prev
            opt.m, opt.v, opt.t = opt_prev
            net = net.with_theta(theta)
            lr *= 0.5
            tl = prev_loss
        vl = full(net, val, z_va, grad=False)[0]
        history.append(dict(epoch=epoch, train_loss=tl, val_loss=vl,
                            grad_norm=float(np.linalg.norm(gsum / max(nb, 1))), projections=nproj, lr=lr))
        if on_epoch:
            on_epoch(history[-1])
        prev_loss = tl
        lr *= cfg.lr_decay
        if cfg.window is not None and vl is not None:
            if vl < best_val - 1e-12:
                best_val, since_best = vl, 0
            else:
                since_best += 1
                if since_best >= cfg.window:
                    break
    return FitResult(net=net, history=history)


def _fit_lbfgs(net, train, val, cfg, z_tr, z_va, full, history, on_epoch):
    """Full-batch L-BFGS-B on the box constraints; one history record per iteration."""
    from scipy.optimize import minimize

    lo, hi = bounds_for(net, cfg)
    base = net
    cache = {}
    # last accepted iterate; a trial point whose solve fails is rejected with a
    # penalty so the line search backtracks towards it
    acc = {"l": history[-1]["train_loss"], "z": z_tr.copy() if z_tr is not None else None}

    def evaluate_at(theta):
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                l, g = full(base.with_theta(theta), train, z_tr)
            if np.isfinite(l) and np.all(np.isfinite(g)):
                return l, g
        except (TrainingError, SolveError, ValueError, FloatingPointError):
            pass
        if acc["z"] is not None:
            z_tr[...] = acc["z"]
        d = theta - callback.theta
        return acc["l"] + 1e3 * (1.0 + abs(acc["l"])), 1e3 * (1.0 + abs(acc["l"])) * d / max(float(d @ d), 1e-300)

    def fun(theta):
        key = theta.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = evaluate_at(theta)
        return cache[key]

    best = {"val": np.inf, "since": 0}

    class _Stop(Exception):
        pass

    def callback(theta):
        netx = base.with_theta(theta)
        l, g = fun(theta)
        vl = full(netx, val, z_va, grad=False)[0]
        history.append(dict(epoch=len(history), train_loss=float(l), val_loss=vl,
                            grad_norm=float(np.linalg.norm(g)), projections=int(np.sum((theta <= lo) | (theta >= hi))),
                            lr=0.0))
        if on_epoch:
            on_epoch(history[-1])
        if cfg.window is not None and vl is not None:
            if vl < best["val"] - 1e-12:
                best["val"], best["since"] = vl, 0
            else:
                best["since"] += 1
                if best["since"] >= cfg.window:
                    raise _Stop
        callback.theta = theta.copy()
        acc["l"] = float(l)
        if z_tr is not None:
            acc["z"] = z_tr.copy()

    callback.theta = net.get_theta()
    bounds = list(zip(lo, np.where(np.isfinite(hi), hi, None)))
    try:
        minimize(fun, callback.theta, jac=True, method="L-BFGS-B", bounds=bounds, callback=callback,
                 options={"maxiter": cfg.epochs, "ftol": 1e-15, "gtol": 1e-12, "maxcor": 20})
    except _Stop:
        pass
    return FitResult(net=base.with_theta(callback.theta), history=history)


def history_lines(history, header=None):
    """Line-delimited JSON records (optional header first)."""
    lines = []
    if header is not None:
        lines.append(json.dumps(header, sort_keys=False))
    for h in history:
        lines.append(json.dumps({k: h[k] for k in ("epoch", "train_loss", "val_loss", "grad_norm", "projections", "lr")}))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict(net: NetworkSpec, ds: Dataset, output_bound: float | None = None):
    """Predictions for a dataset; production outputs are clipped at 2B."""
    if net.kind == "choice":
        return nw.solve_choice(net, ds.x).pi[-1]
    u = _direction(net, ds.y)
    yhat = nw.frontier(net, ds.x, p=ds.p, direction=u).y
    if output_bound is not None:
        yhat = np.minimum(yhat, 2.0 * output_bound)
    return yhat


def evaluate(net: NetworkSpec, ds: Dataset, output_bound: float | None = None) -> dict:
    """Mean loss plus accuracy/calibration (choice) or per-output RMSE (production)."""
    pred = predict(net, ds, output_bound)
    if net.kind == "choice":
        loss, _ = loss_nll(ds.labels + 1, pred)
        M = pred.shape[1]
        freq = np.bincount(ds.labels, minlength=M) / ds.n
        return {
            "n": int(ds.n),
            "loss": float(np.mean(loss)),
            "accuracy": float(np.mean(np.argmax(pred, -1) == ds.labels)),
            "calibration": [{"alternative": m + 1, "mean_predicted": float(pred[:, m].mean()),
                             "observed": float(freq[m])} for m in range(M)],
        }
    loss, _ = loss_squared(ds.y, pred)
    rmse = np.sqrt(np.mean((ds.y - pred) ** 2, 0))
    return {"n": int(ds.n), "loss": float(np.mean(loss)), "rmse": [float(r) for r in rmse],
            "sup_error": float(np.max(np.abs(ds.y - pred)))}


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
