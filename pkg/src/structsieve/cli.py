"""Command-line interface.

    structsieve train    --config CFG [--seed N] [--out-dir DIR] [--quiet]
    structsieve simulate --config CFG ...
    structsieve eval     NET DATA [--config CFG] ...
    structsieve approx   --config CFG ...
    structsieve inspect  NET
    structsieve rates    --config CFG ...

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 training or
solver failure.  Set STRUCTSIEVE_THREADS to pin the BLAS thread count
(1 gives the reproducibility mode used by the determinism tests).
"""

from __future__ import annotations

import os

_threads = os.environ.get("STRUCTSIEVE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import math  # noqa: E402
import sys  # noqa: E402

import numpy as np  # noqa: E402
import yaml  # noqa: E402

from . import __version__, architect, synth  # noqa: E402
from . import network as nw  # noqa: E402
from . import train as tr  # noqa: E402
from .data import Dataset, DataError, atomic_write, read_csv, to_csv_text  # noqa: E402

CONFIG_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

class Config:
    """Parsed config plus its verbatim text and location."""

    def __init__(self, path):
        self.path = os.path.abspath(path)
        if not os.path.exists(self.path):
            raise ConfigError(f"config file not found: {path}")
        with open(self.path) as f:
            self.text = f.read()
        try:
            d = yaml.safe_load(self.text)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: cannot parse config: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        v = d.get("version", CONFIG_VERSION)
        if v != CONFIG_VERSION:
            raise ConfigError(f"{path}: unsupported config version {v!r}")
        self.d = d

    def get(self, key, default=None):
        return self.d.get(key, default)

    def section(self, key):
        val = self.d.get(key) or {}
        if not isinstance(val, dict):
            raise ConfigError(f"config section {key!r} must be a mapping")
        return val

    def require(self, sec: dict, key, where):
        if key not in sec:
            raise ConfigError(f"config key {where}.{key} is required")
        return sec[key]

    def resolve(self, p):
        return p if os.path.isabs(p) else os.path.join(os.path.dirname(self.path), p)


def _seed(cfg: Config | None, args):
    if args.seed is not None:
        return int(args.seed)
    return int(cfg.get("seed", 0)) if cfg else 0


def _kind(cfg: Config):
    kind = cfg.get("kind")
    if kind not in ("production", "choice"):
        raise ConfigError("config key kind must be 'production' or 'choice'")
    return kind


def _roles(kind, sec):
    if kind == "production":
        if "inputs" not in sec or "outputs" not in sec:
            raise ConfigError("production data needs data.inputs and data.outputs column lists")
        roles = {"inputs": list(sec["inputs"]), "outputs": list(sec["outputs"])}
        if sec.get("prices"):
            if not isinstance(sec["prices"], dict):
                raise ConfigError("data.prices must map input columns to price columns")
            unknown = set(sec["prices"]) - set(roles["inputs"])
            if unknown:
                raise ConfigError(f"data.prices refers to unknown inputs {sorted(unknown)}")
            roles["prices"] = dict(sec["prices"])
        return roles
    if "utilities" not in sec:
        raise ConfigError("choice data needs a data.utilities column list")
    return {"utilities": list(sec["utilities"]), "label": sec.get("label", "choice")}


def _load_data(cfg: Config, kind):
    sec = cfg.section("data")
    path = cfg.resolve(cfg.require(sec, "path", "data"))
    return read_csv(path, kind, _roles(kind, sec))


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=False, default=_plain) + "\n"


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _header(command, cfg: Config | None, seed):
    h = {"version": CONFIG_VERSION, "command": command, "structsieve": __version__, "seed": seed}
    if cfg is not None:
        h["config_path"] = os.path.basename(cfg.path)
        h["config_text"] = cfg.text
    return h


def _write_all(out_dir, files: dict):
    """Write every artifact only after all of them have been computed."""
    paths = {}
    for name, text in files.items():
        p = os.path.join(out_dir, name)
        atomic_write(p, text)
        paths[name] = p
    return paths


def _say(args, *msg):
    if not args.quiet:
        print(*msg)


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------

def build_model(cfg: Config, kind, ds: Dataset | None, seed):
    sec = cfg.section("model")
    builder = sec.get("builder", "widths")
    try:
        if builder == "file":
            net = nw.load(cfg.resolve(cfg.require(sec, "path", "model")))
            if net.kind != kind:
                raise ConfigError(f"model file holds a {net.kind} network, config kind is {kind}")
            return net
        if builder == "widths":
            return architect.build_from_widths(kind, cfg.require(sec, "widths", "model"), seed=seed,
                                               rho0=sec.get("rho0"))
        if kind != "production":
            raise ConfigError(f"builder {builder!r} is only available for production models")
        K = ds.x.shape[1]
        M = ds.y.shape[1]
        if builder == "ces_sieve":
            Q = sec.get("Q", "auto")
            if Q == "auto":
                Q = architect.sieve_width(max(ds.n, 3), K)
            return architect.build_ces_sieve(K, int(Q), M, seed=seed, rho0=sec.get("rho0", 0.5))
        if M != 1 and builder in ("sp_ces", "4l_ces"):
            raise ConfigError(f"builder {builder!r} produces a single output")
        if builder == "sp_ces":
            return architect.build_sp_ces(int(sec.get("S", 1)), int(cfg.require(sec, "d_star", "model")),
                                          int(cfg.require(sec, "Q", "model")), K, seed=seed)
        if builder == "4l_ces":
            return architect.build_4l_ces(int(sec.get("S", 1)), K, int(cfg.require(sec, "Q", "model")),
                                          modules=int(sec.get("modules", 1)), seed=seed)
        if builder == "two_stage":
            pts = architect.support_points_from_data(ds.x, ds.y, sec.get("max_points"))
            return architect.build_two_stage_production(pts)
    except (KeyError, TypeError) as e:
        raise ConfigError(f"bad model section: {e}") from None
    except ValueError as e:
        if isinstance(e, (ConfigError, DataError)):
            raise
        raise ConfigError(f"bad model section: {e}") from None
    raise ConfigError(f"unknown model builder {builder!r}")


def _train_config(cfg: Config, seed):
    sec = dict(cfg.section("train"))
    calibrate = bool(sec.pop("calibrate", True))
    sec["seed"] = seed
    try:
        return tr.TrainConfig.from_dict(sec), calibrate
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad train section: {e}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args):
    cfg = Config(args.config)
    kind = _kind(cfg)
    seed = _seed(cfg, args)
    tcfg, calibrate = _train_config(cfg, seed)
    ds = _load_data(cfg, kind)
    net = build_model(cfg, kind, ds, seed)
    diag = nw.validate(net)
    if diag:
        raise ConfigError("model is invalid: " + "; ".join(diag))
    if calibrate:
        net = tr.calibrate_scale(net, ds)

    def show(h):
        v = "" if h["val_loss"] is None else f" val {h['val_loss']:.6g}"
        _say(args, f"epoch {h['epoch']:4d} train {h['train_loss']:.6g}{v} |grad| {h['grad_norm']:.3g}")

    res = tr.fit(net, ds, tcfg, on_epoch=show)
    metrics = tr.evaluate(res.net, ds, tcfg.output_bound)
    final = res.history[-1]
    summary = {"header": _header("train", cfg, seed), "epochs_run": final["epoch"],
               "final_train_loss": final["train_loss"], "final_val_loss": final["val_loss"],
               "params": architect.param_count(res.net), "full_data": metrics}
    out = cfg.section("output")
    files = {
        out.get("network", "network.json"): nw.dumps(res.net),
        out.get("history", "history.jsonl"): tr.history_lines(res.history, _header("train", cfg, seed)),
        out.get("metrics", "metrics.json"): _json(summary),
    }
    paths = _write_all(args.out_dir, files)
    _say(args, f"final train loss {final['train_loss']:.6g}; full-data loss {metrics['loss']:.6g}")
    for p in paths.values():
        _say(args, f"wrote {p}")
    return EXIT_OK


def _utility_sampler(sec, M):
    typ = sec.get("type", "normal")
    if typ == "normal":
        scale = float(sec.get("scale", 1.0))
        return lambda rng, n: rng.normal(0.0, scale, (n, M))
    if typ == "uniform":
        lo, hi = float(sec.get("low", -1.0)), float(sec.get("high", 1.0))
        return lambda rng, n: rng.uniform(lo, hi, (n, M))
    if typ == "fixed":
        val = np.asarray(sec["value"], float)
        return lambda rng, n: np.broadcast_to(val, (n, M)).copy()
    raise ConfigError(f"unknown utility sampler {typ!r}")


def cmd_simulate(args):
    cfg = Config(args.config)
    kind = _kind(cfg)
    seed = _seed(cfg, args)
    sec = cfg.section("simulate")
    n = int(cfg.require(sec, "n", "simulate"))
    if kind == "production":
        try:
            truth = synth.technology_from_config(cfg.require(sec, "truth", "simulate"))
            ds = synth.sample_production(truth, n, float(sec.get("noise_sd", 0.0)), seed=seed,
                                         box=tuple(sec.get("box", synth.DEFAULT_BOX)))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad simulate section: {e}") from None
    else:
        net = build_model(cfg, kind, None, seed)
        M = net.widths[-1]
        ds = synth.simulate_choices(net, x_sampler=_utility_sampler(sec.get("utilities") or {}, M), n=n, seed=seed)
    name = cfg.section("output").get("data", "data.csv")
    paths = _write_all(args.out_dir, {name: to_csv_text(ds),
                                      "simulate.json": _json({"header": _header("simulate", cfg, seed), "n": n})})
    _say(args, f"simulated {n} {kind} observations")
    for p in paths.values():
        _say(args, f"wrote {p}")
    return EXIT_OK


def _default_roles_for(net):
    if net.kind == "production":
        K = net.widths[0] - len(net.fixed_inputs())
        return {"inputs": [f"x{k + 1}" for k in range(K)], "outputs": [f"y{m + 1}" for m in range(net.widths[-1])]}
    return {"utilities": [f"u{m + 1}" for m in range(net.widths[-1])], "label": "choice"}


def cmd_eval(args):
    cfg = Config(args.config) if args.config else None
    try:
        net = nw.load(args.network)
    except FileNotFoundError:
        raise DataError(f"network file not found: {args.network}") from None
    except (ValueError, KeyError) as e:
        raise DataError(f"{args.network}: cannot read network: {e}") from None
    roles = _default_roles_for(net)
    bound = None
    if cfg is not None:
        sec = cfg.section("data")
        if sec:
            roles = _roles(net.kind, sec)
        bound = cfg.section("train").get("output_bound")
    ds = read_csv(args.data, net.kind, roles)
    metrics = tr.evaluate(net, ds, bound)
    text = _json({"header": _header("eval", cfg, None), "network": os.path.basename(args.network),
                  "data": os.path.basename(args.data), "metrics": metrics})
    _write_all(args.out_dir, {"eval.json": text})
    _say(args, f"loss {metrics['loss']:.6g}")
    if net.kind == "production":
        _say(args, f"sup error {metrics['sup_error']:.6g}")
    else:
        _say(args, f"accuracy {metrics['accuracy']:.6g}")
    return EXIT_OK


def _approx_production(cfg, sec, args):
    truth = synth.technology_from_config(cfg.require(sec, "truth", "approx"))
    if truth.M != 1:
        raise ConfigError("the polytope builder is configured for a single output here")
    lo = np.broadcast_to(np.asarray(sec.get("low", 0.5), float), (truth.K,))
    hi = np.broadcast_to(np.asarray(sec.get("high", 2.0), float), (truth.K,))
    delta = float(sec.get("delta", 0.01))
    grid_n = int(sec.get("grid_points", 10))
    # evaluation grid strictly inside the support box, so every point is spanned
    pad = 0.05 * (hi - lo)
    axes = [np.linspace(a + p, b - p, grid_n) for a, b, p in zip(lo, hi, pad)]
    G = np.array(np.meshgrid(*axes, indexing="ij")).reshape(truth.K, -1).T
    yG = truth(G)
    per_axis = int(sec.get("per_axis", 2))
    max_axis = int(sec.get("max_per_axis", 64))
    while True:
        pts = architect.grid_support_points(lambda w: truth(w[None])[0], lo, hi, per_axis)
        net = architect.build_two_stage_production(pts)
        err = float(np.max(np.abs(nw.predict_outputs(net, G) - yG)))
        _say(args, f"support grid {per_axis}^{truth.K}: sup error {err:.3g}")
        if err <= delta or per_axis >= max_axis:
            break
        per_axis = min(2 * per_axis, max_axis)
    grid = Dataset(kind="production", x=G, y=yG)
    return net, {"builder": "two_stage", "per_axis": per_axis, "support_points": len(pts),
                 "sup_error": err, "delta": delta, "met": err <= delta}, {"grid.csv": to_csv_text(grid)}


def _approx_choice(cfg, sec, args):
    gen = cfg.require(sec, "generating", "approx")
    F0, M = synth.generating_from_config(gen)
    delta = float(sec.get("delta", 0.05))
    L = int(sec.get("L", max(M, 2)))
    max_L = int(sec.get("max_L", 64))
    variant = sec.get("variant", "tangent")
    rng = np.random.default_rng(int(sec.get("grid_seed", 0)))
    U = rng.uniform(-1.0, 1.0, (int(sec.get("grid_points", 200)), M))
    mu0 = np.array([synth.gev_ccp(F0, u) for u in U])
    while True:
        net = architect.build_cnl_grid_approximator(F0, M, L, variant=variant, dense=bool(sec.get("dense", False)))
        err = float(np.max(np.abs(nw.predict_outputs(net, U) - mu0)))
        _say(args, f"grid resolution L={L}: max choice-probability error {err:.3g}")
        if err <= delta or L >= max_L:
            break
        L = min(2 * L, max_L)
    grid = Dataset(kind="choice", x=U, labels=np.argmax(mu0, -1))
    return net, {"builder": "cnl_grid", "variant": variant, "L": L, "ccp_error": err, "delta": delta,
                 "met": err <= delta}, {"grid.csv": to_csv_text(grid)}


def cmd_approx(args):
    cfg = Config(args.config)
    kind = _kind(cfg)
    sec = cfg.section("approx")
    try:
        if kind == "production":
            net, report, extra = _approx_production(cfg, sec, args)
        else:
            net, report, extra = _approx_choice(cfg, sec, args)
    except (KeyError, TypeError) as e:
        raise ConfigError(f"bad approx section: {e}") from None
    except ValueError as e:
        if isinstance(e, (ConfigError, DataError)):
            raise
        raise ConfigError(f"bad approx section: {e}") from None
    report["params"] = architect.param_count(net)
    out = cfg.section("output")
    files = {out.get("network", "network.json"): nw.dumps(net),
             "approx.json": _json({"header": _header("approx", cfg, None), **report})}
    files.update(extra)
    paths = _write_all(args.out_dir, files)
    for p in paths.values():
        _say(args, f"wrote {p}")
    return EXIT_OK


def inspect_report(net) -> dict:
    diag = nw.validate(net)
    W = architect.param_count(net)
    layers = []
    for s, l in enumerate(net.layers):
        layers.append({"block": s, "nodes": int(l.beta.shape[0]), "edges": int(l.mask.sum()),
                       "free": int(sum(l.free_mask(n).sum() for n in nw.PARAM_NAMES)),
                       "rho": [float(np.min(l.rho)), float(np.max(l.rho))],
                       "tau": [float(np.min(l.tau)), float(np.max(l.tau))]})
    return {"kind": net.kind, "widths": [int(w) for w in net.widths], "params": W,
            "vc_bound": architect.vc_bound(W), "valid": not diag, "diagnostics": diag,
            "acyclic": bool(nw.is_acyclic(net)), "piecewise_linear": bool(nw.is_piecewise_linear(net)),
            "blocks": layers}


def cmd_inspect(args):
    try:
        net = nw.load(args.network)
    except FileNotFoundError:
        raise DataError(f"network file not found: {args.network}") from None
    except (ValueError, KeyError) as e:
        raise DataError(f"{args.network}: cannot read network: {e}") from None
    rep = inspect_report(net)
    print(f"kind              {rep['kind']}")
    print(f"widths            {' '.join(str(w) for w in rep['widths'])}")
    print(f"free parameters   {rep['params']}")
    print(f"vc bound          {rep['vc_bound']:.4f}")
    print(f"constraints       {'ok' if rep['valid'] else 'VIOLATED'}")
    for d in rep["diagnostics"]:
        print(f"  - {d}")
    print(f"acyclic           {'yes' if rep['acyclic'] else 'no'}")
    print(f"piecewise linear  {'yes' if rep['piecewise_linear'] else 'no'}")
    for b in rep["blocks"]:
        print(f"  block {b['block']}: {b['nodes']} nodes, {b['edges']} edges, {b['free']} free, "
              f"rho [{b['rho'][0]:.3g}, {b['rho'][1]:.3g}], tau [{b['tau'][0]:.3g}, {b['tau'][1]:.3g}]")
    return EXIT_OK


def loglog_slope(n, mse):
    """Least-squares slope of log mse on log n with its standard error."""
    x, y = np.log(np.asarray(n, float)), np.log(np.asarray(mse, float))
    if x.size < 2:
        return None, None
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    if x.size < 3:
        return float(coef[1]), None
    resid = y - X @ coef
    s2 = float(resid @ resid) / (x.size - 2)
    cov = s2 * np.linalg.inv(X.T @ X)
    return float(coef[1]), float(math.sqrt(cov[1, 1]))


def cmd_rates(args):
    cfg = Config(args.config)
    if _kind(cfg) != "production":
        raise ConfigError("the rate experiment runs on production models")
    seed = _seed(cfg, args)
    sec = cfg.section("rates")
    ladder = [int(n) for n in cfg.require(sec, "ladder", "rates")]
    if not ladder or any(n < 3 for n in ladder):
        raise ConfigError("rates.ladder needs sample sizes of at least 3")
    try:
        truth = synth.technology_from_config(cfg.require(sec, "truth", "rates"))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad rates.truth: {e}") from None
    noise = float(sec.get("noise_sd", 0.1))
    box = tuple(sec.get("box", synth.DEFAULT_BOX))
    d = int(sec.get("d", truth.K))
    test = synth.sample_production(truth, int(sec.get("test_n", 2000)), 0.0, seed=seed + 7919, box=box)
    tsec = dict(cfg.section("train"))
    batches = tsec.pop("batches_per_epoch", None)
    tsec.pop("calibrate", None)
    # each rung starts from the previous estimate embedded in the wider sieve
    warm = bool(sec.get("warm_start", True))
    rows = []
    prev = None
    for i, n in enumerate(ladder):
        Q = architect.sieve_width(n, d)
        ds = synth.sample_production(truth, n, noise, seed=seed * 1000 + i, box=box)
        if warm and prev is not None and Q >= prev.widths[1]:
            net = architect.widen_ces_sieve(prev, Q, seed=seed)
        else:
            net = tr.calibrate_scale(architect.build_ces_sieve(truth.K, Q, truth.M, seed=seed), ds)
        t = dict(tsec, seed=seed)
        t.setdefault("val_frac", 0.0)
        if batches:
            t["batch_size"] = max(1, int(math.ceil(n * (1 - t.get("val_frac", 0.2)) / int(batches))))
        try:
            tc = tr.TrainConfig.from_dict(t)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad train section: {e}") from None
        res = tr.fit(net, ds, tc)
        prev = res.net
        mse = tr.evaluate(res.net, test)["loss"]
        rows.append({"n": n, "sieve_width": Q, "params": architect.param_count(res.net),
                     "test_mse": mse, "train_loss": res.history[-1]["train_loss"]})
        _say(args, f"n={n:6d} width={Q:3d} test MSE {mse:.6g}")
    slope, se = loglog_slope([r["n"] for r in rows], [r["test_mse"] for r in rows])
    lines = [f"#version={CONFIG_VERSION}", "n,sieve_width,params,test_mse,train_loss"]
    lines += [f"{r['n']},{r['sieve_width']},{r['params']},{r['test_mse']!r},{r['train_loss']!r}" for r in rows]
    summary = {"header": _header("rates", cfg, seed), "rows": rows, "slope": slope, "slope_se": se,
               "decreasing": all(b["test_mse"] < a["test_mse"] for a, b in zip(rows, rows[1:]))}
    out = cfg.section("output")
    paths = _write_all(args.out_dir, {out.get("table", "rates.csv"): "\n".join(lines) + "\n",
                                      out.get("summary", "rates.json"): _json(summary)})
    if slope is not None:
        _say(args, f"log-log slope {slope:.4f}" + ("" if se is None else f" (se {se:.4f})"))
    for p in paths.values():
        _say(args, f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def make_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out-dir", default=".", help="directory for output artifacts")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")
    p = argparse.ArgumentParser(prog="structsieve", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"structsieve {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (("train", cmd_train, "fit a network to a dataset"),
                            ("simulate", cmd_simulate, "generate a synthetic dataset"),
                            ("approx", cmd_approx, "build a constructive approximating network"),
                            ("rates", cmd_rates, "run the estimation-rate ladder")):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.add_argument("--config", required=True)
        sp.set_defaults(fn=fn)
    sp = sub.add_parser("eval", parents=[common], help="score a network on a dataset")
    sp.add_argument("network")
    sp.add_argument("data")
    sp.add_argument("--config", default=None, help="optional config supplying data column roles")
    sp.set_defaults(fn=cmd_eval)
    sp = sub.add_parser("inspect", parents=[common], help="summarize a network file")
    sp.add_argument("network")
    sp.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (tr.TrainingError, nw.SolveError) as e:
        print(f"training failed: {e}", file=sys.stderr)
        return EXIT_TRAIN
