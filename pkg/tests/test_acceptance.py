"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.optimize import minimize

from structsieve import architect, ces, cnl, synth
from structsieve import implicit as im
from structsieve import network as nw
from structsieve import train as tr
from structsieve.data import Dataset
from structsieve.network import Layer, NetworkSpec, state_index

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture
def verdict(capsys):
    def say(n, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return say


def rel(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300)


# ---------------------------------------------------------------------------
# choice probabilities
# ---------------------------------------------------------------------------

def test_01_ccp_matches_derivative_route(verdict):
    t0 = time.time()
    worst = 0.0
    rng = np.random.default_rng(0)
    for k in range(100):
        M, S = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        net = synth.random_choice_net(M, S, seed=k, rho_range=(1.0, 5.0))
        F = lambda w, net=net: float(cnl.eval_generating(net, w[None])[0])
        for U in rng.normal(size=(3, M)):
            worst = max(worst, np.max(np.abs(cnl.ccp(net, U[None])[0] - cnl.ccp_direct(F, U))))
    dt = time.time() - t0
    verdict(1, worst <= 1e-6 and dt < 10, f"max |recursion - derivative route| = {worst:.2e} over 100 nets, {dt:.1f} s")


def test_02_nested_logit_hand_instance(verdict):
    # F(w) = sqrt(w1^2 + w2^2) + w3 at w = 1: P3 = 1 / (1 + sqrt 2), the rest split evenly
    top = Layer.create(1, 2, beta=[[1.0, 1.0]], rho=1.0, frozen={"tau": True, "beta0": True})
    nests = Layer.create(2, 3, beta=[[1, 1, 0], [0, 0, 1]], mask=[[1, 1, 0], [0, 0, 1]], rho=[2.0, 1.0],
                         frozen={"tau": True, "beta0": True})
    net = NetworkSpec("choice", [1, 2, 3], [top, nests])
    got = cnl.ccp(net, np.zeros((1, 3)))[0]
    p3 = 1 / (1 + np.sqrt(2))
    err = np.max(np.abs(got - [(1 - p3) / 2, (1 - p3) / 2, p3]))
    frozen = np.max(np.abs(got - [0.292893, 0.292893, 0.414214]))
    verdict(2, err <= 1e-9 and frozen <= 5e-7, f"probabilities {np.round(got, 6).tolist()}, error {err:.1e}")


def test_03_logit_reduction(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for M in (2, 3, 5):
        net = NetworkSpec("choice", [1, M], [Layer.create(1, M, beta=1.0, rho=1.0,
                                                          frozen={"tau": True, "beta0": True})])
        U = rng.normal(scale=3.0, size=(1000, M))
        e = np.exp(U - U.max(1, keepdims=True))
        worst = max(worst, np.max(np.abs(cnl.ccp(net, U) - e / e.sum(1, keepdims=True))))
    verdict(3, worst <= 1e-12, f"max |ccp - softmax| = {worst:.1e} on 1000 utility vectors")


def test_04_sequential_sampling_matches_ccp(verdict):
    t0 = time.time()
    worst = 0.0
    for k in range(10):
        net = synth.random_choice_net(4, 1 + k % 3, seed=100 + k)
        rng = np.random.default_rng(k)
        U = rng.normal(size=4)
        draws = synth.sample_paths(net, np.tile(U, (100_000, 1)), rng)
        freq = np.bincount(draws, minlength=4) / draws.size
        worst = max(worst, np.max(np.abs(freq - cnl.ccp(net, U[None])[0])))
    dt = time.time() - t0
    verdict(4, worst <= 0.01 and dt < 30, f"max |frequency - ccp| = {worst:.4f} on 10 nets, {dt:.1f} s")


# ---------------------------------------------------------------------------
# implicit gradient
# ---------------------------------------------------------------------------

def choice_loss(net, U, labels):
    return float(np.sum(tr.loss_nll(labels + 1, nw.solve_choice(net, U).pi[-1])[0]))


def choice_grad(net, U, labels, Q):
    st = nw.solve_choice(net, U)
    gh = np.zeros((U.shape[0], st.flat().shape[1]))
    gh[:, state_index(net.widths)[("pi", net.S)]] = tr.loss_nll(labels + 1, st.pi[-1])[1]
    return im.implicit_gradient(net, st, gh, Q=Q)


def central_fd(f, theta, h=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h * max(1.0, abs(theta[i]))
        g[i] = (f(theta + e) - f(theta - e)) / (2 * e[i])
    return g


def test_05_implicit_gradient_against_finite_differences(verdict):
    notes = []
    ok = True
    sharp = {1: False, 2: False, 3: False}
    rng = np.random.default_rng(5)
    # choice nets: Q = S is exact for S <= 2; for S = 3 the exact order is 2S - 2 = 4
    for S in (1, 2, 3):
        for k in range(3):
            net = synth.random_choice_net(4, S, seed=10 * S + k, rho_range=(1.0, 4.0))
            U = rng.normal(size=(6, 4))
            lab = rng.integers(0, 4, 6)
            Q = S if S <= 2 else 2 * S - 2
            g = choice_grad(net, U, lab, Q)
            fd = central_fd(lambda th: choice_loss(net.with_theta(th), U, lab), net.get_theta(), h=1e-5)
            e = rel(g, fd)
            ok &= e <= 1e-8
            notes.append(e)
            # beyond the nilpotency index the series is exact, so g no longer moves with Q
            for Qb in (Q + 1, Q + 3, 3 * S):
                ok &= np.array_equal(choice_grad(net, U, lab, Qb), g)
            st = nw.solve_choice(net, U[:1])
            A = im.jacobian_states(net, st).toarray()[0]
            ok &= not np.any(np.linalg.matrix_power(A, 2 * S - 1))
            # sparse nests can shorten every path, so sharpness is asked of the fleet, not each net
            sharp[S] |= S == 1 or bool(np.any(np.linalg.matrix_power(A, 2 * S - 2)))
    ok &= all(sharp.values())
    choice_worst = max(notes)
    # production nets with cycles (tau < 1, beta0 > 0): adaptive Q from the spectral bound
    prod = []
    for k in range(4):
        net = synth.random_production_net([2, 3, 1], seed=40 + k, tau_range=(0.85, 1.0), beta0_max=0.2)
        x = rng.uniform(0.7, 1.5, (5, 2))
        y = nw.frontier(net, x).y * rng.uniform(0.8, 1.2, (5, 1))
        loss = lambda th: float(np.sum(tr.production_batch(net.with_theta(th), x, y, want_grad=False)[0]))
        _, g, _ = tr.production_batch(net, x, y)
        fd = central_fd(loss, net.get_theta())
        prod.append(rel(g, fd))
    ok &= max(prod) <= 1e-4
    verdict(5, ok, f"choice worst relative error {choice_worst:.1e} (bound 1e-8), "
                   f"production {max(prod):.1e} (bound 1e-4), constant in Q past the nilpotency index")


def test_06_truncation_remainder_bound(verdict):
    checked, worst_ratio, bad = 0, 0.0, []
    for k in range(20):
        net = synth.random_production_net([2, 3, 2, 1], seed=600 + k, tau_range=(0.9, 1.0), beta0_max=0.05)
        rng = np.random.default_rng(k)
        x = rng.uniform(0.7, 1.5, (1, 2))
        y = nw.frontier(net, x).y * 0.9
        fr = nw.frontier(net, x, direction=np.ones((1, 1)))
        st = fr.states
        dldt = -2.0 * (y[0, 0] - fr.t[0])
        gh = np.zeros((1, st.flat().shape[1]))
        gh[0, state_index(net.widths)[("v", 0)]] = fr.prices[0] * (-dldt / st.pi[-1][0, 0])
        J = im.jacobian_states(net, st)
        Jt = im.jacobian_params(net, st).toarray()[0]
        # the bound holds in any operator norm; the Perron-weighted max-row-sum norm certifies contraction
        B, s = im.perron_scaling(J)
        lam = im.spectral_bound(B, method="inf")
        dense = B.toarray()[0]
        assert lam == pytest.approx(np.max(np.abs(dense).sum(1)), rel=1e-12)
        if not lam < 1:
            bad.append(k)
            continue
        scale_g = np.max(np.abs(gh[0] / s[0]))
        scale_t = np.max(np.abs(Jt * s[0][None]).sum(1))
        for Q in (1, 2, 4):
            tail = Jt @ (im.neumann_apply(J, gh, 2 * Q) - im.neumann_apply(J, gh, Q))[0]
            bound = lam ** (Q + 1) / (1 - lam) * scale_g * scale_t
            worst_ratio = max(worst_ratio, np.max(np.abs(tail)) / bound)
        checked += 1
    ok = checked == 20 and worst_ratio <= 1.0
    verdict(6, ok, f"{checked}/20 nets with weighted bound < 1 (not: {bad}); max tail/bound = {worst_ratio:.3f}")


# ---------------------------------------------------------------------------
# duality
# ---------------------------------------------------------------------------

def min_expenditure(prices, v, p):
    """Cheapest input vector producing v, by constrained minimisation."""
    K = len(prices)
    cons = {"type": "ineq", "fun": lambda w: ces.eval_ces(np.exp(w), p) / v - 1.0}
    starts = [np.log(ces.node_demand(prices, v, p)) + d for d in (0.3, -0.2)] + [np.zeros(K)]
    best = None
    for w0 in starts:
        r = minimize(lambda w: float(prices @ np.exp(w)), w0, constraints=[cons], method="SLSQP",
                     options={"ftol": 1e-14, "maxiter": 500})
        if ces.eval_ces(np.exp(r.x), p) >= v * (1 - 1e-9) and (best is None or r.fun < best):
            best = r.fun
    return best


def test_07_duality_and_shephard(verdict):
    rng = np.random.default_rng(7)
    gap = shep = marg = 0.0
    lower_ok = True
    for k in range(30):
        K = int(rng.integers(2, 4))
        rho = [0.5, -1.0, 0.0, 0.8, -3.0, 1.0][k % 6]
        p = ces.CesParams(beta=rng.uniform(0.5, 2, K), rho=rho, tau=rng.uniform(0.7, 1.0))
        prices = rng.uniform(0.5, 2, K)
        v = rng.uniform(0.5, 2)
        C = ces.ces_cost(prices, v, p)
        # every feasible input vector costs at least C
        for _ in range(20):
            w = rng.uniform(0.1, 5, K)
            w *= (v / ces.eval_ces(w, p)) ** (1 / p.tau) * rng.uniform(1.0, 1.5)
            lower_ok &= prices @ w >= C * (1 - 1e-12)
        if rho != 1.0:
            gap = max(gap, abs(min_expenditure(prices, v, p) - C) / C)
        h = 1e-6
        num = np.array([(ces.ces_cost(prices + h * e, v, p) - ces.ces_cost(prices - h * e, v, p)) / (2 * h)
                        for e in np.eye(K)])
        d = ces.node_demand(prices, v, p)
        # relative to the demand, floored at 1e-3 of the bundle: tiny corner demands
        # sit below the absolute rounding error of the difference quotient
        shep = max(shep, np.max(np.abs(num - d) / np.maximum(np.abs(d), 1e-3 * d.sum())))
        dv = (ces.ces_cost(prices, v + h, p) - ces.ces_cost(prices, v - h, p)) / (2 * h)
        marg = max(marg, abs(dv - ces.price_activation(prices, v, p)) / abs(dv))
    ok = lower_ok and gap <= 1e-6 and shep <= 1e-5 and marg <= 1e-6
    verdict(7, ok, f"cost is a lower bound: {lower_ok}; optimizer gap {gap:.1e}; "
                   f"Shephard {shep:.1e}; marginal cost {marg:.1e}")


# ---------------------------------------------------------------------------
# trained shape constraints
# ---------------------------------------------------------------------------

def test_08_shape_constraints_after_training(verdict):
    mono = conc = 0.0
    for k in range(10):
        truth = synth.ces_technology([1.0, 0.7], rho=[-0.8, 0.4][k % 2], tau=0.9)
        ds = synth.sample_production(truth, 150, 0.05, seed=k)
        net = tr.calibrate_scale(architect.build_ces_sieve(2, 3 + k % 3, seed=k), ds)
        net = tr.fit(net, ds, tr.TrainConfig(optimizer="adam", epochs=4, lr=0.03, batch_size=50, seed=k)).net
        rng = np.random.default_rng(k)
        # 100 coordinate rays, five points each
        base = rng.uniform(0.5, 2.0, (100, 2))
        axis = rng.integers(0, 2, 100)
        steps = np.linspace(0.0, 1.0, 5)
        X = np.repeat(base, 5, 0)
        X[np.arange(500), np.repeat(axis, 5)] += np.tile(steps, 100)
        f = nw.predict_outputs(net, X)[:, 0].reshape(100, 5)
        mono = max(mono, float(np.max(np.maximum(f[:, :-1] - f[:, 1:], 0.0))))
        # 100 random segments
        a, b = rng.uniform(0.5, 2.0, (2, 100, 2))
        fa, fb, fm = (nw.predict_outputs(net, z)[:, 0] for z in (a, b, (a + b) / 2))
        conc = max(conc, float(np.max(np.maximum(0.5 * (fa + fb) - fm, 0.0))))
    verdict(8, mono <= 1e-8 and conc <= 1e-8,
            f"largest monotonicity violation {mono:.1e}, midpoint concavity violation {conc:.1e} on 10 nets")


# ---------------------------------------------------------------------------
# rates
# ---------------------------------------------------------------------------

def test_09_approximation_rate_slope(verdict):
    t0 = time.time()
    f = lambda w: np.array([w[0] ** 0.3 * w[1] ** 0.5])
    g = np.linspace(0.575, 1.925, 10)
    G = np.array(np.meshgrid(g, g, indexing="ij")).reshape(2, -1).T
    yG = G[:, 0] ** 0.3 * G[:, 1] ** 0.5
    Qs, errs = [], []
    for per_axis in (2, 4, 8, 16):
        net = architect.build_two_stage_production(architect.grid_support_points(f, [0.5, 0.5], [2.0, 2.0], per_axis))
        errs.append(float(np.max(np.abs(nw.predict_outputs(net, G)[:, 0] - yG))))
        Qs.append(per_axis ** 2)
    slope = np.polyfit(np.log(Qs), np.log(errs), 1)[0]
    dt = time.time() - t0
    verdict(9, -1.5 <= slope <= -0.5 and dt < 120,
            f"sup errors {[f'{e:.2e}' for e in errs]} at Q = {Qs}; slope {slope:.3f} (target -1 +- 50%), {dt:.1f} s")


def cli(*args, cwd=None):
    env = dict(os.environ, STRUCTSIEVE_THREADS="1", PYTHONHASHSEED="0")
    return subprocess.run([sys.executable, "-m", "structsieve", *map(str, args)], capture_output=True,
                          text=True, env=env, cwd=cwd)


def test_10_estimation_rate_ladder(verdict, tmp_path, demos_dir):
    t0 = time.time()
    cfg = os.path.join(demos_dir, "rates", "rates.yaml")
    rows, decreasing = {}, 0
    for seed in range(3):
        r = cli("rates", "--config", cfg, "--seed", seed, "--out-dir", tmp_path / f"s{seed}", "--quiet")
        assert r.returncode == 0, r.stderr
        summary = json.loads((tmp_path / f"s{seed}" / "rates.json").read_text())
        mse = [row["test_mse"] for row in summary["rows"]]
        assert [row["n"] for row in summary["rows"]] == [500, 2000, 8000]
        rows[seed] = mse
        decreasing += bool(summary["decreasing"]) and all(b < a for a, b in zip(mse, mse[1:]))
    dt = time.time() - t0
    table = "; ".join(f"seed {s}: " + ", ".join(f"{m:.2e}" for m in v) for s, v in rows.items())
    verdict(10, decreasing >= 2 and dt < 600, f"strictly decreasing in {decreasing}/3 seeds ({table}), {dt:.0f} s")


def test_11_determinism(verdict, tmp_path, demos_dir):
    prod = os.path.join(demos_dir, "production")
    small = tmp_path / "cfg"
    small.mkdir()
    (small / "train.yaml").write_text(f"""version: 1
kind: production
seed: 3
data: {{path: {tmp_path / 'run0' / 'data.csv'}, inputs: [x1, x2], outputs: [y1]}}
model: {{builder: ces_sieve, Q: 3}}
train: {{optimizer: adam, epochs: 3, lr: 0.02, batch_size: 64}}
""")
    (small / "train_lbfgs.yaml").write_text((small / "train.yaml").read_text()
                                            .replace("optimizer: adam, epochs: 3, lr: 0.02, batch_size: 64",
                                                     "optimizer: lbfgs, epochs: 4"))
    (small / "rates.yaml").write_text("""version: 1
kind: production
rates:
  ladder: [60, 120]
  truth: {type: cobb_douglas, alpha: [0.4, 0.4]}
  test_n: 100
train: {optimizer: lbfgs, epochs: 3}
""")
    choice = os.path.join(demos_dir, "choice")

    def session(tag):
        out = tmp_path / tag
        runs = [
            ("simulate", "--config", os.path.join(prod, "simulate.yaml")),
            ("simulate", "--config", os.path.join(choice, "simulate.yaml"), "--out-dir", out / "choice"),
            ("train", "--config", small / "train.yaml", "--out-dir", out / "adam"),
            ("train", "--config", small / "train_lbfgs.yaml", "--out-dir", out / "lbfgs"),
            ("eval", out / "adam" / "network.json", tmp_path / "run0" / "data.csv", "--out-dir", out / "adam"),
            ("approx", "--config", os.path.join(demos_dir, "approx", "production.yaml"), "--out-dir", out / "ap"),
            ("approx", "--config", os.path.join(demos_dir, "approx", "choice.yaml"), "--out-dir", out / "ac"),
            ("inspect", out / "adam" / "network.json"),
            ("rates", "--config", small / "rates.yaml", "--out-dir", out / "rates"),
        ]
        stdout = []
        for r in runs:
            args = list(r) if "--out-dir" in r else list(r) + ["--out-dir", out]
            res = cli(*args)
            assert res.returncode == 0, (r, res.stderr)
            stdout.append(res.stdout.replace(str(out), "<out>"))
        files = {}
        for dp, _, fs in os.walk(out):
            for f in fs:
                p = os.path.join(dp, f)
                files[os.path.relpath(p, out)] = open(p, "rb").read()
        return files, stdout

    a_files, a_out = session("run0")
    b_files, b_out = session("run1")
    same = a_files.keys() == b_files.keys() and all(a_files[k] == b_files[k] for k in a_files)
    diff = sorted(k for k in a_files if a_files.get(k) != b_files.get(k))
    verdict(11, same and a_out == b_out and len(a_files) >= 15,
            f"{len(a_files)} artifacts from 6 commands byte-identical across reruns: {same}"
            + (f" (differ: {diff})" if diff else ""))
