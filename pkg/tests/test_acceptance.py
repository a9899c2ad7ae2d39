"""One test per acceptance criterion.

Criteria 7 to 12 train the full experiment matrix at desk scale. Runs are
cached under ``ISRL_ACCEPTANCE_DIR`` (default ``<repo>/.acceptance``) and keyed
by config, benchmark spec and training sources, so a second session only
re-reads JSON. The first session takes a few CPU hours.
"""

import functools
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import autodiff_grads, numeric_grad, rel_err, value
from isrl import autodiff as ad
from isrl import experiments as ex
from isrl.classifier import irm_penalty
from isrl.envgen import EnvSpec, build_benchmark, color_argmax_accuracy, monte_carlo_color_agreement, templates
from isrl.geodesic import inverse_flow, shoot, shoot_and_warp
from isrl.metric import MetricOperator, apply_K, apply_L
from isrl.registration import ShapeNet, SrlConfig, make_pairs, register_direct, srl_loss

ROOT = Path(__file__).resolve().parents[1]
ACCEPT_DIR = Path(os.environ.get("ISRL_ACCEPTANCE_DIR", ROOT / ".acceptance"))


def smooth_field(seed, n=32, amp=1.0, op=None):
    op = op or MetricOperator(n, n, 3.0)
    v = np.random.default_rng(seed).normal(size=(2, n, n))
    v = apply_K(apply_K(v, op), op)
    return v * (amp / np.abs(v).max())


# --- 1. operator identities ---------------------------------------------------------

def test_c01_operator_identities():
    t0 = time.process_time()
    rng = np.random.default_rng(1)
    for alpha in (0.0, 1.0, 3.0):
        op = MetricOperator(32, 32, alpha)
        for _ in range(100):
            u, v = rng.normal(size=(2, 2, 32, 32))
            assert np.abs(apply_K(apply_L(v, op), op) - v).max() < 1e-8
            a = np.sum(apply_L(u, op) * v)
            b = np.sum(u * apply_L(v, op))
            assert abs(a - b) / abs(a) < 1e-8
    assert time.process_time() - t0 < 5.0


# --- 2. gradient correctness --------------------------------------------------------

def _readout(shape):
    shape = tuple(int(n) for n in shape)
    return np.random.default_rng(list(shape) or [0]).normal(size=shape)


def _dot(out, r):
    return ad.sum_(ad.mul(out, r))


_R = np.random.default_rng(7)
_X = _R.normal(size=(3, 4))
_POS = _R.uniform(0.5, 2.5, size=(3, 4))
_IMG = _R.normal(size=(1, 2, 6, 6))
_OP = MetricOperator(6, 6, 3.0)
_GRID = np.floor(_R.uniform(0.3, 3.7, size=(1, 2, 5, 5)))
_FRAC = _R.uniform(0.15, 0.85, size=(1, 2, 5, 5))


def _conv_in_grad(g, w):
    return ad.conv2d_input_grad(g, w, (1, 2, 6, 6), 2, 1)


def _conv_w_grad(x, g):
    return ad.conv2d_weight_grad(x, g, (3, 2, 3, 3), 2, 1)


# name -> (function of tensors, input arrays); every differentiable primitive appears once
PRIMITIVES = {
    "add": (ad.add, [_X, _R.normal(size=(1, 4))]),
    "sub": (ad.sub, [_X, _R.normal(size=(3, 1))]),
    "mul": (ad.mul, [_X, _R.normal(size=(3, 4))]),
    "div": (ad.div, [_X, _POS]),
    "neg": (ad.neg, [_X]),
    "power": (lambda t: ad.power(t, 2.5), [_POS]),
    "square": (ad.square, [_X]),
    "exp": (ad.exp, [_X * 0.5]),
    "log": (ad.log, [_POS]),
    "sin": (ad.sin, [_X]),
    "cos": (ad.cos, [_X]),
    "tanh": (ad.tanh, [_X]),
    "leaky_relu": (ad.leaky_relu, [_X + 0.05]),
    "relu": (ad.relu, [_X + 0.05]),
    "sum_": (lambda t: ad.sum_(t, axis=1), [_X]),
    "mean": (lambda t: ad.mean(t, axis=0, keepdims=True), [_X]),
    "sum_to": (lambda t: ad.sum_to(t, (1, 4)), [_X]),
    "broadcast_to": (lambda t: ad.broadcast_to(t, (3, 3, 4)), [_X]),
    "reshape": (lambda t: ad.reshape(t, (4, 3)), [_X]),
    "transpose": (lambda t: ad.transpose(t, (1, 0)), [_X]),
    "getitem": (lambda t: ad.getitem(t, (slice(1, None), slice(None, None, 2))), [_X]),
    "scatter": (lambda t: ad.scatter(t, (slice(1, 4),), (5, 4)), [_X]),
    "concat": (lambda a, b: ad.concat([a, b], axis=0), [_X, _R.normal(size=(2, 4))]),
    "stack": (lambda a, b: ad.stack([a, b], axis=1), [_X, _R.normal(size=(3, 4))]),
    "matmul": (ad.matmul, [_X, _R.normal(size=(4, 2))]),
    "log_softmax": (ad.log_softmax, [_X]),
    "softmax_cross_entropy": (lambda t: ad.softmax_cross_entropy(t, np.eye(4)[[0, 3, 1]]), [_X]),
    "conv2d": (lambda x, w: ad.conv2d(x, w, 2, 1), [_IMG, _R.normal(size=(3, 2, 3, 3))]),
    "conv2d_input_grad": (_conv_in_grad, [_R.normal(size=(1, 3, 3, 3)), _R.normal(size=(3, 2, 3, 3))]),
    "conv2d_weight_grad": (_conv_w_grad, [_IMG, _R.normal(size=(1, 3, 3, 3))]),
    "upsample2": (ad.upsample2, [_IMG]),
    "pool_sum2": (ad.pool_sum2, [_IMG]),
    "diff": (lambda t: ad.diff(t, -1), [_IMG]),
    "diff_adjoint": (lambda t: ad.diff_adjoint(t, -2), [_IMG]),
    "spectral_multiply": (lambda t: ad.spectral_multiply(t, _OP.k_multipliers), [_IMG]),
    # sample positions kept away from cell boundaries, where bilinear weights have kinks
    "interpolate": (ad.interpolate, [_R.normal(size=(1, 2, 5, 5)), _GRID + _FRAC]),
}


def _primitive_errors(fn, arrays):
    out_shape = fn(*[ad.Tensor(a) for a in arrays]).shape
    r = _readout(out_shape)

    def build(*ts):
        return _dot(fn(*ts), r)

    _, grads = autodiff_grads(build, arrays)
    errs = []
    for k, a in enumerate(arrays):
        def fk(x, k=k):
            args = list(arrays)
            args[k] = x
            return value(build, args)
        errs.append(rel_err(grads[k], numeric_grad(fk, a, 1e-6)))
    return errs


def _end_to_end_errors(samples_per_tensor=6):
    """FD probe of the shape-network parameters through shooting, warping and the SRL loss."""
    n = 16
    yy, xx = np.mgrid[0:n, 0:n]

    def blob(cx, cy, r):
        return 1.0 / (1.0 + np.exp(((xx - cx) ** 2 + (yy - cy) ** 2 - r * r) / r))

    tmpl = np.stack([blob(8, 8, 4)] * 2)[:, None]
    imgs = np.stack([blob(9, 8, 4), blob(8, 9.5, 4)])[:, None]
    op = MetricOperator(n, n, 3.0)
    cfg = SrlConfig(sigma=0.1, steps=10)
    net = ShapeNet(0, (2, 4, 4), smoothing=op, bound=2.0)
    # the last layer starts at zero; give it and every bias a nonzero value so
    # all layers receive gradient and no activation sits on the leaky-relu kink
    for p in net.params:
        if p.name.endswith(".b") or p.name.startswith("shape.dec1"):
            p.data = np.random.default_rng(len(p.name)).normal(size=p.shape) * 0.3
    params = list(net.params)

    def loss():
        return srl_loss(tmpl, imgs, net(make_pairs(tmpl, imgs)), op, cfg, net.params)

    with ad.Tape() as tape:
        grads = tape.gradient(loss(), params)
    rng = np.random.default_rng(0)
    errs = {}
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, min(samples_per_tensor, flat.size), replace=False)
        num = []
        for i in idx:
            old = flat[i]
            vals = []
            for x in (old + 1e-5, old - 1e-5):
                flat[i] = x
                with ad.no_record():
                    vals.append(loss().item())
            flat[i] = old
            num.append((vals[0] - vals[1]) / 2e-5)
        errs[p.name] = rel_err(g.data.reshape(-1)[idx], np.array(num))
    return errs


def test_c02_gradient_correctness():
    t0 = time.process_time()
    for name, (fn, arrays) in PRIMITIVES.items():
        for k, err in enumerate(_primitive_errors(fn, arrays)):
            assert err < 1e-5, f"{name} input {k}: rel err {err:.2e}"
    errs = _end_to_end_errors()
    assert len(errs) == 12
    for name, err in errs.items():
        assert err < 1e-3, f"{name}: rel err {err:.2e}"
    assert time.process_time() - t0 < 60.0


# --- 3. IRM penalty ---------------------------------------------------------------

def test_c03_irm_penalty_oracle():
    t0 = time.process_time()
    for z in (0.5, 1.0, 2.0):
        # two classes, logits (z, -z), label 0: dR/dw at w = 1 in closed form
        p1 = 1.0 / (1.0 + math.exp(-2 * z))
        d = (p1 - 1.0) * z - (1.0 - p1) * z
        got = irm_penalty(ad.Tensor(np.array([[z, -z]])), [0]).item()
        assert rel_err(got, d * d) < 1e-12
    rng = np.random.default_rng(0)
    x = rng.normal(size=(9, 4))
    labels = rng.integers(0, 3, 9)
    w0 = rng.normal(size=(4, 3))
    wt = ad.Tensor(w0, requires_grad=True)
    with ad.Tape() as tape:
        (g,) = tape.gradient(irm_penalty(ad.matmul(x, wt), labels), [wt])
    num = numeric_grad(lambda w: irm_penalty(ad.Tensor(x @ w), labels).item(), w0, 1e-6)
    assert rel_err(g.data, num) < 1e-4
    assert time.process_time() - t0 < 10.0


# --- 4. EPDiff fixed points and convergence ---------------------------------------

def test_c04_epdiff_fixed_points_and_convergence():
    op = MetricOperator(32, 32, 3.0)
    zero = shoot(np.zeros((2, 32, 32)), op, 10)
    assert all(not np.any(v.data) for v in zero.velocities)
    const = np.broadcast_to(np.array([0.7, -0.3])[:, None, None], (2, 32, 32)).copy()
    assert max(np.abs(v.data - const).max() for v in shoot(const, op, 10).velocities) < 1e-10
    for seed in range(5):
        v0 = smooth_field(seed, op=op)
        phi = [inverse_flow(shoot(v0, op, n)).data for n in (10, 20, 40)]
        ratio = np.linalg.norm(phi[0] - phi[1]) / np.linalg.norm(phi[1] - phi[2])
        assert 1.6 <= ratio <= 2.4, f"seed {seed}: ratio {ratio:.3f}"


# --- 5. registration self-consistency ---------------------------------------------

def test_c05_registration_self_consistency():
    t0 = time.process_time()
    op = MetricOperator(32, 32, 3.0)
    shapes = templates(32)[:, 0]
    ratios = []
    for k in range(10):
        t = shapes[k % 3]
        img, _, _ = shoot_and_warp(t, smooth_field(100 + k, op=op), op)
        res = register_direct(t, img.data)
        ratios.append(res.data_term / res.initial_data_term)
    assert sum(r <= 0.2 for r in ratios) >= 9, ratios
    assert time.process_time() - t0 < 300.0


# --- 6. benchmark statistics ------------------------------------------------------

def test_c06_benchmark_statistics():
    spec = EnvSpec(sizes=(3000, 3000, 3000), seed=0)
    bench = build_benchmark(spec)
    for e, n_e in enumerate(spec.env_sizes()):
        assert np.all(np.bincount(bench.y_tilde[bench.env == e], minlength=3) == n_e // 3)
    rates = bench.flip_rates()
    n = len(bench)
    assert abs(rates["p_l"] - spec.p_l) <= 3 * math.sqrt(spec.p_l * (1 - spec.p_l) / n)
    for e, p in enumerate(spec.p_e):
        n_e = spec.env_sizes()[e]
        assert abs(rates[f"p_e[{e}]"] - p) <= 3 * math.sqrt(p * (1 - p) / n_e)
    oracle = monte_carlo_color_agreement(spec.p_l, spec.p_e[-1], 200_000)["color"]
    assert abs(100 * color_argmax_accuracy(bench, "test") - 100 * oracle) <= 2.0


# --- 7 to 12. experiment matrix ---------------------------------------------------

@functools.lru_cache(maxsize=None)
def experiment(name):
    rows = ex.run_plan(ex.make_plan(name), ACCEPT_DIR)
    print(f"{name}: " + ", ".join(f"{k}={v:.2f}" for k, v in ex.summary(rows).items()))
    return rows


def seed_rows(rows):
    return [r for r in rows if str(r["seed"]) not in ("mean", "std")]


def test_c07_model_comparison():
    rows = experiment("model-comparison")
    assert all(r["status"] == "ok" for r in seed_rows(rows))
    acc = ex.summary(rows)
    assert acc["ISRL"] >= acc["IRM-image"] + 5.0
    assert acc["IRM-image"] >= acc["ERM-image"] + 10.0
    assert acc["ERM-image"] < 60.0
    assert sum(r["cpu_seconds"] for r in seed_rows(rows)) < 45 * 60


def test_c08_ablation_ordering():
    acc = ex.summary(experiment("ablation"))
    print(f"margins: ERM-fused - ERM-image = {acc['ERM-fused'] - acc['ERM-image']:.2f}, "
          f"ISRL - IRM-image = {acc['ISRL'] - acc['IRM-image']:.2f}")
    assert acc["ERM-image"] < acc["ERM-fused"]
    assert acc["IRM-image"] < acc["ISRL"]


def test_c09_penalty_sweep_interior_maximum():
    rows = experiment("penalty-sweep")
    labels = [c.label for c in ex.make_plan("penalty-sweep").cells]
    interior = 0
    for seed in ex.DEFAULT_SEEDS:
        accs = [ex.per_seed(rows, label)[seed] for label in labels]
        best = int(np.argmax(accs))
        print(f"seed {seed}: {accs} -> argmax {labels[best]}")
        interior += 0 < best < len(accs) - 1
    assert interior >= 2


def test_c10_flip_sweep():
    acc = ex.summary(experiment("flip-sweep"))
    clean = [acc[f"p_l=0/{m}"] for m in ex.COMPARISON_MODES]
    assert max(clean) - min(clean) <= 5.0, clean
    drop = {m: acc[f"p_l=0/{m}"] - acc[f"p_l=0.5/{m}"] for m in ex.COMPARISON_MODES}
    print(f"drops: {drop}")
    assert drop["ERM-image"] - drop["ISRL"] >= 10.0


def test_c11_joint_vs_two_step():
    acc = ex.summary(experiment("joint-vs-twostep"))
    # equality is allowed at desk scale; only a regression of more than 3 points fails
    assert acc["joint"] - acc["two-step"] >= -3.0, acc


def test_c12_determinism(tmp_path):
    for name in ex.EXPERIMENTS:
        experiment(name)
        first = (ACCEPT_DIR / f"{name}.csv").read_bytes()
        ex.run_plan(ex.make_plan(name), ACCEPT_DIR)
        assert (ACCEPT_DIR / f"{name}.csv").read_bytes() == first, name
    # retrain one seed from scratch, with no cache, and compare its rows byte for byte
    plan = ex.make_plan("model-comparison", seeds=[0])
    fresh = ex.run_plan(plan, tmp_path)
    cached = [r for r in experiment("model-comparison") if r["seed"] == 0]
    assert ex.to_csv(seed_rows(fresh)) == ex.to_csv(cached)
