import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import numeric_grad, rel_err
from isrl import autodiff as ad
from isrl.classifier import (FusedClassifier, confusion_matrix, evaluate_predictions, fuse_and_classify, ic_loss,
                             irm_penalty, metrics_from_confusion, one_hot, risk_env, shape_features)
from isrl.errors import ConfigError, StructuralError
from isrl.envgen import templates
from isrl.registration import ShapeNet


def naive_ce(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(labels)


def penalty_value(logits, labels, tau=1.0):
    return irm_penalty(ad.Tensor(logits), labels, tau).item()


# --- risk -------------------------------------------------------------------------

def test_risk_uniform_logits_is_tau_ln3():
    r = risk_env(np.zeros((5, 3)), [0, 1, 2, 0, 1], tau=2.5)
    assert abs(r.item() - 2.5 * math.log(3)) < 1e-12


def test_risk_perfect_logits_limit():
    logits = np.eye(3) * 60.0
    assert risk_env(logits, [0, 1, 2]).item() < 1e-20


def test_risk_matches_naive_loop():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(17, 3)) * 3
    labels = rng.integers(0, 3, 17)
    got = risk_env(logits, labels, tau=0.7).item()
    assert rel_err(got, 0.7 * naive_ce(logits.tolist(), labels.tolist())) < 1e-10


def test_risk_weight_decay_term():
    clf = FusedClassifier(use_shape=False, seed=0)
    logits = np.zeros((4, 3))
    r = risk_env(logits, [0, 1, 2, 0], params=clf.params, weight_decay=1e-3).item()
    l2 = sum(float(np.sum(t.data ** 2)) for n, t in clf.params.tensors.items() if not n.endswith(".b"))
    assert rel_err(r, math.log(3) + 1e-3 * l2) < 1e-12


# --- penalty ----------------------------------------------------------------------

@pytest.mark.parametrize("z", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("tau", [1.0, 0.3])
def test_penalty_binary_closed_form(z, tau):
    p1 = 1.0 / (1.0 + math.exp(-2 * z))
    p2 = 1.0 - p1
    d = tau * (p1 - 1.0) * z + tau * p2 * (-z)
    got = penalty_value(np.array([[z, -z]]), [0], tau)
    assert rel_err(got, d * d) < 1e-12


def test_penalty_zero_logits():
    assert penalty_value(np.zeros((6, 3)), [0, 1, 2, 2, 1, 0]) == 0.0


def test_penalty_param_gradient_matches_fd():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(9, 4))
    labels = rng.integers(0, 3, 9)
    w0 = rng.normal(size=(4, 3))

    def pen(w):
        return irm_penalty(ad.Tensor(x @ w), labels).item()

    wt = ad.Tensor(w0, requires_grad=True)
    with ad.Tape() as tape:
        p = irm_penalty(ad.matmul(x, wt), labels)
        (g,) = tape.gradient(p, [wt])
    assert rel_err(g.data, numeric_grad(pen, w0, h=1e-6)) < 1e-4


def test_penalty_disconnected_probe_is_structural_error(monkeypatch):
    # replacing the scaled logits by a constant severs the probe
    orig = ad.softmax_cross_entropy

    def severed(logits, onehot):
        return orig(ad.Tensor(logits.data), onehot)

    monkeypatch.setattr(ad, "softmax_cross_entropy", severed)
    with pytest.raises(StructuralError):
        irm_penalty(np.ones((2, 3)), [0, 1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_penalty_nonnegative_and_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(n, 3)) * 4
    labels = rng.integers(0, 3, n)
    p = penalty_value(logits, labels)
    assert p >= 0
    perm = rng.permutation(n)
    assert abs(penalty_value(logits[perm], labels[perm]) - p) <= 1e-12 * max(1.0, p)


def test_uniform_logit_scaling_keeps_argmax():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(20, 3))
    for c in (0.1, 3.0, 50.0):
        assert np.array_equal(np.argmax(logits * c, axis=1), np.argmax(logits, axis=1))


# --- ic_loss ----------------------------------------------------------------------

def test_ic_loss_lambda_zero_is_sum_of_risks():
    rng = np.random.default_rng(2)
    env_logits = [rng.normal(size=(5, 3)) for _ in range(2)]
    env_labels = [rng.integers(0, 3, 5) for _ in range(2)]
    parts = ic_loss(env_logits, env_labels, 0.0)
    assert parts.total.item() == sum(risk_env(l, y).item() for l, y in zip(env_logits, env_labels))


def test_ic_loss_duplicate_batches():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(6, 3))
    labels = rng.integers(0, 3, 6)
    lam = 12.5
    r = risk_env(logits, labels).item()
    p = penalty_value(logits, labels)
    total = ic_loss([logits, logits.copy()], [labels, labels], lam).total.item()
    assert rel_err(total, 2 * r + 2 * lam * p) < 1e-12


def test_ic_loss_single_env_and_empty():
    logits = np.ones((2, 3))
    assert math.isfinite(ic_loss([logits], [[0, 1]], 3.0).total.item())
    with pytest.raises(ConfigError):
        ic_loss([], [], 1.0)


# --- classifier ---------------------------------------------------------------------

def test_zero_inputs_zero_head_uniform_logits():
    clf = FusedClassifier(use_shape=True, seed=0, zero_head=True)
    out = fuse_and_classify(clf, np.zeros((2, 3, 32, 32)), np.zeros((6, 2, 32, 32)))
    assert np.all(out.data == out.data[0, 0])


def test_latent_permutation_with_permuted_head():
    clf = FusedClassifier(use_shape=True, seed=1)
    rng = np.random.default_rng(0)
    images = rng.random((3, 3, 32, 32))
    v0 = rng.normal(size=(9, 2, 32, 32)) * 0.1
    with ad.no_record():
        lat = clf.latent(images, v0).data
        ref = clf.head(ad.Tensor(lat)).data
        perm = rng.permutation(lat.shape[1])
        w = clf.fc1.w.data.copy()
        clf.fc1.w.data = w[perm]
        out = clf.head(ad.Tensor(lat[:, perm])).data
    assert np.allclose(out, ref, rtol=0, atol=1e-12)


def test_logits_reproducible_bitwise():
    rng = np.random.default_rng(5)
    images = rng.random((2, 3, 32, 32))
    a = FusedClassifier(use_shape=False, seed=7)(images).data
    b = FusedClassifier(use_shape=False, seed=7)(images).data
    assert a.tobytes() == b.tobytes()


def test_fused_dim_and_errors():
    clf = FusedClassifier(use_shape=True, seed=0, image_dim=10, shape_dim=4)
    assert clf.fused_dim == 10 + 3 * 4
    with pytest.raises(StructuralError):
        clf(np.zeros((1, 3, 32, 32)))
    with pytest.raises(ConfigError):
        FusedClassifier(size=30)
    with pytest.raises(ConfigError):
        FusedClassifier(shape_input="latent")


def test_shape_features_shapes():
    net = ShapeNet(0, (4, 8, 16))
    gray = np.random.default_rng(0).random((2, 1, 32, 32))
    tm = templates(32)
    with ad.no_record():
        v = shape_features(net, tm, gray, "v0")
        z = shape_features(net, tm, gray, "latent")
    assert v.shape == (6, 2, 32, 32)
    assert z.shape == (6,) + net.latent_shape(32, 32)
    # class-major: block j holds template j against every image
    with ad.no_record():
        z1 = shape_features(net, tm[1:2], gray, "latent")
    assert np.array_equal(z.data[2:4], z1.data)
    with pytest.raises(ConfigError):
        shape_features(net, tm, gray, "other")


def test_latent_classifier_runs():
    net = ShapeNet(0, (4, 8, 16))
    clf = FusedClassifier(use_shape=True, shape_input="latent", latent_shape=net.latent_shape(32, 32))
    gray = np.random.default_rng(0).random((2, 1, 32, 32))
    images = np.repeat(gray, 3, axis=1)
    with ad.no_record():
        out = clf(images, shape_features(net, templates(32), gray, "latent"))
    assert out.shape == (2, 3)


# --- metrics ----------------------------------------------------------------------

def test_confusion_hand_example():
    m = metrics_from_confusion(np.array([[5, 1], [2, 4]]))
    assert m["acc"] == pytest.approx(75.0, abs=1e-12)
    f1 = (2 * 5 / (2 * 5 + 1 + 2) + 2 * 4 / (2 * 4 + 2 + 1)) / 2
    assert m["f1_macro"] == pytest.approx(100 * f1, abs=1e-12)
    assert m["prec_macro"] == pytest.approx(100 * (5 / 7 + 4 / 5) / 2, abs=1e-12)
    assert m["rec_macro"] == pytest.approx(100 * (5 / 6 + 4 / 6) / 2, abs=1e-12)


def test_micro_equals_accuracy_and_perfect():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 50)
    p = rng.integers(0, 3, 50)
    m = evaluate_predictions(y, p)
    assert m["prec_micro"] == m["acc"] == m["rec_micro"] == m["f1_micro"]
    perfect = evaluate_predictions(y, y)
    assert all(v == 100.0 for v in perfect.values())


def test_confusion_layout_and_empty():
    cm = confusion_matrix([0, 0, 1], [1, 0, 1], 2)
    assert cm.tolist() == [[1, 1], [0, 1]]
    with pytest.raises(ValueError):
        evaluate_predictions([], [])


def test_one_hot():
    assert one_hot([2, 0], 3).tolist() == [[0, 0, 1], [1, 0, 0]]
