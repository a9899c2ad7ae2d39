"""Fused image + shape classifier with per-environment risk and the IRMv1 penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError, StructuralError
from .nn import Conv2d, Linear, ParamSet, make_rng
from .registration import ShapeNet, make_pairs


class _ConvEncoder:
    """Three stride-2 convolutions, flatten, one linear layer."""

    def __init__(self, params, prefix, c_in, widths, out_dim, size, rng):
        c1, c2, c3 = widths
        self.convs = [Conv2d(params, f"{prefix}.conv1", c_in, c1, rng, stride=2),
                      Conv2d(params, f"{prefix}.conv2", c1, c2, rng, stride=2),
                      Conv2d(params, f"{prefix}.conv3", c2, c3, rng, stride=2)]
        self.flat = c3 * (size // 8) ** 2
        self.fc = Linear(params, f"{prefix}.fc", self.flat, out_dim, rng)

    def __call__(self, x):
        for conv in self.convs:
            x = ad.leaky_relu(conv(x))
        x = ad.reshape(x, (x.shape[0], self.flat))
        return ad.leaky_relu(self.fc(x))


class _LatentEncoder:
    """Flattened registration-encoder latent followed by one linear layer."""

    def __init__(self, params, prefix, latent_shape, out_dim, rng):
        self.flat = int(np.prod(latent_shape))
        self.fc = Linear(params, f"{prefix}.fc", self.flat, out_dim, rng)

    def __call__(self, x):
        return ad.leaky_relu(self.fc(ad.reshape(x, (x.shape[0], self.flat))))


SHAPE_INPUTS = ("v0", "latent")


class FusedClassifier:
    """Image encoder, optional shape encoder over per-class registrations, and an MLP head.

    With ``use_shape`` the shape encoder summarizes, for every class template,
    either the predicted velocity ``v0`` (``shape_input="v0"``) or the
    registration encoder's latent (``shape_input="latent"``, which then needs
    ``latent_shape``). The per-class summaries are concatenated after the
    image latent.
    """

    def __init__(self, n_classes: int = 3, size: int = 32, use_shape: bool = True, seed: int = 0,
                 image_widths=(8, 16, 32), image_dim: int = 32, shape_widths=(8, 16, 16),
                 shape_dim: int = 16, hidden: int = 32, zero_head: bool = False,
                 shape_input: str = "v0", latent_shape=None):
        if size % 8:
            raise ConfigError("resolution: classifier needs a multiple of 8")
        if shape_input not in SHAPE_INPUTS:
            raise ConfigError(f"shape_input: expected one of {SHAPE_INPUTS}, got {shape_input!r}")
        self.params = ParamSet()
        self.n_classes = n_classes
        self.use_shape = use_shape
        self.shape_input = shape_input
        self.image_dim = image_dim
        self.shape_dim = shape_dim if use_shape else 0
        # separate streams keep image/head initialization independent of use_shape
        self.image_enc = _ConvEncoder(self.params, "clf.image", 3, image_widths, image_dim, size,
                                      make_rng(seed, "clf.image"))
        if use_shape and shape_input == "v0":
            self.shape_enc = _ConvEncoder(self.params, "clf.shape", 2, shape_widths, shape_dim, size,
                                          make_rng(seed, "clf.shape"))
        elif use_shape:
            if latent_shape is None:
                raise ConfigError("latent_shape: required when shape_input is 'latent'")
            self.shape_enc = _LatentEncoder(self.params, "clf.shape", latent_shape, shape_dim,
                                            make_rng(seed, "clf.shape"))
        head_rng = make_rng(seed, "clf.head")
        fused = image_dim + n_classes * self.shape_dim
        self.fc1 = Linear(self.params, "clf.head.fc1", fused, hidden, head_rng, zero=zero_head)
        self.fc2 = Linear(self.params, "clf.head.fc2", hidden, n_classes, head_rng, zero=zero_head)

    @property
    def fused_dim(self) -> int:
        return self.image_dim + self.n_classes * self.shape_dim

    def latent(self, images, shape_all=None) -> ad.Tensor:
        """Concatenated latent ``[image | shape_0 | ... | shape_{J-1}]``.

        ``shape_all`` holds the per-class shape inputs stacked class-major,
        ``(J * B, ...)``.
        """
        h_img = self.image_enc(images)
        if not self.use_shape:
            return h_img
        if shape_all is None:
            raise StructuralError("shape branch enabled but no shape features given")
        b = images.shape[0]
        h_shape = self.shape_enc(ad.as_tensor(shape_all))          # (J*B, d)
        h_shape = ad.reshape(h_shape, (self.n_classes, b, self.shape_dim))
        h_shape = ad.reshape(ad.transpose(h_shape, (1, 0, 2)), (b, self.n_classes * self.shape_dim))
        return ad.concat([h_img, h_shape], axis=1)

    def head(self, latent) -> ad.Tensor:
        return self.fc2(ad.leaky_relu(self.fc1(latent)))

    def __call__(self, images, shape_all=None) -> ad.Tensor:
        logits = self.head(self.latent(ad.as_tensor(images), shape_all))
        if not np.all(np.isfinite(logits.data)):
            raise NumericError("non-finite logits")
        return logits


def _all_pairs(templates, gray) -> ad.Tensor:
    templates = np.asarray(templates.data if isinstance(templates, ad.Tensor) else templates)
    gray = ad.as_tensor(gray)
    j = templates.shape[0]
    b = gray.shape[0]
    tmpl = np.repeat(templates, b, axis=0)                        # (J*B, 1, H, W)
    imgs = ad.concat([gray] * j, axis=0)
    return make_pairs(tmpl, imgs)


def v0_against_all(shape_net: ShapeNet, templates, gray) -> ad.Tensor:
    """Velocities from every class template to each image, ``(J * B, 2, H, W)`` class-major."""
    return shape_net(_all_pairs(templates, gray))


def latent_against_all(shape_net: ShapeNet, templates, gray) -> ad.Tensor:
    """Registration-encoder latents for every (template, image) pair, class-major."""
    return shape_net.encode(_all_pairs(templates, gray))[2]


def shape_features(shape_net: ShapeNet, templates, gray, shape_input: str = "v0") -> ad.Tensor:
    if shape_input == "v0":
        return v0_against_all(shape_net, templates, gray)
    if shape_input == "latent":
        return latent_against_all(shape_net, templates, gray)
    raise ConfigError(f"shape_input: expected one of {SHAPE_INPUTS}, got {shape_input!r}")


def fuse_and_classify(clf: FusedClassifier, images, shape_all=None) -> ad.Tensor:
    return clf(images, shape_all)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def risk_env(logits, labels, tau: float = 1.0, params: ParamSet | None = None,
             weight_decay: float = 1e-4) -> ad.Tensor:
    """``tau * mean cross-entropy`` plus L2 weight decay on ``params``."""
    logits = ad.as_tensor(logits)
    onehot = one_hot(labels, logits.shape[1])
    risk = ad.softmax_cross_entropy(logits, onehot) * tau
    if params is not None and weight_decay:
        risk = risk + weight_decay * params.l2()
    return risk


def irm_penalty(logits, labels, tau: float = 1.0) -> ad.Tensor:
    """``(d R / d w)^2`` at ``w = 1`` where ``R = tau * CE(w * logits)``.

    Stays differentiable with respect to whatever produced ``logits`` when
    called on an active tape.
    """
    logits = ad.as_tensor(logits)
    onehot = one_hot(labels, logits.shape[1])
    with ad.ensure_tape() as tape:
        w = ad.Tensor(1.0, requires_grad=True, name="probe")
        risk = ad.softmax_cross_entropy(logits * w, onehot) * tau
        (gw,) = tape.gradient(risk, [w], create_graph=True, allow_unreachable=False)
        return ad.sum_(ad.square(gw))


@dataclass
class IcParts:
    total: ad.Tensor
    risks: list
    penalties: list


def ic_loss(env_logits, env_labels, lam: float, tau: float = 1.0, params: ParamSet | None = None,
            weight_decay: float = 1e-4) -> IcParts:
    """``sum_e R_e + lam * penalty_e`` over the training environments."""
    if len(env_logits) == 0:
        raise ConfigError("ic_loss needs at least one environment")
    risks, penalties = [], []
    total = None
    for logits, labels in zip(env_logits, env_labels):
        r = risk_env(logits, labels, tau, params, weight_decay)
        term = r
        if lam:
            p = irm_penalty(logits, labels, tau)
            penalties.append(p)
            term = term + lam * p
        else:
            penalties.append(None)
        risks.append(r)
        total = term if total is None else total + term
    return IcParts(total, risks, penalties)


# --- metrics ----------------------------------------------------------------------

def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> dict:
    """Accuracy and micro/macro precision, recall and F1, in percent."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty evaluation set")
    tp = np.diag(cm)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        prec_c = np.where(pred > 0, tp / pred, 0.0)
        rec_c = np.where(true > 0, tp / true, 0.0)
        f1_c = np.where(2 * tp + (pred - tp) + (true - tp) > 0,
                        2 * tp / (2 * tp + (pred - tp) + (true - tp)), 0.0)
    acc = tp.sum() / total
    # single-label multiclass: pooled TP / pooled predictions equals accuracy
    micro = tp.sum() / pred.sum()
    return {"acc": 100 * acc, "prec_micro": 100 * micro, "rec_micro": 100 * micro, "f1_micro": 100 * micro,
            "prec_macro": 100 * prec_c.mean(), "rec_macro": 100 * rec_c.mean(), "f1_macro": 100 * f1_c.mean()}


def evaluate_predictions(y_true, y_pred, n_classes: int = 3) -> dict:
    if len(y_true) == 0:
        raise ValueError("empty evaluation set")
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, n_classes))
