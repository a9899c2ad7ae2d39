"""Shape representation learning: initial velocities from an encoder-decoder.

The network maps a (template, image) pair to the initial velocity ``v0`` of a
geodesic. Training minimizes, per sample,

    (1 / sigma^2) * ||T o phi^{-1}(v0) - I||^2 + (L v0, v0)

plus weight decay on the network. :func:`register_direct` optimizes a single
``v0`` without a network and serves as a reference path.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InstabilityError, NumericError
from .geodesic import DEFAULT_STEPS, inverse_flow, shoot, warp
from .metric import DEFAULT_ALPHA, MetricOperator, apply_K, inner_product_Lv
from .nn import Conv2d, ParamSet, make_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SrlConfig:
    sigma: float = 0.02
    alpha: float = DEFAULT_ALPHA
    steps: int = DEFAULT_STEPS
    weight_decay: float = 1e-4
    lr: float = 1e-3

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


class ShapeNet:
    """Three stride/upsample levels with skip connections; the last layer starts at zero.

    ``widths`` gives the channel counts of the three encoder blocks; the
    latent sits at 1/4 of the input resolution. With ``smoothing`` the
    decoder output is read as a momentum and mapped through ``K``, so every
    predicted velocity is as smooth as the metric demands. ``bound`` squashes
    the raw output into ``(-bound, bound)`` first; since ``K`` is an averaging
    operator the velocity then stays below ``bound`` pixels per unit time.
    """

    def __init__(self, seed: int = 0, widths=(16, 32, 64), prefix: str = "shape",
                 smoothing: MetricOperator | None = None, bound: float | None = None):
        self.params = ParamSet()
        rng = make_rng(seed, prefix)
        c1, c2, c3 = widths
        p = self.params
        self.enc1 = Conv2d(p, f"{prefix}.enc1", 2, c1, rng)
        self.enc2 = Conv2d(p, f"{prefix}.enc2", c1, c2, rng, stride=2)
        self.enc3 = Conv2d(p, f"{prefix}.enc3", c2, c3, rng, stride=2)
        self.dec3 = Conv2d(p, f"{prefix}.dec3", c3, c2, rng)
        self.dec2 = Conv2d(p, f"{prefix}.dec2", 2 * c2, c1, rng)
        self.dec1 = Conv2d(p, f"{prefix}.dec1", 2 * c1, 2, rng, zero=True)
        self.widths = tuple(widths)
        self.smoothing = smoothing
        self.bound = bound
        log.debug("shape network with %d parameters", self.params.count())

    def encode(self, pair):
        """Encoder activations ``(e1, e2, e3)``; ``e3`` is the latent at 1/4 resolution."""
        act = ad.leaky_relu
        e1 = act(self.enc1(pair))
        e2 = act(self.enc2(e1))
        return e1, e2, act(self.enc3(e2))

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int]:
        return self.widths[2], height // 4, width // 4

    def __call__(self, pair) -> ad.Tensor:
        """``pair (B, 2, H, W)`` stacked (template, image) -> ``v0 (B, 2, H, W)``."""
        act = ad.leaky_relu
        e1, e2, e3 = self.encode(pair)
        d2 = act(self.dec3(ad.upsample2(e3)))
        d1 = act(self.dec2(ad.upsample2(ad.concat([d2, e2], axis=1))))
        out = self.dec1(ad.concat([d1, e1], axis=1))
        if self.bound is not None:
            out = ad.tanh(out * (1.0 / self.bound)) * self.bound
        if self.smoothing is not None:
            out = apply_K(out, self.smoothing)
        return out


def make_pairs(template, images) -> ad.Tensor:
    """Stack templates and grayscale images as channels. Both ``(B, 1, H, W)`` (template may be ``(1, 1, H, W)``)."""
    template = ad.as_tensor(template)
    images = ad.as_tensor(images)
    if template.shape[0] != images.shape[0]:
        template = ad.Tensor(np.broadcast_to(template.data, (images.shape[0],) + template.shape[1:]))
    return ad.concat([template, images], axis=1)


def predict_v0(net: ShapeNet, template, images) -> ad.Tensor:
    v0 = net(make_pairs(template, images))
    if not np.all(np.isfinite(v0.data)):
        raise NumericError("non-finite initial velocity from the shape network")
    return v0


def srl_terms(template, images, v0s, op: MetricOperator, cfg: SrlConfig):
    """Per-sample data and metric terms as Tensors of shape ``(B,)``.

    ``template`` is ``(B, 1, H, W)`` (one template per sample) and ``images``
    the grayscale targets.
    """
    template = ad.as_tensor(template)
    images = ad.as_tensor(images)
    path = shoot(v0s, op, cfg.steps)
    warped = warp(template, inverse_flow(path))
    resid = warped - images
    data = ad.sum_(ad.square(resid), axis=(1, 2, 3)) * (1.0 / cfg.sigma ** 2)
    metric_term = inner_product_Lv(v0s, op, per_sample=True)
    return data, metric_term


def srl_loss(template, images, v0s, op: MetricOperator, cfg: SrlConfig,
             params: ParamSet | None = None) -> ad.Tensor:
    """Batch mean of data + metric terms, plus ``weight_decay * ||Theta||^2``."""
    data, metric_term = srl_terms(template, images, v0s, op, cfg)
    loss = ad.mean(data + metric_term)
    if params is not None and cfg.weight_decay:
        loss = loss + cfg.weight_decay * params.l2()
    return loss


def registration_energy(template, image, v0, op: MetricOperator, cfg: SrlConfig) -> tuple[float, float]:
    """``(data term, metric term)`` for a single pair, evaluated without a tape."""
    t = np.asarray(template, dtype=np.float64).reshape((1, 1) + np.shape(template)[-2:])
    i = np.asarray(image, dtype=np.float64).reshape(t.shape)
    v = np.asarray(v0, dtype=np.float64).reshape((1, 2) + t.shape[-2:])
    data, metric_term = srl_terms(t, i, v, op, cfg)
    return float(data.data[0]), float(metric_term.data[0])


@dataclass
class DirectResult:
    v0: np.ndarray
    data_term: float
    metric_term: float
    initial_data_term: float
    history: list
    stalled: bool

    @property
    def energy(self) -> float:
        return self.data_term + self.metric_term


def register_direct(template, image, cfg: SrlConfig = SrlConfig(), iters: int = 150,
                    step: float = 0.5, v_init=None, stall_window: int = 20) -> DirectResult:
    """Minimize the shooting energy over ``v0`` for one pair.

    Gradient descent along the Sobolev gradient ``K grad`` (the gradient in
    the metric of ``L``), with the step halved whenever the energy rises and
    grown by 10% after an accepted step. Returns the best iterate. Stops with
    a warning when the energy has not improved for ``stall_window``
    consecutive steps.
    """
    template = np.asarray(template, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    h, w = template.shape[-2:]
    op = MetricOperator(h, w, cfg.alpha)
    t = ad.Tensor(template.reshape(1, 1, h, w))
    target = ad.Tensor(image.reshape(1, 1, h, w))
    v = np.zeros((1, 2, h, w)) if v_init is None else np.array(v_init, dtype=np.float64).reshape(1, 2, h, w)

    def evaluate(v_arr):
        v0 = ad.Tensor(v_arr, requires_grad=True, name="v0")
        with ad.Tape() as tape:
            data, metric_term = srl_terms(t, target, v0, op, cfg)
            energy = ad.sum_(data + metric_term)
            (grad,) = tape.gradient(energy, [v0])
        return energy.item(), float(data.data[0]), float(metric_term.data[0]), grad.data

    e, d, m, g = evaluate(v)
    initial_data = d
    history = [(e, d, m)]
    best = (e, v.copy(), d, m)
    since_best = 0
    stalled = False
    # scale the first step so that it moves at most `step` pixels
    direction = apply_K(g, op)
    eta = step / max(float(np.abs(direction).max()), 1e-12)
    for it in range(iters):
        if not np.any(direction):
            break  # exact stationary point
        trial = v - eta * direction
        try:
            e_new, d_new, m_new, g_new = evaluate(trial)
        except InstabilityError:
            e_new = np.inf
        if e_new < e:
            v, e, d, m, g = trial, e_new, d_new, m_new, g_new
            direction = apply_K(g, op)
            eta *= 1.1
        else:
            eta *= 0.5
        history.append((e, d, m))
        if e < best[0]:
            best = (e, v.copy(), d, m)
            since_best = 0
        else:
            since_best += 1
            if since_best >= stall_window:
                stalled = True
                warnings.warn(f"register_direct: no improvement for {stall_window} steps at iteration {it}",
                              stacklevel=2)
                break
    _, v_best, d_best, m_best = best
    return DirectResult(v_best[0], d_best, m_best, initial_data, history, stalled)
