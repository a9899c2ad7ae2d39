"""Geodesic shooting: forward Euler integration of EPDiff and the inverse flow.

All routines accept batched vector fields ``(B, 2, H, W)`` (or a single
``(2, H, W)`` field) either as numpy arrays or as autodiff Tensors. When the
input is tracked on a tape the whole trajectory is differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import field
from .errors import InstabilityError, NumericError
from .metric import MetricOperator, apply_K, apply_L

DEFAULT_STEPS = 10
GROWTH_LIMIT = 100.0

X_AXIS, Y_AXIS = -1, -2


@dataclass
class GeodesicPath:
    """Velocity trajectory ``v(t_0), ..., v(t_steps)`` on ``t in [0, 1]``."""

    velocities: list
    steps: int

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    @property
    def v0(self):
        return self.velocities[0]

    @property
    def endpoint(self):
        return self.velocities[-1]


def _batched(v) -> tuple[ad.Tensor, bool]:
    v = ad.as_tensor(v)
    if v.ndim == 3:
        return ad.reshape(v, (1,) + v.shape), True
    return v, False


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def epdiff_rhs(v, op: MetricOperator) -> ad.Tensor:
    """Right-hand side ``-K[(Dv)^T m + (Dm) v + m div v]`` with ``m = L v``."""
    v, single = _batched(v)
    m = apply_L(v, op)
    v_x, v_y = ad.diff(v, X_AXIS), ad.diff(v, Y_AXIS)
    m_x, m_y = ad.diff(m, X_AXIS), ad.diff(m, Y_AXIS)
    vx, vy = v[:, 0:1], v[:, 1:2]

    # (Dv)^T m: component j is sum_i dv_i/dx_j * m_i
    dvt_m = ad.concat([ad.sum_(v_x * m, axis=1, keepdims=True),
                       ad.sum_(v_y * m, axis=1, keepdims=True)], axis=1)
    _check_finite(dvt_m.data, "(Dv)^T m")
    # (Dm) v: component i is sum_j dm_i/dx_j * v_j
    dm_v = m_x * vx + m_y * vy
    _check_finite(dm_v.data, "(Dm) v")
    div_v = v_x[:, 0:1] + v_y[:, 1:2]
    m_div = m * div_v
    _check_finite(m_div.data, "m div v")

    rhs = -apply_K(dvt_m + dm_v + m_div, op)
    return ad.reshape(rhs, rhs.shape[1:]) if single else rhs


def shoot(v0, op: MetricOperator, steps: int = DEFAULT_STEPS) -> GeodesicPath:
    """Integrate EPDiff from ``v0`` with ``steps`` forward Euler steps on [0, 1].

    Raises :class:`InstabilityError` when the velocity grows beyond 100x its
    initial sup-norm.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    v0 = ad.as_tensor(v0)
    dt = 1.0 / steps
    limit = GROWTH_LIMIT * float(np.abs(v0.data).max(initial=0.0))
    velocities = [v0]
    v = v0
    for k in range(steps):
        v = v + dt * epdiff_rhs(v, op)
        peak = float(np.abs(v.data).max(initial=0.0))
        if not np.isfinite(peak) or peak > limit:
            raise InstabilityError(f"EPDiff velocity grew to {peak:.3g} at step {k + 1} (limit {limit:.3g})")
        velocities.append(v)
    return GeodesicPath(velocities, steps)


def inverse_flow_displacement(path: GeodesicPath) -> ad.Tensor:
    """Displacement of ``phi^{-1}`` at t = 1.

    Integrates ``d psi/dt = -(D psi) v - v`` for the displacement ``psi`` of
    the inverse map, starting at zero.
    """
    v0, single = _batched(path.velocities[0])
    dt = path.dt
    psi = ad.Tensor(np.zeros(v0.shape))
    limit = None
    for k in range(path.steps):
        v, _ = _batched(path.velocities[k])
        vx, vy = v[:, 0:1], v[:, 1:2]
        transport = ad.diff(psi, X_AXIS) * vx + ad.diff(psi, Y_AXIS) * vy
        psi = psi - dt * (transport + v)
        peak = float(np.abs(psi.data).max(initial=0.0))
        if limit is None:
            limit = GROWTH_LIMIT * max(float(np.abs(v0.data).max(initial=0.0)), 1e-300)
        if not np.isfinite(peak) or peak > limit:
            raise InstabilityError(f"inverse flow displacement grew to {peak:.3g} at step {k + 1}")
    return ad.reshape(psi, psi.shape[1:]) if single else psi


def inverse_flow(path: GeodesicPath) -> ad.Tensor:
    """Absolute positions of ``phi^{-1}`` (deformation layout)."""
    disp = inverse_flow_displacement(path)
    h, w = disp.shape[-2:]
    return disp + field.identity_grid(h, w)


def forward_flow(path: GeodesicPath) -> np.ndarray:
    """Positions of ``phi`` by Euler steps ``phi <- phi + dt * v(t) o phi`` (arrays only)."""
    v0 = np.asarray(ad.as_tensor(path.velocities[0]).data)
    single = v0.ndim == 3
    h, w = v0.shape[-2:]
    phi = np.broadcast_to(field.identity_grid(h, w), v0.shape if not single else (2, h, w)).copy()
    for k in range(path.steps):
        v = ad.as_tensor(path.velocities[k]).data
        if single:
            phi = phi + path.dt * field.interpolate(v, phi)
        else:
            phi = phi + path.dt * field.interpolate_batch(v, phi)
    return phi


def warp(image, phi_inv) -> ad.Tensor:
    """``image o phi^{-1}``. Image ``(B, C, H, W)`` with positions ``(B, 2, H, W)``,
    or ``(H, W)`` with ``(2, H, W)``."""
    image = ad.as_tensor(image)
    phi_inv = ad.as_tensor(phi_inv)
    if image.ndim == 2:
        out = ad.interpolate(ad.reshape(image, (1, 1) + image.shape),
                             ad.reshape(phi_inv, (1,) + phi_inv.shape))
        return ad.reshape(out, image.shape)
    if image.ndim == 3:
        out = ad.interpolate(ad.reshape(image, (1,) + image.shape),
                             ad.reshape(phi_inv, (1,) + phi_inv.shape))
        return ad.reshape(out, image.shape)
    return ad.interpolate(image, phi_inv)


def shoot_and_warp(image, v0, op: MetricOperator, steps: int = DEFAULT_STEPS):
    """Convenience: ``(warped image, phi^{-1} positions, path)``."""
    path = shoot(v0, op, steps)
    phi_inv = inverse_flow(path)
    return warp(image, phi_inv), phi_inv, path


def min_jacobian_determinant(positions: np.ndarray) -> float:
    """Smallest Jacobian determinant of a deformation (diagnostic only)."""
    jac = field.jacobian(np.asarray(positions))
    det = jac[..., 0, 0, :, :] * jac[..., 1, 1, :, :] - jac[..., 0, 1, :, :] * jac[..., 1, 0, :, :]
    return float(det.min())
