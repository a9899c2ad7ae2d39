"""Dense 2D scalar and vector fields on pixel grids.

Conventions
-----------
* A scalar field is an array of shape ``(H, W)``; batched kernels take
  ``(B, C, H, W)``.
* A vector field is ``(2, H, W)`` (batched ``(B, 2, H, W)``). Component 0 is
  the x (column) direction, component 1 the y (row) direction, both in
  pixel units.
* A deformation stores absolute sample positions in the vector-field layout.
  ``identity_grid(h, w)[0, i, j] == j`` and ``[1, i, j] == i``.

The kernels here are plain numpy; :mod:`isrl.autodiff` wraps them as
differentiable primitives.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError

# axis of the array that the spatial direction x_j varies along
_SPATIAL_AXIS = {0: -1, 1: -2}


def identity_grid(height: int, width: int) -> np.ndarray:
    """Absolute positions of the identity deformation, shape ``(2, H, W)``."""
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    return np.stack([xx, yy])


def displacement(positions: np.ndarray) -> np.ndarray:
    """Displacement view ``positions - identity`` of a deformation."""
    h, w = positions.shape[-2:]
    return positions - identity_grid(h, w)


def _as_batched(f, pos):
    f = np.asarray(f, dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64)
    if f.ndim == 2 and pos.ndim == 3:
        return f[None, None], pos[None], "single"
    if f.ndim == 3 and pos.ndim == 3:
        return f[None], pos[None], "channels"
    if f.ndim == 4 and pos.ndim == 4:
        return f, pos, "batch"
    raise DimensionError(f"cannot sample field of shape {f.shape} at positions {pos.shape}")


def _check_grid(f, pos):
    if pos.shape[1] != 2:
        raise DimensionError(f"positions need 2 components, got shape {pos.shape}")
    if f.shape[0] != pos.shape[0] or f.shape[-2:] != pos.shape[-2:]:
        raise DimensionError(f"grid mismatch: field {f.shape} vs positions {pos.shape}")
    if min(f.shape[-2:]) < 2:
        raise DimensionError("interpolation needs at least a 2x2 grid")


def _corners(pos, height, width):
    """Cell indices and fractional offsets for clamped bilinear lookup."""
    x = np.clip(pos[:, 0], 0.0, width - 1)
    y = np.clip(pos[:, 1], 0.0, height - 1)
    x0 = np.minimum(np.floor(x), width - 2).astype(np.intp)
    y0 = np.minimum(np.floor(y), height - 2).astype(np.intp)
    fx = x - x0
    fy = y - y0
    return x0, y0, fx, fy


def _gather(f, x0, y0):
    """Values of f at the four cell corners, each of shape (B, C, H, W)."""
    b = np.arange(f.shape[0])[:, None, None]
    f00 = f[b, :, y0, x0]
    f01 = f[b, :, y0, x0 + 1]
    f10 = f[b, :, y0 + 1, x0]
    f11 = f[b, :, y0 + 1, x0 + 1]
    # fancy indexing puts the channel axis last
    return [np.moveaxis(c, -1, 1) for c in (f00, f01, f10, f11)]


def interpolate_batch(f: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Bilinear samples of ``f (B, C, H, W)`` at ``pos (B, 2, H, W)``."""
    _check_grid(f, pos)
    h, w = f.shape[-2:]
    x0, y0, fx, fy = _corners(pos, h, w)
    f00, f01, f10, f11 = _gather(f, x0, y0)
    fx = fx[:, None]
    fy = fy[:, None]
    return (1.0 - fy) * ((1.0 - fx) * f00 + fx * f01) + fy * ((1.0 - fx) * f10 + fx * f11)


def interpolate_adjoint_batch(g: np.ndarray, pos: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`interpolate_batch` in the field argument.

    Scatters each output cotangent back onto the four source nodes with the
    bilinear weights.
    """
    bsz, ch, h, w = shape
    x0, y0, fx, fy = _corners(pos, h, w)
    fx = fx[:, None]
    fy = fy[:, None]
    base = (np.arange(bsz * ch).reshape(bsz, ch, 1, 1)) * (h * w)
    idx00 = base + (y0 * w + x0)[:, None]
    out = np.zeros(bsz * ch * h * w)
    n = out.size
    for idx, wt in ((idx00, (1 - fx) * (1 - fy)),
                    (idx00 + 1, fx * (1 - fy)),
                    (idx00 + w, (1 - fx) * fy),
                    (idx00 + w + 1, fx * fy)):
        out += np.bincount(idx.ravel(), weights=(g * wt).ravel(), minlength=n)
    return out.reshape(shape)


def interpolate_position_grad_batch(f: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Partial derivatives of the bilinear interpolant with respect to position.

    Returns ``(B, C, 2, H, W)``. Coordinates outside the domain get zero
    derivative along the clamped axis.
    """
    h, w = f.shape[-2:]
    x0, y0, fx, fy = _corners(pos, h, w)
    f00, f01, f10, f11 = _gather(f, x0, y0)
    fx = fx[:, None]
    fy = fy[:, None]
    dx = (1.0 - fy) * (f01 - f00) + fy * (f11 - f10)
    dy = (1.0 - fx) * (f10 - f00) + fx * (f11 - f01)
    inside_x = ((pos[:, 0] >= 0) & (pos[:, 0] <= w - 1))[:, None]
    inside_y = ((pos[:, 1] >= 0) & (pos[:, 1] <= h - 1))[:, None]
    return np.stack([dx * inside_x, dy * inside_y], axis=2)


def interpolate(f: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Sample ``f`` at absolute positions ``pos`` with clamp-to-edge bilinear lookup.

    Accepts ``(H, W)`` with ``(2, H, W)``, ``(C, H, W)`` with ``(2, H, W)``,
    or batched ``(B, C, H, W)`` with ``(B, 2, H, W)``.
    """
    fb, pb, kind = _as_batched(f, pos)
    out = interpolate_batch(fb, pb)
    if kind == "single":
        return out[0, 0]
    if kind == "channels":
        return out[0]
    return out


def compose(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Deformation ``outer ∘ inner``: outer positions looked up at inner(x).

    Displacements are interpolated rather than absolute positions so that a
    clamped lookup near the border still reproduces pure translations.
    """
    outer = np.asarray(outer, dtype=np.float64)
    inner = np.asarray(inner, dtype=np.float64)
    if outer.shape != inner.shape or outer.shape[-3] != 2:
        raise DimensionError(f"cannot compose deformations {outer.shape} and {inner.shape}")
    return inner + interpolate(displacement(outer), inner)


def _check_diff_grid(x):
    if min(x.shape[-2:]) < 3:
        raise DimensionError(f"finite differences need a grid of at least 3x3, got {x.shape[-2:]}")


def diff(x: np.ndarray, axis: int) -> np.ndarray:
    """First derivative along ``axis``: central inside, one-sided at the ends."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[axis]
    if n < 3:
        raise DimensionError(f"axis {axis} has only {n} nodes; need at least 3")
    xm = np.moveaxis(x, axis, -1)
    out = np.empty_like(xm)
    out[..., 1:-1] = 0.5 * (xm[..., 2:] - xm[..., :-2])
    out[..., 0] = xm[..., 1] - xm[..., 0]
    out[..., -1] = xm[..., -1] - xm[..., -2]
    return np.moveaxis(out, -1, axis)


def diff_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of :func:`diff` along the same axis."""
    gm = np.moveaxis(np.asarray(g, dtype=np.float64), axis, -1)
    out = np.zeros_like(gm)
    out[..., 2:] += 0.5 * gm[..., 1:-1]
    out[..., :-2] -= 0.5 * gm[..., 1:-1]
    out[..., 1] += gm[..., 0]
    out[..., 0] -= gm[..., 0]
    out[..., -1] += gm[..., -1]
    out[..., -2] -= gm[..., -1]
    return np.moveaxis(out, -1, axis)


def jacobian(v: np.ndarray) -> np.ndarray:
    """Per-node Jacobian ``J[..., i, j, :, :] = d v_i / d x_j`` of a vector field.

    ``v`` has shape ``(..., 2, H, W)``; the result is ``(..., 2, 2, H, W)``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim < 3 or v.shape[-3] != 2:
        raise DimensionError(f"expected a vector field (..., 2, H, W), got {v.shape}")
    _check_diff_grid(v)
    return np.stack([diff(v, _SPATIAL_AXIS[0]), diff(v, _SPATIAL_AXIS[1])], axis=-3)


def divergence(v: np.ndarray) -> np.ndarray:
    """Trace of :func:`jacobian`."""
    jac = jacobian(v)
    return jac[..., 0, 0, :, :] + jac[..., 1, 1, :, :]


# --- serialization -----------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """Write a grayscale image in [0, 1] as binary 8-bit PGM (P5)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"PGM needs a 2D image, got {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """Write a ``(3, H, W)`` RGB image in [0, 1] as binary 8-bit PPM (P6)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"PPM needs a (3, H, W) image, got {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, h, w = data.shape
    body = np.ascontiguousarray(np.moveaxis(data, 0, -1)).tobytes()
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + body)


def _read_netpbm(path, magic: bytes):
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic!r} header, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    return raw[pos + 1:], h, w


def read_pgm(path) -> np.ndarray:
    body, h, w = _read_netpbm(path, b"P5")
    return np.frombuffer(body, dtype=np.uint8, count=h * w).reshape(h, w) / 255.0


def read_ppm(path) -> np.ndarray:
    body, h, w = _read_netpbm(path, b"P6")
    data = np.frombuffer(body, dtype=np.uint8, count=3 * h * w).reshape(h, w, 3)
    return np.moveaxis(data, -1, 0) / 255.0


def write_vector_field(path, v: np.ndarray) -> None:
    """Write a ``(2, H, W)`` field: uint32 height and width, then node-interleaved float32 (x, y)."""
    v = np.asarray(v)
    if v.ndim != 3 or v.shape[0] != 2:
        raise DimensionError(f"expected (2, H, W), got {v.shape}")
    _, h, w = v.shape
    body = np.ascontiguousarray(np.moveaxis(v, 0, -1)).astype("<f4").tobytes()
    Path(path).write_bytes(struct.pack("<II", h, w) + body)


def read_vector_field(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    h, w = struct.unpack("<II", raw[:8])
    data = np.frombuffer(raw, dtype="<f4", offset=8, count=2 * h * w).reshape(h, w, 2)
    return np.moveaxis(data, -1, 0).astype(np.float64)


def grid_image(positions: np.ndarray, spacing: int = 4) -> np.ndarray:
    """Rasterize the deformed coordinate grid lines for a quick PGM visualization."""
    _, h, w = positions.shape
    img = np.zeros((h, w))
    ident = identity_grid(h, w)
    for comp in (0, 1):
        # nodes whose deformed coordinate sits close to a grid line
        phase = np.mod(positions[comp], spacing)
        near = np.minimum(phase, spacing - phase) < 0.5
        img = np.maximum(img, near.astype(np.float64))
    # keep the frame so the picture has a reference
    img[ident[1] == 0] = img[ident[1] == h - 1] = 1.0
    return img
