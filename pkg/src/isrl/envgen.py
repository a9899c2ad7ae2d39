"""Colored-shapes benchmark with environment-dependent color/label correlation.

Generation per sample: draw the shape class ``y_tilde`` (balanced), flip it
to the final label ``y`` with probability ``p_l``, flip ``y`` to the color id
``z`` with the environment's ``p_e``, rasterize the shape with random jitter
and paint it into channel ``z``. A flip re-draws uniformly among the other
two classes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import field
from .errors import ConfigError
from .nn import make_rng

log = logging.getLogger(__name__)

CLASSES = ("circle", "square", "triangle")
N_CLASSES = 3
COLORS = ("red", "green", "blue")

# shape size as a fraction of the image width
CIRCLE_RADIUS = 0.25
SQUARE_HALF_SIDE = 0.22
TRIANGLE_CIRCUMRADIUS = 0.30


@dataclass(frozen=True)
class Jitter:
    shift: float = 0.10      # center offset, fraction of width
    scale: float = 0.20      # relative size change
    rotation: float = 20.0   # degrees, squares and triangles only

    @classmethod
    def none(cls) -> "Jitter":
        return cls(0.0, 0.0, 0.0)


def _supersample_coords(size: int, factor: int):
    sub = (np.arange(size * factor) + 0.5) / factor
    return np.meshgrid(sub, sub, indexing="ij")  # (y, x)


def rasterize(shape: int | str, rng: np.random.Generator | None = None, size: int = 32,
              jitter: Jitter | None = None, supersample: int = 8) -> np.ndarray:
    """Antialiased filled shape on a black ``size x size`` background.

    ``rng=None`` or a zero :class:`Jitter` gives the canonical centered shape,
    which serves as the registration template of the class.
    """
    cls = CLASSES.index(shape) if isinstance(shape, str) else int(shape)
    if not 0 <= cls < N_CLASSES:
        raise ValueError(f"unknown shape class {shape!r}")
    jitter = jitter or Jitter()
    if rng is None:
        jitter = Jitter.none()
        draws = np.zeros(4)
    else:
        # always consume four draws so streams stay aligned across classes
        draws = rng.uniform(-1.0, 1.0, size=4)
    cx = size / 2 + draws[0] * jitter.shift * size
    cy = size / 2 + draws[1] * jitter.shift * size
    scale = 1.0 + draws[2] * jitter.scale
    angle = math.radians(draws[3] * jitter.rotation) if cls != 0 else 0.0

    yy, xx = _supersample_coords(size, supersample)
    dx, dy = xx - cx, yy - cy
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    u = cos_a * dx + sin_a * dy
    v = -sin_a * dx + cos_a * dy
    if cls == 0:
        r = CIRCLE_RADIUS * size * scale
        inside = u * u + v * v <= r * r
    elif cls == 1:
        s = SQUARE_HALF_SIDE * size * scale
        inside = (np.abs(u) <= s) & (np.abs(v) <= s)
    else:
        inside = _inside_triangle(u, v, TRIANGLE_CIRCUMRADIUS * size * scale)
    cover = inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return cover.astype(np.float64)


def _inside_triangle(u, v, radius):
    # equilateral, apex pointing up (negative y); centroid at the origin
    verts = [(radius * math.cos(a), radius * math.sin(a))
             for a in (-math.pi / 2, math.pi / 6, 5 * math.pi / 6)]
    inside = np.ones(u.shape, dtype=bool)
    for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
        # counter-clockwise in image coordinates means cross >= 0 inside
        inside &= (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= 0
    return inside


def templates(size: int = 32) -> np.ndarray:
    """Canonical shape per class, shape ``(3, 1, H, W)``, quantized to 8 bits."""
    return np.stack([quantize(rasterize(c, None, size))[None] for c in range(N_CLASSES)])


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid so images survive a PGM/PPM round trip unchanged."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def flip_label(label, p: float, rng: np.random.Generator):
    """Keep ``label`` with probability ``1 - p``; otherwise pick one of the other classes."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"flip probability must be in [0, 1], got {p}")
    label = np.asarray(label)
    flip = rng.random(label.shape) < p
    offset = rng.integers(1, N_CLASSES, size=label.shape)
    out = np.where(flip, (label + offset) % N_CLASSES, label)
    return int(out) if out.ndim == 0 else out


def sample_color(label, p_e: float, rng: np.random.Generator):
    """Color id: the label flipped with the environment probability ``p_e``."""
    return flip_label(label, p_e, rng)


def colorize(gray: np.ndarray, z: int) -> np.ndarray:
    """Place ``gray`` in RGB channel ``z`` (0 red, 1 green, 2 blue)."""
    if z not in (0, 1, 2):
        raise ValueError(f"color id must be 0, 1 or 2, got {z}")
    rgb = np.zeros((3,) + gray.shape)
    rgb[z] = gray
    return rgb


@dataclass(frozen=True)
class EnvSpec:
    """Benchmark layout. The last environment is the test environment."""

    p_l: float = 0.25
    p_e: tuple = (0.2, 0.1, 0.9)
    n_total: int = 3000
    splits: tuple = (0.70, 0.15, 0.15)
    sizes: tuple | None = None
    seed: int = 0
    resolution: int = 32
    jitter: Jitter = dc_field(default_factory=Jitter)

    def __post_init__(self):
        object.__setattr__(self, "p_e", tuple(float(p) for p in self.p_e))
        object.__setattr__(self, "splits", tuple(float(s) for s in self.splits))
        if self.sizes is not None:
            object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.p_l <= 1.0:
            raise ConfigError("p_l: must be in [0, 1]")
        if len(self.p_e) < 2:
            raise ConfigError("p_e: need at least one training and one test environment")
        if any(not 0.0 <= p <= 1.0 for p in self.p_e):
            raise ConfigError("p_e: probabilities must be in [0, 1]")
        if len(self.splits) != 3 or abs(sum(self.splits) - 1.0) > 1e-9 or min(self.splits) < 0:
            raise ConfigError("splits: need three nonnegative fractions summing to 1")
        if self.sizes is not None and len(self.sizes) != len(self.p_e):
            raise ConfigError(f"sizes: {len(self.sizes)} entries for {len(self.p_e)} environments in p_e")
        if self.resolution < 8:
            raise ConfigError("resolution: must be at least 8")

    @property
    def n_envs(self) -> int:
        return len(self.p_e)

    @property
    def train_envs(self) -> list[int]:
        return list(range(self.n_envs - 1))

    @property
    def test_env(self) -> int:
        return self.n_envs - 1

    def env_sizes(self) -> list[int]:
        if self.sizes is not None:
            return list(self.sizes)
        n_test = int(round(self.n_total * self.splits[2]))
        n_train_envs = self.n_envs - 1
        # spread the remainder over the first environments so the sizes sum to n_total
        base, extra = divmod(self.n_total - n_test, n_train_envs)
        return [base + (e < extra) for e in range(n_train_envs)] + [n_test]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["jitter"] = asdict(self.jitter)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
        d = dict(d)
        if "jitter" in d and isinstance(d["jitter"], dict):
            d["jitter"] = Jitter(**d["jitter"])
        for key in ("p_e", "splits", "sizes"):
            if key in d and d[key] is not None:
                if not isinstance(d[key], (list, tuple)):
                    raise ConfigError(f"{key}: must be a list")
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Benchmark:
    """In-memory dataset; all per-sample arrays are aligned by index."""

    spec: EnvSpec
    images: np.ndarray      # (N, 3, H, W)
    y: np.ndarray
    y_tilde: np.ndarray
    z: np.ndarray
    env: np.ndarray
    split: np.ndarray       # "train" / "val" / "test"
    templates: np.ndarray   # (3, 1, H, W)

    def __len__(self):
        return len(self.y)

    @property
    def gray(self) -> np.ndarray:
        return self.images.sum(axis=1, keepdims=True)

    def indices(self, split: str, env: int | None = None) -> np.ndarray:
        mask = self.split == split
        if env is not None:
            mask &= self.env == env
        return np.flatnonzero(mask)

    def manifest_rows(self) -> list[dict]:
        return [{"id": i, "split": str(self.split[i]), "env": int(self.env[i]), "y": int(self.y[i]),
                 "y_tilde": int(self.y_tilde[i]), "z": int(self.z[i]), "seed": self.spec.seed}
                for i in range(len(self))]

    def manifest_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=MANIFEST_FIELDS, lineterminator="\r\n")
        writer.writeheader()
        writer.writerows(self.manifest_rows())
        return buf.getvalue()

    def checksum(self) -> str:
        h = hashlib.sha256(self.manifest_csv().encode())
        h.update(np.ascontiguousarray(self.images).tobytes())
        return h.hexdigest()

    def flip_rates(self) -> dict:
        out = {"p_l": float(np.mean(self.y != self.y_tilde))}
        for e in range(self.spec.n_envs):
            sel = self.env == e
            out[f"p_e[{e}]"] = float(np.mean(self.z[sel] != self.y[sel]))
        return out


MANIFEST_FIELDS = ["id", "split", "env", "y", "y_tilde", "z", "seed"]


def _balanced_classes(n: int, env: int) -> np.ndarray:
    if n % N_CLASSES:
        warnings.warn(f"environment {env}: size {n} is not divisible by {N_CLASSES}; "
                      f"classes differ by at most one sample", stacklevel=3)
    return np.arange(n) % N_CLASSES


def build_benchmark(spec: EnvSpec) -> Benchmark:
    """Generate every sample from ``(spec.seed, sample id)`` streams."""
    size = spec.resolution
    sizes = spec.env_sizes()
    train_frac = spec.splits[0] / (spec.splits[0] + spec.splits[1]) if spec.splits[1] + spec.splits[0] else 1.0
    n = sum(sizes)
    images = np.zeros((n, 3, size, size))
    y = np.zeros(n, dtype=int)
    y_tilde = np.zeros(n, dtype=int)
    z = np.zeros(n, dtype=int)
    env = np.zeros(n, dtype=int)
    split = np.empty(n, dtype=object)

    start = 0
    for e, n_e in enumerate(sizes):
        classes = _balanced_classes(n_e, e)
        # within each class the first share goes to train, the rest to val
        rank = np.arange(n_e) // N_CLASSES
        per_class = np.bincount(classes, minlength=N_CLASSES)
        for i in range(n_e):
            sid = start + i
            rng = make_rng(spec.seed, "sample", sid)
            yt = int(classes[i])
            yl = flip_label(yt, spec.p_l, rng)
            zc = sample_color(yl, spec.p_e[e], rng)
            gray = rasterize(yt, rng, size, spec.jitter)
            images[sid] = quantize(colorize(gray, zc))
            y[sid], y_tilde[sid], z[sid], env[sid] = yl, yt, zc, e
            if e == spec.test_env:
                split[sid] = "test"
            else:
                n_train_c = int(round(per_class[yt] * train_frac))
                split[sid] = "train" if rank[i] < n_train_c else "val"
        start += n_e
    log.info("built benchmark: %d samples, env sizes %s", n, sizes)
    return Benchmark(spec, images, y, y_tilde, z, env, split.astype(str), templates(size))


# --- directory format -----------------------------------------------------------

def write_benchmark(bench: Benchmark, out_dir) -> Path:
    """``manifest.csv``, ``spec.json`` and one PPM per sample under ``images/``."""
    import json

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "manifest.csv").write_text(bench.manifest_csv(), newline="")
    (out / "spec.json").write_text(json.dumps(bench.spec.to_dict(), indent=1, sort_keys=True))
    for i in range(len(bench)):
        field.write_ppm(out / "images" / f"{i:05d}.ppm", bench.images[i])
    for c in range(N_CLASSES):
        field.write_pgm(out / f"template_{CLASSES[c]}.pgm", bench.templates[c, 0])
    return out


def load_benchmark(path) -> Benchmark:
    import json

    path = Path(path)
    if not (path / "manifest.csv").is_file():
        raise FileNotFoundError(f"{path}: no manifest.csv")
    spec = EnvSpec.from_dict(json.loads((path / "spec.json").read_text()))
    with open(path / "manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    n = len(rows)
    images = np.stack([field.read_ppm(path / "images" / f"{int(r['id']):05d}.ppm") for r in rows])
    col = lambda k: np.array([int(r[k]) for r in rows])  # noqa: E731
    split = np.array([r["split"] for r in rows])
    tmpl = np.stack([field.read_pgm(path / f"template_{c}.pgm")[None] for c in CLASSES])
    assert images.shape[0] == n
    return Benchmark(spec, images, col("y"), col("y_tilde"), col("z"), col("env"), split, tmpl)


def color_argmax_accuracy(bench: Benchmark, split: str = "test") -> float:
    """Accuracy of predicting the label as the brightest channel."""
    idx = bench.indices(split)
    pred = bench.images[idx].sum(axis=(2, 3)).argmax(axis=1)
    return float(np.mean(pred == bench.y[idx]))


def monte_carlo_color_agreement(p_l: float, p_e: float, n: int, seed: int = 12345) -> dict:
    """Independent simulation of the label/color process (no images).

    Returns agreement rates of color with ``y`` and of shape class with ``y``.
    """
    rng = np.random.default_rng(seed)
    yt = rng.integers(0, N_CLASSES, n)
    flip_y = rng.random(n) < p_l
    y = np.where(flip_y, (yt + rng.integers(1, N_CLASSES, n)) % N_CLASSES, yt)
    flip_z = rng.random(n) < p_e
    z = np.where(flip_z, (y + rng.integers(1, N_CLASSES, n)) % N_CLASSES, y)
    return {"color": float(np.mean(z == y)), "shape": float(np.mean(yt == y))}
