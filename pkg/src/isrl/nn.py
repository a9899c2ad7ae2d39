"""Small building blocks for the convolutional networks: parameters, layers, Adam."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from . import autodiff as ad


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *stream)``; order independent."""
    words = [int(seed)] + [_word(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def _word(s) -> int:
    if isinstance(s, (int, np.integer)):
        return int(s)
    # stable across runs, unlike hash()
    return int.from_bytes(hashlib.blake2b(str(s).encode(), digest_size=8).digest(), "little")


class ParamSet:
    """Ordered mapping of parameter name to tracked Tensor."""

    def __init__(self):
        self.tensors: dict[str, ad.Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> ad.Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = ad.Tensor(value, requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def l2(self) -> ad.Tensor:
        """Sum of squares of the weight tensors (biases excluded)."""
        terms = [ad.sum_(ad.square(t)) for n, t in self.tensors.items() if not n.endswith(".b")]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self.tensors.items():
            if state[n].shape != t.shape:
                raise ValueError(f"shape mismatch for {n}: {state[n].shape} vs {t.shape}")
            t.data = np.array(state[n], dtype=np.float64)


class Conv2d:
    def __init__(self, params: ParamSet, name: str, c_in: int, c_out: int, rng,
                 k: int = 3, stride: int = 1, zero: bool = False):
        fan_in = c_in * k * k
        bound = math.sqrt(6.0 / fan_in)
        w = np.zeros((c_out, c_in, k, k)) if zero else rng.uniform(-bound, bound, (c_out, c_in, k, k))
        self.w = params.add(f"{name}.w", w)
        self.b = params.add(f"{name}.b", np.zeros(c_out))
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x):
        y = ad.conv2d(x, self.w, self.stride, self.pad)
        return y + ad.reshape(self.b, (1, -1, 1, 1))


class Linear:
    def __init__(self, params: ParamSet, name: str, n_in: int, n_out: int, rng, zero: bool = False):
        bound = math.sqrt(6.0 / n_in)
        w = np.zeros((n_in, n_out)) if zero else rng.uniform(-bound, bound, (n_in, n_out))
        self.w = params.add(f"{name}.w", w)
        self.b = params.add(f"{name}.b", np.zeros(n_out))

    def __call__(self, x):
        return ad.matmul(x, self.w) + self.b


class Adam:
    """Adam with bias correction; parameters are updated in place."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g.data if isinstance(g, ad.Tensor) else g
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"{prefix}.m.{p.name}"] = m.copy()
            out[f"{prefix}.v.{p.name}"] = v.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray], prefix: str) -> None:
        self.t = int(state[f"{prefix}.t"][0])
        for i, p in enumerate(self.params):
            self.m[i] = np.array(state[f"{prefix}.m.{p.name}"])
            self.v[i] = np.array(state[f"{prefix}.v.{p.name}"])


def cosine_lr(base: float, epoch: int, total: int) -> float:
    """Cosine annealing from ``base`` towards zero over ``total`` epochs."""
    if total <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / total))


# --- checkpoints ---------------------------------------------------------------

def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Flat little-endian float64 blob ``<path>.bin`` plus manifest ``<path>.json``."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    manifest = {"dtype": "float64-le", "arrays": entries, "meta": meta or {}}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    out = {}
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return out, manifest.get("meta", {})
