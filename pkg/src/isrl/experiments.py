"""Experiment matrix: model comparison, flip sweep, joint vs. two-step, penalty sweep, ablation.

Every run is cached under ``<out>/runs/<key>.json`` where the key hashes the
training config, the benchmark spec and the package source. Re-running a
finished experiment reads the cache and rewrites byte-identical CSVs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .envgen import EnvSpec, build_benchmark
from .errors import ConfigError, NumericError
from .trainer import TrainConfig, format_number, train

log = logging.getLogger(__name__)

PENALTY_GRID = (1e4, 2.5e4, 5e4, 7.5e4, 1e5)
FLIP_GRID = (0.0, 0.25, 0.4, 0.5)
COMPARISON_MODES = ("ERM-image", "IRM-image", "ISRL")
ABLATION_MODES = ("ERM-image", "ERM-fused", "IRM-image", "ISRL")
DEFAULT_SEEDS = (0, 1, 2)

# Desk-scale training settings shared by every experiment. Chosen so that a
# shape-branch run fits in a few CPU minutes; see README for the reasoning.
DESK_PRESET = {
    "epochs": 20,
    "lr": 3e-3,
    "warmup": 0.25,
    "warmup_schedule": "step",
    "select_by": "last",
    "shape_input": "latent",
    "shape_widths": (4, 8, 16),
    "srl_batch": 8,
}

CSV_FIELDS = ["experiment", "cell", "mode", "p_l", "lambda", "seed", "status",
              "acc", "prec_micro", "prec_macro", "f1_micro", "f1_macro"]
METRICS = CSV_FIELDS[7:]


@dataclass(frozen=True)
class Cell:
    label: str
    mode: str
    overrides: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentPlan:
    name: str
    cells: tuple
    seeds: tuple = DEFAULT_SEEDS

    def __post_init__(self):
        labels = [c.label for c in self.cells]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"{self.name}: duplicate cell labels")
        if not self.cells:
            raise ConfigError(f"{self.name}: empty grid")
        if not self.seeds:
            raise ConfigError(f"{self.name}: seeds must be explicit and nonempty")


def _model_comparison():
    return tuple(Cell(m, m) for m in COMPARISON_MODES)


def _ablation():
    return tuple(Cell(m, m) for m in ABLATION_MODES)


def _flip_sweep():
    return tuple(Cell(f"p_l={p:g}/{m}", m, bench={"p_l": p})
                 for p in FLIP_GRID for m in COMPARISON_MODES)


def _joint_vs_twostep():
    return (Cell("joint", "ISRL"), Cell("two-step", "TWO-STEP"))


def _penalty_sweep():
    return tuple(Cell(f"lambda={lam:g}", "ISRL", {"lam": lam}) for lam in PENALTY_GRID)


EXPERIMENTS = {
    "model-comparison": _model_comparison,
    "flip-sweep": _flip_sweep,
    "joint-vs-twostep": _joint_vs_twostep,
    "penalty-sweep": _penalty_sweep,
    "ablation": _ablation,
}


def make_plan(name: str, seeds=DEFAULT_SEEDS) -> ExperimentPlan:
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; valid: {', '.join(EXPERIMENTS)}")
    return ExperimentPlan(name, EXPERIMENTS[name](), tuple(int(s) for s in seeds))


# --- run cache ------------------------------------------------------------------

# Modules whose code can change a training result. Reporting code (cli,
# plotting, this module) is left out so that editing it keeps the cache valid;
# the experiment settings themselves enter the key through the config.
TRAINING_MODULES = ("autodiff", "classifier", "envgen", "errors", "field", "geodesic", "metric", "nn",
                    "registration", "trainer")


def source_digest() -> str:
    """Hash of the training sources, so cached runs are invalidated by code changes."""
    h = hashlib.blake2b(digest_size=8)
    root = Path(__file__).parent
    for name in TRAINING_MODULES:
        h.update(name.encode())
        h.update((root / f"{name}.py").read_bytes())
    return h.hexdigest()


def run_key(cfg: TrainConfig, spec: EnvSpec) -> str:
    blob = json.dumps({"config": cfg.to_dict(), "bench": spec.to_dict(), "source": source_digest()},
                      sort_keys=True)
    return hashlib.blake2b(blob.encode(), digest_size=12).hexdigest()


def cell_config(cell: Cell, seed: int, base: dict | None = None) -> TrainConfig:
    kw = dict(DESK_PRESET if base is None else base)
    kw.update(cell.overrides)
    kw.update(mode=cell.mode, seed=seed)
    return TrainConfig(**kw)


def cell_bench_spec(cell: Cell, bench_base: dict | None = None) -> EnvSpec:
    kw = dict(bench_base or {})
    kw.update(cell.bench)
    return EnvSpec(**kw)


_BENCH_CACHE: dict[str, object] = {}


def _bench(spec: EnvSpec):
    key = json.dumps(spec.to_dict(), sort_keys=True)
    if key not in _BENCH_CACHE:
        _BENCH_CACHE[key] = build_benchmark(spec)
    return _BENCH_CACHE[key]


def run_one(cfg: TrainConfig, spec: EnvSpec, cache_dir=None) -> dict:
    """Train once (or read the cache); returns ``{"status", "metrics", "cpu_seconds", ...}``."""
    key = run_key(cfg, spec)
    path = Path(cache_dir) / f"{key}.json" if cache_dir is not None else None
    if path is not None and path.exists():
        return json.loads(path.read_text())
    t0 = time.process_time()
    try:
        res = train(cfg, _bench(spec))
        out = {"status": "ok", "metrics": res.metrics["test"]}
    except (NumericError, ConfigError) as exc:
        log.warning("run %s failed: %s", key, exc)
        out = {"status": f"failed: {type(exc).__name__}", "metrics": {}}
    out["cpu_seconds"] = time.process_time() - t0
    out["key"] = key
    out["config"] = cfg.to_dict()
    out["bench"] = spec.to_dict()
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(out, sort_keys=True, indent=1))
        os.replace(tmp, path)
    return out


def _run_job(job):
    return run_one(*job)


def worker_count(env=None) -> int:
    raw = (env if env is not None else os.environ).get("ISRL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ISRL_THREADS: expected an integer, got {raw!r}") from None
    return max(1, n)


def run_plan(plan: ExperimentPlan, out_dir, base: dict | None = None, bench_base: dict | None = None,
             workers: int | None = None) -> list[dict]:
    """Train every (cell, seed) of ``plan`` and write ``<out_dir>/<name>.csv``.

    Rows come back in (cell, seed) order regardless of the worker count.
    """
    out_dir = Path(out_dir)
    cache = out_dir / "runs"
    jobs, meta = [], []
    for cell in plan.cells:
        spec = cell_bench_spec(cell, bench_base)
        for seed in plan.seeds:
            cfg = cell_config(cell, seed, base)
            jobs.append((cfg, spec, cache))
            meta.append((cell, cfg, spec))
    n = min(workers or worker_count(), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(n) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    rows = []
    for (cell, cfg, spec), res in zip(meta, results):
        row = {"experiment": plan.name, "cell": cell.label, "mode": cell.mode, "p_l": spec.p_l,
               "lambda": cfg.effective_lambda, "seed": cfg.seed, "status": res["status"],
               "cpu_seconds": res.get("cpu_seconds", 0.0)}
        row.update({k: res["metrics"].get(k, "") for k in METRICS})
        rows.append(row)
    rows += aggregate(rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{plan.name}.csv").write_bytes(to_csv(rows).encode())
    return rows


def aggregate(rows: list[dict]) -> list[dict]:
    """``mean`` and ``std`` rows per cell over successful seeds (population std)."""
    out = []
    cells = list(dict.fromkeys(r["cell"] for r in rows))
    for label in cells:
        group = [r for r in rows if r["cell"] == label]
        ok = [r for r in group if r["status"] == "ok"]
        first = group[0]
        for stat in ("mean", "std"):
            row = {k: first[k] for k in ("experiment", "cell", "mode", "p_l", "lambda")}
            row.update(seed=stat, status=f"ok {len(ok)}/{len(group)}")
            for k in METRICS:
                vals = np.array([r[k] for r in ok], dtype=np.float64)
                row[k] = (float(vals.mean()) if stat == "mean" else float(vals.std())) if ok else ""
            out.append(row)
    return out


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\r\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: format_number(r[k]) for k in CSV_FIELDS})
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summary(rows: list[dict]) -> dict[str, float]:
    """Mean test accuracy per cell label."""
    return {r["cell"]: float(r["acc"]) for r in rows if str(r["seed"]) == "mean" and r["acc"] != ""}


def per_seed(rows: list[dict], cell: str) -> dict[int, float]:
    return {int(r["seed"]): float(r["acc"]) for r in rows
            if r["cell"] == cell and str(r["seed"]) not in ("mean", "std") and r["status"] == "ok"}


def with_seeds(plan: ExperimentPlan, seeds) -> ExperimentPlan:
    return replace(plan, seeds=tuple(seeds))


__all__ = ["Cell", "ExperimentPlan", "EXPERIMENTS", "DESK_PRESET", "PENALTY_GRID", "FLIP_GRID",
           "make_plan", "run_plan", "run_one", "run_key", "aggregate", "to_csv", "read_csv", "summary",
           "per_seed", "worker_count", "CSV_FIELDS"]
