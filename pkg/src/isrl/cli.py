"""Command-line entry point: ``isrl synth | train | evaluate | register | reproduce``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric divergence,
4 file-system error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import field
from .envgen import EnvSpec, build_benchmark, load_benchmark, write_benchmark
from .errors import ConfigError, InstabilityError, NumericError
from .trainer import (METRIC_FIELDS, TrainConfig, TrainingDiverged, evaluate_split, format_number, load_model,
                      metric_rows, train)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("isrl")

# CLI flag -> TrainConfig attribute
_TRAIN_FLAGS = {"mode": "mode", "lam": "lam", "beta": "beta", "alpha": "alpha", "sigma": "sigma",
                "steps": "steps", "seed": "seed", "epochs": "epochs"}


class UsageError(Exception):
    pass


def _read_json(path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return d


def _load_dataset(path):
    if path is None:
        raise UsageError("--dataset is required")
    p = Path(path)
    if not (p / "manifest.csv").is_file():
        raise UsageError(f"--dataset: {p} is not a dataset directory (no manifest.csv)")
    return load_benchmark(p)


def _csv_text(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\r\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: format_number(r[k]) for k in fields})
    return buf.getvalue()


# --- subcommands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    d = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    if args.resolution is not None:
        d["resolution"] = args.resolution
    spec = EnvSpec.from_dict(d)
    bench = build_benchmark(spec)
    out = write_benchmark(bench, args.out)
    rates = bench.flip_rates()
    print(f"wrote {len(bench)} samples to {out}")
    print(f"manifest checksum {bench.checksum()}")
    print(f"label flip rate {rates['p_l']:.4f} (p_l={spec.p_l})")
    for e in range(spec.n_envs):
        print(f"env {e}: color flip rate {rates[f'p_e[{e}]']:.4f} (p_e={spec.p_e[e]})")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    d = _read_json(args.config) if args.config else {}
    for flag, attr in _TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            d.pop("lambda" if attr == "lam" else attr, None)
            d[attr] = value
    cfg = TrainConfig.from_dict(d)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    bench = _load_dataset(args.dataset)
    if args.resolution is not None and args.resolution != bench.images.shape[-1]:
        raise UsageError(f"--resolution {args.resolution} does not match the dataset "
                         f"({bench.images.shape[-1]})")
    out = Path(args.out)
    try:
        res = train(cfg, bench, out, resume=args.resume)
    except TrainingDiverged as exc:
        print(f"diverged: {exc}; last stable checkpoint kept in {out}", file=sys.stderr)
        return EXIT_DIVERGED
    rows = metric_rows(res, cfg.mode, cfg.seed)
    (out / "metrics.csv").write_bytes(_csv_text(rows, METRIC_FIELDS).encode())
    print(f"{cfg.mode}: best epoch {res.best_epoch}, converged={res.converged}, "
          f"val acc {res.metrics['val']['acc']:.2f}, test acc {res.metrics['test']['acc']:.2f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    bench = _load_dataset(args.dataset)
    ckpt = Path(args.checkpoint)
    if not ckpt.with_suffix(".json").is_file():
        ckpt = ckpt / "best"
    if not ckpt.with_suffix(".json").is_file():
        raise UsageError(f"--checkpoint: no checkpoint at {args.checkpoint}")
    models = load_model(ckpt, bench)
    rows = []
    for split in ("val", "test"):
        m = evaluate_split(models, bench, split)
        rows.append({"model": models.cfg.mode, "backbone": "cnn", "seed": models.cfg.seed, "env": split, **m})
    text = _csv_text(rows, METRIC_FIELDS)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_bytes(text.encode())
    sys.stdout.write(text)
    return EXIT_OK


def _read_gray(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{p}: no such image")
    with open(p, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P6":
        return field.read_ppm(p).mean(axis=0)
    return field.read_pgm(p)


def cmd_register(args) -> int:
    from .geodesic import inverse_flow, min_jacobian_determinant, shoot, warp
    from .metric import MetricOperator
    from .registration import SrlConfig, register_direct

    tmpl = _read_gray(args.template)
    img = _read_gray(args.image)
    if tmpl.shape != img.shape:
        raise UsageError(f"template {tmpl.shape} and image {img.shape} differ in size")
    cfg = SrlConfig(sigma=args.sigma if args.sigma is not None else 0.02,
                    alpha=args.alpha if args.alpha is not None else 3.0,
                    steps=args.steps if args.steps is not None else 10)
    res = register_direct(tmpl, img, cfg, iters=args.iters)
    op = MetricOperator(*tmpl.shape, cfg.alpha)
    path = shoot(res.v0[None], op, cfg.steps)
    phi_inv = inverse_flow(path).data[0]
    warped = warp(tmpl[None, None], phi_inv[None]).data[0, 0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    field.write_vector_field(out / "phi_inv.vf", phi_inv)
    field.write_pgm(out / "warped.pgm", warped)
    report = {"data_term": res.data_term, "metric_term": res.metric_term, "energy": res.energy,
              "initial_data_term": res.initial_data_term, "stalled": res.stalled,
              "iterations": len(res.history) - 1, "min_jacobian_det": min_jacobian_determinant(phi_inv)}
    if args.dump_deformation:
        field.write_vector_field(out / "v0.vf", res.v0)
        field.write_pgm(out / "phi_inv_grid.pgm", field.grid_image(phi_inv))
    (out / "registration.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    print(f"data term {res.initial_data_term:.6g} -> {res.data_term:.6g}, metric term {res.metric_term:.6g}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    from . import experiments as ex

    if args.experiment != "all" and args.experiment not in ex.EXPERIMENTS:
        raise UsageError(f"unknown experiment {args.experiment!r}; valid names: {', '.join(ex.EXPERIMENTS)}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(ex.DEFAULT_SEEDS)
    base = dict(ex.DESK_PRESET)
    if args.config:
        given = _read_json(args.config)
        TrainConfig.from_dict(given).validate(strict=False)
        # only the keys present in the file override the preset
        base.update({("lam" if k == "lambda" else k): v for k, v in given.items()})
    for flag in ("beta", "alpha", "sigma", "steps"):
        if getattr(args, flag) is not None:
            base[flag] = getattr(args, flag)
    bench_base = {"resolution": args.resolution} if args.resolution else {}
    if args.dataset_spec:
        bench_base.update(_read_json(args.dataset_spec))
    names = list(ex.EXPERIMENTS) if args.experiment == "all" else [args.experiment]
    out = Path(args.out)
    for name in names:
        plan = ex.make_plan(name, seeds)
        rows = ex.run_plan(plan, out, base, bench_base)
        print(f"{name}: wrote {out / (name + '.csv')}")
        for cell, acc in ex.summary(rows).items():
            print(f"  {cell}: {acc:.2f}")
        if not args.no_plot:
            from .plotting import render
            print(f"  figure {render(rows, name, out)}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isrl", description="Invariant shape representation learning on 2D data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the multi-environment benchmark")
    s.add_argument("--config", help="JSON dataset spec (p_l, p_e, n_total, sizes, seed, resolution)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--resolution", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", help="flat JSON training config")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=["ISRL", "IRM-image", "ERM-image", "ERM-fused", "TWO-STEP"])
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--sigma", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resolution", type=int)
    t.add_argument("--resume", action="store_true", help="continue from <out>/last")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="metrics of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True, help="run directory or checkpoint path")
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", help="CSV path (also printed)")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("register", help="register a template to an image by geodesic shooting")
    r.add_argument("--template", required=True, help="PGM (or PPM, averaged to gray)")
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--alpha", type=float)
    r.add_argument("--sigma", type=float)
    r.add_argument("--steps", type=int)
    r.add_argument("--iters", type=int, default=150)
    r.add_argument("--dump-deformation", action="store_true", help="also write v0 and a grid picture of phi^-1")
    r.set_defaults(func=cmd_register)

    x = sub.add_parser("reproduce", help="run an experiment of the matrix and write CSV + figure")
    x.add_argument("experiment", help="model-comparison, flip-sweep, joint-vs-twostep, penalty-sweep, "
                                      "ablation, or all")
    x.add_argument("--out", required=True)
    x.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    x.add_argument("--config", help="JSON overrides of the training preset")
    x.add_argument("--dataset-spec", help="JSON overrides of the benchmark spec")
    x.add_argument("--beta", type=float)
    x.add_argument("--alpha", type=float)
    x.add_argument("--sigma", type=float)
    x.add_argument("--steps", type=int)
    x.add_argument("--resolution", type=int)
    x.add_argument("--no-plot", action="store_true", help="skip figure rendering")
    x.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"isrl {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, InstabilityError) as exc:
        print(f"isrl {args.command}: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"isrl {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
