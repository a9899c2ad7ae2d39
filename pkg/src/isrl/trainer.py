"""Joint alternating training of the shape network and the invariant classifier.

One optimization step works through the training environments as follows:

1. shape pass: for each environment, one Adam step on the registration loss
   of that environment's batch (label-selected templates);
2. classifier pass: forward every environment's batch through the fused
   classifier, form ``beta * sum_e (R_e + lambda_t * P_e)`` and take one Adam
   step on the classifier parameters, and (joint modes) on the shape network.

Baselines reuse the same loop with parts switched off (see ``MODE_TABLE``).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .classifier import (FusedClassifier, evaluate_predictions, ic_loss, shape_features)
from .envgen import N_CLASSES, Benchmark
from .errors import ConfigError, NumericError
from .metric import MetricOperator
from .nn import Adam, cosine_lr, load_arrays, make_rng, save_arrays
from .registration import ShapeNet, SrlConfig, make_pairs, srl_loss

log = logging.getLogger(__name__)

MODES = ("ISRL", "IRM-image", "ERM-image", "ERM-fused", "TWO-STEP")


@dataclass(frozen=True)
class ModeSpec:
    use_shape: bool
    invariant: bool        # IRMv1 penalty on
    joint: bool            # shape network trained alongside the classifier
    pretrain: bool         # shape network trained first, then frozen


MODE_TABLE = {
    "ISRL": ModeSpec(True, True, True, False),
    "IRM-image": ModeSpec(False, True, False, False),
    "ERM-image": ModeSpec(False, False, False, False),
    "ERM-fused": ModeSpec(True, False, True, False),
    "TWO-STEP": ModeSpec(True, True, False, True),
}

# JSON key -> attribute, where they differ
_KEY_ALIASES = {"lambda": "lam"}


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "ISRL"
    lam: float = 7.5e4
    beta: float = 1.0
    tau: float = 1.0
    epsilon: float = 1e-4
    epochs: int = 200
    batch_size: int = 32            # per training environment
    lr: float = 1e-3
    seed: int = 0
    alpha: float = 3.0
    sigma: float = 0.02
    steps: int = 10
    weight_decay: float = 1e-4
    warmup: float = 0.1             # fraction of epochs for the 1 -> lambda ramp; 0 disables
    warmup_schedule: str = "linear"  # "linear", "geometric" or "step" (hold 1, then jump)
    penalty_rescale: bool = True    # divide the classifier loss by lambda_t once lambda_t > 1
    shape_input: str = "v0"         # "v0" or "latent"
    shape_widths: tuple = (8, 16, 32)
    image_widths: tuple = (8, 16, 32)
    image_dim: int = 32
    shape_dim: int = 16
    hidden: int = 32
    smooth_v0: bool = True          # shape network output passes through K
    v0_bound: float = 2.0           # pixels; 0 disables the squashing
    srl_batch: int = 0              # 0: same as batch_size
    pretrain_epochs: int = 0        # TWO-STEP shape-only epochs; 0: same as epochs
    max_steps_per_epoch: int = 0    # 0: one pass over the smallest training environment
    select_by: str = "val"          # "val" (best validation accuracy after warm-up) or "last"
    ablate_shape: bool = False      # force the shape branch off regardless of mode
    track_test: bool = False        # log test accuracy every epoch (diagnostic only, never used for selection)

    def __post_init__(self):
        for key in ("shape_widths", "image_widths"):
            object.__setattr__(self, key, tuple(int(v) for v in getattr(self, key)))

    @property
    def spec(self) -> ModeSpec:
        m = MODE_TABLE[self.mode]
        if self.ablate_shape:
            m = replace(m, use_shape=False, joint=False, pretrain=False)
        return m

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.spec.invariant else 0.0

    def validate(self, strict: bool = True) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr: must be positive")
        if self.tau <= 0:
            raise ConfigError("tau: must be positive")
        if self.sigma <= 0:
            raise ConfigError("sigma: must be positive")
        if self.steps < 1:
            raise ConfigError("steps: must be >= 1")
        if self.alpha < 0:
            raise ConfigError("alpha: must be nonnegative")
        if self.lam < 0 or self.beta < 0 or self.epsilon < 0:
            raise ConfigError("lambda, beta, epsilon: must be nonnegative")
        if not 0 <= self.warmup <= 1:
            raise ConfigError("warmup: fraction in [0, 1]")
        if self.select_by not in ("val", "last"):
            raise ConfigError("select_by: 'val' or 'last'")
        if self.shape_input not in ("v0", "latent"):
            raise ConfigError("shape_input: 'v0' or 'latent'")
        if strict and self.mode == "ISRL":
            for key in ("lam", "beta", "tau", "epsilon"):
                if getattr(self, key) <= 0:
                    name = "lambda" if key == "lam" else key
                    raise ConfigError(f"{name}: must be > 0 in ISRL mode")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        for key in ("shape_widths", "image_widths"):
            d[key] = list(d[key])
        return dict(sorted(d.items()))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            attr = _KEY_ALIASES.get(key, key)
            if attr not in names:
                raise ConfigError(f"{key}: unknown config key")
            kwargs[attr] = value
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError("config: expected a flat JSON object")
        return cls.from_dict(d)

    def key(self) -> str:
        """Stable hash of the configuration, used for result caching."""
        return hashlib.blake2b(self.to_json().encode(), digest_size=10).hexdigest()


@dataclass
class RunRecord:
    """Append-only training log."""

    config: dict
    epochs: list = field(default_factory=list)
    events: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def append(self, entry: dict) -> None:
        self.epochs.append(entry)

    def event(self, kind: str, **info) -> None:
        self.events.append({"event": kind, **info})

    def jsonl_lines(self) -> list[str]:
        lines = [json.dumps({"type": "config", **self.config}, sort_keys=True)]
        lines += [json.dumps({"type": "event", **e}, sort_keys=True) for e in self.events]
        lines += [json.dumps({"type": "epoch", **e}, sort_keys=True) for e in self.epochs]
        if self.final:
            lines.append(json.dumps({"type": "final", **self.final, "wall_clock": self.wall_clock},
                                    sort_keys=True))
        return lines

    def write_jsonl(self, path) -> None:
        Path(path).write_text("\n".join(self.jsonl_lines()) + "\n")

    def to_state(self) -> dict:
        return {"config": self.config, "epochs": self.epochs, "events": self.events,
                "wall_clock": self.wall_clock}

    @classmethod
    def from_state(cls, d: dict) -> "RunRecord":
        return cls(d["config"], list(d["epochs"]), list(d["events"]), {}, d.get("wall_clock", 0.0))


class TrainingDiverged(NumericError):
    """A sub-loss became non-finite or unstable; ``result`` holds the last stable state."""

    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


@dataclass
class TrainResult:
    shape_net: ShapeNet | None
    classifier: FusedClassifier
    record: RunRecord
    metrics: dict                 # split -> metrics dict
    best_epoch: int
    converged: bool
    diverged: bool = False


# --- model state ---------------------------------------------------------------------

class Models:
    """The networks, optimizers and fixed operators of one run."""

    def __init__(self, cfg: TrainConfig, bench: Benchmark):
        self.cfg = cfg
        self.spec = cfg.spec
        size = bench.images.shape[-1]
        self.size = size
        self.templates = np.asarray(bench.templates, dtype=np.float64)
        self.srl_cfg = SrlConfig(sigma=cfg.sigma, alpha=cfg.alpha, steps=cfg.steps,
                                 weight_decay=cfg.weight_decay, lr=cfg.lr)
        self.op = MetricOperator(size, size, cfg.alpha)
        self.shape_net = ShapeNet(cfg.seed, cfg.shape_widths, smoothing=self.op if cfg.smooth_v0 else None,
                                   bound=cfg.v0_bound or None) if self.spec.use_shape else None
        latent_shape = self.shape_net.latent_shape(size, size) if self.shape_net else None
        self.clf = FusedClassifier(N_CLASSES, size, self.spec.use_shape, cfg.seed, cfg.image_widths,
                                   cfg.image_dim, shape_dim=cfg.shape_dim, hidden=cfg.hidden,
                                   shape_input=cfg.shape_input, latent_shape=latent_shape)
        self.opt_clf = Adam(self.clf.params, cfg.lr)
        self.opt_shape = Adam(self.shape_net.params, cfg.lr) if self.shape_net else None
        self.frozen_features: np.ndarray | None = None     # TWO-STEP cache over all samples

    def arrays(self, with_optim: bool = True) -> dict[str, np.ndarray]:
        out = dict(self.clf.params.state())
        if with_optim:
            out.update(self.opt_clf.state("opt.clf"))
        if self.shape_net is not None:
            out.update(self.shape_net.params.state())
            if with_optim:
                out.update(self.opt_shape.state("opt.shape"))
        return out

    def load(self, arrays: dict[str, np.ndarray], with_optim: bool = True) -> None:
        self.clf.params.load_state(arrays)
        if with_optim:
            self.opt_clf.load_state(arrays, "opt.clf")
        if self.shape_net is not None:
            self.shape_net.params.load_state(arrays)
            if with_optim:
                self.opt_shape.load_state(arrays, "opt.shape")

    def params_only(self) -> dict[str, np.ndarray]:
        return self.arrays(with_optim=False)

    # shape features for a set of sample indices
    def features(self, bench: Benchmark, idx, gray=None):
        if not self.spec.use_shape:
            return None
        if self.frozen_features is not None:
            j = self.templates.shape[0]
            f = self.frozen_features[:, idx]               # (J, B, ...)
            return ad.Tensor(f.reshape((j * len(idx),) + f.shape[2:]))
        if gray is None:
            gray = bench.gray[idx]
        return shape_features(self.shape_net, self.templates, gray, self.cfg.shape_input)


# --- helpers -----------------------------------------------------------------------------

def _train_envs(bench: Benchmark) -> list[int]:
    envs = sorted(set(int(e) for e in bench.env[bench.split == "train"]))
    if not envs:
        raise ConfigError("dataset: no training samples")
    return envs


def _batches(cfg: TrainConfig, bench: Benchmark, envs, epoch: int):
    """Per-environment shuffled index batches for one epoch, fixed by (seed, epoch)."""
    per_env = []
    for e in envs:
        idx = bench.indices("train", e)
        rng = make_rng(cfg.seed, "batches", epoch, e)
        per_env.append(idx[rng.permutation(len(idx))])
    n_steps = min(len(p) // cfg.batch_size for p in per_env)
    if n_steps == 0:
        n_steps = 1
    if cfg.max_steps_per_epoch:
        n_steps = min(n_steps, cfg.max_steps_per_epoch)
    b = cfg.batch_size
    return [[p[s * b:(s + 1) * b] for p in per_env] for s in range(n_steps)]


def _lambda_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    lam = cfg.effective_lambda
    if lam == 0:
        return 0.0
    warm = int(math.ceil(cfg.warmup * total_steps))
    if warm == 0 or step >= warm or lam <= 1:
        return lam
    frac = step / warm
    if cfg.warmup_schedule == "step":
        return 1.0
    if cfg.warmup_schedule == "geometric":
        return float(lam ** frac)
    return 1.0 + (lam - 1.0) * frac


def warmup_steps(cfg: TrainConfig, total_steps: int) -> int:
    return int(math.ceil(cfg.warmup * total_steps)) if cfg.effective_lambda > 0 else 0


def _srl_step(models: Models, bench: Benchmark, idx) -> float:
    """One Adam step on the registration loss of one environment batch."""
    net = models.shape_net
    if models.cfg.srl_batch:
        idx = idx[:models.cfg.srl_batch]
    tmpl = models.templates[bench.y[idx]]
    gray = bench.gray[idx]
    with ad.Tape() as tape:
        v0 = net(make_pairs(tmpl, gray))
        loss = srl_loss(tmpl, gray, v0, models.op, models.srl_cfg, net.params)
        grads = tape.gradient(loss, list(net.params))
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError("non-finite registration loss")
    models.opt_shape.step(grads)
    return value


def _ic_objective(models: Models, bench: Benchmark, batches, lam_t: float, with_shape_grad: bool):
    """Build ``beta * sum_e (R_e + lam_t P_e)`` (rescaled) on the active tape."""
    cfg = models.cfg
    env_logits, env_labels = [], []
    for idx in batches:
        feats = models.features(bench, idx)
        if feats is not None and not with_shape_grad:
            feats = ad.Tensor(feats.data)
        env_logits.append(models.clf(bench.images[idx], feats))
        env_labels.append(bench.y[idx])
    parts = ic_loss(env_logits, env_labels, lam_t, cfg.tau, models.clf.params, cfg.weight_decay)
    total = parts.total
    if cfg.penalty_rescale and lam_t > 1:
        total = total * (1.0 / lam_t)
    return total * cfg.beta, parts


def _ic_step(models: Models, bench: Benchmark, batches, lam_t: float):
    spec = models.spec
    joint = spec.use_shape and spec.joint and models.frozen_features is None
    params = list(models.clf.params)
    if joint:
        params += list(models.shape_net.params)
    with ad.Tape() as tape:
        total, parts = _ic_objective(models, bench, batches, lam_t, joint)
        grads = tape.gradient(total, params)
    risks = [r.item() for r in parts.risks]
    pens = [0.0 if p is None else p.item() for p in parts.penalties]
    value = sum(risks) + lam_t * sum(pens)
    if not math.isfinite(value) or not all(np.all(np.isfinite(g.data)) for g in grads):
        raise NumericError("non-finite classifier loss or gradient")
    n_clf = len(models.clf.params)
    models.opt_clf.step(grads[:n_clf])
    if joint:
        models.opt_shape.step(grads[n_clf:])
    return value, risks, pens


def predict(models: Models, bench: Benchmark, idx, chunk: int = 150) -> np.ndarray:
    preds = []
    with ad.no_record():
        for s in range(0, len(idx), chunk):
            part = idx[s:s + chunk]
            logits = models.clf(bench.images[part], models.features(bench, part))
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def evaluate_split(models: Models, bench: Benchmark, split: str) -> dict:
    idx = bench.indices(split)
    if len(idx) == 0:
        raise ConfigError(f"dataset: empty {split} split")
    return evaluate_predictions(bench.y[idx], predict(models, bench, idx), N_CLASSES)


def probe_loss(models: Models, bench: Benchmark, lam: float | None = None) -> float:
    """``l_ISRL`` on the fixed first batch of each training environment (for checkpoint checks)."""
    cfg = models.cfg
    envs = _train_envs(bench)
    batches = [bench.indices("train", e)[:cfg.batch_size] for e in envs]
    lam = cfg.effective_lambda if lam is None else lam
    with ad.Tape():
        srl = 0.0
        if models.spec.use_shape:
            for idx in batches:
                tmpl = models.templates[bench.y[idx]]
                gray = bench.gray[idx]
                v0 = models.shape_net(make_pairs(tmpl, gray))
                srl += srl_loss(tmpl, gray, v0, models.op, models.srl_cfg, models.shape_net.params).item()
        parts = ic_loss([models.clf(bench.images[i], models.features(bench, i)) for i in batches],
                        [bench.y[i] for i in batches], lam, cfg.tau, models.clf.params, cfg.weight_decay)
        ic = parts.total.item()
    return srl + cfg.beta * ic


def _freeze_features(models: Models, bench: Benchmark, chunk: int = 100) -> None:
    """Cache the frozen shape network's features for every sample (TWO-STEP)."""
    n = len(bench)
    out = []
    with ad.no_record():
        for s in range(0, n, chunk):
            idx = np.arange(s, min(n, s + chunk))
            f = shape_features(models.shape_net, models.templates, bench.gray[idx], models.cfg.shape_input)
            j = models.templates.shape[0]
            out.append(f.data.reshape((j, len(idx)) + f.shape[1:]))
    models.frozen_features = np.concatenate(out, axis=1)


# --- checkpoints -----------------------------------------------------------------------

def save_checkpoint(path, models: Models, record: RunRecord, state: dict) -> None:
    meta = {"config": models.cfg.to_dict(), "record": record.to_state(), "state": state}
    save_arrays(path, models.arrays(), meta)


def load_checkpoint(path, bench: Benchmark):
    arrays, meta = load_arrays(path)
    cfg = TrainConfig.from_dict(meta["config"])
    models = Models(cfg, bench)
    models.load(arrays)
    return models, RunRecord.from_state(meta["record"]), meta["state"]


def load_model(path, bench: Benchmark) -> Models:
    """Parameters only (no optimizer state required), e.g. the selected best checkpoint."""
    arrays, meta = load_arrays(path)
    cfg = TrainConfig.from_dict(meta["config"])
    models = Models(cfg, bench)
    models.load(arrays, with_optim=False)
    if cfg.spec.pretrain:
        _freeze_features(models, bench)
    return models


# --- main loop -------------------------------------------------------------------------

def train(cfg: TrainConfig, bench: Benchmark, out_dir=None, resume: bool = False,
          strict: bool = True, stop_after: int | None = None) -> TrainResult:
    """Train one configuration on a benchmark.

    ``out_dir`` (optional) receives ``last`` and ``best`` checkpoints after
    every epoch and ``record.jsonl`` at the end; with ``resume`` training
    continues from ``last``. ``stop_after`` ends the run after that many
    epochs in this call (used to test resumption).
    """
    cfg.validate(strict)
    t0 = time.perf_counter()
    envs = _train_envs(bench)
    if len(envs) < 2 and cfg.spec.invariant:
        warnings.warn("only one training environment: the invariance penalty has nothing to compare",
                      stacklevel=2)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume:
        if out_dir is None:
            raise ConfigError("resume: needs an output directory")
        models, record, state = load_checkpoint(out_dir / "last", bench)
        if models.cfg.to_dict() != cfg.to_dict():
            raise ConfigError("resume: checkpoint was written with a different config")
        record.event("resume", epoch=state["epoch"])
    else:
        models = Models(cfg, bench)
        record = RunRecord(cfg.to_dict())
        record.event("order", shape_pass="first", classifier_pass="second")
        state = {"epoch": 0, "step": 0, "prev_loss": None, "best_val": -1.0, "best_epoch": 0,
                 "pretrained": False}

    steps_per_epoch = len(_batches(cfg, bench, envs, 0))
    total_steps = steps_per_epoch * cfg.epochs
    warm_steps = warmup_steps(cfg, total_steps)
    best_arrays = None
    if resume and (out_dir / "best.json").exists():
        best_arrays, _ = load_arrays(out_dir / "best")

    def stable_result(diverged: bool) -> TrainResult:
        if best_arrays is not None:
            models.load(best_arrays, with_optim=False)
        res = TrainResult(models.shape_net, models.clf, record, {}, state["best_epoch"], False, diverged)
        return res

    # TWO-STEP: registration-only pretraining, then frozen features
    if cfg.spec.pretrain and not state["pretrained"]:
        pre_epochs = cfg.pretrain_epochs or cfg.epochs
        try:
            for ep in range(pre_epochs):
                models.opt_shape.lr = cosine_lr(cfg.lr, ep, pre_epochs)
                losses = []
                for batches in _batches(cfg, bench, envs, ep):
                    for idx in batches:
                        losses.append(_srl_step(models, bench, idx))
                record.event("pretrain_epoch", epoch=ep + 1, l_srl=float(np.mean(losses)))
        except NumericError as exc:
            record.event("diverged", where="pretrain", message=str(exc))
            raise TrainingDiverged(str(exc), stable_result(True)) from exc
        state["pretrained"] = True
    if cfg.spec.pretrain:
        _freeze_features(models, bench)

    converged = False
    epochs_run = 0
    while state["epoch"] < cfg.epochs:
        epoch = state["epoch"]
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        models.opt_clf.lr = lr
        if models.opt_shape is not None:
            models.opt_shape.lr = lr
        srl_losses, ic_losses, env_risks, env_pens, lams = [], [], [], [], []
        try:
            for batches in _batches(cfg, bench, envs, epoch):
                lam_t = _lambda_at(cfg, state["step"], total_steps)
                step_srl = 0.0
                if cfg.spec.use_shape and cfg.spec.joint:
                    for idx in batches:
                        step_srl += _srl_step(models, bench, idx)
                value, risks, pens = _ic_step(models, bench, batches, lam_t)
                if state["prev_loss"] is None:
                    # reference for the first epoch's change: the loss of the very first step
                    state["prev_loss"] = step_srl + cfg.beta * value
                srl_losses.append(step_srl)
                ic_losses.append(value)
                env_risks.append(risks)
                env_pens.append(pens)
                lams.append(lam_t)
                state["step"] += 1
        except NumericError as exc:
            record.event("diverged", epoch=epoch + 1, message=str(exc))
            log.warning("training diverged at epoch %d: %s", epoch + 1, exc)
            raise TrainingDiverged(str(exc), stable_result(True)) from exc

        l_srl = float(np.mean(srl_losses))
        l_ic = float(np.mean(ic_losses))
        l_isrl = l_srl + cfg.beta * l_ic
        val = evaluate_split(models, bench, "val")
        state["epoch"] = epoch + 1
        epochs_run += 1
        entry = {"epoch": epoch + 1, "lr": lr, "lambda": float(lams[-1]), "l_srl": l_srl, "l_ic": l_ic,
                 "l_isrl": l_isrl, "risks": np.mean(env_risks, axis=0).tolist(),
                 "penalties": np.mean(env_pens, axis=0).tolist(), "val_acc": val["acc"]}
        if cfg.track_test:
            entry["test_acc"] = evaluate_split(models, bench, "test")["acc"]
        past_warmup = state["step"] >= warm_steps
        improved = False
        if cfg.select_by == "last" or (past_warmup and val["acc"] > state["best_val"]):
            state["best_val"] = val["acc"]
            state["best_epoch"] = epoch + 1
            best_arrays = models.params_only()
            improved = True
        if best_arrays is None:
            # nothing eligible yet: remember the latest state as a fallback
            best_arrays = models.params_only()
            state["best_epoch"] = epoch + 1
            improved = True
        delta = abs(l_isrl - state["prev_loss"])
        entry["delta"] = delta
        state["prev_loss"] = l_isrl
        if out_dir is not None:
            entry["l_isrl_probe"] = probe_loss(models, bench)
        record.append(entry)
        if out_dir is not None:
            save_checkpoint(out_dir / "last", models, record, state)
            if improved:
                save_arrays(out_dir / "best", best_arrays,
                            {"config": cfg.to_dict(), "epoch": state["best_epoch"]})
        log.info("epoch %d: l_isrl=%.5g val=%.2f", epoch + 1, l_isrl, val["acc"])
        if delta < cfg.epsilon:
            converged = True
            record.event("converged", epoch=epoch + 1, delta=delta)
            break
        if stop_after is not None and epochs_run >= stop_after:
            break

    final_arrays = models.params_only()
    models.load(best_arrays, with_optim=False)
    metrics = {"val": evaluate_split(models, bench, "val"), "test": evaluate_split(models, bench, "test")}
    record.final = {"best_epoch": state["best_epoch"], "converged": converged,
                    "epochs_run": state["epoch"],
                    **{f"{s}_{k}": v for s, m in metrics.items() for k, v in m.items()}}
    record.wall_clock += time.perf_counter() - t0
    if out_dir is not None:
        record.write_jsonl(out_dir / "record.jsonl")
        if stop_after is not None and state["epoch"] < cfg.epochs and not converged:
            # keep the latest (not the selected) parameters for an interrupted run
            models.load(final_arrays, with_optim=False)
    return TrainResult(models.shape_net, models.clf, record, metrics, state["best_epoch"], converged)


def train_isrl(cfg: TrainConfig, bench: Benchmark, out_dir=None, strict: bool = True, **kw) -> TrainResult:
    if cfg.mode != "ISRL":
        raise ConfigError(f"mode: train_isrl needs mode ISRL, got {cfg.mode}")
    return train(cfg, bench, out_dir, strict=strict, **kw)


def train_baseline(cfg: TrainConfig, bench: Benchmark, out_dir=None, **kw) -> TrainResult:
    if cfg.mode == "ISRL":
        raise ConfigError("mode: train_baseline does not run ISRL")
    return train(cfg, bench, out_dir, **kw)


# --- reporting -------------------------------------------------------------------------

METRIC_FIELDS = ["model", "backbone", "seed", "env", "acc", "prec_micro", "prec_macro", "f1_micro", "f1_macro"]


def metric_rows(result: TrainResult, model: str, seed: int, backbone: str = "cnn") -> list[dict]:
    rows = []
    for split in ("val", "test"):
        m = result.metrics[split]
        rows.append({"model": model, "backbone": backbone, "seed": seed, "env": split,
                     **{k: m[k] for k in METRIC_FIELDS[4:]}})
    return rows


def format_number(x) -> str:
    """Fixed four-decimal rendering so CSVs stay byte-stable."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.4f}"
    return str(x)


def sweep(cells, bench_for, seeds, runner=None) -> list[dict]:
    """Train every (cell, seed); returns one row per run.

    ``cells`` is a list of ``(label, TrainConfig)`` and ``bench_for`` maps a
    config to its benchmark. Failures are recorded as rows with ``status``
    and do not stop the sweep.
    """
    runner = runner or (lambda cfg, bench: train(cfg, bench))
    rows = []
    for label, cfg in cells:
        for seed in seeds:
            c = replace(cfg, seed=seed)
            try:
                res = runner(c, bench_for(c))
                m = res.metrics["test"]
                rows.append({"cell": label, "seed": seed, "status": "ok", **m})
            except (NumericError, ConfigError) as exc:
                rows.append({"cell": label, "seed": seed, "status": f"failed: {type(exc).__name__}"})
    return rows


__all__ = ["MODES", "MODE_TABLE", "TrainConfig", "RunRecord", "TrainResult", "TrainingDiverged", "Models",
           "train", "train_isrl", "train_baseline", "sweep", "evaluate_split", "predict", "probe_loss",
           "load_checkpoint", "load_model", "save_checkpoint", "metric_rows", "METRIC_FIELDS",
           "format_number"]
