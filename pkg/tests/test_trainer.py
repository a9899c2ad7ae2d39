import json
import warnings
from dataclasses import replace

import numpy as np
import pytest

from helpers import TINY
from isrl import trainer as tr
from isrl.envgen import EnvSpec, build_benchmark
from isrl.errors import ConfigError, NumericError
from isrl.trainer import (METRIC_FIELDS, MODE_TABLE, RunRecord, TrainConfig, TrainingDiverged, format_number,
                          load_checkpoint, load_model, metric_rows, predict, probe_loss, sweep, train, train_baseline,
                          train_isrl)


def cfg(**kw):
    return TrainConfig(**{**TINY, **kw})


# --- config ---------------------------------------------------------------------

def test_config_validation_names_the_field():
    for key, attr in (("lambda", "lam"), ("beta", "beta"), ("tau", "tau"), ("epsilon", "epsilon")):
        with pytest.raises(ConfigError, match=f"^{key}"):
            TrainConfig(**{attr: 0.0}).validate()
    TrainConfig(lam=0.0).validate(strict=False)
    TrainConfig(mode="ERM-image", lam=0.0).validate()
    with pytest.raises(ConfigError, match="^mode"):
        TrainConfig(mode="GAN").validate()
    with pytest.raises(ConfigError, match="^tau"):
        TrainConfig(mode="ERM-image", tau=0.0).validate()


def test_config_json_roundtrip(tmp_path):
    c = cfg(lam=2.5e4, mode="TWO-STEP")
    d = c.to_dict()
    assert "lambda" in d and "lam" not in d
    assert TrainConfig.from_dict(d) == c
    p = tmp_path / "c.json"
    p.write_text(c.to_json())
    assert TrainConfig.from_json(p) == c
    assert TrainConfig.from_dict(json.loads(c.to_json())).key() == c.key()
    with pytest.raises(ConfigError, match="^bogus"):
        TrainConfig.from_dict({"bogus": 1})
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        TrainConfig.from_json(p)


def test_mode_table():
    assert set(MODE_TABLE) == {"ISRL", "IRM-image", "ERM-image", "ERM-fused", "TWO-STEP"}
    assert not TrainConfig(mode="ERM-fused").effective_lambda
    assert TrainConfig(mode="IRM-image", lam=3.0).effective_lambda == 3.0
    assert not TrainConfig(ablate_shape=True).spec.use_shape


def test_lambda_warmup_schedules():
    total = 100
    lin = TrainConfig(lam=101.0, warmup=0.1)
    assert tr._lambda_at(lin, 0, total) == 1.0
    assert tr._lambda_at(lin, 5, total) == pytest.approx(51.0)
    assert tr._lambda_at(lin, 10, total) == 101.0
    step = replace(lin, warmup_schedule="step")
    assert tr._lambda_at(step, 9, total) == 1.0 and tr._lambda_at(step, 10, total) == 101.0
    geo = replace(lin, warmup_schedule="geometric")
    assert tr._lambda_at(geo, 5, total) == pytest.approx(101.0 ** 0.5)
    assert tr._lambda_at(replace(lin, warmup=0.0), 0, total) == 101.0
    assert tr._lambda_at(TrainConfig(mode="ERM-image"), 50, total) == 0.0


def test_batches_are_per_environment_and_deterministic(small_bench):
    c = cfg(max_steps_per_epoch=0)
    envs = tr._train_envs(small_bench)
    a = tr._batches(c, small_bench, envs, 0)
    b = tr._batches(c, small_bench, envs, 0)
    assert all(np.array_equal(x, y) for s, t in zip(a, b) for x, y in zip(s, t))
    for step in a:
        for e, idx in zip(envs, step):
            assert len(idx) == c.batch_size
            assert np.all(small_bench.env[idx] == e) and np.all(small_bench.split[idx] == "train")
    c1 = tr._batches(c, small_bench, envs, 1)
    assert not np.array_equal(a[0][0], c1[0][0])


# --- training semantics --------------------------------------------------------------

def test_huge_epsilon_stops_after_first_epoch(small_bench):
    res = train(cfg(epsilon=1e9, epochs=5), small_bench)
    assert res.converged
    assert len(res.record.epochs) == 1
    assert any(e["event"] == "converged" and e["epoch"] == 1 for e in res.record.events)


def test_order_is_logged_shape_first(small_bench):
    res = train(cfg(epochs=1), small_bench)
    first = res.record.events[0]
    assert first == {"event": "order", "shape_pass": "first", "classifier_pass": "second"}
    entry = res.record.epochs[0]
    assert entry["l_srl"] > 0
    assert entry["l_isrl"] == pytest.approx(entry["l_srl"] + entry["l_ic"])
    assert len(entry["risks"]) == 2 and len(entry["penalties"]) == 2


def test_beta_to_zero_terminates_near_chance(small_bench):
    res = train(cfg(beta=1e-12, epochs=2), small_bench)
    assert len(res.record.epochs) == 2
    assert abs(res.metrics["test"]["acc"] - 100 / 3) < 20


def test_ablated_isrl_without_penalty_matches_erm_image(small_bench):
    a = train(cfg(mode="ISRL", lam=0.0, ablate_shape=True), small_bench, strict=False)
    b = train(cfg(mode="ERM-image"), small_bench)
    assert [e["l_ic"] for e in a.record.epochs] == [e["l_ic"] for e in b.record.epochs]
    assert [e["l_srl"] for e in a.record.epochs] == [0.0] * len(a.record.epochs)
    assert a.metrics == b.metrics


def test_resume_reproduces_next_epoch(tmp_path, small_bench):
    c = cfg(epochs=3)
    straight = train(c, small_bench, tmp_path / "a")
    train(c, small_bench, tmp_path / "b", stop_after=2)
    resumed = train(c, small_bench, tmp_path / "b", resume=True)
    want = straight.record.epochs[2]["l_isrl"]
    got = resumed.record.epochs[2]["l_isrl"]
    assert abs(got - want) <= 1e-8 * abs(want)
    assert any(e["event"] == "resume" for e in resumed.record.events)
    with pytest.raises(ConfigError):
        train(replace(c, lr=5e-4), small_bench, tmp_path / "b", resume=True)


def test_probe_loss_from_checkpoint(tmp_path, small_bench):
    res = train(cfg(epochs=2, mode="TWO-STEP", pretrain_epochs=1), small_bench, tmp_path)
    models, record, state = load_checkpoint(tmp_path / "last", small_bench)
    tr._freeze_features(models, small_bench)
    logged = record.epochs[-1]["l_isrl_probe"]
    assert abs(probe_loss(models, small_bench) - logged) <= 1e-10 * abs(logged)
    assert state["epoch"] == 2
    assert res.record.epochs[-1]["l_isrl_probe"] == logged


def test_checkpoint_predictions_bitwise(tmp_path, small_bench):
    res = train(cfg(epochs=2), small_bench, tmp_path)
    models = load_model(tmp_path / "best", small_bench)
    idx = small_bench.indices("test")
    again = load_model(tmp_path / "best", small_bench)
    assert np.array_equal(predict(models, small_bench, idx), predict(again, small_bench, idx))
    assert tr.evaluate_split(models, small_bench, "test") == res.metrics["test"]
    lines = (tmp_path / "record.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["type"] == "config"
    assert json.loads(lines[-1])["type"] == "final"


@pytest.mark.parametrize("mode", ["IRM-image", "ERM-fused", "TWO-STEP"])
def test_baseline_modes_run(small_bench, mode):
    res = train_baseline(cfg(mode=mode, epochs=1, pretrain_epochs=1), small_bench)
    assert 0 <= res.metrics["test"]["acc"] <= 100
    assert (res.shape_net is None) == (not MODE_TABLE[mode].use_shape)
    if mode == "TWO-STEP":
        assert any(e["event"] == "pretrain_epoch" for e in res.record.events)


def test_entry_point_mode_checks(small_bench):
    with pytest.raises(ConfigError):
        train_isrl(cfg(mode="ERM-image"), small_bench)
    with pytest.raises(ConfigError):
        train_baseline(cfg(mode="ISRL"), small_bench)


def test_single_environment_warns():
    bench = build_benchmark(EnvSpec(p_e=(0.1, 0.9), n_total=120, seed=1))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        train(cfg(mode="IRM-image", epochs=1), bench)
    assert any("one training environment" in str(w.message) for w in caught)


def test_divergence_keeps_last_stable_state(small_bench, monkeypatch):
    calls = {"n": 0}
    orig = tr._ic_step

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] > 2:
            raise NumericError("boom")
        return orig(*a, **k)

    monkeypatch.setattr(tr, "_ic_step", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train(cfg(mode="ERM-image", epochs=3), small_bench)
    res = info.value.result
    assert res.diverged and res.best_epoch == 1
    assert any(e["event"] == "diverged" for e in res.record.events)


# --- sweep and reporting ----------------------------------------------------------

def test_sweep_duplicate_cells_and_failures(small_bench):
    base = cfg(mode="ERM-image", epochs=1)

    def runner(c, bench):
        if c.lr > 1:
            raise NumericError("bad cell")
        return train(c, bench)

    cells = [("a", base), ("a-again", base), ("bad", replace(base, lr=10.0))]
    rows = sweep(cells, lambda c: small_bench, [0], runner)
    assert len(rows) == 3
    strip = lambda r: {k: v for k, v in r.items() if k != "cell"}  # noqa: E731
    assert strip(rows[0]) == strip(rows[1])
    assert rows[2]["status"].startswith("failed")


def test_metric_rows_and_format(small_bench):
    res = train(cfg(mode="ERM-image", epochs=1), small_bench)
    rows = metric_rows(res, "ERM-image", 0)
    assert [r["env"] for r in rows] == ["val", "test"]
    assert list(rows[0]) == METRIC_FIELDS
    assert format_number(1) == "1" and format_number(2.0) == "2.0000" and format_number(np.float64(1 / 3)) == "0.3333"
    assert format_number("x") == "x"


def test_run_record_serialization():
    r = RunRecord({"mode": "ISRL"})
    r.event("order", shape_pass="first")
    r.append({"epoch": 1, "l_isrl": 1.5})
    back = RunRecord.from_state(json.loads(json.dumps(r.to_state())))
    assert back.epochs == r.epochs and back.events == r.events
    assert [json.loads(x)["type"] for x in r.jsonl_lines()] == ["config", "event", "epoch"]
