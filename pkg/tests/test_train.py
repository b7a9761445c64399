"""Trainer: schedules, freezing, stage gating, resume-exact determinism."""

import json
import os

import numpy as np
import pytest

from triflow.checkpoint import load_checkpoint
from triflow.config import load_config, parse_config, save_config
from triflow.errors import ConfigError, StageError
from triflow.model import MTXpertStack, ModelConfig
from triflow.rng import Stream
from triflow.toyworld import DatasetConfig
from triflow.train import (DECAY_FLOOR, TrainConfig, _decay_factor, _draw_t,
                           adamw_init, adamw_step, build_parts,
                           copy_semantic_from_generative, initialize_stage,
                           task_for_step, train, trainable_names)

TINY = dict(d_model=16, n_layers=1, n_heads=2, batch_size=2, warmup=2,
            lr=1e-3, checkpoint_every=2,
            data=DatasetConfig(n_t2i=4, n_i2t=4, n_plan=2, n_reflect=2,
                               n_correct=2, n_val=0))


def tiny_cfg(**kw):
    merged = dict(TINY)
    merged.update(kw)
    return TrainConfig(**merged)


# ---- config plumbing ----

def test_flat_config_roundtrip(tmp_path):
    cfg = tiny_cfg(stage="stage1_t2i", steps=6)
    save_config(tmp_path / "run.txt", cfg.to_flat())
    again = TrainConfig.from_flat(load_config(tmp_path / "run.txt"))
    assert again == cfg


def test_parse_config_types_and_errors():
    flat = parse_config("a = 1\nb = 2.5\nc = true\nd = hello\n# note\n\ne=x")
    assert flat == {"a": 1, "b": 2.5, "c": True, "d": "hello", "e": "x"}
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("a = 1\na = 2")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config("just words")
    with pytest.raises(ConfigError, match="unknown config key"):
        TrainConfig.from_flat({"nonsense": 3})
    with pytest.raises(ConfigError, match="unknown config key"):
        TrainConfig.from_flat({"model.nonsense": 3})


def test_train_config_validation():
    with pytest.raises(ConfigError, match="unknown stage"):
        tiny_cfg(stage="stage3")
    with pytest.raises(ConfigError, match="warmup"):
        tiny_cfg(steps=5, warmup=10)
    with pytest.raises(ConfigError, match="n_i2t"):
        tiny_cfg(stage="stage2_mixed",
                 data=DatasetConfig(n_t2i=4, n_i2t=0, n_plan=0, n_reflect=0,
                                    n_correct=0, n_val=0))
    with pytest.raises(ConfigError, match="n_reflect"):
        tiny_cfg(stage="mcot_multitask",
                 data=DatasetConfig(n_t2i=4, n_i2t=4, n_plan=2, n_reflect=0,
                                    n_correct=2, n_val=0))


# ---- schedules and freezing ----

def test_task_schedules():
    assert all(task_for_step("stage1_t2i", s) == "t2i" for s in range(1, 30))
    stage2 = [task_for_step("stage2_mixed", s) for s in range(1, 19)]
    assert stage2 == ["t2i"] * 8 + ["i2t"] + ["t2i"] * 8 + ["i2t"]
    cycle = [task_for_step("mcot_multitask", s) for s in range(1, 11)]
    assert cycle == ["t2i", "plan", "i2t", "reflect", "correct"] * 2


def test_stage1_freezes_semantic_and_heatmap():
    stack = MTXpertStack.init(ModelConfig(d_model=16, n_layers=2, n_heads=2),
                              seed=0)
    frozen = set(stack.params) - set(trainable_names("stage1_t2i", stack.params))
    assert frozen == {n for n in stack.params
                      if ".semantic." in n or n == "head.heatmap.w"}
    assert len(frozen) == 2 * 9 + 1
    assert set(trainable_names("stage2_mixed", stack.params)) == set(stack.params)


def test_adamw_moves_only_trainable():
    stack = MTXpertStack.init(ModelConfig(d_model=16, n_layers=1, n_heads=2),
                              seed=1)
    before = {n: p.data.copy() for n, p in stack.params.items()}
    state = adamw_init(stack.params)
    for p in stack.params.values():
        p.grad = np.ones_like(p.data)
    names = trainable_names("stage1_t2i", stack.params)
    adamw_step(stack.params, state, names, lr=1e-2)
    for name, p in stack.params.items():
        moved = not np.array_equal(p.data, before[name])
        assert moved == (name in names), name
    assert state["step"] == 1


def test_adamw_descends_quadratic():
    from triflow.tensor import Tensor
    p = Tensor(np.array([5.0, -3.0]), requires_grad=True, name="w")
    params = {"w": p}
    state = adamw_init(params)
    for _ in range(400):
        p.grad = 2.0 * p.data
        adamw_step(params, state, ("w",), lr=3e-2, weight_decay=0.0)
    # Adam orbits the optimum with amplitude on the order of lr.
    assert np.abs(p.data).max() < 0.1


# ---- stage initialization and gating ----

def test_stage2_requires_stage1_checkpoint(tmp_path):
    with pytest.raises(StageError, match="init_from"):
        initialize_stage(tiny_cfg(stage="stage2_mixed"))
    with pytest.raises(StageError, match="does not exist"):
        initialize_stage(tiny_cfg(stage="stage2_mixed",
                                  init_from=str(tmp_path / "nope.tfck")))


def test_stage_gating_rejects_wrong_stage(tmp_path):
    out = train(tiny_cfg(stage="stage1_t2i", steps=2), tmp_path / "s1")
    with pytest.raises(StageError, match="stage2_mixed"):
        initialize_stage(tiny_cfg(stage="mcot_multitask",
                                  init_from=out["checkpoint"]))


def test_semantic_copy_is_byte_exact(tmp_path):
    out = train(tiny_cfg(stage="stage1_t2i", steps=2), tmp_path / "s1")
    stack, _ = initialize_stage(tiny_cfg(stage="stage2_mixed",
                                         init_from=out["checkpoint"]))
    for name, p in stack.params.items():
        if ".semantic." in name:
            twin = stack.params[name.replace(".semantic.", ".generative.")]
            assert p.data.tobytes() == twin.data.tobytes(), name


def test_copy_helper_covers_every_semantic_tensor():
    stack = MTXpertStack.init(ModelConfig(d_model=16, n_layers=2, n_heads=2),
                              seed=3)
    copy_semantic_from_generative(stack)
    for name, p in stack.params.items():
        if ".semantic." in name:
            twin = stack.params[name.replace(".semantic.", ".generative.")]
            assert np.array_equal(p.data, twin.data)


# ---- end-to-end loops ----

def test_stage1_run_writes_artifacts_and_descends(tmp_path):
    cfg = tiny_cfg(stage="stage1_t2i", steps=8, prompt_templates="short")
    out = train(cfg, tmp_path / "run")
    assert out["steps_run"] == 8
    assert os.path.exists(out["checkpoint"])
    assert os.path.exists(tmp_path / "run" / "config.txt")
    lines = [json.loads(l) for l in open(out["metrics"])]
    assert [l["step"] for l in lines] == list(range(1, 9))
    assert all(l["task"] == "t2i" for l in lines)
    assert all(l["lm"] == 0.0 for l in lines)      # T2I is conditioning-only
    assert all(l["rf"] > 0.0 for l in lines)
    assert lines[-1]["rf"] < lines[0]["rf"]        # 8 steps on 4 scenes move
    stack, opt_state, meta = load_checkpoint(out["checkpoint"])
    assert meta["stage"] == "stage1_t2i"
    assert opt_state["step"] == 8
    assert meta["train_config"] == cfg.to_flat()


def test_training_is_deterministic(tmp_path):
    cfg = tiny_cfg(stage="stage1_t2i", steps=5)
    a = train(cfg, tmp_path / "a")
    b = train(cfg, tmp_path / "b")
    assert (open(a["metrics"]).read() == open(b["metrics"]).read())
    assert (open(a["checkpoint"], "rb").read()
            == open(b["checkpoint"], "rb").read())


def test_resume_matches_straight_run(tmp_path):
    cfg = tiny_cfg(stage="stage1_t2i", steps=6, checkpoint_every=3)
    straight = train(cfg, tmp_path / "straight")
    short = tiny_cfg(stage="stage1_t2i", steps=3, checkpoint_every=3)
    train(short, tmp_path / "split")
    resumed = train(cfg, tmp_path / "split", resume=True)
    assert resumed["steps_run"] == 3
    assert (open(straight["metrics"]).read()
            == open(resumed["metrics"]).read())
    assert (open(straight["checkpoint"], "rb").read()
            == open(resumed["checkpoint"], "rb").read())


def test_resume_rejects_config_drift(tmp_path):
    cfg = tiny_cfg(stage="stage1_t2i", steps=4, checkpoint_every=2)
    train(cfg, tmp_path / "run")
    drifted = tiny_cfg(stage="stage1_t2i", steps=4, checkpoint_every=2,
                       lr=2e-3)
    with pytest.raises(StageError, match="differs"):
        train(drifted, tmp_path / "run", resume=True)


def test_full_stage_chain_and_mixed_metrics(tmp_path):
    s1 = train(tiny_cfg(stage="stage1_t2i", steps=2), tmp_path / "s1")
    s2 = train(tiny_cfg(stage="stage2_mixed", steps=9,
                        init_from=s1["checkpoint"]), tmp_path / "s2")
    lines = [json.loads(l) for l in open(s2["metrics"])]
    assert [l["task"] for l in lines] == ["t2i"] * 8 + ["i2t"]
    assert lines[-1]["lm"] > 0.0 and lines[-1]["rf"] == 0.0
    s3 = train(tiny_cfg(stage="mcot_multitask", steps=5,
                        init_from=s2["checkpoint"]), tmp_path / "s3")
    lines = [json.loads(l) for l in open(s3["metrics"])]
    assert [l["task"] for l in lines] == list(
        ("t2i", "plan", "i2t", "reflect", "correct"))
    reflect_line = lines[3]
    assert reflect_line["hm"] > 0.0 and reflect_line["hm_tokens"] == 2 * 64


def test_build_parts_shapes():
    cfg = tiny_cfg(stage="mcot_multitask", steps=5)
    from triflow.toyworld import make_dataset
    manifest = make_dataset(cfg.data, seed=cfg.seed)
    by_task = {}
    for r in manifest["train"]:
        by_task.setdefault(r["task"], []).append(r)
    rng = Stream(0, "probe")
    t2i = build_parts("t2i", by_task["t2i"][0], rng, cfg)
    assert t2i[0].lm_from is None and t2i[1].velocity_target is not None
    plan = build_parts("plan", by_task["plan"][0], rng, cfg)
    assert len(plan) == 1 and plan[0].lm_from >= 2
    i2t = build_parts("i2t", by_task["i2t"][0], rng, cfg)
    assert i2t[1].lm_from >= 1
    reflect = build_parts("reflect", by_task["reflect"][0], rng, cfg)
    assert reflect[1].heatmap_target is not None
    correct = build_parts("correct", by_task["correct"][0], rng, cfg)
    assert correct[0].lm_from is None and correct[1].t is not None


def test_warmup_schedule_in_log(tmp_path):
    cfg = tiny_cfg(stage="stage1_t2i", steps=4, warmup=4, lr=1e-3)
    out = train(cfg, tmp_path / "warm")
    lrs = [json.loads(l)["lr"] for l in open(out["metrics"])]
    assert lrs == [pytest.approx(1e-3 * k / 4) for k in (1, 2, 3, 4)]


def test_draw_t_distributions():
    uni = [_draw_t(Stream(0, f"u/{i}"), "uniform") for i in range(2000)]
    late = [_draw_t(Stream(0, f"l/{i}"), "late_heavy") for i in range(2000)]
    assert all(0.0 <= t < 1.0 for t in uni + late)
    assert _draw_t(Stream(7, "pin"), "late_heavy") == pytest.approx(
        1.0 - Stream(7, "pin").u01() ** 2)
    # late_heavy piles mass where the velocity gain 1/(1-t) is largest
    assert np.mean(uni) == pytest.approx(0.5, abs=0.05)
    assert np.mean(late) == pytest.approx(2.0 / 3.0, abs=0.05)
    assert np.mean([t > 0.9 for t in late]) > 2.5 * np.mean([t > 0.9 for t in uni])


def test_decay_factor_schedule():
    cfg = tiny_cfg(steps=100, decay_start=50, decay_steps=40)
    assert _decay_factor(1, cfg) == 1.0
    assert _decay_factor(50, cfg) == 1.0
    assert _decay_factor(70, cfg) == pytest.approx(1.0 - 0.9 * 0.5)
    assert _decay_factor(90, cfg) == pytest.approx(DECAY_FLOOR)
    assert _decay_factor(10_000, cfg) == pytest.approx(DECAY_FLOOR)
    off = tiny_cfg(steps=100)
    assert _decay_factor(99, off) == 1.0


def test_decay_applies_to_logged_lr(tmp_path):
    cfg = tiny_cfg(stage="stage1_t2i", steps=4, warmup=1, lr=1e-3,
                   decay_start=2, decay_steps=2)
    out = train(cfg, tmp_path / "cool")
    lrs = [json.loads(l)["lr"] for l in open(out["metrics"])]
    want = [1e-3, 1e-3, 1e-3 * (1.0 - 0.9 * 0.5), 1e-3 * DECAY_FLOOR]
    assert lrs == [pytest.approx(w) for w in want]
