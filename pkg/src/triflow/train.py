"""Staged training: T2I pretraining, mixed tuning, five-stream pipeline stage.

Stages and their task schedules (deterministic, step-indexed):
  stage1_t2i      every step is a T2I batch; only the embedding/patch/timestep
                  params, Linguistic + Generative experts, final norm, and
                  velocity head receive updates
  stage2_mixed    8 T2I steps then 1 I2T step, repeating; starts from a
                  stage1 checkpoint with the Semantic expert initialized as a
                  byte-exact copy of the Generative expert; everything trains
  mcot_multitask  cycles t2i, plan, i2t, reflect, correct; starts from a
                  stage2 checkpoint

Runs are resumable: checkpoints carry optimizer moments and the completed
step count, per-step randomness is keyed by (seed, stage, step, sample), and
resuming truncates the metrics log past the checkpoint so a split run's log
is byte-identical to a straight run's.
"""

import json
import os
from dataclasses import dataclass, field, fields

import numpy as np

from triflow import tensor as T
from triflow.checkpoint import load_checkpoint, save_checkpoint
from triflow.errors import ConfigError, NonFiniteError, StageError
from triflow.mcot import (_condition_ids, format_plan_text, mask_summary_ids,
                          plan_for_scene)
from triflow.model import ModelConfig, MTXpertStack, forward
from triflow.objectives import LossReport, combined_loss, make_trajectory
from triflow.rng import Stream
from triflow.sequencing import CleanImagePart, NoisedImagePart, TextPart, assemble
from triflow.toyworld import (CorrectionMask, DatasetConfig, DefectSpec,
                              SceneSpec, caption_relation, caption_short,
                              corrupt, caption_dense, make_dataset, patch_cover,
                              render)
from triflow.vocab import Vocabulary, tokenize

VOCAB = Vocabulary.default()

STAGES = ("stage1_t2i", "stage2_mixed", "mcot_multitask")
MCOT_CYCLE = ("t2i", "plan", "i2t", "reflect", "correct")
PROMPT_TEMPLATES = ("mixed", "short")
T_DISTS = ("uniform", "late_heavy")
DECAY_FLOOR = 0.1

STAGE1_FROZEN_MARKERS = (".semantic.", "head.heatmap.w")


@dataclass
class TrainConfig:
    """One training run: stage, schedule, optimizer, model and data dims."""

    stage: str = "stage1_t2i"
    steps: int = 200
    batch_size: int = 16
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.02
    warmup: int = 100
    lam: float = 1.0
    lam_hm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 100
    prompt_templates: str = "mixed"
    t_dist: str = "uniform"
    decay_start: int = 0
    decay_steps: int = 0
    init_from: str = ""
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    patch: int = 2
    data: DatasetConfig = field(default_factory=DatasetConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; one of {STAGES}")
        if self.steps < 1:
            raise ConfigError(f"need steps >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"need batch_size >= 1, got {self.batch_size}")
        if not self.lr > 0.0:
            raise ConfigError(f"need lr > 0, got {self.lr}")
        if not 0 <= self.warmup <= self.steps:
            raise ConfigError(f"warmup {self.warmup} outside [0, steps={self.steps}]")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.prompt_templates not in PROMPT_TEMPLATES:
            raise ConfigError(f"unknown prompt_templates {self.prompt_templates!r}")
        if self.t_dist not in T_DISTS:
            raise ConfigError(f"unknown t_dist {self.t_dist!r}; one of {T_DISTS}")
        if self.decay_start < 0 or self.decay_steps < 0:
            raise ConfigError("decay_start and decay_steps must be >= 0")
        counts = self.data
        if counts.n_t2i < 1:
            raise ConfigError("every stage trains T2I; data.n_t2i must be >= 1")
        if self.stage == "stage2_mixed" and counts.n_i2t < 1:
            raise ConfigError("stage2_mixed interleaves I2T; data.n_i2t must be >= 1")
        if self.stage == "mcot_multitask":
            for name in ("n_i2t", "n_plan", "n_reflect", "n_correct"):
                if getattr(counts, name) < 1:
                    raise ConfigError(f"mcot_multitask needs data.{name} >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, n_layers=self.n_layers,
                           n_heads=self.n_heads, patch=self.patch)

    def to_flat(self) -> dict:
        flat = {}
        for f in fields(self):
            if f.name == "data":
                continue
            if f.name in ("d_model", "n_layers", "n_heads", "patch"):
                flat["model." + f.name] = getattr(self, f.name)
            else:
                flat[f.name] = getattr(self, f.name)
        for f in fields(self.data):
            flat["data." + f.name] = getattr(self.data, f.name)
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        base, model, data = {}, {}, {}
        plain = {f.name for f in fields(cls)} - {"data", "d_model", "n_layers",
                                                 "n_heads", "patch"}
        model_keys = {"d_model", "n_layers", "n_heads", "patch"}
        data_keys = {f.name for f in fields(DatasetConfig)}
        for key, value in flat.items():
            if key.startswith("model."):
                name = key[len("model."):]
                if name not in model_keys:
                    raise ConfigError(f"unknown config key {key!r}")
                model[name] = value
            elif key.startswith("data."):
                name = key[len("data."):]
                if name not in data_keys:
                    raise ConfigError(f"unknown config key {key!r}")
                data[name] = value
            elif key in plain:
                base[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(data=DatasetConfig(**data), **model, **base)


# ---- optimizer ----


def adamw_init(params: dict) -> dict:
    return {"step": 0,
            "m": {name: np.zeros_like(p.data) for name, p in params.items()},
            "v": {name: np.zeros_like(p.data) for name, p in params.items()}}


def adamw_step(params: dict, state: dict, trainable, lr: float = 5e-5,
               beta1: float = 0.9, beta2: float = 0.999,
               weight_decay: float = 0.02, eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam update over the trainable names."""
    state["step"] += 1
    s = state["step"]
    bc1 = 1.0 - beta1 ** s
    bc2 = 1.0 - beta2 ** s
    for name in trainable:
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * ((m / bc1) / (np.sqrt(v / bc2) + eps)
                        + weight_decay * p.data)


def trainable_names(stage: str, params: dict) -> tuple:
    """Stage-1 freezes the Semantic expert and heatmap head; later stages train all."""
    names = sorted(params)
    if stage == "stage1_t2i":
        names = [n for n in names
                 if not any(marker in n for marker in STAGE1_FROZEN_MARKERS)]
    return tuple(names)


# ---- schedules and batches ----


def task_for_step(stage: str, step: int) -> str:
    """1-based step -> task name under the stage's deterministic schedule."""
    if stage == "stage1_t2i":
        return "t2i"
    if stage == "stage2_mixed":
        return "t2i" if (step - 1) % 9 < 8 else "i2t"
    return MCOT_CYCLE[(step - 1) % len(MCOT_CYCLE)]


def _t2i_prompt(scene: SceneSpec, record: dict, rng: Stream, cfg: TrainConfig) -> str:
    if cfg.prompt_templates == "short":
        return caption_short(scene)
    draw = rng.derive("template").below(3)
    if draw == 1:
        return caption_dense(scene)
    if draw == 2 and len(scene.objects) == 2:
        a, b = scene.objects
        if (a.color, a.shape) != (b.color, b.shape):
            return caption_relation(scene)
    return caption_short(scene)


def _draw_t(rng: Stream, t_dist: str) -> float:
    """Trajectory timestep; late_heavy concentrates draws where gain is high."""
    u = rng.u01()
    if t_dist == "late_heavy":
        return 1.0 - u * u
    return u


def build_parts(task: str, record: dict, rng: Stream, cfg: TrainConfig) -> list:
    """Assemble-ready parts for one training sample of the given task."""
    scene = SceneSpec.from_dict(record["scene"])
    if task == "t2i":
        prompt = _t2i_prompt(scene, record, rng, cfg)
        if (cfg.stage == "mcot_multitask"
                and rng.derive("condition").below(2) == 1):
            ids = _condition_ids(plan_for_scene(scene, prompt=prompt))
        else:
            ids = tokenize(prompt, VOCAB)
        x = render(scene)
        traj = make_trajectory(x, rng.derive("eps").normal(x.shape),
                               _draw_t(rng.derive("t"), cfg.t_dist))
        return [TextPart(ids, lm_from=None),
                NoisedImagePart(traj.x_t, t=traj.t,
                                velocity_target=traj.velocity_target)]
    if task == "plan":
        prompt_ids = tokenize(record["prompt"], VOCAB)
        plan_text = format_plan_text(plan_for_scene(scene, prompt=record["prompt"]))
        ids = (prompt_ids + [VOCAB.bop] + tokenize(plan_text, VOCAB)
               + [VOCAB.eop])
        return [TextPart(ids, lm_from=len(prompt_ids) + 1)]
    if task == "i2t":
        image = render(scene)
        if "question" in record:
            q_ids = tokenize(record["question"], VOCAB)
            a_ids = tokenize(record["answer"], VOCAB)
            return [CleanImagePart(image),
                    TextPart(q_ids + a_ids, lm_from=len(q_ids))]
        return [CleanImagePart(image),
                TextPart(tokenize(record["caption"], VOCAB), lm_from=1)]
    if task == "reflect":
        defect = DefectSpec.from_dict(record["defect"])
        image, heat = corrupt(scene, defect, rng.derive("corrupt"))
        ids = tokenize(caption_short(scene), VOCAB)
        return [TextPart(ids, lm_from=None),
                CleanImagePart(image, heatmap_target=heat)]
    if task == "correct":
        defect = DefectSpec.from_dict(record["defect"])
        mask = CorrectionMask(patch_cover(defect.region).astype(bool))
        plan = plan_for_scene(scene, prompt=caption_short(scene))
        ids = _condition_ids(plan) + mask_summary_ids(mask)
        x = render(scene)
        traj = make_trajectory(x, rng.derive("eps").normal(x.shape),
                               _draw_t(rng.derive("t"), cfg.t_dist))
        return [TextPart(ids, lm_from=None),
                NoisedImagePart(traj.x_t, t=traj.t,
                                velocity_target=traj.velocity_target)]
    raise ConfigError(f"unknown task {task!r}")


def records_by_task(manifest: dict) -> dict:
    groups = {}
    for record in manifest["train"]:
        groups.setdefault(record["task"], []).append(record)
    return groups


# ---- stage initialization ----


def copy_semantic_from_generative(stack: MTXpertStack) -> None:
    """Byte-exact Semantic <- Generative expert weight copy (stage-2 step 0)."""
    for name in stack.params:
        if ".generative." in name:
            twin = name.replace(".generative.", ".semantic.")
            stack.params[twin].data[...] = stack.params[name].data


def _load_prerequisite(cfg: TrainConfig, want_stage: str) -> MTXpertStack:
    if not cfg.init_from:
        raise StageError(f"{cfg.stage} requires init_from pointing at a "
                         f"{want_stage} checkpoint")
    if not os.path.exists(cfg.init_from):
        raise StageError(f"prerequisite checkpoint {cfg.init_from!r} does not exist")
    stack, _, meta = load_checkpoint(cfg.init_from)
    got = meta.get("stage")
    if got != want_stage:
        raise StageError(f"{cfg.stage} needs a {want_stage} checkpoint; "
                         f"{cfg.init_from!r} is from stage {got!r}")
    if stack.config.to_dict() != cfg.model_config().to_dict():
        raise StageError("prerequisite checkpoint model dims do not match "
                         "the configured model")
    return stack


def initialize_stage(cfg: TrainConfig):
    """(stack, opt_state) at step 0 for the configured stage."""
    if cfg.stage == "stage1_t2i":
        stack = MTXpertStack.init(cfg.model_config(), seed=cfg.seed)
    elif cfg.stage == "stage2_mixed":
        stack = _load_prerequisite(cfg, "stage1_t2i")
        copy_semantic_from_generative(stack)
    else:
        stack = _load_prerequisite(cfg, "stage2_mixed")
    return stack, adamw_init(stack.params)


# ---- the training loop ----


def _metrics_line(step: int, stage: str, task: str, report, lr: float,
                  grad_norm: float) -> str:
    payload = {"step": step, "stage": stage, "task": task,
               "lm": report.lm_loss, "rf": report.rf_loss,
               "hm": report.hm_loss, "combined": report.combined,
               "lm_tokens": report.lm_tokens, "rf_tokens": report.rf_tokens,
               "hm_tokens": report.hm_tokens, "lr": lr,
               "grad_norm": grad_norm}
    return json.dumps(payload, sort_keys=True)


def _truncate_metrics(path: str, keep_until: int) -> None:
    if not os.path.exists(path):
        return
    kept = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip() and json.loads(line)["step"] <= keep_until:
                kept.append(line)
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(kept)


def train_step(stack: MTXpertStack, cfg: TrainConfig, step: int,
               groups: dict, opt_state: dict, trainable) -> tuple:
    """One optimizer update; returns (batch LossReport, grad_norm, lr)."""
    task = task_for_step(cfg.stage, step)
    records = groups.get(task, [])
    if not records:
        raise ConfigError(f"no {task!r} records in the dataset")
    batch_index = sum(1 for s in range(1, step)
                      if task_for_step(cfg.stage, s) == task)
    T.zero_grads(stack.params.values())
    losses, reports = [], []
    with T.ComputationTape() as tape:
        for i in range(cfg.batch_size):
            record = records[(batch_index * cfg.batch_size + i) % len(records)]
            rng = Stream(cfg.seed, f"train/{cfg.stage}/{step}/{i}")
            parts = build_parts(task, record, rng, cfg)
            seq = assemble(parts, stack.embed_table, stack.grid)
            out = forward(stack, seq, want_heatmap=task == "reflect")
            loss, report = combined_loss(seq, out, lam=cfg.lam,
                                         lam_hm=cfg.lam_hm)
            losses.append(loss)
            reports.append(report)
        total = losses[0] if len(losses) == 1 else T.add_scalars(losses)
        if cfg.batch_size > 1:
            total = T.scale(total, 1.0 / cfg.batch_size)
        if not np.isfinite(total.data):
            raise NonFiniteError(f"non-finite loss at step {step}")
        T.backward(tape, total)
    grad_sq = 0.0
    for name in trainable:
        g = stack.params[name].grad
        if g is not None:
            grad_sq += float((g * g).sum())
    lr = cfg.lr * min(1.0, (opt_state["step"] + 1) / max(1, cfg.warmup))
    lr *= _decay_factor(opt_state["step"] + 1, cfg)
    adamw_step(stack.params, opt_state, trainable, lr=lr, beta1=cfg.beta1,
               beta2=cfg.beta2, weight_decay=cfg.weight_decay)
    return _batch_report(reports, float(total.data)), float(np.sqrt(grad_sq)), lr


def _decay_factor(step: int, cfg: TrainConfig) -> float:
    """Linear cooldown to DECAY_FLOOR x lr; a function of step alone, so
    extending a run via resume never rewrites the schedule already walked."""
    if cfg.decay_steps == 0 or step <= cfg.decay_start:
        return 1.0
    frac = min(1.0, (step - cfg.decay_start) / cfg.decay_steps)
    return 1.0 - (1.0 - DECAY_FLOOR) * frac


def _batch_report(reports: list, combined: float) -> LossReport:
    """Token-weighted means across the batch; combined = the optimized scalar."""
    lm_tokens = sum(r.lm_tokens for r in reports)
    rf_tokens = sum(r.rf_tokens for r in reports)
    hm_tokens = sum(r.hm_tokens for r in reports)
    lm = (sum(r.lm_loss * r.lm_tokens for r in reports) / lm_tokens
          if lm_tokens else 0.0)
    rf = (sum(r.rf_loss * r.rf_tokens for r in reports) / rf_tokens
          if rf_tokens else 0.0)
    hm = (sum(r.hm_loss * r.hm_tokens for r in reports) / hm_tokens
          if hm_tokens else 0.0)
    return LossReport(lm_loss=lm, rf_loss=rf, combined=combined,
                      lm_tokens=lm_tokens, rf_tokens=rf_tokens,
                      hm_loss=hm, hm_tokens=hm_tokens)


def train(cfg: TrainConfig, out_dir, resume: bool = False) -> dict:
    """Run (or resume) a stage; writes checkpoint.tfck, metrics.jsonl, config.txt."""
    from triflow.config import save_config

    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.tfck")
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    save_config(os.path.join(out_dir, "config.txt"), cfg.to_flat())

    if resume and os.path.exists(ckpt_path):
        stack, opt_state, meta = load_checkpoint(ckpt_path)
        if opt_state is None:
            raise StageError(f"{ckpt_path!r} carries no optimizer state to resume")
        if meta.get("stage") != cfg.stage:
            raise StageError(f"cannot resume stage {cfg.stage!r} from a "
                             f"{meta.get('stage')!r} checkpoint")
        stored = meta.get("train_config")
        if stored is not None:
            # `steps` only sets the stopping point; every per-step quantity is
            # a function of (stage, seed, step), so extending a run is legal.
            changed = sorted(k for k in set(stored) | set(cfg.to_flat())
                             if k != "steps"
                             and stored.get(k) != cfg.to_flat().get(k))
            if changed:
                raise StageError(f"resume config differs from the "
                                 f"checkpoint's (keys {changed}); a resumed "
                                 f"run must replay the original configuration")
        start = opt_state["step"]
        _truncate_metrics(metrics_path, start)
    else:
        stack, opt_state = initialize_stage(cfg)
        start = 0
        if os.path.exists(metrics_path):
            os.remove(metrics_path)

    manifest = make_dataset(cfg.data, seed=cfg.seed)
    groups = records_by_task(manifest)
    trainable = trainable_names(cfg.stage, stack.params)
    meta = {"stage": cfg.stage, "train_config": cfg.to_flat()}

    final = None
    log = open(metrics_path, "a", encoding="utf-8")
    try:
        for step in range(start + 1, cfg.steps + 1):
            report, grad_norm, lr = train_step(stack, cfg, step, groups,
                                               opt_state, trainable)
            task = task_for_step(cfg.stage, step)
            line = _metrics_line(step, cfg.stage, task, report, lr, grad_norm)
            log.write(line + "\n")
            log.flush()
            final = json.loads(line)
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                save_checkpoint(ckpt_path, stack, opt_state=opt_state,
                                meta=dict(meta))
    finally:
        log.close()
    return {"checkpoint": ckpt_path, "metrics": metrics_path,
            "steps_run": cfg.steps - start, "final": final}
