"""Plan, act, reflect, correct: staged image generation with self-repair.

Plan serialization (the token span a planner emits between <bop> and <eop>):

    <bop> {dense caption} ; the {color} {shape} @x0 @y0 @x1 @y1 ; ... <eop>

One box clause per object, separated by ";" (the caption itself only ever
contains "."), corners quantized to integer percent bins. The reflection
summary appended when conditioning a correction is the bounding rectangle
of the masked patches: <boh> @x0 @y0 @x1 @y1 <eoh>.

Trace directory layout (save_trace / load_trace):

    prompt.txt     the raw prompt, newline terminated
    plan.json      {"prompt", "caption", "boxes": [{"label", "box"}]},
                   boxes as quantized [x0, y0, x1, y1]
    image_v1.png   preview; image_v1.raw holds the lossless float64 pixels
    heatmap.json   {"grid": [[float]]} confidence per patch
    mask.json      {"grid": [[0|1]], "tau", "dilation"}
    image_v2.png   preview; image_v2.raw as above (full mode only)
    trace.json     {"format_version", "mode", "prompt", "seed", "timings",
                    "scores", "error", "error_stage", "artifacts"}

Files exist iff the mode's steps ran; trace.json names what was written.
"""

import json
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from triflow.errors import (ConfigError, ContractError, NonFiniteError,
                            PlanParseError, ShapeError, UnknownWordError)
from triflow.image_io import load_raw, save_png, save_raw
from triflow.model import MTXpertStack, forward
from triflow.rng import Stream
from triflow.sampling import SamplerConfig, decode_text, inpaint_sample, sample_image
from triflow.sequencing import CleanImagePart, TextPart, assemble
from triflow.toyworld import (BBox, CorrectionMask, PALETTE, SHAPES, SceneSpec,
                              caption_dense, layout, oracle_parse,
                              parse_caption_dense, parse_caption_short)
from triflow.vocab import Vocabulary, detokenize, tokenize

VOCAB = Vocabulary.default()

MODES = ("t2i_only", "plan_act", "full")


@dataclass
class McotConfig:
    """Pipeline knobs: integrator steps, decode budget, masking, seeding."""

    steps: int = 50
    max_plan_tokens: int = 96
    tau: float = 0.5
    dilation: int = 1
    rounds: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"integration needs steps >= 1, got {self.steps}")
        if self.max_plan_tokens < 1:
            raise ConfigError("plan decoding needs a positive token budget")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"mask threshold tau must lie in (0,1), got {self.tau}")
        if self.dilation < 0:
            raise ConfigError(f"dilation radius must be >= 0, got {self.dilation}")
        if self.rounds < 1:
            raise ConfigError(f"at least one reflection round, got {self.rounds}")


def _stage_seed(seed: int, stage: str) -> int:
    """Deterministic per-stage sampler seed derived from the trace seed."""
    return Stream(seed, "mcot/" + stage).below(2**62)


# ---- domain types ----


@dataclass(frozen=True)
class ArtifactHeatmap:
    """Per-patch correction confidence in [0, 1]."""

    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 2:
            raise ShapeError(f"heatmap grid must be 2-d, got shape {g.shape}")
        if not ((g >= 0.0) & (g <= 1.0)).all():
            raise ContractError("heatmap confidences must lie in [0, 1]")
        object.__setattr__(self, "grid", g)

    def to_dict(self) -> dict:
        return {"grid": self.grid.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArtifactHeatmap":
        return cls(grid=np.asarray(d["grid"], dtype=np.float64))


@dataclass(frozen=True)
class DensePlan:
    """Drafted dense caption plus one labeled box per object."""

    caption: str
    boxes: tuple
    prompt: str = ""

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        words = set(self.caption.split())
        for box in self.boxes:
            missing = [w for w in box.label if w not in words]
            if missing:
                raise ContractError(f"box label {box.label} words {missing} "
                                    f"do not appear in the dense caption")

    def to_dict(self) -> dict:
        return {"prompt": self.prompt, "caption": self.caption,
                "boxes": [{"label": list(b.label), "box": list(b.quantized())}
                          for b in self.boxes]}

    @classmethod
    def from_dict(cls, d: dict) -> "DensePlan":
        boxes = tuple(BBox.from_quantized(tuple(b["box"]), label=tuple(b["label"]))
                      for b in d["boxes"])
        return cls(caption=d["caption"], boxes=boxes, prompt=d.get("prompt", ""))


def plan_for_scene(scene: SceneSpec, prompt: str = "") -> DensePlan:
    """Ground-truth plan: the scene's dense caption and tight boxes."""
    return DensePlan(caption=caption_dense(scene), boxes=tuple(layout(scene)),
                     prompt=prompt)


def format_plan_text(plan: DensePlan) -> str:
    """The token text between <bop> and <eop>: caption ; box ; box ..."""
    clauses = [plan.caption]
    for box in plan.boxes:
        color, shape = box.label
        x0, y0, x1, y1 = box.quantized()
        clauses.append(f"the {color} {shape} @{x0} @{y0} @{x1} @{y1}")
    return " ; ".join(clauses)


def parse_plan(text: str, prompt: str = "") -> DensePlan:
    """Inverse of format_plan_text; PlanParseError carries the raw words."""
    words = text.split()
    clauses, current = [], []
    for w in words:
        if w == ";":
            clauses.append(current)
            current = []
        else:
            current.append(w)
    clauses.append(current)
    if not clauses[0]:
        raise PlanParseError("plan has no dense caption clause", raw_tokens=words)
    caption = " ".join(clauses[0])
    boxes = []
    for clause in clauses[1:]:
        if len(clause) != 7 or clause[0] != "the":
            raise PlanParseError(f"bad box clause {' '.join(clause)!r}",
                                 raw_tokens=words)
        color, shape = clause[1], clause[2]
        if color not in PALETTE or shape not in SHAPES:
            raise PlanParseError(f"bad box label {color!r} {shape!r}",
                                 raw_tokens=words)
        bins = []
        for w in clause[3:]:
            if not (w.startswith("@") and w[1:].isdigit() and 0 <= int(w[1:]) <= 100):
                raise PlanParseError(f"bad coordinate token {w!r}", raw_tokens=words)
            bins.append(int(w[1:]))
        try:
            boxes.append(BBox.from_quantized(tuple(bins), label=(color, shape)))
        except ContractError as err:
            raise PlanParseError(f"degenerate box {bins}: {err}",
                                 raw_tokens=words) from None
    try:
        return DensePlan(caption=caption, boxes=tuple(boxes), prompt=prompt)
    except ContractError as err:
        raise PlanParseError(str(err), raw_tokens=words) from None


def _condition_ids(plan: DensePlan) -> list:
    """Token ids of prompt (+) <bop> serialized plan <eop>."""
    ids = tokenize(plan.prompt, VOCAB) if plan.prompt else []
    return ids + [VOCAB.bop] + tokenize(format_plan_text(plan), VOCAB) + [VOCAB.eop]


def mask_summary_ids(mask: CorrectionMask) -> list:
    """Reflection summary: <boh> bounding rect of masked patches <eoh>."""
    if not mask.grid.any():
        raise ContractError("cannot summarize an empty mask")
    gh, gw = mask.grid.shape
    rows = np.where(mask.grid.any(axis=1))[0]
    cols = np.where(mask.grid.any(axis=0))[0]
    x0 = int(round(cols[0] / gw * 100))
    y0 = int(round(rows[0] / gh * 100))
    x1 = int(round((cols[-1] + 1) / gw * 100))
    y1 = int(round((rows[-1] + 1) / gh * 100))
    coords = [VOCAB.coord_id(b) for b in (x0, y0, x1, y1)]
    return [VOCAB.boh] + coords + [VOCAB.eoh]


# ---- pipeline steps ----


def plan(stack: MTXpertStack, short_caption: str, cfg: McotConfig) -> DensePlan:
    """Decode a dense caption and layout from a short prompt."""
    if not short_caption.strip():
        raise ContractError("cannot plan from an empty caption")
    prompt_ids = tokenize(short_caption, VOCAB)
    dcfg = SamplerConfig(mode="greedy", max_text_tokens=cfg.max_plan_tokens,
                         seed=_stage_seed(cfg.seed, "plan"),
                         stop_ids=frozenset({VOCAB.eop}))
    result = decode_text(stack, [TextPart(prompt_ids + [VOCAB.bop], lm_from=None)],
                         dcfg)
    ids = list(result.ids)
    if result.truncated or not ids or ids[-1] != VOCAB.eop:
        raise PlanParseError("plan decoding ran past the token budget",
                             raw_tokens=detokenize(ids, VOCAB).split())
    return parse_plan(detokenize(ids[:-1], VOCAB), prompt=short_caption)


def act(stack: MTXpertStack, plan: DensePlan, cfg: McotConfig) -> np.ndarray:
    """Sample an image conditioned on prompt + dense caption + layout."""
    condition = [TextPart(_condition_ids(plan), lm_from=None)]
    scfg = SamplerConfig(steps=cfg.steps, seed=_stage_seed(cfg.seed, "act"))
    return sample_image(stack, condition, scfg)


def reflect(stack: MTXpertStack, image: np.ndarray, prompt: str) -> ArtifactHeatmap:
    """Read the heatmap head over the image as an observed segment."""
    cfg = stack.config
    want = (cfg.height, cfg.width, cfg.channels)
    if np.asarray(image).shape != want:
        raise ShapeError(f"image {np.asarray(image).shape} does not match "
                         f"configured geometry {want}")
    parts = []
    if prompt:
        parts.append(TextPart(tokenize(prompt, VOCAB), lm_from=None))
    parts.append(CleanImagePart(np.asarray(image, dtype=np.float64)))
    seq = assemble(parts, stack.embed_table, stack.grid)
    out = forward(stack, seq, want_heatmap=True)
    grid = out.heatmap.data.reshape(stack.grid.grid_rows, stack.grid.grid_cols)
    return ArtifactHeatmap(grid=grid)


def heatmap_to_mask(hm: ArtifactHeatmap, tau: float = 0.5,
                    dilation: int = 1) -> CorrectionMask:
    """Threshold at tau, then dilate by a Chebyshev radius."""
    if not 0.0 < tau < 1.0:
        raise ContractError(f"mask threshold tau must lie in (0,1), got {tau}")
    if dilation < 0:
        raise ContractError(f"dilation radius must be >= 0, got {dilation}")
    base = hm.grid >= tau
    if dilation and base.any():
        k = 2 * dilation + 1
        padded = np.pad(base, dilation)
        windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
        base = windows.any(axis=(2, 3))
    return CorrectionMask(grid=base, tau=tau, dilation=dilation)


def correct(stack: MTXpertStack, image: np.ndarray, mask: CorrectionMask,
            plan: DensePlan, cfg: McotConfig) -> np.ndarray:
    """Inpaint the masked patches under plan + reflection conditioning."""
    if not mask.grid.any():
        return np.asarray(image, dtype=np.float64).copy()
    ids = _condition_ids(plan) + mask_summary_ids(mask)
    condition = [TextPart(ids, lm_from=None)]
    scfg = SamplerConfig(steps=cfg.steps, seed=_stage_seed(cfg.seed, "correct"))
    return inpaint_sample(stack, np.asarray(image, dtype=np.float64),
                          mask.grid, condition, scfg)


# ---- prompt satisfaction (for the best-of-two baseline) ----


def prompt_score(image: np.ndarray, prompt: str) -> float:
    """0 unparseable, 0.5 clean-but-wrong, 1 matches the prompt."""
    parsed = oracle_parse(image)
    if not parsed:
        return 0.0
    try:
        return 1.0 if parsed == parse_caption_dense(prompt) else 0.5
    except PlanParseError:
        pass
    try:
        groups = parse_caption_short(prompt)
    except PlanParseError:
        return 0.5
    want = {}
    for count, color, shape in groups:
        want[(color, shape)] = want.get((color, shape), 0) + count
    got = {}
    for obj in parsed.objects:
        got[(obj.color, obj.shape)] = got.get((obj.color, obj.shape), 0) + 1
    return 1.0 if got == want else 0.5


# ---- the trace runner ----


_STEP_ERRORS = (ContractError, PlanParseError, NonFiniteError, ShapeError,
                UnknownWordError, ConfigError)


@dataclass
class McotTrace:
    """Everything one pipeline run produced, in execution order."""

    prompt: str
    mode: str
    seed: int
    plan: Optional[DensePlan] = None
    image_v1: Optional[np.ndarray] = None
    heatmap: Optional[ArtifactHeatmap] = None
    mask: Optional[CorrectionMask] = None
    image_v2: Optional[np.ndarray] = None
    timings: dict = field(default_factory=dict)
    scores: dict = field(default_factory=dict)
    error: Optional[str] = None
    error_stage: Optional[str] = None

    @property
    def final_image(self) -> Optional[np.ndarray]:
        return self.image_v2 if self.image_v2 is not None else self.image_v1


def run_mcot(stack: MTXpertStack, prompt: str, mode: str,
             cfg: McotConfig) -> McotTrace:
    """Execute one pipeline mode; step failures halt and mark the trace."""
    if mode not in MODES:
        raise ContractError(f"unknown pipeline mode {mode!r}; "
                            f"choose one of {MODES}")
    trace = McotTrace(prompt=prompt, mode=mode, seed=cfg.seed)
    stage = "start"
    clock = time.perf_counter
    try:
        if mode == "t2i_only":
            stage = "t2i"
            begin = clock()
            condition = [TextPart(tokenize(prompt, VOCAB), lm_from=None)]
            candidates = []
            for i in range(2):
                scfg = SamplerConfig(steps=cfg.steps,
                                     seed=_stage_seed(cfg.seed, f"t2i/{i}"))
                img = sample_image(stack, condition, scfg)
                score = prompt_score(img, prompt)
                candidates.append((score, i, img))
                trace.scores[f"candidate_{i}"] = score
            trace.timings["t2i"] = clock() - begin
            best = max(candidates, key=lambda c: (c[0], -c[1]))
            trace.image_v1 = best[2]
            return trace

        stage = "plan"
        begin = clock()
        trace.plan = plan(stack, prompt, cfg)
        trace.timings["plan"] = clock() - begin

        stage = "act"
        begin = clock()
        trace.image_v1 = act(stack, trace.plan, cfg)
        trace.timings["act"] = clock() - begin
        if mode == "plan_act":
            return trace

        image = trace.image_v1
        for _ in range(cfg.rounds):
            stage = "reflect"
            begin = clock()
            trace.heatmap = reflect(stack, image, prompt)
            trace.mask = heatmap_to_mask(trace.heatmap, tau=cfg.tau,
                                         dilation=cfg.dilation)
            trace.timings["reflect"] = trace.timings.get("reflect", 0.0) \
                + clock() - begin
            stage = "correct"
            begin = clock()
            image = correct(stack, image, trace.mask, trace.plan, cfg)
            trace.timings["correct"] = trace.timings.get("correct", 0.0) \
                + clock() - begin
            if not trace.mask.grid.any():
                break
        trace.image_v2 = image
        return trace
    except _STEP_ERRORS as err:
        trace.error = f"{type(err).__name__}: {err}"
        trace.error_stage = stage
        return trace


# ---- trace serialization ----


TRACE_FORMAT_VERSION = 1


def save_trace(trace: McotTrace, dirpath) -> None:
    """Write the trace directory documented in the module docstring."""
    dirpath = str(dirpath)
    os.makedirs(dirpath, exist_ok=True)
    artifacts = []

    def path(name):
        return os.path.join(dirpath, name)

    with open(path("prompt.txt"), "w", encoding="utf-8") as fh:
        fh.write(trace.prompt + "\n")
    artifacts.append("prompt.txt")
    if trace.plan is not None:
        _dump_json(path("plan.json"), trace.plan.to_dict())
        artifacts.append("plan.json")
    for tag in ("image_v1", "image_v2"):
        image = getattr(trace, tag)
        if image is not None:
            save_png(path(tag + ".png"), image)
            save_raw(path(tag + ".raw"), image)
            artifacts.extend([tag + ".png", tag + ".raw"])
    if trace.heatmap is not None:
        _dump_json(path("heatmap.json"), trace.heatmap.to_dict())
        artifacts.append("heatmap.json")
    if trace.mask is not None:
        _dump_json(path("mask.json"), trace.mask.to_dict())
        artifacts.append("mask.json")
    _dump_json(path("trace.json"), {
        "format_version": TRACE_FORMAT_VERSION,
        "mode": trace.mode,
        "prompt": trace.prompt,
        "seed": trace.seed,
        "timings": trace.timings,
        "scores": trace.scores,
        "error": trace.error,
        "error_stage": trace.error_stage,
        "artifacts": artifacts,
    })


def load_trace(dirpath) -> McotTrace:
    """Rebuild a trace from its directory; raw sidecars win over previews."""
    dirpath = str(dirpath)

    def path(name):
        return os.path.join(dirpath, name)

    with open(path("trace.json"), encoding="utf-8") as fh:
        head = json.load(fh)
    if head.get("format_version") != TRACE_FORMAT_VERSION:
        raise ContractError(f"unsupported trace format version "
                            f"{head.get('format_version')!r}")
    trace = McotTrace(prompt=head["prompt"], mode=head["mode"],
                      seed=head["seed"], timings=head["timings"],
                      scores=head["scores"], error=head["error"],
                      error_stage=head["error_stage"])
    if os.path.exists(path("plan.json")):
        with open(path("plan.json"), encoding="utf-8") as fh:
            trace.plan = DensePlan.from_dict(json.load(fh))
    for tag in ("image_v1", "image_v2"):
        if os.path.exists(path(tag + ".raw")):
            setattr(trace, tag, load_raw(path(tag + ".raw")))
    if os.path.exists(path("heatmap.json")):
        with open(path("heatmap.json"), encoding="utf-8") as fh:
            trace.heatmap = ArtifactHeatmap.from_dict(json.load(fh))
    if os.path.exists(path("mask.json")):
        with open(path("mask.json"), encoding="utf-8") as fh:
            trace.mask = CorrectionMask.from_dict(json.load(fh))
    return trace


def _dump_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
