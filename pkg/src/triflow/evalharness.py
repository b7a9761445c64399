"""Compositional generation scoreboard: six prompt categories, oracle-judged.

Categories and their success predicates (all judged by parsing the generated
image back to a scene and checking it exactly):

  single_object  "a red circle"                    exactly that one object
  two_object     "a red circle and a blue square"  exactly those two objects
  counting       "two red circles"                 exactly k, all that label
  colors         "a red circle and a blue circle"  same shape, those colors
  position       "a red circle left of a blue square"
                 both objects present, strict column (left/right) or row
                 (above/below) inequality between them, other axis free
  attr_binding   "a red circle and a blue square" with shapes AND colors
                 distinct; swapped attributes count as failure

Every case carries its own seed; evaluate() runs the pipeline per case and
scores 0/1, and ablation() replays the identical (prompt, seed) pairs under
all three pipeline modes so mode columns are paired comparisons. An
injectable image source lets tests plant ground-truth renders through the
same scoring path, which is how the harness audits itself.
"""

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from triflow.checkpoint import load_checkpoint
from triflow.errors import ContractError
from triflow.mcot import MODES, McotConfig, run_mcot
from triflow.model import MTXpertStack
from triflow.rng import Stream
from triflow.toyworld import (PALETTE, SHAPES, ObjectSpec, SceneSpec,
                              caption_relation, caption_short, oracle_parse,
                              render, sample_scene)

CATEGORIES = ("single_object", "two_object", "counting", "colors",
              "position", "attr_binding")
RELATIONS = ("left of", "right of", "above", "below")


@dataclass(frozen=True)
class EvalCase:
    """One category-tagged prompt with its pipeline seed and truth payload."""

    category: str
    prompt: str
    seed: int
    objects: tuple
    count: int
    relation: Optional[str] = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ContractError(f"unknown category {self.category!r}")
        if (self.relation is None) != (self.category != "position"):
            raise ContractError("relation is set exactly for position cases")


@dataclass(frozen=True)
class FailureDiag:
    """Why one case scored zero."""

    category: str
    prompt: str
    seed: int
    reason: str


@dataclass(frozen=True)
class EvalReport:
    """Per-category hit rates for one pipeline mode."""

    mode: str
    scores: dict
    counts: dict
    overall: float
    n_cases: int
    failures: tuple

    def format(self) -> str:
        width = max(len(c) for c in CATEGORIES)
        lines = [f"{cat:<{width}}  {self.scores[cat]:.3f}  "
                 f"({self.counts[cat]} cases)"
                 for cat in CATEGORIES if cat in self.scores]
        lines.append(f"{'overall':<{width}}  {self.overall:.3f}  "
                     f"({self.n_cases} cases, mode {self.mode})")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "scores": dict(self.scores),
                "counts": dict(self.counts), "overall": self.overall,
                "n_cases": self.n_cases,
                "failures": [vars(f) for f in self.failures]}


def _pick(rng: Stream, pool):
    return pool[rng.below(len(pool))]


def _labels_for(category: str, rng: Stream) -> list:
    """Draw (color, shape) labels satisfying the category's distinctness rule."""
    colors = tuple(PALETTE)
    if category == "single_object":
        return [(_pick(rng, colors), _pick(rng, SHAPES))]
    if category == "counting":
        label = (_pick(rng, colors), _pick(rng, SHAPES))
        return [label] * (2 + rng.below(2))
    if category == "colors":
        shape = _pick(rng, SHAPES)
        c1 = _pick(rng, colors)
        c2 = _pick(rng, tuple(c for c in colors if c != c1))
        return [(c1, shape), (c2, shape)]
    if category == "attr_binding":
        c1, s1 = _pick(rng, colors), _pick(rng, SHAPES)
        c2 = _pick(rng, tuple(c for c in colors if c != c1))
        s2 = _pick(rng, tuple(s for s in SHAPES if s != s1))
        return [(c1, s1), (c2, s2)]
    first = (_pick(rng, colors), _pick(rng, SHAPES))
    while True:
        second = (_pick(rng, colors), _pick(rng, SHAPES))
        if second != first:
            return [first, second]


def _with_labels(base: SceneSpec, labels: list) -> SceneSpec:
    return SceneSpec(tuple(replace(o, color=c, shape=s)
                           for o, (c, s) in zip(base.objects, labels)))


def _cell_relation(a: ObjectSpec, b: ObjectSpec) -> str:
    """Same preference order the relation caption uses: horizontal first."""
    if a.cell[1] < b.cell[1]:
        return "left of"
    if a.cell[1] > b.cell[1]:
        return "right of"
    return "above" if a.cell[0] < b.cell[0] else "below"


def make_cases(n_per_category: int = 8, seed: int = 0) -> tuple:
    """Seeded category-tagged prompt set; every case gets a private seed."""
    if n_per_category < 1:
        raise ContractError("need at least one case per category")
    cases = []
    for category in CATEGORIES:
        for i in range(n_per_category):
            rng = Stream(seed, f"eval/{category}/{i}")
            labels = _labels_for(category, rng)
            scene = _with_labels(sample_scene(rng.derive("scene"),
                                              n_objects=len(labels)), labels)
            if category == "position":
                prompt = caption_relation(scene)
                relation = _cell_relation(*scene.objects)
            else:
                prompt = caption_short(scene)
                relation = None
            cases.append(EvalCase(category=category, prompt=prompt,
                                  seed=rng.derive("mcot").below(2**31),
                                  objects=tuple(labels), count=len(labels),
                                  relation=relation))
    return tuple(cases)


def case_satisfied(case: EvalCase, scene) -> bool:
    """Exact truth predicate for one case against a parsed scene."""
    if not isinstance(scene, SceneSpec):
        return False
    labels = [(o.color, o.shape) for o in scene.objects]
    if case.category == "single_object":
        return labels == list(case.objects)
    if case.category == "counting":
        need = case.objects[0]
        return len(labels) == case.count and all(l == need for l in labels)
    if sorted(labels) != sorted(case.objects):
        return False
    if case.category != "position":
        return True
    a = next(o for o in scene.objects
             if (o.color, o.shape) == case.objects[0])
    b = next(o for o in scene.objects
             if (o.color, o.shape) == case.objects[1])
    if case.relation == "left of":
        return a.cell[1] < b.cell[1]
    if case.relation == "right of":
        return a.cell[1] > b.cell[1]
    if case.relation == "above":
        return a.cell[0] < b.cell[0]
    return a.cell[0] > b.cell[0]


def satisfying_scene(case: EvalCase, rng: Stream) -> SceneSpec:
    """A fresh scene that the case's predicate accepts."""
    for _ in range(1000):
        base = sample_scene(rng, n_objects=case.count)
        scene = _with_labels(base, list(case.objects))
        if case_satisfied(case, scene):
            return scene
    raise ContractError(f"could not satisfy {case.prompt!r} in 1000 draws")


def violating_scene(case: EvalCase, rng: Stream) -> SceneSpec:
    """A near-miss scene the predicate must reject."""
    scene = satisfying_scene(case, rng)
    objs = scene.objects
    colors = tuple(PALETTE)
    if case.category in ("single_object", "counting"):
        other = next(c for c in colors if c != objs[0].color)
        return SceneSpec((replace(objs[0], color=other),) + objs[1:])
    if case.category == "two_object":
        return SceneSpec(objs[:1])
    if case.category == "colors":
        return SceneSpec((objs[0], replace(objs[1], color=objs[0].color)))
    if case.category == "attr_binding":
        return SceneSpec((replace(objs[0], color=objs[1].color),
                          replace(objs[1], color=objs[0].color)))
    return SceneSpec((replace(objs[0], cell=objs[1].cell),
                      replace(objs[1], cell=objs[0].cell)))


def _resolve_stack(stack_or_path):
    if isinstance(stack_or_path, (str, bytes)) or hasattr(stack_or_path,
                                                          "__fspath__"):
        stack, _, _ = load_checkpoint(stack_or_path)
        return stack
    return stack_or_path


def evaluate(stack, cases, mode: str, cfg: Optional[McotConfig] = None,
             image_source: Optional[Callable] = None) -> EvalReport:
    """Score every case 0/1 under one mode; failures are logged, never raised."""
    if cfg is None:
        cfg = McotConfig()
    if image_source is None:
        if mode not in MODES:
            raise ContractError(f"unknown pipeline mode {mode!r}; "
                                f"choose one of {MODES}")
        stack = _resolve_stack(stack)
    hits = {c: 0 for c in CATEGORIES}
    counts = {c: 0 for c in CATEGORIES}
    failures = []

    def miss(case, reason):
        failures.append(FailureDiag(category=case.category,
                                    prompt=case.prompt, seed=case.seed,
                                    reason=reason))

    for case in cases:
        counts[case.category] += 1
        if image_source is not None:
            image, err = image_source(case, mode), None
        else:
            trace = run_mcot(stack, case.prompt, mode,
                             replace(cfg, seed=case.seed))
            image, err = trace.final_image, trace.error
        if image is None:
            miss(case, f"pipeline: {err}")
            continue
        parsed = oracle_parse(image)
        if not parsed:
            miss(case, "unparseable: " + "; ".join(parsed.reasons))
            continue
        if case_satisfied(case, parsed):
            hits[case.category] += 1
        else:
            got = [(o.color, o.shape, o.cell) for o in parsed.objects]
            miss(case, f"constraint unsatisfied: oracle read {got}")
    present = [c for c in CATEGORIES if counts[c] > 0]
    if not present:
        raise ContractError("no cases to evaluate")
    scores = {c: hits[c] / counts[c] for c in present}
    return EvalReport(mode=mode, scores=scores,
                      counts={c: counts[c] for c in present},
                      overall=sum(scores.values()) / len(present),
                      n_cases=sum(counts.values()), failures=tuple(failures))


@dataclass(frozen=True)
class SelfTestReport:
    """Agreement between harness verdicts and planted ground truth."""

    agreement: float
    n_checks: int
    mismatches: tuple


def planted_self_test(n_per_category: int = 8, seed: int = 0) -> SelfTestReport:
    """Plant exact renders of passing and failing scenes; audit the verdicts."""
    cases = make_cases(n_per_category, seed)
    good = {}
    bad = {}
    for case in cases:
        rng = Stream(seed, f"selftest/{case.category}/{case.prompt}/{case.seed}")
        good[case] = render(satisfying_scene(case, rng))
        bad[case] = render(violating_scene(case, rng.derive("violate")))
    rep_good = evaluate(None, cases, "planted_pass",
                        image_source=lambda c, m: good[c])
    rep_bad = evaluate(None, cases, "planted_fail",
                       image_source=lambda c, m: bad[c])
    mismatches = [("accepted_expected", f.category, f.prompt, f.reason)
                  for f in rep_good.failures]
    rejected = {(f.category, f.prompt, f.seed) for f in rep_bad.failures}
    for case in cases:
        if (case.category, case.prompt, case.seed) not in rejected:
            mismatches.append(("rejected_expected", case.category,
                               case.prompt, "violating scene accepted"))
    n_checks = 2 * len(cases)
    return SelfTestReport(agreement=1.0 - len(mismatches) / n_checks,
                          n_checks=n_checks, mismatches=tuple(mismatches))


@dataclass(frozen=True)
class AblationReport:
    """One EvalReport per pipeline mode over the identical case set."""

    reports: dict
    n_cases: int

    def format(self) -> str:
        width = max(len(c) for c in CATEGORIES + ("overall",))
        header = f"{'':<{width}}" + "".join(f"  {m:>10}" for m in MODES)
        lines = [header]
        present = next(iter(self.reports.values())).scores
        for cat in (c for c in CATEGORIES if c in present):
            row = f"{cat:<{width}}"
            for m in MODES:
                row += f"  {self.reports[m].scores[cat]:>10.3f}"
            lines.append(row)
        row = f"{'overall':<{width}}"
        for m in MODES:
            row += f"  {self.reports[m].overall:>10.3f}"
        lines.append(row)
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"n_cases": self.n_cases,
                "modes": {m: r.to_dict() for m, r in self.reports.items()}}


def ablation(stack, cases, cfg: Optional[McotConfig] = None) -> AblationReport:
    """Evaluate all three modes on the identical (prompt, seed) pairs."""
    stack = _resolve_stack(stack)
    reports = {mode: evaluate(stack, cases, mode, cfg) for mode in MODES}
    return AblationReport(reports=reports, n_cases=len(cases))
