"""Eval harness: case generators, exact predicates, planted-truth audit."""

from dataclasses import replace

import numpy as np
import pytest

from triflow.errors import ContractError
from triflow.evalharness import (CATEGORIES, AblationReport, EvalCase,
                                 ablation, case_satisfied, evaluate,
                                 make_cases, planted_self_test,
                                 satisfying_scene, violating_scene)
from triflow.mcot import MODES, McotConfig
from triflow.model import ModelConfig, MTXpertStack
from triflow.rng import Stream
from triflow.toyworld import (ObjectSpec, ParseFailure, SceneSpec,
                              caption_relation, caption_short, render)


def obj(shape, color, cell, size="large"):
    return ObjectSpec(shape=shape, color=color, cell=cell, size=size)


# ---- case generation ----

def test_case_set_covers_every_category():
    cases = make_cases(n_per_category=3, seed=0)
    assert len(cases) == 3 * len(CATEGORIES)
    per = {c: [k for k in cases if k.category == c] for c in CATEGORIES}
    assert all(len(v) == 3 for v in per.values())
    seeds = [c.seed for c in cases]
    assert len(set(seeds)) == len(seeds)


def test_case_prompts_match_grammar():
    for case in make_cases(n_per_category=4, seed=1):
        words = case.prompt.split()
        if case.category == "position":
            assert case.relation in ("left of", "right of", "above", "below")
            assert any(w in words for w in ("left", "right", "above", "below"))
        elif case.category == "counting":
            assert words[0] in ("two", "three")
            assert case.count == {"two": 2, "three": 3}[words[0]]
        else:
            assert words[0] == "a"
        if case.category == "colors":
            shapes = {s for _, s in case.objects}
            colors = {c for c, _ in case.objects}
            assert len(shapes) == 1 and len(colors) == 2
        if case.category == "attr_binding":
            assert len({s for _, s in case.objects}) == 2
            assert len({c for c, _ in case.objects}) == 2


def test_case_generation_is_deterministic():
    assert make_cases(5, seed=9) == make_cases(5, seed=9)
    assert make_cases(5, seed=9) != make_cases(5, seed=10)


def test_case_validation():
    with pytest.raises(ContractError, match="category"):
        EvalCase(category="nonsense", prompt="x", seed=0,
                 objects=(("red", "circle"),), count=1)
    with pytest.raises(ContractError, match="relation"):
        EvalCase(category="single_object", prompt="x", seed=0,
                 objects=(("red", "circle"),), count=1, relation="above")
    with pytest.raises(ContractError, match="one case"):
        make_cases(0)


# ---- predicates ----

def single_case():
    return EvalCase(category="single_object", prompt="a red circle", seed=0,
                    objects=(("red", "circle"),), count=1)


def binding_case():
    return EvalCase(category="attr_binding",
                    prompt="a red circle and a blue square", seed=0,
                    objects=(("red", "circle"), ("blue", "square")), count=2)


def position_case(relation):
    return EvalCase(category="position",
                    prompt=f"a red circle {relation} a blue square", seed=0,
                    objects=(("red", "circle"), ("blue", "square")), count=2,
                    relation=relation)


def test_single_object_predicate():
    case = single_case()
    assert case_satisfied(case, SceneSpec((obj("circle", "red", (1, 1)),)))
    assert not case_satisfied(case, SceneSpec((obj("circle", "blue", (1, 1)),)))
    assert not case_satisfied(case, SceneSpec((obj("square", "red", (1, 1)),)))
    assert not case_satisfied(case, SceneSpec((obj("circle", "red", (1, 1)),
                                               obj("circle", "red", (2, 2)))))
    assert not case_satisfied(case, SceneSpec(()))
    assert not case_satisfied(case, ParseFailure(["noise"]))


def test_counting_predicate():
    case = EvalCase(category="counting", prompt="two red circles", seed=0,
                    objects=(("red", "circle"), ("red", "circle")), count=2)
    two = SceneSpec((obj("circle", "red", (0, 0)), obj("circle", "red", (3, 3))))
    assert case_satisfied(case, two)
    three = SceneSpec(two.objects + (obj("circle", "red", (1, 2)),))
    assert not case_satisfied(case, three)
    mixed = SceneSpec((obj("circle", "red", (0, 0)), obj("circle", "blue", (3, 3))))
    assert not case_satisfied(case, mixed)


def test_attr_binding_predicate_rejects_swap():
    case = binding_case()
    right = SceneSpec((obj("circle", "red", (0, 0)), obj("square", "blue", (2, 2))))
    swapped = SceneSpec((obj("circle", "blue", (0, 0)), obj("square", "red", (2, 2))))
    assert case_satisfied(case, right)
    assert not case_satisfied(case, swapped)


def test_position_predicate_loose_axis():
    case = position_case("left of")
    ok = SceneSpec((obj("circle", "red", (3, 0)), obj("square", "blue", (0, 2))))
    assert case_satisfied(case, ok)      # rows differ freely
    same_col = SceneSpec((obj("circle", "red", (0, 2)), obj("square", "blue", (3, 2))))
    assert not case_satisfied(case, same_col)
    above = position_case("above")
    assert case_satisfied(above, SceneSpec((obj("circle", "red", (0, 3)),
                                            obj("square", "blue", (2, 0)))))
    assert not case_satisfied(above, SceneSpec((obj("circle", "red", (2, 0)),
                                                obj("square", "blue", (0, 3)))))


def test_order_of_parsed_objects_is_irrelevant():
    case = binding_case()
    reordered = SceneSpec((obj("square", "blue", (2, 2)),
                           obj("circle", "red", (0, 0))))
    assert case_satisfied(case, reordered)


# ---- scene planting ----

def test_planted_scenes_agree_with_predicates():
    for case in make_cases(n_per_category=6, seed=3):
        rng = Stream(4, f"plant/{case.category}/{case.seed}")
        good = satisfying_scene(case, rng)
        bad = violating_scene(case, rng.derive("bad"))
        assert case_satisfied(case, good), case.prompt
        assert not case_satisfied(case, bad), case.prompt


def test_planted_self_test_is_perfect():
    rep = planted_self_test(n_per_category=6, seed=0)
    assert rep.n_checks == 2 * 6 * len(CATEGORIES)
    assert rep.mismatches == ()
    assert rep.agreement == 1.0


# ---- evaluate shape and plumbing ----

def test_evaluate_with_image_source_scores_and_diagnoses():
    cases = make_cases(n_per_category=2, seed=5)
    planted = {}
    for i, case in enumerate(cases):
        rng = Stream(6, f"img/{i}")
        scene = (satisfying_scene(case, rng) if i % 2 == 0
                 else violating_scene(case, rng))
        planted[case] = render(scene)
    rep = evaluate(None, cases, "planted",
                   image_source=lambda c, m: planted[c])
    assert rep.mode == "planted"
    assert rep.n_cases == len(cases)
    assert set(rep.scores) == set(CATEGORIES)
    assert rep.overall == pytest.approx(
        sum(rep.scores.values()) / len(rep.scores))
    assert all(0.0 <= s <= 1.0 for s in rep.scores.values())
    assert len(rep.failures) == len(cases) // 2
    assert all("constraint unsatisfied" in f.reason or "unparseable" in f.reason
               for f in rep.failures)


def test_evaluate_scores_garbage_zero_without_raising():
    cases = make_cases(n_per_category=1, seed=7)
    noise = np.zeros((16, 16, 3)) + 0.77
    rep = evaluate(None, cases, "planted", image_source=lambda c, m: noise)
    assert rep.overall == 0.0
    assert len(rep.failures) == len(cases)
    assert all(f.reason.startswith("unparseable") for f in rep.failures)


def test_evaluate_rejects_unknown_mode_for_real_runs():
    stack = MTXpertStack.init(ModelConfig(d_model=16, n_layers=1, n_heads=2),
                              seed=0)
    with pytest.raises(ContractError, match="mode"):
        evaluate(stack, make_cases(1, 0), "bogus")


def test_evaluate_runs_pipeline_on_untrained_stack():
    stack = MTXpertStack.init(ModelConfig(d_model=16, n_layers=1, n_heads=2),
                              seed=0)
    cases = [c for c in make_cases(1, seed=2)
             if c.category in ("single_object", "colors")]
    rep = evaluate(stack, cases, "t2i_only", McotConfig(steps=4))
    assert rep.n_cases == 2
    assert set(rep.scores) == {"single_object", "colors"}
    assert rep.overall <= 0.5 or rep.overall >= 0.0


def test_report_format_lines():
    rep = planted_self_test(n_per_category=1, seed=0)
    assert rep.agreement == 1.0
    cases = make_cases(1, 0)
    planted = {c: render(satisfying_scene(c, Stream(0, c.category)))
               for c in cases}
    text = evaluate(None, cases, "planted",
                    image_source=lambda c, m: planted[c]).format()
    assert text.splitlines()[-1].startswith("overall")
    assert len(text.splitlines()) == len(CATEGORIES) + 1


def test_ablation_pairs_modes_on_identical_cases():
    stack = MTXpertStack.init(ModelConfig(d_model=16, n_layers=1, n_heads=2),
                              seed=1)
    cases = [c for c in make_cases(1, seed=3)
             if c.category in ("single_object", "two_object")]
    rep = ablation(stack, cases, McotConfig(steps=3, max_plan_tokens=24))
    assert set(rep.reports) == set(MODES)
    assert rep.n_cases == len(cases)
    for r in rep.reports.values():
        assert r.n_cases == len(cases)
    table = rep.format()
    lines = table.splitlines()
    assert len(lines) == 2 + 2       # header + 2 categories + overall
    assert all(m in lines[0] for m in MODES)
    assert lines[-1].startswith("overall")
    d = rep.to_dict()
    assert set(d["modes"]) == set(MODES)
