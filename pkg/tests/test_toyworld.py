"""Toy world: golden rasters, caption round trips, oracle tolerances, manifests."""

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from triflow.errors import ContractError, PlanParseError
from triflow.rng import Stream
from triflow.toyworld import (BBox, CorrectionMask, DatasetConfig, DefectSpec,
                              ObjectSpec, ParseFailure, SceneSpec, caption_dense,
                              caption_short, corrupt, layout, load_manifest,
                              make_dataset, make_defect, oracle_parse,
                              parse_caption_dense, parse_caption_short,
                              patch_cover, pixels_patch_cover, qa_pairs,
                              random_mask, render, sample_scene, save_manifest,
                              scene_hash, shape_template, PALETTE)
from triflow.vocab import Vocabulary, tokenize

VOCAB = Vocabulary.default()


def obj(shape="circle", color="red", cell=(0, 0), size="large"):
    return ObjectSpec(shape=shape, color=color, cell=cell, size=size)


# ---- rendering ----

def test_empty_scene_is_uniform_background():
    img = render(SceneSpec(()))
    assert img.shape == (16, 16, 3)
    assert (img == -1.0).all()


def test_golden_raster_large_red_square_cell00():
    img = render(SceneSpec((obj("square", "red", (0, 0), "large"),)))
    want = np.full((16, 16, 3), -1.0)
    want[0:4, 0:4] = (1.0, -1.0, -1.0)  # documented: k=4 block at cell origin
    assert np.array_equal(img, want)


def test_golden_raster_small_circle_and_triangle():
    img = render(SceneSpec((obj("circle", "blue", (1, 2), "small"),
                            obj("triangle", "white", (3, 0), "large"))))
    want = np.full((16, 16, 3), -1.0)
    # small circle: 3x3 block at (4,8) minus its four corners
    for r, c in ((0, 1), (1, 0), (1, 1), (1, 2), (2, 1)):
        want[4 + r, 8 + c] = (-1.0, -1.0, 1.0)
    # large triangle: col <= row wedge at (12,0)
    for r in range(4):
        for c in range(r + 1):
            want[12 + r, 0 + c] = (1.0, 1.0, 1.0)
    assert np.array_equal(img, want)


def test_shape_pixel_counts():
    counts = {("square", "large"): 16, ("circle", "large"): 12,
              ("triangle", "large"): 10, ("square", "small"): 9,
              ("circle", "small"): 5, ("triangle", "small"): 6}
    for (shape, size), n in counts.items():
        assert shape_template(shape, size).sum() == n


def test_palette_separation():
    names = list(PALETTE)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            d = np.abs(np.asarray(PALETTE[a]) - np.asarray(PALETTE[b])).max()
            assert d >= 1.0, (a, b)
    bg_d = min(np.abs(np.asarray(PALETTE[n]) - (-1.0)).max() for n in names)
    assert bg_d >= 1.0


def test_render_injective_on_single_object_scenes():
    seen = {}
    for shape in ("circle", "square", "triangle"):
        for color in PALETTE:
            for r in range(4):
                for c in range(4):
                    for size in ("large", "small"):
                        s = SceneSpec((obj(shape, color, (r, c), size),))
                        key = render(s).tobytes()
                        assert key not in seen, (s, seen[key])
                        seen[key] = s
    assert len(seen) == 3 * 8 * 16 * 2


def test_scene_validation():
    with pytest.raises(ContractError, match="share a cell"):
        SceneSpec((obj(cell=(1, 1)), obj("square", "blue", (1, 1))))
    with pytest.raises(ContractError, match="at most 3"):
        SceneSpec(tuple(obj(cell=(0, i)) for i in range(4)))
    with pytest.raises(ContractError, match="unknown shape"):
        ObjectSpec(shape="star", color="red", cell=(0, 0), size="large")
    with pytest.raises(ContractError, match="grid"):
        ObjectSpec(shape="circle", color="red", cell=(4, 0), size="large")


def test_scene_hash_stable_and_order_free():
    a = SceneSpec((obj(cell=(0, 0)), obj("square", "blue", (2, 2))))
    b = SceneSpec((obj("square", "blue", (2, 2)), obj(cell=(0, 0))))
    assert scene_hash(a) == scene_hash(b)
    assert scene_hash(a) != scene_hash(SceneSpec((obj(cell=(0, 1)),)))
    assert SceneSpec.from_dict(a.to_dict()) == a


# ---- boxes ----

def test_layout_closed_form():
    boxes = layout(SceneSpec((obj("square", "red", (1, 2), "large"),
                              obj("circle", "blue", (3, 3), "small"))))
    assert boxes[0].quantized() == (50, 25, 75, 50)
    assert boxes[0].label == ("red", "square")
    assert boxes[1].quantized() == (75, 75, 94, 94)  # 12/16 .. 15/16
    assert boxes[1].label == ("blue", "circle")


def test_boxes_of_distinct_cells_do_not_overlap():
    rng = Stream(1, "boxes")
    for _ in range(50):
        scene = sample_scene(rng)
        boxes = layout(scene)
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a, b = boxes[i], boxes[j]
                sep = (a.x1 <= b.x0 or b.x1 <= a.x0
                       or a.y1 <= b.y0 or b.y1 <= a.y0)
                assert sep


def test_box_quantization_roundtrip():
    rng = Stream(2, "quant")
    for _ in range(200):
        scene = sample_scene(rng)
        for box in layout(scene):
            again = BBox.from_quantized(box.quantized(), label=box.label)
            assert again.quantized() == box.quantized()
            assert max(abs(again.x0 - box.x0), abs(again.y0 - box.y0),
                       abs(again.x1 - box.x1), abs(again.y1 - box.y1)) <= 0.005


def test_degenerate_box_rejected():
    with pytest.raises(ContractError, match="degenerate"):
        BBox(0.5, 0.2, 0.5, 0.8)


# ---- captions ----

def test_caption_short_grammar():
    s1 = SceneSpec((obj("circle", "red", (0, 0)),))
    assert caption_short(s1) == "a red circle"
    assert len(caption_short(s1).split()) == 3
    s2 = SceneSpec((obj("circle", "red", (0, 0)),
                    obj("square", "blue", (2, 2), "small")))
    assert caption_short(s2) == "a red circle and a blue square"
    s3 = SceneSpec((obj("circle", "red", (0, 0)),
                    obj("circle", "red", (1, 1), "small"),
                    obj("square", "blue", (2, 2))))
    assert caption_short(s3) == "two red circles and a blue square"


def test_caption_dense_example_and_roundtrip():
    s = SceneSpec((obj("circle", "red", (0, 0), "large"),
                   obj("square", "blue", (3, 2), "small")))
    dense = caption_dense(s)
    assert dense == ("the background is black . "
                     "a large red circle in the top left cell . "
                     "a small blue square in the bottom midright cell . "
                     "the red circle is above the blue square .")
    assert parse_caption_dense(dense) == s


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_caption_roundtrips_random_scenes(seed):
    scene = sample_scene(Stream(seed, "caproll"))
    assert parse_caption_dense(caption_dense(scene)) == scene
    groups = parse_caption_short(caption_short(scene))
    want = {}
    for o in scene.objects:
        want[(o.color, o.shape)] = want.get((o.color, o.shape), 0) + 1
    assert {(c, s): n for n, c, s in groups} == want
    # every caption word must tokenize
    tokenize(caption_dense(scene), VOCAB)
    tokenize(caption_short(scene), VOCAB)


def test_caption_determinism_and_empty_error():
    s = sample_scene(Stream(9, "det"))
    assert caption_dense(s) == caption_dense(s)
    with pytest.raises(ContractError):
        caption_short(SceneSpec(()))
    with pytest.raises(PlanParseError):
        parse_caption_dense("the red circle is beside the square .")
    with pytest.raises(PlanParseError):
        parse_caption_short("red the circle")


def test_qa_pairs_unambiguous_and_tokenizable():
    s = SceneSpec((obj("circle", "red", (0, 0)),
                   obj("square", "blue", (2, 3), "small")))
    pairs = dict(qa_pairs(s))
    assert pairs["how many objects ?"] == "two"
    assert pairs["what color is the circle ?"] == "red"
    assert pairs["what shape is the blue object ?"] == "square"
    assert pairs["what shape is in the top left cell ?"] == "circle"
    assert pairs["what color is in the lower right cell ?"] == "blue"
    for q, a in qa_pairs(s):
        tokenize(q, VOCAB)
        assert len(tokenize(a, VOCAB)) == 1
    # ambiguous attributes are not asked
    twin = SceneSpec((obj("circle", "red", (0, 0)),
                      obj("circle", "blue", (1, 1))))
    questions = [q for q, _ in qa_pairs(twin)]
    assert "what color is the circle ?" not in questions


# ---- defects ----

def test_noise_blot_single_patch_heatmap():
    s = SceneSpec((obj("square", "red", (0, 0)),))
    defect = DefectSpec(target=0, kind="noise_blot", region=(2, 2, 4, 4))
    img, hm = corrupt(s, defect, Stream(3, "blot"))
    assert hm.shape == (8, 8)
    assert hm.sum() == 1.0 and hm[1, 1] == 1.0
    assert not np.array_equal(img[2:4, 2:4], render(s)[2:4, 2:4])
    outside = img.copy()
    outside[2:4, 2:4] = render(s)[2:4, 2:4]
    assert np.array_equal(outside, render(s))


def test_color_swap_keeps_geometry():
    s = SceneSpec((obj("circle", "red", (1, 1)),))
    defect = DefectSpec(target=0, kind="color_swap", region=(4, 4, 8, 8))
    img, hm = corrupt(s, defect, Stream(4, "swap"))
    parsed = oracle_parse(img)
    assert isinstance(parsed, SceneSpec)
    assert parsed.objects[0].shape == "circle"
    assert parsed.objects[0].cell == (1, 1)
    assert parsed.objects[0].color != "red"
    assert layout(parsed)[0].quantized() == layout(s)[0].quantized()
    assert hm[2:4, 2:4].all()


def test_shape_erase_removes_object():
    s = SceneSpec((obj("square", "red", (0, 0)), obj("circle", "blue", (2, 2))))
    defect = DefectSpec(target=0, kind="shape_erase", region=(0, 0, 4, 4))
    img, _ = corrupt(s, defect, Stream(5, "erase"))
    parsed = oracle_parse(img)
    assert isinstance(parsed, SceneSpec) and len(parsed.objects) == 1
    assert parsed.objects[0].color == "blue"


def test_heatmap_equals_patch_cover():
    rng = Stream(6, "cover")
    for _ in range(50):
        scene = sample_scene(rng)
        defect = make_defect(scene, rng)
        _, hm = corrupt(scene, defect, rng)
        assert set(np.unique(hm)) <= {0.0, 1.0}
        assert np.array_equal(hm, patch_cover(defect.region))
        r0, c0, r1, c1 = defect.region
        box = scene.objects[defect.target].pixel_box()
        assert r0 < box[2] and box[0] < r1 and c0 < box[3] and box[1] < c1


def test_defect_validation():
    with pytest.raises(ContractError, match="unknown defect"):
        DefectSpec(target=0, kind="melt", region=(0, 0, 2, 2))
    with pytest.raises(ContractError, match="canvas"):
        DefectSpec(target=0, kind="noise_blot", region=(0, 0, 2, 17))
    s = SceneSpec((obj(),))
    with pytest.raises(ContractError, match="targets object"):
        corrupt(s, DefectSpec(target=2, kind="color_swap", region=(0, 0, 4, 4)),
                Stream(0, "x"))


# ---- masks ----

def test_random_mask_coverage_bounds():
    rng = Stream(7, "mask")
    for _ in range(10_000):
        m = random_mask((8, 8), rng)
        assert 0.05 <= m.coverage <= 0.60


def test_random_mask_deterministic():
    a = random_mask((8, 8), Stream(8, "m"))
    b = random_mask((8, 8), Stream(8, "m"))
    assert np.array_equal(a.grid, b.grid)


def test_segmentation_mask_covers_exactly_one_object():
    s = SceneSpec((obj("triangle", "red", (2, 1), "large"),))
    m = random_mask((8, 8), Stream(9, "seg"), scene=s, segmentation=True)
    assert np.array_equal(m.grid, pixels_patch_cover(s.objects[0].pixel_mask()))
    # large triangle at cell (2,1): pixels rows 8-11, cols 4-7, col<=row wedge
    want = np.zeros((8, 8), bool)
    want[4, 2] = True            # rows 8-9, cols 4-5: pixel (8,4)
    want[5, 2] = True
    want[5, 3] = True            # pixel (10,6),(11,6),(11,7)
    assert np.array_equal(m.grid, want)


def test_mask_serialization_roundtrip():
    m = random_mask((8, 8), Stream(10, "ser"))
    again = CorrectionMask.from_dict(json.loads(json.dumps(m.to_dict())))
    assert np.array_equal(again.grid, m.grid)


# ---- oracle ----

def test_oracle_roundtrip_10k_scenes():
    rng = Stream(11, "oracle")
    for _ in range(10_000):
        scene = sample_scene(rng)
        assert oracle_parse(render(scene)) == scene


def test_oracle_rejects_uniform_noise():
    rng = Stream(12, "noise")
    img = np.array([[[rng.u01() * 2 - 1 for _ in range(3)]
                     for _ in range(16)] for _ in range(16)])
    result = oracle_parse(img)
    assert isinstance(result, ParseFailure)
    assert result.reasons and not result


def test_oracle_noise_robustness_sweep():
    rng = Stream(13, "robust")
    for trial in range(200):
        scene = sample_scene(rng)
        noise = (np.array([rng.u01() for _ in range(16 * 16 * 3)])
                 .reshape(16, 16, 3) * 0.2 - 0.1)
        assert oracle_parse(render(scene) + noise) == scene


def test_oracle_geometry_and_empty():
    assert isinstance(oracle_parse(np.zeros((8, 8, 3))), ParseFailure)
    empty = oracle_parse(np.full((16, 16, 3), -1.0))
    assert isinstance(empty, SceneSpec) and empty.objects == ()


# ---- datasets ----

def test_manifest_deterministic_and_disjoint(tmp_path):
    cfg = DatasetConfig(n_t2i=16, n_i2t=8, n_plan=4, n_reflect=4,
                        n_correct=4, n_val=8)
    m1 = make_dataset(cfg, seed=5)
    m2 = make_dataset(cfg, seed=5)
    save_manifest(tmp_path / "a.json", m1)
    save_manifest(tmp_path / "b.json", m2)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert load_manifest(tmp_path / "a.json") == m1
    train_hashes = {r["hash"] for r in m1["train"]}
    val_hashes = {r["hash"] for r in m1["val"]}
    assert not (train_hashes & val_hashes)
    assert m1["counts"]["t2i"] == 16
    by_task = {}
    for r in m1["train"]:
        by_task[r["task"]] = by_task.get(r["task"], 0) + 1
    assert by_task == {"t2i": 16, "i2t": 8, "plan": 4, "reflect": 4, "correct": 4}


def test_default_ratio_is_8_to_1():
    cfg = DatasetConfig()
    assert cfg.n_t2i == 8 * cfg.n_i2t


def test_distinct_caption_mode():
    cfg = DatasetConfig(n_t2i=24, n_i2t=0, n_plan=0, n_reflect=0,
                        n_correct=0, n_val=0, distinct_captions=True,
                        dense_prompt_share=0.0)
    m = make_dataset(cfg, seed=1)
    shorts = [caption_short(SceneSpec.from_dict(r["scene"]))
              for r in m["train"]]
    assert len(set(shorts)) == len(shorts) == 24


def test_record_payloads():
    cfg = DatasetConfig(n_t2i=4, n_i2t=6, n_plan=3, n_reflect=3,
                        n_correct=3, n_val=2)
    m = make_dataset(cfg, seed=2)
    for r in m["train"]:
        scene = SceneSpec.from_dict(r["scene"])
        assert r["hash"] == scene_hash(scene)
        if r["task"] == "t2i":
            assert r["prompt"]
        elif r["task"] == "i2t":
            assert ("caption" in r) != ("question" in r)
        elif r["task"] == "plan":
            assert parse_caption_short(r["prompt"])
        else:
            d = DefectSpec.from_dict(r["defect"])
            assert d.target < len(scene.objects)
