"""Vocabulary and sequence assembly: round trips, masks, patch order."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import triflow.tensor as T
from triflow.errors import ContractError, ShapeError, UnknownWordError
from triflow.rng import Stream
from triflow.sequencing import (CleanImagePart, NoisedImagePart, PatchGrid,
                                SegmentKind, TextPart, assemble,
                                image_to_rows, patchify, rows_to_image,
                                unpatchify)
from triflow.vocab import (LEXICON, SPECIAL_TOKENS, VOCAB_SIZE, Vocabulary,
                           detokenize, tokenize)

VOCAB = Vocabulary.default()


def make_grid(d=16, h=16, w=16, c=3, p=2, seed=0):
    proj = T.Tensor(Stream(seed, "grid.proj").normal((p * p * c, d)) * 0.2,
                    requires_grad=True)
    return PatchGrid(h, w, c, p, proj)


def make_table(d=16, seed=1):
    return T.Tensor(Stream(seed, "table").normal((VOCAB_SIZE, d)) * 0.02,
                    requires_grad=True)


# ---- vocabulary ----

def test_vocab_size_and_density():
    assert len(VOCAB) == VOCAB_SIZE
    assert [VOCAB.token(VOCAB.id(t)) for t in VOCAB.tokens] == VOCAB.tokens
    assert VOCAB.special_ids == [0, 1, 2, 3, 4, 5]
    assert len(set(VOCAB.special_ids)) == 6
    assert [VOCAB.token(i) for i in VOCAB.special_ids] == SPECIAL_TOKENS


def test_tokenize_examples():
    assert tokenize("red circle", VOCAB) == [VOCAB.id("red"), VOCAB.id("circle")]
    assert tokenize("", VOCAB) == []
    with pytest.raises(UnknownWordError, match="pentagon"):
        tokenize("a red pentagon", VOCAB)


def test_coord_bins():
    assert VOCAB.token(VOCAB.coord_id(0)) == "@0"
    assert VOCAB.token(VOCAB.coord_id(100)) == "@100"
    assert VOCAB.coord_bin(VOCAB.coord_id(37)) == 37
    assert VOCAB.coord_bin(VOCAB.id("red")) is None
    with pytest.raises(ValueError):
        VOCAB.coord_id(101)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(LEXICON + ["@3", "@99", "<boi>"]), max_size=12))
def test_detokenize_roundtrip(words):
    text = " ".join(words)
    assert detokenize(tokenize(text, VOCAB), VOCAB) == text


def test_vocab_save_load_roundtrip(tmp_path):
    path = tmp_path / "vocab.txt"
    VOCAB.save(path)
    again = Vocabulary.load(path)
    assert again.tokens == VOCAB.tokens and again.n_special == VOCAB.n_special
    VOCAB.save(tmp_path / "vocab2.txt")
    assert (tmp_path / "vocab.txt").read_bytes() == (tmp_path / "vocab2.txt").read_bytes()


# ---- patch grid ----

def test_patchify_shape_arithmetic():
    grid = make_grid(d=16)
    img = Stream(2, "img").normal((16, 16, 3))
    tokens = patchify(img, grid)
    assert tokens.shape == (64, 16)
    assert grid.raw_dim == 12
    assert grid.token_count == 64


def test_patchify_rejects_indivisible_dims():
    proj = T.Tensor(np.zeros((27, 8)))
    with pytest.raises(ShapeError, match="15x15"):
        PatchGrid(15, 15, 3, 2, T.Tensor(np.zeros((12, 8))))
    with pytest.raises(ShapeError):
        image_to_rows(np.zeros((15, 16, 3)), 2)
    del proj


def test_unpatchify_pinv_roundtrip():
    for d in (12, 16, 64):
        grid = make_grid(d=d, seed=d)
        img = np.clip(Stream(3, f"img{d}").normal((16, 16, 3)), -1, 1)
        rec = unpatchify(patchify(img, grid), grid)
        assert np.abs(rec - img).max() < 1e-9


def test_unpatchify_count_mismatch():
    grid = make_grid()
    with pytest.raises(ShapeError, match="63"):
        unpatchify(np.zeros((63, 16)), grid)


def test_patch_order_single_pixel_locality():
    st_px = Stream(4, "px")
    for _ in range(20):
        img = st_px.normal((16, 16, 3))
        rows = image_to_rows(img, 2)
        r, c = st_px.below(8), st_px.below(8)
        img2 = img.copy()
        img2[2 * r + st_px.below(2), 2 * c + st_px.below(2), st_px.below(3)] += 1.0
        rows2 = image_to_rows(img2, 2)
        changed = np.nonzero((rows != rows2).any(axis=1))[0]
        assert changed.tolist() == [r * 8 + c]
    # and the exact inverse
    img = st_px.normal((16, 16, 3))
    assert np.array_equal(rows_to_image(image_to_rows(img, 2), 16, 16, 3, 2), img)


# ---- assembly ----

def test_assemble_t2i_layout_masks():
    grid, table = make_grid(), make_table()
    x_t = Stream(5, "xt").normal((16, 16, 3))
    seq = assemble([TextPart([10, 11, 12]),
                    NoisedImagePart(x_t, t=0.5)], table, grid)
    assert seq.length == 67
    assert seq.embeddings.shape == (67, 16)
    assert np.nonzero(seq.lm_mask)[0].tolist() == [0, 1]
    assert seq.lm_targets[0] == 11 and seq.lm_targets[1] == 12
    assert np.nonzero(seq.rf_mask)[0].tolist() == list(range(3, 67))
    assert seq.segments[1].t == 0.5
    assert (seq.token_ids[3:] == -1).all()


def test_assemble_i2t_layout_masks_caption_only():
    grid, table = make_grid(), make_table()
    img = Stream(6, "ci").normal((16, 16, 3))
    seq = assemble([TextPart([7, 8], lm_from=None),
                    CleanImagePart(img),
                    TextPart([1, 20, 21, 22, 0])], table, grid)
    assert seq.length == 2 + 64 + 5
    lm_rows = np.nonzero(seq.lm_mask)[0]
    assert lm_rows.tolist() == [66, 67, 68, 69]  # caption span only
    assert seq.lm_targets[66] == 20
    assert not seq.rf_mask.any()


def test_assemble_lm_from_midpoint():
    grid, table = make_grid(), make_table()
    # supervise targets starting at local index 3 (answer tokens)
    seq = assemble([TextPart([5, 6, 7, 8, 9], lm_from=3)], table, grid)
    assert np.nonzero(seq.lm_mask)[0].tolist() == [2, 3]
    assert seq.lm_targets[2] == 8 and seq.lm_targets[3] == 9
    # lm_from beyond the segment: nothing supervised
    seq = assemble([TextPart([5, 6], lm_from=5)], table, grid)
    assert not seq.lm_mask.any()


def test_assemble_single_token_text_has_no_lm():
    grid, table = make_grid(), make_table()
    seq = assemble([TextPart([3])], table, grid)
    assert not seq.lm_mask.any()


def test_assemble_errors():
    grid, table = make_grid(), make_table()
    with pytest.raises(ContractError, match="empty part list"):
        assemble([], table, grid)
    x = np.zeros((16, 16, 3))
    with pytest.raises(ContractError, match="without a timestep"):
        assemble([NoisedImagePart(x)], table, grid)
    with pytest.raises(ContractError, match="outside"):
        assemble([NoisedImagePart(x, t=1.5)], table, grid)


def test_assemble_attaches_targets():
    grid, table = make_grid(), make_table()
    x = Stream(7, "x").normal((16, 16, 3))
    vel = Stream(7, "v").normal((16, 16, 3))
    hm = np.zeros((8, 8))
    hm[2, 3] = 1.0
    seq = assemble([CleanImagePart(x, heatmap_target=hm),
                    NoisedImagePart(x, t=0.25, velocity_target=vel)], table, grid)
    (seg_idx, rows), = seq.velocity_targets
    assert seg_idx == 1 and rows.shape == (64, 12)
    assert np.array_equal(rows, image_to_rows(vel, 2))
    (hseg, hflat), = seq.heatmap_targets
    assert hseg == 0 and hflat[2 * 8 + 3] == 1.0 and hflat.sum() == 1.0


def test_assemble_gradients_reach_table_and_projection():
    grid, table = make_grid(), make_table()
    img = Stream(8, "gi").normal((16, 16, 3))
    with T.ComputationTape() as tape:
        seq = assemble([TextPart([9, 9, 4]), CleanImagePart(img)], table, grid)
        loss = T.sum_all(seq.embeddings)
    T.backward(tape, loss)
    assert table.grad is not None and table.grad[9].sum() != 0.0
    assert grid.proj.grad is not None and np.abs(grid.proj.grad).sum() > 0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["text", "clean", "noised"]), min_size=1, max_size=5),
       st.integers(0, 2**31 - 1))
def test_assemble_tiling_and_mask_disjointness(kinds, seed):
    grid, table = make_grid(d=8), make_table(d=8)
    rng = Stream(seed, "hyp")
    parts = []
    for k in kinds:
        if k == "text":
            n = rng.randint(1, 4)
            parts.append(TextPart([rng.below(VOCAB_SIZE) for _ in range(n)]))
        elif k == "clean":
            parts.append(CleanImagePart(rng.normal((16, 16, 3))))
        else:
            parts.append(NoisedImagePart(rng.normal((16, 16, 3)), t=rng.u01()))
    seq = assemble(parts, table, grid)
    # segments tile [0, N) in order without gaps or overlap
    cursor = 0
    for seg in seq.segments:
        assert seg.start == cursor and seg.length >= 1
        cursor = seg.stop
    assert cursor == seq.length
    # LM and RF masks never overlap
    assert not (seq.lm_mask & seq.rf_mask).any()
    # image segments carry their geometry
    for seg in seq.segments:
        if seg.is_image:
            assert seg.rows * seg.cols == seg.length
