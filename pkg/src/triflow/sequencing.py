"""Multimodal sequences: segments, patchification, and assembly.

A sequence interleaves three kinds of contiguous segments: Text (discrete
token ids), CleanImage (patch tokens of an observed image), and NoisedImage
(patch tokens of a rectified-flow interpolant at one timestep t). Assembly
produces the [N, d] embedding matrix (text rows via the embedding table,
image rows via the patch projection) together with the supervision masks:
LM positions (text positions whose target is the next token in the same
segment) and RF positions (all NoisedImage rows).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor


class SegmentKind(Enum):
    TEXT = "text"
    CLEAN_IMAGE = "clean_image"
    NOISED_IMAGE = "noised_image"


@dataclass
class Segment:
    """One contiguous run of same-kind tokens: [start, start+length)."""
    kind: SegmentKind
    start: int
    length: int
    t: float | None = None      # NoisedImage only
    rows: int | None = None     # image kinds: patch-grid geometry
    cols: int | None = None

    @property
    def stop(self) -> int:
        return self.start + self.length

    @property
    def is_image(self) -> bool:
        return self.kind in (SegmentKind.CLEAN_IMAGE, SegmentKind.NOISED_IMAGE)


# ---- patch grid ----


def image_to_rows(image: np.ndarray, p: int) -> np.ndarray:
    """[H,W,C] -> [(H/p)(W/p), p*p*C] raw patch rows, row-major patch order."""
    h, w, c = image.shape
    if h % p or w % p:
        raise ShapeError(f"patch size {p} does not divide image extents {h}x{w}")
    return (image.reshape(h // p, p, w // p, p, c)
                 .transpose(0, 2, 1, 3, 4)
                 .reshape((h // p) * (w // p), p * p * c))


def rows_to_image(rows: np.ndarray, h: int, w: int, c: int, p: int) -> np.ndarray:
    """Inverse spatial arrangement of image_to_rows."""
    if rows.shape != ((h // p) * (w // p), p * p * c):
        raise ShapeError(f"patch rows {rows.shape} do not match {h}x{w}x{c} at p={p}")
    return (rows.reshape(h // p, w // p, p, p, c)
                .transpose(0, 2, 1, 3, 4)
                .reshape(h, w, c))


@dataclass
class PatchGrid:
    """Image geometry plus the (trained) linear patch projection.

    The unprojection is the pseudo-inverse of the projection, derived on
    demand so unpatchify stays the exact inverse while the projection trains.
    """
    height: int
    width: int
    channels: int
    p: int
    proj: Tensor  # [p*p*C, d]

    def __post_init__(self):
        if self.height % self.p or self.width % self.p:
            raise ShapeError(
                f"patch size {self.p} does not divide {self.height}x{self.width}")
        if self.proj.shape[0] != self.raw_dim:
            raise ShapeError(
                f"projection rows {self.proj.shape[0]} != patch dim {self.raw_dim}")

    @property
    def raw_dim(self) -> int:
        return self.p * self.p * self.channels

    @property
    def token_count(self) -> int:
        return (self.height // self.p) * (self.width // self.p)

    @property
    def grid_rows(self) -> int:
        return self.height // self.p

    @property
    def grid_cols(self) -> int:
        return self.width // self.p

    @property
    def unproj(self) -> np.ndarray:
        """[d, p*p*C] pseudo-inverse of the projection."""
        return np.linalg.pinv(self.proj.data)


def patchify(image: np.ndarray, grid: PatchGrid) -> Tensor:
    """Project an [H,W,C] image into [(H/p)(W/p), d] patch tokens."""
    if image.shape != (grid.height, grid.width, grid.channels):
        raise ShapeError(f"image {image.shape} does not match grid "
                         f"{grid.height}x{grid.width}x{grid.channels}")
    rows = image_to_rows(np.asarray(image, dtype=np.float64), grid.p)
    return T.matmul(Tensor(rows), grid.proj)


def unpatchify(tokens, grid: PatchGrid) -> np.ndarray:
    """Map [(H/p)(W/p), d] patch tokens back to an [H,W,C] image."""
    data = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    if data.shape[0] != grid.token_count:
        raise ShapeError(f"{data.shape[0]} tokens for a {grid.token_count}-token grid")
    rows = data @ grid.unproj
    return rows_to_image(rows, grid.height, grid.width, grid.channels, grid.p)


# ---- assembly parts ----


@dataclass
class TextPart:
    """Discrete tokens; lm_from = local index of the first supervised target
    token (1 supervises every in-segment target, None disables supervision)."""
    ids: list[int]
    lm_from: int | None = 1


@dataclass
class CleanImagePart:
    """An observed image, optionally with a per-patch heatmap target."""
    image: np.ndarray
    heatmap_target: np.ndarray | None = None


@dataclass
class NoisedImagePart:
    """A rectified-flow interpolant at timestep t, optionally with its
    velocity target image (x - eps) for training."""
    x_t: np.ndarray
    t: float | None = None
    velocity_target: np.ndarray | None = None


@dataclass
class MultimodalSequence:
    """Ordered segments tiling [0, N) plus embeddings and loss masks."""
    segments: list[Segment]
    embeddings: Tensor                # [N, d]
    token_ids: np.ndarray             # [N] int64; -1 on image rows
    lm_mask: np.ndarray               # [N] bool: position supervised
    lm_targets: np.ndarray            # [N] int64; -1 where unsupervised
    rf_mask: np.ndarray               # [N] bool: NoisedImage rows
    velocity_targets: list = field(default_factory=list)  # (segment_idx, rows [T, p*p*C])
    heatmap_targets: list = field(default_factory=list)   # (segment_idx, flat [T])

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[0])

    def rows_of(self, kind: SegmentKind) -> np.ndarray:
        """Global row indices of all segments of one kind, in order."""
        idx = [np.arange(s.start, s.stop) for s in self.segments if s.kind == kind]
        return np.concatenate(idx) if idx else np.empty(0, dtype=np.int64)


def assemble(parts: list, table: Tensor, grid: PatchGrid) -> MultimodalSequence:
    """Build a MultimodalSequence from ordered parts.

    Text rows come from the embedding table, image rows from the patch
    projection; gradients flow into both. LM supervision never crosses a
    segment boundary; RF supervision covers exactly the NoisedImage rows.
    """
    if not parts:
        raise ContractError("assemble: empty part list")

    segments: list[Segment] = []
    pieces: list[Tensor] = []
    index_lists: list[np.ndarray] = []
    ids_out: list[np.ndarray] = []
    lm_mask_parts: list[np.ndarray] = []
    lm_tgt_parts: list[np.ndarray] = []
    velocity_targets = []
    heatmap_targets = []
    cursor = 0

    for part in parts:
        if isinstance(part, TextPart):
            n = len(part.ids)
            if n == 0:
                raise ContractError("assemble: empty text part")
            ids = np.asarray(part.ids, dtype=np.int64)
            segments.append(Segment(SegmentKind.TEXT, cursor, n))
            pieces.append(T.embedding(table, ids))
            ids_out.append(ids)
            mask = np.zeros(n, dtype=bool)
            tgt = np.full(n, -1, dtype=np.int64)
            if part.lm_from is not None and n > 1:
                first = max(int(part.lm_from), 1)
                if first < n:
                    mask[first - 1:n - 1] = True
                    tgt[first - 1:n - 1] = ids[first:]
            lm_mask_parts.append(mask)
            lm_tgt_parts.append(tgt)
        elif isinstance(part, (CleanImagePart, NoisedImagePart)):
            noised = isinstance(part, NoisedImagePart)
            image = part.x_t if noised else part.image
            t_val = None
            if noised:
                if part.t is None:
                    raise ContractError("assemble: NoisedImage part without a timestep t")
                t_val = float(part.t)
                if not 0.0 <= t_val <= 1.0:
                    raise ContractError(f"assemble: timestep {t_val} outside [0, 1]")
            tokens = patchify(np.asarray(image, dtype=np.float64), grid)
            n = grid.token_count
            seg = Segment(SegmentKind.NOISED_IMAGE if noised else SegmentKind.CLEAN_IMAGE,
                          cursor, n, t=t_val, rows=grid.grid_rows, cols=grid.grid_cols)
            segments.append(seg)
            pieces.append(tokens)
            ids_out.append(np.full(n, -1, dtype=np.int64))
            lm_mask_parts.append(np.zeros(n, dtype=bool))
            lm_tgt_parts.append(np.full(n, -1, dtype=np.int64))
            seg_idx = len(segments) - 1
            if noised and part.velocity_target is not None:
                velocity_targets.append(
                    (seg_idx, image_to_rows(np.asarray(part.velocity_target,
                                                       dtype=np.float64), grid.p)))
            if not noised and part.heatmap_target is not None:
                hm = np.asarray(part.heatmap_target, dtype=np.float64)
                if hm.shape != (grid.grid_rows, grid.grid_cols):
                    raise ShapeError(f"heatmap target {hm.shape} vs patch grid "
                                     f"{grid.grid_rows}x{grid.grid_cols}")
                heatmap_targets.append((seg_idx, hm.reshape(-1)))
        else:
            raise ContractError(f"assemble: unknown part type {type(part).__name__}")
        index_lists.append(np.arange(cursor, cursor + n))
        cursor += n

    embeddings = T.combine_rows(pieces, index_lists, cursor)
    token_ids = np.concatenate(ids_out)
    lm_mask = np.concatenate(lm_mask_parts)
    lm_targets = np.concatenate(lm_tgt_parts)
    rf_mask = np.zeros(cursor, dtype=bool)
    for seg in segments:
        if seg.kind == SegmentKind.NOISED_IMAGE:
            rf_mask[seg.start:seg.stop] = True

    return MultimodalSequence(segments, embeddings, token_ids, lm_mask,
                              lm_targets, rf_mask, velocity_targets,
                              heatmap_targets)
