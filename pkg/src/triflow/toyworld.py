"""Procedural 16x16 shape world with exact rendering and exact parsing.

Raster rules (all deterministic, no anti-aliasing):
  - canvas 16x16x3 in [-1,1], background black (-1,-1,-1)
  - 4x4 grid of 4x4-pixel cells; an object occupies one cell
  - size: large -> k=4, small -> k=3, anchored at the cell's top-left pixel
  - square: all k*k pixels; circle: k*k minus the four corners;
    triangle: pixels with col <= row (lower-left wedge)
  - colors: 8-entry palette with channel values in {-1, 0, 1}, pairwise
    L-infinity distance >= 1.0

The oracle parser inverts rendering exactly on clean images and with
documented tolerances on generated ones: a pixel is foreground when its
L-infinity distance from background exceeds 0.3; a cell with >= 3 foreground
pixels must match a shape template with IoU >= 0.7 and a palette color with
mean L-infinity error <= 0.3.
"""

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from triflow.errors import ContractError, PlanParseError
from triflow.rng import Stream

CANVAS = 16
CELL = 4
GRID = 4
PATCH = 2
HEAT_GRID = CANVAS // PATCH

PALETTE = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "cyan": (-1.0, 1.0, 1.0),
    "magenta": (1.0, -1.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.0, -1.0),
}
BACKGROUND = (-1.0, -1.0, -1.0)
SHAPES = ("circle", "square", "triangle")
SIZES = {"large": 4, "small": 3}
ROW_WORDS = ("top", "upper", "lower", "bottom")
COL_WORDS = ("left", "midleft", "midright", "right")
NUMBER_WORDS = {1: "one", 2: "two", 3: "three"}
PLURALS = {"circle": "circles", "square": "squares", "triangle": "triangles"}
SINGULARS = {v: k for k, v in PLURALS.items()}
DEFECT_KINDS = ("color_swap", "shape_erase", "noise_blot")


def shape_template(shape: str, size: str) -> np.ndarray:
    """Cell-local boolean stencil [CELL, CELL], anchored top-left."""
    k = SIZES[size]
    cell = np.zeros((CELL, CELL), dtype=bool)
    if shape == "square":
        cell[:k, :k] = True
    elif shape == "circle":
        cell[:k, :k] = True
        for r, c in ((0, 0), (0, k - 1), (k - 1, 0), (k - 1, k - 1)):
            cell[r, c] = False
    elif shape == "triangle":
        for r in range(k):
            cell[r, : r + 1] = True
    else:
        raise ContractError(f"unknown shape {shape!r}")
    return cell


@dataclass(frozen=True)
class ObjectSpec:
    """One colored shape sitting in one grid cell."""

    shape: str
    color: str
    cell: tuple
    size: str

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ContractError(f"unknown shape {self.shape!r}")
        if self.color not in PALETTE:
            raise ContractError(f"unknown color {self.color!r}")
        if self.size not in SIZES:
            raise ContractError(f"unknown size {self.size!r}")
        r, c = self.cell
        if not (0 <= r < GRID and 0 <= c < GRID):
            raise ContractError(f"cell {self.cell} outside the {GRID}x{GRID} grid")
        object.__setattr__(self, "cell", (int(r), int(c)))

    def pixel_box(self) -> tuple:
        """Half-open pixel rectangle (r0, c0, r1, c1) of the object's extent."""
        k = SIZES[self.size]
        r0, c0 = self.cell[0] * CELL, self.cell[1] * CELL
        return (r0, c0, r0 + k, c0 + k)

    def pixel_mask(self) -> np.ndarray:
        """Canvas-sized boolean mask of the object's exact pixels."""
        mask = np.zeros((CANVAS, CANVAS), dtype=bool)
        r0, c0 = self.cell[0] * CELL, self.cell[1] * CELL
        mask[r0:r0 + CELL, c0:c0 + CELL] = shape_template(self.shape, self.size)
        return mask

    def to_dict(self) -> dict:
        return {"shape": self.shape, "color": self.color,
                "cell": list(self.cell), "size": self.size}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectSpec":
        return cls(shape=d["shape"], color=d["color"],
                   cell=tuple(d["cell"]), size=d["size"])


@dataclass(frozen=True)
class SceneSpec:
    """Up to three objects on a black background, canonically cell-ordered."""

    objects: tuple

    def __post_init__(self):
        objs = tuple(sorted(self.objects, key=lambda o: o.cell))
        if len(objs) > 3:
            raise ContractError(f"at most 3 objects, got {len(objs)}")
        cells = [o.cell for o in objs]
        if len(set(cells)) != len(cells):
            raise ContractError("two objects share a cell")
        object.__setattr__(self, "objects", objs)

    def to_dict(self) -> dict:
        return {"objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(tuple(ObjectSpec.from_dict(o) for o in d["objects"]))


def scene_hash(scene: SceneSpec) -> str:
    blob = json.dumps(scene.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def render(scene: SceneSpec) -> np.ndarray:
    """Rasterize to [16,16,3] per the documented rules."""
    image = np.full((CANVAS, CANVAS, 3), BACKGROUND, dtype=np.float64)
    for obj in scene.objects:
        image[obj.pixel_mask()] = PALETTE[obj.color]
    return image


# ---- bounding boxes ----


@dataclass(frozen=True)
class BBox:
    """Normalized tight box with the owning object's label words."""

    x0: float
    y0: float
    x1: float
    y1: float
    label: tuple = ()

    def __post_init__(self):
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise ContractError(
                f"degenerate box ({self.x0},{self.y0},{self.x1},{self.y1})")

    def quantized(self) -> tuple:
        """Corner coordinates as integer percent bins 0..100."""
        return tuple(int(round(v * 100))
                     for v in (self.x0, self.y0, self.x1, self.y1))

    @classmethod
    def from_quantized(cls, bins: tuple, label: tuple = ()) -> "BBox":
        x0, y0, x1, y1 = (b / 100.0 for b in bins)
        return cls(x0, y0, x1, y1, label=tuple(label))


def layout(scene: SceneSpec) -> list:
    """One tight normalized box per object, in canonical scene order."""
    boxes = []
    for obj in scene.objects:
        r0, c0, r1, c1 = obj.pixel_box()
        boxes.append(BBox(x0=c0 / CANVAS, y0=r0 / CANVAS,
                          x1=c1 / CANVAS, y1=r1 / CANVAS,
                          label=(obj.color, obj.shape)))
    return boxes


# ---- captions ----


def _grouped(scene: SceneSpec) -> list:
    """(count, color, shape) groups in first-appearance order."""
    groups, order = {}, []
    for obj in scene.objects:
        key = (obj.color, obj.shape)
        if key not in groups:
            groups[key] = 0
            order.append(key)
        groups[key] += 1
    return [(groups[k], k[0], k[1]) for k in order]


def _group_phrase(count: int, color: str, shape: str) -> str:
    if count == 1:
        return f"a {color} {shape}"
    return f"{NUMBER_WORDS[count]} {color} {PLURALS[shape]}"


def caption_short(scene: SceneSpec) -> str:
    """Minimal description: articles, colors, shapes, counts."""
    if not scene.objects:
        raise ContractError("cannot caption an empty scene")
    phrases = [_group_phrase(*g) for g in _grouped(scene)]
    if len(phrases) == 1:
        return phrases[0]
    return " , ".join(phrases[:-1]) + " and " + phrases[-1]


def position_phrase(cell: tuple) -> str:
    return f"{ROW_WORDS[cell[0]]} {COL_WORDS[cell[1]]}"


def caption_dense(scene: SceneSpec) -> str:
    """Exhaustive description: background, size, color, shape, cell, relation."""
    if not scene.objects:
        raise ContractError("cannot caption an empty scene")
    sentences = ["the background is black"]
    for obj in scene.objects:
        sentences.append(f"a {obj.size} {obj.color} {obj.shape} in the "
                         f"{position_phrase(obj.cell)} cell")
    if len(scene.objects) >= 2:
        a, b = scene.objects[0], scene.objects[1]
        if a.cell[0] < b.cell[0]:
            sentences.append(f"the {a.color} {a.shape} is above the "
                             f"{b.color} {b.shape}")
        elif a.cell[0] > b.cell[0]:
            sentences.append(f"the {a.color} {a.shape} is below the "
                             f"{b.color} {b.shape}")
    return " . ".join(sentences) + " ."


def caption_relation(scene: SceneSpec) -> str:
    """Two-object relation prompt; horizontal relation wins when both apply."""
    if len(scene.objects) != 2:
        raise ContractError("relation prompts need exactly two objects")
    a, b = scene.objects
    if a.cell[1] < b.cell[1]:
        rel = "left of"
    elif a.cell[1] > b.cell[1]:
        rel = "right of"
    elif a.cell[0] < b.cell[0]:
        rel = "above"
    else:
        rel = "below"
    return f"a {a.color} {a.shape} {rel} a {b.color} {b.shape}"


def parse_caption_short(text: str) -> list:
    """Inverse of caption_short up to positions: (count, color, shape) groups."""
    words = text.split()
    groups, i = [], 0
    while i < len(words):
        if words[i] in (",", "and"):
            i += 1
            continue
        if words[i] == "a":
            count = 1
        else:
            numbers = {v: k for k, v in NUMBER_WORDS.items()}
            if words[i] not in numbers:
                raise PlanParseError(f"expected article or count, got {words[i]!r}",
                                     raw_tokens=words)
            count = numbers[words[i]]
        if i + 2 >= len(words):
            raise PlanParseError("truncated group", raw_tokens=words)
        color, shape = words[i + 1], words[i + 2]
        shape = SINGULARS.get(shape, shape)
        if color not in PALETTE or shape not in SHAPES:
            raise PlanParseError(f"bad group {words[i:i + 3]}", raw_tokens=words)
        groups.append((count, color, shape))
        i += 3
    if not groups:
        raise PlanParseError("no object groups found", raw_tokens=words)
    return groups


def parse_caption_dense(text: str) -> SceneSpec:
    """Exact inverse of caption_dense; relation sentences are checked loosely."""
    words = text.split()
    sentences, current = [], []
    for w in words:
        if w == ".":
            if current:
                sentences.append(current)
            current = []
        else:
            current.append(w)
    if current:
        sentences.append(current)
    objects = []
    for s in sentences:
        if s[:3] == ["the", "background", "is"]:
            continue
        if len(s) == 9 and s[0] == "a" and s[4:6] == ["in", "the"] and s[8] == "cell":
            size, color, shape = s[1], s[2], s[3]
            if (size not in SIZES or color not in PALETTE or shape not in SHAPES
                    or s[6] not in ROW_WORDS or s[7] not in COL_WORDS):
                raise PlanParseError(f"bad object sentence {' '.join(s)}",
                                     raw_tokens=words)
            cell = (ROW_WORDS.index(s[6]), COL_WORDS.index(s[7]))
            objects.append(ObjectSpec(shape=shape, color=color, cell=cell,
                                      size=size))
        elif s[0] == "the" and ("above" in s or "below" in s):
            continue
        else:
            raise PlanParseError(f"unrecognized sentence {' '.join(s)}",
                                 raw_tokens=words)
    if not objects:
        raise PlanParseError("no object sentences found", raw_tokens=words)
    return SceneSpec(tuple(objects))


def qa_pairs(scene: SceneSpec) -> list:
    """Unambiguous single-answer-token questions about the scene."""
    pairs = [("how many objects ?", NUMBER_WORDS[len(scene.objects)])]
    shape_counts = {}
    color_counts = {}
    for obj in scene.objects:
        shape_counts[obj.shape] = shape_counts.get(obj.shape, 0) + 1
        color_counts[obj.color] = color_counts.get(obj.color, 0) + 1
    for obj in scene.objects:
        if shape_counts[obj.shape] == 1:
            pairs.append((f"what color is the {obj.shape} ?", obj.color))
        if color_counts[obj.color] == 1:
            pairs.append((f"what shape is the {obj.color} object ?", obj.shape))
        pairs.append((f"what shape is in the {position_phrase(obj.cell)} cell ?",
                      obj.shape))
        pairs.append((f"what color is in the {position_phrase(obj.cell)} cell ?",
                      obj.color))
    return pairs


# ---- defects and masks ----


@dataclass(frozen=True)
class DefectSpec:
    """A deliberate rendering flaw within one object's neighborhood."""

    target: int
    kind: str
    region: tuple  # half-open pixel rect (r0, c0, r1, c1)

    def __post_init__(self):
        if self.kind not in DEFECT_KINDS:
            raise ContractError(f"unknown defect kind {self.kind!r}")
        r0, c0, r1, c1 = self.region
        if not (0 <= r0 < r1 <= CANVAS and 0 <= c0 < c1 <= CANVAS):
            raise ContractError(f"region {self.region} outside the canvas")

    def to_dict(self) -> dict:
        return {"target": self.target, "kind": self.kind,
                "region": list(self.region)}

    @classmethod
    def from_dict(cls, d: dict) -> "DefectSpec":
        return cls(target=d["target"], kind=d["kind"],
                   region=tuple(d["region"]))


def _overlaps(a: tuple, b: tuple) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def make_defect(scene: SceneSpec, rng: Stream) -> DefectSpec:
    """Draw a defect aimed at one object of the scene."""
    if not scene.objects:
        raise ContractError("cannot corrupt an empty scene")
    target = rng.below(len(scene.objects))
    kind = DEFECT_KINDS[rng.below(len(DEFECT_KINDS))]
    box = scene.objects[target].pixel_box()
    if kind == "noise_blot":
        size = 2 + rng.below(3)
        r0 = min(max(box[0] - 1 + rng.below(3), 0), CANVAS - size)
        c0 = min(max(box[1] - 1 + rng.below(3), 0), CANVAS - size)
        region = (r0, c0, r0 + size, c0 + size)
        if not _overlaps(region, box):
            region = (box[0], box[1], min(box[0] + size, CANVAS),
                      min(box[1] + size, CANVAS))
    else:
        region = box
    defect = DefectSpec(target=target, kind=kind, region=region)
    if not _overlaps(defect.region, box):
        raise ContractError("defect region misses its target object")
    return defect


def patch_cover(region: tuple) -> np.ndarray:
    """{0,1} heat grid of patches intersecting a pixel rectangle."""
    r0, c0, r1, c1 = region
    grid = np.zeros((HEAT_GRID, HEAT_GRID), dtype=np.float64)
    grid[r0 // PATCH:(r1 + PATCH - 1) // PATCH,
         c0 // PATCH:(c1 + PATCH - 1) // PATCH] = 1.0
    return grid


def pixels_patch_cover(mask: np.ndarray) -> np.ndarray:
    """Boolean patch grid of patches containing at least one masked pixel."""
    blocks = mask.reshape(HEAT_GRID, PATCH, HEAT_GRID, PATCH)
    return blocks.any(axis=(1, 3))


def corrupt(scene: SceneSpec, defect: DefectSpec, rng: Stream) -> tuple:
    """Apply the defect; returns (image, ground-truth heatmap)."""
    if defect.target >= len(scene.objects):
        raise ContractError(f"defect targets object {defect.target} "
                            f"of {len(scene.objects)}")
    image = render(scene)
    obj = scene.objects[defect.target]
    r0, c0, r1, c1 = defect.region
    if defect.kind == "color_swap":
        others = [c for c in PALETTE if c != obj.color]
        new_color = others[rng.below(len(others))]
        image[obj.pixel_mask()] = PALETTE[new_color]
    elif defect.kind == "shape_erase":
        image[r0:r1, c0:c1] = BACKGROUND
    else:  # noise_blot
        noise = np.empty((r1 - r0, c1 - c0, 3))
        flat = noise.reshape(-1)
        for i in range(flat.size):
            flat[i] = rng.u01() * 2.0 - 1.0
        image[r0:r1, c0:c1] = noise
    return image, patch_cover(defect.region)


@dataclass(frozen=True)
class CorrectionMask:
    """Boolean patch grid naming what to repaint, and how it was derived."""

    grid: np.ndarray
    tau: Optional[float] = None
    dilation: Optional[int] = None

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=bool)
        object.__setattr__(self, "grid", g)

    @property
    def coverage(self) -> float:
        return float(self.grid.mean())

    def to_dict(self) -> dict:
        return {"grid": self.grid.astype(int).tolist(),
                "tau": self.tau, "dilation": self.dilation}

    @classmethod
    def from_dict(cls, d: dict) -> "CorrectionMask":
        return cls(grid=np.asarray(d["grid"], dtype=bool),
                   tau=d.get("tau"), dilation=d.get("dilation"))


def random_mask(grid_shape: tuple, rng: Stream,
                scene: Optional[SceneSpec] = None,
                segmentation: bool = False) -> CorrectionMask:
    """1-3 random rectangles with 5-60% coverage, or one object's cover."""
    gh, gw = grid_shape
    if segmentation:
        if scene is None or not scene.objects:
            raise ContractError("segmentation mask needs a scene with objects")
        obj = scene.objects[rng.below(len(scene.objects))]
        return CorrectionMask(grid=pixels_patch_cover(obj.pixel_mask()))
    cells = gh * gw
    for _ in range(1000):
        grid = np.zeros((gh, gw), dtype=bool)
        for _ in range(1 + rng.below(3)):
            h, w = 1 + rng.below(4), 1 + rng.below(4)
            r0, c0 = rng.below(gh), rng.below(gw)
            grid[r0:min(r0 + h, gh), c0:min(c0 + w, gw)] = True
        coverage = grid.sum() / cells
        if 0.05 <= coverage <= 0.60:
            return CorrectionMask(grid=grid)
    raise ContractError("could not draw a mask inside the coverage bounds")


# ---- scene sampling ----


def sample_scene(rng: Stream, n_objects: Optional[int] = None) -> SceneSpec:
    """Uniform scene with 1-3 objects in distinct cells."""
    n = n_objects if n_objects is not None else 1 + rng.below(3)
    if not 1 <= n <= 3:
        raise ContractError(f"scenes carry 1-3 objects, asked for {n}")
    cells = [(r, c) for r in range(GRID) for c in range(GRID)]
    chosen = []
    for _ in range(n):
        idx = rng.below(len(cells))
        chosen.append(cells.pop(idx))
    colors = list(PALETTE)
    objects = tuple(
        ObjectSpec(shape=SHAPES[rng.below(3)], color=colors[rng.below(8)],
                   cell=cell, size=("large", "small")[rng.below(2)])
        for cell in chosen)
    return SceneSpec(objects)


# ---- the oracle parser ----


FG_THRESHOLD = 0.3
COLOR_TOLERANCE = 0.3
IOU_THRESHOLD = 0.7


@dataclass
class ParseFailure:
    """Diagnostic result when an image does not read as a clean scene."""

    reasons: list = field(default_factory=list)

    def __bool__(self) -> bool:
        return False


def oracle_parse(image: np.ndarray):
    """Invert rendering: SceneSpec on success, ParseFailure otherwise."""
    if image.shape != (CANVAS, CANVAS, 3):
        return ParseFailure([f"geometry {image.shape} is not "
                             f"({CANVAS}, {CANVAS}, 3)"])
    bg = np.asarray(BACKGROUND)
    objects, reasons = [], []
    for r in range(GRID):
        for c in range(GRID):
            block = image[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL]
            fg = np.abs(block - bg).max(axis=2) > FG_THRESHOLD
            if fg.sum() < 3:
                continue
            best_iou, best_shape, best_size = 0.0, None, None
            for size in SIZES:
                for shape in SHAPES:
                    tmpl = shape_template(shape, size)
                    inter = (fg & tmpl).sum()
                    union = (fg | tmpl).sum()
                    iou = inter / union
                    if iou > best_iou:
                        best_iou, best_shape, best_size = iou, shape, size
            if best_iou < IOU_THRESHOLD:
                reasons.append(f"cell ({r},{c}): no shape template reaches "
                               f"IoU {IOU_THRESHOLD} (best {best_iou:.2f})")
                continue
            mean_color = block[fg].mean(axis=0)
            dists = {name: np.abs(mean_color - np.asarray(rgb)).max()
                     for name, rgb in PALETTE.items()}
            best_color = min(dists, key=dists.get)
            if dists[best_color] > COLOR_TOLERANCE:
                reasons.append(f"cell ({r},{c}): mean color {mean_color.round(2)} "
                               f"is no palette color (best {best_color}, "
                               f"L-inf {dists[best_color]:.2f})")
                continue
            objects.append(ObjectSpec(shape=best_shape, color=best_color,
                                      cell=(r, c), size=best_size))
    if reasons:
        return ParseFailure(reasons)
    if len(objects) > 3:
        return ParseFailure([f"{len(objects)} objects exceed the 3-object world"])
    return SceneSpec(tuple(objects))


# ---- dataset manifests ----


TASKS = ("t2i", "i2t", "plan", "reflect", "correct")


@dataclass
class DatasetConfig:
    """Scene counts per task stream; generation:understanding defaults 8:1."""

    n_t2i: int = 512
    n_i2t: int = 64
    n_plan: int = 64
    n_reflect: int = 64
    n_correct: int = 64
    n_val: int = 32
    distinct_captions: bool = False
    dense_prompt_share: float = 0.2

    def count(self, task: str) -> int:
        return getattr(self, "n_" + task)


def _record(task: str, index: int, seed: int, split: str,
            banned_hashes: set, config: DatasetConfig,
            used_shorts: Optional[set] = None) -> dict:
    for attempt in range(1000):
        rng = Stream(seed, f"data/{split}/{task}/{index}/{attempt}")
        scene = sample_scene(rng)
        h = scene_hash(scene)
        if h in banned_hashes:
            continue
        if used_shorts is not None:
            short = caption_short(scene)
            if short in used_shorts:
                continue
            used_shorts.add(short)
        record = {"task": task, "index": index, "hash": h,
                  "scene": scene.to_dict()}
        if task == "t2i":
            dense = rng.u01() < config.dense_prompt_share
            record["prompt"] = (caption_dense(scene) if dense
                                else caption_short(scene))
        elif task == "i2t":
            if rng.below(2) == 0:
                pairs = qa_pairs(scene)
                record["question"], record["answer"] = pairs[rng.below(len(pairs))]
            else:
                record["caption"] = caption_dense(scene)
        elif task == "plan":
            record["prompt"] = caption_short(scene)
        elif task in ("reflect", "correct"):
            record["defect"] = make_defect(scene, rng.derive("defect")).to_dict()
        return record
    raise ContractError(f"could not sample a fresh scene for {task}/{index}")


def make_dataset(config: DatasetConfig, seed: int) -> dict:
    """Deterministic manifest of train/val records, disjoint by scene hash."""
    manifest = {"version": 1, "seed": seed,
                "counts": {t: config.count(t) for t in TASKS},
                "n_val": config.n_val, "train": [], "val": []}
    train_hashes = set()
    used_shorts = set() if config.distinct_captions else None
    for task in TASKS:
        for i in range(config.count(task)):
            rec = _record(task, i, seed, "train", set(), config,
                          used_shorts if task == "t2i" else None)
            manifest["train"].append(rec)
            train_hashes.add(rec["hash"])
    val_hashes = set()
    for i in range(config.n_val):
        rec = _record("t2i", i, seed, "val", train_hashes | val_hashes, config)
        manifest["val"].append(rec)
        val_hashes.add(rec["hash"])
    return manifest


def save_manifest(path, manifest: dict) -> None:
    with open(str(path), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_manifest(path) -> dict:
    with open(str(path), "r", encoding="utf-8") as fh:
        return json.load(fh)
