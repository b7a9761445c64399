"""Expert-routed transformer stack with a hybrid causal/bidirectional mask."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

import triflow.tensor as T
from triflow.errors import ConfigError, ContractError, NonFiniteError, ShapeError
from triflow.rng import Stream
from triflow.sequencing import MultimodalSequence, PatchGrid, Segment, SegmentKind
from triflow.tensor import Tensor
from triflow.vocab import VOCAB_SIZE

EXPERTS = ("linguistic", "semantic", "generative")

ROUTE_TABLE = {
    SegmentKind.TEXT: "linguistic",
    SegmentKind.CLEAN_IMAGE: "semantic",
    SegmentKind.NOISED_IMAGE: "generative",
}

ATTN_WEIGHTS = ("wq", "wk", "wv", "wo")
FFN_WEIGHTS = ("w_gate", "w_up", "w_down")


@dataclass
class ModelConfig:
    """Width, depth and geometry of an expert stack."""

    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = VOCAB_SIZE
    patch: int = 2
    channels: int = 3
    height: int = 16
    width: int = 16

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"width {self.d_model} not divisible by {self.n_heads} heads")
        if self.d_model % 2 or (self.d_model // self.n_heads) % 2:
            raise ConfigError("rotary pairs need an even head dimension")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"{self.height}x{self.width} image not divisible by patch {self.patch}")
        for name in ("d_model", "n_layers", "n_heads", "vocab_size", "patch",
                     "channels", "height", "width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def raw_patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {"d_model": self.d_model, "n_layers": self.n_layers,
                "n_heads": self.n_heads, "vocab_size": self.vocab_size,
                "patch": self.patch, "channels": self.channels,
                "height": self.height, "width": self.width}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


def parameter_shapes(config: ModelConfig) -> dict:
    """Name -> shape for every learnable array, in canonical order."""
    d = config.d_model
    shapes = {
        "embed.table": (config.vocab_size, d),
        "patch.proj.w": (config.raw_patch_dim, d),
        "tembed.w": (d, d),
    }
    for layer in range(config.n_layers):
        for expert in EXPERTS:
            base = f"layer{layer}.{expert}"
            shapes[f"{base}.attn.norm.g"] = (d,)
            for w in ATTN_WEIGHTS:
                shapes[f"{base}.attn.{w}"] = (d, d)
            shapes[f"{base}.ffn.norm.g"] = (d,)
            shapes[f"{base}.ffn.w_gate"] = (d, 4 * d)
            shapes[f"{base}.ffn.w_up"] = (d, 4 * d)
            shapes[f"{base}.ffn.w_down"] = (4 * d, d)
    shapes["final_norm.g"] = (d,)
    shapes["head.velocity.w"] = (d, config.raw_patch_dim)
    shapes["head.heatmap.w"] = (d, 1)
    return shapes


class MTXpertStack:
    """Three experts per layer over a shared attention pattern."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter set mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(
                    f"{name}: stored shape {params[name].shape}, expected {shape}")

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "MTXpertStack":
        params = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith("norm.g"):
                data = np.ones(shape)
            else:
                data = Stream(seed, "init/" + name).normal(shape) * 0.02
            params[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, params)

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.config.height, self.config.width,
                         self.config.channels, self.config.patch,
                         self.params["patch.proj.w"])

    @property
    def embed_table(self) -> Tensor:
        return self.params["embed.table"]

    def layer_params(self, layer: int, expert: str) -> dict:
        base = f"layer{layer}.{expert}"
        return {key: self.params[f"{base}.{key}"]
                for key in ("attn.norm.g", "attn.wq", "attn.wk", "attn.wv",
                            "attn.wo", "ffn.norm.g", "ffn.w_gate", "ffn.w_up",
                            "ffn.w_down")}


def route(segments: list) -> dict:
    """Partition row indices by segment kind, order preserved per expert."""
    buckets = {name: [] for name in EXPERTS}
    for seg in segments:
        buckets[ROUTE_TABLE[seg.kind]].append(np.arange(seg.start, seg.stop,
                                                        dtype=np.int64))
    return {name: (np.concatenate(parts) if parts else np.empty(0, dtype=np.int64))
            for name, parts in buckets.items()}


def build_mask(segments: list, n: Optional[int] = None) -> np.ndarray:
    """Additive attention bias: 0 where visible, -inf where blocked."""
    if n is None:
        n = segments[-1].stop if segments else 0
    bias = np.full((n, n), -np.inf)
    tri = np.tril_indices(n)
    bias[tri] = 0.0
    for seg in segments:
        if seg.is_image:
            bias[seg.start:seg.stop, seg.start:seg.stop] = 0.0
    return bias


def rotary_tables(n: int, head_dim: int) -> tuple:
    """Cos/sin tables over global positions for pairwise feature rotation."""
    positions = np.arange(n, dtype=np.float64)[:, None]
    exponents = np.arange(head_dim // 2, dtype=np.float64) * (2.0 / head_dim)
    angles = positions / (10000.0 ** exponents)[None, :]
    return np.cos(angles), np.sin(angles)


def timestep_embedding(t: float, d: int) -> np.ndarray:
    """Sinusoidal features of a flow timestep, sin half then cos half."""
    half = d // 2
    exponents = np.arange(half, dtype=np.float64) * (2.0 / d)
    angles = 1000.0 * t / (10000.0 ** exponents)
    return np.concatenate([np.sin(angles), np.cos(angles)])


def _expert_apply(x: Tensor, routing: dict, n: int, fn) -> Tensor:
    """Run fn(expert_name, rows_tensor) per expert and scatter results back."""
    pieces, index_lists = [], []
    for name in EXPERTS:
        idx = routing[name]
        if idx.size == 0:
            continue
        pieces.append(fn(name, T.gather_rows(x, idx)))
        index_lists.append(idx)
    return T.combine_rows(pieces, index_lists, n)


def attention_block(x: Tensor, bias: np.ndarray, routing: dict, stack:
                    MTXpertStack, layer: int, cos: np.ndarray,
                    sin: np.ndarray) -> Tensor:
    """Per-expert QKV and output projections around shared masked attention."""
    n = x.shape[0]
    h = stack.config.n_heads

    def project(name, xe):
        p = stack.layer_params(layer, name)
        ne = T.rms_norm(xe, p["attn.norm.g"])
        return (T.matmul(ne, p["attn.wq"]), T.matmul(ne, p["attn.wk"]),
                T.matmul(ne, p["attn.wv"]))

    q_pieces, k_pieces, v_pieces, index_lists = [], [], [], []
    for name in EXPERTS:
        idx = routing[name]
        if idx.size == 0:
            continue
        qe, ke, ve = project(name, T.gather_rows(x, idx))
        q_pieces.append(qe)
        k_pieces.append(ke)
        v_pieces.append(ve)
        index_lists.append(idx)
    q = T.combine_rows(q_pieces, index_lists, n)
    k = T.combine_rows(k_pieces, index_lists, n)
    v = T.combine_rows(v_pieces, index_lists, n)

    qh = T.rotary(T.to_heads(q, h), cos, sin)
    kh = T.rotary(T.to_heads(k, h), cos, sin)
    scores = T.scale(T.bmm_tb(qh, kh), 1.0 / np.sqrt(stack.config.head_dim))
    probs = T.masked_softmax(scores, bias)
    ctx = T.from_heads(T.bmm(probs, T.to_heads(v, h)))

    def out_proj(name, ce):
        return T.matmul(ce, stack.layer_params(layer, name)["attn.wo"])

    return T.add(x, _expert_apply(ctx, routing, n, out_proj))


def ffn_block(x: Tensor, routing: dict, stack: MTXpertStack, layer: int) -> Tensor:
    """Per-expert gated feed-forward with residual."""

    def body(name, xe):
        p = stack.layer_params(layer, name)
        ne = T.rms_norm(xe, p["ffn.norm.g"])
        gated = T.mul(T.silu(T.matmul(ne, p["ffn.w_gate"])),
                      T.matmul(ne, p["ffn.w_up"]))
        return T.matmul(gated, p["ffn.w_down"])

    return T.add(x, _expert_apply(x, routing, x.shape[0], body))


@dataclass
class ForwardResult:
    """Per-row head outputs of one sequence pass."""

    logits: Tensor
    velocity: Optional[Tensor]
    velocity_rows: np.ndarray
    heatmap: Optional[Tensor]
    heatmap_rows: np.ndarray
    hidden: list = field(default_factory=list)


def _check_finite(x: Tensor, layer: int) -> None:
    finite = np.isfinite(x.data)
    if not finite.all():
        row = int(np.nonzero(~finite.all(axis=1))[0][0])
        raise NonFiniteError(f"non-finite activation at layer {layer}, row {row}")


def forward(stack: MTXpertStack, seq: MultimodalSequence,
            want_heatmap: bool = False, capture_hidden: bool = False) -> ForwardResult:
    """Full stack pass: embeddings -> L expert layers -> norm -> heads."""
    n = seq.length
    d = stack.config.d_model
    x = seq.embeddings
    if x.shape != (n, d):
        raise ShapeError(f"sequence embeddings {x.shape}, model width {d}")

    for seg in seq.segments:
        if seg.kind is SegmentKind.NOISED_IMAGE:
            if seg.t is None:
                raise ContractError("noised segment without a timestep")
            emb = timestep_embedding(seg.t, d)
            rows = np.arange(seg.start, seg.stop, dtype=np.int64)
            temb = T.matmul(Tensor(emb[None, :]), stack.params["tembed.w"])
            x = T.add_rows(x, rows, temb)

    routing = route(seq.segments)
    bias = build_mask(seq.segments, n)
    cos, sin = rotary_tables(n, stack.config.head_dim)

    hidden = []
    for layer in range(stack.config.n_layers):
        x = attention_block(x, bias, routing, stack, layer, cos, sin)
        x = ffn_block(x, routing, stack, layer)
        _check_finite(x, layer)
        if capture_hidden:
            hidden.append(x.data.copy())

    final = T.rms_norm(x, stack.params["final_norm.g"])
    logits = T.matmul_tb(final, stack.embed_table)

    vel_rows = routing["generative"]
    velocity = None
    if vel_rows.size:
        velocity = T.matmul(T.gather_rows(final, vel_rows),
                            stack.params["head.velocity.w"])

    hm_rows = routing["semantic"]
    heatmap = None
    if want_heatmap and hm_rows.size:
        heatmap = T.sigmoid(T.matmul(T.gather_rows(final, hm_rows),
                                     stack.params["head.heatmap.w"]))

    return ForwardResult(logits=logits, velocity=velocity,
                         velocity_rows=vel_rows, heatmap=heatmap,
                         heatmap_rows=hm_rows if want_heatmap else
                         np.empty(0, dtype=np.int64), hidden=hidden)
