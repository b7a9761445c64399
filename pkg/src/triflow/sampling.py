"""Inference: Euler flow integration, greedy/temperature decoding, inpainting.

Image sampling starts from x(0) = eps ~ N(0,I) and takes S explicit Euler
steps x(k+1) = x(k) + (1/S) * v(x(k), t_k) with t_k = k/S. Inpainting runs
the same integrator but, after each step, overwrites patches outside the
correction mask with the known trajectory point t*original + (1-t)*eps at
the state's time t = (k+1)/S, so unmasked content is exact at t = 1.
"""

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from triflow.errors import ConfigError, ContractError, NonFiniteError
from triflow.model import MTXpertStack, forward
from triflow.rng import Stream
from triflow.sequencing import (NoisedImagePart, SegmentKind, TextPart,
                                assemble, rows_to_image)


@dataclass
class SamplerConfig:
    """Inference knobs; guidance is reserved and must stay 1.0 (off)."""

    steps: int = 50
    mode: str = "greedy"
    temperature: float = 1.0
    max_text_tokens: int = 64
    seed: int = 0
    stop_ids: frozenset = field(default_factory=frozenset)
    guidance: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"integration needs steps >= 1, got {self.steps}")
        if self.mode not in ("greedy", "temperature"):
            raise ConfigError(f"unknown decoding mode {self.mode!r}")
        if self.mode == "temperature" and not self.temperature > 0.0:
            raise ConfigError("temperature decoding needs tau > 0")
        if self.guidance != 1.0:
            raise ConfigError("guidance is reserved; only 1.0 (disabled) works")
        self.stop_ids = frozenset(self.stop_ids)


def _model_velocity(stack: MTXpertStack, condition: list):
    """Velocity closure that re-assembles condition + current state."""
    grid = stack.grid

    def v(x: np.ndarray, t: float) -> np.ndarray:
        parts = list(condition) + [NoisedImagePart(x, t=t)]
        seq = assemble(parts, stack.embed_table, grid)
        out = forward(stack, seq)
        rows = out.velocity.data[-grid.token_count:]
        return rows_to_image(rows, grid.height, grid.width, grid.channels,
                             grid.p)

    return v


def _check_condition(condition: list) -> None:
    for part in condition:
        if isinstance(part, NoisedImagePart):
            raise ContractError("condition already contains a noised segment")


def _integrate(x: np.ndarray, steps: int, velocity_fn, clamp=None) -> np.ndarray:
    for k in range(steps):
        t_k = k / steps
        v = velocity_fn(x, t_k)
        if v.shape != x.shape:
            raise ContractError(f"velocity shape {v.shape} vs state {x.shape}")
        x = x + v / steps
        if not np.isfinite(x).all():
            raise NonFiniteError(f"non-finite state after integration step {k}")
        if clamp is not None:
            x = clamp(x, (k + 1) / steps)
    return x


def sample_image(stack: Optional[MTXpertStack], condition: list,
                 cfg: SamplerConfig,
                 velocity_fn: Optional[Callable] = None) -> np.ndarray:
    """Integrate the velocity field from noise; returns [H,W,C] in [-1,1]."""
    _check_condition(condition)
    if velocity_fn is None:
        velocity_fn = _model_velocity(stack, condition)
        shape = (stack.config.height, stack.config.width, stack.config.channels)
    else:
        shape = velocity_fn.state_shape
    eps = Stream(cfg.seed, "sample/eps").normal(shape)
    x = _integrate(eps, cfg.steps, velocity_fn)
    return np.clip(x, -1.0, 1.0)


def inpaint_sample(stack: Optional[MTXpertStack], original: np.ndarray,
                   mask: np.ndarray, condition: list, cfg: SamplerConfig,
                   velocity_fn: Optional[Callable] = None,
                   patch: Optional[int] = None) -> np.ndarray:
    """Regenerate masked patches; clamp the rest to the known trajectory."""
    _check_condition(condition)
    p = patch if patch is not None else stack.config.patch
    gh, gw = original.shape[0] // p, original.shape[1] // p
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (gh, gw):
        raise ContractError(f"mask shape {mask.shape}, patch grid {(gh, gw)}")
    if not mask.any():
        warnings.warn("inpaint mask selects nothing; returning the original")
        return original.copy()
    if velocity_fn is None:
        velocity_fn = _model_velocity(stack, condition)
    keep = ~np.repeat(np.repeat(mask, p, axis=0), p, axis=1)[:, :, None]
    eps = Stream(cfg.seed, "sample/eps").normal(original.shape)

    def clamp(x, t):
        known = t * original + (1.0 - t) * eps
        return np.where(keep, known, x)

    x = _integrate(eps.copy(), cfg.steps, velocity_fn, clamp=clamp)
    return np.clip(x, -1.0, 1.0)


@dataclass
class DecodeResult:
    """Greedy/temperature continuation of a text segment."""

    ids: list
    full_ids: list
    truncated: bool


def decode_text(stack: MTXpertStack, prefix: list, cfg: SamplerConfig) -> DecodeResult:
    """Extend the final text segment until a stop id or the length cap."""
    if not prefix or not isinstance(prefix[-1], TextPart):
        raise ContractError("decoding needs a prefix ending in a text segment")
    if not prefix[-1].ids:
        raise ContractError("the final text segment must seed at least one token")
    grid = stack.grid
    head = list(prefix[:-1])
    ids = list(prefix[-1].ids)
    lm_from = prefix[-1].lm_from
    generated = []
    rng = Stream(cfg.seed, "decode")
    for i in range(cfg.max_text_tokens):
        seq = assemble(head + [TextPart(ids, lm_from=lm_from)],
                       stack.embed_table, grid)
        logits = forward(stack, seq).logits.data[-1]
        if cfg.mode == "greedy":
            next_id = int(np.argmax(logits))
        else:
            z = logits / cfg.temperature
            z -= z.max()
            probs = np.exp(z) / np.exp(z).sum()
            next_id = int(np.searchsorted(np.cumsum(probs),
                                          rng.derive(str(i)).u01(),
                                          side="left").clip(0, len(probs) - 1))
        ids.append(next_id)
        generated.append(next_id)
        if next_id in cfg.stop_ids:
            return DecodeResult(ids=generated, full_ids=ids, truncated=False)
    return DecodeResult(ids=generated, full_ids=ids, truncated=True)
