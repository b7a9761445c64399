"""Finite-difference audit of full-stack gradients, one verdict per parameter group.

The probe sequence touches every head at once: a supervised caption stream
(token loss), a clean image with a heatmap target (sigmoid regression), and a
noised image with a velocity target (flow regression). Each parameter tensor
is then checked entry-wise against central differences: always its
largest-gradient entry, plus a few seeded random entries. Relative error uses
a floored denominator max(|analytic|, |fd|, 1e-4), which turns the comparison
into an absolute check at the 1e-8 scale for near-zero entries so that
finite-difference rounding noise cannot fail them; a genuinely wrong rule
still fails loudly because the error it introduces scales with the gradient
itself.
"""

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from triflow import tensor as T
from triflow.errors import ConfigError
from triflow.model import ModelConfig, MTXpertStack, forward
from triflow.objectives import combined_loss, make_trajectory
from triflow.rng import Stream
from triflow.sequencing import CleanImagePart, NoisedImagePart, TextPart, assemble
from triflow.toyworld import (caption_dense, corrupt, make_defect, render,
                              sample_scene)
from triflow.vocab import Vocabulary, tokenize

REL_FLOOR = 1e-4
PROBE_T = 0.37


@dataclass(frozen=True)
class GradcheckConfig:
    """Stack geometry plus finite-difference knobs."""

    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    patch: int = 2
    seed: int = 0
    samples_per_param: int = 4
    h: float = 1e-5
    tol: float = 1e-4

    def __post_init__(self):
        if self.samples_per_param < 1:
            raise ConfigError("samples_per_param must be at least 1")
        if not self.h > 0.0:
            raise ConfigError(f"step size h={self.h} must be positive")
        if not self.tol > 0.0:
            raise ConfigError(f"tolerance {self.tol} must be positive")


@dataclass(frozen=True)
class GroupResult:
    """Worst finite-difference disagreement inside one parameter tensor."""

    name: str
    checked: int
    max_rel_err: float
    passed: bool


@dataclass(frozen=True)
class GradcheckReport:
    """Per-group verdicts plus the overall worst case."""

    groups: tuple
    max_rel_err: float
    passed: bool
    tol: float
    elapsed: float

    def format(self) -> str:
        """Fixed-width table, one line per parameter group, worst first."""
        width = max(len(g.name) for g in self.groups)
        rows = sorted(self.groups, key=lambda g: -g.max_rel_err)
        lines = [f"{g.name:<{width}}  {g.max_rel_err:12.3e}  "
                 f"{'ok' if g.passed else 'FAIL'}" for g in rows]
        verdict = "pass" if self.passed else "FAIL"
        lines.append(f"{'max over ' + str(len(self.groups)) + ' groups':<{width}}"
                     f"  {self.max_rel_err:12.3e}  {verdict} "
                     f"(tol {self.tol:g}, {self.elapsed:.1f}s)")
        return "\n".join(lines)


def probe_parts(cfg: GradcheckConfig) -> list:
    """One sequence that routes rows through all three experts and heads."""
    rng = Stream(cfg.seed, "gradcheck/scene")
    scene = sample_scene(rng)
    vocab = Vocabulary.default()
    ids = tokenize(caption_dense(scene), vocab)
    defect = make_defect(scene, rng.derive("defect"))
    damaged, heatmap = corrupt(scene, defect, rng.derive("corrupt"))
    clean = render(scene)
    eps = rng.derive("eps").normal(clean.shape)
    traj = make_trajectory(clean, eps, PROBE_T)
    return [
        TextPart(ids, lm_from=1),
        CleanImagePart(damaged, heatmap_target=heatmap),
        NoisedImagePart(traj.x_t, traj.t, velocity_target=traj.velocity_target),
    ]


def loss_value(stack: MTXpertStack, parts: list) -> float:
    """Scalar combined loss at the stack's current parameter values."""
    seq = assemble(parts, stack.embed_table, stack.grid)
    out = forward(stack, seq, want_heatmap=True)
    loss, _ = combined_loss(seq, out)
    return float(loss.data)


def taped_grads(stack: MTXpertStack, parts: list) -> tuple:
    """Analytic (loss, gradients) for every parameter via one backward pass."""
    T.zero_grads(stack.params)
    with T.ComputationTape() as tape:
        seq = assemble(parts, stack.embed_table, stack.grid)
        out = forward(stack, seq, want_heatmap=True)
        loss, _ = combined_loss(seq, out)
    T.backward(tape, loss)
    grads = {}
    for name, p in stack.params.items():
        grads[name] = (p.grad.copy() if p.grad is not None
                       else np.zeros_like(p.data))
    T.zero_grads(stack.params)
    return float(loss.data), grads


def _entries(grad: np.ndarray, k: int, rng: Stream) -> list:
    """Flat indices to probe: the loudest entry plus seeded random picks."""
    picks = [int(np.argmax(np.abs(grad)))]
    n = grad.size
    while len(picks) < min(k, n):
        idx = rng.below(n)
        if idx not in picks:
            picks.append(idx)
    return picks


def gradcheck(cfg: GradcheckConfig = GradcheckConfig(),
              grad_fn: Optional[Callable] = None) -> GradcheckReport:
    """Compare every parameter group's analytic gradient to central differences."""
    start = time.monotonic()
    stack = MTXpertStack.init(ModelConfig(d_model=cfg.d_model,
                                          n_layers=cfg.n_layers,
                                          n_heads=cfg.n_heads,
                                          patch=cfg.patch), seed=cfg.seed)
    parts = probe_parts(cfg)
    if grad_fn is None:
        grad_fn = taped_grads
    _, grads = grad_fn(stack, parts)
    h = cfg.h
    groups = []
    for name in sorted(stack.params):
        p = stack.params[name]
        rng = Stream(cfg.seed, "gradcheck/entries/" + name)
        worst = 0.0
        picks = _entries(grads[name], cfg.samples_per_param, rng)
        for idx in picks:
            saved = float(p.data.flat[idx])
            p.data.flat[idx] = saved + h
            plus = loss_value(stack, parts)
            p.data.flat[idx] = saved - h
            minus = loss_value(stack, parts)
            p.data.flat[idx] = saved
            fd = (plus - minus) / (2.0 * h)
            a = float(grads[name].flat[idx])
            rel = abs(a - fd) / max(abs(a), abs(fd), REL_FLOOR)
            worst = max(worst, rel)
        groups.append(GroupResult(name=name, checked=len(picks),
                                  max_rel_err=worst, passed=worst < cfg.tol))
    overall = max(g.max_rel_err for g in groups)
    return GradcheckReport(groups=tuple(groups), max_rel_err=overall,
                           passed=all(g.passed for g in groups),
                           tol=cfg.tol, elapsed=time.monotonic() - start)
