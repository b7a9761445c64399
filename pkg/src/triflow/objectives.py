"""Training losses: next-token NLL, flow-matching velocity MSE, combination."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

import triflow.tensor as T
from triflow.errors import ContractError, ShapeError
from triflow.model import ForwardResult
from triflow.rng import Stream
from triflow.sequencing import MultimodalSequence, image_to_rows
from triflow.tensor import Tensor


@dataclass
class RectifiedFlowBatch:
    """Linear trajectory sample: x_t = t*x + (1-t)*eps, target x - eps."""

    x: np.ndarray
    eps: np.ndarray
    t: float
    x_t: np.ndarray
    velocity_target: np.ndarray


@dataclass
class LossReport:
    """Per-step loss decomposition; combined = lm + lam * rf [+ lam_hm * hm]."""

    lm_loss: float
    rf_loss: float
    combined: float
    lm_tokens: int
    rf_tokens: int
    hm_loss: float = 0.0
    hm_tokens: int = 0

    def to_dict(self) -> dict:
        return {"lm": self.lm_loss, "rf": self.rf_loss, "hm": self.hm_loss,
                "combined": self.combined, "lm_tokens": self.lm_tokens,
                "rf_tokens": self.rf_tokens, "hm_tokens": self.hm_tokens}


def lm_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean NLL of targets at masked positions."""
    rows = np.nonzero(mask)[0]
    if rows.size == 0:
        raise ContractError("lm_loss called with an empty mask")
    return T.cross_entropy_mean(T.gather_rows(logits, rows),
                                targets[rows].astype(np.int64))


def make_trajectory(x: np.ndarray, eps: np.ndarray, t: float) -> RectifiedFlowBatch:
    """Interpolate clean image and noise at time t."""
    if x.shape != eps.shape:
        raise ShapeError(f"trajectory shapes differ: {x.shape} vs {eps.shape}")
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"timestep {t} outside [0,1]")
    return RectifiedFlowBatch(x=x, eps=eps, t=t,
                              x_t=t * x + (1.0 - t) * eps,
                              velocity_target=x - eps)


def rf_loss(v_pred: Tensor, batch: RectifiedFlowBatch, patch: int) -> Tensor:
    """Mean squared error against the straight-line velocity, in patch rows."""
    target = image_to_rows(batch.velocity_target, patch)
    if v_pred.shape != target.shape:
        raise ShapeError(f"velocity {v_pred.shape} vs target {target.shape}")
    return T.mse_mean(v_pred, target)


def sample_timestep(rng: Stream) -> float:
    """One t ~ U(0,1) from the stream."""
    return rng.u01()


def combined_loss(seq: MultimodalSequence, out: ForwardResult,
                  lam: float = 1.0, lam_hm: float = 1.0) -> tuple:
    """Scalar training loss plus a LossReport; empty masks contribute zero."""
    terms = []
    lm_rows = np.nonzero(seq.lm_mask)[0]
    lm_value = 0.0
    if lm_rows.size:
        lm_term = lm_loss(out.logits, seq.lm_targets, seq.lm_mask)
        lm_value = float(lm_term.data)
        terms.append(lm_term)

    rf_rows = 0
    rf_value = 0.0
    if seq.velocity_targets:
        if out.velocity is None:
            raise ContractError("sequence has velocity targets but no velocity output")
        target = np.concatenate([rows for _, rows in seq.velocity_targets])
        rf_term = T.mse_mean(out.velocity, target)
        rf_value = float(rf_term.data)
        rf_rows = target.shape[0]
        if lam != 0.0:
            terms.append(T.scale(rf_term, lam) if lam != 1.0 else rf_term)

    hm_rows = 0
    hm_value = 0.0
    if seq.heatmap_targets and out.heatmap is not None:
        target = np.concatenate(
            [flat for _, flat in seq.heatmap_targets]).reshape(-1, 1)
        hm_term = T.mse_mean(out.heatmap, target)
        hm_value = float(hm_term.data)
        hm_rows = target.shape[0]
        if lam_hm != 0.0:
            terms.append(T.scale(hm_term, lam_hm) if lam_hm != 1.0 else hm_term)

    if not terms:
        raise ContractError("no supervised positions in sequence")
    total = terms[0] if len(terms) == 1 else T.add_scalars(terms)
    report = LossReport(lm_loss=lm_value, rf_loss=rf_value,
                        combined=float(total.data),
                        lm_tokens=int(lm_rows.size), rf_tokens=rf_rows,
                        hm_loss=hm_value, hm_tokens=hm_rows)
    return total, report
