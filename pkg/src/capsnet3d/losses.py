"""Training objective: spread classification loss + down-weighted pixel BCE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from . import tensor as T
from .tensor import Tensor

LAMBDA_LOC = 2e-4
RECON_WEIGHT = 2e-4


@dataclass
class MarginSchedule:
    """Spread-loss margin, linearly annealed from 0.2 to 0.9 over training."""

    total_steps: int
    m_start: float = 0.2
    m_end: float = 0.9

    def margin(self, step: int) -> float:
        if step < 0:
            raise UsageError("step must be non-negative")
        if self.total_steps <= 0:
            return self.m_end
        frac = min(1.0, step / self.total_steps)
        return self.m_start + (self.m_end - self.m_start) * frac


def spread_loss(activations: Tensor, target, margin: float) -> Tensor:
    """sum_{i != t} max(0, margin - (a_t - a_i))^2, averaged over any batch.

    ``activations`` is [N] or [B, N]; ``target`` an int or [B] ints.
    """
    acts = activations
    squeeze = acts.ndim == 1
    if squeeze:
        acts = T.reshape(acts, (1,) + acts.shape)
    b, n = acts.shape
    t = np.broadcast_to(np.asarray(target, dtype=np.int64), (b,))
    if np.any(t < 0) or np.any(t >= n):
        raise UsageError(f"target {target!r} out of range for {n} classes")
    onehot = np.zeros((b, n), dtype=acts.dtype)
    np.put_along_axis(onehot, t[:, None], 1.0, axis=-1)
    target_mask = Tensor(onehot, dtype=acts.dtype)
    a_t = (acts * target_mask).sum(axis=-1, keepdims=True)
    gaps = T.relu(margin - (a_t - acts))
    per_sample = (T.square(gaps) * Tensor(1.0 - onehot, dtype=acts.dtype)).sum(axis=-1)
    return per_sample.mean() if not squeeze else per_sample.sum()


def localization_loss(logits: Tensor, gt_mask) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against a {0,1} mask.

    Computed in log-sigmoid form: -[p*log s(F) + (1-p)*log s(-F)] =
    p*softplus(-F) + (1-p)*softplus(F), which never overflows or clamps.
    Averages over all pixels (and any leading batch axis).
    """
    mask = gt_mask.data if isinstance(gt_mask, Tensor) else np.asarray(gt_mask)
    if mask.shape != logits.shape:
        raise UsageError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise UsageError("ground-truth mask must be binary")
    mask = Tensor(mask, dtype=logits.dtype)
    per_pixel = mask * T.softplus(T.neg(logits)) + (1.0 - mask) * T.softplus(logits)
    return per_pixel.mean()


def reconstruction_loss(recon: Tensor, frames) -> Tensor:
    """Mean squared error over pixels."""
    ref = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    if ref.shape != recon.shape:
        raise UsageError(f"reconstruction shape {recon.shape} does not match frames {ref.shape}")
    return T.square(recon - Tensor(ref, dtype=recon.dtype)).mean()


def total_loss(
    classification: Tensor,
    localization: Tensor = None,
    reconstruction: Tensor = None,
    lambda_loc: float = LAMBDA_LOC,
    recon_weight: float = RECON_WEIGHT,
    use_classification: bool = True,
    use_localization: bool = True,
    use_reconstruction: bool = False,
) -> Tensor:
    """L = L_c + lambda * L_s (+ recon term), with ablation toggles."""
    terms = []
    if use_classification:
        if classification is None:
            raise UsageError("classification loss enabled but not provided")
        terms.append(classification)
    if use_localization:
        if localization is None:
            raise UsageError("localization loss enabled but not provided")
        terms.append(localization * lambda_loc)
    if use_reconstruction:
        if reconstruction is None:
            raise UsageError("reconstruction loss enabled but not provided")
        terms.append(reconstruction * recon_weight)
    if not terms:
        raise UsageError("at least one loss component must be enabled")
    out = terms[0]
    for term in terms[1:]:
        out = out + term
    return out
