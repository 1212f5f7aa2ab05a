"""Matrix-capsule layers: pooling, vote casting, EM routing, masking.

A capsule is a 4x4 pose matrix plus a scalar activation in [0, 1]. Grids
carry capsules over a [T, H, W, C] lattice (optional leading batch axis).
Capsule-pooling averages poses/activations per type over each receptive
field before vote casting, so routing sees C_in * C_out votes per output
position instead of C_in * C_out * window-volume.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .conv import conv3d, window_mean3d
from .errors import ConfigurationError, UsageError
from . import tensor as T
from .tensor import Tensor

_DENOM_EPS = 1e-20  # only takes effect when every input activation is zero


@dataclass
class CapsuleGrid:
    """Pose block [*, T, H, W, C, 4, 4] plus activation block [*, T, H, W, C]."""

    pose: Tensor
    activation: Tensor

    def __post_init__(self):
        p, a = self.pose, self.activation
        if p.ndim not in (6, 7) or p.shape[-2:] != (4, 4):
            raise ConfigurationError(f"pose must be [*,T,H,W,C,4,4], got {p.shape}")
        if a.shape != p.shape[:-2]:
            raise ConfigurationError(
                f"activation extents {a.shape} do not match pose extents {p.shape[:-2]}"
            )
        lo, hi = float(a.data.min(initial=0.0)), float(a.data.max(initial=1.0))
        if lo < 0.0 or hi > 1.0:
            raise ConfigurationError(f"activations must lie in [0,1], got range [{lo}, {hi}]")

    @property
    def batched(self) -> bool:
        return self.pose.ndim == 7

    @property
    def extents(self) -> tuple:
        return self.pose.shape[-6:-3]

    @property
    def types(self) -> int:
        return self.pose.shape[-3]


@dataclass
class TransformBank:
    """One learned 4x4 transform per (input type, output type) pair.

    Shared across every spatial position, so the weight count is independent
    of grid extent and receptive-field volume.
    """

    weights: Tensor

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[-2:] != (4, 4):
            raise ConfigurationError(
                f"transform bank must be [C_in, C_out, 4, 4], got {self.weights.shape}"
            )

    @property
    def types_in(self) -> int:
        return self.weights.shape[0]

    @property
    def types_out(self) -> int:
        return self.weights.shape[1]


@dataclass
class RoutingConfig:
    """EM routing knobs plus the learned per-output-type beta scalars."""

    beta_a: Tensor
    beta_u: Tensor
    iterations: int = 3
    inv_temp_start: float = 1.0
    inv_temp_end: float = 3.0
    variance_floor: float = 1e-6

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("routing needs at least one iteration")
        if self.variance_floor <= 0:
            raise ConfigurationError("variance_floor must be positive")
        if self.beta_a.ndim != 1 or self.beta_a.shape != self.beta_u.shape:
            raise ConfigurationError("beta_a and beta_u must be 1-D with one entry per output type")

    def schedule(self) -> np.ndarray:
        return np.linspace(self.inv_temp_start, self.inv_temp_end, self.iterations)


# ---------------------------------------------------------------------------
# vote-product accounting


class VoteCounter:
    """Counts 4x4 vote matrix products performed while active."""

    def __init__(self):
        self.total = 0


_COUNTERS: list[VoteCounter] = []


@contextmanager
def count_votes():
    counter = VoteCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def _bump_votes(n: int) -> None:
    for counter in _COUNTERS:
        counter.total += n


# ---------------------------------------------------------------------------
# layer operations


def primary_capsules(
    features: Tensor,
    pose_kernel: Tensor,
    pose_bias: Tensor,
    act_kernel: Tensor,
    act_bias: Tensor,
    types: int,
    stride=(1, 1, 1),
    pose_relu: bool = True,
) -> CapsuleGrid:
    """Form the first capsule layer from a conv feature stack.

    Poses come from a valid-padding conv producing types*16 channels (ReLU by
    default), activations from a parallel conv with sigmoid.
    """
    if pose_kernel.shape[-1] != types * 16:
        raise ConfigurationError(
            f"pose kernel must emit {types * 16} channels for {types} capsule types, "
            f"got {pose_kernel.shape[-1]}"
        )
    if act_kernel.shape[-1] != types:
        raise ConfigurationError(
            f"activation kernel must emit {types} channels, got {act_kernel.shape[-1]}"
        )
    pose_raw = conv3d(features, pose_kernel, stride=stride, padding=0) + pose_bias
    if pose_relu:
        pose_raw = T.relu(pose_raw)
    pose = T.reshape(pose_raw, pose_raw.shape[:-1] + (types, 4, 4))
    act = T.sigmoid(conv3d(features, act_kernel, stride=stride, padding=0) + act_bias)
    return CapsuleGrid(pose=pose, activation=act)


def capsule_pool(grid: CapsuleGrid, rf: Sequence[int], stride: Sequence[int]) -> CapsuleGrid:
    """Average poses and activations per type over each receptive field."""
    c = grid.types
    pose_flat = T.reshape(grid.pose, grid.pose.shape[:-3] + (c * 16,))
    pooled_pose = window_mean3d(pose_flat, rf, stride)
    pooled_pose = T.reshape(pooled_pose, pooled_pose.shape[:-1] + (c, 4, 4))
    pooled_act = window_mean3d(grid.activation, rf, stride)
    return CapsuleGrid(pose=pooled_pose, activation=pooled_act)


def cast_votes(poses: Tensor, bank: TransformBank) -> Tensor:
    """V = M @ W for every (input type, output type) pair.

    ``poses`` is [..., C_in, 4, 4]; the result is [..., C_in, C_out, 4, 4].
    """
    if poses.shape[-3] != bank.types_in:
        raise ConfigurationError(
            f"pose types {poses.shape[-3]} do not match bank input types {bank.types_in}"
        )
    expanded = T.reshape(poses, poses.shape[:-2] + (1, 4, 4))
    votes = T.matmul(expanded, bank.weights)
    _bump_votes(int(np.prod(votes.shape[:-2])))
    return votes


def em_routing(votes: Tensor, in_activations: Tensor, cfg: RoutingConfig):
    """Route votes to output capsules by expectation-maximization.

    ``votes`` is [..., N, C_out, 16] (a trailing [4, 4] is accepted) and
    ``in_activations`` is [..., N]. Returns (poses [..., C_out, 4, 4],
    activations [..., C_out]). Assignments start uniform; each M-step forms
    activation-weighted Gaussian statistics per vote dimension, and each
    E-step reassigns inputs from the per-dimension densities scaled by the
    output activations. The inverse temperature anneals linearly across
    iterations. Differentiation unrolls through all iterations.
    """
    if votes.shape[-2:] == (4, 4):
        votes = T.reshape(votes, votes.shape[:-2] + (16,))
    if votes.ndim < 3:
        raise UsageError(f"votes must be [..., N, C_out, 16], got {votes.shape}")
    lead = votes.shape[:-3]
    n, j, d = votes.shape[-3:]
    if in_activations.shape != lead + (n,):
        raise UsageError(
            f"activations shape {in_activations.shape} does not match votes leading "
            f"shape {lead + (n,)}"
        )
    if j != cfg.beta_a.shape[0]:
        raise ConfigurationError(
            f"routing config has {cfg.beta_a.shape[0]} output types, votes have {j}"
        )
    dtype = votes.dtype
    a_in = T.reshape(in_activations, lead + (n, 1, 1))
    beta_a = T.reshape(cfg.beta_a, (j, 1))
    beta_u = T.reshape(cfg.beta_u, (j, 1))
    floor = float(cfg.variance_floor)
    log_2pi = math.log(2.0 * math.pi)

    mu = act_out = None
    schedule = cfg.schedule()
    r = Tensor(np.full(lead + (n, j, 1), 1.0 / j, dtype=dtype))
    for it, lam in enumerate(schedule):
        lam = float(lam)
        w = r * a_in
        sum_w = w.sum(axis=-3, keepdims=True)
        denom = sum_w + Tensor(np.where(sum_w.data <= 0.0, _DENOM_EPS, 0.0), dtype=dtype)
        mu = (w * votes).sum(axis=-3, keepdims=True) / denom
        diff = votes - mu
        var = (w * T.square(diff)).sum(axis=-3, keepdims=True) / denom + floor
        log_var = T.log(var)
        cost = (beta_u + 0.5 * log_var) * sum_w
        act_logit = (beta_a - cost.sum(axis=-1, keepdims=True)) * lam
        act_out = T.sigmoid(act_logit)
        if it + 1 < len(schedule):
            log_gauss = (-0.5) * (log_2pi + log_var + T.square(diff) / var).sum(
                axis=-1, keepdims=True
            )
            log_act = T.neg(T.softplus(T.neg(act_logit)))  # log sigmoid, stable
            logits = log_act + log_gauss
            shifted = logits - Tensor(np.max(logits.data, axis=-2, keepdims=True), dtype=dtype)
            weights = T.exp(shifted)
            r = weights / weights.sum(axis=-2, keepdims=True)

    out_pose = T.reshape(mu, lead + (j, 4, 4))
    out_act = T.reshape(act_out, lead + (j,))
    return out_pose, out_act


def coordinate_addition(votes: Tensor, extents: Sequence[int], enabled: bool = True) -> Tensor:
    """Add normalized (time, row, column) to the last three vote entries.

    ``votes`` is [..., T, H, W, C_in, C_out, 16]; grid position (t, r, c)
    contributes ((t+0.5)/T, (r+0.5)/H, (c+0.5)/W) at flat indices 13..15.
    With ``enabled`` False (the no-coordinate-addition ablation) votes pass
    through unchanged.
    """
    if not enabled:
        return votes
    t_n, h_n, w_n = (int(e) for e in extents)
    if votes.shape[-6:-3] != (t_n, h_n, w_n):
        raise UsageError(
            f"votes grid axes {votes.shape[-6:-3]} do not match extents {(t_n, h_n, w_n)}"
        )
    offsets = np.zeros((t_n, h_n, w_n, 1, 1, 16), dtype=votes.dtype)
    offsets[..., 0, 0, 13] = ((np.arange(t_n) + 0.5) / t_n)[:, None, None]
    offsets[..., 0, 0, 14] = ((np.arange(h_n) + 0.5) / h_n)[None, :, None]
    offsets[..., 0, 0, 15] = ((np.arange(w_n) + 0.5) / w_n)[None, None, :]
    return votes + Tensor(offsets, dtype=votes.dtype)


def conv_capsule_layer(
    grid: CapsuleGrid, rf: Sequence[int], stride: Sequence[int], bank: TransformBank, cfg: RoutingConfig
) -> CapsuleGrid:
    """Capsule-pool, cast pooled votes, and EM-route at every output position."""
    pooled = capsule_pool(grid, rf, stride)
    votes = cast_votes(pooled.pose, bank)
    pose, act = em_routing(
        T.reshape(votes, votes.shape[:-2] + (16,)), pooled.activation, cfg
    )
    return CapsuleGrid(pose=pose, activation=act)


def naive_conv_capsule_layer(
    grid: CapsuleGrid,
    rf: Sequence[int],
    stride: Sequence[int],
    bank: TransformBank,
    cfg: RoutingConfig,
    normalize_mass: bool = True,
) -> CapsuleGrid:
    """Reference convolutional capsule layer without pooling.

    Every capsule in the receptive field casts its own votes (transforms
    still shared per type), so routing sees C_in * C_out * window-volume
    votes per output position. With ``normalize_mass`` each window capsule
    contributes 1/volume of its activation so a window carries the same
    total assignment mass as its capsule-pooled counterpart; identical
    windows then route identically under both layers.
    """
    kt, kh, kw = (int(v) for v in rf)
    st, sh, sw = (int(v) for v in stride)
    t_in, h_in, w_in = grid.extents
    to = (t_in - kt) // st + 1
    ho = (h_in - kh) // sh + 1
    wo = (w_in - kw) // sw + 1
    c = grid.types
    pose_pieces = []
    act_pieces = []
    for a in range(kt):
        for b in range(kh):
            for cc in range(kw):
                key = (
                    Ellipsis,
                    slice(a, a + to * st, st),
                    slice(b, b + ho * sh, sh),
                    slice(cc, cc + wo * sw, sw),
                    slice(None),
                    slice(None),
                    slice(None),
                )
                piece = T.getitem(grid.pose, key)
                pose_pieces.append(T.reshape(piece, piece.shape[:-3] + (1, c, 16)))
                act_piece = T.getitem(grid.activation, key[:4] + (slice(None),))
                act_pieces.append(T.reshape(act_piece, act_piece.shape[:-1] + (1, c)))
    kvol = kt * kh * kw
    window_pose = T.reshape(T.concat(pose_pieces, axis=-3), pose_pieces[0].shape[:-3] + (kvol * c, 4, 4))
    window_act = T.reshape(T.concat(act_pieces, axis=-2), act_pieces[0].shape[:-2] + (kvol * c,))
    if normalize_mass:
        window_act = window_act * (1.0 / kvol)
    tiled_bank = TransformBank(T.concat([bank.weights] * kvol, axis=0))
    votes = cast_votes(window_pose, tiled_bank)
    pose, act = em_routing(T.reshape(votes, votes.shape[:-2] + (16,)), window_act, cfg)
    return CapsuleGrid(pose=pose, activation=act)


def class_capsules(
    grid: CapsuleGrid,
    bank: TransformBank,
    cfg: RoutingConfig,
    coord_add: bool = True,
):
    """Fully connected capsule layer: one output capsule per action class.

    Every grid capsule casts one vote per class through type-shared
    transforms; coordinate addition stamps grid position into the votes, and
    EM routing runs over all positions jointly. Returns (poses [..., N, 4, 4],
    activations [..., N]); argmax activation is the class prediction.
    """
    t_n, h_n, w_n = grid.extents
    c = grid.types
    votes = cast_votes(grid.pose, bank)  # [..., T, H, W, C, N, 4, 4]
    votes = T.reshape(votes, votes.shape[:-2] + (16,))
    votes = coordinate_addition(votes, (t_n, h_n, w_n), enabled=coord_add)
    lead = votes.shape[:-6]
    n_groups = t_n * h_n * w_n * c
    votes = T.reshape(votes, lead + (n_groups,) + votes.shape[-2:])
    acts = T.reshape(grid.activation, lead + (n_groups,))
    return em_routing(votes, acts, cfg)


def mask_poses(poses: Tensor, activations: Tensor, target=None) -> Tensor:
    """Zero all class poses except the target (training) or argmax (eval).

    Returns the masked poses flattened to [..., N*16]; at most 16 entries are
    nonzero.
    """
    n = poses.shape[-3]
    lead = poses.shape[:-3]
    if activations.shape != lead + (n,):
        raise UsageError("activations do not match poses")
    if target is None:
        chosen = np.argmax(activations.data, axis=-1)
    else:
        chosen = np.asarray(target)
        if chosen.shape not in (lead, ()):
            raise UsageError(f"target shape {chosen.shape} does not match leading {lead}")
        if np.any(chosen < 0) or np.any(chosen >= n):
            raise UsageError(f"target out of range for {n} classes: {target!r}")
        chosen = np.broadcast_to(chosen, lead)
    onehot = np.zeros(lead + (n,), dtype=poses.dtype)
    np.put_along_axis(onehot, np.asarray(chosen, dtype=np.int64)[..., None], 1.0, axis=-1)
    masked = poses * Tensor(onehot[..., None, None], dtype=poses.dtype)
    return T.reshape(masked, lead + (n * 16,))
