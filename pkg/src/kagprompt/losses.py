"""Training objective: cross-entropy on the global logits plus focal and
two-sided dice losses on every per-layer abnormal-probability map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor

__all__ = [
    "LossWeights",
    "cross_entropy",
    "focal_loss",
    "dice_loss",
    "total_loss",
    "downsample_mask",
    "FOCAL_GAMMA",
    "FOCAL_EPS",
    "DICE_EPS",
]

FOCAL_GAMMA = 2
FOCAL_EPS = 1e-8
DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def _labels(c) -> np.ndarray:
    c = np.asarray(c)
    if not np.all((c == 0) | (c == 1)):
        raise ValueError(f"labels must be 0 or 1, got {c}")
    return c.astype(int)


def cross_entropy(logits: Tensor, c) -> Tensor:
    """Mean ``-log softmax(logits)[c]`` over any leading batch axes."""
    logits = tt.as_tensor(logits)
    c = _labels(c)
    if logits.shape[-1] != 2 or c.shape != logits.shape[:-1]:
        raise ValueError(f"logits {logits.shape} do not match labels {c.shape}")
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, c[..., None], 1.0, axis=-1)
    picked = tt.tsum(tt.mul(tt.log_softmax(logits, axis=-1), Tensor(onehot)), axis=-1)
    return tt.scale(tt.tmean(picked), -1.0)


def _binary(G) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    if not np.all((G == 0) | (G == 1)):
        raise ValueError("ground-truth mask must be binary")
    return G


def focal_loss(M: Tensor, G, M_normal: Tensor | None = None) -> Tensor:
    """Two-channel focal loss on ``[1 - M, M]`` against a binary mask, averaged over pixels.

    ``M_normal`` optionally supplies the normal channel computed directly
    (it must equal ``1 - M``); it keeps the loss accurate where ``M`` is
    within rounding of 1.
    """
    M = tt.as_tensor(M)
    G = _binary(G)
    if M.shape != G.shape:
        raise ValueError(f"map {M.shape} and mask {G.shape} differ")
    if M_normal is None:
        M_normal = tt.sub(1.0, M)
    Gt, Ginv = Tensor(G), Tensor(1.0 - G)
    # p_t = M where G = 1, 1 - M where G = 0; q = 1 - p_t
    p_t = tt.add(tt.mul(M, Gt), tt.mul(M_normal, Ginv))
    q = tt.add(tt.mul(M_normal, Gt), tt.mul(M, Ginv))
    weight = q
    for _ in range(FOCAL_GAMMA - 1):
        weight = tt.mul(weight, q)
    term = tt.mul(weight, tt.log(tt.clip_min(p_t, FOCAL_EPS)))
    return tt.scale(tt.tmean(term), -1.0)


def dice_loss(M: Tensor, G) -> Tensor:
    """``1 - (2 sum(M G) + eps) / (sum M + sum G + eps)``, per map then averaged over a batch."""
    M, G = tt.as_tensor(M), tt.as_tensor(G)
    if M.shape != G.shape:
        raise ValueError(f"map {M.shape} and mask {G.shape} differ")
    axes = (-2, -1)
    inter = tt.tsum(tt.mul(M, G), axes)
    denom = tt.add_scalar(tt.add(tt.tsum(M, axes), tt.tsum(G, axes)), DICE_EPS)
    num = tt.add_scalar(tt.scale(inter, 2.0), DICE_EPS)
    ratio = tt.mul(num, _reciprocal(denom))
    return tt.sub(1.0, tt.tmean(ratio))


def _reciprocal(x: Tensor) -> Tensor:
    y = 1.0 / x.data
    return tt.apply_op("reciprocal", (x,), y, lambda g: (-g * y * y,))


def downsample_mask(G: np.ndarray, h: int, w: int) -> np.ndarray:
    """Average-pool a binary mask to ``h x w`` and threshold at 0.5."""
    G = np.asarray(G, dtype=np.float64)
    H, W = G.shape[-2:]
    if H % h or W % w:
        raise ValueError(f"mask {H}x{W} is not an integer multiple of {h}x{w}")
    fh, fw = H // h, W // w
    pooled = G.reshape(*G.shape[:-2], h, fh, w, fw).mean(axis=(-3, -1))
    return (pooled >= 0.5).astype(np.float64)


def total_loss(
    s1_logits: Tensor,
    c,
    layer_maps: list[Tensor],
    G,
    w: LossWeights = LossWeights(),
    normal_maps: list[Tensor] | None = None,
) -> Tensor:
    """Cross-entropy plus weighted focal and two-sided dice terms summed over layers.

    ``G`` must already be at the resolution of ``layer_maps``.
    ``normal_maps`` are the matching normal-class maps (``1 - M``) when the
    caller has them computed directly.
    """
    G = _binary(G)
    if normal_maps is not None and len(normal_maps) != len(layer_maps):
        raise ValueError("normal_maps must match layer_maps")
    loss = cross_entropy(s1_logits, c)
    Gt, Ginv = Tensor(G), Tensor(1.0 - G)
    for n, m in enumerate(layer_maps):
        m_n = tt.sub(1.0, m) if normal_maps is None else normal_maps[n]
        if w.lambda1:
            loss = tt.add(loss, tt.scale(focal_loss(m, G, m_n), w.lambda1))
        if w.lambda2:
            dice = tt.add(dice_loss(m, Gt), dice_loss(m_n, Ginv))
            loss = tt.add(loss, tt.scale(dice, w.lambda2))
    return loss
