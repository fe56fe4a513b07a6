"""Multi-information fusion: text-alignment map, memory-bank map, and image score."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor

__all__ = [
    "TextFeatures",
    "MemoryBank",
    "AnomalyResult",
    "text_alignment_map",
    "build_memory_bank",
    "memory_map",
    "fuse_maps",
    "global_score_s1",
    "image_score",
    "score_image",
]

EPS = 1e-12


@dataclass(frozen=True)
class TextFeatures:
    """Unit normal/abnormal text vectors and the cosine logit scale."""

    normal: np.ndarray
    abnormal: np.ndarray
    logit_scale: float = 10.0

    def __post_init__(self):
        for name in ("normal", "abnormal"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if abs(np.linalg.norm(v) - 1.0) > 1e-12:
                raise ValueError(f"text feature {name!r} must have unit norm")
            v.flags.writeable = False
            object.__setattr__(self, name, v)
        if not self.logit_scale > 0:
            raise ValueError("logit_scale must be positive")

    @property
    def matrix(self) -> np.ndarray:
        """``[C', 2]`` with columns (normal, abnormal)."""
        return np.stack([self.normal, self.abnormal], axis=1)


@dataclass(frozen=True)
class MemoryBank:
    """Per-layer unit-norm support patches, each ``[n_shots * HW, C']``."""

    layers: tuple[np.ndarray, ...]

    @property
    def n_layers(self) -> int:
        return len(self.layers)


@dataclass
class AnomalyResult:
    M_p: np.ndarray
    M_v: np.ndarray
    M: np.ndarray
    layer_maps: list[np.ndarray]
    s1_logits: np.ndarray
    s1: float
    s2: float
    s: float


def _two_class_probs(feats: Tensor, text: TextFeatures) -> tuple[Tensor, Tensor]:
    """Normal- and abnormal-class probabilities of ``logit_scale * cos`` against both prompts.

    Both channels come straight from the softmax so that neither is formed as
    ``1 - p``, which loses most of its digits once the map saturates.
    """
    unit = tt.l2_normalize(feats, axis=-1, eps=EPS)
    logits = tt.scale(tt.matmul(unit, Tensor(text.matrix)), text.logit_scale)
    probs = tt.softmax(logits, axis=-1)
    return tt.take(probs, 0, axis=-1), tt.take(probs, 1, axis=-1)


def text_alignment_map(
    O: list[Tensor],
    text: TextFeatures,
    H: int,
    W: int,
    grid: tuple[int, int] | None = None,
    with_normal: bool = False,
):
    """Per-layer abnormal-probability maps and their upsampled layer mean.

    ``O`` holds ``[..., HW, C']`` patch features. ``grid`` gives the feature
    grid ``(h, w)``; a square grid is assumed when omitted. Returns
    ``(M_p, layer_maps)``, plus the per-layer normal-class maps when
    ``with_normal`` is set.
    """
    if not O:
        raise ValueError("text_alignment_map needs at least one layer")
    n = O[0].shape[-2]
    if grid is None:
        side = int(round(np.sqrt(n)))
        if side * side != n:
            raise ValueError(f"cannot infer a square grid from {n} patches; pass grid=")
        grid = (side, side)
    lead = O[0].shape[:-2]
    layer_maps, normal_maps = [], []
    for o in O:
        p_n, p_a = _two_class_probs(o, text)
        layer_maps.append(tt.reshape(p_a, (*lead, *grid)))
        normal_maps.append(tt.reshape(p_n, (*lead, *grid)))
    acc = layer_maps[0]
    for m in layer_maps[1:]:
        acc = tt.add(acc, m)
    mean = tt.scale(acc, 1.0 / len(layer_maps))
    M_p = tt.bilinear_upsample(mean, H, W)
    if with_normal:
        return M_p, layer_maps, normal_maps
    return M_p, layer_maps


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, EPS)


def build_memory_bank(support_O: list[list[np.ndarray]]) -> MemoryBank:
    """Stack L2-normalized support patches per layer.

    ``support_O[shot][layer]`` is a ``[HW, C']`` array (Tensors accepted).
    """
    if not support_O:
        raise ValueError("memory bank needs at least one support shot")
    L = len(support_O[0])
    if any(len(s) != L for s in support_O):
        raise ValueError("all support shots must have the same number of layers")
    layers = []
    for i in range(L):
        rows = [np.asarray(getattr(s[i], "data", s[i]), dtype=np.float64) for s in support_O]
        bank = _unit_rows(np.concatenate(rows, axis=0))
        bank.flags.writeable = False
        layers.append(bank)
    return MemoryBank(tuple(layers))


def memory_map(
    O: list[np.ndarray], bank: MemoryBank, H: int, W: int, grid: tuple[int, int] | None = None
) -> np.ndarray:
    """Nearest-support cosine distance ``(1 - max cos) / 2``, layer mean, upsampled.

    Works on a single image (``[HW, C']`` per layer) or a batch
    (``[B, HW, C']``); returns ``[H, W]`` or ``[B, H, W]``.
    """
    if len(O) != bank.n_layers:
        raise ValueError(f"query has {len(O)} layers, bank has {bank.n_layers}")
    acc = None
    for o, r in zip(O, bank.layers):
        if r.shape[0] == 0:
            raise ValueError("memory bank layer is empty")
        q = _unit_rows(np.asarray(getattr(o, "data", o), dtype=np.float64))
        cos = np.matmul(q, r.T).max(axis=-1)
        d = np.clip((1.0 - cos) / 2.0, 0.0, 1.0)
        acc = d if acc is None else acc + d
    mean = acc / bank.n_layers
    n = mean.shape[-1]
    if grid is None:
        side = int(round(np.sqrt(n)))
        grid = (side, side)
    mean = mean.reshape(*mean.shape[:-1], *grid)
    return tt.bilinear_upsample(Tensor(mean), H, W).data


def fuse_maps(M_p: np.ndarray, M_v: np.ndarray, gamma: float) -> np.ndarray:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    M_p, M_v = np.asarray(M_p), np.asarray(M_v)
    if M_p.shape != M_v.shape:
        raise ValueError(f"map shapes differ: {M_p.shape} vs {M_v.shape}")
    return gamma * M_p + (1.0 - gamma) * M_v


def global_score_s1(F_cls: Tensor, params, text: TextFeatures) -> tuple[Tensor, Tensor]:
    """Adapter logits ``[..., 2]`` for (normal, abnormal) and the abnormal probability."""
    F_cls = tt.as_tensor(F_cls)
    lead = F_cls.shape[:-1]
    w, b = params["adapter.weight"], params["adapter.bias"]
    rows = tt.reshape(F_cls, (-1, F_cls.shape[-1]))
    adapted = tt.add(tt.matmul(rows, tt.swapaxes(w, 0, 1)), b)
    unit = tt.l2_normalize(adapted, axis=-1, eps=EPS)
    logits = tt.scale(tt.matmul(unit, Tensor(text.matrix)), text.logit_scale)
    logits = tt.reshape(logits, (*lead, 2))
    return logits, tt.take(tt.softmax(logits, axis=-1), 1, axis=-1)


def image_score(s1: float, M: np.ndarray, gamma: float, k: int) -> tuple[float, float]:
    """Top-k mean ``s2`` of the fused map and the final score ``gamma*s1 + (1-gamma)*s2``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    flat = np.asarray(M, dtype=np.float64).reshape(-1)
    k = min(k, flat.size)
    top = np.sort(flat)[::-1][:k]
    s2 = float(top.mean())
    return s2, float(gamma * s1 + (1.0 - gamma) * s2)


def score_image(
    O: list[np.ndarray],
    F_cls: np.ndarray,
    params,
    text: TextFeatures,
    bank: MemoryBank,
    H: int,
    W: int,
    gamma: float,
    k: int,
) -> AnomalyResult:
    """Full scoring of one query image from its graph outputs."""
    O_t = [tt.as_tensor(o) for o in O]
    M_p, layer_maps = text_alignment_map(O_t, text, H, W)
    M_v = memory_map([o.data for o in O_t], bank, H, W)
    M = fuse_maps(M_p.data, M_v, gamma)
    logits, s1 = global_score_s1(F_cls, params, text)
    s2, s = image_score(float(s1.data), M, gamma, k)
    return AnomalyResult(
        M_p=M_p.data,
        M_v=M_v,
        M=M,
        layer_maps=[m.data for m in layer_maps],
        s1_logits=logits.data,
        s1=float(s1.data),
        s2=s2,
        s=s,
    )
