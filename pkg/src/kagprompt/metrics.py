"""Image- and pixel-level detection metrics: AUROC, AUPR (average precision), PRO."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

__all__ = ["ScoredSet", "auroc", "aupr", "connected_components", "pro"]

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        y = np.asarray(self.labels).reshape(-1)
        if s.shape != y.shape:
            raise ValueError(f"{s.size} scores but {y.size} labels")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be binary")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y.astype(np.int8))

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())


def _as_set(s, labels=None) -> ScoredSet:
    if isinstance(s, ScoredSet):
        return s
    return ScoredSet(np.asarray(s), np.asarray(labels))


def auroc(s, labels=None) -> float:
    """Mann-Whitney AUROC with midranks for ties.

    Accepts a :class:`ScoredSet` or ``(scores, labels)``.
    """
    s = _as_set(s, labels)
    P, N = s.n_pos, s.n_neg
    if P == 0 or N == 0:
        raise ValueError("AUROC needs at least one positive and one negative")
    ranks = rankdata(s.scores, method="average")
    u = ranks[s.labels == 1].sum() - P * (P + 1) / 2.0
    return float(u / (P * N))


def aupr(s, labels=None) -> float:
    """Average precision: mean precision at the rank of each positive.

    Items are ordered by descending score; ties keep their input order.
    """
    s = _as_set(s, labels)
    if s.n_pos == 0:
        raise ValueError("AUPR needs at least one positive")
    order = np.argsort(-s.scores, kind="stable")
    hits = s.labels[order].astype(np.float64)
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float((precision * hits).sum() / s.n_pos)


def connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """4-connected foreground regions as arrays of linear pixel indices.

    Regions are ordered by their smallest linear index.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("connected_components expects a 2-D mask")
    labelled, n = ndimage.label(mask != 0, structure=_FOUR_CONNECTED)
    flat = labelled.reshape(-1)
    regions = [np.flatnonzero(flat == k) for k in range(1, n + 1)]
    regions.sort(key=lambda r: r[0])
    return regions


def pro(maps, masks, fpr_limit: float = 0.3) -> float:
    """Per-region overlap integrated over false-positive rate up to ``fpr_limit``.

    The threshold sweeps every distinct score. At each threshold the PRO value
    is the mean, over all ground-truth regions of all images, of the fraction
    of the region predicted anomalous; the FPR is pooled over all normal
    pixels. The piecewise-linear curve starting at (0, 0) is integrated with
    the trapezoidal rule and divided by ``fpr_limit``.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise ValueError("fpr_limit must lie in (0, 1]")
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    masks = [np.asarray(g) for g in masks]
    if len(maps) != len(masks):
        raise ValueError("need one mask per score map")
    scores, weights, negatives = [], [], []
    region_sizes = []
    for m, g in zip(maps, masks):
        if m.shape != g.shape:
            raise ValueError(f"map {m.shape} and mask {g.shape} differ")
        w = np.zeros(m.size)
        for region in connected_components(g):
            w[region] = 1.0 / region.size
            region_sizes.append(region.size)
        scores.append(m.reshape(-1))
        weights.append(w)
        negatives.append((g.reshape(-1) == 0).astype(np.float64))
    n_regions = len(region_sizes)
    if n_regions == 0:
        raise ValueError("PRO needs at least one anomalous pixel")
    score = np.concatenate(scores)
    weight = np.concatenate(weights) / n_regions
    neg = np.concatenate(negatives)
    n_neg = neg.sum()
    if n_neg == 0:
        raise ValueError("PRO needs at least one normal pixel")

    order = np.argsort(-score, kind="stable")
    score, weight, neg = score[order], weight[order], neg[order]
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[score[1:] != score[:-1], True])
    fpr = np.r_[0.0, np.cumsum(neg)[ends] / n_neg]
    overlap = np.r_[0.0, np.cumsum(weight)[ends]]
    return _integrate(fpr, overlap, fpr_limit) / fpr_limit


def _integrate(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoidal area under a non-decreasing-x polyline from x=0 to ``limit``."""
    k = int(np.searchsorted(x, limit, side="left"))
    xs, ys = x[:k], y[:k]
    if k < x.size:
        x0, x1, y0, y1 = x[k - 1], x[k], y[k - 1], y[k]
        y_lim = y1 if x1 == limit else y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        xs, ys = np.r_[xs, limit], np.r_[ys, y_lim]
    return float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))
