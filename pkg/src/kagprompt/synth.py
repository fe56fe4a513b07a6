"""Seeded toy data: textured normals, paste-and-blend anomalies, a frozen
multi-layer conv encoder and fixed text-feature stubs.

Every sample draws from its own seed substream (splitmix64 of the master
seed, a split code and the sample index), so any sample can be regenerated
without replaying the others.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .scoring import TextFeatures

__all__ = [
    "SyntheticSample",
    "StyleParams",
    "NORMAL_STYLE",
    "DONOR_STYLE",
    "ToyEncoder",
    "Dataset",
    "splitmix64",
    "substream_seed",
    "gen_normal",
    "synth_anomaly",
    "make_encoder",
    "toy_encode",
    "text_stub",
    "make_splits",
    "dump_dataset",
]

MASK64 = (1 << 64) - 1

SPLIT_CODES = {
    "train": 1,
    "train_anomaly": 2,
    "train_donor": 3,
    "support": 4,
    "test": 5,
    "test_anomaly": 6,
    "test_donor": 7,
    "test_base": 8,
}


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x``."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def substream_seed(master: int, split: str, index: int) -> int:
    s = splitmix64(master & MASK64)
    s = splitmix64(s ^ SPLIT_CODES[split])
    return splitmix64(s ^ (index & MASK64))


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray  # [1, S, S] in [0, 1]
    mask: np.ndarray  # [S, S] binary
    label: int
    seed: int

    def __post_init__(self):
        if (self.label == 1) != bool(self.mask.any()):
            raise ValueError("label must be 1 exactly when the mask is non-empty")
        for a in (self.image, self.mask):
            a.flags.writeable = False


@dataclass(frozen=True)
class StyleParams:
    """Texture family: plane waves ``(cycles per image, angle in rad, amplitude)``."""

    waves: tuple[tuple[float, float, float], ...]
    base: float = 0.5
    noise: float = 0.02
    size: int = 64


NORMAL_STYLE = StyleParams(waves=((3.0, 0.3, 0.15), (5.0, 1.4, 0.12), (8.0, 2.3, 0.08)))
DONOR_STYLE = StyleParams(waves=((11.0, 0.9, 0.2), (15.0, 2.0, 0.15)), base=0.4, noise=0.03)


def gen_normal(seed: int, style: StyleParams = NORMAL_STYLE) -> SyntheticSample:
    rng = np.random.default_rng(seed)
    S = style.size
    yy, xx = np.mgrid[0:S, 0:S] / S
    img = np.full((S, S), style.base)
    for cycles, angle, amp in style.waves:
        phase = rng.uniform(0, 2 * np.pi)
        proj = xx * np.cos(angle) + yy * np.sin(angle)
        img += amp * np.sin(2 * np.pi * cycles * proj + phase)
    img += style.noise * rng.standard_normal((S, S))
    img = np.clip(img, 0.0, 1.0)[None]
    return SyntheticSample(img, np.zeros((S, S), dtype=np.uint8), 0, seed)


def synth_anomaly(
    normal: SyntheticSample,
    donor: SyntheticSample,
    seed: int,
    side_range: tuple[int, int] = (4, 20),
    alpha_range: tuple[float, float] = (0.5, 1.0),
    alpha: float | None = None,
) -> SyntheticSample:
    """Blend a random donor rectangle into the normal image; the rectangle is the mask."""
    if normal.label or donor.label:
        raise ValueError("synth_anomaly expects two normal samples")
    rng = np.random.default_rng(seed)
    S = normal.image.shape[-1]
    h, w = (int(v) for v in rng.integers(side_range[0], side_range[1] + 1, size=2))
    sy, sx = (int(v) for v in rng.integers(0, [S - h + 1, S - w + 1]))
    ty, tx = (int(v) for v in rng.integers(0, [S - h + 1, S - w + 1]))
    a = float(rng.uniform(*alpha_range)) if alpha is None else float(alpha)
    img = normal.image.copy()
    patch = donor.image[:, sy : sy + h, sx : sx + w]
    img[:, ty : ty + h, tx : tx + w] = a * patch + (1.0 - a) * img[:, ty : ty + h, tx : tx + w]
    mask = np.zeros((S, S), dtype=np.uint8)
    mask[ty : ty + h, tx : tx + w] = 1
    return SyntheticSample(img, mask, 1, seed)


# ---------------------------------------------------------------------------
# frozen encoder


@dataclass(frozen=True)
class ToyEncoder:
    weights: dict[str, np.ndarray]
    image_size: int
    feat_size: int
    seed: int

    @property
    def c_enc(self) -> int:
        return self.weights["stage1"].shape[0]

    @property
    def c_cls(self) -> int:
        return self.weights["cls"].shape[0]


def make_encoder(seed: int, c_enc: int = 16, c_cls: int = 32, image_size: int = 64, feat_size: int = 16) -> ToyEncoder:
    """Random frozen 4-stage conv encoder; the input is pooled 4x down to the feature grid."""
    if image_size != 4 * feat_size:
        raise ValueError("image_size must be 4 * feat_size")
    rng = np.random.default_rng(seed)
    w = {
        "stage1": rng.standard_normal((c_enc, 1, 5, 5)) / 5.0,
        "stage2": rng.standard_normal((c_enc, c_enc, 3, 3)) / np.sqrt(9 * c_enc),
        "stage3": rng.standard_normal((c_enc, c_enc, 3, 3)) / np.sqrt(9 * c_enc),
        "stage4": rng.standard_normal((c_enc, c_enc, 3, 3)) / np.sqrt(9 * c_enc),
        "cls": rng.standard_normal((c_cls, c_enc)) / np.sqrt(c_enc),
    }
    for a in w.values():
        a.flags.writeable = False
    return ToyEncoder(w, image_size, feat_size, seed)


def _pool2(x: np.ndarray) -> np.ndarray:
    *lead, H, W = x.shape
    return x.reshape(*lead, H // 2, 2, W // 2, 2).mean(axis=(-3, -1))


def _stage(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    return np.tanh(np.abs(tt.conv2d(tt.Tensor(x), tt.Tensor(k)).data))


def toy_encode(image, enc: ToyEncoder) -> tuple[list[tt.Tensor], tt.Tensor]:
    """Four tapped feature maps ``[C_enc, h, h]`` and the cls vector.

    Accepts ``[1, S, S]`` or a batch ``[B, 1, S, S]``.
    """
    x = np.asarray(getattr(image, "data", image), dtype=np.float64)
    S = enc.image_size
    if x.shape[-3:] != (1, S, S):
        raise ValueError(f"toy_encode expects [1,{S},{S}] images, got {x.shape}")
    x = x - 0.5
    s1 = _pool2(_stage(x, enc.weights["stage1"]))  # S/2
    s2 = _pool2(_stage(s1, enc.weights["stage2"]))  # S/4
    s3 = _stage(s2, enc.weights["stage3"])
    s4 = _stage(s3, enc.weights["stage4"])
    taps = [_pool2(s1), s2, s3, s4]
    cls = np.tanh(s4.mean(axis=(-2, -1)) @ enc.weights["cls"].T)
    return [tt.Tensor(t) for t in taps], tt.Tensor(cls)


# ---------------------------------------------------------------------------
# text stubs


def text_stub(seed: int, dim: int = 16, logit_scale: float = 10.0) -> TextFeatures:
    """Two seeded unit vectors standing in for the encoded prompts
    "a photo of a flawless [s]" / "a photo of a damaged [s]"."""
    rng = np.random.default_rng(seed)
    while True:
        v = rng.standard_normal((2, dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        if abs(v[0] @ v[1]) <= 0.5:
            return TextFeatures(v[0], v[1], logit_scale)


# ---------------------------------------------------------------------------
# splits


@dataclass
class Dataset:
    train: list[SyntheticSample]
    support: list[SyntheticSample]
    test: list[SyntheticSample]
    seed: int
    meta: dict = field(default_factory=dict)

    def all_seeds(self) -> list[int]:
        return [s.seed for split in (self.train, self.support, self.test) for s in split]


def make_splits(
    n_train: int,
    n_test: int,
    shots: int,
    seed: int,
    style: StyleParams = NORMAL_STYLE,
    donor_style: StyleParams = DONOR_STYLE,
    image_size: int | None = None,
) -> Dataset:
    """Train: ``n_train`` normals, each followed by its synthetic anomaly.
    Support: ``shots`` held-out normals. Test: ``n_test`` fresh normals then
    ``n_test`` anomalies built on further fresh normals.

    ``image_size`` rescales both styles and the rectangle side range
    (``[4, 20]`` px at 64 px) to another resolution.
    """
    sides = (4, 20)
    if image_size is not None and image_size != style.size:
        f = image_size / style.size
        style = dataclasses.replace(style, size=image_size)
        donor_style = dataclasses.replace(donor_style, size=image_size)
        sides = (max(1, round(4 * f)), max(1, round(20 * f)))
    if shots > n_train:
        raise ValueError(f"shots ({shots}) cannot exceed n_train ({n_train})")
    if n_train < 1 or n_test < 1 or shots < 1:
        raise ValueError("n_train, n_test and shots must be >= 1")

    def normal(split, i, st=style):
        return gen_normal(substream_seed(seed, split, i), st)

    train = []
    for i in range(n_train):
        base = normal("train", i)
        donor = normal("train_donor", i, donor_style)
        train.append(base)
        train.append(synth_anomaly(base, donor, substream_seed(seed, "train_anomaly", i), sides))
    support = [normal("support", i) for i in range(shots)]
    test = [normal("test", i) for i in range(n_test)]
    for i in range(n_test):
        base = normal("test_base", i)
        donor = normal("test_donor", i, donor_style)
        test.append(synth_anomaly(base, donor, substream_seed(seed, "test_anomaly", i), sides))
    ds = Dataset(train, support, test, seed)
    seeds = ds.all_seeds()
    if len(set(seeds)) != len(seeds):
        raise RuntimeError("seed collision across splits")
    return ds


def dump_dataset(ds: Dataset, out_dir: str) -> list[str]:
    """Write ``{split}_{index:05}_{img|mask}.pgm`` for every sample."""
    from .pgm import write_pgm

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for split in ("train", "support", "test"):
        for i, s in enumerate(getattr(ds, split)):
            for kind, arr in (("img", s.image[0]), ("mask", s.mask.astype(np.float64))):
                path = os.path.join(out_dir, f"{split}_{i:05}_{kind}.pgm")
                write_pgm(arr, path)
                paths.append(path)
    return paths
