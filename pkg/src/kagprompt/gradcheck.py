"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import AutodiffError, Tape, Tensor, backward

__all__ = ["GradCheckReport", "grad_check", "relative_error", "composition_grad_check"]


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    tol: float

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_error={self.max_rel_error:.3e} (tol {self.tol:g}, {self.n_checked} coords)"


# Below this magnitude gradients are compared absolutely (to tol * REL_FLOOR).
# One ulp of a loss near 20, differenced at eps = 1e-5, is already ~2e-10.
REL_FLOOR = 1e-5


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    """``|ad - fd| / max(|ad|, |fd|, floor)``.

    The floor keeps exactly-zero gradients (e.g. a key bias, which every
    softmax row absorbs) from turning finite-difference roundoff of order
    1e-11 into a relative error of order one.
    """
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), floor)
    return np.abs(g_ad - g_fd) / denom


def _scalar(y: Tensor) -> float:
    if not isinstance(y, Tensor) or y.size != 1:
        shape = getattr(y, "shape", type(y).__name__)
        raise AutodiffError(f"grad_check needs a scalar-valued function, got {shape}")
    return float(y.data.reshape(()))


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    coords: Sequence[tuple[int, int]] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*x)`` with central differences.

    ``x`` may be one tensor or array, or a sequence of them (passed positionally).
    With ``max_coords`` only that many coordinates, drawn with ``seed``, are
    perturbed; ``coords`` lists explicit ``(argument, flat index)`` pairs
    instead. Otherwise every coordinate is perturbed.
    """
    if eps <= 0 or tol <= 0:
        raise ValueError("eps and tol must be positive")
    xs = [x] if isinstance(x, (Tensor, np.ndarray)) else list(x)
    xs = [t if isinstance(t, Tensor) else Tensor(t) for t in xs]
    leaves = [Tensor(t.data, requires_grad=True) for t in xs]
    with Tape():
        y = f(*leaves)
        _scalar(y)
        backward(y)
    g_ad = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]

    if coords is not None:
        coords = [(int(k), int(i)) for k, i in coords]
    else:
        coords = [(k, i) for k, t in enumerate(xs) for i in range(t.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[p] for p in pick]

    base = [t.data.copy() for t in xs]
    worst = 0.0
    for k, i in coords:
        vals = []
        for step in (eps, -eps):
            arr = base[k].copy()
            arr.reshape(-1)[i] += step
            args = [Tensor(arr) if j == k else Tensor(base[j]) for j in range(len(xs))]
            vals.append(_scalar(f(*args)))
        g_fd = (vals[0] - vals[1]) / (2 * eps)
        err = float(relative_error(np.array(g_ad[k].reshape(-1)[i]), np.array(g_fd)))
        worst = max(worst, err)
    return GradCheckReport(worst, worst < tol, len(coords), tol)


def composition_grad_check(
    seed: int,
    n_layers: int = 4,
    c_prime: int = 8,
    size: int = 4,
    T: int = 2,
    batch: int = 2,
    per_tensor: int = 1,
    jitter: float = 0.02,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Check the whole trainable path: graph, text-alignment maps, cls adapter
    and the combined loss, at a random parameter point.

    The point is the seeded initialization plus ``jitter`` Gaussian noise, with
    loop-edge scales drawn away from zero so the attention branch carries
    gradient. Inputs look like encoder taps (values in [0, 1)). Every
    parameter tensor and input map contributes ``per_tensor`` random
    coordinates.
    """
    from .graph import KahgParams, init_params, run_kahg
    from .losses import LossWeights, total_loss
    from .scoring import global_score_s1, text_alignment_map
    from .synth import text_stub

    rng = np.random.default_rng(seed)
    c_enc = c_cls = c_prime
    params = init_params(n_layers, c_enc, c_prime, c_cls, seed)
    arrays = {}
    for name, a in params.as_arrays().items():
        if name.endswith(".alpha"):
            arrays[name] = np.asarray(rng.uniform(0.3, 1.0))
        else:
            arrays[name] = a + jitter * rng.standard_normal(a.shape)
    names = sorted(arrays)
    P = [np.tanh(np.abs(rng.standard_normal((batch, c_enc, size, size)))) for _ in range(n_layers)]
    cls = rng.standard_normal((batch, c_cls))
    labels = np.arange(batch) % 2
    G = (rng.random((batch, size, size)) < 0.3).astype(np.float64)
    G[0] = 0.0
    text = text_stub(seed, c_prime)
    img = 2 * size

    def loss_fn(*leaves):
        kp = KahgParams(dict(zip(names, leaves[: len(names)])), n_layers)
        O = run_kahg(list(leaves[len(names) :]), kp, T)
        _, layer_maps, normal_maps = text_alignment_map(O, text, img, img, with_normal=True)
        logits, _ = global_score_s1(Tensor(cls), kp, text)
        return total_loss(logits, labels, layer_maps, G, LossWeights(), normal_maps)

    xs = [Tensor(arrays[n]) for n in names] + [Tensor(p) for p in P]
    coords = []
    for k, t in enumerate(xs):
        m = min(per_tensor, t.size)
        coords += [(k, int(i)) for i in rng.choice(t.size, size=m, replace=False)]
    return grad_check(loss_fn, xs, eps=eps, tol=tol, coords=coords)
