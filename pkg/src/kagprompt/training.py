"""Training (Adam on the combined loss), evaluation, sweeps and CSV output."""
from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig, _convert
from .graph import KahgParams, init_params, run_kahg
from .losses import LossWeights, downsample_mask, total_loss
from .metrics import aupr, auroc, pro
from .scoring import (
    TextFeatures,
    build_memory_bank,
    fuse_maps,
    global_score_s1,
    image_score,
    memory_map,
    text_alignment_map,
)
from .synth import Dataset, ToyEncoder, make_encoder, make_splits, splitmix64, text_stub, toy_encode

__all__ = [
    "Workspace",
    "TrainingDivergedError",
    "prepare",
    "train",
    "evaluate",
    "sweep",
    "predict",
    "write_csv",
    "csv_text",
    "SWEEP_PARAMS",
    "INFERENCE_ONLY",
]

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
N_LAYERS = 4
EVAL_BATCH = 10

SWEEP_PARAMS = ("T", "top_k", "gamma", "lr", "epochs", "lambda1", "lambda2")
INFERENCE_ONLY = ("top_k", "gamma")

# salts for the per-run seed streams
_ENCODER, _TEXT, _PARAMS, _SHUFFLE = 0xE1, 0x7E, 0x9A, 0x5F


def _derive(seed: int, salt: int) -> int:
    return splitmix64(splitmix64(seed) ^ salt)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Workspace:
    """Dataset plus everything computed from the frozen encoder, cached per data config."""

    dataset: Dataset
    encoder: ToyEncoder
    text: TextFeatures
    train_P: list[np.ndarray]
    train_cls: np.ndarray
    train_labels: np.ndarray
    train_masks: np.ndarray  # at feature resolution
    train_seeds: np.ndarray
    support_P: list[np.ndarray]
    test_P: list[np.ndarray]
    test_cls: np.ndarray
    test_labels: np.ndarray
    test_masks: np.ndarray  # at image resolution
    key: tuple = field(default=())


def _data_key(c: RunConfig) -> tuple:
    return (c.seed, c.n_train, c.n_test, c.shots, c.c_enc, c.c_cls, c.c_prime, c.feat_size, c.image_size)


def _encode(samples, enc: ToyEncoder) -> tuple[list[np.ndarray], np.ndarray]:
    imgs = np.stack([s.image for s in samples])
    P, cls = toy_encode(imgs, enc)
    return [p.data for p in P], cls.data


def prepare(config: RunConfig) -> Workspace:
    ds = make_splits(config.n_train, config.n_test, config.shots, config.seed, image_size=config.image_size)
    enc = make_encoder(_derive(config.seed, _ENCODER), config.c_enc, config.c_cls, config.image_size, config.feat_size)
    text = text_stub(_derive(config.seed, _TEXT), config.c_prime)
    train_P, train_cls = _encode(ds.train, enc)
    support_P, _ = _encode(ds.support, enc)
    test_P, test_cls = _encode(ds.test, enc)
    h = config.feat_size
    return Workspace(
        dataset=ds,
        encoder=enc,
        text=text,
        train_P=train_P,
        train_cls=train_cls,
        train_labels=np.array([s.label for s in ds.train]),
        train_masks=np.stack([downsample_mask(s.mask, h, h) for s in ds.train]),
        train_seeds=np.array([s.seed for s in ds.train], dtype=np.uint64),
        support_P=support_P,
        test_P=test_P,
        test_cls=test_cls,
        test_labels=np.array([s.label for s in ds.test]),
        test_masks=np.stack([s.mask for s in ds.test]),
        key=_data_key(config),
    )


def _check_workspace(ws: Workspace | None, config: RunConfig) -> Workspace:
    if ws is None or ws.key != _data_key(config):
        return prepare(config)
    return ws


def _initial_params(config: RunConfig) -> KahgParams:
    return init_params(
        N_LAYERS, config.c_enc, config.c_prime, config.c_cls, _derive(config.seed, _PARAMS), config.kernel_enabled
    )


def _batch_loss(params: KahgParams, ws: Workspace, idx: np.ndarray, config: RunConfig) -> tt.Tensor:
    P = [tt.Tensor(p[idx]) for p in ws.train_P]
    O = run_kahg(P, params, config.iterations)
    _, layer_maps, normal_maps = text_alignment_map(O, ws.text, config.image_size, config.image_size, with_normal=True)
    logits, _ = global_score_s1(tt.Tensor(ws.train_cls[idx]), params, ws.text)
    weights = LossWeights(config.lambda1, config.lambda2)
    return total_loss(logits, ws.train_labels[idx], layer_maps, ws.train_masks[idx], weights, normal_maps)


def _adam(params, grads, m, v, step, lr):
    b1, b2 = ADAM_BETAS
    out = {}
    for name, p in params.items():
        g = grads[name]
        m[name] = b1 * m[name] + (1 - b1) * g
        v[name] = b2 * v[name] + (1 - b2) * g * g
        mhat = m[name] / (1 - b1**step)
        vhat = v[name] / (1 - b2**step)
        out[name] = p - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return out


def train(config: RunConfig, workspace: Workspace | None = None) -> tuple[Checkpoint, list[float]]:
    """Train the graph head and adapter; returns the checkpoint and per-epoch mean losses."""
    ws = _check_workspace(workspace, config)
    arrays = _initial_params(config).as_arrays()
    m = {k: np.zeros_like(a) for k, a in arrays.items()}
    v = {k: np.zeros_like(a) for k, a in arrays.items()}
    shuffle_seed = _derive(config.seed, _SHUFFLE)
    n = len(ws.train_labels)
    step = 0
    history: list[float] = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng(splitmix64(shuffle_seed ^ epoch))
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            params = KahgParams.from_arrays(arrays).trainable()
            with tt.Tape():
                loss = _batch_loss(params, ws, idx, config)
                value = float(loss.data)
                if not np.isfinite(value):
                    batch_seed = splitmix64(splitmix64(shuffle_seed ^ epoch) ^ b)
                    raise TrainingDivergedError(
                        f"non-finite loss {value} at epoch {epoch}, batch {b} (batch seed {batch_seed}, "
                        f"sample seeds {[int(s) for s in ws.train_seeds[idx]]})"
                    )
                tt.backward(loss)
            # parameters off the loss path (e.g. the graph when T = 0) get zero gradients
            grads = {
                k: params[k].grad if params[k].grad is not None else np.zeros_like(a) for k, a in arrays.items()
            }
            step += 1
            arrays = _adam(arrays, grads, m, v, step, config.lr)
            total += value * len(idx)
        history.append(total / n)
        logger.info("epoch %d/%d loss %.6f", epoch + 1, config.epochs, history[-1])
    tensors = dict(arrays)
    tensors.update({f"adam.m.{k}": a for k, a in m.items()})
    tensors.update({f"adam.v.{k}": a for k, a in v.items()})
    return Checkpoint(tensors, config, epoch=config.epochs, step=step), history


def _params_from_checkpoint(ckpt: Checkpoint, config: RunConfig) -> KahgParams:
    expected = set(_initial_params(config).names())
    have = set(ckpt.params())
    missing = expected - have
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {sorted(missing)}")
    return KahgParams.from_arrays({k: ckpt.tensors[k] for k in sorted(expected)})


@dataclass
class Predictions:
    M: np.ndarray  # [N, H, W]
    M_p: np.ndarray
    M_v: np.ndarray
    s1: np.ndarray
    labels: np.ndarray
    masks: np.ndarray


def _graph_outputs(P: list[np.ndarray], params: KahgParams, T: int) -> list[np.ndarray]:
    return [o.data for o in run_kahg([tt.Tensor(p) for p in P], params, T)]


def predict(ckpt: Checkpoint, config: RunConfig, workspace: Workspace | None = None) -> Predictions:
    """Anomaly maps and global scores for every test image (``gamma`` applied, ``top_k`` not)."""
    ws = _check_workspace(workspace, config)
    params = _params_from_checkpoint(ckpt, config)
    T = config.iterations
    S = config.image_size
    support_O = _graph_outputs(ws.support_P, params, T)  # L x [shots, HW, C']
    bank = build_memory_bank([[o[s] for o in support_O] for s in range(config.shots)])
    Ms, Mps, Mvs, s1s = [], [], [], []
    n = len(ws.test_labels)
    for start in range(0, n, EVAL_BATCH):
        sl = slice(start, start + EVAL_BATCH)
        O = _graph_outputs([p[sl] for p in ws.test_P], params, T)
        M_p, _ = text_alignment_map([tt.Tensor(o) for o in O], ws.text, S, S)
        M_v = memory_map(O, bank, S, S)
        _, s1 = global_score_s1(tt.Tensor(ws.test_cls[sl]), params, ws.text)
        Mps.append(M_p.data)
        Mvs.append(M_v)
        Ms.append(fuse_maps(M_p.data, M_v, config.gamma))
        s1s.append(s1.data)
    return Predictions(
        M=np.concatenate(Ms),
        M_p=np.concatenate(Mps),
        M_v=np.concatenate(Mvs),
        s1=np.concatenate(s1s),
        labels=ws.test_labels,
        masks=ws.test_masks,
    )


def _metrics(pred: Predictions, gamma: float, k: int) -> dict[str, float]:
    scores = np.array([image_score(float(s1), M, gamma, k)[1] for s1, M in zip(pred.s1, pred.M)])
    return {
        "image_auroc": auroc(scores, pred.labels),
        "image_aupr": aupr(scores, pred.labels),
        "pixel_auroc": auroc(pred.M.reshape(-1), pred.masks.reshape(-1)),
        "pixel_pro": pro(list(pred.M), list(pred.masks)),
    }


def evaluate(
    ckpt: Checkpoint,
    config: RunConfig,
    workspace: Workspace | None = None,
    csv_path: str | None = None,
    run: str = "eval",
) -> dict[str, float]:
    """Image AUROC/AUPR and pixel AUROC/PRO on the synthetic test split."""
    pred = predict(ckpt, config, workspace)
    report = _metrics(pred, config.gamma, config.top_k)
    if csv_path is not None:
        write_csv([(run, k, v) for k, v in report.items()], csv_path)
    return report


def sweep(
    param: str,
    values,
    config: RunConfig,
    workspace: Workspace | None = None,
    csv_path: str | None = None,
) -> list[tuple[str, str, float]]:
    """One evaluation per value; inference-only parameters reuse a single training run."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    ws = _check_workspace(workspace, config)
    rows: list[tuple[str, str, float]] = []
    shared = None
    if param in INFERENCE_ONLY:
        shared, _ = train(config, ws)
        pred = predict(shared, config, ws)
    for raw in values:
        value = _convert(param, raw)
        cfg = config.replace(**{param: value})
        if param == "top_k":
            report = _metrics(pred, cfg.gamma, cfg.top_k)
        elif param == "gamma":
            pred_g = Predictions(
                M=fuse_maps(pred.M_p, pred.M_v, cfg.gamma),
                M_p=pred.M_p,
                M_v=pred.M_v,
                s1=pred.s1,
                labels=pred.labels,
                masks=pred.masks,
            )
            report = _metrics(pred_g, cfg.gamma, cfg.top_k)
        else:
            ckpt, _ = train(cfg, ws)
            report = evaluate(ckpt, cfg, ws)
        rows += [(f"{param}={value}", k, v) for k, v in report.items()]
    if csv_path is not None:
        write_csv(rows, csv_path)
    return rows


def csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "metric", "value"])
    for run, metric, value in sorted(rows, key=lambda r: (r[0], r[1])):
        w.writerow([run, metric, f"{value:.6f}"])
    return buf.getvalue()


def write_csv(rows, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text(rows))
