"""Acceptance criteria, one test each. Every test prints a single PASS/FAIL
line with the measured numbers, then asserts at the stated tolerance."""
import os
import time

import numpy as np
import pytest

from kagprompt import graph as g
from kagprompt import training as tr
from kagprompt.checkpoint import (
    BadMagicError,
    TruncatedCheckpointError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from kagprompt.cli import main as cli_main
from kagprompt.config import RunConfig
from kagprompt.gradcheck import composition_grad_check, grad_check
from kagprompt.graph import GraphState, KahgParams, init_params
from kagprompt.metrics import aupr, auroc, pro
from kagprompt.scoring import image_score
from kagprompt.tensor import Tensor

from oracles import cutoff_sweep_aupr, pairwise_auroc, roc_sweep_auroc, threshold_sweep_pro
from test_metrics import random_instance, random_maps
from test_tensor import _op_cases

# reduced scale for the 5-seed ablation: 15 trainings must fit in well under an hour
ABLATION = RunConfig(feat_size=8, image_size=32, n_train=100, epochs=20)


@pytest.fixture()
def report(capsys):
    def emit(n, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {title}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return emit


def test_criterion_1_gradient_verification(report):
    t0 = time.perf_counter()
    op_worst, op_fail = 0.0, []
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        for name, fn, inputs in _op_cases(rng):
            rep = grad_check(fn, [Tensor(a) for a in inputs], eps=1e-5, tol=1e-4)
            op_worst = max(op_worst, rep.max_rel_error)
            if not rep.passed:
                op_fail.append((seed, name))
    t_ops = time.perf_counter() - t0
    comp = [composition_grad_check(seed, eps=1e-5, tol=1e-4) for seed in range(20)]
    elapsed = time.perf_counter() - t0
    comp_worst = max(r.max_rel_error for r in comp)
    ok = not op_fail and all(r.passed for r in comp) and elapsed < 60.0
    report(
        1,
        "gradient verification",
        ok,
        f"ops worst {op_worst:.2e} in {t_ops:.1f}s, composition worst {comp_worst:.2e} over "
        f"{len(comp)} seeds x {comp[0].n_checked} coords, total {elapsed:.1f}s (limit 60s)",
    )
    assert not op_fail, op_fail
    assert all(r.passed for r in comp), [str(r) for r in comp if not r.passed]
    assert comp_worst < 1e-4
    assert elapsed < 60.0


def test_criterion_2_metric_oracles(report):
    rng = np.random.default_rng(20240)
    worst = 0.0
    for _ in range(200):
        scores, labels = random_instance(rng)
        a = auroc(scores, labels)
        worst = max(worst, abs(a - roc_sweep_auroc(scores, labels)), abs(a - pairwise_auroc(scores, labels)))
        worst = max(worst, abs(aupr(scores, labels) - cutoff_sweep_aupr(scores, labels)))
        maps, masks = random_maps(rng)
        worst = max(worst, abs(pro(maps, masks) - threshold_sweep_pro(maps, masks)))
    anchors = auroc([0.1, 0.2, 0.7, 0.9], [0, 0, 1, 1]) == 1.0 and auroc([0.4] * 4, [0, 1, 0, 1]) == 0.5
    ok = worst < 1e-9 and anchors
    report(2, "metric oracle equivalence", ok, f"200 instances, worst |diff| {worst:.1e}, anchors {anchors}")
    assert worst < 1e-9
    assert anchors


def test_criterion_3_structural_invariants(report):
    failures = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        base = init_params(4, 4, 6, 8, seed=seed)
        arrays = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in base.as_arrays().items()}
        for i in range(4):
            arrays[f"intra.{i}.alpha"] = np.asarray(rng.uniform(0.2, 1.5))
        p = KahgParams.from_arrays(arrays)
        P = [Tensor(rng.standard_normal((2, 4, 4, 4))) for _ in range(4)]
        states: list[GraphState] = []
        g.run_kahg(P, p, 3, states)
        for s in states:
            for (i, j), e in s.line_edges.items():
                if e.data.tobytes() != np.ascontiguousarray(np.swapaxes(s.line_edges[(j, i)].data, -1, -2)).tobytes():
                    failures.append(f"seed {seed}: e_{j}{i} != e_{i}{j}^T")
            for att in s.attention:
                if np.abs(att.data.sum(axis=-1) - 1.0).max() > 1e-12 or att.data.min() < 0:
                    failures.append(f"seed {seed}: softmax row not stochastic")
            for a in s.gates.values():
                if not (np.all(a.data > 0) and np.all(a.data < 1)):
                    failures.append(f"seed {seed}: gate outside (0, 1)")
        zero_alpha = KahgParams.from_arrays({**arrays, **{f"intra.{i}.alpha": np.asarray(0.0) for i in range(4)}})
        states = []
        g.run_kahg(P, zero_alpha, 2, states)
        for s in states:
            if any(n.data.tobytes() != e.data.tobytes() for n, e in zip(s.nodes, s.loop_edges)):
                failures.append(f"seed {seed}: alpha = 0 loop edge is not the identity")
        V = g.embed_nodes(P, p)
        if [o.data.tobytes() for o in g.run_kahg(P, p, 0)] != [g.flatten_patches(v).data.tobytes() for v in V]:
            failures.append(f"seed {seed}: T = 0 differs from the no-graph baseline")
        M = rng.uniform(0, 1, (16, 16))
        if image_score(float(rng.uniform()), M, 0.0, 1)[1] != M.max():
            failures.append(f"seed {seed}: image_score(k=1, gamma=0) != max(M)")
        s2 = [image_score(0.0, M, 0.0, k)[0] for k in range(1, 257)]
        if any(b > a for a, b in zip(s2, s2[1:])):
            failures.append(f"seed {seed}: s2 increases with k")
    ok = not failures
    report(3, "structural invariants", ok, "10 seeds, T = 3, batch 2" if ok else "; ".join(failures[:3]))
    assert not failures, failures


def test_criterion_4_default_end_to_end(report):
    cfg = RunConfig()
    t0 = time.perf_counter()
    ws = tr.prepare(cfg)
    ckpt, history = tr.train(cfg, ws)
    t_train = time.perf_counter() - t0
    rep = tr.evaluate(ckpt, cfg, ws)
    ok_time = t_train < 600.0
    ok_quality = rep["image_auroc"] >= 0.90 and rep["pixel_auroc"] >= 0.90
    ok_loss = history[-1] < history[0]
    report(
        4,
        "toy end-to-end regression",
        ok_time and ok_quality and ok_loss,
        f"train {t_train:.0f}s (limit 600s), image AUROC {rep['image_auroc']:.4f}, "
        f"pAUROC {rep['pixel_auroc']:.4f}, PRO {rep['pixel_pro']:.4f}, loss {history[0]:.4f} -> {history[-1]:.4f}",
    )
    assert rep["image_auroc"] >= 0.90
    assert rep["pixel_auroc"] >= 0.90
    assert ok_loss
    assert t_train < 600.0, f"training took {t_train:.0f}s"


def test_criterion_5_ablation_direction(report):
    rows = []
    for seed in range(5):
        cfg = ABLATION.replace(seed=seed)
        ws = tr.prepare(cfg)
        res = {}
        for name, c in (("graph", cfg), ("nograph", cfg.replace(T=0)), ("single", cfg.replace(kernel_enabled=False))):
            ckpt, _ = tr.train(c, ws)
            res[name] = tr.evaluate(ckpt, c, ws)["image_auroc"]
        rows.append(res)
    graph_wins = sum(r["graph"] > r["nograph"] for r in rows)
    kernel_wins = sum(r["graph"] > r["single"] for r in rows)
    detail = ", ".join(f"s{i}: {r['graph']:.3f}/{r['nograph']:.3f}/{r['single']:.3f}" for i, r in enumerate(rows))
    ok = graph_wins >= 4 and kernel_wins >= 3
    report(
        5,
        "ablation direction",
        ok,
        f"graph beats T=0 in {graph_wins}/5, multi-kernel beats 1x1 in {kernel_wins}/5; "
        f"image AUROC graph/T=0/1x1 {detail}",
    )
    assert graph_wins >= 4
    assert kernel_wins >= 3


def _cli_run(out_dir, cfg_path):
    args = ["--config", cfg_path, "--out-dir", out_dir]
    assert cli_main(args + ["train"]) == 0
    assert cli_main(args + ["eval"]) == 0
    assert cli_main(args + ["render", "--indices", "0,7"]) == 0
    assert cli_main(args + ["sweep", "--param", "T", "--values", "0,1"]) == 0
    files = {}
    for root, _, names in os.walk(out_dir):
        for n in names:
            path = os.path.join(root, n)
            with open(path, "rb") as fh:
                files[os.path.relpath(path, out_dir)] = fh.read()
    return files


def test_criterion_6_determinism_and_persistence(report, tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(
        "seed = 77\nepochs = 2\nn_train = 6\nn_test = 4\nfeat_size = 4\nimage_size = 16\n"
        "c_prime = 4\nc_enc = 4\nc_cls = 8\ntop_k = 5\nT = 2\n"
    )
    a = _cli_run(str(tmp_path / "a"), str(cfg_path))
    b = _cli_run(str(tmp_path / "b"), str(cfg_path))
    identical = a == b and len(a) >= 8

    ckpt = load_checkpoint(str(tmp_path / "a" / "checkpoint.kagp"))
    save_checkpoint(ckpt, str(tmp_path / "copy.kagp"))
    back = load_checkpoint(str(tmp_path / "copy.kagp"))
    roundtrip = set(back.tensors) == set(ckpt.tensors) and all(
        back.tensors[k].tobytes() == ckpt.tensors[k].tobytes() and back.tensors[k].shape == ckpt.tensors[k].shape
        for k in ckpt.tensors
    )
    roundtrip &= back.config == ckpt.config and to_bytes(back) == a["checkpoint.kagp"]

    raw = a["checkpoint.kagp"]
    typed = []
    for bad, kind in ((raw[: len(raw) // 3], TruncatedCheckpointError), (b"PGAK" + raw[4:], BadMagicError)):
        try:
            from_bytes(bad)
            typed.append(False)
        except kind:
            typed.append(True)
    ok = identical and roundtrip and all(typed)
    report(
        6,
        "determinism and persistence",
        ok,
        f"{len(a)} output files byte-identical: {identical}, roundtrip bit-exact over "
        f"{len(ckpt.tensors)} tensors: {roundtrip}, typed errors: {all(typed)}",
    )
    assert identical, sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    assert roundtrip
    assert all(typed)
