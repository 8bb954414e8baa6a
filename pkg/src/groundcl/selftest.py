"""Quick oracle and gradient checks runnable from the command line."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import tensor as T
from .losses import contrastive_loss, detection_loss, triplet_loss
from .model import (
    ModelConfig,
    ProposalBank,
    adjacency,
    forward,
    gcn_forward,
    init_params,
    iou,
    make_batch,
    roi_pool,
    word_attention,
)
from .sampler import Corpus, MiningIndex, mine_negatives_language
from .world import DatasetConfig, make_datasets, resolve


def _grad_ops(rng) -> float:
    worst = 0.0
    cases: list[tuple[Callable, tuple]] = [
        (lambda x: T.sum(T.sigmoid(x)), (3, 4)),
        (lambda x: T.sum(T.mul(T.softmax(x), np.arange(4.0))), (2, 4)),
        (lambda x: T.sum(T.log(T.add(T.exp(x), 1.0))), (5,)),
        (lambda x: T.sum(T.l2_distance(x, np.ones((3, 4)))), (3, 4)),
        (lambda x: T.sum(T.matmul(x, np.arange(12.0).reshape(4, 3))), (2, 4)),
    ]
    for f, shape in cases:
        worst = max(worst, T.grad_check(f, T.tensor(rng.normal(size=shape))))
    return worst


def _contrastive(rng) -> float:
    worst = 0.0
    for _ in range(50):
        d, P, N = 4, int(rng.integers(1, 4)), int(rng.integers(1, 6))
        unit = lambda a: a / np.linalg.norm(a, axis=-1, keepdims=True)
        z, zp, zn = unit(rng.normal(size=d)), unit(rng.normal(size=(P, d))), unit(rng.normal(size=(N, d)))
        got = float(contrastive_loss(T.constant(z), T.constant(zp), T.constant(zn), 0.1).data)
        ep, en = np.exp(zp @ z / 0.1).sum(), np.exp(zn @ z / 0.1).sum()
        worst = max(worst, abs(got - -math.log(ep / (ep + en))))
    return worst


def _geometry(rng) -> float:
    worst = abs(iou((0, 0, 2, 2), (1, 1, 3, 3)) - 1 / 7)
    K, d = 6, 5
    X = rng.normal(size=(K, d))
    p = {"gcn.w1": T.constant(rng.normal(size=(d, 4))), "gcn.w2": T.constant(rng.normal(size=(4, 3)))}
    A = adjacency(K)
    ref = np.maximum(A @ np.maximum(A @ X @ p["gcn.w1"].data, 0) @ p["gcn.w2"].data, 0)
    worst = max(worst, np.abs(gcn_forward(T.constant(X), p).data - ref).max())
    vol = rng.normal(size=(16, 3))
    pool = np.zeros((1, 16))
    pool[0, [1, 2, 5]] = 1 / 3
    worst = max(worst, np.abs(roi_pool(T.constant(vol), pool).data[0] - vol[[1, 2, 5]].mean(0)).max())
    words, prop = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 2, 5))
    wp = {"ins.word": T.constant(rng.normal(size=(4, 2))), "ins.prop": T.constant(rng.normal(size=(5, 2)))}
    ww = np.full((1, 1, 3), 1 / 3)
    got = word_attention(T.constant(words), ww, T.constant(prop), wp).data[0, :, 0]
    for i in range(2):
        s = np.mean([(words[0, t] @ wp["ins.word"].data) @ (prop[0, i] @ wp["ins.prop"].data)
                     for t in range(3)]) / math.sqrt(2)
        worst = max(worst, abs(got[i] - 1 / (1 + math.exp(-s))))
    return worst


def run_selftest(report: Callable[[str], None] = print, seed: int = 0) -> tuple[int, int]:
    rng = np.random.default_rng(seed)
    ds = make_datasets(DatasetConfig(n_scenes=20, seed=seed))
    results: list[tuple[str, bool, str]] = []

    err = _grad_ops(rng)
    results.append(("op gradients", err < 1e-4, f"max rel err {err:.2e}"))

    cfg = ModelConfig()
    params = init_params(cfg, seed)
    batch = make_batch(ds["base"].pairs("train")[:3], ProposalBank(cfg.K), cfg)
    name = "head.w2"

    def loss(x):
        q = dict(params)
        q[name] = x
        return T.mean(detection_loss(forward(q, batch, cfg).scores, batch.target))
    err = T.grad_check(loss, T.tensor(params[name].data.copy()))
    results.append(("model gradient", err < 1e-4, f"max rel err {err:.2e}"))

    err = _contrastive(rng)
    results.append(("contrastive oracle", err < 1e-10, f"max abs err {err:.2e}"))
    sym = float(contrastive_loss(T.constant(np.ones(2) / math.sqrt(2)),
                                 T.constant(np.tile(np.ones(2) / math.sqrt(2), (2, 1))),
                                 T.constant(np.tile(np.ones(2) / math.sqrt(2), (6, 1)))).data)
    results.append(("symmetric contrastive", abs(sym - math.log(4)) < 1e-9, f"{sym:.9f}"))
    t = float(triplet_loss(T.constant(np.zeros(2)), T.constant(np.ones(2)),
                           T.constant(np.zeros(2)), 1.0).data)
    results.append(("triplet hand case", abs(t - (math.sqrt(2) + 1)) < 1e-12, f"{t:.6f}"))

    err = _geometry(rng)
    results.append(("geometry oracles", err < 1e-10, f"max abs err {err:.2e}"))

    corpus = Corpus([ds["base"], ds["plus"]])
    feats = rng.normal(size=(len(corpus), 8))
    index = MiningIndex(corpus, feats)
    ok = True
    for a in rng.choice(len(corpus), size=20, replace=False):
        got = mine_negatives_language(int(a), index, 8)
        cand = [j for j in range(len(corpus)) if corpus.scene_code[j] != corpus.scene_code[a]]
        sims = {j: float(index.features[j] @ index.features[a]) for j in cand}
        brute = sorted(cand, key=lambda j: (-sims[j], j))[:8]
        ok &= got == brute
    results.append(("mining brute force", ok, f"{len(corpus)} entries"))

    bad = 0
    total = 0
    for d in ds.values():
        for split in ("train", "val", "test"):
            for scene, e in d.pairs(split):
                total += 1
                bad += resolve(e, scene) != e.target_object_id
    results.append(("expressions resolve", bad == 0, f"{total - bad}/{total}"))

    for name, passed, detail in results:
        report(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return sum(p for _, p, _ in results), len(results)
