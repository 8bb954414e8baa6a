"""Training, evaluation, checkpoints and the experiment matrices."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .encoders import language_features, token_arrays
from .losses import (
    LossConfig,
    contrastive_loss,
    detection_loss,
    total_loss,
    triplet_loss,
)
from .model import (
    Batch,
    ModelConfig,
    ProposalBank,
    forward,
    init_params,
    iou,
    make_batch,
    predict,
    project,
)
from .sampler import (
    Corpus,
    MiningIndex,
    SamplerConfig,
    SamplingError,
    build_contrastive_batch,
    sample_triplet,
)
from .tensor import Tensor
from .world import Dataset, Expression, Scene

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GCLCKPT\x00"
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ["run_id", "epoch", "loss_det", "loss_img", "loss_ins", "acc_val", "acc_test",
                  "sim_mean"]


class TrainingDiverged(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    datasets: tuple[str, ...] = ("base", "plus")
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 10
    lr0: float = 0.1
    lr_decay_fraction: float = 0.3
    lr_decay_factor: float = 0.1
    batch_size: int = 16
    clip_norm: float | None = None
    anchors_per_scene: int = 3
    aux_anchors: int | None = 2  # anchors per step that also get triplet/contrastive terms
    aux_start_epoch: int = 3  # epochs of detection-only warm-up before the other terms join
    seed: int = 0
    proposal_seed: int = 0
    eval_every_epoch: bool = True
    run_id: str = "run"

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.anchors_per_scene < 1:
            raise ValueError("anchors_per_scene must be >= 1")
        if self.aux_anchors is not None and self.aux_anchors < 0:
            raise ValueError("aux_anchors must be >= 0")
        if self.aux_start_epoch < 0:
            raise ValueError("aux_start_epoch must be >= 0")
        if self.aux_start_epoch > 0 and "det" not in self.loss.enabled:
            raise ValueError("a warm-up needs the detection term enabled")
        self.loss.validate()

    def lr(self, epoch: int) -> float:
        """Step schedule: lr0, then lr0 * factor once the decay fraction has passed."""
        boundary = math.ceil(self.lr_decay_fraction * self.epochs)
        return self.lr0 * (self.lr_decay_factor if epoch >= boundary else 1.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["datasets"] = list(self.datasets)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = d.pop("loss", {})
        loss = LossConfig(**{**loss, "enabled": tuple(loss.get("enabled", LossConfig().enabled))})
        sampler = SamplerConfig(**d.pop("sampler", {}))
        model = ModelConfig(**d.pop("model", {}))
        if "datasets" in d:
            d["datasets"] = tuple(d["datasets"])
        return cls(loss=loss, sampler=sampler, model=model, **d)

    def hash(self) -> str:
        # Epoch count and labels are left out so a run can be resumed for longer.
        d = self.to_dict()
        for k in ("run_id", "epochs", "eval_every_epoch"):
            d.pop(k, None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    config_hash: str
    epoch: int
    rng_state: dict
    vocabulary: list[str]
    model: ModelConfig
    schema_version: int = CHECKPOINT_VERSION

    def to_bytes(self) -> bytes:
        meta = json.dumps({
            "config_hash": self.config_hash,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "vocabulary": self.vocabulary,
            "model": self.model.to_dict(),
        }, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", self.schema_version))
        buf.write(struct.pack("<I", len(meta)))
        buf.write(meta)
        buf.write(struct.pack("<I", len(self.params)))
        for name, t in self.params.items():
            raw = name.encode()
            arr = np.ascontiguousarray(t.data, dtype="<f8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            payload = arr.tobytes()
            buf.write(struct.pack("<Q", len(payload)))
            buf.write(payload)
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes, expected_hash: str | None = None) -> "Checkpoint":
        view = memoryview(blob)
        if bytes(view[:8]) != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        off = 8
        (version,) = struct.unpack_from("<I", view, off)
        off += 4
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint schema {version}, expected {CHECKPOINT_VERSION}")
        (n_meta,) = struct.unpack_from("<I", view, off)
        off += 4
        meta = json.loads(bytes(view[off:off + n_meta]))
        off += n_meta
        if expected_hash is not None and meta["config_hash"] != expected_hash:
            raise CheckpointError(f"config hash mismatch: checkpoint {meta['config_hash']}, "
                                  f"expected {expected_hash}")
        (count,) = struct.unpack_from("<I", view, off)
        off += 4
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (n_name,) = struct.unpack_from("<H", view, off)
            off += 2
            name = bytes(view[off:off + n_name]).decode()
            off += n_name
            (ndim,) = struct.unpack_from("<B", view, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", view, off)
            off += 4 * ndim
            (n_bytes,) = struct.unpack_from("<Q", view, off)
            off += 8
            arr = np.frombuffer(bytes(view[off:off + n_bytes]), dtype="<f8").reshape(shape)
            off += n_bytes
            params[name] = T.tensor(arr.astype(np.float64), requires_grad=True, name=name)
        return cls(params, meta["config_hash"], meta["epoch"], meta["rng_state"],
                   meta["vocabulary"], ModelConfig(**meta["model"]), version)

    @classmethod
    def load(cls, path: str | Path, expected_hash: str | None = None) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes(), expected_hash)


# --------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def append(self, row: dict) -> None:
        self.rows.append({k: row.get(k, "") for k in METRIC_COLUMNS})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# --------------------------------------------------------------------------
# helpers


def gather(rows: Tensor, index) -> Tensor:
    """Rows of a (B, d) tensor picked by an integer array of any shape."""
    index = np.asarray(index)
    B = rows.shape[0]
    onehot = np.zeros((index.size, B))
    onehot[np.arange(index.size), index.reshape(-1)] = 1.0
    out = T.matmul(onehot, rows)
    return T.reshape(out, index.shape + rows.shape[1:])


def language_matrix(params: dict[str, Tensor], cfg: ModelConfig,
                    token_lists: Sequence[Sequence[str]], chunk: int = 2048) -> np.ndarray:
    """Sentence features for many expressions, without recording a tape."""
    out = []
    with T.no_grad():
        for i in range(0, len(token_lists), chunk):
            part = token_lists[i:i + chunk]
            w, p, m = token_arrays(part, cfg.vocab_size, cfg.pos_buckets)
            out.append(language_features(w, p, m, params).sentence.data)
    return np.concatenate(out) if out else np.zeros((0, cfg.lang_dim))


@dataclass
class StepPlan:
    pairs: list[tuple[Scene, Expression]]
    anchors: list[int]  # rows of the anchors in ``pairs``
    triplets: list[tuple[int, int, int]]  # (anchor, positive, negative) rows
    contrast: list[tuple[int, list[int], list[int]]]  # (anchor, positive rows, negative rows)


def plan_step(corpus: Corpus, anchors: Sequence[int], config: TrainConfig,
              rng: np.random.Generator, index: MiningIndex | None, aux: bool = True) -> StepPlan:
    enabled = set(config.loss.enabled)
    want_triplet = bool(enabled & {"img", "ins_tri"})
    want_cl = "ins_cl" in enabled
    rows: dict[int, int] = {}
    pairs: list[tuple[Scene, Expression]] = []

    def row(i: int) -> int:
        r = rows.get(i)
        if r is None:
            r = rows[i] = len(pairs)
            pairs.append(corpus[i].pair)
        return r

    plan = StepPlan(pairs, [], [], [])
    n_aux = len(anchors) if config.aux_anchors is None else config.aux_anchors
    if not aux:
        n_aux = 0
    for k, a in enumerate(anchors):
        ra = row(a)
        plan.anchors.append(ra)
        if k >= n_aux:
            continue
        if want_triplet:
            try:
                t = sample_triplet(corpus, rng, anchor=a)
            except SamplingError:
                t = None
            if t is not None:
                plan.triplets.append((ra, row(t.positive.index), row(t.negative.index)))
        if want_cl:
            try:
                cb = build_contrastive_batch(corpus, a, config.sampler, rng, index)
            except SamplingError:
                cb = None
            if cb is not None:
                plan.contrast.append((ra, [row(e.index) for e in cb.positives],
                                      [row(e.index) for e in cb.negatives]))
    return plan


def step_losses(params: dict[str, Tensor], plan: StepPlan, bank: ProposalBank,
                config: TrainConfig) -> tuple[dict[str, Tensor], Batch]:
    cfg = config.model
    batch = make_batch(plan.pairs, bank, cfg)
    out = forward(params, batch, cfg)
    enabled = set(config.loss.enabled)
    alpha, tau = config.loss.alpha, config.loss.tau
    parts: dict[str, Tensor] = {}

    if "det" in enabled:
        per = detection_loss(out.scores, batch.target)
        w = np.zeros(batch.size)
        w[plan.anchors] = 1.0 / len(plan.anchors)
        parts["det"] = T.dot(per, w)
    if plan.triplets:
        trip = np.array(plan.triplets)
        if "img" in enabled:
            R = T.reshape(out.response, (batch.size, -1))
            parts["img"] = T.mean(triplet_loss(gather(R, trip[:, 0]), gather(R, trip[:, 1]),
                                               gather(R, trip[:, 2]), alpha))
        if "ins_tri" in enabled:
            H = out.matched
            parts["ins_tri"] = T.mean(triplet_loss(gather(H, trip[:, 0]), gather(H, trip[:, 1]),
                                                   gather(H, trip[:, 2]), alpha))
    if "ins_cl" in enabled and plan.contrast:
        z = project(out.matched, params)
        groups: dict[tuple[int, int], list[int]] = {}
        for k, (_, p, n) in enumerate(plan.contrast):
            groups.setdefault((len(p), len(n)), []).append(k)
        total = None
        for key in sorted(groups):
            ks = groups[key]
            a_rows = np.array([plan.contrast[k][0] for k in ks])
            p_rows = np.array([plan.contrast[k][1] for k in ks])
            n_rows = np.array([plan.contrast[k][2] for k in ks])
            losses = contrastive_loss(gather(z, a_rows), gather(z, p_rows), gather(z, n_rows), tau)
            s = T.sum(losses)
            total = s if total is None else T.add(total, s)
        parts["ins_cl"] = T.scale(total, 1.0 / len(plan.contrast))
    return parts, batch


def epoch_anchors(corpus: Corpus, config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Random expression(s) per training scene of every dataset, shuffled."""
    picks = []
    for (ds, sid), idx in corpus.scene_entries.items():
        if ds not in config.datasets:
            continue
        for _ in range(config.anchors_per_scene):
            picks.append(idx[int(rng.integers(len(idx)))])
    picks = np.array(picks, dtype=np.int64)
    return picks[rng.permutation(len(picks))]


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    accuracy: float
    predictions: list[dict]

    @property
    def n(self) -> int:
        return len(self.predictions)


def _model_scorer(params, cfg: ModelConfig):
    def score(batch: Batch) -> np.ndarray:
        with T.no_grad():
            return forward(params, batch, cfg).scores.data
    return score


def evaluate(checkpoint: Checkpoint | dict[str, Tensor], dataset: Dataset, split: str,
             cfg: ModelConfig | None = None, bank: ProposalBank | None = None,
             scorer: Callable[[Batch], np.ndarray] | None = None, chunk: int = 256) -> EvalResult:
    """Fraction of expressions whose top-scoring proposal has IoU > 0.5 with the target."""
    if isinstance(checkpoint, Checkpoint):
        if list(checkpoint.vocabulary) != list(dataset.vocabulary):
            raise CheckpointError("vocabulary mismatch between checkpoint and dataset")
        params, cfg = checkpoint.params, checkpoint.model
    else:
        params = checkpoint
        if cfg is None:
            raise ValueError("cfg required when evaluating raw params")
    bank = bank or ProposalBank(cfg.K)
    score = scorer or _model_scorer(params, cfg)
    pairs = dataset.pairs(split)
    preds: list[dict] = []
    for i in range(0, len(pairs), chunk):
        part = pairs[i:i + chunk]
        batch = make_batch(part, bank, cfg)
        chosen = predict(score(batch))
        for j, ((scene, expr), k) in enumerate(zip(part, chosen)):
            box = batch.proposals[j][int(k)].box
            v = iou(box, batch.gt_boxes[j])
            preds.append({"index": i + j, "scene_id": scene.id, "tokens": " ".join(expr.tokens),
                          "pred": int(k), "iou": v, "correct": bool(v > 0.5)})
    acc = float(np.mean([p["correct"] for p in preds])) if preds else 0.0
    return EvalResult(acc, preds)


@dataclass
class SimilarityResult:
    mean: float
    n: int
    skipped: int


def instance_similarity(params, cfg: ModelConfig, bank: ProposalBank,
                        pairs_a: Sequence[tuple[Scene, Expression]],
                        pairs_b: Sequence[tuple[Scene, Expression]]) -> np.ndarray:
    """Cosine similarity of matched-proposal instance features, pair by pair."""
    if not pairs_a:
        return np.zeros(0)
    with T.no_grad():
        ha = forward(params, make_batch(pairs_a, bank, cfg), cfg).matched.data
        hb = forward(params, make_batch(pairs_b, bank, cfg), cfg).matched.data
    na = np.linalg.norm(ha, axis=1)
    nb = np.linalg.norm(hb, axis=1)
    denom = na * nb
    return np.where(denom > 0, (ha * hb).sum(axis=1) / np.where(denom > 0, denom, 1.0), 0.0)


def similarity_analysis(checkpoint: Checkpoint | dict[str, Tensor], dataset: Dataset, split: str,
                        seed: int = 0, cfg: ModelConfig | None = None,
                        bank: ProposalBank | None = None) -> SimilarityResult:
    """Mean cosine similarity over one random synonymous pair per image."""
    if isinstance(checkpoint, Checkpoint):
        params, cfg = checkpoint.params, checkpoint.model
    else:
        params = checkpoint
    bank = bank or ProposalBank(cfg.K)
    rng = np.random.default_rng(seed)
    a, b = [], []
    skipped = 0
    for rec in dataset.splits[split]:
        groups: dict[str, list[Expression]] = {}
        for e in rec.expressions:
            groups.setdefault(e.synonym_group_id, []).append(e)
        usable = [g for g in sorted(groups) if len(groups[g]) >= 2]
        if not usable:
            skipped += 1
            continue
        g = groups[usable[int(rng.integers(len(usable)))]]
        i, j = rng.choice(len(g), size=2, replace=False)
        a.append((rec.scene, g[int(i)]))
        b.append((rec.scene, g[int(j)]))
    sims = instance_similarity(params, cfg, bank, a, b)
    return SimilarityResult(float(sims.mean()) if sims.size else float("nan"), len(a), skipped)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    report: MetricsReport


def _datasets_for(config: TrainConfig, datasets: dict[str, Dataset]) -> list[Dataset]:
    missing = [d for d in config.datasets if d not in datasets]
    if missing:
        raise KeyError(f"datasets not provided: {missing}")
    return [datasets[d] for d in config.datasets]


def train(config: TrainConfig, datasets: dict[str, Dataset], init: Checkpoint | None = None,
          resume: bool = False, eval_datasets: Sequence[str] | None = None,
          progress: Callable[[str], None] | None = None) -> TrainResult:
    """SGD on the enabled objective terms.

    ``init`` supplies starting parameters; with ``resume`` its epoch counter
    and sampling RNG state are continued as well (``config.epochs`` then is
    the total epoch count, so a finished checkpoint trains 0 more epochs).
    """
    config.validate()
    started = time.perf_counter()
    used = _datasets_for(config, datasets)
    eval_names = list(eval_datasets or config.datasets)
    cfg = config.model
    corpus = Corpus(used)
    bank = ProposalBank(cfg.K, config.proposal_seed)
    rng = np.random.default_rng(config.seed)
    if init is not None:
        if init.model != cfg:
            raise CheckpointError("checkpoint model config differs from the training config")
        if resume and init.config_hash != config.hash():
            raise CheckpointError(f"config hash mismatch: checkpoint {init.config_hash}, "
                                  f"expected {config.hash()}")
        params = {k: T.tensor(v.data.copy(), requires_grad=True, name=k) for k, v in init.params.items()}
        if resume:
            rng.bit_generator.state = init.rng_state
    else:
        params = init_params(cfg, config.seed)
    first_epoch = init.epoch if (init is not None and resume) else 0
    plist = list(params.values())
    enabled = set(config.loss.enabled)
    index = None
    if "ins_cl" in enabled and config.sampler.mining:
        index = MiningIndex(corpus)
    report = MetricsReport()
    vocab = used[0].vocabulary

    for epoch in range(first_epoch, config.epochs):
        lr = config.lr(epoch)
        aux = epoch >= config.aux_start_epoch
        if index is not None and aux:
            feats = language_matrix(params, cfg, [e.expression.tokens for e in corpus.entries])
            index.refresh(feats, epoch)
        anchors = epoch_anchors(corpus, config, rng)
        sums = {"det": 0.0, "img": 0.0, "ins": 0.0}
        counts = {"det": 0, "img": 0, "ins": 0}
        for start in range(0, len(anchors), config.batch_size):
            chunk = anchors[start:start + config.batch_size]
            plan = plan_step(corpus, [int(a) for a in chunk], config, rng, index, aux)
            T.current_tape().clear()
            T.zero_grad(plist)
            try:
                parts, _ = step_losses(params, plan, bank, config)
                loss = total_loss(parts, config.loss)
                T.backward(loss)
            except (T.NonFiniteError, T.DomainError) as exc:
                T.current_tape().clear()
                raise TrainingDiverged(f"epoch {epoch} step {start // config.batch_size}: {exc}") from exc
            if config.clip_norm:
                T.clip_grad_norm(plist, config.clip_norm)
            T.sgd_step(plist, lr)
            for name, t in parts.items():
                key = "ins" if name.startswith("ins") else name
                sums[key] += float(t.data)
                counts[key] += 1
        row = {
            "run_id": config.run_id,
            "epoch": epoch + 1,
            **{f"loss_{k}": (sums[k] / counts[k] if counts[k] else "") for k in sums},
        }
        last = epoch == config.epochs - 1
        if config.eval_every_epoch or last:
            accs_val, accs_test, sims = [], [], []
            for name in eval_names:
                ds = datasets[name]
                accs_val.append(evaluate(params, ds, "val", cfg, bank).accuracy)
                accs_test.append(evaluate(params, ds, "test", cfg, bank).accuracy)
                sims.append(similarity_analysis(params, ds, "val", config.seed, cfg, bank).mean)
            row.update(acc_val=float(np.mean(accs_val)), acc_test=float(np.mean(accs_test)),
                       sim_mean=float(np.mean(sims)))
        report.append(row)
        if progress:
            progress(f"{config.run_id} epoch {epoch + 1}/{config.epochs} "
                     + " ".join(f"{k}={v:.4f}" for k, v in row.items() if isinstance(v, float)))
    report.wall_clock = time.perf_counter() - started
    ckpt = Checkpoint(params, config.hash(), max(config.epochs, first_epoch),
                      _jsonable_state(rng.bit_generator.state), list(vocab), cfg)
    return TrainResult(ckpt, report)


def _jsonable_state(state: dict) -> dict:
    return json.loads(json.dumps(state))


def resume(checkpoint: Checkpoint, config: TrainConfig, datasets: dict[str, Dataset],
           **kwargs) -> TrainResult:
    """Continue a run up to ``config.epochs`` total epochs."""
    return train(config, datasets, init=checkpoint, resume=True, **kwargs)


# --------------------------------------------------------------------------
# experiment matrices

ABLATION_ROWS: dict[str, dict] = {
    "baseline": {"enabled": ("det",)},
    "img": {"enabled": ("det", "img")},
    "ins_tri": {"enabled": ("det", "ins_tri")},
    "ins_cl": {"enabled": ("det", "ins_cl")},
    "img+ins_tri": {"enabled": ("det", "img", "ins_tri")},
    "full": {"enabled": ("det", "img", "ins_cl")},
    "full-mining": {"enabled": ("det", "img", "ins_cl"), "mining": False},
    "full-gcn": {"enabled": ("det", "img", "ins_cl"), "use_gcn": False},
}

FULL_TERMS = ("det", "img", "ins_cl")
BASELINE_TERMS = ("det",)


def row_config(base: TrainConfig, row: str, seed: int) -> TrainConfig:
    spec = ABLATION_ROWS[row]
    return replace(
        base,
        loss=replace(base.loss, enabled=tuple(spec["enabled"])),
        sampler=replace(base.sampler, mining=spec.get("mining", base.sampler.mining)),
        model=replace(base.model, use_gcn=spec.get("use_gcn", base.model.use_gcn)),
        seed=seed,
        run_id=f"{row}/seed{seed}",
    )


@dataclass
class RunSummary:
    name: str
    seed: int
    acc_val: dict[str, float]
    acc_test: dict[str, float]
    sim_val: dict[str, float]
    sim_test: dict[str, float]
    wall_clock: float


def summarize_run(name: str, seed: int, params, cfg: ModelConfig, datasets: dict[str, Dataset],
                  names: Sequence[str], proposal_seed: int = 0, wall_clock: float = 0.0
                  ) -> RunSummary:
    bank = ProposalBank(cfg.K, proposal_seed)
    out = RunSummary(name, seed, {}, {}, {}, {}, wall_clock)
    for n in names:
        ds = datasets[n]
        out.acc_val[n] = evaluate(params, ds, "val", cfg, bank).accuracy
        out.acc_test[n] = evaluate(params, ds, "test", cfg, bank).accuracy
        out.sim_val[n] = similarity_analysis(params, ds, "val", seed, cfg, bank).mean
        out.sim_test[n] = similarity_analysis(params, ds, "test", seed, cfg, bank).mean
    return out


@dataclass
class ExperimentTable:
    """One row per configuration; metrics are means over seeds, runs kept alongside."""

    runs: list[RunSummary] = field(default_factory=list)
    checkpoints: dict[tuple[str, int], Checkpoint] = field(default_factory=dict)
    reports: dict[tuple[str, int], MetricsReport] = field(default_factory=dict)

    def names(self) -> list[str]:
        seen: list[str] = []
        for r in self.runs:
            if r.name not in seen:
                seen.append(r.name)
        return seen

    def metric(self, name: str, key: str, dataset: str | None = None) -> float:
        """Seed mean of ``key`` (acc_val, acc_test, sim_val, sim_test); averaged over datasets
        unless ``dataset`` is given."""
        vals = []
        for r in self.runs:
            if r.name != name:
                continue
            d = getattr(r, key)
            vals.append(d[dataset] if dataset else float(np.mean(list(d.values()))))
        if not vals:
            raise KeyError(f"no runs for {name!r}")
        return float(np.mean(vals))

    def to_csv(self) -> str:
        datasets = sorted({d for r in self.runs for d in r.acc_val})
        cols = ["row", "seeds", "acc_val", "acc_test", "sim_val", "sim_test"]
        cols += [f"acc_val_{d}" for d in datasets] + [f"acc_test_{d}" for d in datasets]
        cols += ["acc_val_runs"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for name in self.names():
            runs = [r for r in self.runs if r.name == name]
            row = [name, ";".join(str(r.seed) for r in runs)]
            row += [repr(self.metric(name, k)) for k in ("acc_val", "acc_test", "sim_val", "sim_test")]
            row += [repr(self.metric(name, "acc_val", d)) for d in datasets]
            row += [repr(self.metric(name, "acc_test", d)) for d in datasets]
            row += [";".join(repr(float(np.mean(list(r.acc_val.values())))) for r in runs)]
            w.writerow(row)
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def run_ablation(base: TrainConfig, datasets: dict[str, Dataset], seeds: Sequence[int] = (0,),
                 rows: Sequence[str] = tuple(ABLATION_ROWS),
                 progress: Callable[[str], None] | None = None) -> ExperimentTable:
    """Train every ablation row for every seed and summarise on val/test."""
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown:
        raise KeyError(f"unknown ablation rows {unknown}")
    table = ExperimentTable()
    for seed in seeds:
        for row in rows:
            cfg = row_config(base, row, seed)
            res = train(cfg, datasets, progress=progress)
            table.checkpoints[(row, seed)] = res.checkpoint
            table.reports[(row, seed)] = res.report
            table.runs.append(summarize_run(row, seed, res.checkpoint.params, cfg.model, datasets,
                                            cfg.datasets, cfg.proposal_seed,
                                            res.report.wall_clock))
            if progress:
                r = table.runs[-1]
                progress(f"{row} seed {seed}: acc_val={np.mean(list(r.acc_val.values())):.4f} "
                         f"({r.wall_clock:.0f}s)")
    return table


TRANSFER_ROWS = {
    # name: (pretrain terms or None, fine-tune terms)
    "no-pretrain": (None, BASELINE_TERMS),
    "neither": (BASELINE_TERMS, BASELINE_TERMS),
    "ft-only": (BASELINE_TERMS, FULL_TERMS),
    "pre-only": (FULL_TERMS, BASELINE_TERMS),
    "both": (FULL_TERMS, FULL_TERMS),
}


def run_transfer(pretrain: TrainConfig, finetune: TrainConfig, datasets: dict[str, Dataset],
                 seeds: Sequence[int] = (0,),
                 pretrained: dict[tuple[str, int], Checkpoint] | None = None,
                 progress: Callable[[str], None] | None = None) -> ExperimentTable:
    """Pre-train on the joint benchmark, fine-tune on an unseen dialect.

    Rows: zero-shot evaluation of the baseline and full pre-trained models,
    a from-scratch baseline, and the four (pre-train loss, fine-tune loss)
    combinations. ``pretrained`` may hold ("baseline"|"full", seed)
    checkpoints to reuse.
    """
    target = finetune.datasets
    overlap = set(target) & set(pretrain.datasets)
    if overlap:
        raise ValueError(f"fine-tune dialect {sorted(overlap)} seen during pre-training")
    pretrained = dict(pretrained or {})
    table = ExperimentTable()
    for seed in seeds:
        pre: dict[tuple[str, ...], Checkpoint] = {}
        for key, terms in (("baseline", BASELINE_TERMS), ("full", FULL_TERMS)):
            ck = pretrained.get((key, seed))
            if ck is None:
                cfg = row_config(pretrain, key, seed)
                ck = train(cfg, datasets, progress=progress).checkpoint
            pre[terms] = ck
            table.checkpoints[(f"pretrain-{key}", seed)] = ck
            table.runs.append(summarize_run(f"zero-shot-{key}", seed, ck.params, ck.model,
                                            datasets, target, finetune.proposal_seed))
        for name, (pre_terms, ft_terms) in TRANSFER_ROWS.items():
            cfg = replace(finetune, loss=replace(finetune.loss, enabled=ft_terms), seed=seed,
                          run_id=f"{name}/seed{seed}")
            init = pre[pre_terms] if pre_terms else None
            res = train(cfg, datasets, init=init, progress=progress)
            table.checkpoints[(name, seed)] = res.checkpoint
            table.reports[(name, seed)] = res.report
            table.runs.append(summarize_run(name, seed, res.checkpoint.params, cfg.model, datasets,
                                            target, cfg.proposal_seed, res.report.wall_clock))
            if progress:
                r = table.runs[-1]
                progress(f"transfer {name} seed {seed}: acc_test="
                         f"{np.mean(list(r.acc_test.values())):.4f}")
    return table
