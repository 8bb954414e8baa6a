"""Language-to-visual grounding pipeline.

For a batch of (scene, expression) pairs the forward pass computes

    F_v = E_v(scene)                    visual feature grid
    F_l, f_w = E_l(expression)          sentence / word features
    R = sigmoid(F_v . filter(F_l))      response map (dynamic filter)
    F_lv = R * F_v                      fused volume
    f_p = mean of F_lv inside each proposal
    a = sigmoid(mean_t <Pw f_w[t], Pp f_p>)
    x_i = a_i [f_p_i, loc_i, 1]
    H = relu(A relu(A X W1) W2)         two-layer GCN
    score_i = mlp([H_i, f_p_i])

``A`` is a fully connected, row-normalised adjacency whose self loop
carries weight ``s`` and whose other edges share ``1 - s`` evenly. The
constant appended to each node input lets the head read a_i directly.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .encoders import language_features, token_arrays, visual_features
from .tensor import Tensor
from .world import VOCABULARY, BoundingBox, Expression, Scene, SceneConfig


@dataclass
class ModelConfig:
    channels: int = SceneConfig().channels
    vocab_size: int = len(VOCABULARY)
    visual_hidden: int = 32
    visual_dim: int = 32
    word_dim: int = 16
    pos_dim: int = 8
    pos_buckets: int = 8
    word_feature_dim: int = 32
    lang_hidden: int = 32
    lang_dim: int = 32
    filter_hidden: int = 32
    attention_dim: int = 16
    gcn_dim: int = 32
    head_hidden: int = 32
    proj_hidden: int = 32
    proj_dim: int = 16
    K: int = 20
    use_gcn: bool = True
    self_weight: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)

    def dense(fan_in, fan_out, gain=2.0):
        return rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))

    v, lw = cfg.visual_dim, cfg.word_feature_dim
    shapes = {
        "vis.w1": dense(2 * cfg.channels, cfg.visual_hidden),
        "vis.b1": np.zeros(cfg.visual_hidden),
        "vis.w2": dense(cfg.visual_hidden, v, 1.0),
        "vis.b2": np.zeros(v),
        "lang.emb": rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.word_dim)),
        "lang.pos": rng.normal(0.0, 1.0, size=(cfg.pos_buckets, cfg.pos_dim)),
        "lang.wt": dense(cfg.word_dim + cfg.pos_dim, lw),
        "lang.bt": np.zeros(lw),
        "lang.w1": dense(lw, cfg.lang_hidden),
        "lang.b1": np.zeros(cfg.lang_hidden),
        "lang.w2": dense(cfg.lang_hidden, cfg.lang_dim, 1.0),
        "lang.b2": np.zeros(cfg.lang_dim),
        "att.w1": dense(cfg.lang_dim, cfg.filter_hidden),
        "att.b1": np.zeros(cfg.filter_hidden),
        "att.w2": dense(cfg.filter_hidden, v + 1, 1.0),
        "att.b2": np.zeros(v + 1),
        "ins.word": dense(lw, cfg.attention_dim, 1.0),
        "ins.prop": dense(v, cfg.attention_dim, 1.0),
        "gcn.w1": dense(v + 6, cfg.gcn_dim),
        "gcn.w2": dense(cfg.gcn_dim, cfg.gcn_dim),
        "head.w1": dense(cfg.gcn_dim + v, cfg.head_hidden),
        "head.b1": np.zeros(cfg.head_hidden),
        "head.w2": dense(cfg.head_hidden, 1, 1.0),
        "head.b2": np.zeros(1),
        "proj.w1": dense(cfg.gcn_dim, cfg.proj_hidden),
        "proj.b1": np.zeros(cfg.proj_hidden),
        "proj.w2": dense(cfg.proj_hidden, cfg.proj_dim, 1.0),
        "proj.b2": np.zeros(cfg.proj_dim),
    }
    return {k: T.tensor(a, requires_grad=True, name=k) for k, a in shapes.items()}


# --------------------------------------------------------------------------
# geometry


def _coords(box) -> tuple[float, float, float, float]:
    return box.as_tuple() if isinstance(box, BoundingBox) else tuple(map(float, box))


def iou(box_a, box_b) -> float:
    ax0, ay0, ax1, ay1 = _coords(box_a)
    bx0, by0, bx1, by1 = _coords(box_b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def location_feature(box, W: float, H: float) -> np.ndarray:
    x0, y0, x1, y1 = _coords(box)
    return np.array([x0 / W, y0 / H, x1 / W, y1 / H, (x1 - x0) * (y1 - y0) / (W * H)])


def covered_cells(box, H: int, W: int) -> np.ndarray:
    """Flat indices of cells whose centre lies in the (closed) box."""
    x0, y0, x1, y1 = _coords(box)
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    cx = np.nonzero((xs >= x0) & (xs <= x1))[0]
    cy = np.nonzero((ys >= y0) & (ys <= y1))[0]
    return (cy[:, None] * W + cx[None, :]).reshape(-1)


def pooling_row(box, H: int, W: int) -> np.ndarray:
    cells = covered_cells(box, H, W)
    if cells.size == 0:
        raise ValueError(f"box {_coords(box)} covers no cell centre")
    row = np.zeros(H * W)
    row[cells] = 1.0 / cells.size
    return row


def select_matching_proposal(proposals: Sequence, gt_box) -> int:
    """Index of the max-IoU proposal; ties go to the lowest index."""
    best, best_iou = 0, -1.0
    for i, p in enumerate(proposals):
        box = p.box if isinstance(p, Proposal) else p
        v = iou(box, gt_box)
        if v > best_iou:
            best, best_iou = i, v
    return best


# --------------------------------------------------------------------------
# proposals


@dataclass(frozen=True)
class Proposal:
    box: BoundingBox
    source: str  # "ground_truth_jittered" | "distractor"
    object_id: int | None = None


def propose(scene: Scene, rng: np.random.Generator, K: int = 20, jitter: float = 0.1,
            distractor_side: tuple[float, float] = (1.5, 5.0)) -> list[Proposal]:
    """Jittered copy of every ground-truth box plus random distractors, shuffled."""
    if K < len(scene.objects):
        raise ValueError(f"K={K} < {len(scene.objects)} objects")
    W, H = float(scene.W), float(scene.H)
    out: list[Proposal] = []
    for o in scene.objects:
        b = o.box
        d = rng.uniform(-jitter, jitter, size=4) * np.array([b.width, b.height, b.width, b.height])
        x0 = min(max(b.x_tl + d[0], 0.0), W)
        y0 = min(max(b.y_tl + d[1], 0.0), H)
        x1 = min(max(b.x_br + d[2], 0.0), W)
        y1 = min(max(b.y_br + d[3], 0.0), H)
        out.append(Proposal(BoundingBox(x0, y0, x1, y1), "ground_truth_jittered", o.id))
    lo, hi = distractor_side
    while len(out) < K:
        w = rng.uniform(lo, min(hi, W))
        h = rng.uniform(lo, min(hi, H))
        x0 = rng.uniform(0.0, W - w)
        y0 = rng.uniform(0.0, H - h)
        out.append(Proposal(BoundingBox(x0, y0, x0 + w, y0 + h), "distractor"))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def proposal_rng(scene_id: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(scene_id.encode())])


@dataclass
class SceneProposals:
    proposals: list[Proposal]
    pool: np.ndarray  # (K, HW)
    loc: np.ndarray  # (K, 5)


class ProposalBank:
    """Deterministic per-scene proposals, computed once and cached."""

    def __init__(self, K: int = 20, seed: int = 0, jitter: float = 0.1):
        self.K, self.seed, self.jitter = K, seed, jitter
        self._cache: dict[str, SceneProposals] = {}

    def get(self, scene: Scene) -> SceneProposals:
        hit = self._cache.get(scene.id)
        if hit is None:
            props = propose(scene, proposal_rng(scene.id, self.seed), self.K, self.jitter)
            pool = np.stack([pooling_row(p.box, scene.H, scene.W) for p in props])
            loc = np.stack([location_feature(p.box, scene.W, scene.H) for p in props])
            hit = self._cache[scene.id] = SceneProposals(props, pool, loc)
        return hit


# --------------------------------------------------------------------------
# batched forward


@dataclass
class Batch:
    """Constant arrays for B (scene, expression) pairs over S unique scenes."""
    scenes: list[Scene]
    scene_index: np.ndarray  # (B,)
    cells: np.ndarray  # (S, HW, C)
    words: np.ndarray  # (B, T, V)
    positions: np.ndarray  # (B, T, P)
    word_weights: np.ndarray  # (B, 1, T)
    pool: np.ndarray  # (B, K, HW)
    loc: np.ndarray  # (B, K, 5)
    target: np.ndarray  # (B,) matched proposal index
    gt_boxes: list[BoundingBox]
    proposals: list[list[Proposal]]
    H: int = 16
    W: int = 16

    @property
    def size(self) -> int:
        return len(self.target)


def make_batch(pairs: Sequence[tuple[Scene, Expression]], bank: ProposalBank,
               cfg: ModelConfig) -> Batch:
    scene_pos: dict[str, int] = {}
    scenes: list[Scene] = []
    idx = []
    for scene, _ in pairs:
        if scene.id not in scene_pos:
            scene_pos[scene.id] = len(scenes)
            scenes.append(scene)
        idx.append(scene_pos[scene.id])
    H, W = scenes[0].H, scenes[0].W
    cells = np.stack([s.channels.reshape(H * W, -1) for s in scenes])
    words, pos, weights = token_arrays([e.tokens for _, e in pairs], cfg.vocab_size, cfg.pos_buckets)
    props = [bank.get(s) for s, _ in pairs]
    gts = [s.object(e.target_object_id).box for s, e in pairs]
    target = np.array([select_matching_proposal(p.proposals, g) for p, g in zip(props, gts)])
    return Batch(
        scenes=scenes,
        scene_index=np.array(idx),
        cells=cells,
        words=words,
        positions=pos,
        word_weights=weights,
        pool=np.stack([p.pool for p in props]),
        loc=np.stack([p.loc for p in props]),
        target=target,
        gt_boxes=gts,
        proposals=[p.proposals for p in props],
        H=H,
        W=W,
    )


@dataclass
class Outputs:
    visual: Tensor  # (B, HW, v)
    sentence: Tensor  # (B, l)
    words: Tensor  # (B, T, l_w)
    response: Tensor  # (B, HW, 1)
    pooled: Tensor  # (B, K, v)
    attention: Tensor  # (B, K, 1)
    instance: Tensor  # (B, K, d)
    scores: Tensor  # (B, K)
    matched: Tensor  # (B, d) instance feature of the matched proposal


def adjacency(K: int, self_weight: float = 0.5) -> np.ndarray:
    """Fully connected graph with self loops, rows summing to one."""
    if K == 1:
        return np.ones((1, 1))
    off = (1.0 - self_weight) / (K - 1)
    return np.full((K, K), off) + (self_weight - off) * np.eye(K)


def image_attention(sentence: Tensor, visual: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Dynamic filter from the sentence applied per cell: (B, HW, 1) in (0, 1)."""
    h = T.relu(T.matmul(sentence, params["att.w1"]) + params["att.b1"])
    filt = T.matmul(h, params["att.w2"]) + params["att.b2"]  # (B, v+1)
    B, n = filt.shape
    ones = np.ones(visual.shape[:-1] + (1,))
    aug = T.concat(visual, ones)
    return T.sigmoid(T.matmul(aug, T.reshape(filt, (B, n, 1))))


def fuse(response: Tensor, visual: Tensor) -> Tensor:
    if response.shape[:-1] != visual.shape[:-1] or response.shape[-1] != 1:
        raise T.ShapeError("fuse", response.shape, visual.shape)
    return T.mul(response, visual)


def roi_pool(fused: Tensor, pool: np.ndarray) -> Tensor:
    return T.matmul(pool, fused)


def word_attention(words: Tensor, word_weights: np.ndarray, pooled: Tensor,
                   params: dict[str, Tensor]) -> Tensor:
    """a_i = sigmoid(mean_t <Pw f_w[t], Pp f_p[i]> / sqrt(d)), shape (B, K, 1).

    The 1/sqrt(d) keeps the logits small as features grow; unscaled, the
    sigmoid saturates early on some seeds and the proposals it closes never
    reopen.
    """
    u = T.matmul(words, params["ins.word"])  # (B, T, d)
    ubar = T.matmul(word_weights, u)  # (B, 1, d)
    B, _, d = ubar.shape
    q = T.matmul(pooled, params["ins.prop"])  # (B, K, d)
    return T.sigmoid(T.scale(T.matmul(q, T.reshape(ubar, (B, d, 1))), 1.0 / math.sqrt(d)))


def gcn_forward(nodes: Tensor, params: dict[str, Tensor], use_graph: bool = True,
                self_weight: float = 0.5) -> Tensor:
    """Two-layer GCN over (B, K, d) node inputs."""
    K = nodes.shape[-2]
    if use_graph:
        A = adjacency(K, self_weight)
        h = T.relu(T.matmul(A, T.matmul(nodes, params["gcn.w1"])))
        return T.relu(T.matmul(A, T.matmul(h, params["gcn.w2"])))
    h = T.relu(T.matmul(nodes, params["gcn.w1"]))
    return T.relu(T.matmul(h, params["gcn.w2"]))


def detection_head(instance: Tensor, pooled: Tensor, params: dict[str, Tensor]) -> Tensor:
    x = T.concat(instance, pooled)
    h = T.relu(T.matmul(x, params["head.w1"]) + params["head.b1"])
    s = T.matmul(h, params["head.w2"]) + params["head.b2"]  # (B, K, 1)
    return T.reshape(s, s.shape[:-1])


def predict(scores) -> np.ndarray:
    """Lowest-index argmax over the last axis."""
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    return np.argmax(s, axis=-1)


def select_rows(features: Tensor, index: np.ndarray) -> Tensor:
    """Row ``index[b]`` of each (K, d) slice, via a one-hot product: (B, d)."""
    B, K, d = features.shape
    onehot = np.zeros((B, 1, K))
    onehot[np.arange(B), 0, index] = 1.0
    out = T.matmul(onehot, features)
    return T.reshape(out, (B, d))


def forward(params: dict[str, Tensor], batch: Batch, cfg: ModelConfig) -> Outputs:
    vis_unique = visual_features(T.constant(batch.cells), batch.H, batch.W, params)
    S, HW, v = vis_unique.shape
    B = batch.size
    if S == B and np.array_equal(batch.scene_index, np.arange(B)):
        visual = vis_unique
    else:
        sel = np.zeros((B, S))
        sel[np.arange(B), batch.scene_index] = 1.0
        visual = T.reshape(T.matmul(sel, T.reshape(vis_unique, (S, HW * v))), (B, HW, v))
    lang = language_features(batch.words, batch.positions, batch.word_weights, params)
    response = image_attention(lang.sentence, visual, params)
    fused = fuse(response, visual)
    pooled = roi_pool(fused, batch.pool)
    att = word_attention(lang.words, batch.word_weights, pooled, params)
    ones = np.ones(batch.loc.shape[:-1] + (1,))
    nodes = T.mul(att, T.concat(pooled, batch.loc, ones))
    instance = gcn_forward(nodes, params, cfg.use_gcn, cfg.self_weight)
    scores = detection_head(instance, pooled, params)
    matched = select_rows(instance, batch.target)
    return Outputs(visual, lang.sentence, lang.words, response, pooled, att, instance, scores,
                   matched)


def project(matched: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Projection head followed by L2 normalisation: (B, d) -> (B, d_proj)."""
    h = T.relu(T.matmul(matched, params["proj.w1"]) + params["proj.b1"])
    z = T.matmul(h, params["proj.w2"]) + params["proj.b2"]
    sq = T.sum(T.mul(z, z), axis=-1)
    inv = T.exp(T.scale(T.log(T.add(sq, 1e-24)), -0.5))
    return T.mul(z, T.reshape(inv, inv.shape + (1,)))


ScoreFn = Callable[[Batch], np.ndarray]
