"""Small visual and language encoders.

The visual encoder is a per-cell two-layer perceptron over the cell's
channels concatenated with the mean of its in-bounds 4-neighbours. The
language encoder embeds each token, tags it with a position-bucket
embedding, mixes the pair through one relu layer (so that the later mean is
order-sensitive) and maps the mean word feature through a two-layer
perceptron.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .world import VOCAB_INDEX


@dataclass
class LanguageFeature:
    sentence: Tensor  # (..., l)
    words: Tensor  # (..., T, l_w)


@lru_cache(maxsize=8)
def neighbourhood_matrix(H: int, W: int) -> np.ndarray:
    """HW x HW row-stochastic matrix averaging the in-bounds 4-neighbours."""
    n = H * W
    m = np.zeros((n, n))
    for y in range(H):
        for x in range(W):
            nbrs = [(y + dy, x + dx) for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1))
                    if 0 <= y + dy < H and 0 <= x + dx < W]
            for ny, nx in nbrs:
                m[y * W + x, ny * W + nx] = 1.0 / len(nbrs)
    m.setflags(write=False)
    return m


def visual_features(cells: Tensor, H: int, W: int, params: dict[str, Tensor]) -> Tensor:
    """(S, H*W, C) channel grid -> (S, H*W, v) feature grid."""
    nbr = neighbourhood_matrix(H, W)
    x = T.concat(cells, T.matmul(nbr, cells))
    h = T.relu(T.matmul(x, params["vis.w1"]) + params["vis.b1"])
    return T.matmul(h, params["vis.w2"]) + params["vis.b2"]


def encode_visual(channels, params: dict[str, Tensor]) -> Tensor:
    """Feature map of shape (H, W, v) for one H x W x C channel grid."""
    ch = channels if isinstance(channels, Tensor) else T.constant(channels)
    if ch.data.ndim != 3:
        raise T.ShapeError("encode_visual", ch.shape)
    H, W, C = ch.shape
    expected = params["vis.w1"].shape[0] // 2
    if C != expected:
        raise T.ShapeError("encode_visual", ch.shape, (H, W, expected))
    flat = T.reshape(ch, (1, H * W, C))
    out = visual_features(flat, H, W, params)
    return T.reshape(out, (H, W, out.shape[-1]))


def position_bucket(t: int, n_buckets: int) -> int:
    return min(t, n_buckets - 1)


def token_arrays(token_lists: Sequence[Sequence[str]], vocab_size: int, n_buckets: int):
    """One-hot word and position arrays plus the masked-mean row weights.

    Returns ``(words (B,T,V), positions (B,T,P), mean_weights (B,1,T))`` with
    T the longest sequence; padded slots get zero weight.
    """
    B = len(token_lists)
    Tmax = max(len(t) for t in token_lists)
    words = np.zeros((B, Tmax, vocab_size))
    pos = np.zeros((B, Tmax, n_buckets))
    weights = np.zeros((B, 1, Tmax))
    for b, toks in enumerate(token_lists):
        if not toks:
            raise ValueError("empty expression")
        for t, w in enumerate(toks):
            try:
                words[b, t, VOCAB_INDEX[w]] = 1.0
            except KeyError:
                raise KeyError(f"unknown token {w!r}") from None
            pos[b, t, position_bucket(t, n_buckets)] = 1.0
        weights[b, 0, : len(toks)] = 1.0 / len(toks)
    return words, pos, weights


def language_features(words: np.ndarray, positions: np.ndarray, mean_weights: np.ndarray,
                      params: dict[str, Tensor]) -> LanguageFeature:
    emb = T.matmul(words, params["lang.emb"])
    pos = T.matmul(positions, params["lang.pos"])
    f_w = T.relu(T.matmul(T.concat(emb, pos), params["lang.wt"]) + params["lang.bt"])
    pooled = T.matmul(mean_weights, f_w)
    pooled = T.reshape(pooled, pooled.shape[:-2] + (pooled.shape[-1],))
    h = T.relu(T.matmul(T.reshape(pooled, (-1, pooled.shape[-1])), params["lang.w1"])
               + params["lang.b1"])
    sent = T.matmul(h, params["lang.w2"]) + params["lang.b2"]
    return LanguageFeature(T.reshape(sent, pooled.shape[:-1] + (sent.shape[-1],)), f_w)


def encode_language(tokens: Sequence[str], params: dict[str, Tensor]) -> LanguageFeature:
    """Sentence feature (l,) and per-word features (T, l_w) for one expression."""
    V = params["lang.emb"].shape[0]
    P = params["lang.pos"].shape[0]
    words, pos, weights = token_arrays([list(tokens)], V, P)
    feat = language_features(words, pos, weights, params)
    return LanguageFeature(T.reshape(feat.sentence, (feat.sentence.shape[-1],)),
                           T.reshape(feat.words, feat.words.shape[1:]))
