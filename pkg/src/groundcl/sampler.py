"""Triplet sampling, negative mining and contrastive batch assembly.

Everything works on a :class:`Corpus`: the flat list of training
expressions of one or more datasets, addressed by integer corpus index.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .world import Dataset, Expression, Scene


@dataclass(frozen=True)
class Entry:
    index: int
    dataset: str
    scene: Scene
    expression: Expression

    @property
    def pair(self) -> tuple[Scene, Expression]:
        return self.scene, self.expression

    @property
    def object_key(self) -> tuple[str, int]:
        return self.scene.id, self.expression.target_object_id


class Corpus:
    def __init__(self, datasets: Sequence[Dataset], split: str = "train"):
        self.datasets = [d.name for d in datasets]
        self.entries: list[Entry] = []
        for d in datasets:
            for rec in d.splits[split]:
                for e in rec.expressions:
                    self.entries.append(Entry(len(self.entries), d.name, rec.scene, e))
        n = len(self.entries)
        scene_codes: dict[str, int] = {}
        cats: dict[str, int] = {}
        self.scene_code = np.empty(n, dtype=np.int64)
        self.dataset_code = np.empty(n, dtype=np.int64)
        self.category_code = np.empty(n, dtype=np.int64)
        self.category_names: list[str] = []
        self.groups: dict[tuple[str, str], list[int]] = defaultdict(list)
        self.objects: dict[tuple[str, int], list[int]] = defaultdict(list)
        self.scene_entries: dict[tuple[str, str], list[int]] = defaultdict(list)
        for e in self.entries:
            i = e.index
            self.scene_code[i] = scene_codes.setdefault(e.scene.id, len(scene_codes))
            self.dataset_code[i] = self.datasets.index(e.dataset)
            cat = e.scene.object(e.expression.target_object_id).category
            if cat not in cats:
                cats[cat] = len(cats)
                self.category_names.append(cat)
            self.category_code[i] = cats[cat]
            self.groups[(e.dataset, e.expression.synonym_group_id)].append(i)
            self.objects[e.object_key].append(i)
            self.scene_entries[(e.dataset, e.scene.id)].append(i)
        self.by_category: dict[int, np.ndarray] = {
            c: np.nonzero(self.category_code == c)[0] for c in range(len(cats))
        }
        self.by_dataset: dict[int, np.ndarray] = {
            k: np.nonzero(self.dataset_code == k)[0] for k in range(len(self.datasets))
        }

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> Entry:
        return self.entries[i]

    def synonyms(self, i: int, inter: bool = False) -> list[int]:
        """Other expressions naming the same object (same dataset unless ``inter``)."""
        e = self.entries[i]
        if inter:
            pool = self.objects[e.object_key]
        else:
            pool = self.groups[(e.dataset, e.expression.synonym_group_id)]
        return [j for j in pool if j != i and self.entries[j].expression.tokens != e.expression.tokens]


@dataclass
class TripletSample:
    scene: Scene
    anchor: Entry
    positive: Entry
    negative: Entry


@dataclass
class ContrastiveBatch:
    anchor: Entry
    positives: list[Entry]
    negatives: list[Entry]

    @property
    def sizes(self) -> tuple[int, int]:
        return len(self.positives), len(self.negatives)


@dataclass
class SamplerConfig:
    P: int = 4
    N_cat: int = 8
    N_lang: int = 8
    mode: str = "intra"  # intra | inter
    mining: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


class SamplingError(RuntimeError):
    pass


def sample_triplet(corpus: Corpus, rng: np.random.Generator, anchor: int | None = None,
                   max_retries: int = 100) -> TripletSample:
    """Anchor, a synonym of it and an expression for another object in the same image."""
    for _ in range(max_retries):
        i = int(rng.integers(len(corpus))) if anchor is None else anchor
        a = corpus[i]
        pos = corpus.synonyms(i)
        negs = [j for j in corpus.scene_entries[(a.dataset, a.scene.id)]
                if corpus[j].expression.target_object_id != a.expression.target_object_id]
        if pos and negs:
            p = pos[int(rng.integers(len(pos)))]
            n = negs[int(rng.integers(len(negs)))]
            return TripletSample(a.scene, a, corpus[p], corpus[n])
        if anchor is not None:
            break
    raise SamplingError("no valid triplet found")


class MiningIndex:
    """Category lists and a unit-normalised language-feature matrix."""

    def __init__(self, corpus: Corpus, features: np.ndarray | None = None, epoch: int = 0):
        self.corpus = corpus
        self.epoch = epoch
        self.features: np.ndarray | None = None
        if features is not None:
            self.refresh(features, epoch)

    def refresh(self, features: np.ndarray, epoch: int) -> None:
        if features.shape[0] != len(self.corpus):
            raise ValueError("one language feature row per corpus entry required")
        norms = np.linalg.norm(features, axis=1, keepdims=True)
        self.features = features / np.where(norms > 0, norms, 1.0)
        self.epoch = epoch

    def candidates(self, anchor: int, datasets: Sequence[int] | None) -> np.ndarray:
        """Ascending corpus indices from other scenes (optionally dataset-filtered)."""
        c = self.corpus
        if datasets is None or len(datasets) == len(c.datasets):
            pool = np.arange(len(c))
        else:
            pool = np.sort(np.concatenate([c.by_dataset[k] for k in datasets]))
        return pool[c.scene_code[pool] != c.scene_code[anchor]]


def mine_negatives_category(anchor: int, index: MiningIndex, count: int, rng: np.random.Generator,
                            datasets: Sequence[int] | None = None) -> list[int]:
    """Up to ``count`` expressions about the anchor's category in other images."""
    c = index.corpus
    pool = c.by_category[int(c.category_code[anchor])]
    pool = pool[c.scene_code[pool] != c.scene_code[anchor]]
    if datasets is not None:
        pool = pool[np.isin(c.dataset_code[pool], datasets)]
    if count <= 0 or pool.size == 0:
        return []
    if pool.size <= count:
        return [int(i) for i in pool]
    pick = rng.choice(pool.size, size=count, replace=False)
    return [int(pool[i]) for i in pick]


def top_n(scores: np.ndarray, ids: np.ndarray, n: int) -> np.ndarray:
    """Ids of the ``n`` largest scores, ties broken by lowest id, sorted best first.

    ``ids`` must be ascending.
    """
    if n <= 0 or ids.size == 0:
        return ids[:0]
    if n < ids.size:
        part = np.argpartition(-scores, n - 1)[:n]
        thr = scores[part].min()
        greater = np.nonzero(scores > thr)[0]
        equal = np.nonzero(scores == thr)[0]
        chosen = np.concatenate([greater, equal[: n - greater.size]])
    else:
        chosen = np.arange(ids.size)
    order = np.lexsort((ids[chosen], -scores[chosen]))
    return ids[chosen][order]


def mine_negatives_language(anchor: int, index: MiningIndex, N: int = 8,
                            datasets: Sequence[int] | None = None,
                            exclude: Sequence[int] = ()) -> list[int]:
    """The ``N`` other-image expressions with the most similar sentence features."""
    if index.features is None:
        raise RuntimeError("mining index has no language features")
    cand = index.candidates(anchor, datasets)
    if len(exclude):
        cand = cand[~np.isin(cand, exclude)]
    sims = index.features[cand] @ index.features[anchor]
    return [int(i) for i in top_n(sims, cand, N)]


def random_negatives(anchor: int, corpus: Corpus, count: int, rng: np.random.Generator,
                     datasets: Sequence[int] | None = None) -> list[int]:
    """Uniform other-image expressions (used when mining is switched off)."""
    mask = corpus.scene_code != corpus.scene_code[anchor]
    if datasets is not None:
        mask &= np.isin(corpus.dataset_code, datasets)
    pool = np.nonzero(mask)[0]
    if pool.size <= count:
        return [int(i) for i in pool]
    return [int(pool[i]) for i in rng.choice(pool.size, size=count, replace=False)]


def build_contrastive_batch(corpus: Corpus, anchor: int, config: SamplerConfig,
                            rng: np.random.Generator, index: MiningIndex | None = None
                            ) -> ContrastiveBatch:
    inter = config.mode == "inter"
    if config.mode not in ("intra", "inter"):
        raise ValueError(f"unknown sampling mode {config.mode!r}")
    if inter and len(corpus.datasets) < 2:
        raise ValueError("inter mode needs at least two datasets")
    own = [int(corpus.dataset_code[anchor])]
    datasets = None if inter else own

    pos = corpus.synonyms(anchor, inter=inter)
    if not pos:
        raise SamplingError(f"anchor {anchor} has no synonyms")
    if len(pos) > config.P:
        pos = [pos[i] for i in sorted(rng.choice(len(pos), size=config.P, replace=False))]

    n_total = config.N_cat + config.N_lang
    if config.mining:
        if index is None:
            raise ValueError("mining needs a MiningIndex")
        cat = mine_negatives_category(anchor, index, config.N_cat, rng, datasets)
        need = n_total - len(cat)
        lang = mine_negatives_language(anchor, index, need, datasets, exclude=cat) if need else []
        neg = cat + lang
    else:
        neg = random_negatives(anchor, corpus, n_total, rng, datasets)
    if not neg:
        raise SamplingError(f"anchor {anchor} has no negatives")
    return ContrastiveBatch(corpus[anchor], [corpus[i] for i in pos], [corpus[i] for i in neg])


LanguageEncoder = Callable[[Sequence[Sequence[str]]], np.ndarray]
