import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundcl.sampler import (
    Corpus,
    MiningIndex,
    SamplerConfig,
    SamplingError,
    build_contrastive_batch,
    mine_negatives_category,
    mine_negatives_language,
    random_negatives,
    sample_triplet,
    top_n,
)
from groundcl.world import DatasetConfig, make_datasets


@pytest.fixture(scope="module")
def corpus():
    ds = make_datasets(DatasetConfig(n_scenes=60, seed=5))
    return Corpus([ds["base"], ds["plus"]])


@pytest.fixture(scope="module")
def index(corpus):
    rng = np.random.default_rng(0)
    return MiningIndex(corpus, rng.normal(size=(len(corpus), 6)))


def brute_top(index, anchor, n, pool=None):
    c = index.corpus
    cand = [j for j in (range(len(c)) if pool is None else pool) if c.scene_code[j] != c.scene_code[anchor]]
    return sorted(cand, key=lambda j: (-float(index.features[j] @ index.features[anchor]), j))[:n]


def test_language_mining_equals_brute_force(corpus, index):
    for a in range(0, len(corpus), 7):
        assert mine_negatives_language(a, index, 8) == brute_top(index, a, 8)


def test_language_mining_with_ties():
    ds = make_datasets(DatasetConfig(n_scenes=20, seed=2))
    c = Corpus([ds["base"]])
    feats = np.random.default_rng(1).integers(0, 2, size=(len(c), 3)).astype(float)
    idx = MiningIndex(c, feats)
    for a in range(0, len(c), 5):
        assert mine_negatives_language(a, idx, 12) == brute_top(idx, a, 12)


def test_mined_negatives_never_share_scene(corpus, index):
    rng = np.random.default_rng(3)
    cfg = SamplerConfig()
    for _ in range(10_000 // 50):
        a = int(rng.integers(len(corpus)))
        for _ in range(50 // 10):
            b = build_contrastive_batch(corpus, a, cfg, rng, index)
            assert all(n.scene.id != b.anchor.scene.id for n in b.negatives)
            assert all(p.object_key == b.anchor.object_key for p in b.positives)


def test_sampling_deterministic(corpus, index):
    def draw(seed):
        rng = np.random.default_rng(seed)
        out = []
        for a in range(0, 200, 9):
            b = build_contrastive_batch(corpus, a, SamplerConfig(), rng, index)
            out.append(([p.index for p in b.positives], [n.index for n in b.negatives]))
            out.append(tuple(e.index for e in (lambda t: (t.anchor, t.positive, t.negative))(
                sample_triplet(corpus, rng, a))))
        return out
    assert draw(4) == draw(4)
    assert draw(4) != draw(5)


def test_category_negatives_share_category(corpus, index):
    rng = np.random.default_rng(0)
    for a in range(0, len(corpus), 31):
        for j in mine_negatives_category(a, index, 8, rng):
            assert corpus.category_code[j] == corpus.category_code[a]
            assert corpus.scene_code[j] != corpus.scene_code[a]


def test_intra_stays_in_dataset_inter_crosses(corpus, index):
    rng = np.random.default_rng(0)
    crossed = False
    for a in range(0, len(corpus), 23):
        intra = build_contrastive_batch(corpus, a, SamplerConfig(mode="intra"), rng, index)
        assert {e.dataset for e in intra.positives + intra.negatives} == {intra.anchor.dataset}
        inter = build_contrastive_batch(corpus, a, SamplerConfig(mode="inter"), rng, index)
        crossed |= any(e.dataset != inter.anchor.dataset for e in inter.positives)
    assert crossed


def test_batch_sizes(corpus, index):
    b = build_contrastive_batch(corpus, 0, SamplerConfig(P=2, N_cat=3, N_lang=5), np.random.default_rng(0), index)
    assert b.sizes == (2, 8)
    assert len({n.index for n in b.negatives}) == 8


def test_no_mining_draws_random(corpus):
    rng = np.random.default_rng(0)
    b = build_contrastive_batch(corpus, 0, SamplerConfig(mining=False), rng, None)
    assert b.sizes[1] == 16
    neg = random_negatives(0, corpus, 5, rng)
    assert all(corpus.scene_code[j] != corpus.scene_code[0] for j in neg)


def test_mining_without_index_errors(corpus):
    with pytest.raises(ValueError):
        build_contrastive_batch(corpus, 0, SamplerConfig(), np.random.default_rng(0), None)
    with pytest.raises(RuntimeError):
        mine_negatives_language(0, MiningIndex(corpus), 3)
    with pytest.raises(ValueError):
        MiningIndex(corpus, np.zeros((3, 2)))


def test_triplet_structure(corpus):
    rng = np.random.default_rng(0)
    for _ in range(100):
        t = sample_triplet(corpus, rng)
        assert t.positive.object_key == t.anchor.object_key
        assert t.positive.expression.tokens != t.anchor.expression.tokens
        assert t.negative.scene.id == t.anchor.scene.id
        assert t.negative.expression.target_object_id != t.anchor.expression.target_object_id


def test_triplet_failure_is_loud():
    ds = make_datasets(DatasetConfig(n_scenes=10, seed=0))
    c = Corpus([ds["base"]])
    e = c[0]
    c.groups[(e.dataset, e.expression.synonym_group_id)] = [0]
    with pytest.raises(SamplingError):
        sample_triplet(c, np.random.default_rng(0), anchor=0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=30), st.integers(0, 35))
def test_top_n_property(values, n):
    scores = np.array(values, dtype=float)
    ids = np.arange(len(values)) * 2
    got = top_n(scores, ids, n).tolist()
    want = sorted(ids.tolist(), key=lambda i: (-scores[i // 2], i))[:n]
    assert got == want
