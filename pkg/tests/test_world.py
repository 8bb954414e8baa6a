import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundcl.world import (
    AMBIGUOUS,
    LOCATION_LEXICON,
    MAX_TOKENS,
    NONE,
    VOCABULARY,
    BoundingBox,
    DatasetConfig,
    GenerationError,
    ObjectInstance,
    Scene,
    SceneConfig,
    SchemaError,
    generate_expressions,
    generate_scene,
    load_dataset,
    make_datasets,
    relation_holds,
    render_channels,
    resolve,
    save_dataset,
    split_sizes,
)


def obj(i, cat, color, size, x, y):
    side = {"small": 2, "medium": 3, "large": 4}[size]
    return ObjectInstance(i, cat, color, size, BoundingBox(x, y, x + side, y + side))


def scene_of(*objects):
    cfg = SceneConfig()
    return Scene("hand", 16, 16, list(objects), render_channels(objects, cfg))


@pytest.fixture(scope="module")
def small():
    return make_datasets(DatasetConfig(n_scenes=40, seed=3))


def test_channels_one_hot_inside_objects():
    s = scene_of(obj(0, "circle", "red", "small", 1, 1))
    assert s.channels.shape == (16, 16, SceneConfig().channels)
    assert s.channels[1:3, 1:3].sum(axis=-1).tolist() == [[4, 4], [4, 4]]
    assert s.channels[5, 5].sum() == 0


def test_box_rejects_degenerate():
    with pytest.raises(ValueError):
        BoundingBox(2, 2, 2, 5)


def test_scene_determinism_and_no_overlap():
    a = generate_scene(11)
    b = generate_scene(11)
    assert [o.box for o in a.objects] == [o.box for o in b.objects]
    assert np.array_equal(a.channels, b.channels)
    boxes = [o.box for o in a.objects]
    for i, p in enumerate(boxes):
        for q in boxes[i + 1:]:
            assert p.x_br <= q.x_tl or q.x_br <= p.x_tl or p.y_br <= q.y_tl or q.y_br <= p.y_tl


def test_generation_fails_loudly_when_impossible():
    cfg = SceneConfig(min_objects=8, max_objects=8, categories=("circle",), colors=("red",),
                      sizes=("large",), max_retries=3)
    with pytest.raises(GenerationError):
        generate_scene(0, cfg, dialects=("plus",))


def test_resolver_attributes_and_synonyms():
    s = scene_of(obj(0, "circle", "red", "small", 1, 1), obj(1, "circle", "blue", "large", 8, 8))
    assert resolve(["the", "red", "circle"], s) == 0
    assert resolve(["crimson", "ring"], s) == 0
    assert resolve(["big", "ball"], s) == 1
    assert resolve(["circle"], s) == AMBIGUOUS
    assert resolve(["green", "circle"], s) == NONE


def test_resolver_location_and_relation():
    s = scene_of(obj(0, "square", "red", "small", 1, 1), obj(1, "square", "red", "small", 10, 1),
                 obj(2, "star", "green", "medium", 10, 4))
    assert resolve(["leftmost", "red", "square"], s) == 0
    assert resolve(["the", "right", "square"], s) == 1
    assert resolve(["the", "square", "near", "the", "star"], s) == 1
    assert resolve(["the", "square", "above", "the", "star"], s) == AMBIGUOUS
    assert relation_holds("above", s.objects[1], s.objects[2])
    assert relation_holds("right_of", s.objects[1], s.objects[0])
    assert not relation_holds("left_of", s.objects[1], s.objects[0])


def test_two_hop_chain():
    s = scene_of(obj(0, "circle", "red", "small", 12, 2), obj(1, "circle", "red", "small", 1, 12),
                 obj(2, "square", "blue", "small", 12, 10), obj(3, "square", "blue", "small", 1, 1),
                 obj(4, "star", "green", "small", 6, 6))
    toks = ["the", "circle", "above", "the", "square", "that", "is", "right", "of", "the", "star"]
    assert resolve(toks, s) == 0


def test_generated_expressions_resolve(small):
    for d in small.values():
        for split in ("train", "val", "test"):
            for scene, e in d.pairs(split):
                assert resolve(e, scene) == e.target_object_id
                assert len(e.tokens) <= MAX_TOKENS
                assert set(e.tokens) <= set(VOCABULARY)


def test_plus_has_no_location_words(small):
    for split in ("train", "val", "test"):
        for _, e in small["plus"].pairs(split):
            assert not set(e.tokens) & LOCATION_LEXICON


def test_synonym_groups_are_distinct_paraphrases(small):
    for rec in small["base"].splits["train"]:
        groups = {}
        for e in rec.expressions:
            groups.setdefault(e.synonym_group_id, []).append(e)
        for g in groups.values():
            assert len(g) == 5
            assert len({e.tokens for e in g}) == 5
            assert len({e.target_object_id for e in g}) == 1


def test_shared_pool_and_disjoint_splits(small):
    base, plus = small["base"], small["plus"]
    for split in ("train", "val", "test"):
        assert [r.scene.id for r in base.splits[split]] == [r.scene.id for r in plus.splits[split]]
    ids = [{r.scene.id for r in base.splits[s]} for s in ("train", "val", "test")]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert split_sizes(40, (0.8, 0.1, 0.1)) == (32, 4, 4)


def test_reason_dialect_two_hops():
    ds = make_datasets(DatasetConfig(dialects=("reason",), n_scenes=15, seed=1, prefix="r"))
    exprs = [e for _, e in ds["reason"].pairs("train")]
    assert all(e.style == "relation" for e in exprs)
    relation_words = {"left", "right", "above", "over", "below", "under", "beneath"}
    hop_counts = [sum(t in relation_words for t in e.tokens) for e in exprs]
    assert max(hop_counts) >= 2


def test_generate_expressions_count_guard():
    s = generate_scene(5)
    with pytest.raises(ValueError):
        generate_expressions(s, s.objects[0].id, "base", 1, np.random.default_rng(0))


def test_serialization_round_trip_and_bytes(tmp_path, small):
    cfg = DatasetConfig(n_scenes=40, seed=3)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_dataset(small["base"], p1, cfg)
    again = make_datasets(cfg)
    save_dataset(again["base"], p2, cfg)
    assert p1.read_bytes() == p2.read_bytes()
    back = load_dataset(p1)
    assert back.pairs("val") and len(back.pairs("val")) == len(small["base"].pairs("val"))
    for (s1, e1), (s2, e2) in zip(back.pairs("train"), small["base"].pairs("train")):
        assert e1 == e2 and np.array_equal(s1.channels, s2.channels)


def test_load_rejects_bad_schema(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"schema_version": 99}\n')
    with pytest.raises(SchemaError):
        load_dataset(p)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_every_object_describable_in_plus(seed):
    s = generate_scene(seed, dialects=("base", "plus"))
    rng = np.random.default_rng(seed)
    for o in s.objects:
        for e in generate_expressions(s, o.id, "plus", 3, rng):
            assert resolve(e, s) == o.id
