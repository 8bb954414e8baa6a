"""Synthetic scenes of attributed objects and their referring expressions.

Objects are axis-aligned squares on an integer grid. Each carries a
category, a colour and a size class. Expressions come in three styles
(attribute, location, relation) and in three dialects:

``base``
    all styles; relations ``above``/``below``/``near``.
``plus``
    like ``base`` but with every absolute-location word forbidden.
``reason``
    held out; horizontal relations (``left of``/``right of``) and two-hop
    relation chains, which never appear in the other dialects.

Paraphrases come from per-concept synonym lists, so the expressions of one
synonym group differ in wording and often in style while naming the same
object. :func:`resolve` is a symbolic set-filtering interpreter used as the
ground-truth oracle for everything the generator emits.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1

CATEGORY_WORDS = {
    "circle": ["circle", "ring", "disk", "ball"],
    "square": ["square", "box", "block", "cube"],
    "triangle": ["triangle", "wedge", "pyramid"],
    "star": ["star", "spark"],
}
COLOR_WORDS = {
    "red": ["red", "crimson", "scarlet"],
    "green": ["green", "lime", "emerald"],
    "blue": ["blue", "navy", "azure"],
    "yellow": ["yellow", "golden", "amber"],
    "purple": ["purple", "violet", "lilac"],
}
SIZE_WORDS = {
    "small": ["small", "little", "tiny"],
    "medium": ["medium", "midsize"],
    "large": ["large", "big", "huge"],
}
GENERIC_NOUNS = ["one", "thing", "object"]
LOCATION_WORDS = {
    "leftmost": ["leftmost", "left"],
    "rightmost": ["rightmost", "right"],
    "topmost": ["topmost", "top", "upper"],
    "bottommost": ["bottommost", "bottom", "lower"],
}
RELATION_PHRASES = {
    "above": [("above",), ("over",)],
    "below": [("below",), ("under",), ("beneath",)],
    "near": [("near",), ("beside",), ("next", "to")],
    "left_of": [("left", "of"), ("to", "the", "left", "of")],
    "right_of": [("right", "of"), ("to", "the", "right", "of")],
}
FILLERS = ["the", "that", "is"]

SIZE_SIDES = {"small": 2, "medium": 3, "large": 4}
NEAR_RADIUS = 5.0
MAX_TOKENS = 12

DIALECTS = {
    # style -> relation kinds usable by that style
    "base": {"styles": ("attribute", "location", "relation"),
             "relations": ("above", "below", "near"), "hops": (1,)},
    "plus": {"styles": ("attribute", "relation"),
             "relations": ("above", "below", "near"), "hops": (1,)},
    "reason": {"styles": ("relation",),
               "relations": ("left_of", "right_of", "above", "below"), "hops": (1, 2),
               "single_hop_relations": ("left_of", "right_of")},
}


def _vocabulary() -> list[str]:
    words: list[str] = list(FILLERS)
    groups: list[Iterable[str]] = [
        itertools.chain.from_iterable(CATEGORY_WORDS.values()),
        GENERIC_NOUNS,
        itertools.chain.from_iterable(COLOR_WORDS.values()),
        itertools.chain.from_iterable(SIZE_WORDS.values()),
        itertools.chain.from_iterable(LOCATION_WORDS.values()),
        (w for phrases in RELATION_PHRASES.values() for p in phrases for w in p),
    ]
    for g in groups:
        for w in g:
            if w not in words:
                words.append(w)
    return words


VOCABULARY: list[str] = _vocabulary()
LOCATION_LEXICON = frozenset(w for ws in LOCATION_WORDS.values() for w in ws)

_CATEGORY_OF = {w: c for c, ws in CATEGORY_WORDS.items() for w in ws}
_COLOR_OF = {w: c for c, ws in COLOR_WORDS.items() for w in ws}
_SIZE_OF = {w: c for c, ws in SIZE_WORDS.items() for w in ws}
_LOCATION_OF = {w: c for c, ws in LOCATION_WORDS.items() for w in ws}
_RELATION_SEQS = sorted(
    ((p, kind) for kind, ps in RELATION_PHRASES.items() for p in ps),
    key=lambda item: -len(item[0]),
)


class GenerationError(RuntimeError):
    pass


class ResolveError(ValueError):
    pass


class SchemaError(ValueError):
    pass


AMBIGUOUS = "AMBIGUOUS"
NONE = "NONE"


# --------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class BoundingBox:
    x_tl: float
    y_tl: float
    x_br: float
    y_br: float

    def __post_init__(self):
        if not (self.x_tl < self.x_br and self.y_tl < self.y_br):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x_br - self.x_tl

    @property
    def height(self) -> float:
        return self.y_br - self.y_tl

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_tl + self.x_br), 0.5 * (self.y_tl + self.y_br))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_tl, self.y_tl, self.x_br, self.y_br)


@dataclass(frozen=True)
class ObjectInstance:
    id: int
    category: str
    color: str
    size_class: str
    box: BoundingBox


@dataclass
class SceneConfig:
    H: int = 16
    W: int = 16
    min_objects: int = 3
    max_objects: int = 6
    categories: tuple[str, ...] = tuple(CATEGORY_WORDS)
    colors: tuple[str, ...] = tuple(COLOR_WORDS)
    sizes: tuple[str, ...] = tuple(SIZE_WORDS)
    # chance that a new object copies category and colour of an earlier one,
    # which forces location/relation language to disambiguate
    duplicate_prob: float = 0.35
    max_retries: int = 200

    def validate(self) -> None:
        if not (self.categories and self.colors and self.sizes):
            raise ValueError("palettes must be non-empty")
        if self.H < 8 or self.W < 8:
            raise ValueError("grid must be at least 8x8")
        if not 1 <= self.min_objects <= self.max_objects <= 8:
            raise ValueError("need 1 <= min_objects <= max_objects <= 8")
        for s in self.sizes:
            if s not in SIZE_SIDES:
                raise ValueError(f"unknown size class {s!r}")

    @property
    def channels(self) -> int:
        return len(self.categories) + len(self.colors) + len(self.sizes) + 1


@dataclass
class Scene:
    id: str
    H: int
    W: int
    objects: list[ObjectInstance]
    channels: np.ndarray = field(repr=False)

    def object(self, object_id: int) -> ObjectInstance:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(object_id)


@dataclass(frozen=True)
class Expression:
    tokens: tuple[str, ...]
    target_object_id: int
    scene_id: str
    dialect_id: str
    style: str
    synonym_group_id: str


# --------------------------------------------------------------------------
# scenes


def render_channels(objects: Sequence[ObjectInstance], config: SceneConfig) -> np.ndarray:
    """One-hot (category, colour, size, occupancy) per cell, H x W x C."""
    cats = {c: i for i, c in enumerate(config.categories)}
    cols = {c: i for i, c in enumerate(config.colors)}
    sizes = {c: i for i, c in enumerate(config.sizes)}
    n_cat, n_col, n_size = len(cats), len(cols), len(sizes)
    ch = np.zeros((config.H, config.W, config.channels))
    for o in objects:
        b = o.box
        ys = slice(int(b.y_tl), int(b.y_br))
        xs = slice(int(b.x_tl), int(b.x_br))
        ch[ys, xs, :] = 0.0
        ch[ys, xs, cats[o.category]] = 1.0
        ch[ys, xs, n_cat + cols[o.color]] = 1.0
        ch[ys, xs, n_cat + n_col + sizes[o.size_class]] = 1.0
        ch[ys, xs, n_cat + n_col + n_size] = 1.0
    return ch


def _overlaps(a: BoundingBox, b: BoundingBox) -> bool:
    return a.x_tl < b.x_br and b.x_tl < a.x_br and a.y_tl < b.y_br and b.y_tl < a.y_br


def _place_objects(rng: np.random.Generator, config: SceneConfig) -> list[ObjectInstance] | None:
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects: list[ObjectInstance] = []
    for i in range(n):
        if objects and rng.random() < config.duplicate_prob:
            src = objects[int(rng.integers(len(objects)))]
            category, color = src.category, src.color
        else:
            category = config.categories[int(rng.integers(len(config.categories)))]
            color = config.colors[int(rng.integers(len(config.colors)))]
        size = config.sizes[int(rng.integers(len(config.sizes)))]
        side = SIZE_SIDES[size]
        for _ in range(50):
            x = int(rng.integers(0, config.W - side + 1))
            y = int(rng.integers(0, config.H - side + 1))
            box = BoundingBox(float(x), float(y), float(x + side), float(y + side))
            if not any(_overlaps(box, o.box) for o in objects):
                break
        else:
            return None
        objects.append(ObjectInstance(i, category, color, size, box))
    return objects


def generate_scene(rng_seed: int, config: SceneConfig | None = None, scene_id: str | None = None,
                   dialects: Sequence[str] = ("base",)) -> Scene:
    """Deterministic scene for ``rng_seed``.

    Retries placement until every object is uniquely describable in each of
    ``dialects``; raises :class:`GenerationError` after ``max_retries``.
    """
    config = config or SceneConfig()
    config.validate()
    rng = np.random.default_rng(rng_seed)
    sid = scene_id if scene_id is not None else f"scene-{rng_seed}"
    for _ in range(config.max_retries):
        objects = _place_objects(rng, config)
        if objects is None:
            continue
        scene = Scene(sid, config.H, config.W, objects, render_channels(objects, config))
        index = _SceneIndex(scene)
        if all(describable(scene, o.id, d, index) for d in dialects for o in objects):
            return scene
    raise GenerationError(f"could not place a describable scene for seed {rng_seed}")


# --------------------------------------------------------------------------
# resolver


@dataclass(frozen=True)
class NounPhrase:
    category: str | None = None
    color: str | None = None
    size: str | None = None
    location: str | None = None


@dataclass(frozen=True)
class Form:
    """Semantic form: head phrase followed by (relation, phrase) hops."""
    head: NounPhrase
    hops: tuple[tuple[str, NounPhrase], ...] = ()


def parse(tokens: Sequence[str]) -> Form:
    for t in tokens:
        if t not in VOCAB_INDEX:
            raise ResolveError(f"unknown token {t!r}")
    pos = 0
    phrases: list[NounPhrase] = []
    relations: list[str] = []
    n = len(tokens)

    def take_np(pos: int) -> tuple[NounPhrase, int]:
        if pos < n and tokens[pos] == "the":
            pos += 1
        loc = size = color = None
        if pos < n and tokens[pos] in _LOCATION_OF and not _is_relation_at(tokens, pos):
            loc = _LOCATION_OF[tokens[pos]]
            pos += 1
        if pos < n and tokens[pos] in _SIZE_OF:
            size = _SIZE_OF[tokens[pos]]
            pos += 1
        if pos < n and tokens[pos] in _COLOR_OF:
            color = _COLOR_OF[tokens[pos]]
            pos += 1
        if pos >= n:
            raise ResolveError(f"expected a noun at position {pos}")
        w = tokens[pos]
        if w in _CATEGORY_OF:
            cat = _CATEGORY_OF[w]
        elif w in GENERIC_NOUNS:
            cat = None
        else:
            raise ResolveError(f"expected a noun, got {w!r}")
        return NounPhrase(cat, color, size, loc), pos + 1

    np0, pos = take_np(pos)
    phrases.append(np0)
    while pos < n:
        if tuple(tokens[pos:pos + 2]) == ("that", "is"):
            pos += 2
        rel = _relation_at(tokens, pos)
        if rel is None:
            raise ResolveError(f"expected a relation at position {pos}")
        seq, kind = rel
        pos += len(seq)
        relations.append(kind)
        nxt, pos = take_np(pos)
        phrases.append(nxt)
    return Form(phrases[0], tuple(zip(relations, phrases[1:])))


def _relation_at(tokens: Sequence[str], pos: int):
    for seq, kind in _RELATION_SEQS:
        if tuple(tokens[pos:pos + len(seq)]) == seq:
            return seq, kind
    return None


def _is_relation_at(tokens: Sequence[str], pos: int) -> bool:
    return _relation_at(tokens, pos) is not None


def relation_holds(kind: str, a: ObjectInstance, b: ObjectInstance) -> bool:
    (ax, ay), (bx, by) = a.box.center, b.box.center
    if kind == "above":
        return ay < by
    if kind == "below":
        return ay > by
    if kind == "left_of":
        return ax < bx
    if kind == "right_of":
        return ax > bx
    if kind == "near":
        return math.hypot(ax - bx, ay - by) <= NEAR_RADIUS
    raise ValueError(kind)


def _attr_filter(phrase: NounPhrase, objects: Iterable[ObjectInstance]) -> list[ObjectInstance]:
    return [
        o for o in objects
        if (phrase.category is None or o.category == phrase.category)
        and (phrase.color is None or o.color == phrase.color)
        and (phrase.size is None or o.size_class == phrase.size)
    ]


def _extremum(location: str, objs: list[ObjectInstance]) -> list[ObjectInstance]:
    if not objs:
        return objs
    key = {
        "leftmost": lambda o: o.box.center[0],
        "rightmost": lambda o: -o.box.center[0],
        "topmost": lambda o: o.box.center[1],
        "bottommost": lambda o: -o.box.center[1],
    }[location]
    best = min(key(o) for o in objs)
    return [o for o in objs if key(o) == best]


def denotation(form: Form, objects: Sequence[ObjectInstance]) -> list[ObjectInstance]:
    """Objects satisfying ``form``; relation chains are evaluated right to left.

    An extremum word applies after the phrase's relation constraint.
    """
    phrases = [form.head] + [p for _, p in form.hops]
    kinds = [k for k, _ in form.hops]
    current = _attr_filter(phrases[-1], objects)
    if phrases[-1].location:
        current = _extremum(phrases[-1].location, current)
    for i in range(len(phrases) - 2, -1, -1):
        kind = kinds[i]
        cand = _attr_filter(phrases[i], objects)
        cand = [x for x in cand if any(y.id != x.id and relation_holds(kind, x, y) for y in current)]
        if phrases[i].location:
            cand = _extremum(phrases[i].location, cand)
        current = cand
    return current


def resolve(expression: Expression | Sequence[str], scene: Scene) -> int | str:
    """Object id of the unique referent, else ``AMBIGUOUS`` or ``NONE``."""
    tokens = expression.tokens if isinstance(expression, Expression) else tuple(expression)
    found = denotation(parse(list(tokens)), scene.objects)
    if len(found) == 1:
        return found[0].id
    return AMBIGUOUS if found else NONE


# --------------------------------------------------------------------------
# expression generation


def _phrase_options(obj: ObjectInstance, allow_location: bool) -> list[NounPhrase]:
    """Every attribute-subset phrase matching ``obj`` (generic noun allowed)."""
    out = []
    for cat, col, size in itertools.product((obj.category, None), (obj.color, None),
                                            (obj.size_class, None)):
        locs = (None,) + (tuple(LOCATION_WORDS) if allow_location else ())
        for loc in locs:
            out.append(NounPhrase(cat, col, size, loc))
    return out


def _is_bare(p: NounPhrase) -> bool:
    return p.category is None and p.color is None and p.size is None


def _n_attrs(p: NounPhrase) -> int:
    return (p.category is not None) + (p.color is not None) + (p.size is not None)


class _SceneIndex:
    """Bitmask evaluator for location-free relation chains (generation only)."""

    def __init__(self, scene: Scene):
        self.objects = scene.objects
        self.bit = {o.id: 1 << i for i, o in enumerate(scene.objects)}
        self.rel: dict[str, list[int]] = {}
        for kind in RELATION_PHRASES:
            rows = []
            for y in self.objects:
                m = 0
                for x in self.objects:
                    if x.id != y.id and relation_holds(kind, x, y):
                        m |= self.bit[x.id]
                rows.append(m)
            self.rel[kind] = rows
        self._attr: dict[NounPhrase, int] = {}

    def attr(self, p: NounPhrase) -> int:
        key = NounPhrase(p.category, p.color, p.size)
        m = self._attr.get(key)
        if m is None:
            m = 0
            for o in _attr_filter(key, self.objects):
                m |= self.bit[o.id]
            self._attr[key] = m
        return m

    def through(self, kind: str, ys: int) -> int:
        m = 0
        rows = self.rel[kind]
        i = 0
        while ys:
            if ys & 1:
                m |= rows[i]
            ys >>= 1
            i += 1
        return m

    def landmarks(self, exclude: int | None = None) -> list[NounPhrase]:
        seen: dict[NounPhrase, None] = {}
        for o in self.objects:
            if o.id == exclude:
                continue
            for p in _phrase_options(o, allow_location=False):
                if not _is_bare(p):
                    seen.setdefault(p, None)
        return list(seen)


def feasible_forms(scene: Scene, object_id: int, dialect_id: str,
                   index: _SceneIndex | None = None, first_only: bool = False
                   ) -> dict[str, list[Form]]:
    """All semantic forms of each style that pick out exactly ``object_id``.

    With ``first_only`` the search stops at the first form found.
    """
    spec = DIALECTS[dialect_id]
    target = scene.object(object_id)
    objects = scene.objects
    idx = index or _SceneIndex(scene)
    want = idx.bit[object_id]
    forms: dict[str, list[Form]] = {}
    heads = [p for p in _phrase_options(target, False) if not _is_bare(p)]

    if "attribute" in spec["styles"]:
        forms["attribute"] = [Form(h) for h in heads if idx.attr(h) == want]
        if first_only and forms["attribute"]:
            return forms
    if "location" in spec["styles"]:
        locs = []
        for h in _phrase_options(target, True):
            if h.location is None:
                continue
            found = denotation(Form(h), objects)
            if len(found) == 1 and found[0].id == object_id:
                locs.append(Form(h))
        forms["location"] = locs
        if first_only and locs:
            return forms
    if "relation" in spec["styles"]:
        rel_forms: list[Form] = []
        forms["relation"] = rel_forms
        single = spec.get("single_hop_relations", spec["relations"])
        landmarks = idx.landmarks(exclude=object_id)
        if 1 in spec["hops"]:
            for kind in single:
                through = [(lm, idx.through(kind, idx.attr(lm))) for lm in landmarks]
                for h in heads:
                    hm = idx.attr(h)
                    for lm, t in through:
                        if (hm & t) == want:
                            rel_forms.append(Form(h, ((kind, lm),)))
            if first_only and rel_forms:
                return forms
        if 2 in spec["hops"]:
            # keep chains short enough for the token budget: at most two head
            # attributes, one attribute per landmark
            short_heads = [(h, idx.attr(h)) for h in heads if _n_attrs(h) <= 2]
            short_heads = [(h, m) for h, m in short_heads if m & want]
            lms = [(p, idx.attr(p)) for p in idx.landmarks() if _n_attrs(p) == 1]
            for k1 in spec["relations"]:
                for k2 in spec["relations"]:
                    for lm2, a2 in lms:
                        s2 = idx.through(k2, a2)
                        if not s2:
                            continue
                        for lm1, a1 in lms:
                            if not a1 & s2:
                                continue
                            direct = idx.through(k1, a1)
                            chained = idx.through(k1, a1 & s2)
                            for h, hm in short_heads:
                                if (hm & chained) == want and (hm & direct) != want:
                                    rel_forms.append(Form(h, ((k1, lm1), (k2, lm2))))
                                    if first_only:
                                        return forms
    return {k: v for k, v in forms.items() if v}


def describable(scene: Scene, object_id: int, dialect_id: str,
                index: _SceneIndex | None = None) -> bool:
    return bool(feasible_forms(scene, object_id, dialect_id, index, first_only=True))


def _pick(rng: np.random.Generator, options):
    return options[int(rng.integers(len(options)))]


def _realize_phrase(phrase: NounPhrase, rng: np.random.Generator) -> list[str]:
    toks: list[str] = []
    if rng.random() < 0.5:
        toks.append("the")
    if phrase.location:
        toks.append(_pick(rng, LOCATION_WORDS[phrase.location]))
    if phrase.size:
        toks.append(_pick(rng, SIZE_WORDS[phrase.size]))
    if phrase.color:
        toks.append(_pick(rng, COLOR_WORDS[phrase.color]))
    toks.append(_pick(rng, CATEGORY_WORDS[phrase.category]) if phrase.category
                else _pick(rng, GENERIC_NOUNS))
    return toks


def realize(form: Form, rng: np.random.Generator) -> tuple[str, ...]:
    toks = _realize_phrase(form.head, rng)
    for kind, phrase in form.hops:
        if len(form.hops) > 1 and rng.random() < 0.3:
            toks += ["that", "is"]
        toks += list(_pick(rng, RELATION_PHRASES[kind]))
        toks += _realize_phrase(phrase, rng)
    return tuple(toks)


def generate_expressions(scene: Scene, object_id: int, dialect_id: str, count: int,
                         rng: np.random.Generator, group_id: str | None = None) -> list[Expression]:
    """``count`` distinct paraphrases of one object, sharing a synonym group."""
    if count < 2:
        raise ValueError("count must be >= 2")
    scene.object(object_id)
    forms = feasible_forms(scene, object_id, dialect_id)
    if not forms:
        raise GenerationError(f"object {object_id} of {scene.id} is not describable in {dialect_id}")
    gid = group_id or f"{dialect_id}/{scene.id}/{object_id}"
    styles = sorted(forms)
    out: list[Expression] = []
    seen: set[tuple[str, ...]] = set()
    for _ in range(50 * count):
        if len(out) == count:
            break
        style = _pick(rng, styles)
        toks = realize(_pick(rng, forms[style]), rng)
        if len(toks) > MAX_TOKENS or toks in seen:
            continue
        seen.add(toks)
        out.append(Expression(toks, object_id, scene.id, dialect_id, style, gid))
    if len(out) < count:
        raise GenerationError(f"only {len(out)} distinct expressions for object {object_id}")
    return out


# --------------------------------------------------------------------------
# datasets


@dataclass
class SceneRecord:
    scene: Scene
    expressions: list[Expression]


@dataclass
class Dataset:
    name: str
    dialect_id: str
    splits: dict[str, list[SceneRecord]]
    vocabulary: list[str]
    seed: int = 0
    config_hash: str = ""

    def records(self, split: str) -> list[SceneRecord]:
        return self.splits[split]

    def pairs(self, split: str) -> list[tuple[Scene, Expression]]:
        return [(r.scene, e) for r in self.splits[split] for e in r.expressions]


@dataclass
class DatasetConfig:
    dialects: tuple[str, ...] = ("base", "plus")
    n_scenes: int = 1000
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    expressions_per_object: int = 5
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    prefix: str = "s"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dialects"] = list(self.dialects)
        d["split_fractions"] = list(self.split_fractions)
        d["scene"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d["scene"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        scene = SceneConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                               for k, v in d.pop("scene", {}).items()})
        if "dialects" in d:
            d["dialects"] = tuple(d["dialects"])
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        return cls(scene=scene, **d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    return n_train, n_val, n - n_train - n_val


def make_datasets(config: DatasetConfig) -> dict[str, Dataset]:
    """One dataset per dialect over a shared scene pool.

    Dialects see the same scenes with the same split assignment, so any two
    datasets built together have scene-disjoint splits with respect to each
    other as well (the same image never crosses from train to test).
    """
    seq = np.random.SeedSequence(config.seed)
    scene_seeds = seq.spawn(config.n_scenes)
    n_train, n_val, _ = split_sizes(config.n_scenes, config.split_fractions)
    per_dialect: dict[str, dict[str, list[SceneRecord]]] = {
        d: {"train": [], "val": [], "test": []} for d in config.dialects
    }
    for i, ss in enumerate(scene_seeds):
        sid = f"{config.prefix}{config.seed}-{i:05d}"
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        scene_seed, expr_seed = ss.spawn(2)
        scene = generate_scene(int(scene_seed.generate_state(1)[0]), config.scene, sid,
                               dialects=config.dialects)
        expr_rngs = expr_seed.spawn(len(config.dialects))
        for d, es in zip(config.dialects, expr_rngs):
            rng = np.random.default_rng(es)
            exprs: list[Expression] = []
            for o in scene.objects:
                exprs += generate_expressions(scene, o.id, d, config.expressions_per_object, rng)
            per_dialect[d][split].append(SceneRecord(scene, exprs))
    h = config.hash()
    return {
        d: Dataset(d, d, per_dialect[d], list(VOCABULARY), config.seed, h)
        for d in config.dialects
    }


def make_dataset(config: DatasetConfig) -> Dataset:
    if len(config.dialects) != 1:
        raise ValueError("make_dataset takes a single dialect; use make_datasets")
    return make_datasets(config)[config.dialects[0]]


# --------------------------------------------------------------------------
# serialization


def _box_json(b: BoundingBox) -> list[float]:
    return [b.x_tl, b.y_tl, b.x_br, b.y_br]


def save_dataset(dataset: Dataset, path: str | Path, config: DatasetConfig | None = None) -> None:
    """JSON-lines: a header line, then one line per scene record."""
    path = Path(path)
    header = {
        "schema_version": SCHEMA_VERSION,
        "name": dataset.name,
        "dialect_id": dataset.dialect_id,
        "seed": dataset.seed,
        "config_hash": dataset.config_hash,
        "vocabulary": dataset.vocabulary,
        "config": config.to_dict() if config else None,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for split in ("train", "val", "test"):
        for rec in dataset.splits[split]:
            s = rec.scene
            lines.append(json.dumps({
                "split": split,
                "scene_id": s.id,
                "H": s.H,
                "W": s.W,
                "objects": [
                    {"id": o.id, "category": o.category, "color": o.color,
                     "size_class": o.size_class, "box": _box_json(o.box)}
                    for o in s.objects
                ],
                "expressions": [
                    {"tokens": list(e.tokens), "target": e.target_object_id, "style": e.style,
                     "group": e.synonym_group_id}
                    for e in rec.expressions
                ],
            }, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SchemaError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: schema version {header.get('schema_version')} "
                          f"(expected {SCHEMA_VERSION})")
    cfg = DatasetConfig.from_dict(header["config"]) if header.get("config") else DatasetConfig()
    scene_cfg = cfg.scene
    splits: dict[str, list[SceneRecord]] = {"train": [], "val": [], "test": []}
    dialect = header["dialect_id"]
    for line in lines[1:]:
        rec = json.loads(line)
        objects = [
            ObjectInstance(o["id"], o["category"], o["color"], o["size_class"], BoundingBox(*o["box"]))
            for o in rec["objects"]
        ]
        sc = SceneConfig(**{**asdict(scene_cfg), "H": rec["H"], "W": rec["W"]})
        scene = Scene(rec["scene_id"], rec["H"], rec["W"], objects, render_channels(objects, sc))
        exprs = [
            Expression(tuple(e["tokens"]), e["target"], scene.id, dialect, e["style"], e["group"])
            for e in rec["expressions"]
        ]
        splits[rec["split"]].append(SceneRecord(scene, exprs))
    return Dataset(header["name"], dialect, splits, header["vocabulary"], header["seed"],
                   header["config_hash"])


VOCAB_INDEX = {w: i for i, w in enumerate(VOCABULARY)}
