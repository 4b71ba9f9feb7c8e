"""Toy language stack: referring-expression grammar, frozen embeddings, pooling.

Relations are evaluated on object centroids in the canonical world frame
(x to the right, y away from the viewer), so ground truth is the same in every
view.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .numkit import make_rng
from .scene import COLOR_TAGS, SHAPE_TAGS, SIZE_TAGS, ObjectInfo

D_TEXT = 32
RELATION_MARGIN = 0.25

RELATIONS: dict[str, tuple[str, ...]] = {
    "left": ("left", "of"),
    "right": ("right", "of"),
    "behind": ("behind",),
    "front": ("in", "front", "of"),
    "near": ("next", "to"),
}
FUNCTION_WORDS = ("the", "object", "that", "is", "left", "right", "of", "behind", "in", "front", "next", "to")


class GrammarError(RuntimeError):
    pass


@dataclass
class Vocab:
    tokens: list[str]
    seed: int
    dim: int = D_TEXT
    table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        rng = make_rng(self.seed, "vocab")
        self.table = rng.uniform(-1.0, 1.0, size=(len(self.tokens), self.dim)) / np.sqrt(self.dim)
        self.table.setflags(write=False)

    @classmethod
    def default(cls, seed: int = 0) -> "Vocab":
        toks = list(dict.fromkeys(FUNCTION_WORDS + tuple(COLOR_TAGS) + SHAPE_TAGS + tuple(SIZE_TAGS)))
        return cls(toks, seed)

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "seed": self.seed, "dim": self.dim}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(list(d["tokens"]), int(d["seed"]), int(d.get("dim", D_TEXT)))


@dataclass(frozen=True)
class Expression:
    tokens: tuple[str, ...]
    target_object: int
    split: str = "train"

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "target_object": self.target_object, "split": self.split}

    @classmethod
    def from_dict(cls, d: dict) -> "Expression":
        return cls(tuple(d["tokens"]), int(d["target_object"]), d.get("split", "train"))


def tokenize(text: str) -> tuple[str, ...]:
    return tuple(text.lower().split())


# ----------------------------------------------------------------------------
# semantics


def relation_holds(rel: str, t: ObjectInfo, r: ObjectInfo, objects: list[ObjectInfo]) -> bool:
    dx = t.centroid[0] - r.centroid[0]
    dy = t.centroid[1] - r.centroid[1]
    if rel == "left":
        return dx < -RELATION_MARGIN
    if rel == "right":
        return dx > RELATION_MARGIN
    if rel == "behind":
        return dy > RELATION_MARGIN
    if rel == "front":
        return dy < -RELATION_MARGIN
    if rel == "near":
        others = [o for o in objects if o.id != r.id]
        nearest = min(others, key=lambda o: (np.linalg.norm(o.centroid[:2] - r.centroid[:2]), o.id))
        return nearest.id == t.id
    raise ValueError(f"unknown relation {rel!r}")


def _np_matches(attrs: dict, o: ObjectInfo) -> bool:
    return all(getattr(o, f"{k}_tag") == v for k, v in attrs.items())


def resolve(tokens, objects: list[ObjectInfo]) -> list[int]:
    """Ids of all objects satisfying every predicate of ``tokens``.

    Parses the surface form directly: an optional relation phrase splits the
    tokens into a target noun phrase and a reference noun phrase.
    """
    tokens = list(tokens)
    rel, split_at, rel_len = None, None, 0
    for name, phrase in RELATIONS.items():
        n = len(phrase)
        for i in range(len(tokens) - n + 1):
            if tuple(tokens[i:i + n]) == phrase:
                rel, split_at, rel_len = name, i, n
                break
        if rel:
            break

    def parse_np(toks):
        attrs = {}
        for t in toks:
            if t in COLOR_TAGS:
                attrs["color"] = t
            elif t in SHAPE_TAGS:
                attrs["shape"] = t
            elif t in SIZE_TAGS:
                attrs["size"] = t
        return attrs

    if rel is None:
        attrs = parse_np(tokens)
        return [o.id for o in objects if _np_matches(attrs, o)]
    head = parse_np(tokens[:split_at])
    ref_attrs = parse_np(tokens[split_at + rel_len:])
    refs = [o for o in objects if _np_matches(ref_attrs, o)]
    if len(refs) != 1:
        return []
    ref = refs[0]
    return [o.id for o in objects
            if o.id != ref.id and _np_matches(head, o) and relation_holds(rel, o, ref, objects)]


# ----------------------------------------------------------------------------
# generation


@dataclass
class GrammarConfig:
    per_object: int = 5
    relation_fraction: float = 0.4
    max_retries: int = 50
    # which expressions may be held out: "plain" (attribute-only) or "any"
    test_pool: str = "plain"

    def __post_init__(self):
        if self.test_pool not in ("plain", "any"):
            raise ValueError("test_pool must be 'plain' or 'any'")


_ATTR_KEYS = ("size", "color", "shape")


def _noun_phrase(o: ObjectInfo, keys) -> tuple[str, ...]:
    words = ["the"]
    if "size" in keys:
        words.append(o.size_tag)
    if "color" in keys:
        words.append(o.color_tag)
    words.append(o.shape_tag if "shape" in keys else "object")
    return tuple(words)


def _attr_subsets(nonempty: bool):
    for k in range(0 if not nonempty else 1, 4):
        yield from combinations(_ATTR_KEYS, k)


def _candidates(o: ObjectInfo, objects: list[ObjectInfo]) -> tuple[list, list]:
    """All surface forms describing ``o``: (attribute-only, relational)."""
    plain, relational = [], []
    for keys in _attr_subsets(True):
        plain.append(_noun_phrase(o, keys))
    for ref in objects:
        if ref.id == o.id:
            continue
        ref_keys = [k for k in _attr_subsets(True)
                    if sum(_np_matches({a: getattr(ref, f"{a}_tag") for a in k}, x) for x in objects) == 1]
        if not ref_keys:
            continue
        ref_np = _noun_phrase(ref, min(ref_keys, key=len))
        for rel, phrase in RELATIONS.items():
            if not relation_holds(rel, o, ref, objects):
                continue
            for keys in _attr_subsets(False):
                head = _noun_phrase(o, keys)
                relational.append(head + phrase + ref_np)
                if keys:
                    relational.append(head + ("that", "is") + phrase + ref_np)
    return plain, relational


def generate_expressions(objects: list[ObjectInfo], seed: int, config: GrammarConfig | None = None
                         ) -> list[Expression]:
    """About ``per_object`` unique descriptions per object, one of each held out.

    Token multisets shared by two different targets are discarded so that a
    bag of words always determines its referent.
    """
    config = config or GrammarConfig()
    if len(objects) < 2:
        raise GrammarError("need at least two objects to generate relational expressions")
    rng = make_rng(seed, "expressions")
    pools = {}
    owners: dict[tuple, set[int]] = {}
    for o in objects:
        plain, rel = _candidates(o, objects)
        plain = [t for t in plain if resolve(t, objects) == [o.id]]
        rel = [t for t in rel if resolve(t, objects) == [o.id]]
        pools[o.id] = (plain, rel)
        for t in plain + rel:
            owners.setdefault(tuple(sorted(Counter(t).elements())), set()).add(o.id)

    def unambiguous(t):
        return len(owners[tuple(sorted(Counter(t).elements()))]) == 1

    out: list[Expression] = []
    for o in objects:
        plain = [t for t in pools[o.id][0] if unambiguous(t)]
        rel = [t for t in pools[o.id][1] if unambiguous(t)]
        chosen: list[tuple] = []
        n_rel = int(round(config.relation_fraction * config.per_object))
        for _ in range(config.max_retries):
            if len(chosen) >= config.per_object:
                break
            want_rel = sum(1 for t in chosen if t in rel) < n_rel
            pool = rel if (want_rel and rel) or not plain else plain
            pool = [t for t in pool if t not in chosen] or [t for t in plain + rel if t not in chosen]
            if not pool:
                break
            chosen.append(pool[rng.integers(len(pool))])
        if len(chosen) < config.per_object:
            raise GrammarError(f"cannot describe object {o.id} uniquely {config.per_object} times "
                               f"({len(chosen)} found)")
        eligible = [k for k, t in enumerate(chosen) if config.test_pool == "any" or t in plain] \
            or list(range(len(chosen)))
        test_k = eligible[int(rng.integers(len(eligible)))]
        out.extend(Expression(t, o.id, "test" if k == test_k else "train") for k, t in enumerate(chosen))
    return out


# ----------------------------------------------------------------------------
# features


def embed_tokens(expr: Expression | tuple, vocab: Vocab) -> np.ndarray:
    tokens = expr.tokens if isinstance(expr, Expression) else tuple(expr)
    try:
        idx = [vocab.index[t] for t in tokens]
    except KeyError as e:
        raise KeyError(f"unknown token {e.args[0]!r}") from None
    return vocab.table[idx]


def pool_sentence(words: np.ndarray) -> np.ndarray:
    """Mean over rows followed by L2 normalization."""
    words = np.atleast_2d(words)
    if len(words) < 1:
        raise ValueError("cannot pool an empty word matrix")
    mean = words.mean(axis=0)
    n = np.linalg.norm(mean)
    if n == 0.0:
        raise ValueError("sentence mean has zero norm")
    return mean / n
