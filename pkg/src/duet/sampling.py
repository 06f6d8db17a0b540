"""Stochastic selection: mask targets, attribute pruning, ACL classes, task switching.

All draws go through :class:`SeededRng`, a thin wrapper over numpy's PCG64 so a
seed (plus an optional stream key such as the step index) fixes every draw on
every platform.
"""

from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .attrspace import AttributeSpace, ClassAttributeMatrix, Split, attribute_set_of

T_CLS = "T_CLS"
T_CSG = "T_CSG"


class ConfigError(ValueError):
    pass


class SeededRng:
    """PCG64 stream keyed by ``(seed, *stream)``; counts the draws it has served."""

    def __init__(self, seed: int, *stream: int):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.stream])))
        self.counter = 0

    def spawn(self, *stream: int) -> "SeededRng":
        return SeededRng(self.seed, *self.stream, *stream)

    def random(self) -> float:
        self.counter += 1
        return float(self._gen.random())

    def integers(self, low: int, high: int) -> int:
        self.counter += 1
        return int(self._gen.integers(low, high))

    def normal(self, size) -> np.ndarray:
        self.counter += 1
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._gen.permutation(n)

    def categorical(self, weights: Sequence[float]) -> int:
        # plain-Python cumulative sum: same sequential sums as np.cumsum, far less overhead
        cdf = list(itertools.accumulate(float(w) for w in weights))
        u = self.random() * cdf[-1]
        return min(bisect.bisect_right(cdf, u), len(cdf) - 1)

    def weighted_without_replacement(self, weights: Sequence[float], k: int) -> list[int]:
        """Successive sampling: each draw proportional to the remaining weights."""
        w = [float(x) for x in weights]
        chosen = []
        for _ in range(min(k, sum(1 for x in w if x != 0.0))):
            i = self.categorical(w)
            chosen.append(i)
            w[i] = 0.0
        return chosen

    def choice_without_replacement(self, n: int, k: int) -> list[int]:
        return self.weighted_without_replacement(np.ones(n), k)


# ---------------------------------------------------------------------------
# target selection and pruning
# ---------------------------------------------------------------------------

def seen_counts(matrix: ClassAttributeMatrix, split: Split) -> np.ndarray:
    return (matrix.values[list(split.seen)] > matrix.threshold).sum(axis=0)


def _lwrs_weights(c: int, matrix: ClassAttributeMatrix, split: Split,
                  counts: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    if c not in split.seen:
        raise ValueError(f"class {c} is not a seen class")
    counts = seen_counts(matrix, split) if counts is None else counts
    attrs = np.flatnonzero(matrix.membership()[c])
    if attrs.size == 0:
        raise ValueError(f"class {c} has an empty attribute set")
    held = counts[attrs]
    assert np.all(held > 0), "seen-class attribute with zero seen count"
    w = 1.0 / held
    return attrs, w / w.sum()


def lwrs_probabilities(c: int, matrix: ClassAttributeMatrix, split: Split,
                       counts: np.ndarray | None = None) -> dict[int, float]:
    attrs, w = _lwrs_weights(c, matrix, split, counts)
    return dict(zip(attrs.tolist(), w.tolist()))


def lwrs_sample(c: int, matrix: ClassAttributeMatrix, split: Split, rng: SeededRng,
                counts: np.ndarray | None = None) -> int:
    """Mask target drawn inversely to how many seen classes hold each attribute."""
    attrs, w = _lwrs_weights(c, matrix, split, counts)
    return int(attrs[rng.categorical(w.tolist())])


def uniform_target(c: int, matrix: ClassAttributeMatrix, rng: SeededRng) -> int:
    attrs = sorted(attribute_set_of(c, matrix))
    return attrs[rng.integers(0, len(attrs))]


def rap(attrs: Iterable[int], a_t: int, r_rap: float, rng: SeededRng,
        fixed_size: bool = False) -> frozenset[int]:
    """Drop each non-target attribute with probability ``r_rap``.

    With ``fixed_size`` exactly ``round((1 - r_rap) * n)`` non-targets survive.
    """
    if not 0.0 <= r_rap <= 1.0:
        raise ConfigError(f"r_rap must be in [0, 1], got {r_rap}")
    attrs = sorted(set(attrs))
    if a_t not in attrs:
        raise ValueError("target attribute must be in the attribute set")
    others = [a for a in attrs if a != a_t]
    if fixed_size:
        keep_n = int(round((1.0 - r_rap) * len(others)))
        kept = [others[i] for i in rng.choice_without_replacement(len(others), keep_n)]
    else:
        kept = [a for a in others if rng.random() >= r_rap]
    return frozenset(kept) | {a_t}


def task_switch(rho: float, rng: SeededRng) -> str:
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"rho must be in [0, 1], got {rho}")
    return T_CSG if rng.random() < rho else T_CLS


# ---------------------------------------------------------------------------
# attribute-level contrastive sampling
# ---------------------------------------------------------------------------

def acl_precondition(c: int, a_t: int, c_pos: int | None, c_neg: int | None, a_neg: int | None,
                     matrix: ClassAttributeMatrix, space: AttributeSpace) -> bool:
    """The positive/negative class preconditions as a standalone predicate."""
    m = matrix.membership()
    p_t = set(space.prompt_of(a_t).member_ids)
    if not m[c, a_t]:
        return False
    if c_pos is not None:
        if c_pos == c or not m[c_pos, a_t]:
            return False
    if c_neg is not None:
        if c_neg == c or c_neg == c_pos or a_neg is None:
            return False
        if a_neg == a_t or a_neg not in p_t:
            return False
        # a_neg held by c_neg, not by c; a_t not held by c_neg
        if not m[c_neg, a_neg] or m[c, a_neg] or m[c_neg, a_t]:
            return False
    return True


def acl_candidates(c: int, a_t: int, matrix: ClassAttributeMatrix, split: Split,
                   space: AttributeSpace) -> tuple[frozenset[int], frozenset[int]]:
    m = matrix.membership()
    if not m[c, a_t]:
        raise ValueError("target attribute is not held by the anchor class")
    p_t = [a for a in space.prompt_of(a_t).member_ids if a != a_t]
    values = matrix.values
    pos, neg = set(), set()
    for c2 in split.seen:
        if c2 == c:
            continue
        if m[c2, a_t]:
            pos.add(c2)
            continue
        if any(m[c2, a] and not m[c, a] for a in p_t):
            if np.abs(values[c] - values[c2]).sum() > 0:
                neg.add(c2)
    return frozenset(pos), frozenset(neg)


def negative_attributes(c: int, c_neg: int, a_t: int, matrix: ClassAttributeMatrix,
                        space: AttributeSpace) -> list[int]:
    m = matrix.membership()
    return [a for a in space.prompt_of(a_t).member_ids
            if a != a_t and m[c_neg, a] and not m[c, a]]


@dataclass(frozen=True)
class AclCounts:
    n_pos_classes: int = 1
    n_neg_classes: int = 2
    images_per_class: int = 1


@dataclass(frozen=True)
class AclSample:
    anchor_class: int
    target: int
    pos_classes: tuple[int, ...]
    pos_images: tuple[tuple[int, ...], ...]
    neg_classes: tuple[int, ...]
    neg_images: tuple[tuple[int, ...], ...]
    neg_attrs: tuple[int, ...]
    short: bool = False

    def check(self, matrix: ClassAttributeMatrix, space: AttributeSpace) -> None:
        for cp in self.pos_classes:
            if not acl_precondition(self.anchor_class, self.target, cp, None, None, matrix, space):
                raise AssertionError(f"positive class {cp} violates the precondition")
        for cn, an in zip(self.neg_classes, self.neg_attrs):
            if not acl_precondition(self.anchor_class, self.target, None, cn, an, matrix, space):
                raise AssertionError(f"negative class {cn} violates the precondition")
        if set(self.pos_classes) & set(self.neg_classes):
            raise AssertionError("a class is both positive and negative")
        keys = [(c, i) for c, imgs in zip(self.pos_classes + self.neg_classes,
                                          self.pos_images + self.neg_images) for i in imgs]
        if len(set(keys)) != len(keys):
            raise AssertionError("images within an ACL sample must be distinct")


def _distances(c: int, pool: Sequence[int], matrix: ClassAttributeMatrix) -> np.ndarray:
    values = matrix.values
    return np.abs(values[pool] - values[c]).sum(axis=1)


def negative_weights(c: int, pool: Sequence[int], matrix: ClassAttributeMatrix) -> np.ndarray:
    return (1.0 / _distances(c, pool, matrix)) ** 2


def positive_weights(c: int, pool: Sequence[int], matrix: ClassAttributeMatrix) -> np.ndarray:
    return _distances(c, pool, matrix) ** 2


def acl_sample(c: int, a_t: int, candidates: tuple[Iterable[int], Iterable[int]],
               counts: AclCounts, images_available: dict[int, int] | Sequence[int],
               matrix: ClassAttributeMatrix, space: AttributeSpace, rng: SeededRng) -> AclSample:
    """Draw positive (far) and negative (near) classes plus images for one anchor.

    ``images_available[c]`` is the number of training images of class ``c``;
    image indices refer to that class-local training list.
    """
    pos_pool = sorted(candidates[0])
    neg_pool = sorted(candidates[1])
    short = False

    def draw(pool, weight_fn, k):
        nonlocal short
        if k > len(pool):
            short = True
        if not pool or k == 0:
            return []
        weights = weight_fn(c, pool, matrix).tolist()
        if not any(weights):
            # every positive coincides with the anchor row; fall back to uniform
            weights = [1.0] * len(pool)
        return [pool[i] for i in rng.weighted_without_replacement(weights, k)]

    pos = draw(pos_pool, positive_weights, counts.n_pos_classes)
    neg = draw(neg_pool, negative_weights, counts.n_neg_classes)

    def images(cls_id):
        n = images_available[cls_id]
        k = counts.images_per_class
        nonlocal short
        if k > n:
            short = True
        if k == 0:
            return ()
        return tuple(sorted(rng.choice_without_replacement(n, k)))

    pos_images = tuple(images(cp) for cp in pos)
    neg_images = tuple(images(cn) for cn in neg)
    neg_attrs = []
    for cn in neg:
        options = negative_attributes(c, cn, a_t, matrix, space)
        neg_attrs.append(options[rng.integers(0, len(options))])
    sample = AclSample(c, a_t, tuple(pos), pos_images, tuple(neg), neg_images,
                       tuple(neg_attrs), short)
    sample.check(matrix, space)
    return sample
