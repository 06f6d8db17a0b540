"""Attributes, prompt sets, class-attribute matrices and their statistics.

Also reads/writes the plain-text matrix format and turns knowledge-graph
triples into an attribute space (relation names become prompt sets).
"""

from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ALWAYS_CO_OCCURRING = math.inf
UNDEFINED = math.nan


class MalformedClassError(ValueError):
    pass


class KGCycleError(ValueError):
    pass


class KGReferenceError(LookupError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class Attribute:
    id: int
    surface: tuple[str, ...]
    prompt_id: int

    @property
    def text(self) -> str:
        return " ".join(self.surface)


@dataclass(frozen=True)
class PromptSet:
    id: int
    name: tuple[str, ...]
    member_ids: tuple[int, ...]

    @property
    def text(self) -> str:
        return " ".join(self.name)


@dataclass(frozen=True)
class AttributeSpace:
    attributes: tuple[Attribute, ...]
    prompts: tuple[PromptSet, ...]

    def __post_init__(self):
        for i, a in enumerate(self.attributes):
            if a.id != i:
                raise ValueError("attribute ids must be contiguous from 0")
            if not a.surface or any(not w for w in a.surface):
                raise ValueError(f"attribute {i} has an empty surface")
        names = [p.name for p in self.prompts]
        if len(set(names)) != len(names):
            raise ValueError("prompt names must be unique")
        owner: dict[int, int] = {}
        for p in self.prompts:
            if not p.member_ids:
                raise ValueError(f"prompt {p.text!r} has no members")
            for a in p.member_ids:
                if a in owner:
                    raise ValueError(f"attribute {a} belongs to two prompt sets")
                owner[a] = p.id
        if sorted(owner) != list(range(len(self.attributes))):
            raise ValueError("prompt sets must partition the attribute ids")
        for a in self.attributes:
            if owner[a.id] != a.prompt_id:
                raise ValueError(f"attribute {a.id} prompt_id disagrees with its prompt set")

    @classmethod
    def from_groups(cls, groups: Sequence[tuple[str, Sequence[str]]]) -> "AttributeSpace":
        """Build from ``[(prompt name, [attribute surface, ...]), ...]`` in order."""
        attrs: list[Attribute] = []
        prompts: list[PromptSet] = []
        for pid, (pname, surfaces) in enumerate(groups):
            members = []
            for s in surfaces:
                attrs.append(Attribute(len(attrs), tuple(s.split()), pid))
                members.append(len(attrs) - 1)
            prompts.append(PromptSet(pid, tuple(pname.split()), tuple(members)))
        return cls(tuple(attrs), tuple(prompts))

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    def prompt_of(self, a: int) -> PromptSet:
        return self.prompts[self.attributes[a].prompt_id]

    def groups(self) -> list[tuple[str, list[str]]]:
        return [(p.text, [self.attributes[a].text for a in p.member_ids]) for p in self.prompts]


@dataclass(frozen=True, eq=False)
class ClassAttributeMatrix:
    class_names: tuple[str, ...]
    values: np.ndarray
    threshold: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != len(self.class_names):
            raise ValueError("matrix must be |C| x |A| with one row per class name")
        if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
            raise ValueError("degree scores must lie in [0, 1]")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        for c in range(v.shape[0]):
            if not np.any(v[c] > self.threshold):
                raise MalformedClassError(
                    f"class {self.class_names[c]!r} has no attribute above {self.threshold}")

    @property
    def n_classes(self) -> int:
        return self.values.shape[0]

    @property
    def n_attributes(self) -> int:
        return self.values.shape[1]

    def membership(self) -> np.ndarray:
        return self._membership

    @cached_property
    def _membership(self) -> np.ndarray:
        m = self.values > self.threshold
        m.setflags(write=False)
        return m

    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0) | (self.values == 1)))

    def __eq__(self, other):
        if not isinstance(other, ClassAttributeMatrix):
            return NotImplemented
        return (self.class_names == other.class_names and self.threshold == other.threshold
                and np.array_equal(self.values, other.values))


@dataclass(frozen=True)
class Split:
    seen: tuple[int, ...]
    unseen: tuple[int, ...]
    n_classes: int = field(default=-1)

    def __post_init__(self):
        seen, unseen = tuple(sorted(self.seen)), tuple(sorted(self.unseen))
        object.__setattr__(self, "seen", seen)
        object.__setattr__(self, "unseen", unseen)
        if set(seen) & set(unseen):
            raise ValueError("seen and unseen classes must be disjoint")
        n = self.n_classes if self.n_classes >= 0 else len(seen) + len(unseen)
        object.__setattr__(self, "n_classes", n)
        if sorted(seen + unseen) != list(range(n)):
            raise ValueError("split must cover every class id exactly once")

    def is_seen(self, c: int) -> bool:
        return c in self.seen


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def attribute_set_of(c: int, matrix: ClassAttributeMatrix) -> frozenset[int]:
    if not 0 <= c < matrix.n_classes:
        raise IndexError(f"class id {c} out of range")
    members = frozenset(int(i) for i in np.flatnonzero(matrix.values[c] > matrix.threshold))
    if not members:
        raise MalformedClassError(f"class {c} has an empty attribute set")
    return members


def freq(a: int, matrix: ClassAttributeMatrix, classes: Iterable[int] | None = None) -> float:
    """Percentage of ``classes`` whose attribute set contains ``a``."""
    classes = list(range(matrix.n_classes)) if classes is None else list(classes)
    if not classes:
        raise ValueError("freq needs at least one class")
    held = matrix.values[classes, a] > matrix.threshold
    return 100.0 * int(held.sum()) / len(classes)


def co_occurrence(a_i: int, a_j: int, matrix: ClassAttributeMatrix,
                  classes: Iterable[int] | None = None) -> float:
    """R(a_i <- a_j): classes holding both over classes holding a_j without a_i.

    Returns ``inf`` when a_j never appears without a_i, and ``nan`` when a_j
    never appears at all.
    """
    if a_i == a_j:
        raise ValueError("co-occurrence needs two distinct attributes")
    classes = list(range(matrix.n_classes)) if classes is None else list(classes)
    m = matrix.values[classes] > matrix.threshold
    both = int(np.sum(m[:, a_i] & m[:, a_j]))
    alone = int(np.sum(~m[:, a_i] & m[:, a_j]))
    if alone == 0:
        return ALWAYS_CO_OCCURRING if both else UNDEFINED
    return both / alone


def class_distance(c: int, c2: int, matrix: ClassAttributeMatrix) -> tuple[float, float | None]:
    """Manhattan distance between class rows and its reciprocal similarity.

    Similarity is ``None`` for attribute-identical classes.
    """
    dist = float(np.abs(matrix.values[c] - matrix.values[c2]).sum())
    return dist, (1.0 / dist if dist > 0 else None)


def distance_matrix(matrix: ClassAttributeMatrix) -> np.ndarray:
    v = matrix.values
    return np.abs(v[:, None, :] - v[None, :, :]).sum(-1)


def minmax_normalize(matrix: ClassAttributeMatrix) -> np.ndarray:
    """Global min-max scaling to percentages; display only."""
    v = matrix.values
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return 100.0 * (v - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# knowledge-graph ingestion
# ---------------------------------------------------------------------------

def kg_to_matrix(triples: Sequence[tuple[str, str, str]], h: int = 1, *,
                 classes: Sequence[str] | None = None,
                 relations: Iterable[str] | None = None,
                 entities: Iterable[str] | None = None,
                 ) -> tuple[AttributeSpace, ClassAttributeMatrix]:
    """Derive binary class attributes from (subject, relation, object) triples.

    A class has attribute ``(rel, e)`` when the shortest same-direction path from
    the class to ``e`` has length exactly ``h`` and starts with relation ``rel``.
    Classes default to subjects that never appear as an object.
    """
    if h < 1:
        raise ValueError("h must be >= 1")
    triples = [tuple(t) for t in triples]
    if not triples:
        raise ValueError("no triples given; cannot derive any class")
    rel_vocab = set(relations) if relations is not None else None
    ent_vocab = set(entities) if entities is not None else None
    out: dict[str, list[tuple[str, str]]] = defaultdict(list)
    objects: set[str] = set()
    subjects: list[str] = []
    for t in triples:
        if len(t) != 3 or not all(isinstance(x, str) and x for x in t):
            raise KGReferenceError(f"malformed triple {t!r}")
        s, r, o = t
        if rel_vocab is not None and r not in rel_vocab:
            raise KGReferenceError(f"unknown relation {r!r}")
        if ent_vocab is not None:
            for e in (s, o):
                if e not in ent_vocab:
                    raise KGReferenceError(f"dangling entity {e!r}")
        out[s].append((r, o))
        objects.add(o)
        if s not in subjects:
            subjects.append(s)
    for s in out:
        out[s].sort()

    if classes is None:
        classes = sorted(s for s in subjects if s not in objects)
    else:
        missing = [c for c in classes if c not in out]
        if missing:
            raise KGReferenceError(f"classes without triples: {missing}")
    if not classes:
        raise ValueError("no class entities found")
    _check_acyclic(out, classes)

    # BFS from each class; remember the first relation of every shortest path.
    reached: dict[str, set[tuple[str, str]]] = {}
    for c in classes:
        dist = {c: 0}
        first: dict[str, set[str]] = defaultdict(set)
        queue = deque([c])
        while queue:
            node = queue.popleft()
            for r, o in out.get(node, ()):
                rel0 = {r} if node == c else first[node]
                if o not in dist:
                    dist[o] = dist[node] + 1
                    first[o] |= rel0
                    queue.append(o)
                elif dist[o] == dist[node] + 1:
                    first[o] |= rel0
        reached[c] = {(r, e) for e, d in dist.items() if d == h for r in first[e]}

    pairs = sorted({p for v in reached.values() for p in v})
    if not pairs:
        raise ValueError(f"no attribute is reachable at exactly h={h}")
    by_rel: dict[str, list[str]] = defaultdict(list)
    for r, e in pairs:
        by_rel[r].append(e)
    groups = [(r, by_rel[r]) for r in sorted(by_rel)]
    space = AttributeSpace.from_groups(groups)
    index = {}
    for (r, ents), p in zip(sorted(by_rel.items()), space.prompts):
        for e, a in zip(ents, p.member_ids):
            index[(r, e)] = a
    values = np.zeros((len(classes), space.n_attributes))
    for i, c in enumerate(classes):
        for pair in reached[c]:
            values[i, index[pair]] = 1.0
    keep = [i for i in range(len(classes)) if values[i].any()]
    if len(keep) != len(classes):
        dropped = [classes[i] for i in range(len(classes)) if i not in keep]
        raise MalformedClassError(f"classes with no attribute at h={h}: {dropped}")
    return space, ClassAttributeMatrix(tuple(classes), values, threshold=0.0)


def _check_acyclic(out: dict[str, list[tuple[str, str]]], roots: Iterable[str]) -> None:
    state: dict[str, int] = {}
    for root in roots:
        if root in state:
            continue
        stack = [(root, iter(out.get(root, ())))]
        state[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
                continue
            o = nxt[1]
            if state.get(o) == 1:
                raise KGCycleError(f"cyclic same-direction path through {o!r}")
            if o not in state:
                state[o] = 1
                stack.append((o, iter(out.get(o, ()))))


def read_triples(path: str | Path) -> list[tuple[str, str, str]]:
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
            triples.append(tuple(parts))
    return triples


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------
#
#   #duet-attrspace 1
#   #threshold<TAB>0.0
#   #prompt<TAB>color<TAB>brown<TAB>black
#   #prompt<TAB>has part<TAB>tail<TAB>flippers
#   otter<TAB>1 0 1 1

MAGIC = "#duet-attrspace 1"


def format_matrix(space: AttributeSpace, matrix: ClassAttributeMatrix) -> str:
    if matrix.n_attributes != space.n_attributes:
        raise ValueError("matrix width does not match the attribute space")
    lines = [MAGIC, f"#threshold\t{matrix.threshold!r}"]
    for p in space.prompts:
        lines.append("\t".join(["#prompt", p.text] + [space.attributes[a].text for a in p.member_ids]))
    for name, row in zip(matrix.class_names, matrix.values):
        if "\t" in name or "\n" in name:
            raise ValueError(f"class name {name!r} contains a tab or newline")
        lines.append(name + "\t" + " ".join(repr(float(x)) for x in row))
    return "\n".join(lines) + "\n"


def parse_matrix(text: str, source: str = "<string>") -> tuple[AttributeSpace, ClassAttributeMatrix]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise FormatError(f"{source}:1: missing header {MAGIC!r}")
    threshold = 0.0
    groups: list[tuple[str, list[str]]] = []
    names: list[str] = []
    rows: list[list[float]] = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        if line.startswith("#threshold\t"):
            threshold = float(line.split("\t", 1)[1])
        elif line.startswith("#prompt\t"):
            parts = line.split("\t")
            if len(parts) < 3:
                raise FormatError(f"{source}:{lineno}: prompt line needs a name and members")
            groups.append((parts[1], parts[2:]))
        elif line.startswith("#"):
            continue
        else:
            if "\t" not in line:
                raise FormatError(f"{source}:{lineno}: expected '<class>\\t<degrees>'")
            name, nums = line.split("\t", 1)
            try:
                rows.append([float(x) for x in nums.split()])
            except ValueError as exc:
                raise FormatError(f"{source}:{lineno}: {exc}") from None
            names.append(name)
    space = AttributeSpace.from_groups(groups)
    for lineno_row, r in enumerate(rows):
        if len(r) != space.n_attributes:
            raise FormatError(f"{source}: class {names[lineno_row]!r} has {len(r)} degrees, "
                              f"expected {space.n_attributes}")
    values = np.array(rows, dtype=np.float64).reshape(len(rows), space.n_attributes)
    return space, ClassAttributeMatrix(tuple(names), values, threshold)


def write_matrix(path: str | Path, space: AttributeSpace, matrix: ClassAttributeMatrix) -> None:
    Path(path).write_text(format_matrix(space, matrix), encoding="utf-8")


def read_matrix(path: str | Path) -> tuple[AttributeSpace, ClassAttributeMatrix]:
    return parse_matrix(Path(path).read_text(encoding="utf-8"), str(path))
