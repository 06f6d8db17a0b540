"""Feature-to-sequence transformation: attribute sets -> prompt-structured tokens.

A class ``{brown, tail, flippers}`` over prompts ``color`` and ``has part``
serializes to ``| color : brown | has part : tail , flippers |`` framed by
``[CLS]`` and ``[SEP]``. Prompt groups without members keep their
``| name :`` slot so training sequences share the layout of the template.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .attrspace import AttributeSpace

PAD, CLS, MASK, SEP, BAR, COLON, COMMA = "[PAD]", "[CLS]", "[MASK]", "[SEP]", "|", ":", ","
SPECIALS = (PAD, CLS, MASK, SEP, BAR, COLON, COMMA)

SEG_SPECIAL = "special"
SEG_PROMPT = "prompt"
SEG_SEP = "separator"
SEG_ATTR = "attribute"
SEG_MASK = "mask"
NO_ATTR = -1


def prompt_words(name: Iterable[str]) -> tuple[str, ...]:
    """Prompt-name tokens: ``hasPart`` / ``has_part`` / ``Has Part`` all give ``has part``."""
    text = " ".join(name)
    text = re.sub(r"(?<=[a-z0-9])(?=[A-Z])", " ", text)
    return tuple(text.replace("_", " ").replace("-", " ").lower().split())


class MissingTargetError(LookupError):
    pass


class VocabularyError(KeyError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def from_space(cls, space: AttributeSpace) -> "Vocabulary":
        words = set()
        for p in space.prompts:
            words.update(prompt_words(p.name))
        for a in space.attributes:
            words.update(a.surface)
        words -= set(SPECIALS)
        return cls(SPECIALS + tuple(sorted(words)))

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise VocabularyError(token) from None

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.id(w) for w in words]

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def mask_id(self) -> int:
        return self._index[MASK]


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    segments: tuple[str, ...]
    attr_ids: tuple[int, ...]

    def __post_init__(self):
        if not len(self.ids) == len(self.segments) == len(self.attr_ids):
            raise ValueError("token ids and tags must align")

    def __len__(self) -> int:
        return len(self.ids)

    def positions_of(self, a: int) -> list[int]:
        return [i for i, t in enumerate(self.attr_ids) if t == a]

    def attributes(self) -> list[int]:
        seen: list[int] = []
        for t in self.attr_ids:
            if t != NO_ATTR and t not in seen:
                seen.append(t)
        return seen


def serialize(attrs: Iterable[int], space: AttributeSpace, vocab: Vocabulary) -> TokenSequence:
    """Serialize an attribute-id set (any order) into a token sequence."""
    attrs = set(attrs)
    for a in attrs:
        if not 0 <= a < space.n_attributes:
            raise VocabularyError(f"attribute id {a} is not in the space")
    ids, segs, tags = [vocab.id(CLS)], [SEG_SPECIAL], [NO_ATTR]

    def emit(word, seg, tag=NO_ATTR):
        ids.append(vocab.id(word))
        segs.append(seg)
        tags.append(tag)

    for p in space.prompts:
        emit(BAR, SEG_SEP)
        for w in prompt_words(p.name):
            emit(w, SEG_PROMPT)
        emit(COLON, SEG_SEP)
        members = [a for a in p.member_ids if a in attrs]
        for k, a in enumerate(sorted(members)):
            if k:
                emit(COMMA, SEG_SEP)
            for w in space.attributes[a].surface:
                emit(w, SEG_ATTR, a)
    emit(BAR, SEG_SEP)
    emit(SEP, SEG_SPECIAL)
    return TokenSequence(tuple(ids), tuple(segs), tuple(tags))


def prompt_template(space: AttributeSpace, vocab: Vocabulary) -> TokenSequence:
    return serialize((), space, vocab)


def grounding_template(space: AttributeSpace, vocab: Vocabulary) -> tuple[TokenSequence, list[int]]:
    """Template with one [MASK] after each prompt name; returns mask positions per prompt."""
    base = prompt_template(space, vocab)
    ids, segs, tags = list(base.ids), list(base.segments), list(base.attr_ids)
    positions = []
    bars = [i for i, t in enumerate(ids) if t == vocab.id(BAR)]
    # insert in reverse so earlier indices stay valid
    colon_positions = []
    for start in bars[:-1]:
        j = start
        while ids[j] != vocab.id(COLON):
            j += 1
        colon_positions.append(j)
    for j in reversed(colon_positions):
        ids.insert(j + 1, vocab.mask_id)
        segs.insert(j + 1, SEG_MASK)
        tags.insert(j + 1, NO_ATTR)
    for k, j in enumerate(colon_positions):
        positions.append(j + 1 + k)
    return TokenSequence(tuple(ids), tuple(segs), tuple(tags)), positions


def mask_attribute(seq: TokenSequence, a_t: int, vocab: Vocabulary
                   ) -> tuple[TokenSequence, list[tuple[int, int]]]:
    """Replace every token of attribute ``a_t`` with [MASK] (whole-phrase masking)."""
    positions = seq.positions_of(a_t)
    if not positions:
        raise MissingTargetError(f"attribute {a_t} is not realized in the sequence")
    ids, segs = list(seq.ids), list(seq.segments)
    targets = []
    for i in positions:
        targets.append((i, ids[i]))
        ids[i] = vocab.mask_id
        segs[i] = SEG_MASK
    return TokenSequence(tuple(ids), tuple(segs), seq.attr_ids), targets


def restore(seq: TokenSequence, targets: Sequence[tuple[int, int]]) -> TokenSequence:
    ids, segs = list(seq.ids), list(seq.segments)
    for i, tok in targets:
        ids[i] = tok
        segs[i] = SEG_ATTR
    return TokenSequence(tuple(ids), tuple(segs), seq.attr_ids)


def detokenize(seq: TokenSequence | Sequence[int], vocab: Vocabulary, specials: bool = False) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    skip = set() if specials else {vocab.id(PAD), vocab.id(CLS), vocab.id(SEP)}
    return " ".join(vocab.tokens[i] for i in ids if i not in skip)


def surfaces_of(seq: TokenSequence, space: AttributeSpace) -> list[str]:
    """Attribute surfaces realized in ``seq``, read back from its token stream."""
    return [space.attributes[a].text for a in seq.attributes()]
