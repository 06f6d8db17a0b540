"""Calibrated zero-shot prediction, CZSL/GZSL evaluation and attribute grounding."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .attrspace import AttributeSpace, ClassAttributeMatrix, Split
from .fst import TokenSequence, Vocabulary, grounding_template, prompt_template
from .model import DuetModel
from .sampling import SeededRng

CZSL = "czsl"
GZSL = "gzsl"
DEFAULT_GAMMA_GRID = tuple(round(0.1 * i, 1) for i in range(16))


class ConfigError(ValueError):
    pass


def harmonic_mean(u: float, s: float) -> float:
    """2SU/(S+U); 0 when both accuracies are 0."""
    if u < 0 or s < 0:
        raise ValueError("accuracies must be nonnegative")
    if u + s == 0:
        return 0.0
    return 2.0 * s * u / (s + u)


def image_attribute_vectors(model: DuetModel, images: np.ndarray, template: TokenSequence | None,
                            chunk: int = 64) -> np.ndarray:
    """Test-time ṽ for each image, with the fixed prompt template on the language side."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), chunk):
            block = np.asarray(images[i:i + chunk], dtype=np.float64)
            seqs = None if model.config.vision_only else [template] * len(block)
            out.append(model.forward(block, seqs).v_tilde.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.n_attributes))


def compatibility(v_tilde: np.ndarray, matrix: ClassAttributeMatrix) -> np.ndarray:
    return v_tilde @ matrix.values.T


def predict_from_scores(scores: np.ndarray, candidates: Sequence[int], seen: Sequence[int],
                        gamma: float) -> np.ndarray:
    """Argmax of score - gamma*[seen] over candidates; ties go to the smallest class id."""
    cand = np.array(sorted(set(int(c) for c in candidates)))
    if cand.size == 0:
        raise ConfigError("empty candidate set")
    seen_set = set(int(c) for c in seen)
    penalty = np.array([gamma if c in seen_set else 0.0 for c in cand])
    adjusted = scores[:, cand] - penalty
    return cand[np.argmax(adjusted, axis=1)]


def predict(image: np.ndarray, model: DuetModel, matrix: ClassAttributeMatrix,
            candidates: Sequence[int], gamma: float, split: Split,
            template: TokenSequence | None) -> int:
    v = image_attribute_vectors(model, np.asarray(image)[None], template)
    return int(predict_from_scores(compatibility(v, matrix), candidates, split.seen, gamma)[0])


@dataclass
class EvalReport:
    mode: str
    gamma: float | None
    per_class: dict[str, float]
    counts: dict[str, int]
    t1: float | None = None
    u: float | None = None
    s: float | None = None
    h: float | None = None
    seen_predictions: int | None = None
    excluded: list[int] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def macro_accuracy(pred: np.ndarray, labels: np.ndarray, classes: Sequence[int]
                   ) -> tuple[float, dict[int, float], list[int]]:
    per, excluded = {}, []
    for c in classes:
        sel = labels == c
        if not sel.any():
            excluded.append(int(c))
            continue
        per[int(c)] = 100.0 * float(np.mean(pred[sel] == c))
    acc = float(np.mean(list(per.values()))) if per else 0.0
    return acc, per, excluded


def evaluate_scores(scores: np.ndarray, labels: np.ndarray, split: Split | SubSplit, mode: str,
                    gamma: float) -> EvalReport:
    labels = np.asarray(labels)
    if mode == CZSL:
        sel = np.isin(labels, split.unseen)
        pred = predict_from_scores(scores[sel], split.unseen, split.seen, 0.0)
        t1, per, excl = macro_accuracy(pred, labels[sel], split.unseen)
        return EvalReport(CZSL, None, {str(k): v for k, v in per.items()},
                          {"images": int(sel.sum())}, t1=t1, excluded=excl,
                          notes=["gamma unused: CZSL candidates are all unseen"])
    if mode != GZSL:
        raise ConfigError(f"unknown mode {mode!r}")
    everything = list(split.seen) + list(split.unseen)
    pred = predict_from_scores(scores, everything, split.seen, gamma)
    su = np.isin(labels, split.unseen)
    u, per_u, ex_u = macro_accuracy(pred[su], labels[su], split.unseen)
    s, per_s, ex_s = macro_accuracy(pred[~su], labels[~su], split.seen)
    per = {str(k): v for k, v in sorted({**per_u, **per_s}.items())}
    return EvalReport(GZSL, gamma, per,
                      {"unseen_images": int(su.sum()), "seen_images": int((~su).sum())},
                      u=u, s=s, h=harmonic_mean(u, s),
                      seen_predictions=int(np.isin(pred, split.seen).sum()),
                      excluded=sorted(ex_u + ex_s))


def evaluate(dataset, model: DuetModel, mode: str, gamma: float,
             vocab: Vocabulary | None = None) -> EvalReport:
    """Macro accuracy on the dataset's test images (unseen classes, plus held-out seen for GZSL)."""
    vocab = vocab or Vocabulary.from_space(dataset.space)
    template = prompt_template(dataset.space, vocab)
    classes = dataset.split.unseen if mode == CZSL else range(dataset.matrix.n_classes)
    pairs = dataset.test_pairs(classes)
    v = image_attribute_vectors(model, dataset.batch(pairs), template)
    labels = np.array([c for c, _ in pairs])
    return evaluate_scores(compatibility(v, dataset.matrix), labels, dataset.split, mode, gamma)


def tune_gamma(scores: np.ndarray, labels: np.ndarray, split: Split,
               grid: Sequence[float] = DEFAULT_GAMMA_GRID) -> float:
    """Grid value with the highest GZSL harmonic mean; first maximum wins."""
    if len(grid) == 0:
        raise ConfigError("empty gamma grid")
    best, best_h = grid[0], -math.inf
    for g in grid:
        h = evaluate_scores(scores, labels, split, GZSL, g).h
        if h > best_h:
            best, best_h = g, h
    return float(best)


@dataclass(frozen=True)
class SubSplit:
    """Seen/unseen partition over a subset of class ids (global numbering kept)."""
    seen: tuple[int, ...]
    unseen: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "seen", tuple(sorted(self.seen)))
        object.__setattr__(self, "unseen", tuple(sorted(self.unseen)))
        if set(self.seen) & set(self.unseen):
            raise ValueError("seen and unseen classes must be disjoint")


def validation_split(split: Split, rng: SeededRng, pseudo_fraction: float = 0.25) -> SubSplit:
    """Treat a random subset of seen classes as unseen for calibration tuning."""
    seen = list(split.seen)
    if len(seen) < 2:
        raise ConfigError("need at least two seen classes to carve a validation split")
    k = min(len(seen) - 1, max(1, int(round(pseudo_fraction * len(seen)))))
    pseudo = [seen[i] for i in rng.permutation(len(seen))[:k]]
    return SubSplit(tuple(c for c in seen if c not in pseudo), tuple(pseudo))


def seen_prediction_counts(scores: np.ndarray, split: Split,
                           grid: Sequence[float] = DEFAULT_GAMMA_GRID) -> list[int]:
    everything = list(split.seen) + list(split.unseen)
    return [int(np.isin(predict_from_scores(scores, everything, split.seen, g), split.seen).sum())
            for g in grid]


# ---------------------------------------------------------------------------
# attribute grounding
# ---------------------------------------------------------------------------

@dataclass
class GroundingReport:
    prompts: dict[str, list[tuple[str, float]]]

    def to_dict(self) -> dict:
        return {"prompts": {k: [{"attribute": a, "score": s} for a, s in v]
                            for k, v in self.prompts.items()}}


def ground_from_logits(logits: np.ndarray, space: AttributeSpace, vocab: Vocabulary,
                       k: int = 3) -> GroundingReport:
    """Per-prompt top-k attributes from token logits at each prompt's [MASK] (P, V)."""
    report = {}
    for p, row in zip(space.prompts, logits):
        members = list(p.member_ids)
        token_ids = sorted({vocab.id(w) for a in members for w in space.attributes[a].surface})
        sub = row[token_ids]
        probs = np.exp(sub - sub.max())
        probs /= probs.sum()
        tok_score = dict(zip(token_ids, probs))
        scores = [(a, sum(tok_score[vocab.id(w)] for w in space.attributes[a].surface))
                  for a in members]
        scores.sort(key=lambda t: (-t[1], t[0]))
        top = scores[:k]
        total = sum(s for _, s in top)
        report[p.text] = [(space.attributes[a].text, float(s / total)) for a, s in top]
    return GroundingReport(report)


def ground_attributes(image: np.ndarray, model: DuetModel, space: AttributeSpace,
                      vocab: Vocabulary, k: int = 3) -> GroundingReport:
    seq, positions = grounding_template(space, vocab)
    with T.no_grad():
        out = model.forward(np.asarray(image, dtype=np.float64)[None], [seq])
        logits = model.token_logits(out.language[0]).data[positions]
    return ground_from_logits(logits, space, vocab, k)


# ---------------------------------------------------------------------------
# masked reconstruction probe
# ---------------------------------------------------------------------------

@dataclass
class CmrProbeResult:
    accuracy: float
    chance: float
    n: int

    @property
    def sigma(self) -> float:
        return math.sqrt(self.chance * (1.0 - self.chance) / self.n)

    @property
    def z(self) -> float:
        return (self.accuracy - self.chance) / self.sigma


def attribute_scores_at_mask(token_logp: np.ndarray, positions: Sequence[int],
                             members: Sequence[int], space: AttributeSpace,
                             vocab: Vocabulary) -> np.ndarray:
    """Sum of token log-probs of each member attribute over the masked positions."""
    out = []
    for a in members:
        words = space.attributes[a].surface
        if len(words) != len(positions):
            out.append(-math.inf)
            continue
        out.append(sum(token_logp[p, vocab.id(w)] for p, w in zip(positions, words)))
    return np.array(out)


def cmr_probe(model: DuetModel, examples, images: np.ndarray, space: AttributeSpace,
              vocab: Vocabulary, chunk: int = 64) -> CmrProbeResult:
    """Masked-attribute reconstruction accuracy among each prompt's members.

    ``examples`` is a list of ``(masked sequence, targets, target attribute)``.
    The chance rate is the agreement expected from a guess that ignores the
    truth but follows the probe's own attribute frequencies within each prompt.
    """
    correct = 0
    per_prompt: dict[int, list[int]] = {}
    with T.no_grad():
        for start in range(0, len(examples), chunk):
            block = examples[start:start + chunk]
            out = model.forward(images[start:start + chunk], [e[0] for e in block])
            for b, (seq, tgt, a_t) in enumerate(block):
                pos = [p for p, _ in tgt]
                logp = T.log_softmax(model.token_logits(out.language[b][np.array(pos)])).data
                members = list(space.prompt_of(a_t).member_ids)
                scores = attribute_scores_at_mask(logp, range(len(pos)), members, space, vocab)
                guess = members[int(np.argmax(scores))]
                correct += guess == a_t
                per_prompt.setdefault(space.attributes[a_t].prompt_id, []).append(a_t)
    n = len(examples)
    chance = 0.0
    for targets in per_prompt.values():
        _, counts = np.unique(targets, return_counts=True)
        f = counts / counts.sum()
        chance += len(targets) / n * float((f**2).sum())
    return CmrProbeResult(correct / n, chance, n)
