"""Training objectives and the two-stage multi-task step.

Stage ``T_CLS`` sees the fixed prompt template and minimizes
``L_cc + lam_ar*L_ar + lam_con*L_con``. Stage ``T_CSG`` sees masked, pruned
attribute sentences and minimizes ``L_cc + lam_ar*L_ar + lam_cmr*L_cmr +
lam_acl*L_acl``. Batch reductions are arithmetic means over the examples that
actually contribute to a term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .attrspace import ClassAttributeMatrix, Split
from .fst import TokenSequence
from .model import DuetModel, DuetOutput
from .sampling import T_CLS, T_CSG
from .tensor import Tensor


class DataLeakError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lam_ar: float = 0.01
    lam_con: float = 0.05
    lam_cmr: float = 1.0
    lam_acl: float = 0.01
    tau: float = 0.05
    rho: float = 0.4

    def __post_init__(self):
        for name in ("lam_ar", "lam_con", "lam_cmr", "lam_acl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must be in [0, 1]")


@dataclass
class AclLinks:
    """Reference rows (into the batch's reference block) for one anchor."""
    positives: list[int]
    negatives: list[int]
    weight: float


@dataclass
class BatchContext:
    stage: str
    images: np.ndarray
    labels: np.ndarray
    sequences: list[TokenSequence]
    z: np.ndarray                                   # class attribute rows (B, |A|)
    targets: list[list[tuple[int, int]]] = field(default_factory=list)
    target_weights: np.ndarray | None = None        # z of the masked attribute per example
    acl: list[AclLinks | None] = field(default_factory=list)
    ref_images: np.ndarray | None = None
    ref_sequences: list[TokenSequence] = field(default_factory=list)
    ref_positions: list[list[int]] = field(default_factory=list)
    acl_skipped: int = 0

    def __post_init__(self):
        if self.stage == T_CSG:
            if len(self.targets) != len(self.labels) or any(not t for t in self.targets):
                raise ValueError("every T_CSG example needs masked targets")

    @property
    def n_refs(self) -> int:
        return 0 if self.ref_images is None else len(self.ref_images)


# ---------------------------------------------------------------------------
# individual losses
# ---------------------------------------------------------------------------

def loss_ar(v_tilde: Tensor, z: np.ndarray) -> Tensor:
    """Mean squared L2 distance between predicted and class attribute vectors."""
    diff = v_tilde - np.asarray(z, dtype=np.float64)
    return T.square(diff).sum(axis=-1).mean()


def class_logits(v_tilde: Tensor, matrix: ClassAttributeMatrix, classes: Sequence[int]) -> Tensor:
    return v_tilde @ Tensor(matrix.values[list(classes)].T)


def loss_cc(v_tilde: Tensor, labels: Sequence[int], matrix: ClassAttributeMatrix,
            split: Split) -> Tensor:
    """Cross-entropy of compatibility scores over the seen classes only."""
    index = {c: i for i, c in enumerate(split.seen)}
    try:
        cols = np.array([index[int(y)] for y in labels])
    except KeyError as exc:
        raise DataLeakError(f"class {exc.args[0]} is not seen but appears in training") from None
    logp = T.log_softmax(class_logits(v_tilde, matrix, split.seen), axis=-1)
    return -(logp[np.arange(len(cols)), cols].mean())


def _contrast(anchor: Tensor, refs: Tensor, pos_mask: np.ndarray, neg_mask: np.ndarray,
              tau: float) -> tuple[Tensor, np.ndarray]:
    """Per-anchor mean over positives of -log(e^{s+} / (e^{s+} + sum_neg e^{s-})).

    Returns the per-anchor losses (n,) and a boolean vector of anchors that had
    at least one positive.
    """
    sims = T.l2_normalize(anchor) @ T.swap_last(T.l2_normalize(refs))   # (n, R)
    logits = sims * (1.0 / tau)
    e = T.exp(logits)
    neg_sum = (e * neg_mask.astype(np.float64)).sum(axis=1)              # (n,)
    denom = T.log(T.swap_last(e) + neg_sum)                              # (R, n)
    pair = T.swap_last(denom) - logits                                   # (n, R)
    counts = pos_mask.sum(axis=1)
    has_pos = counts > 0
    w = pos_mask / np.maximum(counts, 1)[:, None]
    return (pair * w).sum(axis=1), has_pos


def loss_con(proj: Tensor, labels: Sequence[int], tau: float) -> Tensor:
    """Class-level supervised contrastive loss over in-batch positives/negatives."""
    y = np.asarray(labels)
    same = y[:, None] == y[None, :]
    pos = same & ~np.eye(len(y), dtype=bool)
    neg = ~same
    per_anchor, has_pos = _contrast(proj, proj, pos, neg, tau)
    if not has_pos.any():
        return Tensor(0.0)
    return per_anchor[np.flatnonzero(has_pos)].mean()


def info_nce(anchor: Tensor, positive: Tensor, negatives: Tensor | None, tau: float) -> Tensor:
    """Single-anchor -log f with cosine similarity; vectors are 1-D, negatives 2-D."""
    refs = positive.reshape(1, -1) if negatives is None else \
        T.concat([positive.reshape(1, -1), negatives], axis=0)
    R = refs.shape[0]
    pos = np.zeros((1, R), dtype=bool)
    pos[0, 0] = True
    neg = ~pos
    per, _ = _contrast(anchor.reshape(1, -1), refs, pos, neg, tau)
    return per.sum()


def loss_cmr(language: Tensor, model: DuetModel, targets: Sequence[Sequence[tuple[int, int]]],
             weights: np.ndarray, threshold: float = 0.0) -> Tensor:
    """Degree-weighted negative log-likelihood of the masked attribute tokens."""
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights <= threshold):
        raise AssertionError("masked attribute with degree at or below the membership threshold")
    rows, cols, toks, owner = [], [], [], []
    for b, tgt in enumerate(targets):
        for pos, tok in tgt:
            rows.append(b)
            cols.append(pos)
            toks.append(tok)
            owner.append(b)
    states = language[np.array(rows), np.array(cols)]                     # (n_tok, d)
    logp = T.log_softmax(model.token_logits(states), axis=-1)
    picked = logp[np.arange(len(toks)), np.array(toks)]                   # (n_tok,)
    scale = -weights[np.array(owner)] / len(targets)
    return (picked * scale).sum()


def pooled(states: Tensor, rows: Sequence[int], positions: Sequence[Sequence[int]]) -> Tensor:
    """Mean-pool ``states[row, positions[row]]`` for each requested row -> (n, d)."""
    n = len(rows)
    L = states.shape[1]
    pool = np.zeros((n, L))
    for i, (r, ps) in enumerate(zip(rows, positions)):
        pool[i, list(ps)] = 1.0 / len(ps)
    picked = states[np.asarray(rows)]                                     # (n, L, d)
    return (T.swap_last(picked) @ Tensor(pool[:, :, None])).reshape(n, states.shape[2])


def loss_acl(anchor_proj: Tensor, ref_proj: Tensor, links: Sequence[AclLinks | None],
             tau: float) -> Tensor:
    """Min-weighted attribute-level contrastive loss.

    ``anchor_proj`` has one row per anchor in ``links`` that is not None.
    """
    active = [lk for lk in links if lk is not None]
    if not active:
        return Tensor(0.0)
    R = ref_proj.shape[0]
    pos = np.zeros((len(active), R), dtype=bool)
    neg = np.zeros((len(active), R), dtype=bool)
    for i, lk in enumerate(active):
        pos[i, lk.positives] = True
        neg[i, lk.negatives] = True
    per, has_pos = _contrast(anchor_proj, ref_proj, pos, neg, tau)
    w = np.array([lk.weight for lk in active]) * has_pos
    return (per * w).sum() * (1.0 / len(active))


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def compute_losses(batch: BatchContext, model: DuetModel, weights: LossWeights,
                   matrix: ClassAttributeMatrix, split: Split,
                   detach_refs: bool = False) -> tuple[Tensor, dict[str, Tensor]]:
    B = len(batch.labels)
    parts: dict[str, Tensor] = {}
    if batch.stage == T_CSG and batch.n_refs and not model.config.vision_only:
        if detach_refs:
            out = model.forward(batch.images, batch.sequences)
            with T.no_grad():
                ref_out = model.forward(batch.ref_images, batch.ref_sequences)
            anchors_lang, refs_lang = out.language, ref_out.language
            ref_rows = list(range(batch.n_refs))
        else:
            out_all = model.forward(np.concatenate([batch.images, batch.ref_images]),
                                    list(batch.sequences) + list(batch.ref_sequences))
            out = DuetOutput(out_all.vision, out_all.language, out_all.cls[:B],
                             out_all.v_tilde[:B], out_all.mask)
            anchors_lang = refs_lang = out_all.language
            ref_rows = list(range(B, B + batch.n_refs))
    else:
        out = model.forward(batch.images, None if model.config.vision_only else batch.sequences)
        anchors_lang, ref_rows = out.language, []

    parts["cc"] = loss_cc(out.v_tilde, batch.labels, matrix, split)
    parts["ar"] = loss_ar(out.v_tilde, batch.z)
    total = parts["cc"] + parts["ar"] * weights.lam_ar
    if batch.stage == T_CLS:
        if weights.lam_con > 0:
            parts["con"] = loss_con(model.project_head(out.cls), batch.labels, weights.tau)
            total = total + parts["con"] * weights.lam_con
        return total, parts

    if model.config.vision_only:
        return total, parts
    if weights.lam_cmr > 0:
        parts["cmr"] = loss_cmr(anchors_lang, model, batch.targets, batch.target_weights)
        total = total + parts["cmr"] * weights.lam_cmr
    if weights.lam_acl > 0 and ref_rows and any(lk is not None for lk in batch.acl):
        idx = [b for b, lk in enumerate(batch.acl) if lk is not None]
        anchor = pooled(anchors_lang, idx, [[p for p, _ in batch.targets[b]] for b in idx])
        refs = pooled(refs_lang, ref_rows, batch.ref_positions)
        parts["acl"] = loss_acl(model.project_head(anchor), model.project_head(refs),
                                batch.acl, weights.tau)
        total = total + parts["acl"] * weights.lam_acl
    return total, parts


@dataclass
class StepMetrics:
    step: int
    stage: str
    losses: dict[str, float]
    grad_norm: float
    aborted: bool = False
    acl_skipped: int = 0

    def to_record(self) -> dict:
        rec = {"step": self.step, "stage": self.stage}
        rec.update({k: self.losses[k] for k in sorted(self.losses)})
        rec["grad_norm"] = self.grad_norm
        rec["acl_skipped"] = self.acl_skipped
        if self.aborted:
            rec["aborted"] = True
        return rec


def training_step(batch: BatchContext, model: DuetModel, weights: LossWeights,
                  optimizer: T.AdamW, matrix: ClassAttributeMatrix, split: Split,
                  step: int, detach_refs: bool = False) -> StepMetrics:
    """One optimizer step on the stage objective; non-finite losses leave parameters alone."""
    optimizer.zero_grad()
    try:
        total, parts = compute_losses(batch, model, weights, matrix, split, detach_refs)
    except T.NumericalInputError:
        return StepMetrics(step, batch.stage, {"total": math.nan}, math.nan, aborted=True,
                           acl_skipped=batch.acl_skipped)
    losses = {k: v.item() for k, v in parts.items()}
    losses["total"] = total.item()
    if not all(math.isfinite(x) for x in losses.values()):
        return StepMetrics(step, batch.stage, losses, math.nan, aborted=True,
                           acl_skipped=batch.acl_skipped)
    total.backward()
    grads = optimizer.grads()
    gnorm = T.global_grad_norm(grads)
    if not math.isfinite(gnorm):
        optimizer.zero_grad()
        return StepMetrics(step, batch.stage, losses, gnorm, aborted=True,
                           acl_skipped=batch.acl_skipped)
    optimizer.step()
    return StepMetrics(step, batch.stage, losses, gnorm, acl_skipped=batch.acl_skipped)
