"""Batch assembly and the training loop around :func:`duet.losses.training_step`."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .attrspace import attribute_set_of
from .fst import Vocabulary, mask_attribute, prompt_template, serialize
from .losses import AclLinks, BatchContext, LossWeights, StepMetrics, training_step
from .model import DuetModel, ModelConfig
from .sampling import (T_CLS, T_CSG, AclCounts, SeededRng, acl_candidates, acl_sample,
                       lwrs_sample, rap, seen_counts, task_switch, uniform_target)
from .synth import PatchWorldDataset


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    r_rap: float = 0.5
    rap_fixed_size: bool = False
    target_sampling: str = "lwrs"          # or "uniform"
    n_pos_classes: int = 1
    n_neg_classes: int = 2
    images_per_class: int = 1
    acl_detach_refs: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.target_sampling not in ("lwrs", "uniform"):
            raise ValueError("target_sampling must be 'lwrs' or 'uniform'")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")

    def to_dict(self) -> dict:
        return asdict(self)


def model_config_for(dataset: PatchWorldDataset, vocab: Vocabulary, **overrides) -> ModelConfig:
    g = dataset.config
    base = dict(vocab_size=len(vocab), n_attributes=dataset.space.n_attributes,
                image_size=g.image_size, patch_size=g.patch_size, channels=g.channels)
    base.update(overrides)
    return ModelConfig(**base)


class BatchBuilder:
    """Turns (class, image) pairs into stage-specific :class:`BatchContext` objects."""

    def __init__(self, dataset: PatchWorldDataset, vocab: Vocabulary, config: TrainConfig,
                 weights: LossWeights):
        self.ds = dataset
        self.vocab = vocab
        self.config = config
        self.weights = weights
        self.template = prompt_template(dataset.space, vocab)
        self.counts = seen_counts(dataset.matrix, dataset.split)
        self.acl_counts = AclCounts(config.n_pos_classes, config.n_neg_classes,
                                    config.images_per_class)
        self._full = {c: serialize(attribute_set_of(c, dataset.matrix), dataset.space, vocab)
                      for c in dataset.split.seen}
        self._n_train = {c: len(dataset.train_indices(c)) for c in dataset.split.seen}

    def build(self, pairs: list[tuple[int, int]], stage: str, rng: SeededRng) -> BatchContext:
        ds = self.ds
        images = ds.batch(pairs)
        labels = np.array([c for c, _ in pairs], dtype=np.int64)
        z = ds.matrix.values[labels]
        if stage == T_CLS:
            return BatchContext(T_CLS, images, labels, [self.template] * len(pairs), z)

        seqs, targets, tw, links = [], [], [], []
        ref_pairs, ref_seqs, ref_pos = [], [], []
        skipped = 0
        for c, _ in pairs:
            attrs = attribute_set_of(c, ds.matrix)
            if self.config.target_sampling == "lwrs":
                a_t = lwrs_sample(c, ds.matrix, ds.split, rng, self.counts)
            else:
                a_t = uniform_target(c, ds.matrix, rng)
            kept = rap(attrs, a_t, self.config.r_rap, rng, self.config.rap_fixed_size)
            masked, tgt = mask_attribute(serialize(kept, ds.space, self.vocab), a_t, self.vocab)
            seqs.append(masked)
            targets.append(tgt)
            tw.append(ds.matrix.values[c, a_t])
            if self.weights.lam_acl <= 0:
                links.append(None)
                continue
            pos_c, neg_c = acl_candidates(c, a_t, ds.matrix, ds.split, ds.space)
            if not pos_c or not neg_c:
                links.append(None)
                skipped += 1
                continue
            sample = acl_sample(c, a_t, (pos_c, neg_c), self.acl_counts, self._n_train,
                                ds.matrix, ds.space, rng)
            pos_rows, neg_rows = [], []
            for cp, imgs in zip(sample.pos_classes, sample.pos_images):
                for i in imgs:
                    pos_rows.append(len(ref_pairs))
                    ref_pairs.append((cp, ds.train_indices(cp)[i]))
                    ref_seqs.append(self._full[cp])
                    ref_pos.append(self._full[cp].positions_of(a_t))
            for cn, an, imgs in zip(sample.neg_classes, sample.neg_attrs, sample.neg_images):
                for i in imgs:
                    neg_rows.append(len(ref_pairs))
                    ref_pairs.append((cn, ds.train_indices(cn)[i]))
                    ref_seqs.append(self._full[cn])
                    ref_pos.append(self._full[cn].positions_of(an))
            weight = min(ds.matrix.values[c, a_t], ds.matrix.values[sample.pos_classes[0], a_t])
            links.append(AclLinks(pos_rows, neg_rows, float(weight)))
        return BatchContext(
            T_CSG, images, labels, seqs, z, targets=targets, target_weights=np.array(tw),
            acl=links, ref_images=ds.batch(ref_pairs) if ref_pairs else None,
            ref_sequences=ref_seqs, ref_positions=ref_pos, acl_skipped=skipped)


class Trainer:
    def __init__(self, dataset: PatchWorldDataset, model: DuetModel, config: TrainConfig,
                 weights: LossWeights, vocab: Vocabulary | None = None):
        self.ds = dataset
        self.model = model
        self.config = config
        self.weights = weights
        self.vocab = vocab or Vocabulary.from_space(dataset.space)
        self.builder = BatchBuilder(dataset, self.vocab, config, weights)
        self.optimizer = T.AdamW(model.parameters(), lr=config.lr,
                                 betas=(config.beta1, config.beta2),
                                 weight_decay=config.weight_decay,
                                 no_decay=lambda p: p.ndim == 1)
        self.step_index = 0
        self._pairs = dataset.train_pairs()
        self._order: np.ndarray = np.zeros(0, dtype=np.int64)
        self._cursor = 0
        self._epoch = -1

    def _next_pairs(self) -> list[tuple[int, int]]:
        # an epoch is one seeded shuffle of the seen training images
        out = []
        while len(out) < self.config.batch_size:
            if self._cursor >= len(self._order):
                self._epoch += 1
                self._order = SeededRng(self.config.seed, 7, self._epoch).permutation(len(self._pairs))
                self._cursor = 0
            take = min(self.config.batch_size - len(out), len(self._order) - self._cursor)
            out.extend(self._pairs[i] for i in self._order[self._cursor:self._cursor + take])
            self._cursor += take
        return out

    def step(self) -> StepMetrics:
        rng = SeededRng(self.config.seed, 11, self.step_index)
        stage = T_CLS if self.model.config.vision_only else task_switch(self.weights.rho, rng)
        batch = self.builder.build(self._next_pairs(), stage, rng)
        metrics = training_step(batch, self.model, self.weights, self.optimizer,
                                self.ds.matrix, self.ds.split, self.step_index,
                                self.config.acl_detach_refs)
        self.step_index += 1
        return metrics

    def run(self, steps: int | None = None,
            callback: Callable[[StepMetrics], None] | None = None) -> Iterator[StepMetrics]:
        steps = self.config.steps if steps is None else steps
        for _ in range(steps):
            m = self.step()
            if callback is not None:
                callback(m)
            yield m
