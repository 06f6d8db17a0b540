"""The DUET network built on :mod:`duet.tensor`.

Two post-LN transformer towers (vision over image patches with a learnable
[CLS] token, language over FST token sequences) feed ``K`` cross layers. Each
cross layer runs bi-directional cross-attention, then per-modality
self-attention, then per-modality feed-forward, with residual + layer norm
after every block. By default only the vision [CLS] state enters the cross
layers while the whole language sequence does.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .fst import TokenSequence, VocabularyError
from .sampling import SeededRng
from .tensor import Tensor

MASK_NEG = -1e9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_attributes: int
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    d: int = 64
    heads: int = 4
    vision_layers: int = 2
    language_layers: int = 2
    cross_layers: int = 1
    ff_dim: int = 128
    proj_dim: int = 32
    max_len: int = 64
    cross_full_patches: bool = False
    vision_only: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image size must be divisible by patch size")
        if self.d % self.heads:
            raise ConfigError("hidden dim must be divisible by the number of heads")
        if self.cross_layers < 1 and not self.vision_only:
            raise ConfigError("at least one cross layer is required")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


def trunc_normal(rng: SeededRng, shape, std: float = 0.02) -> np.ndarray:
    x = rng.normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: SeededRng, bias: bool = True):
        self.weight = _param(trunc_normal(rng, (d_in, d_out)))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = _param(np.ones(d))
        self.bias = _param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    """Scaled dot-product attention; queries and keys/values may come from different inputs."""

    def __init__(self, d: int, heads: int, rng: SeededRng):
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.last_weights: np.ndarray | None = None

    def __call__(self, x_q: Tensor, x_kv: Tensor, kv_mask: np.ndarray | None = None) -> Tensor:
        B, nq, d = x_q.shape
        nk = x_kv.shape[1]
        h, dk = self.heads, d // self.heads
        q = self.q(x_q).reshape(B, nq, h, dk).transpose(0, 2, 1, 3)
        k = self.k(x_kv).reshape(B, nk, h, dk).transpose(0, 2, 1, 3)
        v = self.v(x_kv).reshape(B, nk, h, dk).transpose(0, 2, 1, 3)
        scores = (q @ T.swap_last(k)) * (1.0 / math.sqrt(dk))
        if kv_mask is not None:
            scores = scores + np.where(kv_mask, 0.0, MASK_NEG)[:, None, None, :]
        attn = T.softmax(scores, axis=-1)
        self.last_weights = attn.data
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, nq, d)
        return self.o(out)


class FeedForward(Module):
    def __init__(self, d: int, ff: int, rng: SeededRng):
        self.fc1 = Linear(d, ff, rng)
        self.fc2 = Linear(ff, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class EncoderBlock(Module):
    def __init__(self, d: int, heads: int, ff: int, rng: SeededRng):
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln1 = LayerNorm(d)
        self.ff = FeedForward(d, ff, rng)
        self.ln2 = LayerNorm(d)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = self.ln1(x + self.attn(x, x, mask))
        return self.ln2(x + self.ff(x))


class CrossLayer(Module):
    def __init__(self, d: int, heads: int, ff: int, rng: SeededRng):
        self.cross_v = MultiHeadAttention(d, heads, rng)
        self.cross_l = MultiHeadAttention(d, heads, rng)
        self.ln_cv = LayerNorm(d)
        self.ln_cl = LayerNorm(d)
        self.self_v = MultiHeadAttention(d, heads, rng)
        self.self_l = MultiHeadAttention(d, heads, rng)
        self.ln_sv = LayerNorm(d)
        self.ln_sl = LayerNorm(d)
        self.ff_v = FeedForward(d, ff, rng)
        self.ff_l = FeedForward(d, ff, rng)
        self.ln_fv = LayerNorm(d)
        self.ln_fl = LayerNorm(d)

    def __call__(self, v: Tensor, l: Tensor, l_mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
        v1 = self.ln_cv(v + self.cross_v(v, l, l_mask))
        l1 = self.ln_cl(l + self.cross_l(l, v))
        v2 = self.ln_sv(v1 + self.self_v(v1, v1))
        l2 = self.ln_sl(l1 + self.self_l(l1, l1, l_mask))
        return self.ln_fv(v2 + self.ff_v(v2)), self.ln_fl(l2 + self.ff_l(l2))


@dataclass
class DuetOutput:
    vision: Tensor            # fused vision states (B, Nv, d)
    language: Tensor | None   # fused language states (B, L, d)
    cls: Tensor               # fused vision [CLS] state (B, d)
    v_tilde: Tensor           # attribute-space image representation (B, |A|)
    mask: np.ndarray | None   # language validity mask (B, L)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, num_patches, patch*patch*C) in row-major patch order."""
    B, H, W, C = images.shape
    x = images.reshape(B, H // patch, patch, W // patch, patch, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, (H // patch) * (W // patch), patch * patch * C)


def pad_sequences(seqs: Sequence[TokenSequence], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs)
    ids = np.full((len(seqs), L), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s.ids
        mask[i, :len(s)] = True
    return ids, mask


class DuetModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = SeededRng(seed, 0xD0E7)
        c = config
        self.patch_embed = Linear(c.patch_dim, c.d, rng)
        self.v_cls = _param(trunc_normal(rng, (1, 1, c.d)))
        self.v_pos = _param(trunc_normal(rng, (1 + c.n_patches, c.d)))
        self.vision_blocks = [EncoderBlock(c.d, c.heads, c.ff_dim, rng) for _ in range(c.vision_layers)]
        self.attr_map = Linear(c.d, c.n_attributes, rng)
        self.head_fc1 = Linear(c.d, c.d, rng)
        self.head_fc2 = Linear(c.d, c.proj_dim, rng)
        if not c.vision_only:
            self.tok_embed = _param(trunc_normal(rng, (c.vocab_size, c.d)))
            self.l_pos = _param(trunc_normal(rng, (c.max_len, c.d)))
            self.language_blocks = [EncoderBlock(c.d, c.heads, c.ff_dim, rng)
                                    for _ in range(c.language_layers)]
            self.cross = [CrossLayer(c.d, c.heads, c.ff_dim, rng) for _ in range(c.cross_layers)]

    # -- towers ------------------------------------------------------------
    def encode_image(self, images: np.ndarray) -> Tensor:
        c = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (c.image_size, c.image_size, c.channels):
            raise ValueError(f"expected images of shape (B, {c.image_size}, {c.image_size}, "
                             f"{c.channels}), got {images.shape}")
        B = images.shape[0]
        x = self.patch_embed(Tensor(patchify(images, c.patch_size)))
        cls = T.broadcast_to(self.v_cls, (B, 1, c.d))
        x = T.concat([cls, x], axis=1) + self.v_pos
        for blk in self.vision_blocks:
            x = blk(x)
        return x

    def encode_text(self, ids: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        c = self.config
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
            raise VocabularyError("token id outside the vocabulary")
        if ids.shape[1] > c.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {c.max_len}")
        L = ids.shape[1]
        x = T.embedding(self.tok_embed, ids) + self.l_pos[:L]
        for blk in self.language_blocks:
            x = blk(x, mask)
        return x

    def cross_layer(self, v: Tensor, l: Tensor, l_mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
        if v.shape[-1] != l.shape[-1]:
            raise ConfigError("vision and language hidden sizes differ")
        for layer in self.cross:
            v, l = layer(v, l, l_mask)
        return v, l

    # -- heads ---------------------------------------------------------------
    def image_to_attribute_vec(self, cls_state: Tensor) -> Tensor:
        return self.attr_map(cls_state)

    def token_logits(self, states: Tensor) -> Tensor:
        return states @ T.swap_last(self.tok_embed)

    def project_head(self, x: Tensor) -> Tensor:
        return self.head_fc2(T.gelu(self.head_fc1(x)))

    # -- full pass -------------------------------------------------------------
    def forward(self, images: np.ndarray, seqs: Sequence[TokenSequence] | None = None) -> DuetOutput:
        vis = self.encode_image(images)
        B = vis.shape[0]
        if self.config.vision_only:
            cls = vis[:, 0]
            return DuetOutput(vis, None, cls, self.image_to_attribute_vec(cls), None)
        if seqs is None or len(seqs) != B:
            raise ValueError("one token sequence per image is required")
        if all(s.ids == seqs[0].ids for s in seqs[1:]):
            # shared template: encode once and broadcast across the batch
            ids, mask = pad_sequences(seqs[:1])
            lang = T.broadcast_to(self.encode_text(ids, mask), (B, ids.shape[1], self.config.d))
            mask = np.repeat(mask, B, axis=0)
        else:
            ids, mask = pad_sequences(seqs)
            lang = self.encode_text(ids, mask)
        v_in = vis if self.config.cross_full_patches else vis[:, :1]
        v_out, l_out = self.cross_layer(v_in, lang, mask)
        cls = v_out[:, 0]
        return DuetOutput(v_out, l_out, cls, self.image_to_attribute_vec(cls), mask)

    __call__ = forward

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
