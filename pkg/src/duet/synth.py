"""Synthetic "patch-world" benchmark.

Every prompt set owns a rectangular block of the image. A class holds exactly
one attribute per prompt, and that attribute paints a fixed random +/- pattern
into the prompt's block; images add Gaussian pixel noise. Attribute choice per
prompt follows a Zipf-like skew (imbalance), and paired prompts can copy each
other's choice (co-occurrence).
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attrspace import (AttributeSpace, ClassAttributeMatrix, Split, read_matrix,
                        write_matrix)
from .sampling import SeededRng

_LEXICON = [
    ("color", ["red", "green", "blue", "yellow", "black", "white", "brown", "gray"]),
    ("pattern", ["spotted", "striped", "solid", "dotted", "checkered", "mottled", "banded", "plain"]),
    ("texture", ["still water", "dry sand", "soft fur", "rough bark",
                 "smooth stone", "thick moss", "fine silk", "wet clay"]),
    ("shape", ["round", "square", "long", "flat", "curved", "pointed", "hollow", "thin"]),
    ("has part", ["tail", "wings", "horns", "fins", "claws", "beak", "mane", "shell"]),
    ("habitat", ["forest floor", "open sea", "high cliff", "river bank",
                 "dark cave", "tall grass", "sand dune", "ice sheet"]),
]


class GenerationError(RuntimeError):
    pass


class CorruptionError(IOError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n_classes: int = 20
    n_prompts: int = 4
    attributes_per_prompt: int = 4
    images_per_class: int = 40
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    noise: float = 0.1
    contrast: float = 0.1
    skew: float = 0.5
    coupling: float = 0.0
    unseen_fraction: float = 0.2
    seen_test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image size must be divisible by patch size")
        grid = self.image_size // self.patch_size
        if self.n_prompts > grid * grid:
            raise ValueError("more prompts than patches to host them")
        if self.attributes_per_prompt < 2:
            raise ValueError("each prompt needs at least two attributes")
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError("coupling must be in [0, 1]")

    @property
    def n_attributes(self) -> int:
        return self.n_prompts * self.attributes_per_prompt

    @property
    def n_unseen(self) -> int:
        return max(1, int(round(self.unseen_fraction * self.n_classes)))

    @property
    def n_train_images(self) -> int:
        return self.images_per_class - int(round(self.seen_test_fraction * self.images_per_class))


def build_space(config: GeneratorConfig) -> AttributeSpace:
    groups = []
    for p in range(config.n_prompts):
        if p < len(_LEXICON) and config.attributes_per_prompt <= len(_LEXICON[p][1]):
            name, words = _LEXICON[p]
            groups.append((name, words[:config.attributes_per_prompt]))
        else:
            groups.append((f"aspect{p}", [f"trait{p}x{k}" for k in range(config.attributes_per_prompt)]))
    return AttributeSpace.from_groups(groups)


def zipf_weights(n: int, skew: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** skew
    return w / w.sum()


def _draw_class(config: GeneratorConfig, rng: SeededRng) -> tuple[int, ...]:
    k = config.attributes_per_prompt
    w = zipf_weights(k, config.skew)
    choice = [rng.categorical(w) for _ in range(config.n_prompts)]
    # prompts (0,1), (2,3), ... are coupled: the second copies the first
    for p in range(0, config.n_prompts - 1, 2):
        if rng.random() < config.coupling:
            choice[p + 1] = choice[p]
    return tuple(choice)


def _split_ok(vectors: list[tuple[int, ...]], unseen: list[int]) -> bool:
    seen = [i for i in range(len(vectors)) if i not in unseen]
    n_prompts = len(vectors[0])
    seen_pairs = {(p, q, vectors[s][p], vectors[s][q])
                  for s in seen for p, q in itertools.combinations(range(n_prompts), 2)}
    seen_attrs = {(p, vectors[s][p]) for s in seen for p in range(n_prompts)}
    for u in unseen:
        v = vectors[u]
        attrs = {(p, v[p]) for p in range(n_prompts)}
        if not attrs <= seen_attrs:
            return False
        if all((p, q, v[p], v[q]) in seen_pairs
               for p, q in itertools.combinations(range(n_prompts), 2)):
            return False
    return True


def gen_classes(config: GeneratorConfig, max_tries: int = 2000
                ) -> tuple[AttributeSpace, ClassAttributeMatrix, Split]:
    space = build_space(config)
    rng = SeededRng(config.seed, 1)
    k = config.attributes_per_prompt
    if config.n_classes > k ** config.n_prompts:
        raise GenerationError(f"{config.n_classes} distinct classes requested but only "
                              f"{k ** config.n_prompts} attribute combinations exist")
    for attempt in range(max_tries):
        vectors: list[tuple[int, ...]] = []
        draws = 0
        while len(vectors) < config.n_classes and draws < 200 * config.n_classes:
            v = _draw_class(config, rng)
            draws += 1
            if v not in vectors:
                vectors.append(v)
        if len(vectors) < config.n_classes:
            continue
        for _ in range(50):
            unseen = sorted(int(i) for i in rng.permutation(config.n_classes)[:config.n_unseen])
            if _split_ok(vectors, unseen):
                break
        else:
            continue
        values = np.zeros((config.n_classes, config.n_attributes))
        for c, v in enumerate(vectors):
            for p, idx in enumerate(v):
                values[c, p * k + idx] = 1.0
        names = tuple(f"class{c:03d}" for c in range(config.n_classes))
        matrix = ClassAttributeMatrix(names, values, threshold=0.0)
        seen = [c for c in range(config.n_classes) if c not in unseen]
        return space, matrix, Split(tuple(seen), tuple(unseen))
    raise GenerationError(
        f"could not satisfy the split constraints in {max_tries} attempts "
        f"(n_classes={config.n_classes}, skew={config.skew}, coupling={config.coupling}); "
        "lower skew/coupling or raise n_classes")


def regions(config: GeneratorConfig) -> list[tuple[slice, slice]]:
    """Pixel rectangle owned by each prompt."""
    grid = config.image_size // config.patch_size
    rows = math.ceil(math.sqrt(config.n_prompts))
    cols = math.ceil(config.n_prompts / rows)
    row_bands = np.array_split(np.arange(grid), rows)
    col_bands = np.array_split(np.arange(grid), cols)
    out = []
    ps = config.patch_size
    for p in range(config.n_prompts):
        rb, cb = row_bands[p // cols], col_bands[p % cols]
        out.append((slice(rb[0] * ps, (rb[-1] + 1) * ps), slice(cb[0] * ps, (cb[-1] + 1) * ps)))
    return out


def base_patterns(config: GeneratorConfig) -> list[np.ndarray]:
    """Fixed +/-1 pattern per attribute over its prompt's region."""
    regs = regions(config)
    out = []
    for a in range(config.n_attributes):
        rs, cs = regs[a // config.attributes_per_prompt]
        shape = (rs.stop - rs.start, cs.stop - cs.start, config.channels)
        rng = SeededRng(config.seed, 2, a)
        out.append(np.sign(rng.normal(shape) + 1e-12))
    return out


@dataclass
class PatchWorldDataset:
    config: GeneratorConfig
    space: AttributeSpace
    matrix: ClassAttributeMatrix
    split: Split
    images: np.ndarray = field(repr=False)      # (classes, images, H, W, C) float32
    holdout: int = 0                            # trailing train images per seen class kept for validation

    def image(self, c: int, i: int) -> np.ndarray:
        return self.images[c, i]

    def train_indices(self, c: int) -> range:
        if c in self.split.unseen:
            return range(0)
        return range(self.config.n_train_images - self.holdout)

    def validation_indices(self, c: int) -> range:
        """Images never used for training or testing; unseen classes use their train block."""
        if c in self.split.unseen:
            return range(self.config.n_train_images)
        return range(self.config.n_train_images - self.holdout, self.config.n_train_images)

    def test_indices(self, c: int) -> range:
        if c in self.split.unseen:
            return range(self.config.images_per_class)
        return range(self.config.n_train_images, self.config.images_per_class)

    def train_pairs(self) -> list[tuple[int, int]]:
        return [(c, i) for c in self.split.seen for i in self.train_indices(c)]

    def test_pairs(self, classes=None) -> list[tuple[int, int]]:
        classes = range(self.matrix.n_classes) if classes is None else classes
        return [(c, i) for c in classes for i in self.test_indices(c)]

    def batch(self, pairs) -> np.ndarray:
        cs = np.array([c for c, _ in pairs], dtype=np.int64)
        ii = np.array([i for _, i in pairs], dtype=np.int64)
        return self.images[cs, ii].astype(np.float64)


def render_image(c: int, index: int, matrix: ClassAttributeMatrix, config: GeneratorConfig,
                 patterns: list[np.ndarray] | None = None) -> np.ndarray:
    patterns = base_patterns(config) if patterns is None else patterns
    img = np.full((config.image_size, config.image_size, config.channels), 0.5)
    held = np.flatnonzero(matrix.values[c] > matrix.threshold)
    regs = regions(config)
    for a in held:
        rs, cs = regs[a // config.attributes_per_prompt]
        img[rs, cs] += config.contrast * patterns[a]
    if config.noise > 0:
        img += config.noise * SeededRng(config.seed, 3, c, index).normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate(config: GeneratorConfig) -> PatchWorldDataset:
    space, matrix, split = gen_classes(config)
    patterns = base_patterns(config)
    imgs = np.stack([np.stack([render_image(c, i, matrix, config, patterns)
                               for i in range(config.images_per_class)])
                     for c in range(config.n_classes)])
    return PatchWorldDataset(config, space, matrix, split, imgs)


def noise_images(n: int, config: GeneratorConfig, seed: int) -> np.ndarray:
    """Pure-noise images with the dataset's pixel statistics but no attribute content."""
    rng = SeededRng(seed, 4)
    x = rng.normal((n, config.image_size, config.image_size, config.channels))
    return np.clip(0.5 + (config.contrast + config.noise) * x, 0.0, 1.0)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_dataset(ds: PatchWorldDataset, path: str | Path) -> None:
    if not str(path):
        raise IOError("empty dataset path")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    write_matrix(root / "space.txt", ds.space, ds.matrix)
    (root / "split.txt").write_text(" ".join(map(str, ds.split.seen)) + "\n"
                                    + " ".join(map(str, ds.split.unseen)) + "\n", encoding="utf-8")
    blob = np.ascontiguousarray(ds.images, dtype="<f4").tobytes()
    (root / "images.bin").write_bytes(blob)
    manifest = {
        "format": "duet-patchworld/1",
        "dtype": "float32",
        "byte_order": "little",
        "layout": "row-major",
        "shape": list(ds.images.shape),
        "n_classes": ds.matrix.n_classes,
        "sha256": _sha256(blob),
        "generator": asdict(ds.config),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")


def read_dataset(path: str | Path) -> PatchWorldDataset:
    if not str(path):
        raise IOError("empty dataset path")
    root = Path(path)
    if not root.is_dir():
        raise IOError(f"dataset directory {root} does not exist")
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    space, matrix = read_matrix(root / "space.txt")
    lines = (root / "split.txt").read_text(encoding="utf-8").splitlines()
    if len(lines) < 2:
        raise CorruptionError("split.txt needs two lines (seen, unseen)")
    split = Split(tuple(int(x) for x in lines[0].split()), tuple(int(x) for x in lines[1].split()))
    blob = (root / "images.bin").read_bytes()
    if _sha256(blob) != manifest["sha256"]:
        raise CorruptionError(f"{root / 'images.bin'}: checksum mismatch")
    if manifest["n_classes"] != matrix.n_classes or manifest["shape"][0] != matrix.n_classes:
        raise CorruptionError("manifest class count does not match the attribute matrix")
    images = np.frombuffer(blob, dtype="<f4").reshape(manifest["shape"]).astype(np.float32)
    config = GeneratorConfig(**manifest["generator"])
    return PatchWorldDataset(config, space, matrix, split, images)


def dataset_hash(path: str | Path) -> str:
    root = Path(path)
    h = hashlib.sha256()
    for name in ("space.txt", "split.txt", "images.bin", "manifest.json"):
        h.update(name.encode())
        h.update((root / name).read_bytes())
    return h.hexdigest()
