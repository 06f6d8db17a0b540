"""Command-line entry points: gen-data, stats, train, eval, ground.

Exit codes: 0 success, 2 malformed configuration or arguments, 3 training
divergence (two consecutive non-finite losses; the last good checkpoint is kept).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .attrspace import ClassAttributeMatrix, Split, co_occurrence, distance_matrix, freq
from .fst import Vocabulary
from .losses import LossWeights
from .model import DuetModel, ModelConfig
from .sampling import SeededRng
from .synth import GeneratorConfig, dataset_hash, generate, read_dataset, write_dataset
from .training import TrainConfig, Trainer, model_config_for
from . import zeroshot as Z

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
CHECKPOINT_FORMAT = "duet-checkpoint/1"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {
    "vocab_size", "n_attributes", "image_size", "patch_size", "channels"}
_LOSS_KEYS = {f.name for f in dataclasses.fields(LossWeights)} | {
    "r_rap", "gamma", "gamma_grid", "tune_gamma"}
_OPT_KEYS = {"lr", "betas", "weight_decay"}
_TRAIN_KEYS = {"batch_size", "steps", "epochs", "checkpoint_every", "target_sampling",
               "rap_fixed_size", "n_pos_classes", "n_neg_classes", "images_per_class",
               "acl_detach_refs"}
_SECTIONS = {"generator": {f.name for f in dataclasses.fields(GeneratorConfig)},
             "model": _MODEL_KEYS, "loss": _LOSS_KEYS, "optimizer": _OPT_KEYS,
             "train": _TRAIN_KEYS}
_TOP_KEYS = set(_SECTIONS) | {"dataset", "seed", "out"}


@dataclass
class RunConfig:
    dataset: str | None = None
    generator: dict[str, Any] = field(default_factory=dict)
    model: dict[str, Any] = field(default_factory=dict)
    loss: dict[str, Any] = field(default_factory=dict)
    optimizer: dict[str, Any] = field(default_factory=dict)
    train: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    out: str | None = None

    @property
    def gamma(self) -> float:
        return float(self.loss.get("gamma", 0.8))

    @property
    def gamma_grid(self) -> tuple[float, ...]:
        return tuple(float(g) for g in self.loss.get("gamma_grid", Z.DEFAULT_GAMMA_GRID))

    def loss_weights(self) -> LossWeights:
        return LossWeights(**{k: float(v) for k, v in self.loss.items()
                              if k in {f.name for f in dataclasses.fields(LossWeights)}})

    def train_config(self, n_train_images: int | None = None) -> TrainConfig:
        t, o = self.train, self.optimizer
        steps = int(t.get("steps", 1500))
        if "epochs" in t:
            if n_train_images is None:
                raise ConfigError("epochs need the dataset size")
            per_epoch = math.ceil(n_train_images / int(t.get("batch_size", 32)))
            steps = int(t["epochs"]) * per_epoch
        betas = o.get("betas", (0.9, 0.999))
        return TrainConfig(
            steps=steps, batch_size=int(t.get("batch_size", 32)), lr=float(o.get("lr", 3e-4)),
            beta1=float(betas[0]), beta2=float(betas[1]),
            weight_decay=float(o.get("weight_decay", 0.01)),
            r_rap=float(self.loss.get("r_rap", 0.5)),
            rap_fixed_size=bool(t.get("rap_fixed_size", False)),
            target_sampling=str(t.get("target_sampling", "lwrs")),
            n_pos_classes=int(t.get("n_pos_classes", 1)),
            n_neg_classes=int(t.get("n_neg_classes", 2)),
            images_per_class=int(t.get("images_per_class", 1)),
            acl_detach_refs=bool(t.get("acl_detach_refs", False)), seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _where(source: str, node: yaml.Node) -> str:
    m = node.start_mark
    return f"{source}:{m.line + 1}:{m.column + 1}"


def parse_config(text: str, source: str = "<config>", require_dataset: bool = False) -> RunConfig:
    """Parse a YAML run config, rejecting unknown keys with a line-precise message."""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ConfigError(f"{where}: {getattr(e, 'problem', None) or e}") from None
    if root is None:
        return RunConfig()
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(f"{_where(source, root)}: top level must be a mapping")
    loader = yaml.SafeLoader("")
    cfg = RunConfig()
    for knode, vnode in root.value:
        key = knode.value
        if key not in _TOP_KEYS:
            raise ConfigError(f"{_where(source, knode)}: unknown key {key!r}")
        value = loader.construct_object(vnode, deep=True)
        if key in _SECTIONS:
            if not isinstance(vnode, yaml.MappingNode):
                raise ConfigError(f"{_where(source, vnode)}: {key!r} must be a mapping")
            for sk, sv in vnode.value:
                if sk.value not in _SECTIONS[key]:
                    raise ConfigError(f"{_where(source, sk)}: unknown key {key}.{sk.value}")
                _check_value(key, sk.value, loader.construct_object(sv, deep=True),
                             _where(source, sv))
            setattr(cfg, key, dict(value))
        elif key == "seed":
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError(f"{_where(source, vnode)}: seed must be a nonnegative integer")
            cfg.seed = value
        else:
            if not isinstance(value, str):
                raise ConfigError(f"{_where(source, vnode)}: {key!r} must be a path string")
            setattr(cfg, key, value)
            if key == "dataset" and require_dataset and not Path(value).is_dir():
                raise ConfigError(f"{_where(source, vnode)}: dataset {value!r} does not exist")
    if require_dataset and cfg.dataset is None:
        raise ConfigError(f"{source}: 'dataset' is required")
    return cfg


def _check_value(section: str, key: str, value: Any, where: str) -> None:
    if key == "betas":
        ok = isinstance(value, list) and len(value) == 2 and all(_is_number(b) for b in value)
    elif key == "gamma_grid":
        ok = isinstance(value, list) and all(_is_number(g) for g in value)
    elif key in ("target_sampling",):
        ok = value in ("lwrs", "uniform")
    elif key in ("cross_full_patches", "vision_only", "rap_fixed_size", "acl_detach_refs",
                 "tune_gamma"):
        ok = isinstance(value, bool)
    else:
        ok = _is_number(value)
    if not ok:
        raise ConfigError(f"{where}: bad value for {section}.{key}: {value!r}")


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def load_config(path: str | Path, require_dataset: bool = False) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{p}: config file not found")
    return parse_config(p.read_text(encoding="utf-8"), str(p), require_dataset)


# ---------------------------------------------------------------------------
# checkpoints and metrics
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: DuetModel, step: int, seed: int,
                    extra: dict | None = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = [], [], 0
    for name, arr in sorted(model.state_dict().items()):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": CHECKPOINT_FORMAT, "model": dataclasses.asdict(model.config),
                "step": step, "seed": seed, "tensors": index, **(extra or {})}
    tmp = root / "tensors.bin.tmp"
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(root / "tensors.bin")
    (root / "manifest.json").write_text(dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[DuetModel, dict]:
    root = Path(path)
    if not (root / "manifest.json").is_file():
        raise ConfigError(f"{root}: not a checkpoint directory")
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{root}: unsupported checkpoint format")
    blob = (root / "tensors.bin").read_bytes()
    state = {}
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        state[t["name"]] = np.frombuffer(blob, dtype="<f4", count=n,
                                         offset=t["offset"]).reshape(t["shape"])
    model = DuetModel(ModelConfig(**manifest["model"]), seed=manifest["seed"])
    model.load_state_dict(state)
    return model, manifest


def _clean(obj):
    # JSON has no NaN/inf; emit null so every line stays valid
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def dumps(obj, indent: int | None = None) -> str:
    return json.dumps(_clean(obj), indent=indent, sort_keys=True, allow_nan=False)


def write_json(path: str | Path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps(obj, indent=2) + "\n", encoding="utf-8")


@contextmanager
def thread_cap():
    """Honour DUET_THREADS by capping BLAS worker pools."""
    n = os.environ.get("DUET_THREADS")
    if not n:
        yield
        return
    try:
        limit = int(n)
    except ValueError:
        raise ConfigError(f"DUET_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=max(1, limit)):
        yield


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out: str) -> Path:
    gen = dict(cfg.generator)
    gen.setdefault("seed", cfg.seed)
    ds = generate(GeneratorConfig(**gen))
    write_dataset(ds, out)
    return Path(out)


def stats_report(matrix: ClassAttributeMatrix, space=None, classes=None) -> dict:
    classes = list(range(matrix.n_classes)) if classes is None else list(classes)
    n_attr = matrix.n_attributes
    names = [a.text for a in space.attributes] if space is not None else [str(a) for a in range(n_attr)]
    # co[i][j] is R(a_i <- a_j); the diagonal is undefined and left null
    co = [[None if i == j else _sentinel(co_occurrence(i, j, matrix, classes))
           for j in range(n_attr)] for i in range(n_attr)]
    dist = distance_matrix(matrix)
    return {"n_classes": matrix.n_classes, "attributes": names,
            "freq": {names[a]: freq(a, matrix, classes) for a in range(n_attr)},
            "co_occurrence": co, "distance": dist.tolist()}


def _sentinel(x: float):
    if math.isinf(x):
        return "always-co-occurring"
    if math.isnan(x):
        return "undefined"
    return x


def cmd_stats(dataset: str, out: str | None) -> dict:
    ds = read_dataset(dataset)
    report = stats_report(ds.matrix, ds.space, ds.split.seen)
    report["split"] = {"seen": list(ds.split.seen), "unseen": list(ds.split.unseen)}
    if out:
        write_json(out, report)
    return report


class Diverged(RuntimeError):
    pass


def _build_model(ds, vocab, cfg: RunConfig, seed: int) -> DuetModel:
    return DuetModel(model_config_for(ds, vocab, **cfg.model), seed=seed)


def calibrate_gamma(ds, cfg: RunConfig, seed: int) -> float:
    """Tune gamma on a seen-class validation split with an auxiliary training run.

    A quarter of the seen classes play the unseen role and a fifth of each
    remaining seen class's training images are held out; the auxiliary model
    never trains on either.
    """
    sub = Z.validation_split(ds.split, SeededRng(seed, 13))
    holdout = max(1, ds.config.n_train_images // 5)
    view = dataclasses.replace(ds, split=Split(sub.seen, tuple(ds.split.unseen) + sub.unseen),
                               holdout=holdout)
    vocab = Vocabulary.from_space(ds.space)
    model = _build_model(view, vocab, cfg, seed)
    tc = cfg.train_config(len(view.train_pairs()))
    for _ in Trainer(view, model, tc, cfg.loss_weights(), vocab).run():
        pass
    pairs = [(c, i) for c in sub.seen + sub.unseen for i in view.validation_indices(c)]
    template = Z.prompt_template(ds.space, vocab)
    scores = Z.compatibility(Z.image_attribute_vectors(model, view.batch(pairs), template), ds.matrix)
    labels = np.array([c for c, _ in pairs])
    return Z.tune_gamma(scores, labels, sub, cfg.gamma_grid)


def cmd_train(cfg: RunConfig, out: str, seed: int, log=print) -> Path:
    run = Path(out)
    run.mkdir(parents=True, exist_ok=True)
    ds = read_dataset(cfg.dataset)
    vocab = Vocabulary.from_space(ds.space)
    try:
        model = _build_model(ds, vocab, cfg, seed)
        tc = dataclasses.replace(cfg.train_config(len(ds.train_pairs())), seed=seed)
        weights = cfg.loss_weights()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    every = int(cfg.train.get("checkpoint_every", 250))
    extra = {"dataset": str(Path(cfg.dataset).resolve()), "dataset_hash": dataset_hash(cfg.dataset),
             "gamma": cfg.gamma}
    (run / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
    write_json(run / "run.json", {"seed": seed, "dataset": extra["dataset"],
                                  "dataset_hash": extra["dataset_hash"],
                                  "train": tc.to_dict(), "model": dataclasses.asdict(model.config)})
    trainer = Trainer(ds, model, tc, weights, vocab)
    bad = 0
    with open(run / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for m in trainer.run():
            fh.write(dumps(m.to_record()) + "\n")
            if m.aborted:
                bad += 1
                if bad >= 2:
                    fh.flush()
                    # parameters were left untouched by the aborted steps
                    save_checkpoint(run / "checkpoint", model, trainer.step_index - bad, seed, extra)
                    raise Diverged(f"non-finite loss at steps {m.step - 1} and {m.step}")
                continue
            bad = 0
            if every > 0 and trainer.step_index % every == 0:
                save_checkpoint(run / "checkpoint", model, trainer.step_index, seed, extra)
    if cfg.loss.get("tune_gamma", False):
        extra["gamma"] = calibrate_gamma(ds, cfg, seed)
        log(f"tuned gamma = {extra['gamma']}")
    save_checkpoint(run / "checkpoint", model, trainer.step_index, seed, extra)
    return run / "checkpoint"


def cmd_eval(checkpoint: str, mode: str, gamma: float | None, out: str | None) -> Z.EvalReport:
    model, manifest = load_checkpoint(checkpoint)
    ds = read_dataset(manifest["dataset"])
    if dataset_hash(manifest["dataset"]) != manifest["dataset_hash"]:
        raise ConfigError(f"{manifest['dataset']}: dataset changed since training")
    g = manifest.get("gamma", 0.8) if gamma is None else gamma
    report = Z.evaluate(ds, model, mode, g)
    if out:
        write_json(out, report.to_dict())
    return report


def parse_image_ref(ref: str) -> tuple[int, int]:
    try:
        c, i = ref.split(":")
        return int(c), int(i)
    except ValueError:
        raise ConfigError(f"image reference must look like CLASS:INDEX, got {ref!r}") from None


def cmd_ground(checkpoint: str, image: str, k: int, out: str | None) -> Z.GroundingReport:
    model, manifest = load_checkpoint(checkpoint)
    ds = read_dataset(manifest["dataset"])
    c, i = parse_image_ref(image)
    if not (0 <= c < ds.matrix.n_classes and 0 <= i < ds.config.images_per_class):
        raise ConfigError(f"image {image} does not exist in the dataset")
    vocab = Vocabulary.from_space(ds.space)
    report = Z.ground_attributes(ds.image(c, i), model, ds.space, vocab, k)
    if out:
        write_json(out, {"image": image, **report.to_dict()})
    return report


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _u64(s: str) -> int:
    v = int(s)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="duet", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic patch-world dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=_u64)
    p.add_argument("--out")

    p = sub.add_parser("stats", help="attribute frequency, co-occurrence and class distances")
    p.add_argument("dataset")
    p.add_argument("--out")

    p = sub.add_parser("train", help="train a model and write metrics plus checkpoints")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=_u64)
    p.add_argument("--out")

    p = sub.add_parser("eval", help="zero-shot evaluation of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--mode", choices=(Z.CZSL, Z.GZSL), default=Z.GZSL)
    p.add_argument("--gamma", type=float)
    p.add_argument("--out")

    p = sub.add_parser("ground", help="top-k attributes per prompt for one image")
    p.add_argument("checkpoint")
    p.add_argument("--image", required=True, help="CLASS:INDEX")
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--out")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with thread_cap():
            return _dispatch(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Diverged as e:
        print(f"error: training diverged ({e}); last good checkpoint kept", file=sys.stderr)
        return EXIT_DIVERGED


def _dispatch(args) -> int:
    if args.command == "gen-data":
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.generator.pop("seed", None)
        out = args.out or cfg.out or cfg.dataset
        if not out:
            raise ConfigError("gen-data needs --out (or 'out' in the config)")
        try:
            print(cmd_gen_data(cfg, out))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
    elif args.command == "stats":
        report = cmd_stats(args.dataset, args.out)
        if not args.out:
            print(dumps(report, indent=2))
    elif args.command == "train":
        cfg = load_config(args.config, require_dataset=True)
        seed = cfg.seed if args.seed is None else args.seed
        out = args.out or cfg.out
        if not out:
            raise ConfigError("train needs --out (or 'out' in the config)")
        print(cmd_train(cfg, out, seed))
    elif args.command == "eval":
        report = cmd_eval(args.checkpoint, args.mode, args.gamma, args.out)
        if not args.out:
            print(dumps(report.to_dict(), indent=2))
    elif args.command == "ground":
        if args.top_k < 1:
            raise ConfigError("--top-k must be at least 1")
        report = cmd_ground(args.checkpoint, args.image, args.top_k, args.out)
        if not args.out:
            print(dumps(report.to_dict(), indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
