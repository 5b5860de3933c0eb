"""Command-line driver: dataset generation, training, evaluation, registration.

Subcommands: gen-data, train, evaluate, register, search-hparams (alias for
register --mode search). Reports go to stdout as JSON; files land under
--out, with figures rendered beside the delimited outputs. Exit codes are
0 on success, 1 on runtime failure, 2 on usage or config errors. The
ATLAS_MATCH_SEED environment variable overrides any configured seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import figures
from .identify import (
    build_index,
    evaluate,
    make_siamese_ranker,
    train_identifier,
)
from .imagekit import GrayImage, load_pgm, save_pgm, warp_affine
from .metric import MiningMode
from .register import (
    PyramidConfig,
    make_mi_ranker,
    mutual_information,
    predict_affine,
    random_search,
    register_affine,
)
from .synthatlas import (
    SPLITS,
    AtlasSpec,
    AugRanges,
    DatasetManifest,
    build_dataset,
)
from .tensornet import default_embed_net, load_checkpoint, save_checkpoint


class ConfigError(ValueError):
    """Configuration file or flag combination is invalid."""


LOSSES = ("triplet", "contrastive")
INPUT_SIZES = (64, 128)
BATCH_SIZES = (16, 32)


@dataclass
class RunConfig:
    """Validated run configuration; flags override file values."""

    atlas_dir: str = ""
    manifest: str = ""
    out_dir: str = ""
    checkpoint: str | None = None

    input_size: int = 128
    embed_dim: int = 64
    loss: str = "triplet"
    mining: str = "semi_hard"
    margin: float | None = None
    batch_size: int = 16

    max_iterations: int = 10_000
    patience: int = 2_000
    learning_rate: float = 1e-4
    seed: int = 0
    val_every: int = 250

    reg_bins: int = 32
    reg_resolutions: int = 3
    reg_iterations: int = 1000
    reg_samples: int = 10_000
    reg_random_region: bool = False
    reg_pyramid: str = "recursive"
    reg_trials: int = 100

    mining_explicit: bool = field(default=False, repr=False)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        cfg = cls()
        paths = raw.get("paths", {})
        cfg.atlas_dir = paths.get("atlas_dir", cfg.atlas_dir)
        cfg.manifest = paths.get("manifest", cfg.manifest)
        cfg.out_dir = paths.get("out_dir", cfg.out_dir)
        cfg.checkpoint = paths.get("checkpoint", cfg.checkpoint)
        model = raw.get("model", {})
        cfg.input_size = model.get("input_size", cfg.input_size)
        cfg.embed_dim = model.get("embed_dim", cfg.embed_dim)
        cfg.loss = model.get("loss", cfg.loss)
        cfg.mining = model.get("mining", cfg.mining)
        cfg.mining_explicit = "mining" in model
        cfg.margin = model.get("margin", cfg.margin)
        cfg.batch_size = model.get("batch_size", cfg.batch_size)
        training = raw.get("training", {})
        cfg.max_iterations = training.get("max_iterations", cfg.max_iterations)
        cfg.patience = training.get("patience", cfg.patience)
        cfg.learning_rate = training.get("learning_rate", cfg.learning_rate)
        cfg.seed = training.get("seed", cfg.seed)
        cfg.val_every = training.get("val_every", cfg.val_every)
        reg = raw.get("registration", {})
        cfg.reg_bins = reg.get("bins", cfg.reg_bins)
        cfg.reg_resolutions = reg.get("num_resolutions", cfg.reg_resolutions)
        cfg.reg_iterations = reg.get("max_iterations", cfg.reg_iterations)
        cfg.reg_samples = reg.get("samples", cfg.reg_samples)
        cfg.reg_random_region = reg.get("random_sample_region", cfg.reg_random_region)
        cfg.reg_pyramid = reg.get("pyramid", cfg.reg_pyramid)
        cfg.reg_trials = reg.get("trials", cfg.reg_trials)
        return cfg

    def validate_for_training(self) -> None:
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        try:
            MiningMode(self.mining)
        except ValueError:
            raise ConfigError(f"unknown mining mode {self.mining!r}") from None
        if self.input_size not in INPUT_SIZES:
            raise ConfigError(f"input_size must be one of {INPUT_SIZES}")
        if self.batch_size not in BATCH_SIZES:
            raise ConfigError(f"batch_size must be one of {BATCH_SIZES}")
        if self.margin is not None and not self.margin > 0:
            raise ConfigError("margin must be > 0")
        for name in ("max_iterations", "patience", "val_every", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not self.manifest:
            raise ConfigError("paths.manifest is required")
        if not self.atlas_dir:
            raise ConfigError("paths.atlas_dir is required")

    def echo(self) -> dict:
        return {
            "paths": {"atlas_dir": self.atlas_dir, "manifest": self.manifest,
                      "out_dir": self.out_dir, "checkpoint": self.checkpoint},
            "model": {"input_size": self.input_size, "embed_dim": self.embed_dim,
                      "loss": self.loss, "mining": self.mining,
                      "margin": self.margin, "batch_size": self.batch_size},
            "training": {"max_iterations": self.max_iterations,
                         "patience": self.patience,
                         "learning_rate": self.learning_rate,
                         "seed": self.seed, "val_every": self.val_every},
            "registration": {"bins": self.reg_bins,
                             "num_resolutions": self.reg_resolutions,
                             "max_iterations": self.reg_iterations,
                             "samples": self.reg_samples,
                             "random_sample_region": self.reg_random_region,
                             "pyramid": self.reg_pyramid,
                             "trials": self.reg_trials},
        }


def _env_seed() -> int | None:
    value = os.environ.get("ATLAS_MATCH_SEED")
    if value is None:
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"ATLAS_MATCH_SEED must be an integer, got {value!r}") from None


def _load_atlas(atlas_dir) -> list[GrayImage]:
    paths = sorted(Path(atlas_dir).glob("plate_*.pgm"))
    if not paths:
        raise ConfigError(f"no plate_*.pgm files under {atlas_dir}")
    return [load_pgm(p) for p in paths]


def _load_split(manifest_path, split):
    manifest = DatasetManifest.read(manifest_path)
    root = Path(manifest_path).parent
    entries = manifest.split(split)
    images = [load_pgm(root / e.path) for e in entries]
    labels = [e.plate for e in entries]
    return entries, images, labels


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    counts_parts = args.counts.split(",")
    if len(counts_parts) != 4:
        raise ConfigError("--counts needs four comma-separated values "
                          "(train,val1,val2,test)")
    try:
        counts = {s: int(v) for s, v in zip(SPLITS, counts_parts)}
    except ValueError:
        raise ConfigError(f"--counts values must be integers, got {args.counts!r}") from None
    seed = _env_seed()
    seed = args.seed if seed is None else seed
    spec = AtlasSpec(num_plates=args.plates, image_size=args.size, seed=seed,
                     morph_rate=args.morph_rate)
    ranges = AugRanges(rotation_deg=args.rotation_max,
                       scale_min=args.scale_min, scale_max=args.scale_max,
                       translation=args.translation_max, crop_max=args.crop_max,
                       pepper_max=args.pepper_max, blend_max=args.blend_max)
    manifest = build_dataset(spec, counts, args.out, ranges=ranges, seed=seed)
    print(json.dumps({"out": str(args.out), "plates": args.plates,
                      "entries": len(manifest.entries),
                      "splits": {s: len(manifest.split(s)) for s in SPLITS
                                 if manifest.split(s)}}))
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for name in ("loss", "mining", "margin", "batch_size", "input_size",
                 "embed_dim", "max_iterations", "patience", "learning_rate",
                 "val_every", "seed", "manifest", "atlas_dir", "out_dir"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
            if name == "mining":
                cfg.mining_explicit = True
    env = _env_seed()
    if env is not None:
        cfg.seed = env
    cfg.validate_for_training()
    if cfg.loss == "contrastive" and cfg.mining_explicit:
        print("warning: mining applies to triplet loss only; ignoring", file=sys.stderr)
    if not cfg.out_dir:
        raise ConfigError("an output directory is required (paths.out_dir or --out-dir)")

    atlas = _load_atlas(cfg.atlas_dir)
    _, train_images, train_labels = _load_split(cfg.manifest, "train")
    _, val_images, val_labels = _load_split(cfg.manifest, "val1")
    if not train_images:
        raise ConfigError("manifest has no train entries")

    result = train_identifier(
        train_images, train_labels, val_images, val_labels, atlas,
        loss=cfg.loss, mining=MiningMode(cfg.mining), batch_size=cfg.batch_size,
        margin=cfg.margin, input_size=cfg.input_size, embed_dim=cfg.embed_dim,
        learning_rate=cfg.learning_rate, max_iterations=cfg.max_iterations,
        patience=cfg.patience, val_every=cfg.val_every, seed=cfg.seed)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck_path = out / "checkpoint.amck"
    save_checkpoint(ck_path, result.checkpoint.spec, result.checkpoint.params,
                    result.checkpoint.step, result.checkpoint.seed)
    csv_path = out / "train_metrics.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "val1_mae"])
        for row in result.history:
            writer.writerow([row.iteration,
                             "" if row.loss != row.loss else repr(row.loss),
                             "" if row.val_mae is None else repr(row.val_mae)])
    if not args.no_figures:
        figures.training_curves(result.history, out / "training_curve.png")

    print(json.dumps({
        "config": cfg.echo(),
        "checkpoint": str(ck_path),
        "metrics_csv": str(csv_path),
        "best_iteration": result.best_iteration,
        "best_val_mae": result.best_val_mae,
        "stopped_early": result.stopped_early,
    }))
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for name in ("manifest", "atlas_dir", "checkpoint"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if args.samples is not None:
        cfg.reg_samples = args.samples
    if args.resolutions is not None:
        cfg.reg_resolutions = args.resolutions
    if args.iterations is not None:
        cfg.reg_iterations = args.iterations
    if not cfg.manifest or not cfg.atlas_dir:
        raise ConfigError("evaluate needs --manifest and --atlas-dir (or a config)")

    atlas = _load_atlas(cfg.atlas_dir)
    entries, images, labels = _load_split(cfg.manifest, args.split)
    if not entries:
        raise ConfigError(f"manifest has no {args.split!r} entries")

    if args.baseline == "mi":
        pyr = PyramidConfig(num_resolutions=cfg.reg_resolutions,
                            max_iterations=cfg.reg_iterations,
                            samples=cfg.reg_samples,
                            random_sample_region=cfg.reg_random_region,
                            pyramid=cfg.reg_pyramid)
        ranker = make_mi_ranker(atlas, pyr, seed=cfg.seed, bins=cfg.reg_bins)
    else:
        if not cfg.checkpoint:
            raise ConfigError("evaluate needs --checkpoint unless --baseline mi")
        ck = load_checkpoint(cfg.checkpoint)
        index = build_index(atlas, ck.spec, ck.params, ck.digest())
        ranker = make_siamese_ranker(index, ck.spec, ck.params)

    report = evaluate(images, labels, ranker)
    if args.no_timing:
        report.inference_seconds = 0.0
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.to_json_dict(), indent=2)
                                         + "\n", encoding="utf-8")
        with (out / "ranks.tsv").open("w", encoding="utf-8") as fh:
            fh.write("path\tplate\trank\n")
            for entry, rank in zip(entries, report.ranks):
                fh.write(f"{entry.path}\t{entry.plate}\t{rank}\n")
        if not args.no_figures:
            figures.rank_histogram(report.ranks, len(atlas),
                                   out / "rank_histogram.png")
    print(json.dumps(report.to_json_dict()))
    return 0


# ---------------------------------------------------------------------------
# register


def cmd_register(args) -> int:
    if args.mode == "regress" and not args.checkpoint:
        raise ConfigError("--mode regress requires --checkpoint")
    seed = _env_seed()
    seed = args.seed if seed is None else seed
    fixed = load_pgm(args.fixed)
    moving = load_pgm(args.moving)

    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    payload: dict
    if args.mode == "optimize":
        pyr = PyramidConfig(num_resolutions=args.resolutions,
                            max_iterations=args.iterations,
                            samples=args.samples,
                            random_sample_region=args.random_region,
                            pyramid=args.pyramid)
        result = register_affine(fixed, moving, pyr, seed=seed, bins=args.bins)
        transform = result.transform
        payload = {"mode": "optimize", **result.to_json_dict()}
        if out and not args.no_figures:
            figures.mi_traces(result.traces, out / "mi_trace.png")
    elif args.mode == "search":
        best, log = random_search(fixed, moving, trials=args.trials, seed=seed,
                                  bins=args.bins, samples=args.samples)
        transform = best.transform
        payload = {"mode": "search", "trials": args.trials,
                   "best": best.to_json_dict()}
        if out:
            with (out / "trials.jsonl").open("w", encoding="utf-8") as fh:
                for entry in log:
                    if args.no_timing:
                        entry = {**entry, "seconds": 0.0}
                    fh.write(json.dumps(entry) + "\n")
            if not args.no_figures:
                figures.search_trials(log, out / "search_trials.png")
    else:  # regress
        ck = load_checkpoint(args.checkpoint)
        transform = predict_affine(ck, moving, fixed)
        moved = warp_affine(moving, transform, fixed.width, fixed.height)
        payload = {"mode": "regress",
                   "transform": list(transform.params()),
                   "final_mi": mutual_information(fixed, moved, args.bins)}

    if args.no_timing:
        for key in ("seconds",):
            payload.pop(key, None)
            if "best" in payload:
                payload["best"].pop(key, None)
    if out:
        moved = warp_affine(moving, transform, fixed.width, fixed.height)
        save_pgm(moved, out / "moved.pgm")
        (out / "result.json").write_text(json.dumps(payload, indent=2) + "\n",
                                         encoding="utf-8")
    print(json.dumps(payload))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atlasmatch",
        description="Slice-to-atlas identification and MI affine registration")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--plates", type=int, default=132)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--morph-rate", type=float, default=1.0)
    g.add_argument("--counts", required=True,
                   help="train,val1,val2,test slice counts, e.g. 50,12,10,12")
    g.add_argument("--out", required=True)
    g.add_argument("--rotation-max", type=float, default=15.0)
    g.add_argument("--scale-min", type=float, default=0.85)
    g.add_argument("--scale-max", type=float, default=1.15)
    g.add_argument("--translation-max", type=float, default=0.1)
    g.add_argument("--crop-max", type=float, default=0.3)
    g.add_argument("--pepper-max", type=float, default=0.05)
    g.add_argument("--blend-max", type=float, default=0.5)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the embedding identifier")
    t.add_argument("--config")
    t.add_argument("--manifest")
    t.add_argument("--atlas-dir", dest="atlas_dir")
    t.add_argument("--out-dir", dest="out_dir")
    t.add_argument("--loss", choices=LOSSES)
    t.add_argument("--mining", choices=[m.value for m in MiningMode])
    t.add_argument("--margin", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--input-size", dest="input_size", type=int)
    t.add_argument("--embed-dim", dest="embed_dim", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--max-iterations", dest="max_iterations", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--val-every", dest="val_every", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-figures", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="rank plates for a manifest split")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--manifest")
    e.add_argument("--atlas-dir", dest="atlas_dir")
    e.add_argument("--split", default="test", choices=list(SPLITS))
    e.add_argument("--baseline", choices=["mi"])
    e.add_argument("--out")
    e.add_argument("--resolutions", type=int)
    e.add_argument("--iterations", type=int)
    e.add_argument("--samples", type=int)
    e.add_argument("--no-timing", action="store_true")
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    def add_register_args(p, mode_flag: bool):
        if mode_flag:
            p.add_argument("--mode", choices=["optimize", "search", "regress"],
                           default="optimize")
        p.add_argument("--fixed", required=True)
        p.add_argument("--moving", required=True)
        p.add_argument("--out")
        p.add_argument("--checkpoint")
        p.add_argument("--trials", type=int, default=100)
        p.add_argument("--resolutions", type=int, default=3)
        p.add_argument("--iterations", type=int, default=1000)
        p.add_argument("--samples", type=int, default=10_000)
        p.add_argument("--pyramid", choices=["recursive", "shrinking", "smoothing"],
                       default="recursive")
        p.add_argument("--random-region", action="store_true")
        p.add_argument("--bins", type=int, default=32)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--no-timing", action="store_true")
        p.add_argument("--no-figures", action="store_true")

    r = sub.add_parser("register", help="affinely register moving to fixed")
    add_register_args(r, mode_flag=True)
    r.set_defaults(func=cmd_register)

    s = sub.add_parser("search-hparams",
                       help="random hyperparameter search (register --mode search)")
    add_register_args(s, mode_flag=False)
    s.set_defaults(func=cmd_register, mode="search")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - boundary: report and exit nonzero
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
