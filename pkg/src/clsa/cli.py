"""Command-line entry point.

Configuration precedence, lowest to highest: built-in defaults, ``--config``
file, ``--set key=value`` overrides, dedicated flags such as ``--seed`` and
``--epochs``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .augment import StrongAugConfig
from .config import ConfigError, TrainConfig, load_config, save_config
from .data import Dataset, load_image_folder, synth_dataset
from .evaluation import (
    ProbeConfig,
    distribution_diagnostics,
    extract_features,
    knn_eval,
    linear_probe,
    plot_diagnostics,
    plot_knn_summary,
)
from .trainer import CheckpointError, init_state, load_checkpoint, pretrain

log = logging.getLogger("clsa")

DEFAULT_TRAIN_DATA = "synth:4x256:0"
DEFAULT_TEST_DATA = "synth:4x100:1"


class CommandError(Exception):
    """Failure reported to the user as one line with exit code 1."""


@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict
    code_version: str
    argv: list
    started: str
    finished: str | None = None
    outputs: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def parse_dataset(spec: str, image_size: int) -> Dataset:
    """``synth:CxN[:SEED]`` builds a synthetic set; anything else is an image folder."""
    if spec.startswith("synth"):
        parts = spec.split(":")
        try:
            classes, per_class = (int(v) for v in (parts[1] if len(parts) > 1 else "4x256").split("x"))
            seed = int(parts[2]) if len(parts) > 2 else 0
        except ValueError as exc:
            raise CommandError(f"bad synthetic dataset spec {spec!r}; expected synth:CxN[:SEED]") from exc
        return synth_dataset(seed, classes, per_class, (image_size, image_size))
    try:
        return load_image_folder(spec, (image_size, image_size))
    except FileNotFoundError as exc:
        raise CommandError(str(exc)) from exc


def _parse_set(items) -> dict:
    overrides = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = yaml.safe_load(raw)
    return overrides


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides = _parse_set(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    return cfg.with_overrides(overrides) if overrides else cfg


def _load_state(args):
    cfg = resolve_config(args) if (args.config or args.set) else None
    try:
        state = load_checkpoint(args.checkpoint, cfg)
    except FileNotFoundError as exc:
        raise CommandError(str(exc)) from exc
    return state


def _open_run(args, cfg: TrainConfig, command: str, argv) -> tuple[Path, RunManifest]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command=command,
        seed=cfg.seed,
        config=cfg.to_dict(),
        code_version=_version(),
        argv=list(argv),
        started=_now(),
        outputs={"config": "config.yaml", "metrics": "metrics.jsonl"},
    )
    save_config(cfg, out / "config.yaml")
    manifest.write(out)
    return out, manifest


def _close_run(out: Path, manifest: RunManifest, records: list[dict] | None = None) -> None:
    if records:
        with (out / "metrics.jsonl").open("a") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    manifest.finished = _now()
    manifest.write(out)


# --------------------------------------------------------------------------
# Subcommands


def cmd_pretrain(args, argv) -> int:
    cfg = resolve_config(args)
    dataset = parse_dataset(args.data, args.image_size)
    out, manifest = _open_run(args, cfg, "pretrain", argv)
    state = pretrain(cfg, dataset, out, resume=args.resume, max_steps=args.max_steps, log_every=args.log_every)
    ckpts = sorted(p.name for p in out.glob("checkpoint_epoch*.pt"))
    manifest.outputs["checkpoints"] = ckpts
    _close_run(out, manifest)
    print(f"trained {state.step} steps; checkpoint {out / ckpts[-1] if ckpts else '(none)'}")
    return 0


def cmd_eval_knn(args, argv) -> int:
    state = _load_state(args)
    cfg = state.cfg
    train = parse_dataset(args.data, args.image_size)
    test = parse_dataset(args.test_data, args.image_size)
    out, manifest = _open_run(args, cfg, "eval-knn", argv)
    seed = cfg.seed if args.seed is None else args.seed
    strong = StrongAugConfig(**{**asdict(cfg.strong), "crop_sizes": (args.strong_crop,)})
    results = {}
    for mode in args.view_modes:
        kwargs = dict(crop_size=args.strong_crop, strong=strong) if mode == "strong" else dict(crop_size=args.crop)
        tr = extract_features(state.pair.query, train, mode, seed=seed, **kwargs)
        te = extract_features(state.pair.query, test, mode, seed=seed + 1, **kwargs)
        results[mode] = knn_eval(tr, te, k=args.k, weighted=not args.plain_vote)
        print(f"knn k={args.k} {mode}: {results[mode]:.4f}")
    if args.plots:
        label = Path(args.checkpoint).stem
        plot_knn_summary({m: {label: acc} for m, acc in results.items()}, out / "knn_summary.png")
        manifest.outputs["plot"] = "knn_summary.png"
    _close_run(out, manifest, [{"type": "knn", "k": args.k, "checkpoint": str(args.checkpoint), **results}])
    return 0


def cmd_eval_linear(args, argv) -> int:
    state = _load_state(args)
    train = parse_dataset(args.data, args.image_size)
    test = parse_dataset(args.test_data, args.image_size)
    out, manifest = _open_run(args, state.cfg, "eval-linear", argv)
    probe = ProbeConfig(epochs=args.probe_epochs, lr=args.probe_lr, seed=state.cfg.seed if args.seed is None else args.seed)
    acc = linear_probe(state.pair.query, train, test, probe, crop_size=args.crop)
    print(f"linear probe: {acc:.4f}")
    _close_run(out, manifest, [{"type": "linear", "checkpoint": str(args.checkpoint), "accuracy": acc, **asdict(probe)}])
    return 0


def cmd_diagnose(args, argv) -> int:
    if args.checkpoint:
        state = _load_state(args)
    else:
        state = init_state(resolve_config(args))
    cfg = state.cfg
    dataset = parse_dataset(args.data, args.image_size)
    out, manifest = _open_run(args, cfg, "diagnose", argv)
    seed = cfg.seed if args.seed is None else args.seed
    n = min(args.n_samples, len(dataset))
    diag = distribution_diagnostics(state.pair, state.bank, dataset, n, seed=seed, weak=cfg.weak,
                                    strong=cfg.strong, tau=cfg.loss.tau)
    summary = diag.summary()
    for key, value in summary.items():
        print(f"{key}: {value:.5g}")
    if args.plots:
        plot_diagnostics(diag, out / "diagnostics.png", title=Path(args.checkpoint).stem if args.checkpoint else "init")
        manifest.outputs["plot"] = "diagnostics.png"
    _close_run(out, manifest, [{"type": "diagnostics", "n_samples": n, **summary}])
    return 0


def cmd_preview(args, argv) -> int:
    from .augment import preview_grid

    cfg = resolve_config(args)
    dataset = parse_dataset(args.data, args.image_size)
    out, manifest = _open_run(args, cfg, "preview-augment", argv)
    picks = np.random.default_rng(cfg.seed).choice(len(dataset), size=min(args.n_images, len(dataset)), replace=False)
    grid = preview_grid([dataset.images[i] for i in picks], cfg.weak, cfg.strong, seed=cfg.seed, scale=args.scale)
    path = out / "preview.png"
    Image.fromarray(grid).save(path)
    manifest.outputs["preview"] = path.name
    _close_run(out, manifest, [{"type": "preview", "images": [int(i) for i in picks]}])
    print(f"wrote {path}")
    return 0


# --------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clsa", description="Contrastive pretraining, evaluation and diagnostics.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. loss.beta=0.5")
    common.add_argument("--seed", type=int, help="seed for all randomness")
    common.add_argument("--out", default="runs/latest", help="run directory (default: %(default)s)")
    common.add_argument("--image-size", type=int, default=32, help="side length images are resized to")
    common.add_argument("--data", default=DEFAULT_TRAIN_DATA, help="image folder or synth:CxN[:SEED]")

    p = sub.add_parser("pretrain", parents=[common], help="self-supervised pretraining")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this many steps")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    def evaluation(name, help_text, func, checkpoint_required=True):
        q = sub.add_parser(name, parents=[common], help=help_text)
        q.add_argument("--checkpoint", required=checkpoint_required)
        q.add_argument("--test-data", default=DEFAULT_TEST_DATA)
        q.add_argument("--crop", type=int, default=32, help="centre-crop side")
        q.add_argument("--plots", action="store_true", help="write plot images")
        q.set_defaults(func=func)
        return q

    q = evaluation("eval-knn", "KNN accuracy on frozen features", cmd_eval_knn)
    q.add_argument("--k", type=int, default=20)
    q.add_argument("--view-modes", nargs="+", default=["center_crop", "strong"], choices=["center_crop", "strong"])
    q.add_argument("--strong-crop", type=int, default=32, help="side of strongly augmented views")
    q.add_argument("--plain-vote", action="store_true", help="count votes instead of weighting by similarity")

    q = evaluation("eval-linear", "linear probe on frozen features", cmd_eval_linear)
    q.add_argument("--probe-epochs", type=int, default=ProbeConfig.epochs)
    q.add_argument("--probe-lr", type=float, default=ProbeConfig.lr)

    q = evaluation("diagnose", "positive-probability and negative-variance histograms", cmd_diagnose,
                   checkpoint_required=False)
    q.add_argument("--n-samples", type=int, default=512)

    p = sub.add_parser("preview-augment", parents=[common], help="grid of weak and strong views")
    p.add_argument("--n-images", type=int, default=6)
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_preview)
    return parser


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, argv)
    except (CommandError, ConfigError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
