"""Command-line entry point: ``wctdefense {train,attack,gallery,defend-eval,report,run}``.

Every subcommand reads the same config (``--config`` plus flag overrides).
``run`` produces everything it needs; the other subcommands produce only
their own stage and fail with a message naming the subcommand that makes a
missing prerequisite. Exit codes: 0 success, 1 config error, 2 ingestion
error, 3 numerical error, 4 stage failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import defense as D
from . import model as M
from .config import CACHE_ENV, PipelineConfig
from .data import IMAGE_MAGIC, read_idx_images
from .errors import ConfigError, IngestionError, WCTDefenseError
from .pipeline import Pipeline, run_pipeline

log = logging.getLogger("wctdefense")

SUBCOMMANDS = ("train", "attack", "gallery", "defend-eval", "report", "run")


def _int_list(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON or YAML pipeline config")
    common.add_argument("--seed", type=int, help="global seed (fans out to every stochastic stage)")
    common.add_argument("--dataset", help="dataset id used in reports")
    common.add_argument("--data-root", help="directory holding the IDX train/t10k files")
    common.add_argument("--taps", type=_int_list, help="defense placement, e.g. 3 or 1,2,3")
    common.add_argument("--ref-layer", type=int, help="layer j for the nearest-neighbor reference (0 = pixels)")
    common.add_argument("--attack", help="attack kind (FGSM, BIM, PGD, MIM, CW_L2, SALT_PEPPER)")
    common.add_argument("--eps", type=float, help="attack L-infinity budget")
    common.add_argument("--out", help="report directory")
    common.add_argument("--experiments", type=_str_list, help="comma-separated experiment names")
    common.add_argument("--cache-dir", help=f"artifact cache (default ${CACHE_ENV} or .wctdefense-cache)")
    common.add_argument("--checkpoint", help="use this pre-trained checkpoint instead of training")
    common.add_argument("--eval-size", type=int, help="number of test images to evaluate")
    common.add_argument("--train-size", type=int, help="number of training images to use")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="wctdefense", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train (or load) the vanilla checkpoint")
    sub.add_parser("attack", parents=[common], help="build adversarial sets against the vanilla model")
    sub.add_parser("gallery", parents=[common], help="build nearest-neighbor galleries")
    ev = sub.add_parser("defend-eval", parents=[common], help="classify images through the defended model")
    ev.add_argument("--input", required=True, type=Path, help="IDX image file, .npy array, or a directory of them")
    ev.add_argument("--no-defense", action="store_true", help="report vanilla predictions only")
    ev.add_argument("--self-reference", action="store_true", help="color each image with its own statistics")
    sub.add_parser("report", parents=[common], help="run experiments on cached artifacts and write reports")
    sub.add_parser("run", parents=[common], help="run the whole pipeline")
    return parser


def load_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    return cfg.with_overrides(seed=args.seed, dataset=args.dataset, data_root=args.data_root, taps=args.taps,
                              ref_layer=args.ref_layer, attack=args.attack, eps=args.eps, out=args.out,
                              experiments=args.experiments, cache_dir=args.cache_dir,
                              checkpoint=args.checkpoint, eval_size=args.eval_size, train_size=args.train_size)


def load_images(path: Path) -> np.ndarray:
    """Images as ``(N, 1, H, W)`` in [0, 1] from IDX, ``.npy``, or a directory of either."""
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.is_file() and (p.suffix == ".npy" or _is_idx(p)))
        if not files:
            raise IngestionError(f"{path}: no .npy or IDX image files")
        return np.concatenate([load_images(p) for p in files])
    if not path.exists():
        raise IngestionError(f"{path}: no such file")
    if path.suffix == ".npy":
        x = np.load(path, allow_pickle=False).astype(np.float64)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4:
            raise IngestionError(f"{path}: expected (H, W), (N, H, W) or (N, 1, H, W), got {x.shape}")
        if x.size and x.max() > 1.0:
            x = x / 255.0
        return x
    return read_idx_images(path)


def _is_idx(path: Path) -> bool:
    with open(path, "rb") as fh:
        head = fh.read(4)
    return len(head) == 4 and int.from_bytes(head, "big") == IMAGE_MAGIC


def _defend_eval(p: Pipeline, args) -> None:
    images = load_images(args.input)
    model = p.checkpoint(produce=False, needed_by="defend-eval")
    expected = model.config.input_shape
    if images.shape[1:] != tuple(expected):
        raise ConfigError(f"input images have shape {images.shape[1:]}, model expects {tuple(expected)}")
    vanilla = M.predict(model, images)
    defense = p.cfg.defense_config()
    if args.no_defense:
        defended = vanilla
    elif args.self_reference:
        defense.check_model(model)
        logits, _ = D.defended_forward(model, images, images, defense.taps, defense.eigen)
        defended = np.argmax(logits, axis=1)
    else:
        ref = p.galleries([defense.ref_layer], produce=False, needed_by="defend-eval")[defense.ref_layer]
        logits, _ = D.defend(model, images, defense, ref)
        defended = np.argmax(logits, axis=1)
    print("index,vanilla,defended")
    for i, (a, b) in enumerate(zip(vanilla, defended)):
        print(f"{i},{a},{b}")


def dispatch(args: argparse.Namespace) -> None:
    cfg = load_config(args)
    cmd = args.command
    if cmd == "run":
        reports, written, _ = run_pipeline(cfg)
        for path in written:
            print(path)
        return
    p = Pipeline(cfg)
    if cmd == "train":
        ckpt = p.checkpoint()
        acc = ckpt.metadata.get("clean_accuracy")
        print(f"checkpoint {ckpt.digest()} clean_accuracy {acc}")
    elif cmd == "attack":
        p.checkpoint(produce=False, needed_by="attack")
        for adv in p.run_attacks():
            acc = float(np.mean(adv.predictions == adv.labels)) if len(adv) else 0.0
            print(f"{adv.config.label} n={len(adv)} vanilla_accuracy={acc:.4f}")
    elif cmd == "gallery":
        p.checkpoint(produce=False, needed_by="gallery")
        for layer, g in p.galleries(p.gallery_layers()).items():
            print(f"layer {layer}: {len(g)} entries, dim {g.dim}")
    elif cmd == "defend-eval":
        _defend_eval(p, args)
    elif cmd == "report":
        reports = p.experiments(produce=False, needed_by="report")
        for path in p.write_reports(reports):
            print(path)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except WCTDefenseError as exc:
        where = getattr(exc, "stage", None)
        prefix = f"[{where}] " if where and not str(exc).startswith("[") else ""
        print(f"wctdefense: error: {prefix}{exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
