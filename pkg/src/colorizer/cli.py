"""Command-line interface: one executable over the whole pipeline.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Diagnostics go to
stderr, data to stdout. Set COLORIZER_LOG=debug|info|warning for verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import arch as arch_mod
from . import dataio, metrics, pipeline, rebalance, study
from .colorspace import split_channels, srgb_to_lab
from .quantize import build_gamut

log = logging.getLogger("colorizer")

DEFAULT_LAMBDA = 0.5
DEFAULT_SIGMA = 5.0
DEFAULT_GRID = 10.0
DEFAULT_T = 0.38


class UsageError(Exception):
    pass


def _positive(kind, name, value):
    if value <= 0:
        raise UsageError(f"--{name} must be a positive {kind}, got {value}")
    return value


def _in_unit(name, value):
    if not 0.0 <= value <= 1.0:
        raise UsageError(f"--{name} must be in [0, 1], got {value}")
    return value


def _load_arch(spec: str):
    if spec in ("desk64", "full224"):
        return arch_mod.desk_config() if spec == "desk64" else arch_mod.full_scale_config()
    if not Path(spec).is_file():
        raise UsageError(f"--arch {spec!r} is neither a builtin "
                         "(desk64, full224) nor a readable file")
    return arch_mod.load_architecture(spec)


# ------------------------------------------------------------- subcommands

def cmd_compute_priors(args) -> int:
    lam = _in_unit("lambda", args.lam)
    sigma = _positive("number", "sigma", args.sigma)
    grid = _positive("number", "grid-step", args.grid_step)
    size = int(_positive("integer", "size", args.size))

    dataset = dataio.load_dataset(args.dataset, size=size, seed=args.seed)
    bins = build_gamut(grid)
    labs = (srgb_to_lab(img) for img in dataset.images)
    priors = rebalance.build_prior_weights(labs, bins, lam=lam, sigma=sigma)
    dataio.save_priors(args.out, priors, bins)
    print(f"priors written to {args.out}: Q={bins.q} "
          f"pixels={priors.pixel_count} lambda={lam} sigma={sigma}")
    return 0


def cmd_train(args) -> int:
    cfg = pipeline.TrainConfig(
        variant=args.variant,
        iterations=int(_positive("integer", "iterations", args.iterations)),
        batch_size=int(_positive("integer", "batch-size", args.batch_size)),
        seed=args.seed,
        lr_schedule=tuple(args.lr),
        weight_decay=args.weight_decay,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    priors = None
    bins = None
    if args.priors:
        priors, bins = dataio.load_priors(args.priors)
    elif cfg.variant == "class_rebal":
        raise UsageError("--variant class_rebal requires --priors "
                         "(run compute-priors first)")

    resume = None
    if args.resume:
        resume = dataio.load_checkpoint(args.resume)
        if resume.variant != cfg.variant:
            raise UsageError(f"checkpoint variant {resume.variant!r} does not "
                             f"match --variant {cfg.variant}")
        model, bins = pipeline.model_from_checkpoint(resume)
        arch_cfg = model.cfg
    elif cfg.variant == "l2_finetune":
        if not args.source:
            raise UsageError("--variant l2_finetune requires --source "
                             "(a classification checkpoint to start from)")
        source = dataio.load_checkpoint(args.source)
        model, bins = pipeline.model_for_finetune(source, seed=cfg.seed)
        arch_cfg = model.cfg
    else:
        arch_cfg = _load_arch(args.arch)
        if bins is None:
            bins = build_gamut(DEFAULT_GRID)
        head = bins.q if cfg.objective == "classification" else 2
        model = pipeline.build_model(arch_cfg, head, cfg.objective, seed=cfg.seed)

    dataset = dataio.load_dataset(args.dataset, size=arch_cfg.input_size,
                                  seed=cfg.seed)

    def save_cb(ckpt):
        dataio.save_checkpoint(args.out, ckpt)

    result = pipeline.train(model, dataset, cfg, bins, priors=priors,
                            resume=resume,
                            checkpoint_every=args.checkpoint_every,
                            checkpoint_cb=save_cb)
    if args.loss_log:
        lines = [f"{it} {loss!r} {lr!r}" for it, loss, lr in result.loss_curve]
        Path(args.loss_log).write_text("\n".join(lines) + "\n", encoding="utf-8")
    final = result.loss_curve[-1]
    print(f"trained {cfg.variant} for {final[0]} iterations; "
          f"final loss {final[1]:.6f}; checkpoint {args.out}")
    return 0


def cmd_colorize(args) -> int:
    T = args.temperature
    if not 0.0 < T <= 1.0:
        raise UsageError(f"--temperature must be in (0, 1], got {T}")
    ckpt = dataio.load_checkpoint(args.checkpoint)
    model, bins = pipeline.model_from_checkpoint(ckpt)
    img = dataio.read_ppm(args.input)
    out = pipeline.colorize(model, img, bins, T=T)
    dataio.write_ppm(args.output, out)
    print(f"colorized {args.input} -> {args.output} "
          f"({out.width}x{out.height}, T={T})")
    return 0


def cmd_evaluate(args) -> int:
    T = args.temperature
    if not 0.0 < T <= 1.0:
        raise UsageError(f"--temperature must be in (0, 1], got {T}")
    size = int(_positive("integer", "size", args.size))

    priors = None
    bins = None
    if args.priors:
        priors, bins = dataio.load_priors(args.priors)

    model = None
    if args.predictor == "checkpoint":
        if not args.checkpoint:
            raise UsageError("--predictor checkpoint requires --checkpoint")
        ckpt = dataio.load_checkpoint(args.checkpoint)
        model, ckpt_bins = pipeline.model_from_checkpoint(ckpt)
        if bins is not None and not np.array_equal(bins.centers, ckpt_bins.centers):
            raise UsageError("priors and checkpoint disagree about the gamut bins")
        bins = ckpt_bins
    elif bins is None:
        bins = build_gamut(DEFAULT_GRID)

    dataset = dataio.load_dataset(args.dataset, size=size, seed=args.seed)

    def entries():
        for path, img in zip(dataset.paths, dataset.images):
            _, gt_ab = split_channels(srgb_to_lab(img))
            if args.predictor == "gray":
                pred_ab = np.zeros_like(gt_ab)
            elif args.predictor == "identity":
                pred_ab = gt_ab
            else:
                pred_lab = pipeline.colorize_lab(model, img, bins, T=T)
                _, pred_ab = split_channels(pred_lab)
            yield path.name, pred_ab, gt_ab

    report = metrics.evaluation_report(
        entries(), priors=priors, bins=bins,
        header={"predictor": args.predictor,
                "checkpoint": args.checkpoint or "na",
                "dataset": args.dataset,
                "temperature": repr(args.temperature)})
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    return 0


def cmd_serve_study(args) -> int:
    port = int(args.port)
    if not 1 <= port <= 65535:
        raise UsageError(f"--port must be in [1, 65535], got {args.port}")
    manifest = study.load_manifest(args.manifest)
    app = study.create_app(manifest, results_dir=args.results_dir,
                           seed=args.seed)
    import uvicorn
    level = os.environ.get("COLORIZER_LOG", "info").lower()
    uvicorn.run(app, host=args.host, port=port, log_level=level)
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="colorizer",
        description="Classification-based automatic image colorization")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("compute-priors",
                        help="estimate the color prior and rebalancing weights")
    sp.add_argument("--dataset", required=True, help="directory of .ppm images")
    sp.add_argument("--out", required=True, help="output priors file")
    sp.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    sp.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    sp.add_argument("--grid-step", type=float, default=DEFAULT_GRID)
    sp.add_argument("--size", type=int, default=64,
                    help="resize/crop images to this side first")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_compute_priors)

    sp = sub.add_parser("train", help="train a colorization network")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--arch", default="desk64",
                    help="builtin name (desk64, full224) or an architecture file")
    sp.add_argument("--out", required=True, help="checkpoint output path")
    sp.add_argument("--variant", default="class_rebal",
                    choices=list(pipeline.VARIANTS))
    sp.add_argument("--priors", help="priors file (required for class_rebal)")
    sp.add_argument("--source", help="source checkpoint for l2_finetune")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--iterations", type=int, default=2000)
    sp.add_argument("--batch-size", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lr", type=float, nargs="+", default=[3e-5, 1e-5, 3e-6],
                    help="learning rate schedule (plateau-driven drops)")
    sp.add_argument("--weight-decay", type=float, default=1e-3)
    sp.add_argument("--loss-log", help="write per-iteration losses here")
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("colorize", help="colorize one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--in", dest="input", required=True, help="input .ppm")
    sp.add_argument("--out", dest="output", required=True, help="output .ppm")
    sp.add_argument("-T", "--temperature", type=float, default=DEFAULT_T)
    sp.set_defaults(func=cmd_colorize)

    sp = sub.add_parser("evaluate",
                        help="AuC / rebalanced AuC / chroma over a dataset")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--predictor", default="checkpoint",
                    choices=["checkpoint", "gray", "identity"])
    sp.add_argument("--priors", help="priors file (enables rebalanced AuC)")
    sp.add_argument("--out", help="also write the report to this file")
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("-T", "--temperature", type=float, default=DEFAULT_T)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("serve-study",
                        help="run the real-vs-fake study HTTP service")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--results-dir", required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_serve_study)

    return p


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=os.environ.get("COLORIZER_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (dataio.FormatError, study.StudyError, arch_mod.ArchitectureError,
            pipeline.TrainingDivergedError, FileNotFoundError, ValueError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        log.debug("failure detail", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
