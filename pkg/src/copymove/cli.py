"""Command-line interface: synth / train / cl / eval / infer."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import (ModelConfig, DistillConfig, TrainConfig, load_model_config,
                     save_model_config)
from .errors import (CheckpointError, ConfigError, DataError, DivergenceError,
                     GenerationError, ShapeError)
from .checkpoint import load_checkpoint, model_from_checkpoint
from .inference import infer
from .metrics import (DEFAULT_FAR_FRACTION, DEFAULT_THRESHOLD,
                      evaluate_manifest, write_report)
from .synth import generate_dataset
from .training import continual_learn, train


def _add_train_flags(p, with_manifest=True):
    if with_manifest:
        p.add_argument("--train-manifest", required=True)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--learning-rate", type=float, default=6e-5)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--optimizer", default="adamw")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", default="single",
                   choices=("single", "double"))


def _train_config(args, checkpoint_path) -> TrainConfig:
    return TrainConfig(train_manifest=args.train_manifest,
                       checkpoint_path=checkpoint_path,
                       epochs=args.epochs, batch_size=args.batch_size,
                       learning_rate=args.learning_rate,
                       weight_decay=args.weight_decay,
                       optimizer=args.optimizer, seed=args.seed,
                       precision=args.precision)


def _emit(payload, path):
    text = json.dumps(payload, indent=1, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="copymove",
        description="Copy-move forgery detection: data synthesis, training, "
                    "continual learning, evaluation, and inference.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--domain", choices=("a", "b"), default="a")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pristine", type=int, default=0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)

    p = sub.add_parser("train", help="train a model from scratch")
    _add_train_flags(p)
    p.add_argument("--checkpoint", required=True,
                   help="where to write the trained checkpoint")
    p.add_argument("--model-config",
                   help="model config text file; defaults used if omitted")
    p.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"),
                   help="training image size for the default model config")
    p.add_argument("--report", help="write a JSON training summary here")

    p = sub.add_parser("cl", help="continual-learn from an old checkpoint")
    _add_train_flags(p)
    p.add_argument("--old-checkpoint", required=True)
    p.add_argument("--checkpoint", required=True,
                   help="where to write the adapted checkpoint")
    p.add_argument("--distill-weight", type=float, default=1.0)
    p.add_argument("--ce-weight", type=float, default=1.0)
    p.add_argument("--report", help="write a JSON training summary here")

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--far-fraction", type=float, default=DEFAULT_FAR_FRACTION)
    p.add_argument("--report", help="write the JSON report here")

    p = sub.add_parser("infer", help="run one image and write mask + overlay")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--out-overlay")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)

    p = sub.add_parser("config", help="write the default model config file")
    p.add_argument("--out", required=True)
    return parser


def _cmd_synth(args):
    manifest = generate_dataset(args.n, args.domain, args.seed, args.out,
                                n_pristine=args.pristine,
                                height=args.height, width=args.width)
    print(str(manifest))


def _cmd_train(args):
    if args.model_config:
        model_config = load_model_config(args.model_config)
    else:
        kwargs = {"seed": args.seed}
        if args.image_size:
            kwargs["image_size"] = tuple(args.image_size)
        model_config = ModelConfig(**kwargs)
    cfg = _train_config(args, args.checkpoint)
    result = train(cfg, model_config=model_config)
    _emit({"checkpoint": args.checkpoint, "steps": result.steps,
           "epoch_losses": result.epoch_losses}, args.report)


def _cmd_cl(args):
    cfg = _train_config(args, args.checkpoint)
    distill_cfg = DistillConfig(distill_weight=args.distill_weight)
    result = continual_learn(args.old_checkpoint, cfg, distill_cfg,
                             ce_weight=args.ce_weight)
    _emit({"checkpoint": args.checkpoint, "steps": result.steps,
           "epoch_losses": result.epoch_losses}, args.report)


def _cmd_eval(args):
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    report = evaluate_manifest(model, args.manifest,
                               threshold=args.threshold,
                               far_fraction=args.far_fraction)
    if args.report:
        write_report(report, args.report)
    print(report.to_json())


def _cmd_infer(args):
    result = infer(args.checkpoint, args.image, args.out_mask,
                   overlay_out=args.out_overlay, threshold=args.threshold)
    print(json.dumps(result, indent=1, sort_keys=True))


def _cmd_config(args):
    save_model_config(ModelConfig(), args.out)
    print(str(args.out))


_COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "cl": _cmd_cl,
             "eval": _cmd_eval, "infer": _cmd_infer, "config": _cmd_config}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except (CheckpointError, ConfigError, DataError, DivergenceError,
            GenerationError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
