"""Command-line entry point: synth | train | eval | loo | gradcam.

All randomness derives from --seed; runs echo their resolved configuration
into the output directory, so identical invocations produce byte-identical
outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import attribution, datapipe, evaluation, model, training
from .training import TrainConfig

log = logging.getLogger("xinv")


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("XINV_LOG", "error").lower(), logging.ERROR
    )
    logging.basicConfig(level=level, format="%(name)s %(levelname)s %(message)s")


def _add_train_flags(p):
    p.add_argument("--mode", choices=training.MODES, default="grad_reversal")
    p.add_argument("--lambda", dest="lam", type=float, default=0.3)
    p.add_argument("--d-steps", type=int, default=1)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.003)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)


def _config_from(args, held_out=None):
    return TrainConfig(
        lam=args.lam,
        mode=args.mode,
        d_steps=args.d_steps,
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        momentum=args.momentum,
        seed=args.seed,
        held_out=held_out,
    )


def _echo_config(out_dir, payload):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def build_parser():
    parser = argparse.ArgumentParser(prog="xinv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic multi-source corpus")
    p.add_argument("--spec", help="key=value spec file (defaults used when omitted)")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a single model")
    p.add_argument("--data", required=True)
    p.add_argument("--held-out", default=None, help="source excluded from training")
    p.add_argument("--out", required=True)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint on in/out-of-source test splits")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--held-out", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("loo", help="leave-one-source-out experiment")
    p.add_argument("--data", required=True)
    p.add_argument("--held-out", default=None, help="run a single fold")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_train_flags(p)

    p = sub.add_parser("gradcam", help="write a Grad-CAM heatmap for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    return parser


def cmd_synth(args):
    spec = datapipe.load_synth_spec(args.spec) if args.spec else datapipe.SynthSpec()
    if args.seed is not None:
        spec.seed = args.seed
    out = datapipe.synth_generate(spec, args.out)
    print(f"wrote corpus under {args.out} (held-out source: {out['held_out']})")
    return 0


def cmd_train(args):
    config = _config_from(args, held_out=args.held_out)
    manifest = datapipe.load_manifest(Path(args.data) / "train.csv")
    if args.held_out is not None:
        manifest = manifest.filter(lambda s: s != args.held_out)
    params, records = training.train(config, manifest)
    out_dir = Path(args.out)
    _echo_config(out_dir, config.as_dict())
    model.save_checkpoint(out_dir / "model.ckpt", params)
    training.write_run_record(out_dir / "runrecord.jsonl", records)
    print(f"trained {config.mode} model -> {out_dir / 'model.ckpt'}")
    return 0


def cmd_eval(args):
    params = model.load_checkpoint(args.ckpt)
    test_man = datapipe.load_manifest(Path(args.data) / "test.csv")
    in_test = test_man.filter(lambda s: s != args.held_out)
    out_test = test_man.filter(lambda s: s == args.held_out)
    auc_in = evaluation.auc_roc(evaluation.evaluate(params, in_test))
    auc_out = evaluation.auc_roc(evaluation.evaluate(params, out_test))
    payload = {
        "held_out": args.held_out,
        "auc_in_source": auc_in,
        "auc_out_of_source": auc_out,
        "gap": auc_in - auc_out,
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_loo(args):
    config = _config_from(args, held_out=args.held_out)
    report = training.run_leave_one_out(config, args.data, out_dir=args.out, jobs=args.jobs)
    sys.stdout.write(report.to_table())
    return 0


def cmd_gradcam(args):
    params = model.load_checkpoint(args.ckpt)
    image = datapipe.decode_image(args.image)
    heatmap = attribution.grad_cam(params, image)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    attribution.save_heatmap(heatmap, args.out)
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "loo": cmd_loo,
    "gradcam": cmd_gradcam,
}


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
