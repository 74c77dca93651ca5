# Command-line driver: train, infer, gradcheck and inspect subcommands.
#
# Exit codes: 0 success, 1 training/verification failure, 2 usage error.

import argparse
import json
import logging
import os
import sys

from typing import List, Optional, Sequence  # noqa F401

from mapgan.autodiff.gradcheck import DEFAULT_EPSILON
from mapgan.networks.gan import GanLossVariant
from mapgan.tools import gradcheck_suite
from mapgan.tools.infer import infer
from mapgan.training.checkpoint import CheckpointIntegrityError, read_manifest
from mapgan.training.config import TrainConfig, default_values
from mapgan.training.train import fit

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

SEED_ENV = "MAPGAN_SEED"
LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]


class UsageError(Exception):
    pass


def check_positive_int(value):
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(u"'{}' is not an integer".format(value))
    if number < 1:
        raise argparse.ArgumentTypeError(u"'{}' must be >= 1".format(value))
    return number


def check_channels(value):
    try:
        channels = tuple(int(part) for part in value.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            u"'{}' is not a comma-separated list of channel counts".format(value)
        )
    if len(channels) < 2 or any(c < 1 for c in channels):
        raise argparse.ArgumentTypeError(
            u"'{}' needs at least two positive channel counts".format(value)
        )
    return channels


def check_gan_loss(value):
    try:
        return GanLossVariant(value)
    except ValueError:
        raise argparse.ArgumentTypeError(
            u"'{}' is not in {}".format(value, [v.value for v in GanLossVariant])
        )


def env_seed():
    # type: () -> Optional[int]
    value = os.environ.get(SEED_ENV)
    if value is None or value == "":
        return None
    try:
        return int(value)
    except ValueError:
        raise UsageError("{}={!r} is not an integer".format(SEED_ENV, value))


def resolve_seed(flag_seed, fallback):
    # type: (Optional[int], int) -> int
    if flag_seed is not None:
        return flag_seed
    seed = env_seed()
    return fallback if seed is None else seed


def _add_train_parser(subparsers):
    defaults = default_values()
    parser = subparsers.add_parser(
        "train",
        help="train a generator/discriminator pair on a paired corpus",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--data-dir", help="corpus root holding train/ and val/")
    parser.add_argument("--out", default=defaults["output_dir"], help="output directory")
    parser.add_argument("--epochs", type=check_positive_int, default=defaults["epochs"])
    parser.add_argument(
        "--batch-size", type=int, default=defaults["batch_size"], help="images per step"
    )
    parser.add_argument("--lr", type=float, default=defaults["lr"], help="Adam step size")
    parser.add_argument("--beta1", type=float, default=defaults["beta1"])
    parser.add_argument("--beta2", type=float, default=defaults["beta2"])
    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help="run seed (falls back to ${}, then {})".format(SEED_ENV, defaults["seed"]),
    )
    parser.add_argument(
        "--gan-loss",
        type=check_gan_loss,
        default=defaults["gan_loss"],
        help="generator adversarial term: {}".format(
            ", ".join(v.value for v in GanLossVariant)
        ),
    )
    parser.add_argument(
        "--adv-weight",
        type=float,
        default=defaults["adv_weight"],
        help="weight on the adversarial generator term",
    )
    parser.add_argument(
        "--l1-weight",
        type=float,
        default=defaults["l1_weight"],
        help="weight on the L1 distance to the real map",
    )
    parser.add_argument(
        "--d-steps",
        type=int,
        default=defaults["d_steps"],
        help="discriminator updates per generator update",
    )
    parser.add_argument(
        "--checkpoint-every",
        type=int,
        default=defaults["checkpoint_every"],
        help="epochs between checkpoints",
    )
    parser.add_argument(
        "--sample-every",
        type=int,
        default=defaults["sample_every"],
        help="steps between sample grids",
    )
    parser.add_argument(
        "--resize-to", type=int, default=defaults["resize_to"], help="tile side length"
    )
    parser.add_argument(
        "--swap-halves",
        action="store_true",
        help="the corpus stores the map on the left",
    )
    parser.add_argument(
        "--generator-channels",
        type=check_channels,
        default=defaults["generator_channels"],
        help="encoder channel plan, e.g. 64,128,256,512,512,512,512,512",
    )
    parser.add_argument(
        "--discriminator-channels",
        type=check_channels,
        default=defaults["discriminator_channels"],
    )
    parser.add_argument(
        "--decoder-slope",
        type=float,
        default=defaults["decoder_slope"],
        help="negative slope of decoder rectifiers (0 is ReLU)",
    )
    parser.add_argument(
        "--workers", type=int, default=defaults["workers"], help="image decode threads"
    )
    parser.add_argument(
        "--val-every",
        type=int,
        default=defaults["val_every"],
        help="epochs between validation passes (0 disables)",
    )
    parser.add_argument(
        "--max-steps",
        type=check_positive_int,
        default=defaults["max_steps"],
        help="stop after this many global steps",
    )
    parser.add_argument(
        "--resume", default=defaults["resume"], help="checkpoint to continue from"
    )
    parser.add_argument(
        "--dump-config",
        action="store_true",
        help="print the effective configuration as JSON and exit",
    )
    parser.set_defaults(handler=cmd_train)


def _add_infer_parser(subparsers):
    parser = subparsers.add_parser(
        "infer", help="generate maps from bare satellite tiles"
    )
    parser.add_argument("--checkpoint", required=True, help="trained checkpoint")
    parser.add_argument(
        "--input", required=True, help="satellite image, or a directory of them"
    )
    parser.add_argument("--out", required=True, help="directory for generated maps")
    parser.add_argument(
        "--stochastic-infer",
        action="store_true",
        help="keep decoder dropout active (batch norm still uses running statistics)",
    )
    parser.add_argument(
        "--seed", type=int, default=None, help="dropout seed for --stochastic-infer"
    )
    parser.set_defaults(handler=cmd_infer)


def _add_gradcheck_parser(subparsers):
    parser = subparsers.add_parser(
        "gradcheck", help="verify autodiff gradients against finite differences"
    )
    parser.add_argument(
        "--op",
        action="append",
        choices=list(gradcheck_suite.CASES),
        help="check only this op (repeatable)",
    )
    parser.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    parser.add_argument(
        "--seeds", type=check_positive_int, default=gradcheck_suite.DEFAULT_SEEDS
    )
    parser.set_defaults(handler=cmd_gradcheck)


def _add_inspect_parser(subparsers):
    parser = subparsers.add_parser("inspect", help="print a checkpoint manifest")
    parser.add_argument("--checkpoint", required=True)
    parser.set_defaults(handler=cmd_inspect)


def build_parser():
    # type: () -> argparse.ArgumentParser
    parser = argparse.ArgumentParser(
        prog="mapgan",
        description="Satellite-to-map translation with a conditional GAN.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="mapgan train --data-dir ./maps --epochs 1 --batch-size 10 --seed 7\n"
        "mapgan infer --checkpoint out/checkpoints/ckpt_1.bin --input tiles/ --out maps/\n"
        "mapgan gradcheck --op conv2d",
    )
    parser.add_argument("--log-level", choices=LOG_LEVELS, default="INFO")
    subparsers = parser.add_subparsers(dest="command")
    subparsers.required = True
    _add_train_parser(subparsers)
    _add_infer_parser(subparsers)
    _add_gradcheck_parser(subparsers)
    _add_inspect_parser(subparsers)
    return parser


def config_from_args(args):
    # type: (argparse.Namespace) -> TrainConfig
    """Effective, validated config for a `train` invocation.

    :raises UsageError: a flag value is invalid
    """
    try:
        return TrainConfig(
            data_root=args.data_dir or ".",
            output_dir=args.out,
            epochs=args.epochs,
            batch_size=args.batch_size,
            lr=args.lr,
            beta1=args.beta1,
            beta2=args.beta2,
            gan_loss=args.gan_loss,
            adv_weight=args.adv_weight,
            l1_weight=args.l1_weight,
            d_steps=args.d_steps,
            seed=resolve_seed(args.seed, TrainConfig.seed),
            checkpoint_every=args.checkpoint_every,
            sample_every=args.sample_every,
            resize_to=args.resize_to,
            swap_halves=args.swap_halves,
            generator_channels=args.generator_channels,
            discriminator_channels=args.discriminator_channels,
            decoder_slope=args.decoder_slope,
            workers=args.workers,
            max_steps=args.max_steps,
            val_every=args.val_every,
            resume=args.resume,
        ).validate()
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc))


def cmd_train(args):
    # type: (argparse.Namespace) -> int
    cfg = config_from_args(args)
    if args.dump_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if not args.data_dir:
        raise UsageError("train requires --data-dir")
    if not os.path.isdir(args.data_dir):
        raise UsageError("data directory {!r} does not exist".format(args.data_dir))
    if cfg.resume and not os.path.isfile(cfg.resume):
        raise UsageError("checkpoint {!r} does not exist".format(cfg.resume))

    result = fit(cfg)
    logger.info(
        "finished at step %d; %d checkpoints written",
        result.state.step,
        len(result.checkpoints),
    )
    return EXIT_OK


def cmd_infer(args):
    # type: (argparse.Namespace) -> int
    for path in (args.checkpoint, args.input):
        if not os.path.exists(path):
            raise UsageError("{!r} does not exist".format(path))
    seed = resolve_seed(args.seed, TrainConfig.seed)
    written = infer(args.checkpoint, args.input, args.out, args.stochastic_infer, seed)
    logger.info("generated %d maps in %s", len(written), args.out)
    return EXIT_OK


def cmd_gradcheck(args):
    # type: (argparse.Namespace) -> int
    if args.epsilon <= 0:
        raise UsageError("--epsilon must be positive")
    reports = gradcheck_suite.run_suite(args.op, args.seeds, args.epsilon)
    print(gradcheck_suite.format_report(reports))
    failures = [r.name for r in reports if not r.passed]
    if failures:
        sys.stderr.write("gradcheck failed for: {}\n".format(", ".join(failures)))
        return EXIT_FAILURE
    return EXIT_OK


def cmd_inspect(args):
    # type: (argparse.Namespace) -> int
    if not os.path.isfile(args.checkpoint):
        raise UsageError("checkpoint {!r} does not exist".format(args.checkpoint))
    manifest = read_manifest(args.checkpoint)
    summary = dict(
        step=manifest["step"],
        epoch=manifest.get("epoch"),
        config=manifest.get("config", {}),
        tensors=[
            dict(name=t["name"], shape=t["shape"], nbytes=t["nbytes"])
            for t in manifest.get("tensors", [])
        ],
    )
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None):
    # type: (Optional[Sequence[str]]) -> int
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except UsageError as exc:
        sys.stderr.write("mapgan {}: error: {}\n".format(args.command, exc))
        return EXIT_USAGE
    except (CheckpointIntegrityError, IOError, ValueError, ArithmeticError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
