"""
Точка входа CLI: python -m app.main {pretrain|train|sample|eval|oracle} ...
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import torch

from app.config import settings
from app.exceptions import R0Error
from app.handlers.command_handlers import command_handler
from app.services.config_service import load_run_config

# Настройка логирования
logging.basicConfig(level=settings.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="r0-desk", description="Reward-maximization training of few-step generators")
    commands = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("pretrain", "train the unconditional, conditional and smoothed-data denoisers"),
        ("train", "run R0 / R0+ from pretrained checkpoints"),
        ("oracle", "grid-search the common mode of the configured rewards"),
    ):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", type=Path, required=True, help="run configuration file")
        sub.add_argument("--seed", type=int, default=None, help="override the configured seed")
        sub.add_argument("--out", type=str, default=None, help="override the output directory")

    sample = commands.add_parser("sample", help="draw samples from a checkpoint")
    sample.add_argument("--checkpoint", type=Path, required=True, help="generator checkpoint")
    sample.add_argument("--count", type=int, default=1000, help="number of samples")
    sample.add_argument("--eta", type=float, default=1.0, help="fixed eta in [0, 1]; 1 is the DDIM sampler")
    sample.add_argument("--seed", type=int, default=0, help="random seed")
    sample.add_argument("--out", type=str, default="samples", help="output directory")
    sample.add_argument("--class-id", type=int, default=None, help="condition class for conditional nets")
    sample.add_argument("--trajectory", action="store_true", help="also dump the full trajectory")

    evaluate = commands.add_parser("eval", help="score a samples file against the configured rewards")
    evaluate.add_argument("--samples", type=Path, required=True, help="samples CSV")
    evaluate.add_argument("--config", type=Path, required=True, help="run configuration file")
    evaluate.add_argument("--seed", type=int, default=None, help="override the configured seed")
    evaluate.add_argument("--out", type=str, default=None, help="override the output directory")
    return parser


def configure_torch() -> None:
    torch.set_num_threads(settings.torch_threads)
    torch.use_deterministic_algorithms(True)
    torch.set_default_dtype(torch.float64)


def run(args: argparse.Namespace):
    if args.command == "sample":
        return command_handler.cmd_sample(args.checkpoint, args.count, args.eta, args.seed, args.out,
                                          trajectory=args.trajectory, class_id=args.class_id)
    config = load_run_config(args.config, seed=args.seed, out=args.out)
    if args.command == "pretrain":
        return command_handler.cmd_pretrain(config)
    if args.command == "train":
        return command_handler.cmd_train(config)
    if args.command == "eval":
        return command_handler.cmd_eval(args.samples, config)
    return command_handler.cmd_oracle(config)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_torch()
    logger.info(f"Starting {settings.service_name} {settings.service_version}: {args.command}")
    try:
        artifacts = run(args)
    except R0Error as exc:
        logger.error(f"{args.command} failed [{exc.code}]: {exc.detail}")
        return exc.exit_code
    except Exception:
        logger.exception(f"{args.command} failed with an unexpected error")
        return 1
    for name, path in artifacts.items():
        logger.info(f"  {name}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
