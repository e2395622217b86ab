"""The ``mlip`` command line.

Exit status: 0 on success, 1 when validation fails (bad config, dataset or
checkpoint, failed gradient check), 2 on usage errors.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .bench import bench, observed_token_counts
from .checkpoint import CheckpointError, load_checkpoint
from .config import LOSS_NAMES, ConfigError, load_config
from .data import DatasetError, gen_synthetic_dataset, generate_pairs, load_dataset
from .evaluate import evaluate
from .model import ModelInputError, gradcheck_model
from .train import NonFiniteLossError, train

VALIDATION_ERRORS = (ConfigError, DatasetError, CheckpointError, ModelInputError, NonFiniteLossError)


def _threads() -> int:
    raw = os.environ.get("MLIP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MLIP_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("MLIP_THREADS must be at least 1")
    return n


def cmd_gen_data(args) -> int:
    pairs = gen_synthetic_dataset(args.n, args.seed, args.out)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.disable:
        cfg.loss.disable = tuple(dict.fromkeys(cfg.loss.disable + tuple(args.disable)))
        cfg.validate()
    if cfg.data.dir:
        pairs = load_dataset(cfg.data.dir)
    else:
        pairs = generate_pairs(cfg.data.n, cfg.data.seed, size=cfg.model.image_size)
    result = train(cfg, pairs, args.seed, args.out)
    means = result.epoch_means
    print(f"steps={len(result.metrics)} epoch1_mean={means[0]:.6f} final_mean={means[-1]:.6f}")
    print(f"checkpoint={Path(args.out) / 'final.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    report = evaluate(state, load_dataset(args.data))
    print("\n".join(report.lines()))
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config).model
    report = bench(cfg)
    print("\n".join(report.lines()))
    observed = observed_token_counts(cfg)
    if observed != report.token_counts:
        print(f"forward pass token counts {observed} disagree with accounting {report.token_counts}")
        return 1
    print("forward_pass_tokens=" + ",".join(map(str, observed)))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    report = gradcheck_model(cfg, args.seed, tok_spa_strategy=cfg.loss.tok_spa_strategy)
    print(report.summary())
    if not report.passed:
        names = ", ".join(p.name for p in report.failures)
        print(f"FAIL: gradient mismatch in {names}")
        return 1
    print("PASS")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlip", description="Image-text dual encoder with spectral and spatial token alignment, at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic image-caption dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write checkpoints plus metrics.log")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--disable", action="append", choices=LOSS_NAMES, default=[])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval recall and shape classification")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="multiply-accumulate accounting with and without merging")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
