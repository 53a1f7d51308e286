"""Command-line surface.

Every subcommand prints a single-line JSON summary to stdout and keeps
human-readable progress on stderr. Exit codes: 0 success, 2 usage,
3 config/contract, 4 numeric failure, 5 checkpoint format/load,
6 oracle inconsistency, 1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import tensor as T
from .data import gen_corpus, save_corpus
from .encoder import encoder_forward
from .errors import (
    CheckpointCorruptionError,
    CheckpointFormatError,
    CheckpointLoadError,
    ConfigError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    NumericError,
    OracleError,
)
from .objectives import mask_regions, mask_text_tokens
from .training import (
    TrainConfig,
    build_model,
    evaluate,
    extract_architecture,
    flops_report,
    load_checkpoint,
    train,
    _pretrain_losses,
)

_CONFIG_FLAGS = [
    ("--seed", int, "seed"),
    ("--steps", int, "steps"),
    ("--batch", int, "batch_size"),
    ("--layers", int, "n_layers"),
    ("--dim", int, "dim"),
    ("--heads", int, "n_heads"),
    ("--ffn", int, "d_ffn"),
    ("--lr", float, "lr"),
    ("--tau0", float, "tau0"),
    ("--tau-min", float, "tau_min"),
    ("--decay", float, "decay"),
    ("--topk", int, "topk"),
    ("--n-img", int, "n_img"),
    ("--n-txt", int, "n_txt"),
    ("--vocab", int, "vocab"),
    ("--k-min", int, "k_min"),
    ("--k-max", int, "k_max"),
    ("--corpus", str, "corpus_path"),
    ("--corpus-size", int, "corpus_size"),
    ("--corpus-seed", int, "corpus_seed"),
    ("--eval-size", int, "eval_size"),
    ("--ckpt", str, "ckpt_path"),
    ("--trace", str, "trace_path"),
    ("--force-route", str, "force_route"),
    ("--init-from", str, "init_from"),
    ("--log-every", int, "log_every"),
]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None,
                        help="JSON file with TrainConfig fields")
    for flag, typ, dest in _CONFIG_FLAGS:
        parser.add_argument(flag, type=typ, dest=dest, default=None)
    parser.add_argument("--dtype", choices=("f32", "f64"), dest="dtype", default=None)
    parser.add_argument("--modes", type=str, dest="modes", default=None,
                        help="comma-separated allowed attention modes, e.g. 1,2")


def _config_from_args(args, **overrides) -> TrainConfig:
    base = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            base = json.load(fh)
    cfg = TrainConfig.from_dict(base) if base else TrainConfig()
    for _, _, dest in _CONFIG_FLAGS:
        value = getattr(args, dest, None)
        if value is not None:
            setattr(cfg, dest, value)
    if getattr(args, "dtype", None):
        cfg.dtype = args.dtype
    if getattr(args, "modes", None):
        cfg.allowed_modes = tuple(int(v) for v in args.modes.split(","))
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg.validate()


def _emit(payload: dict) -> None:
    print(json.dumps(payload))


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_gen_data(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.corpus_path:
        raise ConfigError("gen-data needs --corpus PATH to write to")
    corpus = gen_corpus(cfg.corpus_size, cfg.corpus_config(), seed=cfg.corpus_seed)
    save_corpus(corpus, cfg.corpus_path)
    _emit({"command": "gen-data", "samples": len(corpus), "path": cfg.corpus_path,
           "seed": cfg.corpus_seed})
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config_from_args(args, task="pretrain")
    summary = train(cfg, log=_log)
    _emit({"command": "pretrain", **summary})
    return 0


def cmd_finetune(args) -> int:
    cfg = _config_from_args(args, task="fourway")
    summary = train(cfg, log=_log)
    _emit({"command": "finetune", **summary})
    return 0


def cmd_eval(args) -> int:
    metrics = evaluate(args.ckpt_path, task=args.task, n_groups=args.groups,
                       seed=args.eval_seed, trace_path=args.trace_path,
                       soft_tau=args.soft_tau, log=_log)
    _emit({"command": "eval", "ckpt": args.ckpt_path, **metrics})
    return 0


def cmd_extract_arch(args) -> int:
    report = extract_architecture(args.trace_path)
    top = args.top if args.top else len(report["paths"])
    _emit({"command": "extract-arch", "trace": args.trace_path,
           "complete_samples": report["complete_samples"],
           "skipped_incomplete": report["skipped_incomplete"],
           "paths": report["paths"][:top]})
    return 0


def cmd_flops(args) -> int:
    cfg = _config_from_args(args)
    _emit({"command": "flops", **flops_report(cfg)})
    return 0


def cmd_gradcheck(args) -> int:
    """Backward vs central differences on the full pretraining loss of a
    tiny double-precision model."""
    cfg = _config_from_args(
        args, task="pretrain", dtype="f64", n_layers=2, dim=16, n_heads=2,
        d_ffn=32, n_img=4, n_txt=9, vocab=40, d_visual=8, n_classes=6,
        k_min=2, k_max=2, corpus_size=8, corpus_path=None)
    state = build_model(cfg)
    corpus = gen_corpus(4, cfg.corpus_config(), seed=cfg.corpus_seed)
    from .data import samples_to_batch
    batch = samples_to_batch(list(corpus.samples)[:2])
    force = cfg.forced_routes()

    def objective(store):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
        loss, _, _ = _pretrain_losses(state, batch, rng, tau=0.9, mode="train",
                                      force=force, noise_rng=rng)
        return loss

    state.params.store.zero_grad()
    T.backward(objective(state.params.store))
    numeric = T.finite_diff_grad(lambda p: objective(p).item(),
                                 state.params.store, step=args.step)
    worst = 0.0
    worst_name = ""
    for name, t in state.params.store.items():
        got = t.grad if t.grad is not None else np.zeros_like(t.data)
        ref = numeric[name]
        denom = max(np.abs(got).max(initial=0.0), np.abs(ref).max(initial=0.0), 1e-3)
        err = float(np.abs(got - ref).max() / denom)
        if err > worst:
            worst, worst_name = err, name
    passed = worst < args.threshold
    _emit({"command": "gradcheck", "max_rel_err": worst, "worst_param": worst_name,
           "threshold": args.threshold, "pass": passed,
           "n_params": sum(t.data.size for t in state.params.store.tensors())})
    return 0 if passed else 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="switchformer",
        description="Train and analyze the mode/input-switching multimodal encoder")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and write a synthetic corpus")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run the three-objective pretraining task")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train the 4-way matching task")
    _add_config_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="hard-selection evaluation of a checkpoint")
    p.add_argument("--ckpt", dest="ckpt_path", required=True)
    p.add_argument("--task", choices=("pretrain", "fourway"), default=None)
    p.add_argument("--groups", type=int, default=2000)
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--trace", dest="trace_path", default=None)
    p.add_argument("--soft-tau", dest="soft_tau", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract-arch", help="rank route paths in a trace file")
    p.add_argument("--trace", dest="trace_path", required=True)
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_extract_arch)

    p = sub.add_parser("flops", help="matmul cost model for the configured encoder")
    _add_config_flags(p)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", help="verify backward against finite differences")
    _add_config_flags(p)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


_EXIT_CODES = [
    ((ConfigError, ContractError, DimensionError, DegenerateInputError), 3),
    ((NumericError,), 4),
    ((CheckpointFormatError, CheckpointCorruptionError, CheckpointLoadError,
      FileNotFoundError), 5),
    ((OracleError,), 6),
]


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # categorize into stable exit codes
        for types, code in _EXIT_CODES:
            if isinstance(exc, types):
                _log(f"error: {exc}")
                return code
        _log(f"unexpected error: {exc.__class__.__name__}: {exc}")
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
