"""Command-line entry point.

Exit status: 0 on success, 1 when a contract, format or file error stops the
run, 2 on a usage error (bad verb, flag or flag value).
"""

from __future__ import annotations

import argparse
import os
import sys

from . import config as config_mod
from .backbone import read_checkpoint
from .errors import ConfigError, ContractError, FormatError, NumericError, ShapeError
from .runs import ABLATION_KINDS, run_ablation, run_analyze, run_distill, run_finetune

EXIT_OK, EXIT_CONTRACT, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="vexpert", allow_abbrev=False, description="Mixture-of-experts vision backbone experiments.",
                epilog="Any config key can be overridden as --section.key VALUE, e.g. --distill.steps 500.")
    sub = p.add_subparsers(dest="verb", required=True,
                           parser_class=lambda **kw: _Parser(allow_abbrev=False, **kw))

    def common(sp):
        sp.add_argument("--config", help="experiment config file (sectioned key = value)")
        sp.add_argument("--seed", type=int, help="overrides run.seed")

    common(sub.add_parser("distill", help="distil the synthetic teachers into a fresh model"))
    sp = sub.add_parser("finetune", help="train a robot router and policy head on a distilled model")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="distilled checkpoint")
    sp = sub.add_parser("ablate", help="run an ablation grid over seeds")
    common(sp)
    sp.add_argument("--kind", required=True, choices=ABLATION_KINDS)
    sp.add_argument("--checkpoint", required=True, help="distilled checkpoint")
    sp = sub.add_parser("analyze", help="write utilization, norm and MI maps for a finetuned checkpoint "
                                        "(its config.ini is used unless --config is given)")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="checkpoint written by finetune")
    sp = sub.add_parser("inspect-checkpoint", help="list the tensors stored in a checkpoint")
    sp.add_argument("path")
    return p


def _dotted_overrides(extra):
    """``["--a.b", "1", "--c.d=x"]`` -> ``{"a.b": "1", "c.d": "x"}``."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        name, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"flag --{name} needs a value")
            value = extra[i + 1]
            i += 1
        out[name] = value
        i += 1
    return out


def resolve_config(args, extra):
    path = args.config
    if path is None and args.verb == "analyze":
        # finetune writes the config it ran with next to its checkpoint
        sibling = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "config.ini")
        path = sibling if os.path.exists(sibling) else None
    cfg = config_mod.load(path) if path else config_mod.defaults()
    overrides = _dotted_overrides(extra)
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if overrides:
        mapping = {k: config_mod.format_value(v) for k, v in config_mod.to_mapping(cfg).items()}
        try:
            cfg = config_mod.from_mapping({**mapping, **overrides})
        except ConfigError as exc:
            if exc.field in overrides:
                raise UsageError(f"--{exc}") from None
            raise
    return cfg


def _inspect(path):
    state = read_checkpoint(path)
    total = 0
    for name, arr in state.items():
        print(f"{name}\t{'x'.join(map(str, arr.shape)) or 'scalar'}")
        total += arr.size
    print(f"{len(state)} tensors, {total} parameters")


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = build_parser().parse_known_args(argv)
        if args.verb == "inspect-checkpoint":
            if extra:
                raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
            _inspect(args.path)
            return EXIT_OK
        cfg = resolve_config(args, extra)
        if args.verb == "distill":
            res = run_distill(cfg)
            for i, (a, b) in enumerate(zip(res.initial["cos"], res.final["cos"])):
                print(f"teacher {i}: cosine loss {a:.4f} -> {b:.4f}")
            print(f"mi loss {res.initial['mi']:.4f} -> {res.final['mi']:.4f}")
            _print_paths(res.paths)
        elif args.verb == "finetune":
            res = run_finetune(cfg, args.checkpoint)
            print(f"{res.run.strategy.label}: success rate {res.success:.3f}")
            if res.run.strategy.kind in ("ftr", "ltr"):
                print("teacher selection per layer: " + "; ".join(
                    " ".join(f"{x:.2f}" for x in row) for row in res.teacher_freq))
            _print_paths(res.paths)
        elif args.verb == "ablate":
            for row in run_ablation(cfg, args.kind, args.checkpoint):
                print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
        elif args.verb == "analyze":
            _print_paths(run_analyze(cfg, args.checkpoint))
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, FormatError, ShapeError, NumericError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


def _print_paths(paths):
    for key, path in paths.items():
        print(f"{key}: {path}")


if __name__ == "__main__":
    sys.exit(main())
