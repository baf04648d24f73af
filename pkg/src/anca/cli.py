"""Command-line entry point: ``anca <command> [options]``.

Failures exit with status 1 (2 for usage errors) and print exactly one line
to stderr of the form ``anca-error category=<name> message=<json string>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from anca.checkpoint import Checkpoint
from anca.config import PRESETS, TrainConfig, preset
from anca.errors import AncaError, ConfigError

log = logging.getLogger("anca")


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_config(args) -> TrainConfig:
    """``--config`` names a file or a preset; ``--set`` and ``--seed`` apply on top."""
    src = getattr(args, "config", None)
    if src is None:
        config = TrainConfig()
    elif src in PRESETS and not Path(src).is_file():
        config = preset(src)
    else:
        config = TrainConfig.load(src)
    config = config.with_overrides(_overrides(getattr(args, "set", None)))
    if getattr(args, "seed", None) is not None:
        config = config.replace(seed=args.seed)
    return config


def _need(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise ConfigError(f"--{name} is required for {args.command}")


def cmd_train(args) -> None:
    from anca.harness import train

    _need(args, "data", "out")
    config = resolve_config(args)
    resume = Checkpoint.load(args.checkpoint) if args.checkpoint else None
    fold = args.fold if args.fold is not None else (resume.fold if resume else 0)
    res = train(config, args.data, fold, args.out, resume=resume)
    print(f"fold {fold}: val accuracy {res.val.accuracy:.4f} balanced {res.val.balanced_accuracy:.4f}")


def cmd_eval(args) -> None:
    from anca.harness import evaluate

    _need(args, "checkpoint", "data")
    res = evaluate(args.checkpoint, args.data, args.split, args.out)
    m = res.metrics
    print(f"split {args.split}: loss {res.loss:.6f} accuracy {m.accuracy:.4f} "
          f"balanced {m.balanced_accuracy:.4f} recall {' '.join('-' if r is None else f'{r:.4f}' for r in m.per_class_recall)}")


def cmd_cv(args) -> None:
    from anca.harness import run_cv

    _need(args, "data")
    res = run_cv(resolve_config(args), args.data, args.out, jobs=args.jobs)
    for f in res.folds:
        print(f"fold {f.fold}: {f.accuracy:.4f}")
    print(f"accuracy {res.summary()} balanced {res.summary(balanced=True)} params {res.params}")


def cmd_ablate(args) -> None:
    from anca.harness import run_ablation

    _need(args, "data")
    rows = run_ablation(resolve_config(args), args.data, args.out, include_full=args.include_full, jobs=args.jobs)
    for r in rows:
        print(f"{r.variant}: {r.cv.summary()} params {r.params}")


def cmd_export_attention(args) -> None:
    from anca.export import export_attention

    _need(args, "checkpoint", "image", "out")
    res = export_attention(args.checkpoint, args.image, args.out)
    print(" ".join(str(p) for p in res.paths.values()))


def cmd_export_trajectory(args) -> None:
    from anca.export import export_trajectory

    _need(args, "checkpoint", "image", "out")
    paths = export_trajectory(args.checkpoint, args.image, args.out)
    print(f"wrote {len(paths)} frames to {args.out}")


def cmd_gradcheck(args) -> None:
    from anca.gradcheck import model_grad_check
    from anca.model import Architecture

    arch = Architecture(args.channels, args.hidden, args.classes, args.grid, args.pool_mode, args.top_fraction)
    res = model_grad_check(arch, steps=args.steps, seed=args.seed or 0, n_coords=args.coords, eps=args.eps)
    print(f"max_rel_error {res.max_rel_error:.3e} checked {res.checked} skipped {res.skipped}")
    if res.max_rel_error > args.tolerance:
        raise ConfigError(f"gradient check failed: {res.max_rel_error:.3e} > {args.tolerance:g} at {res.worst}")


def cmd_stats(args) -> None:
    from anca.data import compute_mean_std, split_hash, write_stats
    from anca.harness import load_dataset

    _need(args, "data")
    config = resolve_config(args)
    index = load_dataset(args.data, config)
    train_idx, _ = index.split(args.fold or 0)
    mean, std = compute_mean_std(index, train_idx, config.input_size)
    h = split_hash(index, train_idx)
    if args.out:
        write_stats(args.out, mean, std, h)
    print("mean " + " ".join(f"{v:.9g}" for v in mean))
    print("std " + " ".join(f"{v:.9g}" for v in std))
    print(f"split {h}")


def cmd_toy(args) -> None:
    from anca.toy import generate

    _need(args, "out")
    root = generate(args.out, per_class=args.per_class, size=args.size, seed=args.seed or 0)
    print(f"wrote {2 * args.per_class} images to {root}")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # keep stderr to the single machine-readable line
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="config file, or a preset name: " + ", ".join(PRESETS))
    common.add_argument("--data", help="class-per-directory root or CSV manifest")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--seed", type=int)
    common.add_argument("--checkpoint")
    common.add_argument("--fold", type=int)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="anca", description="Attention-pooled neural cellular automata classifier")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", parents=[common], help="train one fold (resume with --checkpoint)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    sp.add_argument("--split", default="val", choices=("val", "train", "all"))
    sp.set_defaults(func=cmd_eval)

    for name, func, doc in (("cv", cmd_cv, "k-fold cross-validation"),
                            ("ablate", cmd_ablate, "pooling ablation sweep")):
        sp = sub.add_parser(name, parents=[common], help=doc)
        sp.add_argument("--jobs", type=int, default=1, help="folds trained in parallel processes")
        if name == "ablate":
            sp.add_argument("--include-full", action="store_true", help="add a q=1 debug variant")
        sp.set_defaults(func=func)

    sp = sub.add_parser("export-attention", parents=[common], help="attention gate as PGM")
    sp.add_argument("--image", required=True)
    sp.set_defaults(func=cmd_export_attention)

    sp = sub.add_parser("export-trajectory", parents=[common], help="NCA states as PPM frames")
    sp.add_argument("--image", required=True)
    sp.set_defaults(func=cmd_export_trajectory)

    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    sp.add_argument("--grid", type=int, default=8)
    sp.add_argument("--channels", type=int, default=8)
    sp.add_argument("--hidden", type=int, default=8)
    sp.add_argument("--steps", type=int, default=4)
    sp.add_argument("--classes", type=int, default=3)
    sp.add_argument("--pool-mode", default="attention")
    sp.add_argument("--top-fraction", type=float, default=0.25)
    sp.add_argument("--coords", type=int, default=200)
    sp.add_argument("--eps", type=float, default=1e-3)
    sp.add_argument("--tolerance", type=float, default=1e-3)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("stats", parents=[common], help="training-split channel mean and std")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("toy", parents=[common], help="generate the synthetic disk/bar dataset")
    sp.add_argument("--per-class", type=int, default=200)
    sp.add_argument("--size", type=int, default=32)
    sp.set_defaults(func=cmd_toy)
    return p


def _fail(category: str, message: str) -> None:
    print(f"anca-error category={category} message={json.dumps(message)}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        _fail("usage", str(e))
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except AncaError as e:
        _fail(e.category, str(e))
        return 1
    except OSError as e:
        _fail("io", str(e))
        return 1
    except KeyboardInterrupt:
        _fail("interrupted", "interrupted")
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
