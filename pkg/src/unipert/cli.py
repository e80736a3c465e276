"""Command-line interface: ``unipert {train,attack,eval,sweep,export}``.

Every run writes into ``--out``::

    config.echo      resolved configuration (JSON); replay with ``unipert --config <file>``
    checkpoints/     model weights
    perturbations/   universal perturbations
    reports/         CSV reports
    images/          PGM/PPM renderings of perturbations

Budgets (``--eps``) and step sizes (``--lr``, ``--delta-lr``) are given in the
pixel scale chosen with ``--pixels`` (255 by default) and stored in [0, 1] units.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import attacks, data, nn, report, serialize, training
from .attacks import IDeepFoolConfig, NormBall, UniversalAttackConfig

log = logging.getLogger("unipert")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ECHO_VERSION = 1
DEFAULT_ARCH = {"mnist": "lenet", "cifar10": "smallconv_cifar"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _float_or_inf(s):
    return math.inf if s.lower() in ("inf", "+inf", "infinity") else float(s)


def _float_list(s):
    return [_float_or_inf(v) for v in s.split(",") if v]


def _int_list(s):
    return [int(v) for v in s.split(",") if v]


def _schedule(s):
    out = []
    for part in s.split(","):
        step, lr = part.split(":")
        out.append((int(step), float(lr)))
    return out


def _common(p, data_flags=True):
    p.add_argument("--out", type=Path, default=None, help="output directory (default: runs/<subcommand>)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bit-exact replay")
    if data_flags:
        p.add_argument("--data", choices=["mnist", "cifar10"], default="mnist")
        p.add_argument("--data-dir", type=Path, default=None, help="dataset root (default: $UNIP_DATA_DIR)")
        p.add_argument("--arch", choices=sorted(nn.PRESETS), default=None)
        p.add_argument("--val-n", type=int, default=None, help="evaluate on the first N validation images")


def _budget(p):
    p.add_argument("--eps", type=float, default=None, help="budget in --pixels units (default 76.5/255)")
    p.add_argument("--pixels", type=int, choices=[1, 255], default=255)
    p.add_argument("--norm", choices=["inf", "2"], default="inf")


def _attack_flags(p):
    p.add_argument("--method", choices=["universal", "ideepfool"], default="universal")
    p.add_argument("--rule", choices=list(nn.RULES), default=None)
    p.add_argument("--lr", type=float, default=None, help="attack step size in --pixels units (default 1)")
    p.add_argument("--beta", type=_float_or_inf, default=None, help="loss clip (default 9; 'inf' disables)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--xi", type=float, default=None, help="ideepfool: stop at fooling ratio 1 - xi")
    p.add_argument("--max-passes", type=int, default=None, help="ideepfool: pass cap (default 10)")
    p.add_argument("--no-clamp", action="store_true", help="do not clamp perturbed images to [0, 1]")


def build_parser():
    parser = _Parser(prog="unipert", description="Universal adversarial perturbations and training.")
    parser.add_argument("--config", type=Path, help="replay a run from its config.echo")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", parser_class=_Parser)

    p = sub.add_parser("train", help="train a model, natural or adversarial (see --mode)")
    _common(p)
    _budget(p)
    p.add_argument("--mode", choices=list(training.MODES), default="natural")
    p.add_argument("--steps", type=int, default=6000)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr-schedule", type=_schedule, default=None, help="e.g. 0:0.05,4000:0.005")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--n", type=int, default=None, help="train on a random subset of N examples")
    p.add_argument("--delta-rule", choices=list(training.DELTA_RULES), default=None)
    p.add_argument("--delta-lr", type=float, default=None, help="in --pixels units (default 1)")
    p.add_argument("--pgd-steps", type=int, default=None)

    p = sub.add_parser("attack", help="craft a universal perturbation and evaluate it")
    _common(p)
    _budget(p)
    _attack_flags(p)
    p.add_argument("--n", type=int, default=5000, help="training examples used to craft the perturbation")
    p.add_argument("--checkpoint", type=Path, default=None, help="model weights; trains a natural model if absent")
    p.add_argument("--train-steps", type=int, default=6000, help="natural training steps when no checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint, clean and under perturbations")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--perturbation", type=Path, action="append", default=[])
    p.add_argument("--no-clamp", action="store_true")

    p = sub.add_parser("sweep", help="clipping or data-size ablation of the universal attack")
    _common(p)
    _budget(p)
    _attack_flags(p)
    p.add_argument("--kind", choices=["clipping", "data-size"], required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--betas", type=_float_list, default=None, help="clipping: e.g. 2.3,9,inf")
    p.add_argument("--seeds", type=_int_list, default=None, help="clipping: subset seeds")
    p.add_argument("--sizes", type=_int_list, default=None, help="data-size: ascending subset sizes")
    p.add_argument("--n", type=int, default=5000)

    p = sub.add_parser("export", help="render a perturbation as PGM/PPM")
    _common(p, data_flags=False)
    p.add_argument("--perturbation", type=Path, required=True)
    return parser


def _given(argv, *flags):
    """Flags present on the command line (argparse defaults cannot tell)."""
    return [f for f in flags if any(a == f or a.startswith(f + "=") for a in argv)]


def _validate(args, argv):
    sc = args.subcommand
    if sc in ("attack", "sweep"):
        if args.method == "universal":
            bad = _given(argv, "--xi", "--max-passes")
            if bad:
                raise UsageError(f"{bad[0]} applies only to --method ideepfool")
        else:
            bad = _given(argv, "--rule", "--lr", "--beta", "--batch-size")
            if bad:
                raise UsageError(f"{bad[0]} applies only to --method universal")
            if sc == "sweep":
                raise UsageError("--method ideepfool is not supported by sweep")
    if sc == "train":
        universal = args.mode in ("universal_alt", "universal_sim")
        for flag in _given(argv, "--delta-rule", "--delta-lr"):
            if not universal:
                raise UsageError(f"{flag} requires --mode universal_alt or universal_sim")
        if _given(argv, "--pgd-steps") and args.mode != "adv_pgd":
            raise UsageError("--pgd-steps requires --mode adv_pgd")
    if sc == "sweep":
        if args.kind == "clipping" and _given(argv, "--sizes"):
            raise UsageError("--sizes applies only to --kind data-size")
        if args.kind == "data-size" and _given(argv, "--betas"):
            raise UsageError("--betas applies only to --kind clipping")
    if getattr(args, "data", None) and args.arch is not None and args.arch != DEFAULT_ARCH[args.data]:
        raise UsageError(f"--arch {args.arch} does not fit --data {args.data}")
    eps = getattr(args, "eps", None)
    if eps is not None and eps < 0:
        raise UsageError("--eps must be non-negative")


def _resolve(args):
    """Fill pixel-scaled defaults; everything stored afterwards is in [0, 1] units."""
    if hasattr(args, "data"):
        args.arch = args.arch or DEFAULT_ARCH[args.data]
        args.data_dir = str(args.data_dir or data.default_data_dir())
    if hasattr(args, "pixels"):
        scale = float(args.pixels)
        args.eps_unit = (76.5 / 255) if args.eps is None else args.eps / scale
        if hasattr(args, "lr"):
            args.lr_unit = (1 / 255) if args.lr is None else args.lr / scale
        if hasattr(args, "delta_lr"):
            args.delta_lr_unit = (1 / 255) if args.delta_lr is None else args.delta_lr / scale
    args.out = str(args.out or Path("runs") / args.subcommand)
    for k, v in list(vars(args).items()):
        if isinstance(v, Path):
            setattr(args, k, str(v))
        elif isinstance(v, list) and any(isinstance(x, Path) for x in v):
            setattr(args, k, [str(x) for x in v])
    return args


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _out_dirs(out):
    out = Path(out)
    for d in ("checkpoints", "perturbations", "reports", "images"):
        (out / d).mkdir(parents=True, exist_ok=True)
    return out


def _echo(args, out):
    payload = {"version": ECHO_VERSION, "args": {k: v for k, v in vars(args).items() if k != "config"}}
    (out / "config.echo").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_split(args, split):
    if args.data == "mnist":
        ds = data.load_mnist_dir(args.data_dir, split)
    else:
        ds = data.load_cifar10(args.data_dir, split)
    if split == "val" and args.val_n is not None:
        ds = ds.take(np.arange(min(args.val_n, len(ds))))
    return ds


def _model(args):
    return nn.PRESETS[args.arch](args.seed)


def _ball(args):
    return NormBall("inf" if args.norm == "inf" else 2, args.eps_unit)


def _schedule_for(steps):
    return [(0, 0.05)] if steps < 3 else [(0, 0.05), (int(round(steps * 2 / 3)), 0.005)]


def _image_path(out, stem, delta):
    return out / "images" / (stem + (".pgm" if np.shape(delta)[0] == 1 else ".ppm"))


def _universal_cfg(args):
    return UniversalAttackConfig(
        ball=_ball(args), rule=args.rule or "sign", lr=args.lr_unit,
        beta=9.0 if args.beta is None else args.beta, epochs=args.epochs or 10,
        batch_size=args.batch_size, seed=args.seed, clamp_inputs=not args.no_clamp,
    )


def _ideepfool_cfg(args):
    return IDeepFoolConfig(
        ball=_ball(args), xi=0.2 if args.xi is None else args.xi,
        max_outer_passes=args.max_passes or args.epochs or 10, seed=args.seed,
        clamp_inputs=not args.no_clamp,
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args, out):
    train_ds = _load_split(args, "train")
    if args.n is not None:
        train_ds = data.subset(train_ds, args.n, args.seed)
    cfg = training.TrainConfig(
        total_steps=args.steps, batch_size=args.batch_size,
        lr_schedule=args.lr_schedule or _schedule_for(args.steps), momentum=args.momentum,
        seed=args.seed, mode=args.mode, delta_rule=args.delta_rule or "sign",
        delta_lr=args.delta_lr_unit, ball=_ball(args), pgd_steps=args.pgd_steps or 7,
    )
    model, pert, trace = training.train(_model(args), train_ds, cfg)
    serialize.save_model(out / "checkpoints" / "model.unip", model)
    trace.to_csv(out / "reports" / "train_trace.csv")
    rows = [report.evaluate(model, _load_split(args, "val"), model_id=args.mode, seed=args.seed, config=cfg,
                            wall_clock_s=trace.wall_clock_s)]
    if pert is not None:
        serialize.save_perturbation(out / "perturbations" / "train_delta.unip", pert.delta, pert.ball.p,
                                    pert.ball.eps)
    report.write_csv(rows, out / "reports" / "eval.csv")
    log.info("clean val accuracy %.4f", rows[0].accuracy)


def _natural_for_attack(args, out):
    if args.checkpoint:
        return serialize.load_model_into(args.checkpoint, _model(args))
    log.info("no --checkpoint; training a natural %s for %d steps", args.arch, args.train_steps)
    cfg = training.TrainConfig(total_steps=args.train_steps, lr_schedule=_schedule_for(args.train_steps),
                               seed=args.seed)
    model, _ = training.train_natural(_model(args), _load_split(args, "train"), cfg)
    serialize.save_model(out / "checkpoints" / "natural.unip", model)
    return model


def cmd_attack(args, out):
    model = _natural_for_attack(args, out)
    sub = data.subset(_load_split(args, "train"), args.n, args.seed)
    if args.method == "universal":
        cfg = _universal_cfg(args)
        state = attacks.universal_attack(model, sub, cfg)
    else:
        cfg = _ideepfool_cfg(args)
        state = attacks.ideepfool_universal(model, sub, cfg)
    val = _load_split(args, "val")
    name = args.method
    serialize.save_perturbation(out / "perturbations" / f"{name}.unip", state.delta, cfg.ball.p, cfg.ball.eps)
    with contextlib.suppress(ValueError):
        report.export_perturbation_image(state.delta, cfg.ball, _image_path(out, name, state.delta))
    rows = [
        report.evaluate(model, val, model_id=args.arch, seed=args.seed),
        report.evaluate(model, val, state, model_id=args.arch, attack_id=name, seed=args.seed,
                        clamp_inputs=cfg.clamp_inputs, config=cfg),
    ]
    report.write_csv(rows, out / "reports" / "eval.csv")
    with open(out / "reports" / "attack_trace.csv", "w", encoding="utf-8") as f:
        keys = list(state.trace[0]) if state.trace else []
        f.write(",".join(keys) + "\n")
        for r in state.trace:
            f.write(",".join(repr(r[k]) for k in keys) + "\n")
    log.info("clean %.4f attacked %.4f fooling %.4f", rows[0].accuracy, rows[1].accuracy, rows[1].fooling_ratio)


def cmd_eval(args, out):
    model = serialize.load_model_into(args.checkpoint, _model(args))
    val = _load_split(args, "val")
    rows = [report.evaluate(model, val, model_id=Path(args.checkpoint).stem, seed=args.seed)]
    for p in args.perturbation:
        delta, norm, eps = serialize.load_perturbation(p)
        rows.append(report.evaluate(model, val, delta, model_id=Path(args.checkpoint).stem,
                                    attack_id=Path(p).stem, seed=args.seed, clamp_inputs=not args.no_clamp))
    report.write_csv(rows, out / "reports" / "eval.csv")


def cmd_sweep(args, out):
    model = serialize.load_model_into(args.checkpoint, _model(args))
    train_ds, val = _load_split(args, "train"), _load_split(args, "val")
    base = _universal_cfg(args)
    if args.kind == "clipping":
        rows = report.sweep_clipping(model, train_ds, val, args.betas or [math.log(10), 9.0, math.inf],
                                     args.seeds or [0, 1, 2, 3, 4], n=args.n, base=base)
        key, name = "beta", "sweep_clipping"
    else:
        rows = report.sweep_data_size(model, train_ds, val, args.sizes or [500, 1000, 5000], seed=args.seed,
                                      base=base)
        key, name = "size", "sweep_data_size"
    report.write_csv(rows, out / "reports" / f"{name}.csv")
    report.write_csv(report.summarize(rows, key), out / "reports" / f"{name}_summary.csv")


def cmd_export(args, out):
    delta, p, eps = serialize.load_perturbation(args.perturbation)
    report.export_perturbation_image(delta, NormBall(p, eps), _image_path(out, Path(args.perturbation).stem, delta))


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "eval": cmd_eval, "sweep": cmd_sweep, "export": cmd_export}


def _replay(args, parser):
    payload = json.loads(Path(args.config).read_text())
    if payload.get("version") != ECHO_VERSION:
        raise UsageError(f"--config: unsupported echo version {payload.get('version')!r}")
    saved = dict(payload["args"])
    if args.out is not None:
        saved["out"] = str(args.out)
    saved["config"] = None
    if saved.get("lr_schedule") is not None:
        saved["lr_schedule"] = [tuple(x) for x in saved["lr_schedule"]]
    return argparse.Namespace(**saved)


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        # `--out` is accepted next to `--config` for replays into a fresh directory
        pre = _Parser(add_help=False)
        pre.add_argument("--config", type=Path)
        pre.add_argument("--out", type=Path)
        known, rest = pre.parse_known_args(argv)
        if known.config is not None:
            if rest and rest != ["-v"] and rest != ["--verbose"]:
                raise UsageError(f"--config cannot be combined with {rest[0]}")
            args = _replay(known, parser)
        else:
            args = parser.parse_args(argv)
            if args.subcommand is None:
                parser.print_usage(sys.stderr)
                raise UsageError("unipert: a subcommand is required")
            _validate(args, argv)
            args = _resolve(args)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    out = _out_dirs(args.out)
    _echo(args, out)
    limits = contextlib.nullcontext()
    if args.deterministic:
        from threadpoolctl import threadpool_limits

        limits = threadpool_limits(limits=1)
    try:
        with limits:
            COMMANDS[args.subcommand](args, out)
    except (data.DataError, serialize.CheckpointError, nn.ShapeError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except nn.NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
