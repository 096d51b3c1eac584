"""Command-line front end for the hive-plot DDoS pipeline.

    hive3d gen --n 200 --out data
    hive3d render --data data
    hive3d train --data data --regime clean --out clean.hgc
    hive3d eval --data data --model clean.hgc
    hive3d cost --fp 25 --fn 10

Options may also come from a ``key = value`` file passed with ``--config``;
explicit flags win over the file. Exit codes: 2 usage, 3 IO, 4 numeric,
5 configuration, 6 integrity/format, 1 other pipeline errors.
"""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from hive3d import attacks, evaluator, flowsim, hiveplot, store, trainer
from hive3d.errors import ConfigError, FormatError, Hive3DError, NumericError

log = logging.getLogger("hive3d")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_CONFIG, EXIT_INTEGRITY = 0, 1, 2, 3, 4, 5, 6

DESK_N = 200
DESK_LR = 2.5e-4
DESK_MAX_EPOCHS = 40


def _add_data(p, model=False):
    p.add_argument("--data", default="data", help="dataset directory (default: data)")
    p.add_argument("--split", default="val", choices=("train", "val"))
    if model:
        p.add_argument("--model", required=True, help="checkpoint file")


def _add_attack_opts(p):
    p.add_argument("--eps-scale", type=float, default=attacks.EPS_SCALE,
                   help="divide the reference epsilons/step by this (1 = unscaled)")
    p.add_argument("--pgd-steps", type=int, default=attacks.REFERENCE_PGD.steps)
    p.add_argument("--batch-size", type=int, default=16)


def build_parser():
    parser = argparse.ArgumentParser(prog="hive3d", description="Hive-plot 3D-CNN DDoS detection pipeline")
    parser.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    parser.add_argument("--workers", type=int, default=1, help="parallel workers for sample preparation")
    parser.add_argument("--config", help="key = value file with option defaults")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic traces and a manifest")
    p.add_argument("--n", type=int, default=DESK_N, help="traces per class")
    p.add_argument("--out", default="data")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--onset-min", type=float, default=0.1)
    p.add_argument("--onset-max", type=float, default=0.9)
    p.add_argument("--normal-rate", type=float, default=flowsim.TraceConfig.normal_rate)
    p.add_argument("--attack-rate", type=float, default=flowsim.TraceConfig.attack_rate)

    p = sub.add_parser("render", help="render traces to preprocessed tensors")
    p.add_argument("--data", default="data")
    p.add_argument("--pgm", type=int, default=0, help="also write this many PGM previews per class")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", default="data")
    p.add_argument("--regime", choices=(trainer.CLEAN, trainer.ADVERSARIAL), default=trainer.CLEAN)
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--log", help="training log path (default: <out>.log)")
    p.add_argument("--lr", type=float, default=DESK_LR)
    p.add_argument("--epochs", type=int, default=DESK_MAX_EPOCHS, help="maximum epochs")
    _add_attack_opts(p)

    p = sub.add_parser("attack", help="write perturbed or augmented copies of a split")
    _add_data(p, model=True)
    p.add_argument("--method", choices=("fgsm", "pgd", "augment"), required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_attack_opts(p)

    for name, text in (("eval", "evaluate under clean/augmented/PGD/FGSM"),
                       ("framewise", "single-frame accuracy table"),
                       ("earlyexit", "prefix early-exit statistics")):
        p = sub.add_parser(name, help=text)
        _add_data(p, model=True)
        _add_attack_opts(p)
        p.add_argument("--out", help="write the text output here as well")
        if name == "eval":
            p.add_argument("--records", help="machine-readable records file")
            p.add_argument("--roc", help="ROC point dump file")
        if name == "earlyexit":
            p.add_argument("--threshold", type=float, default=0.9)

    p = sub.add_parser("cost", help="operational cost of FP/FN counts")
    p.add_argument("--fp", type=int, required=True)
    p.add_argument("--fn", type=int, required=True)
    p.add_argument("--cfp", type=float, default=evaluator.C_FP, help="dollars per false positive")
    p.add_argument("--cfn", type=float, default=evaluator.C_FN, help="dollars per false negative")

    p = sub.add_parser("report", help="full comparison of a clean and an adversarially trained model")
    _add_data(p)
    p.add_argument("--clean", required=True, help="clean-trained checkpoint")
    p.add_argument("--adversarial", required=True, help="adversarially trained checkpoint")
    p.add_argument("--out", default="report", help="output directory")
    p.add_argument("--threshold", type=float, default=0.9)
    _add_attack_opts(p)
    return parser


def read_config_file(path):
    """Parse ``key = value`` lines; '#' starts a comment."""
    values = {}
    text = Path(path).read_text(encoding="utf-8")
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config(parser, argv, values):
    """Use file values as defaults for the chosen subcommand (and global options)."""
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((a for a in argv if a in subparsers.choices), None)
    targets = [parser] + ([subparsers.choices[command]] if command else [])
    known = {}
    for target in targets:
        for action in target._actions:
            if action.dest not in ("help", "config", "command"):
                known[action.dest] = (target, action)
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} for command {command!r}")
        target, action = known[key]
        try:
            value = action.type(raw) if action.type else raw
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
        target.set_defaults(**{key: value})
        action.required = False


def _attack_settings(args):
    scale = args.eps_scale
    if not scale > 0:
        raise ConfigError("--eps-scale must be positive")
    fgsm = attacks.REFERENCE_FGSM.scaled(scale)
    pgd = replace(attacks.REFERENCE_PGD.scaled(scale), steps=args.pgd_steps)
    return evaluator.EvalSettings(fgsm=fgsm, pgd=pgd, augment=replace(attacks.AugmentConfig(), seed=args.seed),
                                  seed=args.seed, batch_size=args.batch_size)


def _load_split(args):
    x, y, names = store.load_split(args.data, args.split)
    if len(x) == 0:
        raise FileNotFoundError(f"no preprocessed samples in {args.data}/preprocessed/{args.split}; run 'render' first")
    return x, y, names


def _emit(text, out=None):
    sys.stdout.write(text)
    if out:
        flowsim.atomic_write_bytes(out, text.encode())


def cmd_gen(args):
    base = flowsim.TraceConfig(seed=args.seed, normal_rate=args.normal_rate, attack_rate=args.attack_rate)
    manifest = flowsim.generate_dataset(args.n, base, args.train_fraction, (args.onset_min, args.onset_max))
    path = flowsim.write_dataset(manifest, args.out)
    print(f"wrote {len(manifest.entries)} traces, manifest {path}")


def cmd_render(args):
    manifest = Path(args.data) / "manifest.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"missing manifest {manifest}")
    res = store.preprocess_dataset(manifest, out_dir=args.data, workers=args.workers)
    print(f"rendered {len(res.written)}, unchanged {len(res.skipped)}, failed {len(res.errors)}")
    if args.pgm:
        for split in ("train", "val"):
            x, y, names = store.load_split(args.data, split)
            for cls in (0, 1):
                for i in np.flatnonzero(y == cls)[: args.pgm]:
                    hiveplot.write_pgm(x[i, 0], Path(args.data) / "preview" / split / f"{names[i].replace('/', '_')}.pgm")
    if res.errors:
        raise OSError(f"{len(res.errors)} traces could not be rendered")


def cmd_train(args):
    settings = _attack_settings(args)
    cfg = trainer.TrainConfig(regime=args.regime, lr=args.lr, max_epochs=args.epochs, batch_size=args.batch_size,
                              fgsm=settings.fgsm, pgd=settings.pgd, augment=settings.augment, seed=args.seed)
    cfg.validate()
    tr = store.load_split(args.data, "train")[:2]
    va = store.load_split(args.data, "val")[:2]
    if len(tr[0]) == 0 or len(va[0]) == 0:
        raise ConfigError("train and val splits must be non-empty (run 'gen' and 'render' first)")
    log_path = args.log or str(Path(args.out).with_suffix(".log"))
    lines = []

    def on_epoch(entry):
        lines.append(entry)
        flowsim.atomic_write_bytes(log_path, trainer.format_log(cfg, lines).encode())

    res = trainer.train(tr, va, cfg, on_epoch=on_epoch)
    store.save_checkpoint(res.params, args.out)
    print(f"best epoch {res.best_epoch} of {len(res.epochs)}; checkpoint {args.out}; log {log_path}")


def cmd_attack(args):
    settings = _attack_settings(args)
    params = store.load_checkpoint(args.model)
    x, y, names = _load_split(args)
    rng = np.random.default_rng(args.seed)
    cond = {"fgsm": "FGSM", "pgd": "PGD", "augment": "Augmented"}[args.method]
    xa = evaluator.perturb(params, x, y, cond, settings, rng)
    for xi, name in zip(xa, names):
        store.save_tensor(xi, Path(args.out) / f"{name}.hgt")
    linf = float(np.max(np.abs(xa.astype(np.float64) - x)))
    print(f"{args.method}: wrote {len(xa)} tensors to {args.out}; max |x_adv - x| = {linf:.6f}")


def cmd_eval(args):
    settings = _attack_settings(args)
    params = store.load_checkpoint(args.model)
    x, y, _ = _load_split(args)
    rep = evaluator.evaluate(params, x, y, settings, name=Path(args.model).stem, with_framewise=False, threshold=None)
    _emit(evaluator.format_tables(rep), args.out)
    if args.records:
        flowsim.atomic_write_bytes(args.records, evaluator.format_records(rep).encode())
    if args.roc:
        flowsim.atomic_write_bytes(args.roc, evaluator.format_roc(rep).encode())


def cmd_framewise(args):
    settings = _attack_settings(args)
    params = store.load_checkpoint(args.model)
    x, y, _ = _load_split(args)
    table = evaluator.framewise(params, x, y, settings)
    depth = len(next(iter(table.values())))
    lines = ["Condition   " + "  ".join(f"t{t:<5}" for t in range(depth))]
    lines += [f"{c:<11} " + "  ".join(f"{a:.4f}" for a in row) for c, row in table.items()]
    _emit("\n".join(lines) + "\n", args.out)


def cmd_earlyexit(args):
    settings = _attack_settings(args)
    params = store.load_checkpoint(args.model)
    x, y, _ = _load_split(args)
    e = evaluator.early_exit_batch(params, x, y, args.threshold, settings.batch_size)
    _emit(
        f"threshold {e.threshold:g}: accuracy {e.accuracy:.4f}, detection rate {e.detection_rate:.4f}, "
        f"mean exit frame {e.mean_exit_frame:.3f}, full-sequence accuracy {e.full_accuracy:.4f}\n",
        args.out,
    )


def cmd_cost(args):
    if args.fp < 0 or args.fn < 0:
        raise ConfigError("counts must be non-negative")
    c = evaluator.ConfusionCounts(fp=args.fp, fn=args.fn)
    print(f"{evaluator.cost(c, args.cfp, args.cfn):.2f}")


def cmd_report(args):
    settings = _attack_settings(args)
    x, y, _ = _load_split(args)
    reports = []
    for name, path in (("clean-trained", args.clean), ("adversarially-trained", args.adversarial)):
        params = store.load_checkpoint(path)
        reports.append(evaluator.evaluate(params, x, y, settings, name=name, threshold=args.threshold))
    text = "".join(evaluator.format_tables(r) + "\n" for r in reports)
    clean_cost, adv_cost = reports[0].cost(), reports[1].cost()
    text += f"Validation cost: clean-trained ${clean_cost:.2f} -> adversarially trained ${adv_cost:.2f}\n"
    out = Path(args.out)
    flowsim.atomic_write_bytes(out / "report.txt", text.encode())
    flowsim.atomic_write_bytes(out / "records.txt", "".join(evaluator.format_records(r) for r in reports).encode())
    flowsim.atomic_write_bytes(out / "roc.tsv", "".join(evaluator.format_roc(r) for r in reports).encode())
    sys.stdout.write(text)


COMMANDS = {
    "gen": cmd_gen, "render": cmd_render, "train": cmd_train, "attack": cmd_attack, "eval": cmd_eval,
    "framewise": cmd_framewise, "earlyexit": cmd_earlyexit, "cost": cmd_cost, "report": cmd_report,
}


def _effective(args):
    return " ".join(f"{k}={v}" for k, v in sorted(vars(args).items()))


def _configure_logging(level):
    # own handler bound to the current stderr, so repeated in-process calls behave alike
    for h in list(log.handlers):
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(level)
    log.propagate = False


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    try:
        known, _ = pre.parse_known_args(argv)
        if known.config:
            _apply_config(parser, argv, read_config_file(known.config))
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO

    _configure_logging(args.log_level)
    log.info("effective config: %s", _effective(args))
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Hive3DError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
