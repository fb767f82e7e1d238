"""
Command-line entry point.

Exit codes: 0 success, 1 failed check or runtime error, 2 usage or
configuration error. Human-readable summaries go to stdout; machine-readable
records go under ``--out``.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from PIL import Image

from . import checkpoint as ckpt
from .config import apply_section, check_keys, read_config
from .data import GenSpec, benchmark, read_dataset, write_dataset
from .errors import ConfigError, UsageError
from .metrics import Counts, confusion_counts, derive_metrics, render_confusion
from .selftest import GRAD_REGISTRY, run_gradcheck, run_selftest
from .train import (TOY_ENCODER, TrainRunConfig, ablate, ablation_configs, ablation_table,
                    load_model, predict, train)

ORACLE_KEY = "__oracle__"
SECTIONS = ("gen", "train", "encoder", "bench")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--seed", type=int, default=None, help="seed for every random draw")
    p.add_argument("--out", type=Path, default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="faew", description="Bi-temporal change detection on a numpy autodiff core.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every registered op and module")
    _shared(p)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--only", nargs="*", default=None, help="registry entries to check")

    p = sub.add_parser("selftest", help="run the oracle suites")
    _shared(p)

    p = sub.add_parser("gen-data", help="write the synthetic benchmark as PNG tiles")
    _shared(p)
    p.add_argument("--train", type=int, default=None, help="number of training pairs")
    p.add_argument("--val", type=int, default=None, help="number of validation pairs")

    p = sub.add_parser("train", help="train a detector")
    _shared(p)
    p.add_argument("--data", type=Path, default=None, help="directory with train/ and val/ tiles")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a tile directory")
    _shared(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)

    p = sub.add_parser("render", help="write four-colour confusion maps")
    _shared(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)

    p = sub.add_parser("ablate", help="module or spectral-mode ablation over several seeds")
    _shared(p)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--kind", choices=("modules", "spectral"), default="modules")
    p.add_argument("--seeds", type=str, default="0,1,2")
    p.add_argument("--steps", type=int, default=None)
    return parser


# -- configuration ---------------------------------------------------------------

class Settings:
    def __init__(self, args):
        entries = read_config(args.config) if args.config else {}
        check_keys(entries, SECTIONS)
        self.gen = apply_section(GenSpec(), entries, "gen")
        self.gen.validate()
        self.train = apply_section(TrainRunConfig(), entries, "train")
        self.encoder = apply_section(TOY_ENCODER, entries, "encoder")
        bench = {k: int(v) for k, v in entries.items() if k.startswith("bench.")}
        unknown = set(bench) - {"bench.n_train", "bench.n_val", "bench.seed"}
        if unknown:
            raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
        self.n_train = bench.get("bench.n_train", 200)
        self.n_val = bench.get("bench.n_val", 50)
        self.seed = bench.get("bench.seed", 7)
        if args.seed is not None:
            self.seed = args.seed
            self.train.seed = args.seed
        if getattr(args, "steps", None) is not None:
            self.train.steps = args.steps


def _split_dir(root: Path):
    if (root / "A").is_dir():
        return read_dataset(root)
    return read_dataset(root / "val")


def _train_val(args, st: Settings):
    if args.data is not None:
        return read_dataset(args.data / "train"), read_dataset(args.data / "val")
    return benchmark(st.seed, st.n_train, st.n_val, st.gen)


def _out_dir(args, default: str) -> Path:
    out = args.out or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ----------------------------------------------------------------------

def cmd_gradcheck(args, st: Settings) -> int:
    registry = GRAD_REGISTRY
    if args.only is not None:
        missing = [n for n in args.only if n not in GRAD_REGISTRY]
        if missing:
            raise ConfigError(f"unknown registry entries: {missing}")
        registry = {n: GRAD_REGISTRY[n] for n in args.only}
    results = run_gradcheck(registry, tol=args.tol, seed=args.seed or 0)
    worst = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.report.max_error)
    lines = [f"{name}\t{err:.3e}\t{'ok' if err <= args.tol else 'FAIL'}" for name, err in worst.items()]
    print("op\tmax_rel_error\tstatus")
    print("\n".join(lines))
    if args.out:
        _out_dir(args, ".")
        (args.out / "gradcheck.tsv").write_text("op\tmax_rel_error\tstatus\n" + "\n".join(lines) + "\n")
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} cases within tol {args.tol:g}")
    return 1 if failed else 0


def cmd_selftest(args, st: Settings) -> int:
    return run_selftest(seed=args.seed or 0)


def cmd_gen_data(args, st: Settings) -> int:
    n_train = args.train if args.train is not None else st.n_train
    n_val = args.val if args.val is not None else st.n_val
    tr, va = benchmark(st.seed, n_train, n_val, st.gen)
    out = _out_dir(args, "data")
    write_dataset(tr, out / "train")
    write_dataset(va, out / "val")
    print(f"wrote {len(tr)} train and {len(va)} val pairs to {out}")
    return 0


def cmd_train(args, st: Settings) -> int:
    tr, va = _train_val(args, st)
    out = _out_dir(args, "run")
    with open(out / "trace.tsv", "w") as trace:
        result = train(st.train, tr, va, st.encoder, trace=trace, checkpoint_path=out / "model.faew")
    print(f"trained {st.train.steps} steps in {result.seconds:.1f}s; checkpoint {out / 'model.faew'}")
    if result.final is not None:
        print("Pr\tRc\tF1\tIoU")
        print(result.final.row())
    return 0


def _predictions(args, st: Settings, samples) -> list:
    params = ckpt.checkpoint_load(args.ckpt)
    if ORACLE_KEY in params:
        # test stub: predict the ground truth
        return [s.mask.copy() for s in samples]
    model = load_model(args.ckpt, fallback=st.train.model_config(st.encoder))
    return predict(model, samples)


def cmd_eval(args, st: Settings) -> int:
    samples = _split_dir(args.data)
    total = Counts()
    for pred, s in zip(_predictions(args, st, samples), samples):
        total = total + confusion_counts(pred, s.mask)
    report = derive_metrics(total)
    print("Pr\tRc\tF1\tIoU")
    print(report.row())
    if args.out:
        _out_dir(args, ".")
        (args.out / "metrics.tsv").write_text(
            "tp\tfp\tfn\ttn\tPr\tRc\tF1\tIoU\n"
            f"{report.tp}\t{report.fp}\t{report.fn}\t{report.tn}\t{report.row()}\n")
    return 0


def cmd_render(args, st: Settings) -> int:
    samples = _split_dir(args.data)
    out = _out_dir(args, "render")
    for i, (pred, s) in enumerate(zip(_predictions(args, st, samples), samples)):
        name = s.meta.get("name", f"{i:05d}.png")
        Image.fromarray(render_confusion(pred, s.mask), mode="RGB").save(out / name)
    print(f"wrote {len(samples)} confusion maps to {out}")
    return 0


def cmd_ablate(args, st: Settings) -> int:
    try:
        seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from exc
    if not seeds:
        raise ConfigError("--seeds is empty")
    tr, va = _train_val(args, st)
    rows = ablate(ablation_configs(st.train, args.kind), tr, va, seeds, st.encoder, log=print)
    table = ablation_table(rows)
    print(table)
    if args.out:
        _out_dir(args, ".")
        (args.out / f"ablation_{args.kind}.tsv").write_text(table + "\n")
    return 0


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "render": cmd_render,
    "ablate": cmd_ablate,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        st = Settings(args)
        return COMMANDS[args.command](args, st)
    except (ConfigError, UsageError) as exc:
        print(f"faew: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # reported as a failed command, not a traceback
        print(f"faew: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
