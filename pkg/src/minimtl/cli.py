"""Command-line front end: ``run``, ``sweep``, ``gen-data`` and ``verify``.

Exit codes: 0 success, 1 validation error, 2 run aborted on a non-finite
value, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import data as data_mod
from . import verify as verify_mod
from .architecture import ARCHITECTURES
from .trainer import ConfigError, RunReport, TrainConfig, run_experiment
from .weighting import MGDA_NORM_MODES, REP_GRAD_ONLY, STRATEGIES

EXIT_OK, EXIT_INVALID, EXIT_ABORTED, EXIT_VERIFY = 0, 1, 2, 3
SUBCOMMANDS = ("run", "sweep", "gen-data", "verify")
MODE_FLAGS = {"param": "param_grad", "rep": "rep_grad"}


class UsageError(Exception):
    pass


@dataclass
class DataOptions:
    path: str | None = None
    tasks: int = 2
    n: int = 320
    dim: int = 16
    conflict: float = 0.5
    teacher: str = "linear"
    classes: int = 0


@dataclass
class CliConfig:
    subcommand: str
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataOptions = field(default_factory=DataOptions)
    out: str | None = None
    trace: str | None = None
    timing: bool = True
    jobs: int = 1
    checks: tuple[str, ...] = ()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _hidden(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(v) for v in text.split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated sizes, got {text!r}") from None
    if not dims or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected positive sizes, got {text!r}")
    return dims


def _add_train_flags(p: argparse.ArgumentParser, single: bool) -> None:
    d = TrainConfig()
    if single:
        p.add_argument("--weighting", required=True, choices=STRATEGIES)
        p.add_argument("--arch", required=True, choices=ARCHITECTURES)
    p.add_argument("--mode", choices=tuple(MODE_FLAGS), default="param",
                   help="per-task gradients w.r.t. shared parameters (param) or representation (rep)")
    p.add_argument("--multi-input", action="store_true", help="each task gets its own inputs")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--bs", type=_positive_int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--optimizer", choices=("sgd", "sgd_momentum", "adam"), default=d.optimizer)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--hidden", type=_hidden, default=d.hidden_dims, help="comma-separated hidden sizes")
    p.add_argument("--rep-dim", type=_positive_int, default=d.rep_dim)
    p.add_argument("--experts", type=_positive_int, default=d.experts, help="shared experts")
    p.add_argument("--task-experts", type=int, default=d.task_experts)
    p.add_argument("--levels", type=_positive_int, default=d.levels, help="PLE extraction levels")
    p.add_argument("--top-k", type=_positive_int, default=d.top_k, help="DSelect-k slots")
    p.add_argument("--gamma", type=float, default=d.gamma, help="DSelect-k smooth-step width")
    p.add_argument("--entropy-reg", type=float, default=d.entropy_reg)
    p.add_argument("--alpha", type=float, default=d.alpha, help="GradNorm asymmetry")
    p.add_argument("--weight-lr", type=float, default=d.weight_lr, help="GradNorm weight step")
    p.add_argument("--tau", type=float, default=d.tau, help="DWA temperature")
    p.add_argument("--c", type=float, default=d.c, help="CAGrad radius")
    p.add_argument("--no-cagrad-rescale", action="store_true")
    p.add_argument("--beta", type=float, default=d.beta, help="GradVac EMA rate")
    p.add_argument("--mgda-norm", choices=MGDA_NORM_MODES, default=d.mgda_norm)
    p.add_argument("--no-timing", action="store_true", help="write wall_seconds as null")


def _add_data_flags(p: argparse.ArgumentParser, allow_path: bool) -> None:
    d = DataOptions()
    if allow_path:
        p.add_argument("--data", default=None, help="directory of task CSVs (default: generate the toy)")
    p.add_argument("--tasks", type=_positive_int, default=d.tasks)
    p.add_argument("--n", type=_positive_int, default=d.n, help="samples per task")
    p.add_argument("--dim", type=_positive_int, default=d.dim)
    p.add_argument("--conflict", type=float, default=d.conflict)
    p.add_argument("--teacher", choices=("linear", "mlp"), default=d.teacher)
    p.add_argument("--classes", type=int, default=d.classes, help="0 for regression tasks")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="minimtl", description="Desk-scale multi-task learning experiments.")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    run = sub.add_parser("run", help="train one weighting x architecture combination")
    _add_train_flags(run, single=True)
    _add_data_flags(run, allow_path=True)
    run.add_argument("--out", default=None, help="report JSON path (default: stdout)")
    run.add_argument("--trace", default=None, help="per-step applied weights CSV")
    sweep = sub.add_parser("sweep", help="run every weighting x architecture combination")
    _add_train_flags(sweep, single=False)
    _add_data_flags(sweep, allow_path=True)
    sweep.add_argument("--out", default="sweep_out", help="output directory")
    sweep.add_argument("--jobs", type=_positive_int, default=1)
    gen = sub.add_parser("gen-data", help="write the synthetic datasets as CSV")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--multi-input", action="store_true")
    _add_data_flags(gen, allow_path=False)
    gen.add_argument("--out", required=True, help="output directory")
    ver = sub.add_parser("verify", help="run the oracle suite")
    ver.add_argument("--check", action="append", choices=tuple(verify_mod.CHECKS), default=None,
                     help="restrict to one check (repeatable)")
    return parser


def parse(argv: Sequence[str]) -> CliConfig:
    ns = build_parser().parse_args(list(argv))
    cfg = CliConfig(ns.subcommand)
    if ns.subcommand == "verify":
        cfg.checks = tuple(ns.check or ())
        return cfg
    cfg.data = DataOptions(path=getattr(ns, "data", None), tasks=ns.tasks, n=ns.n, dim=ns.dim,
                           conflict=ns.conflict, teacher=ns.teacher, classes=ns.classes)
    cfg.out = ns.out
    if ns.subcommand == "gen-data":
        cfg.train = TrainConfig(seed=ns.seed, multi_input=ns.multi_input)
        return cfg
    cfg.train = TrainConfig(
        weighting=getattr(ns, "weighting", "EW"), arch=getattr(ns, "arch", "HPS"),
        mode=MODE_FLAGS[ns.mode], multi_input=ns.multi_input, optimizer=ns.optimizer, lr=ns.lr,
        momentum=ns.momentum, batch_size=ns.bs, epochs=ns.epochs, seed=ns.seed,
        hidden_dims=ns.hidden, rep_dim=ns.rep_dim, experts=ns.experts, task_experts=ns.task_experts,
        levels=ns.levels, top_k=ns.top_k, gamma=ns.gamma, entropy_reg=ns.entropy_reg,
        alpha=ns.alpha, weight_lr=ns.weight_lr, tau=ns.tau, c=ns.c,
        cagrad_rescale=not ns.no_cagrad_rescale, beta=ns.beta, mgda_norm=ns.mgda_norm)
    cfg.timing = not ns.no_timing
    if ns.subcommand == "run":
        cfg.trace = ns.trace
        cfg.train.trace_weights = ns.trace is not None
        try:
            cfg.train.validate()
        except ConfigError as exc:
            raise UsageError(f"minimtl run: invalid configuration: {exc}") from None
    else:
        cfg.jobs = ns.jobs
    return cfg


def render(cfg: CliConfig) -> list[str]:
    """argv that parses back to ``cfg``."""
    argv = [cfg.subcommand]
    if cfg.subcommand == "verify":
        for name in cfg.checks:
            argv += ["--check", name]
        return argv
    t, d = cfg.train, cfg.data
    if cfg.subcommand == "gen-data":
        argv += ["--seed", str(t.seed)] + (["--multi-input"] if t.multi_input else [])
    else:
        if cfg.subcommand == "run":
            argv += ["--weighting", t.weighting, "--arch", t.arch]
        mode = {v: k for k, v in MODE_FLAGS.items()}[t.mode]
        argv += ["--mode", mode, "--seed", str(t.seed), "--epochs", str(t.epochs), "--bs", str(t.batch_size),
                 "--lr", repr(t.lr), "--optimizer", t.optimizer, "--momentum", repr(t.momentum),
                 "--hidden", ",".join(map(str, t.hidden_dims)), "--rep-dim", str(t.rep_dim),
                 "--experts", str(t.experts), "--task-experts", str(t.task_experts),
                 "--levels", str(t.levels), "--top-k", str(t.top_k), "--gamma", repr(t.gamma),
                 "--entropy-reg", repr(t.entropy_reg), "--alpha", repr(t.alpha),
                 "--weight-lr", repr(t.weight_lr), "--tau", repr(t.tau), "--c", repr(t.c),
                 "--beta", repr(t.beta), "--mgda-norm", t.mgda_norm]
        argv += ["--multi-input"] if t.multi_input else []
        argv += [] if t.cagrad_rescale else ["--no-cagrad-rescale"]
        argv += [] if cfg.timing else ["--no-timing"]
        if d.path is not None:
            argv += ["--data", d.path]
        if cfg.subcommand == "run" and cfg.trace is not None:
            argv += ["--trace", cfg.trace]
        if cfg.subcommand == "sweep":
            argv += ["--jobs", str(cfg.jobs)]
    argv += ["--tasks", str(d.tasks), "--n", str(d.n), "--dim", str(d.dim), "--conflict", repr(d.conflict),
             "--teacher", d.teacher, "--classes", str(d.classes)]
    if cfg.out is not None:
        argv += ["--out", cfg.out]
    return argv


# -- report serialisation -------------------------------------------------------------

def _fmt(value: Any, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = format(value, ".17g")
        return text if any(c in text for c in ".en") else text + ".0"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [f"{pad}{_fmt(str(k), indent, level + 1)}: {_fmt(v, indent, level + 1)}" for k, v in value.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in value):
            return "[" + ", ".join(_fmt(v, indent, level + 1) for v in value) + "]"
        return "[\n" + ",\n".join(pad + _fmt(v, indent, level + 1) for v in value) + "\n" + end + "]"
    if hasattr(value, "item"):
        return _fmt(value.item(), indent, level)
    raise TypeError(f"cannot serialise {type(value).__name__}")


def dumps(obj: Any, indent: int = 2) -> str:
    """JSON with fixed key order (insertion) and floats at 17 significant digits."""
    return _fmt(obj, indent, 0) + "\n"


def report_json(report: RunReport, include_timing: bool = True, trace_path: str | None = None) -> str:
    d = report.to_dict(include_timing)
    d["weights_trace_path"] = trace_path
    return dumps(d)


def emit_report(report: RunReport, path, include_timing: bool = True, trace_path: str | None = None) -> None:
    text = report_json(report, include_timing, trace_path)
    if path is None or str(path) == "-":
        sys.stdout.write(text)
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def write_trace(report: RunReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch"] + [f"w_{n}" for n in report.task_names])
        for row in report.weights_trace:
            w.writerow(["" if v is None else (format(v, ".17g") if isinstance(v, float) else v) for v in row])


# -- subcommands ----------------------------------------------------------------------

def load_data(opts: DataOptions, seed: int, multi_input: bool):
    if opts.path is not None:
        return data_mod.load_datasets(opts.path)
    if multi_input:
        return data_mod.gen_multi_input(opts.tasks, opts.n, opts.dim, seed=seed, teacher=opts.teacher,
                                        conflict=opts.conflict, num_classes=opts.classes)
    return data_mod.gen_single_input(opts.tasks, opts.n, opts.dim, seed=seed, teacher=opts.teacher,
                                     conflict=opts.conflict, num_classes=opts.classes)


def combinations(base: TrainConfig) -> list[TrainConfig]:
    """All 12 x 7 weighting/architecture configs; rep-only strategies switch to rep_grad."""
    combos = []
    for arch in ARCHITECTURES:
        for weighting in STRATEGIES:
            d = base.to_dict()
            d.update(weighting=weighting, arch=arch)
            if weighting in REP_GRAD_ONLY and not base.multi_input:
                d["mode"] = "rep_grad"
            combos.append(TrainConfig.from_dict(d))
    return combos


def _run_combo(args):
    config, opts = args
    try:
        config.validate()
    except ConfigError as exc:
        return config, None, str(exc)
    datasets = load_data(opts, config.seed, config.multi_input)
    return config, run_experiment(config, datasets), None


def sweep(cfg: CliConfig, out=print) -> list[tuple[TrainConfig, RunReport | None, str | None]]:
    combos = combinations(cfg.train)
    jobs = [(c, cfg.data) for c in combos]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_combo, jobs))
    else:
        results = [_run_combo(j) for j in jobs]
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    T = None
    rows = []
    for config, report, error in results:
        name = f"{config.weighting}-{config.arch}"
        if report is None:
            rows.append([name, "invalid", error])
            out(f"{name:<22} invalid: {error}")
            continue
        T = len(report.task_names)
        emit_report(report, out_dir / f"{name}.json", cfg.timing)
        status = "aborted" if report.aborted else "ok"
        rows.append([name, status, *[format(v, ".17g") for v in report.final_train_losses],
                     format(report.wall_seconds, ".6f") if cfg.timing else ""])
        out(f"{name:<22} {status:<8} " + " ".join(f"{v:.4f}" for v in report.final_train_losses))
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["combo", "status"] + [f"final_loss_{t}" for t in range(T or 0)] + ["wall_seconds"])
        w.writerows(rows)
    return results


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    if cfg.subcommand == "verify":
        results = verify_mod.run_all(cfg.checks or None)
        failed = [r.name for r in results if not r.passed]
        print(f"{len(results) - len(failed)}/{len(results)} checks passed")
        return EXIT_VERIFY if failed else EXIT_OK
    if cfg.subcommand == "gen-data":
        datasets = load_data(cfg.data, cfg.train.seed, cfg.train.multi_input)
        for p in data_mod.save_datasets(datasets, cfg.out):
            print(p)
        return EXIT_OK
    if cfg.subcommand == "sweep":
        results = sweep(cfg)
        if any(r is not None and r.aborted for _, r, _ in results):
            return EXIT_ABORTED
        return EXIT_OK
    try:
        datasets = load_data(cfg.data, cfg.train.seed, cfg.train.multi_input)
        report = run_experiment(cfg.train, datasets)
    except (ConfigError, ValueError) as exc:
        print(f"minimtl run: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if cfg.trace:
        write_trace(report, cfg.trace)
    emit_report(report, cfg.out, cfg.timing, cfg.trace)
    return EXIT_ABORTED if report.aborted else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
