"""Command-line entry point: run, eval, gradcheck, plot, gen-data, bench."""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from itertools import product
from pathlib import Path

import numpy as np

from .config import STRATEGIES, RunConfig, config_from_dict, config_to_dict, parse_config
from .data import SyntheticSpec, generate_synthetic, read_cifar100_binary
from .distill import METHOD_FAMILY
from .errors import CassleError, ConfigError, NumericError
from .evaluation import ProbeConfig, evaluate_probe, knn_evaluate, train_linear_probe
from .formats import load_checkpoint, load_features, save_features

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
SCENARIOS = ("class", "data", "domain")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 instead of argparse's 2 (reserved for numeric failures)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cassle", description="Continual self-supervised learning benchmark")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    run = sub.add_parser("run", help="train over a task stream and write a report")
    run.add_argument("--config", type=Path, help="JSON run configuration")
    run.add_argument("--seed", type=int, nargs="+", help="seed(s); overrides the config")
    run.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    run.add_argument("--strategy", nargs="+", choices=STRATEGIES)
    run.add_argument("--method", choices=sorted(METHOD_FAMILY))
    run.add_argument("--scenario", choices=SCENARIOS)
    run.add_argument("--tasks", type=int)
    run.add_argument("--steps", type=int, help="steps per task; overrides the config")
    run.add_argument("--canonical", action="store_true", help="blank volatile report fields")

    ev = sub.add_parser("eval", help="linear probe / k-NN on feature dumps or a checkpoint")
    ev.add_argument("--train", type=Path, help="CSFE feature dump used to fit")
    ev.add_argument("--test", type=Path, help="CSFE feature dump used to score")
    ev.add_argument("--checkpoint", type=Path, help="CSLE checkpoint to probe (with --config)")
    ev.add_argument("--config", type=Path)
    ev.add_argument("--seed", type=int)
    ev.add_argument("--label-fraction", type=float, default=1.0)
    ev.add_argument("--epochs", type=int, default=100)
    ev.add_argument("--knn", action="store_true", help="also report weighted k-NN accuracy")
    ev.add_argument("--k", type=int, default=20)
    ev.add_argument("--tau", type=float, default=0.07)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every objective")
    gc.add_argument("--instances", type=int, default=20)
    gc.add_argument("--seed", type=int, default=0)

    pl = sub.add_parser("plot", help="SVG of average accuracy over tasks")
    pl.add_argument("reports", type=Path, nargs="+", help="report.json files")
    pl.add_argument("--out", type=Path, default=Path("accuracy.svg"))

    gd = sub.add_parser("gen-data", help="write a synthetic or converted CIFAR-100 dataset (CSFE)")
    gd.add_argument("--out", type=Path, required=True)
    gd.add_argument("--cifar", type=Path, help="CIFAR-100 binary file to convert")
    gd.add_argument("--seed", type=int, default=0)
    gd.add_argument("--n-classes", type=int, default=8)
    gd.add_argument("--samples-per-class", type=int, default=250)
    gd.add_argument("--input-dim", type=int, default=32)
    gd.add_argument("--cluster-std", type=float, default=1.0)
    gd.add_argument("--n-domains", type=int, default=1)
    gd.add_argument("--domain-shift", type=float, default=1.0)

    bn = sub.add_parser("bench", help="desk-scale strategy comparison over seeds")
    bn.add_argument("--method", nargs="+", choices=sorted(METHOD_FAMILY),
                    default=["simclr", "barlow", "byol"])
    bn.add_argument("--seed", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    bn.add_argument("--steps", type=int, default=2000)
    bn.add_argument("--out", type=Path, help="directory for per-run reports")
    return parser


def _run_config(args) -> RunConfig:
    base = config_to_dict(parse_config(args.config)) if args.config else {}
    if args.method:
        base["method"] = args.method
    if args.scenario or args.tasks:
        scenario = dict(base.get("scenario") or {})
        if args.scenario:
            scenario["regime"] = args.scenario
        if args.tasks:
            scenario["tasks"] = args.tasks
        base["scenario"] = scenario
        if args.scenario == "domain" and args.tasks:
            base.setdefault("data", {}).setdefault("synthetic", {})["n_domains"] = args.tasks
    if args.steps is not None:
        base.setdefault("training", {})["steps_per_task"] = args.steps
    return config_from_dict(base)


def _run_one(job) -> tuple[str, dict | None, str | None, str | None]:
    from .report import write_report
    from .training import run_scenario

    cfg_dict, out_dir, canonical = job
    cfg = config_from_dict(cfg_dict)
    try:
        report = run_scenario(cfg, out_dir)
    except CassleError as exc:
        partial = getattr(exc, "partial_report", None)
        if partial is not None:
            write_report(partial, out_dir, canonical=canonical)
        return str(out_dir), None, exc.code, str(exc)
    write_report(report, out_dir, canonical=canonical)
    return str(out_dir), report["metrics"], None, None


def cmd_run(args) -> int:
    cfg = _run_config(args)
    strategies = args.strategy or [cfg.strategy]
    seeds = args.seed or [cfg.seed]
    combos = list(product(strategies, seeds))
    jobs = []
    for strategy, seed in combos:
        out = args.out if len(combos) == 1 else args.out / f"{strategy}_seed{seed}"
        d = config_to_dict(cfg)
        d["strategy"], d["seed"] = strategy, seed
        jobs.append((d, out, args.canonical))
    from .bench import max_workers

    workers = min(max_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    status = EXIT_OK
    for out, metrics, code, message in results:
        if code is None:
            print(f"{out}: {json.dumps(metrics)}")
        else:
            print(f"{out}: {code}: {message}", file=sys.stderr)
            status = max(status, EXIT_NUMERIC if code == NumericError.code else EXIT_INVALID)
    return status


def cmd_eval(args) -> int:
    if args.checkpoint:
        if not args.config:
            raise ConfigError("--checkpoint needs --config to rebuild the data", field="--config")
        from .nn import init_encoder
        from .training import build_splits, evaluate_row, load_dataset

        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        enc = init_encoder(cfg.arch, 0, with_head=cfg.method == "byol",
                           with_prototypes=cfg.method == "swav")
        enc.load_state_dict(load_checkpoint(args.checkpoint))
        row, knn = evaluate_row(enc, build_splits(load_dataset(cfg), cfg), cfg)
        print(json.dumps({"probe_accuracy": row, "knn_accuracy": knn}))
        return EXIT_OK
    if not args.train or not args.test:
        raise ConfigError("give --train and --test feature dumps, or --checkpoint", field="--train")
    x_tr, y_tr = load_features(args.train)
    x_te, y_te = load_features(args.test)
    cfg = ProbeConfig(label_fraction=args.label_fraction, epochs=args.epochs,
                      seed=args.seed or 0)
    result = {"probe_accuracy": evaluate_probe(train_linear_probe(x_tr, y_tr, cfg), x_te, y_te)}
    if args.knn:
        result["knn_accuracy"] = knn_evaluate(x_tr, y_tr, x_te, y_te, args.k, args.tau)
    print(json.dumps(result))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_suite

    results = run_suite(args.instances, args.seed)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_plot(args) -> int:
    from .plot import emit_plot
    from .report import load_report

    emit_plot([load_report(p) for p in args.reports], args.out)
    print(args.out)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.cifar:
        ds = read_cifar100_binary(args.cifar)
    else:
        ds = generate_synthetic(SyntheticSpec(
            n_classes=args.n_classes, samples_per_class=args.samples_per_class,
            input_dim=args.input_dim, cluster_std=args.cluster_std, n_domains=args.n_domains,
            domain_shift_strength=args.domain_shift, seed=args.seed))
    save_features(ds.samples, ds.labels, args.out)
    if ds.domain_ids is not None:
        np.save(args.out.with_suffix(".domains.npy"), ds.domain_ids)
    print(f"{args.out}: {len(ds)} samples x {ds.dim}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import BENCH_STRATEGIES, run_benchmark, summarize
    from .report import write_report

    results = run_benchmark(args.method, args.seed, BENCH_STRATEGIES, steps=args.steps)
    if args.out:
        for method, by_strategy in results.items():
            for strategy, reports in by_strategy.items():
                for report in reports:
                    write_report(report, args.out / f"{method}_{strategy}_seed{report['seed']}")
    for method, means in summarize(results).items():
        print(method, " ".join(f"{s}={a:.4f}" for s, a in means.items()))
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "plot": cmd_plot,
    "gen-data": cmd_gen_data,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CassleError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
