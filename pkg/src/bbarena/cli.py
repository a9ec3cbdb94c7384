"""Command-line entry point.

Subcommands: ``train`` (dataset -> model file), ``attack`` (single run),
``sweep`` (config -> report CSV), ``theory`` (verification experiments ->
CSVs), ``report`` (CSV -> summary table). Exit codes: 0 success, 1 usage
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from . import harness, netmod, theory
from .attacks import AttackConfig
from .harness import run_single
from .numkit import Norm, RngStream
from .oracle import MarginOracle


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 on bad flags; the CLI wants 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="bbarena")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", parents=[], help="train a model on a dataset CSV")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--hidden", default="32,32", help="comma-separated hidden sizes")
    p_train.add_argument("--epochs", type=int, default=30)
    p_train.add_argument("--lr", type=float, default=0.1)
    p_train.add_argument("--batch", type=int, default=64)
    p_train.add_argument("--augment-sigma", type=float, default=0.0)
    p_train.add_argument("--schedule", default="constant", choices=netmod.SCHEDULES)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--init-from", default=None, help="fine-tune this model file")

    p_attack = sub.add_parser("attack", help="run one attack on one sample")
    p_attack.add_argument("--model", required=True)
    p_attack.add_argument("--data", required=True)
    p_attack.add_argument("--index", type=int, default=0)
    p_attack.add_argument("--attack", required=True)
    p_attack.add_argument("--norm", default="LINF", choices=[n.value for n in Norm])
    p_attack.add_argument("--radius", type=float, default=0.05)
    p_attack.add_argument("--mu", type=float, default=1e-3)
    p_attack.add_argument("--eta", type=float, default=None)
    p_attack.add_argument("--q", type=int, default=10)
    p_attack.add_argument("--budget", type=int, default=10_000)
    p_attack.add_argument("--nu", type=float, default=0.0)
    p_attack.add_argument("--eot-m", type=int, default=1)
    p_attack.add_argument("--seed", type=int, default=0)
    p_attack.add_argument("--log-queries", default=None, metavar="CSV",
                          help="dump query_index,value history to this file")

    p_sweep = sub.add_parser("sweep", help="run an experiment grid from a config file")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--trace-dir", default=None)

    p_theory = sub.add_parser("theory", help="verification experiments")
    theory_sub = p_theory.add_subparsers(dest="experiment", required=True)

    p_flip = theory_sub.add_parser("flip-rate")
    p_flip.add_argument("--affine", action="store_true", default=True)
    p_flip.add_argument("--d", type=int, default=64)
    p_flip.add_argument("--mu", type=float, required=True)
    p_flip.add_argument("--nu", type=float, required=True)
    p_flip.add_argument("--trials", type=int, default=100_000)
    p_flip.add_argument("--seed", type=int, default=0)
    p_flip.add_argument("--out", default="flip_rate.csv")

    p_conv = theory_sub.add_parser("convergence")
    p_conv.add_argument("--d", type=int, default=8)
    p_conv.add_argument("--alphas", default="0,1,5,20")
    p_conv.add_argument("--mu", type=float, default=1e-3)
    p_conv.add_argument("--steps", type=int, default=40)
    p_conv.add_argument("--eta", type=float, default=None,
                        help="constant step size; omit for the analysis step rule")
    p_conv.add_argument("--epsilon", type=float, default=0.05)
    p_conv.add_argument("--radius", type=float, default=1.0)
    p_conv.add_argument("--trials", type=int, default=10)
    p_conv.add_argument("--seed", type=int, default=0)
    p_conv.add_argument("--out", default="convergence.csv")

    p_eot = theory_sub.add_parser("eot")
    p_eot.add_argument("--d", type=int, default=8)
    p_eot.add_argument("--alpha", type=float, default=20.0)
    p_eot.add_argument("--m-grid", default="1,5,10")
    p_eot.add_argument("--mu", type=float, default=1e-3)
    p_eot.add_argument("--steps", type=int, default=40)
    p_eot.add_argument("--eta", type=float, default=1e-3)
    p_eot.add_argument("--epsilon", type=float, default=0.05)
    p_eot.add_argument("--radius", type=float, default=1.0)
    p_eot.add_argument("--trials", type=int, default=10)
    p_eot.add_argument("--seed", type=int, default=0)
    p_eot.add_argument("--out", default="eot.csv")

    p_report = sub.add_parser("report", help="summarize a sweep CSV")
    p_report.add_argument("csv")
    return parser


def _cmd_train(args) -> int:
    data = netmod.load_dataset(args.data)
    if args.init_from:
        model = netmod.load_model(args.init_from)
    else:
        hidden = [int(h) for h in args.hidden.split(",") if h.strip()]
        model = netmod.init_model([data.d, *hidden, data.num_classes], args.seed)
    cfg = netmod.TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=min(args.batch, data.n),
        augment_sigma=args.augment_sigma,
        seed=args.seed,
        schedule=args.schedule,
    )
    model = netmod.train(model, data, cfg) if cfg.augment_sigma == 0 else netmod.gf_finetune(model, data, cfg)
    acc = netmod.accuracy(model, data, 0.0, RngStream(args.seed, 0))
    netmod.save_model(model, args.out)
    print(f"trained {'-'.join(map(str, model.layer_dims))} model: "
          f"train accuracy {acc:.4f} -> {args.out}")
    return 0


def _cmd_attack(args) -> int:
    model = netmod.load_model(args.model)
    data = netmod.load_dataset(args.data)
    if not 0 <= args.index < data.n:
        raise UsageError(f"--index out of range (dataset has {data.n} samples)")
    x0 = data.vector(args.index)
    label = int(data.labels[args.index])
    cfg = AttackConfig(
        norm=Norm(args.norm),
        radius=args.radius,
        mu=args.mu,
        max_queries=args.budget,
        eta=args.eta,
        samples_per_step=args.q,
        eot_m=args.eot_m,
        seed=args.seed,
    )
    defense_rng = RngStream(args.seed, 0).child(99)
    if args.log_queries:
        from .oracle import AttackChannel, DefensePolicy, QueryLedger, margin
        from .attacks import run_attack

        oracle = MarginOracle(model, label)
        ledger = QueryLedger(cfg.max_queries, history=[])
        channel = AttackChannel(
            oracle, DefensePolicy(args.nu, defense_rng), ledger, cfg.eot_m
        )
        outcome = run_attack(args.attack, channel, x0, cfg)
        outcome.final_true_margin = margin(oracle, outcome.x_adv)
        outcome.true_success = outcome.final_true_margin < 0
        with open(args.log_queries, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query_index", "value"])
            writer.writerows(ledger.history)
    else:
        outcome = run_single(model, x0, label, args.attack, cfg, args.nu, defense_rng)
    print(
        f"attack={args.attack.upper()} sample={args.index} label={label}\n"
        f"observed_success={outcome.success} true_success={outcome.true_success}\n"
        f"queries_used={outcome.queries_used} iterations={outcome.iterations}\n"
        f"perturbation_norm={outcome.perturbation_norm:.6g} "
        f"final_true_margin={outcome.final_true_margin:.6g}"
    )
    return 0


def _cmd_sweep(args) -> int:
    spec = harness.load_spec(args.config)
    rows = harness.run_experiment(spec, trace_dir=args.trace_dir)
    harness.write_csv(rows, args.out)
    print(harness.summarize(rows))
    print(f"wrote {len(rows)} rows -> {args.out}")
    return 0


def _cmd_theory(args) -> int:
    rng = RngStream(args.seed, 0)
    if args.experiment == "flip-rate":
        c = rng.child(1).normal(args.d)
        oracle = theory.AffineOracle(c, offset=0.3)
        x = np.full(args.d, 0.5)
        u = rng.child(2).normal(args.d)
        res = theory.flip_rate(oracle, x, args.mu, args.nu, u, args.trials, rng.child(3))
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["mu", "nu", "d", "h", "empirical_p", "exact_p", "bound", "trials"])
            writer.writerow(
                [args.mu, args.nu, args.d, f"{res.h:.6g}", f"{res.empirical:.6g}",
                 f"{res.exact:.6g}", f"{res.bound:.6g}", res.trials]
            )
        print(f"empirical={res.empirical:.4g} exact={res.exact:.4g} "
              f"bound={res.bound:.4g} -> {args.out}")
        return 0

    # convergence / eot share the bowl setup
    d = args.d
    x0 = np.zeros(d)
    x0[0] = 0.5
    oracle = theory.QuadraticOracle(np.eye(d), np.zeros(d), x0, args.radius)
    cfg = theory.ConvergenceSweepConfig(
        alpha_grid=tuple(float(a) for a in (args.alphas.split(",") if args.experiment == "convergence" else [args.alpha])),
        mu=args.mu,
        q_iters=args.steps,
        epsilon=args.epsilon,
        radius=args.radius,
        x0=x0,
        step_rule="constant" if args.eta is not None else "theorem",
        eta=args.eta,
        trials=args.trials,
    )
    if args.experiment == "convergence":
        cells = theory.convergence_sweep(oracle, cfg, rng)
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["alpha", "trial", "step", "grad_norm_sq"])
            for cell in cells:
                for trial, step, value in cell.records:
                    writer.writerow([cell.alpha, trial, step, f"{value:.6g}"])
        for cell in cells:
            print(f"alpha={cell.alpha:<6g} eta={cell.eta:.3g} "
                  f"time-avg grad_norm_sq={cell.metric_mean:.6g}")
    else:
        m_grid = tuple(int(m) for m in args.m_grid.split(","))
        results = theory.eot_sweep(oracle, cfg, m_grid, args.alpha, rng)
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["M", "estimator_variance", "metric"])
            for m, var, cell in results:
                writer.writerow([m, f"{var:.6g}", f"{cell.metric_mean:.6g}"])
        for m, var, cell in results:
            print(f"M={m:<3} estimator_var={var:.6g} metric={cell.metric_mean:.6g}")
    print(f"wrote {args.out}")
    return 0


def _cmd_report(args) -> int:
    rows = harness.parse_csv(args.csv)
    print(harness.summarize(rows))
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "attack":
            return _cmd_attack(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "theory":
            return _cmd_theory(args)
        if args.command == "report":
            return _cmd_report(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
