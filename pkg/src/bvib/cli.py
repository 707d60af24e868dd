"""Command-line entry point: ``bvib`` or ``python -m bvib``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .attack import POLICIES, AttackConfig
from .consensus import TermConfig
from .orchestrator import MODES, ExperimentConfig, run_experiment


def build_parser() -> argparse.ArgumentParser:
    d = ExperimentConfig()
    p = argparse.ArgumentParser(prog="bvib", description="Run a split-VIB / Raft-lite ledger simulation.")
    p.add_argument("--mode", choices=MODES, default=d.mode)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batches", type=int, default=d.batches)
    p.add_argument("--pairs", type=int, default=d.pairs)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--beta", type=float, default=d.beta)
    p.add_argument("--latent-dim", type=int, default=d.latent_dim)
    p.add_argument("--trunk-dim", type=int, default=d.trunk_dim)
    p.add_argument("--decoder-hidden", type=int, default=d.decoder_hidden)
    p.add_argument("--dataset", choices=("mnist", "synthetic"), default=d.dataset)
    p.add_argument("--mnist-dir")
    p.add_argument("--train-limit", type=int)
    p.add_argument("--test-limit", type=int)
    p.add_argument("--synthetic-per-class", type=int, default=d.synthetic_per_class)
    p.add_argument("--synthetic-test-per-class", type=int, default=d.synthetic_test_per_class)
    p.add_argument("--synthetic-noise", type=float, default=d.synthetic_noise)
    p.add_argument("--malicious", type=int, default=0, help="number of DoS attackers")
    p.add_argument("--target-policy", choices=POLICIES, default="uniform-any")
    p.add_argument("--paralysis-epochs", type=int, default=1)
    p.add_argument("--fixed-targets", action="store_true", help="attackers keep their first target")
    p.add_argument("--term-rounds", type=int, default=TermConfig().term_length)
    p.add_argument("--heartbeat-interval", type=int, default=TermConfig().heartbeat_interval)
    p.add_argument("--missed-heartbeats", type=int, default=TermConfig().missed_heartbeat_threshold)
    p.add_argument("--restart-mode", choices=("batch", "full"), default=d.restart_mode)
    p.add_argument("--max-batch-attempts", type=int, default=d.max_batch_attempts)
    p.add_argument("--converge-tol", type=float, default=d.converge_tol, help="0 disables early stopping")
    p.add_argument("--final-test-only", action="store_true", help="test after the last epoch only")
    p.add_argument("--mi-record", choices=("last", "mean"), default=d.mi_record)
    p.add_argument("--paper-literal", action="store_true", help="scale epsilon by the variance, not the std-dev")
    p.add_argument("--cycles-per-mac", type=float, default=d.cycles_per_mac)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--out", default="bvib_out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    return ExperimentConfig(
        mode=args.mode,
        epochs=args.epochs,
        batches=args.batches,
        pairs=args.pairs,
        lr=args.lr,
        beta=args.beta,
        latent_dim=args.latent_dim,
        trunk_dim=args.trunk_dim,
        decoder_hidden=args.decoder_hidden,
        dataset=args.dataset,
        mnist_dir=args.mnist_dir,
        train_limit=args.train_limit,
        test_limit=args.test_limit,
        synthetic_per_class=args.synthetic_per_class,
        synthetic_test_per_class=args.synthetic_test_per_class,
        synthetic_noise=args.synthetic_noise,
        attack=AttackConfig(args.malicious, args.target_policy, args.paralysis_epochs, not args.fixed_targets),
        term=TermConfig(args.term_rounds, args.heartbeat_interval, args.missed_heartbeats),
        seed=args.seed,
        out_dir=args.out,
        paper_literal=args.paper_literal,
        restart_mode=args.restart_mode,
        max_batch_attempts=args.max_batch_attempts,
        converge_tol=args.converge_tol,
        test_every_epoch=not args.final_test_only,
        mi_record=args.mi_record,
        cycles_per_mac=args.cycles_per_mac,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    report = run_experiment(config_from_args(args))
    summary = report.summary()
    summary.pop("config")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0 if report.status == "ok" else 1


if __name__ == "__main__":
    sys.exit(main())
