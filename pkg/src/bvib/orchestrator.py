"""Round-based experiment driver.

One *round* is one attempt at one batch: heartbeat bookkeeping, the
device/server exchange for every operational pair, then ledger collection
and commit.  A batch whose round aborts (too few follower ledgers, or no
alive leader) is rolled back to the last committed weights and retried in
the next round, up to ``max_batch_attempts``; after that it is skipped.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng as rngs
from .attack import Attack, AttackConfig
from .consensus import AbortSignal, Cluster, EventLog, TermConfig
from .data import Dataset, load_mnist_dir, make_synthetic, shard
from .errors import ConfigError, NumericError, TotalFailure
from .ledger_chain import export_chain
from .numerics import FlopCounter
from .split_training import PairState, device_backward, device_forward, server_step
from .vib_model import (
    LOG2_CLASSES,
    DecoderParams,
    EncoderParams,
    VIBModel,
    decoder_forward,
    encode,
    mi_lower_bits,
    mi_upper_bits,
    reparameterize,
)

log = logging.getLogger(__name__)

MODES = ("bvib", "vib-monolithic")
CSV_HEADER = ["epoch", "mi_upper_bits", "mi_lower_bits", "accuracy_pct", "elections", "aborts",
              "paralyzed_devices", "paralyzed_servers"]
HOST = "H0"
SERVER_INIT_OFFSET = 10_000


@dataclass
class ExperimentConfig:
    mode: str = "bvib"
    epochs: int = 300
    batches: int = 200
    pairs: int = 10
    lr: float = 1e-3
    beta: float = 1e-3
    latent_dim: int = 512
    trunk_dim: int = 1024
    decoder_hidden: int = 784
    dataset: str = "mnist"
    mnist_dir: str | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    synthetic_per_class: int = 500
    synthetic_test_per_class: int = 100
    synthetic_noise: float = 1.0
    attack: AttackConfig = field(default_factory=AttackConfig)
    term: TermConfig = field(default_factory=TermConfig)
    seed: int = 0
    out_dir: str | None = None
    paper_literal: bool = False
    restart_mode: str = "batch"
    max_full_restarts: int = 3
    max_batch_attempts: int = 5
    converge_tol: float = 1e-4
    converge_window: int = 10
    test_every_epoch: bool = True
    mi_record: str = "last"
    cycles_per_mac: float = 1.0

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if isinstance(self.term, dict):
            self.term = TermConfig(**self.term)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        for name in ("epochs", "batches", "pairs", "latent_dim", "trunk_dim", "decoder_hidden",
                     "max_batch_attempts", "converge_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0 or self.beta < 0:
            raise ConfigError("lr must be > 0 and beta >= 0")
        if self.dataset not in ("mnist", "synthetic"):
            raise ConfigError("dataset must be 'mnist' or 'synthetic'")
        if self.restart_mode not in ("batch", "full"):
            raise ConfigError("restart_mode must be 'batch' or 'full'")
        if self.mi_record not in ("last", "mean"):
            raise ConfigError("mi_record must be 'last' or 'mean'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochMetrics:
    epoch: int
    mi_upper_bits: float
    mi_lower_bits: float
    accuracy_pct: float
    elections: int
    aborts: int
    paralyzed_devices: int
    paralyzed_servers: int
    train_loss: float = math.nan
    skipped_batches: int = 0

    def csv_row(self) -> list[str]:
        return [str(self.epoch), repr(self.mi_upper_bits), repr(self.mi_lower_bits), repr(self.accuracy_pct),
                str(self.elections), str(self.aborts), str(self.paralyzed_devices), str(self.paralyzed_servers)]


@dataclass
class MetricsReport:
    config: ExperimentConfig
    epochs: list[EpochMetrics] = field(default_factory=list)
    status: str = "ok"
    failure: str | None = None
    chain_height: int = 0
    rounds: int = 0
    restarts: int = 0
    converged_at: int | None = None
    train_flops: FlopCounter = field(default_factory=FlopCounter)
    test_flops: FlopCounter = field(default_factory=FlopCounter)
    events: EventLog = field(default_factory=EventLog)
    cluster: Cluster | None = field(default=None, repr=False)
    pairs: list = field(default_factory=list, repr=False)

    @property
    def average_accuracy(self) -> float:
        vals = [e.accuracy_pct for e in self.epochs if not math.isnan(e.accuracy_pct)]
        return float(np.mean(vals)) if vals else math.nan

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.epochs], dtype=float)

    @property
    def flops(self) -> dict:
        return flop_report(self.train_flops, self.test_flops, self.config)

    def summary(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "status": self.status,
            "failure": self.failure,
            "epochs_run": len(self.epochs),
            "converged_at": self.converged_at,
            "average_accuracy_pct": self.average_accuracy,
            "final_accuracy_pct": self.epochs[-1].accuracy_pct if self.epochs else math.nan,
            "chain_height": self.chain_height,
            "rounds": self.rounds,
            "restarts": self.restarts,
            "elections": sum(e.elections for e in self.epochs),
            "aborts": sum(e.aborts for e in self.epochs),
            "flops": self.flops,
        }

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "metrics": out / "metrics.csv",
            "summary": out / "run_summary.json",
            "chain": out / "chain.jsonl",
            "events": out / "events.log",
        }
        with open(paths["metrics"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for e in self.epochs:
                w.writerow(e.csv_row())
        paths["summary"].write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        if self.cluster is not None:
            export_chain(self.cluster.chain, paths["chain"])
        else:
            paths["chain"].write_text("")
        self.events.write(paths["events"])
        return paths


# -- accuracy and FLOP accounting -------------------------------------------


def compute_accuracy(predictions, labels) -> float:
    """Percent of items whose predicted class equals the label.

    ``predictions`` and ``labels`` are matching sequences of per-batch
    arrays.  A missing prediction (``-1``) counts as a mismatch.
    """
    preds = [np.asarray(p).reshape(-1) for p in predictions]
    labs = [np.asarray(y).reshape(-1) for y in labels]
    if len(preds) != len(labs) or any(p.shape != y.shape for p, y in zip(preds, labs)):
        raise ConfigError("prediction and label batches do not line up")
    total = sum(y.size for y in labs)
    if total == 0:
        raise ConfigError("accuracy of an empty set is undefined")
    wrong = sum(int(np.count_nonzero(p != y)) for p, y in zip(preds, labs))
    return (1.0 - wrong / total) * 100.0


def _layer_macs(cfg: ExperimentConfig, in_dim: int = 784, classes: int = 10) -> tuple[int, int, int]:
    enc = in_dim * cfg.trunk_dim + 2 * cfg.trunk_dim * cfg.latent_dim
    enc_single_head = in_dim * cfg.trunk_dim + cfg.trunk_dim * cfg.latent_dim
    dec = cfg.latent_dim * cfg.decoder_hidden + cfg.decoder_hidden * classes
    return enc, enc_single_head, dec


def flop_report(train: FlopCounter, test: FlopCounter | None = None, cfg: ExperimentConfig | None = None) -> dict:
    """Totals and device/server split of counted multiply-accumulates."""
    counters = [train] + ([test] if test is not None else [])
    by_class = {"device": 0, "server": 0, "host": 0}
    for c in counters:
        for node, macs in c.per_node().items():
            by_class[{"D": "device", "S": "server"}.get(node[:1], "host")] += macs
    total = sum(by_class.values())
    split = by_class["device"] + by_class["server"]
    report = {
        "device_macs": by_class["device"],
        "server_macs": by_class["server"],
        "host_macs": by_class["host"],
        "total_macs": total,
        "train_macs": train.total,
        "test_macs": test.total if test is not None else 0,
        "device_share_pct": 100.0 * by_class["device"] / split if split else 0.0,
        "server_share_pct": 100.0 * by_class["server"] / split if split else 0.0,
    }
    if cfg is not None:
        enc, enc1, dec = _layer_macs(cfg)
        report["analytic_device_share_pct"] = 100.0 * enc / (enc + dec)
        report["single_head_device_share_pct"] = 100.0 * enc1 / (enc1 + dec)
        for k in ("device", "server", "host", "total"):
            report[f"{k}_cycles"] = report[f"{k}_macs"] * cfg.cycles_per_mac
    return report


# -- the run ------------------------------------------------------------------


class _Restart(Exception):
    pass


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "synthetic":
        train = make_synthetic(per_class=cfg.synthetic_per_class, seed=cfg.seed, noise=cfg.synthetic_noise)
        test = make_synthetic(per_class=cfg.synthetic_test_per_class, seed=cfg.seed, noise=cfg.synthetic_noise,
                              split="test")
    else:
        if not cfg.mnist_dir:
            raise ConfigError("dataset 'mnist' needs mnist_dir")
        train, test = load_mnist_dir(cfg.mnist_dir)
    return train.subset(cfg.train_limit), test.subset(cfg.test_limit)


def _make_pairs(cfg: ExperimentConfig, in_dim: int) -> list[PairState]:
    pairs = []
    for i in range(cfg.pairs):
        enc = EncoderParams.init(rngs.stream(cfg.seed, "init", i), in_dim, cfg.trunk_dim, cfg.latent_dim)
        dec = DecoderParams.init(rngs.stream(cfg.seed, "init", SERVER_INIT_OFFSET + i), cfg.latent_dim,
                                 cfg.decoder_hidden)
        pairs.append(PairState(i, f"D{i}", f"S{i}", enc, dec, rngs.stream(cfg.seed, "eps", i),
                               cfg.lr, cfg.beta, cfg.paper_literal))
    return pairs


class Experiment:
    def __init__(self, cfg: ExperimentConfig, train: Dataset | None = None, test: Dataset | None = None):
        cfg.validate()
        self.cfg = cfg
        if train is None or test is None:
            train, test = load_data(cfg)
        self.train, self.test = train, test
        self.train_shards = shard(train, cfg.pairs, cfg.seed)
        self.test_shards = shard(test, cfg.pairs, cfg.seed)
        self.report = MetricsReport(cfg)
        self.events = self.report.events
        self.round = 0
        self.global_epoch = 0
        self.bvib = cfg.mode == "bvib"
        self.shuffle_rngs = [rngs.stream(cfg.seed, "shuffle", i) for i in range(cfg.pairs)]
        self.test_rngs = [rngs.stream(cfg.seed, "test_eps", i) for i in range(cfg.pairs)]
        self.attack = Attack(cfg.attack, lambda e: rngs.stream(cfg.seed, "attack", e))
        self.cluster = (Cluster(cfg.pairs, cfg.term, rngs.stream(cfg.seed, "election"), self.events)
                        if self.bvib else None)
        self.report.cluster = self.cluster
        self.device_alive = [True] * cfg.pairs
        self.host_alive = True
        self._init_models()

    def _init_models(self) -> None:
        self.pairs = _make_pairs(self.cfg, self.train.images.shape[1])
        if not self.bvib:
            self.models = [VIBModel(p.enc, p.dec, self.cfg.beta, self.cfg.lr, self.cfg.paper_literal)
                           for p in self.pairs]
        self.report.pairs = self.pairs

    # -- liveness ----------------------------------------------------------

    @property
    def roster(self) -> list[str]:
        if not self.bvib:
            return [HOST]
        return [f"D{i}" for i in range(self.cfg.pairs)] + [f"S{i}" for i in range(self.cfg.pairs)]

    def _server_alive(self, i: int) -> bool:
        return self.cluster.nodes[i].alive

    def operational(self, i: int) -> bool:
        if not self.bvib:
            return self.host_alive
        return self.device_alive[i] and self._server_alive(i)

    def _apply_attack(self) -> tuple[int, int]:
        leader = self.cluster.leader.name if self.bvib and self.cluster.leader else None
        hit = self.attack.inject(self.global_epoch, self.roster, leader)
        for name in self.roster:
            down = name in hit
            if name == HOST:
                was = self.host_alive
                self.host_alive = not down
            elif name.startswith("D"):
                i = int(name[1:])
                was = self.device_alive[i]
                self.device_alive[i] = not down
            else:
                i = int(name[1:])
                was = self._server_alive(i)
                self.cluster.set_alive(i, not down, self.round)
            if was and down:
                self.events.emit(self.round, "PARALYZE", node=name, epoch=self.global_epoch)
            elif not was and not down:
                self.events.emit(self.round, "RESTORE", node=name, epoch=self.global_epoch)
        devices = sum(1 for n in hit if n.startswith("D") or n == HOST)
        servers = sum(1 for n in hit if n.startswith("S"))
        return devices, servers

    # -- training ----------------------------------------------------------

    def _batch_monolithic(self, epoch: int, b: int, batches) -> list[float]:
        self.round += 1
        if not self.host_alive:
            return []
        losses = []
        for i, model in enumerate(self.models):
            idx = batches[i][b]
            eps = self.pairs[i].eps_rng.standard_normal((len(idx), self.cfg.latent_dim))
            bd = model.train_step(self.train.images[idx], self.train.labels[idx], eps,
                                  self.report.train_flops, HOST)
            losses.append(bd.loss)
        return losses

    def _batch_bvib(self, epoch: int, b: int, batches) -> list[float] | None:
        """Run rounds until batch ``b`` commits; ``None`` if it was skipped."""
        cluster = self.cluster
        counter = self.report.train_flops
        for _ in range(self.cfg.max_batch_attempts):
            self.round += 1
            if not cluster.alive_ids():
                self.events.emit(self.round, "TOTAL_FAILURE")
                raise TotalFailure(f"round {self.round}: every server is paralyzed")
            cluster.heartbeat_tick(self.round)
            leader = cluster.leader
            if leader is None or not leader.alive:
                continue
            active = [p for p in self.pairs if self.operational(p.pair_id)]
            snaps = {p.pair_id: p.snapshot() for p in active}
            msgs = {p.pair_id: device_forward(p, self.train.images[batches[p.pair_id][b]],
                                              self.train.labels[batches[p.pair_id][b]], epoch, b, True, counter)
                    for p in active}
            replies = {}
            losses = []
            for p in active:
                breakdown, grad_msg, entry = server_step(p, msgs[p.pair_id], True, counter)
                cluster.record(p.pair_id, _stamp(entry, self.round))
                replies[p.pair_id] = grad_msg
                losses.append(breakdown.loss)
            for p in active:
                device_backward(p, replies[p.pair_id], counter)
            outcome = cluster.collect_and_commit(self.round)
            if isinstance(outcome, AbortSignal) or (outcome is None and active):
                for p in active:
                    p.restore(snaps[p.pair_id])
                if isinstance(outcome, AbortSignal) and self.cfg.restart_mode == "full" \
                        and self.report.restarts < self.cfg.max_full_restarts:
                    raise _Restart()
                continue
            return losses
        self.events.emit(self.round, "BATCH_SKIPPED", epoch=epoch, batch=b)
        return None

    # -- testing -----------------------------------------------------------

    def _test(self) -> tuple[float, float, float]:
        preds, labels, uppers, lowers = [], [], [], []
        counter = self.report.test_flops
        for p in self.pairs:
            i = p.pair_id
            batches = self.test_shards[i].batches(self.cfg.batches)
            ys = [self.test.labels[idx] for idx in batches]
            labels.extend(ys)
            if not self.operational(i):
                preds.extend(np.full(y.shape, -1) for y in ys)
                continue
            dev, srv = (HOST, HOST) if not self.bvib else (p.device_id, p.server_id)
            up, low = [], []
            for idx, y in zip(batches, ys):
                stats = encode(p.enc, self.test.images[idx], counter, dev)
                z = reparameterize(stats, self.test_rngs[i].standard_normal(stats.mu.shape), self.cfg.paper_literal)
                log_q, _ = decoder_forward(p.dec, z, counter, srv)
                preds.append(np.argmax(log_q, axis=1))
                up.append(mi_upper_bits(stats))
                low.append(mi_lower_bits(log_q, y) + LOG2_CLASSES)
            if self.cfg.mi_record == "last":
                uppers.append(up[-1])
                lowers.append(low[-1])
            else:
                uppers.append(float(np.mean(up)))
                lowers.append(float(np.mean(low)))
        acc = compute_accuracy(preds, labels)
        nan = math.nan
        return (float(np.mean(uppers)) if uppers else nan, float(np.mean(lowers)) if lowers else nan, acc)

    # -- driver ------------------------------------------------------------

    def run(self) -> MetricsReport:
        rep = self.report
        try:
            if self.bvib:
                self.cluster.bootstrap(self.round)
            while True:
                try:
                    self._run_stage()
                    break
                except _Restart:
                    rep.restarts += 1
                    self.events.emit(self.round, "RESTART", stage=rep.restarts + 1)
                    rep.epochs.clear()
                    self._init_models()
        except TotalFailure as exc:
            rep.status, rep.failure = "failed", str(exc)
        except NumericError as exc:
            rep.status, rep.failure = "numeric-failure", f"round {self.round}: {exc}"
            log.error("numeric failure: %s", rep.failure)
        rep.rounds = self.round
        rep.chain_height = self.cluster.chain.height if self.bvib else 0
        if self.cfg.out_dir:
            rep.write(self.cfg.out_dir)
        return rep

    def _run_stage(self) -> None:
        cfg, rep = self.cfg, self.report
        for epoch in range(1, cfg.epochs + 1):
            self.global_epoch += 1
            elections0 = self.cluster.elections if self.bvib else 0
            aborts0 = self.cluster.aborts if self.bvib else 0
            par_dev, par_srv = self._apply_attack()
            batches = [s.batches(cfg.batches, self.shuffle_rngs[s.pair_id]) for s in self.train_shards]
            n_batches = min(len(b) for b in batches)
            losses, skipped = [], 0
            for b in range(n_batches):
                got = self._batch_bvib(epoch, b, batches) if self.bvib else self._batch_monolithic(epoch, b, batches)
                if got is None:
                    skipped += 1
                else:
                    losses.extend(got)
            if cfg.test_every_epoch or epoch == cfg.epochs:
                upper, lower, acc = self._test()
            else:
                upper = lower = acc = math.nan
            rep.epochs.append(EpochMetrics(
                epoch, upper, lower, acc,
                (self.cluster.elections - elections0) if self.bvib else 0,
                (self.cluster.aborts - aborts0) if self.bvib else 0,
                par_dev, par_srv,
                float(np.mean(losses)) if losses else math.nan, skipped,
            ))
            log.info("epoch %d acc=%.2f upper=%.3f lower=%.3f", epoch, acc, upper, lower)
            if self._converged():
                rep.converged_at = epoch
                self.events.emit(self.round, "CONVERGED", epoch=epoch)
                if not (cfg.test_every_epoch or epoch == cfg.epochs):
                    upper, lower, acc = self._test()
                    last = rep.epochs[-1]
                    last.mi_upper_bits, last.mi_lower_bits, last.accuracy_pct = upper, lower, acc
                break

    def _converged(self) -> bool:
        w, tol = self.cfg.converge_window, self.cfg.converge_tol
        losses = self.report.series("train_loss")
        if tol <= 0 or len(losses) < w + 1 or np.isnan(losses[-w - 1:]).any():
            return False
        now, before = losses[-w:].mean(), losses[-w - 1:-1].mean()
        return abs(now - before) <= tol * abs(before)


def _stamp(entry, round_: int):
    return replace(entry, timestamp=round_)


def run_experiment(config: ExperimentConfig, train: Dataset | None = None, test: Dataset | None = None) -> MetricsReport:
    return Experiment(config, train, test).run()
