"""Federated round loop for FedAvg, MaxCommon, FedPPA and FedPPA+.

One round runs, in order: local training on every client, clustering of the
clients' common layers, server aggregation (uniform or entropy-weighted),
progressive alignment of each client's aggregated common layers (FedPPA
variants only), distribution of the result back to the clients, and
evaluation.

Client-level work is mapped over a thread pool, but every cross-client
reduction walks clients in id order and every client draws from its own
seeded RNG stream, so the results do not depend on the pool size.
"""
from __future__ import annotations

import csv
import io
import json
import os
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .aggregation import AggregationPlan, aggregate
from .alignment import AlignmentConfig, progressive_align
from .data import (
    LabeledDataset,
    PartitionConfig,
    entropy_weights,
    load_bundled_mnist,
    load_idx,
    partition_dirichlet,
    synth_dataset,
)
from .errors import FedError, InputError
from .nn import LayerParams, ParameterSet, SgdConfig, SgdState, accuracy, client_seed, init_params, train_local
from .svg import line_chart
from .zoo import FAMILY_NAMES, extract_max_common_layers, family_by_name, group_by_architecture, heads_common

STRATEGIES = ("fedavg", "maxcommon", "fedppa", "fedppa+")
DISPLAY = {"fedavg": "FedAvg", "maxcommon": "MaxCommon", "fedppa": "FedPPA", "fedppa+": "FedPPA+"}
CSV_HEADER = (
    "round",
    "client_id",
    "client_acc",
    "personalized_acc",
    "global_acc",
    "align_loss_pre",
    "align_loss_post",
    "seconds",
)


def slug(strategy: str) -> str:
    return strategy.replace("+", "_plus")


@dataclass(frozen=True)
class DataConfig:
    source: str = "mnist5k"  # "mnist5k" | "idx" | "synth"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    subset: int = 0  # 0 keeps the whole training pool
    num_classes: int = 10
    synth_per_class: int = 60
    synth_test_per_class: int = 20
    synth_image_size: int = 28
    synth_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    strategies: tuple = STRATEGIES
    rounds: int = 51
    local_epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    workers: int = 1
    record_seconds: bool = True
    eq7_literal: bool = False
    checkpoint: bool = False
    sgd: SgdConfig = field(default_factory=SgdConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    scale: str = "tiny"
    assignment: tuple = ()
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if isinstance(self.strategies, str):
            object.__setattr__(self, "strategies", (self.strategies,))
        object.__setattr__(self, "strategies", tuple(self.strategies))
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad or not self.strategies:
            raise InputError(f"strategies must be drawn from {STRATEGIES}, got {self.strategies}")
        if not self.assignment:
            m = self.partition.num_clients
            object.__setattr__(self, "assignment", tuple(FAMILY_NAMES[i * 4 // m] for i in range(m)))
        object.__setattr__(self, "assignment", tuple(self.assignment))
        if len(self.assignment) != self.partition.num_clients:
            raise InputError(
                f"{len(self.assignment)} architecture assignments for {self.partition.num_clients} clients"
            )
        if self.rounds < 1 or self.local_epochs < 0 or self.batch_size < 1 or self.workers < 1:
            raise InputError("rounds, batch_size and workers must be >= 1; local_epochs >= 0")

    @property
    def num_clients(self) -> int:
        return self.partition.num_clients


# ---------------------------------------------------------------------------
# static federation inputs


@dataclass
class Federation:
    """Everything that stays fixed over a run: shards, architectures, held-out test set."""

    shards: list
    archs: dict
    full_test: LabeledDataset

    @property
    def client_ids(self) -> list:
        return [s.client_id for s in self.shards]


def load_datasets(cfg: DataConfig):
    """``(federated pool, held-out global test set)`` for a data config."""
    if cfg.source == "mnist5k":
        pool, test = load_bundled_mnist("train"), load_bundled_mnist("test")
    elif cfg.source == "idx":
        pool = load_idx(cfg.train_images, cfg.train_labels, cfg.num_classes)
        test = load_idx(cfg.test_images, cfg.test_labels, cfg.num_classes)
    elif cfg.source == "synth":
        size = cfg.synth_image_size
        full = synth_dataset(
            cfg.num_classes, cfg.synth_per_class + cfg.synth_test_per_class, cfg.synth_seed, (1, size, size)
        )
        test_idx = np.concatenate(
            [np.flatnonzero(full.labels == c)[: cfg.synth_test_per_class] for c in range(cfg.num_classes)]
        )
        mask = np.ones(len(full), dtype=bool)
        mask[test_idx] = False
        pool, test = full.subset(np.flatnonzero(mask)), full.subset(np.sort(test_idx))
    else:
        raise InputError(f"unknown data source {cfg.source!r}")
    if cfg.subset:
        pool = pool.subset(np.arange(min(cfg.subset, len(pool))))
    return pool, test


def build_federation(cfg: RunConfig, pool: LabeledDataset | None = None, full_test: LabeledDataset | None = None, shards=None) -> Federation:
    if pool is None or full_test is None:
        pool, full_test = load_datasets(cfg.data)
    if shards is None:
        shards = partition_dirichlet(pool, cfg.partition)
    family = family_by_name(cfg.scale, pool.images.shape[1:], pool.num_classes)
    archs = {s.client_id: family[cfg.assignment[k]] for k, s in enumerate(shards)}
    return Federation(shards, archs, full_test)


# ---------------------------------------------------------------------------
# round state


@dataclass
class RoundState:
    strategy: str
    round_index: int
    params: dict
    opt_states: dict
    weights: object = None  # EntropyWeights for fedppa+
    clusters: tuple = ()
    global_params: ParameterSet | None = None
    global_cluster: str = ""


@dataclass
class RoundMetrics:
    round: int
    client_ids: list
    client_acc: list
    personalized_acc: float
    global_acc: float
    align_loss_pre: float
    align_loss_post: float
    seconds: float
    global_cluster: str = ""
    global_client: int = -1
    alignment: dict = field(default_factory=dict)  # client id -> AlignmentReport

    def csv_row(self) -> list:
        return [
            str(self.round),
            ";".join(str(c) for c in self.client_ids),
            ";".join(repr(float(a)) for a in self.client_acc),
            repr(float(self.personalized_acc)),
            repr(float(self.global_acc)),
            repr(float(self.align_loss_pre)),
            repr(float(self.align_loss_post)),
            repr(float(self.seconds)),
        ]


def init_state(cfg: RunConfig, fed: Federation, strategy: str) -> RoundState:
    if strategy not in STRATEGIES:
        raise InputError(f"unknown strategy {strategy!r}")
    params = {cid: init_params(fed.archs[cid], client_seed(cfg.seed, cid), cid) for cid in fed.client_ids}
    return RoundState(strategy, 0, params, {cid: SgdState() for cid in fed.client_ids})


def pool_size(requested: int) -> int:
    cap = os.environ.get("FEDPPA_THREADS")
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError:
            pass
    return max(1, requested)


def _map(fn, items, workers):
    items = list(items)
    workers = pool_size(workers)
    if workers == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def clusters_for(strategy: str, fed: Federation) -> tuple:
    models = [(cid, fed.archs[cid]) for cid in fed.client_ids]
    if strategy == "fedavg":
        return tuple(group_by_architecture(models))
    return tuple(extract_max_common_layers(models))


def global_representative(clusters) -> tuple:
    """``(cluster, client id)`` whose aggregated model serves as the global model.

    Largest cluster first (ties: smallest member id), then the member with the
    most common layers (ties: smallest id).
    """
    best = max(clusters, key=lambda c: (len(c.member_clients), -c.member_clients[0]))
    rep = max(best.member_clients, key=lambda cid: (best.depth(cid), -cid))
    return best, rep


def evaluate_personalized(state: RoundState, fed: Federation, workers: int = 1):
    """Each client's accuracy on its own test split, plus the mean."""
    accs = _map(
        lambda s: accuracy(state.params[s.client_id], s.test.images, s.test.labels), fed.shards, workers
    )
    return accs, float(np.mean(accs))


def evaluate_global(state: RoundState, full_test: LabeledDataset) -> float:
    if state.global_params is None:
        raise InputError("no aggregated global model yet")
    return accuracy(state.global_params, full_test.images, full_test.labels)


def run_round(state: RoundState, cfg: RunConfig, fed: Federation):
    """Advance ``state`` by one federated round. Returns ``(new_state, RoundMetrics)``."""
    started = time.perf_counter()
    t = state.round_index + 1
    strategy = state.strategy
    shards = {s.client_id: s for s in fed.shards}
    ids = fed.client_ids

    weights = state.weights
    if strategy == "fedppa+" and weights is None:
        weights = entropy_weights(fed.shards)

    def local(cid):
        rng = np.random.default_rng([cfg.seed, cid, t])
        s = shards[cid]
        p, o, _ = train_local(
            state.params[cid],
            state.opt_states[cid],
            s.train.images,
            s.train.labels,
            epochs=cfg.local_epochs,
            batch_size=cfg.batch_size,
            cfg=cfg.sgd,
            rng=rng,
        )
        return p, o

    trained = dict(zip(ids, _map(local, ids, cfg.workers)))
    params = {cid: trained[cid][0] for cid in ids}
    opt_states = {cid: trained[cid][1] for cid in ids}

    clusters = clusters_for(strategy, fed)
    plan = AggregationPlan(
        clusters,
        "entropy" if strategy == "fedppa+" else "uniform",
        weights,
        cfg.eq7_literal,
    )
    aggregated = aggregate(plan, params)
    g_cluster, g_client = global_representative(clusters)
    global_params = aggregated[g_client].copy()

    reports = {}
    if strategy in ("fedppa", "fedppa+"):
        common = {cid: c.common_indices[cid] for c in clusters for cid in c.member_clients}

        def align(cid):
            return progressive_align(aggregated[cid], params[cid], shards[cid], common[cid], cfg.alignment)

        results = _map(align, ids, cfg.workers)
        new_params = {cid: r[0] for cid, r in zip(ids, results)}
        reports = {cid: r[1] for cid, r in zip(ids, results)}
    else:
        new_params = aggregated

    new_state = RoundState(strategy, t, new_params, opt_states, weights, clusters, global_params, g_cluster.cluster_id)
    accs, personalized = evaluate_personalized(new_state, fed, cfg.workers)
    glob = evaluate_global(new_state, fed.full_test)
    elapsed = time.perf_counter() - started
    metrics = RoundMetrics(
        round=t,
        client_ids=list(ids),
        client_acc=accs,
        personalized_acc=personalized,
        global_acc=glob,
        align_loss_pre=float(sum(r.loss_pre for r in reports.values())),
        align_loss_post=float(sum(r.loss_post for r in reports.values())),
        seconds=elapsed if cfg.record_seconds else 0.0,
        global_cluster=g_cluster.cluster_id,
        global_client=g_client,
        alignment=reports,
    )
    return new_state, metrics


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: RoundState, path):
    arrays = {"round_index": np.array(state.round_index)}
    for cid, p in state.params.items():
        for j, lp in enumerate(p.layers):
            arrays[f"p{cid}_{j}_w"] = lp.weight
            arrays[f"p{cid}_{j}_b"] = lp.bias
    for cid, o in state.opt_states.items():
        for j, v in enumerate(o.velocity or []):
            arrays[f"v{cid}_{j}_w"] = v.weight
            arrays[f"v{cid}_{j}_b"] = v.bias
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, strategy: str, fed: Federation) -> RoundState:
    with np.load(path) as z:
        params, opts = {}, {}
        for cid in fed.client_ids:
            arch = fed.archs[cid]
            params[cid] = ParameterSet(
                cid, arch, [LayerParams(z[f"p{cid}_{j}_w"], z[f"p{cid}_{j}_b"]) for j in range(len(arch))]
            )
            if f"v{cid}_0_w" in z:
                opts[cid] = SgdState([LayerParams(z[f"v{cid}_{j}_w"], z[f"v{cid}_{j}_b"]) for j in range(len(arch))])
            else:
                opts[cid] = SgdState()
        return RoundState(strategy, int(z["round_index"]), params, opts)


# ---------------------------------------------------------------------------
# experiments


class RoundError(FedError, RuntimeError):
    """A round failed; a crash report was written next to the metrics."""


@dataclass
class StrategyResult:
    strategy: str
    history: list  # RoundMetrics per round

    def best(self, key: str = "personalized_acc"):
        """``(best value, round)``; the earliest round wins ties."""
        best = max(self.history, key=lambda m: (getattr(m, key), -m.round))
        return getattr(best, key), best.round

    def final(self, key: str = "personalized_acc") -> float:
        return getattr(self.history[-1], key)


@dataclass
class ExperimentResult:
    results: dict
    output_dir: Path | None = None
    heads_common: bool = False
    global_cluster: str = ""


def run_strategy(cfg: RunConfig, fed: Federation, strategy: str, csv_path=None, checkpoint_dir=None, on_round=None) -> StrategyResult:
    state = init_state(cfg, fed, strategy)
    history = []
    fh = writer = None
    if csv_path is not None:
        fh = open(csv_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        fh.flush()
    try:
        for _ in range(cfg.rounds):
            try:
                state, metrics = run_round(state, cfg, fed)
            except Exception as exc:
                report = {
                    "strategy": strategy,
                    "round": state.round_index + 1,
                    "seed": cfg.seed,
                    "partition_seed": cfg.partition.seed,
                    "error": f"{type(exc).__name__}: {exc}",
                    "traceback": traceback.format_exc(),
                }
                if csv_path is not None:
                    crash = Path(csv_path).with_name(f"crash_{slug(strategy)}.json")
                    crash.write_text(json.dumps(report, indent=2), encoding="utf-8")
                raise RoundError(
                    f"{strategy} round {report['round']} (seed {cfg.seed}) failed: {report['error']}"
                ) from exc
            history.append(metrics)
            if writer is not None:
                writer.writerow(metrics.csv_row())
                fh.flush()
            if checkpoint_dir is not None:
                save_checkpoint(state, Path(checkpoint_dir) / f"{slug(strategy)}_round{state.round_index:03d}.npz")
            if on_round is not None:
                on_round(strategy, metrics)
    finally:
        if fh is not None:
            fh.close()
    return StrategyResult(strategy, history)


def summary_text(cfg: RunConfig, result: ExperimentResult) -> str:
    out = io.StringIO()
    out.write("[experiment]\n")
    out.write(f"data = {cfg.data.source}\n")
    out.write(f"clients = {cfg.num_clients}\n")
    out.write(f"rounds = {cfg.rounds}\n")
    out.write(f"local_epochs = {cfg.local_epochs}\n")
    out.write(f"alpha = {cfg.partition.alpha!r}\n")
    out.write(f"seed = {cfg.seed}\n")
    out.write(f"assignment = {','.join(cfg.assignment)}\n")
    out.write("global_model = aggregated model of the largest cluster (pre-alignment)\n")
    out.write(f"global_cluster = {result.global_cluster}\n")
    out.write(f"heads_common = {'yes' if result.heads_common else 'no'}\n")
    out.write(f"alignment_sample_cap = {cfg.alignment.sample_cap}\n")
    out.write(f"eq7_literal = {'yes' if cfg.eq7_literal else 'no'}\n")
    out.write("\n[best]\n")
    rows = [("strategy", "personalized_acc", "round", "global_acc", "round")]
    for strategy, res in result.results.items():
        pa, pr = res.best("personalized_acc")
        ga, gr = res.best("global_acc")
        rows.append((DISPLAY[strategy], f"{100 * pa:.2f}", str(pr), f"{100 * ga:.2f}", str(gr)))
    widths = [max(len(r[k]) for r in rows) for k in range(5)]
    for r in rows:
        out.write("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() + "\n")
    return out.getvalue()


def run_experiment(cfg: RunConfig, output_dir=None, fed: Federation | None = None, on_round=None) -> ExperimentResult:
    """Run every configured strategy on the same federation.

    With ``output_dir`` set, writes ``metrics_<strategy>.csv`` (streamed each
    round), ``accuracy_<strategy>.svg``, ``personalized_accuracy.svg`` and
    ``summary.txt``.
    """
    fed = fed or build_federation(cfg)
    out = None
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
    ckpt = None
    if out is not None and cfg.checkpoint:
        ckpt = out / "checkpoints"
        ckpt.mkdir(exist_ok=True)
    results = {}
    for strategy in cfg.strategies:
        csv_path = out / f"metrics_{slug(strategy)}.csv" if out is not None else None
        results[strategy] = run_strategy(cfg, fed, strategy, csv_path, ckpt, on_round)

    clusters = extract_max_common_layers([(cid, fed.archs[cid]) for cid in fed.client_ids])
    g_cluster, g_client = global_representative(clusters)
    result = ExperimentResult(
        results,
        out,
        heads_common(clusters, fed.archs),
        f"{g_cluster.cluster_id} (members {','.join(map(str, g_cluster.member_clients))}; client {g_client})",
    )
    if out is not None:
        for strategy, res in results.items():
            rounds = [m.round for m in res.history]
            svg = line_chart(
                {
                    "personalized": (rounds, [m.personalized_acc for m in res.history]),
                    "global": (rounds, [m.global_acc for m in res.history]),
                },
                title=f"{DISPLAY[strategy]} accuracy",
            )
            (out / f"accuracy_{slug(strategy)}.svg").write_text(svg, encoding="utf-8")
        svg = line_chart(
            {
                DISPLAY[s]: ([m.round for m in r.history], [m.personalized_acc for m in r.history])
                for s, r in results.items()
            },
            title=f"Personalized accuracy (alpha={cfg.partition.alpha!r})",
        )
        (out / "personalized_accuracy.svg").write_text(svg, encoding="utf-8")
        (out / "summary.txt").write_text(summary_text(cfg, result), encoding="utf-8")
    return result


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, **changes)
