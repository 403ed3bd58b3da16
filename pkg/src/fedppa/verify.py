"""Fast self-check suite behind ``fedppa verify``.

Each check returns a :class:`Check` with the measured value and the threshold
it is held to. ``inject`` names a check whose analytic side is deliberately
corrupted, which is how the suite itself is tested.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .alignment import AlignmentConfig, progressive_align
from .data import PartitionConfig, entropy_weights, partition_dirichlet, synth_dataset
from .nn import LayerParams, LayerSpec, ModelArchitecture, backward_task_loss, cross_entropy, forward, init_params
from .orchestrator import DataConfig, RunConfig, build_federation, init_state, run_round

FAULTS = ("gradient",)


@dataclass(frozen=True)
class Check:
    name: str
    measured: float
    threshold: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<22} measured={self.measured:.3e}  threshold={self.threshold:.1e}"


def _small_net():
    layers = (
        LayerSpec.conv(1, 2, 3),
        LayerSpec.relu(),
        LayerSpec.flatten(),
        LayerSpec.dense(2 * 5 * 5, 6),
        LayerSpec.relu(),
        LayerSpec.dense(6, 3),
    )
    return ModelArchitecture("verify", (1, 5, 5), layers, 3)


def check_gradient(inject: str | None = None, seed: int = 0, coords: int = 12) -> Check:
    """Backprop gradient vs central finite differences on a small conv net."""
    rng = np.random.default_rng(seed)
    arch = _small_net()
    params = init_params(arch, seed)
    x = rng.normal(size=(4, 1, 5, 5))
    y = rng.integers(0, 3, size=4)
    _, grads = backward_task_loss(params, x, y)
    if inject == "gradient":
        grads = [LayerParams(g.weight * 1.01, g.bias) for g in grads]

    def loss(p):
        return cross_entropy(forward(p, x)[0], y)[0]

    h = 1e-5
    worst = 0.0
    for j in (0, 3, 5):
        w = params.layers[j].weight
        for flat in rng.choice(w.size, size=min(coords, w.size), replace=False):
            idx = np.unravel_index(flat, w.shape)
            orig = w[idx]
            w[idx] = orig + h
            up = loss(params)
            w[idx] = orig - h
            down = loss(params)
            w[idx] = orig
            num = (up - down) / (2 * h)
            ana = grads[j].weight[idx]
            worst = max(worst, abs(ana - num) / max(abs(ana) + abs(num), 1e-8))
    return Check("gradient_check", worst, 1e-4, worst <= 1e-4)


def check_entropy(seeds: int = 20) -> Check:
    data = synth_dataset(10, 30, 0, (1, 4, 4))
    worst = 0.0
    for s in range(seeds):
        for alpha in (0.01, 0.5):
            shards = partition_dirichlet(data, PartitionConfig(alpha=alpha, num_clients=8, seed=s, min_samples=4))
            w = entropy_weights(shards).normalized
            worst = max(worst, abs(float(np.sum(w)) - 1.0))
    return Check("entropy_normalization", worst, 1e-12, worst <= 1e-12)


def _tiny_run_config(strategy: str) -> RunConfig:
    return RunConfig(
        strategies=(strategy,),
        rounds=2,
        local_epochs=1,
        batch_size=16,
        record_seconds=False,
        partition=PartitionConfig(alpha=0.5, num_clients=4, seed=0, min_samples=8),
        alignment=AlignmentConfig(steps_per_layer=0),
        assignment=("A",) * 4,
        data=DataConfig(source="synth", synth_per_class=12, synth_test_per_class=4, synth_image_size=12),
    )


def check_fedavg_degeneracy() -> Check:
    """Homogeneous clients, uniform weights, no alignment steps: FedPPA == FedAvg."""
    cfg = _tiny_run_config("fedppa")
    fed = build_federation(cfg)
    states = {}
    for strategy in ("fedppa", "fedavg"):
        state = init_state(cfg, fed, strategy)
        history = []
        for _ in range(cfg.rounds):
            state, _ = run_round(state, cfg, fed)
            history.append(state)
        states[strategy] = history
    worst = 0.0
    for a, b in zip(states["fedppa"], states["fedavg"]):
        for cid in fed.client_ids:
            for la, lb in zip(a.params[cid].layers, b.params[cid].layers):
                if la.weight.size:
                    worst = max(worst, float(np.max(np.abs(la.weight - lb.weight))))
                if la.bias.size:
                    worst = max(worst, float(np.max(np.abs(la.bias - lb.bias))))
    return Check("fedavg_degeneracy", worst, 1e-12, worst <= 1e-12)


def check_alignment_fixed_point() -> Check:
    """Aligning a model to itself must leave every parameter bitwise unchanged."""
    cfg = replace(_tiny_run_config("fedppa"), alignment=AlignmentConfig(steps_per_layer=5))
    fed = build_federation(cfg)
    shard = fed.shards[0]
    model = init_params(fed.archs[shard.client_id], 3, shard.client_id)
    aligned, report = progressive_align(model.copy(), model, shard, range(len(model.arch)), cfg.alignment)
    worst = max(report.loss_post, 0.0)
    for la, lb in zip(aligned.layers, model.layers):
        if la.weight.size:
            worst = max(worst, float(np.max(np.abs(la.weight - lb.weight))))
    return Check("alignment_fixed_point", worst, 0.0, worst == 0.0)


def run_checks(inject: str | None = None) -> list:
    return [
        check_gradient(inject),
        check_entropy(),
        check_fedavg_degeneracy(),
        check_alignment_fixed_point(),
    ]
