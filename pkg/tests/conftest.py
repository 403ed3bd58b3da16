import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedppa.alignment import AlignmentConfig
from fedppa.data import PartitionConfig
from fedppa.nn import LayerSpec, ModelArchitecture, backward_task_loss, cross_entropy, forward
from fedppa.orchestrator import DataConfig, RunConfig
from oracles import central_difference, rel_error

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)


def mlp(sizes, name="mlp"):
    layers = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(LayerSpec.dense(a, b))
        if k < len(sizes) - 2:
            layers.append(LayerSpec.relu())
    return ModelArchitecture(name, (sizes[0],), layers, sizes[-1])


def small_cnn(channels=2, size=6, classes=3):
    layers = (
        LayerSpec.conv(1, channels),
        LayerSpec.relu(),
        LayerSpec.maxpool(),
        LayerSpec.flatten(),
        LayerSpec.dense(channels * (size // 2) ** 2, classes),
    )
    return ModelArchitecture("cnn", (1, size, size), layers, classes)


def synth_run_config(**changes) -> RunConfig:
    """A few-second federated run on small synthetic images."""
    base = dict(
        strategies=("fedppa",),
        rounds=2,
        local_epochs=1,
        batch_size=16,
        record_seconds=False,
        partition=PartitionConfig(alpha=0.5, num_clients=4, seed=0, min_samples=8),
        alignment=AlignmentConfig(steps_per_layer=2, sample_cap=64),
        data=DataConfig(source="synth", synth_per_class=12, synth_test_per_class=4, synth_image_size=12),
    )
    base.update(changes)
    return RunConfig(**base)


def worst_gradient_error(params, x, y):
    """Largest relative error between backprop and central differences over all parameters."""
    _, grads = backward_task_loss(params, x, y)

    def loss():
        return cross_entropy(forward(params, x)[0], y)[0]

    worst = 0.0
    for lp, g in zip(params.layers, grads):
        for arr, ga in ((lp.weight, g.weight), (lp.bias, g.bias)):
            if arr.size:
                worst = max(worst, rel_error(ga, central_difference(loss, arr, eps=1e-5)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
