"""Progressive parameter alignment.

After aggregation, a client's common layers are nudged so that, fed with the
client's own training images, each layer reproduces the output the client's
pre-aggregation model produced at that layer. Layers are handled in ascending
order; layer ``j`` sees the output of the already-aligned layers ``< j`` and
only its own weights move. The objective for one layer is the per-sample
squared L2 distance between new and stored features, averaged over samples.

Each step moves along the negative gradient. With the default
``line_search="exact"`` the step size is the exact minimizer along that
direction (the loss is quadratic in a dense or conv layer's parameters);
``"backtracking"`` starts from ``align_lr`` instead. Either way the step is
halved until the loss does not increase, and after ``max_halvings`` failed
halvings the layer is left as is.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ClientDataset
from .errors import DimensionError, InputError, NumericError
from .nn import (
    FeatureMatrix,
    LayerParams,
    ParameterSet,
    apply_prepared,
    feature_loss,
    forward,
    layer_backward,
    layer_forward,
    prepare_input,
)


@dataclass(frozen=True)
class AlignmentConfig:
    steps_per_layer: int = 5
    align_lr: float = 0.01
    sample_cap: int = 512
    max_halvings: int = 10
    line_search: str = "exact"  # or "backtracking"

    def __post_init__(self):
        # 0 steps disables alignment but still reports the feature losses
        if self.steps_per_layer < 0:
            raise InputError("steps_per_layer must be >= 0")
        if not self.align_lr > 0:
            raise InputError("align_lr must be > 0")
        if self.sample_cap < 1:
            raise InputError("sample_cap must be >= 1")
        if self.max_halvings < 0:
            raise InputError("max_halvings must be >= 0")
        if self.line_search not in ("backtracking", "exact"):
            raise InputError(f"unknown line_search {self.line_search!r}")


@dataclass(frozen=True)
class AlignmentRow:
    layer: int
    loss_pre: float
    loss_post: float
    steps: int
    halvings: int


@dataclass
class AlignmentReport:
    rows: list = field(default_factory=list)

    @property
    def order(self) -> list:
        return [r.layer for r in self.rows]

    @property
    def loss_pre(self) -> float:
        return float(sum(r.loss_pre for r in self.rows))

    @property
    def loss_post(self) -> float:
        return float(sum(r.loss_post for r in self.rows))


def alignment_samples(shard: ClientDataset, sample_cap: int) -> np.ndarray:
    n = len(shard.train)
    if n == 0:
        raise InputError(f"client {shard.client_id} has no training samples to align on")
    return shard.train.images[: min(sample_cap, n)]


def capture_targets(old_model: ParameterSet, shard: ClientDataset, common_indices, sample_cap: int = 512) -> dict:
    """Features of ``old_model`` at every common layer over the client's first samples."""
    samples = alignment_samples(shard, sample_cap)
    if not len(common_indices):
        return {}
    _, feats = forward(old_model, samples, capture=common_indices, stop=max(common_indices) + 1)
    return feats


def _diagnostic(layer, lp, loss):
    return (
        f"non-finite alignment loss at layer {layer}: loss={loss!r}, "
        f"|W|={float(np.linalg.norm(lp.weight))!r}, |b|={float(np.linalg.norm(lp.bias))!r}"
    )


def _loss(spec, lp, prepared, target):
    out, cache = apply_prepared(spec, lp, prepared)
    loss, dout = feature_loss(out, target)
    return loss, out, cache, dout


def align_layer(
    new_model: ParameterSet,
    samples: np.ndarray,
    layer: int,
    target: FeatureMatrix,
    cfg: AlignmentConfig,
    layer_input: np.ndarray | None = None,
):
    """Gradient-descent alignment of one layer. Returns ``(model, AlignmentRow)``.

    ``samples`` are the client images the target was computed on; pass
    ``layer_input`` to skip recomputing the forward pass up to ``layer``.
    """
    arch = new_model.arch
    if not 0 <= layer < len(arch):
        raise InputError(f"layer {layer} outside model of {len(arch)} layers")
    spec = arch.layers[layer]
    if target.rows != arch.feature_dim(layer) or target.cols != len(samples):
        raise DimensionError(
            f"target is {target.rows}x{target.cols}, layer {layer} produces "
            f"{arch.feature_dim(layer)}x{len(samples)}"
        )
    if layer_input is None:
        layer_input = forward(new_model, samples, stop=layer)[0] if layer else np.asarray(samples, dtype=np.float64)
    goal = target.as_batch(arch.shapes[layer])
    lp = new_model.layers[layer]

    steps = halvings = 0
    if not spec.has_params:
        out, _ = layer_forward(spec, lp, layer_input)
        loss = feature_loss(out, goal)[0]
        if not np.isfinite(loss):
            raise NumericError(_diagnostic(layer, lp, loss))
        return new_model, AlignmentRow(layer, loss, loss, 0, 0)
    prepared = prepare_input(spec, layer_input)
    loss, out, cache, dout = _loss(spec, lp, prepared, goal)
    if not np.isfinite(loss):
        raise NumericError(_diagnostic(layer, lp, loss))
    pre = loss
    for _ in range(cfg.steps_per_layer):
        if loss == 0.0:
            break
        _, grad = layer_backward(spec, lp, cache, dout, need_dx=False)
        eta = cfg.align_lr
        if cfg.line_search == "exact":
            # output is linear in (W, b), so running the layer with the
            # gradient as parameters gives the directional image J g
            jg, _ = apply_prepared(spec, grad, prepared)
            resid = out - goal
            denom = float(np.sum(jg * jg))
            if denom > 0:
                eta = float(np.sum(resid * jg)) / denom
        accepted = False
        for _h in range(cfg.max_halvings + 1):
            cand = LayerParams(lp.weight - eta * grad.weight, lp.bias - eta * grad.bias)
            c_loss, c_out, c_cache, c_dout = _loss(spec, cand, prepared, goal)
            if not np.isfinite(c_loss):
                raise NumericError(_diagnostic(layer, cand, c_loss))
            if c_loss <= loss:
                accepted = True
                break
            eta *= 0.5
            halvings += 1
        if not accepted:
            break
        lp, loss, out, cache, dout = cand, c_loss, c_out, c_cache, c_dout
        steps += 1

    layers = list(new_model.layers)
    layers[layer] = lp
    aligned = ParameterSet(new_model.client_id, arch, layers)
    return aligned, AlignmentRow(layer, pre, loss, steps, halvings)


def progressive_align(
    new_model: ParameterSet,
    old_model: ParameterSet,
    shard: ClientDataset,
    common_indices: Sequence[int],
    cfg: AlignmentConfig,
):
    """Align every common layer of ``new_model`` to ``old_model``, first to last.

    Returns ``(aligned_model, AlignmentReport)``; rows are recorded for layers
    that carry parameters.
    """
    common = sorted(common_indices)
    report = AlignmentReport()
    if not common:
        return new_model, report
    if common != list(range(len(common))):
        raise InputError(f"common layers {common} are not a leading prefix")
    if new_model.arch.signatures != old_model.arch.signatures:
        raise DimensionError("new and old models have different architectures")
    samples = alignment_samples(shard, cfg.sample_cap)
    targets = capture_targets(old_model, shard, common, cfg.sample_cap)

    model = new_model
    x = np.asarray(samples, dtype=np.float64)
    for j in common:
        spec = model.arch.layers[j]
        if spec.has_params:
            model, row = align_layer(model, samples, j, targets[j], cfg, layer_input=x)
            report.rows.append(row)
        x, _ = layer_forward(spec, model.layers[j], x)
    return model, report
