"""Server-side aggregation of common layers.

All reductions walk contributors in ascending client-id order so results do
not depend on how client work was scheduled.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import EntropyWeights
from .errors import ConsistencyError, InputError
from .nn import LayerParams, ParameterSet
from .zoo import CommonLayerSet


def _layer(params: Mapping[int, ParameterSet], cid: int, j: int) -> LayerParams:
    try:
        return params[cid].layers[j]
    except (KeyError, IndexError):
        raise ConsistencyError(f"client {cid} has no parameters for layer {j}") from None


def _check_shapes(params, ids, j):
    ref = _layer(params, ids[0], j)
    for cid in ids[1:]:
        lp = _layer(params, cid, j)
        if lp.weight.shape != ref.weight.shape or lp.bias.shape != ref.bias.shape:
            raise ConsistencyError(
                f"layer {j}: client {cid} has {lp.weight.shape} but client {ids[0]} has {ref.weight.shape}"
            )


def _mean(params, ids, j) -> LayerParams:
    first = _layer(params, ids[0], j)
    w, b = first.weight.copy(), first.bias.copy()
    for cid in ids[1:]:
        lp = _layer(params, cid, j)
        w += lp.weight
        b += lp.bias
    n = len(ids)
    return LayerParams(w / n, b / n)


def _weighted(params, ids, j, coeffs) -> LayerParams:
    first = _layer(params, ids[0], j)
    w, b = coeffs[0] * first.weight, coeffs[0] * first.bias
    for cid, a in zip(ids[1:], coeffs[1:]):
        lp = _layer(params, cid, j)
        w += a * lp.weight
        b += a * lp.bias
    return LayerParams(w, b)


def _rebuild(cluster, params, updates):
    out = {}
    for cid in cluster.member_clients:
        old = params[cid]
        layers = [updates[(cid, j)].copy() if (cid, j) in updates else lp.copy() for j, lp in enumerate(old.layers)]
        out[cid] = ParameterSet(cid, old.arch, layers)
    return out


def _groups(cluster: CommonLayerSet):
    """``{(position, contributor ids): [recipients]}`` for a cluster."""
    groups = {}
    for (cid, j), ids in sorted(cluster.contributors.items()):
        groups.setdefault((j, ids), []).append(cid)
    return groups


def aggregate_uniform(cluster: CommonLayerSet, params: Mapping[int, ParameterSet]) -> dict:
    """Replace every common layer by the plain mean over its contributors.

    Non-common layers are copied through unchanged.
    """
    updates = {}
    for (j, ids), recipients in _groups(cluster).items():
        _check_shapes(params, ids, j)
        mean = _mean(params, ids, j)
        for cid in recipients:
            updates[(cid, j)] = mean
    return _rebuild(cluster, params, updates)


def contributor_weights(weights: EntropyWeights, ids: Sequence[int]):
    """Entropy weights of ``ids`` renormalized to sum to one, or ``None`` if uniform.

    ``None`` means the weights are all equal (or all zero) and the caller should
    take the plain mean, which keeps equal-entropy runs bitwise identical to
    uniform aggregation.
    """
    raw = np.array([weights.for_client(cid) for cid in ids])
    if raw.max() == raw.min():
        return None
    return raw / raw.sum()


def aggregate_entropy(
    cluster: CommonLayerSet,
    params: Mapping[int, ParameterSet],
    weights: EntropyWeights,
    *,
    literal: bool = False,
) -> dict:
    """Entropy-weighted mean over each common layer's contributors.

    With ``literal=True`` each recipient instead gets its own weight times the
    plain mean (``e_i * mean``), i.e. the weighting read verbatim; this shrinks
    parameters every round and is kept only for comparison.
    """
    missing = [cid for cid in cluster.member_clients if cid not in weights.client_ids]
    if missing:
        raise InputError(f"no entropy weight for clients {missing}")
    updates = {}
    for (j, ids), recipients in _groups(cluster).items():
        _check_shapes(params, ids, j)
        if literal:
            mean = _mean(params, ids, j)
            for cid in recipients:
                e = weights.for_client(cid)
                updates[(cid, j)] = LayerParams(e * mean.weight, e * mean.bias)
            continue
        coeffs = contributor_weights(weights, ids)
        agg = _mean(params, ids, j) if coeffs is None else _weighted(params, ids, j, coeffs)
        for cid in recipients:
            updates[(cid, j)] = agg
    return _rebuild(cluster, params, updates)


def fedavg_aggregate(groups: Sequence[Sequence[ParameterSet]]) -> dict:
    """Elementwise mean of every layer within each same-architecture group."""
    out = {}
    for group in groups:
        group = sorted(group, key=lambda p: p.client_id)
        sigs = {p.arch.signatures for p in group}
        if len(sigs) != 1:
            raise InputError("fedavg groups must share one architecture")
        layers = []
        for j in range(len(group[0].layers)):
            w = np.mean(np.stack([p.layers[j].weight for p in group]), axis=0)
            b = np.mean(np.stack([p.layers[j].bias for p in group]), axis=0)
            layers.append(LayerParams(w, b))
        for p in group:
            out[p.client_id] = ParameterSet(p.client_id, p.arch, [lp.copy() for lp in layers])
    return out


@dataclass(frozen=True)
class AggregationPlan:
    clusters: tuple
    mode: str = "uniform"  # "uniform" | "entropy"
    weights: EntropyWeights | None = None
    eq7_literal: bool = False

    def __post_init__(self):
        if self.mode not in ("uniform", "entropy"):
            raise InputError(f"unknown aggregation mode {self.mode!r}")
        if self.mode == "entropy" and self.weights is None:
            raise InputError("entropy aggregation needs weights")


def aggregate(plan: AggregationPlan, params: Mapping[int, ParameterSet]) -> dict:
    """Apply ``plan`` to every cluster; returns new parameters for all members."""
    out = {}
    for cluster in plan.clusters:
        sub = {cid: params[cid] for cid in cluster.member_clients}
        if plan.mode == "entropy":
            out.update(aggregate_entropy(cluster, sub, plan.weights, literal=plan.eq7_literal))
        else:
            out.update(aggregate_uniform(cluster, sub))
    return out
