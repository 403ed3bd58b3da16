"""Layer-sequential neural-network engine with hand-written reverse mode.

Models are plain ``ParameterSet`` objects (a list of weight/bias arrays, one per
layer) paired with a ``ModelArchitecture``. Everything is float64 and every
layer checks its output for NaN/Inf, so ``forward`` either returns finite
values or raises ``NumericError``.

Supported layer kinds are ``dense``, ``relu``, ``conv`` (k x k, stride 1,
same padding), ``maxpool`` (p x p, stride p) and ``flatten``. Dense weights are
stored ``(in, out)``; conv weights ``(out, in, k, k)``.

The optimizer is SGD with heavy-ball momentum and L2 weight decay folded into
the gradient::

    velocity = momentum * velocity + grad + weight_decay * param
    param    = param - learning_rate * velocity
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, InputError, NumericError

KINDS = ("dense", "relu", "conv", "maxpool", "flatten")
PARAMETRIC = ("dense", "conv")

_EMPTY = np.zeros(0)


@dataclass(frozen=True)
class LayerSpec:
    """Structural description of one layer.

    ``in_size``/``out_size`` are features for dense layers and channels for
    conv layers; both are 0 for parameter-free kinds.
    """

    kind: str
    in_size: int = 0
    out_size: int = 0
    kernel: int = 3
    pool: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown layer kind {self.kind!r}")
        if self.kind in PARAMETRIC and (self.in_size <= 0 or self.out_size <= 0):
            raise InputError(f"{self.kind} layer needs positive in/out sizes")
        if self.kind == "conv" and self.kernel % 2 != 1:
            raise InputError("conv kernel must be odd for same padding")

    @classmethod
    def dense(cls, in_features, out_features):
        return cls("dense", in_features, out_features)

    @classmethod
    def conv(cls, in_channels, out_channels, kernel=3):
        return cls("conv", in_channels, out_channels, kernel=kernel)

    @classmethod
    def relu(cls):
        return cls("relu")

    @classmethod
    def maxpool(cls, pool=2):
        return cls("maxpool", pool=pool)

    @classmethod
    def flatten(cls):
        return cls("flatten")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAMETRIC

    @property
    def signature(self) -> str:
        """Canonical matching key: kind, weight shape and hyperparameters."""
        if self.kind == "dense":
            return f"dense:{self.in_size}x{self.out_size}"
        if self.kind == "conv":
            return f"conv:{self.out_size}x{self.in_size}x{self.kernel}x{self.kernel}:s1:same"
        if self.kind == "maxpool":
            return f"maxpool:{self.pool}x{self.pool}:s{self.pool}"
        return self.kind

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "dense":
            return (self.in_size, self.out_size)
        if self.kind == "conv":
            return (self.out_size, self.in_size, self.kernel, self.kernel)
        return (0,)

    @property
    def bias_shape(self) -> tuple:
        return (self.out_size,) if self.has_params else (0,)

    def output_shape(self, input_shape: tuple) -> tuple:
        """Per-sample output shape for a per-sample ``input_shape``."""
        if self.kind == "dense":
            if len(input_shape) != 1 or input_shape[0] != self.in_size:
                raise DimensionError(f"{self.signature} cannot take input {input_shape}")
            return (self.out_size,)
        if self.kind == "conv":
            if len(input_shape) != 3 or input_shape[0] != self.in_size:
                raise DimensionError(f"{self.signature} cannot take input {input_shape}")
            return (self.out_size,) + tuple(input_shape[1:])
        if self.kind == "maxpool":
            if len(input_shape) != 3 or min(input_shape[1:]) < self.pool:
                raise DimensionError(f"{self.signature} cannot take input {input_shape}")
            c, h, w = input_shape
            return (c, h // self.pool, w // self.pool)
        if self.kind == "flatten":
            return (int(np.prod(input_shape)),)
        return tuple(input_shape)


@dataclass(frozen=True)
class ModelArchitecture:
    name: str
    input_shape: tuple
    layers: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise InputError(f"architecture {self.name!r} has no layers")
        last = self.layers[-1]
        if last.kind != "dense" or last.out_size != self.num_classes:
            raise InputError(f"architecture {self.name!r} must end in dense(..., {self.num_classes})")
        self.shapes  # validates the chain

    def __len__(self):
        return len(self.layers)

    @cached_property
    def shapes(self) -> tuple:
        """Per-sample output shape of every layer."""
        out, current = [], self.input_shape
        for spec in self.layers:
            current = spec.output_shape(current)
            out.append(current)
        return tuple(out)

    @property
    def signatures(self) -> tuple:
        return tuple(spec.signature for spec in self.layers)

    def feature_dim(self, index: int) -> int:
        return int(np.prod(self.shapes[index]))


@dataclass
class LayerParams:
    """Weight and bias of one layer (also used to carry gradients)."""

    weight: np.ndarray
    bias: np.ndarray

    def copy(self) -> "LayerParams":
        return LayerParams(self.weight.copy(), self.bias.copy())


@dataclass
class ParameterSet:
    """Numeric weights of one client model, one ``LayerParams`` per layer."""

    client_id: int
    arch: ModelArchitecture
    layers: list

    def __post_init__(self):
        if len(self.layers) != len(self.arch.layers):
            raise DimensionError(
                f"{len(self.layers)} parameter blocks for {len(self.arch.layers)} layers"
            )
        for i, (spec, lp) in enumerate(zip(self.arch.layers, self.layers)):
            if lp.weight.shape != spec.weight_shape or lp.bias.shape != spec.bias_shape:
                raise DimensionError(
                    f"layer {i} ({spec.signature}) got weight {lp.weight.shape}, bias {lp.bias.shape}"
                )

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.client_id, self.arch, [lp.copy() for lp in self.layers])

    @property
    def num_params(self) -> int:
        return sum(lp.weight.size + lp.bias.size for lp in self.layers)


@dataclass(frozen=True)
class FeatureMatrix:
    """Output features of one layer laid out as ``(d_l, N)``."""

    layer_index: int
    values: np.ndarray

    @classmethod
    def from_batch(cls, layer_index: int, batch_out: np.ndarray) -> "FeatureMatrix":
        n = batch_out.shape[0]
        return cls(layer_index, np.ascontiguousarray(batch_out.reshape(n, -1).T))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def as_batch(self, sample_shape: tuple) -> np.ndarray:
        return self.values.T.reshape((self.cols,) + tuple(sample_shape))


def client_seed(global_seed: int, client_id: int) -> int:
    return global_seed * 10007 + client_id


def init_params(arch: ModelArchitecture, seed: int, client_id: int = 0) -> ParameterSet:
    """Glorot-uniform weights, zero biases, drawn from ``default_rng(seed)``."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in arch.layers:
        if not spec.has_params:
            layers.append(LayerParams(_EMPTY.copy(), _EMPTY.copy()))
            continue
        if spec.kind == "dense":
            fan_in, fan_out = spec.in_size, spec.out_size
        else:
            k2 = spec.kernel * spec.kernel
            fan_in, fan_out = spec.in_size * k2, spec.out_size * k2
        s = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(LayerParams(rng.uniform(-s, s, size=spec.weight_shape), np.zeros(spec.bias_shape)))
    return ParameterSet(client_id, arch, layers)


def zeros_like(params: ParameterSet) -> list:
    return [LayerParams(np.zeros_like(lp.weight), np.zeros_like(lp.bias)) for lp in params.layers]


# ---------------------------------------------------------------------------
# per-layer kernels


def _check_finite(arr, where):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {where}")


def _im2col(x, k):
    """Patch tensor ``(N, C*k*k, H*Wp)`` of an NCHW batch, ``Wp = W + k - 1``.

    The padded image is flattened row by row, so each kernel offset is one
    contiguous shifted slice. Output columns with ``x >= W`` are junk and are
    cropped after the matmul; an extra zero row keeps every slice in bounds.
    """
    n, c, h, w = x.shape
    p = k // 2
    wp = w + 2 * p
    xp = np.zeros((n, c, h + 2 * p + 1, wp))
    xp[:, :, p : p + h, p : p + w] = x
    flat = xp.reshape(n, c, -1)
    span = h * wp
    cols = np.empty((n, c, k * k, span))
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            cols[:, :, i * k + j] = flat[:, :, off : off + span]
    return cols.reshape(n, c * k * k, span)


def _col2im(dcols, shape, k):
    n, c, h, w = shape
    p = k // 2
    wp = w + 2 * p
    span = h * wp
    dcols = dcols.reshape(n, c, k * k, span)
    dxp = np.zeros((n, c, (h + 2 * p + 1) * wp))
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            dxp[:, :, off : off + span] += dcols[:, :, i * k + j]
    return dxp.reshape(n, c, h + 2 * p + 1, wp)[:, :, p : p + h, p : p + w]


def prepare_input(spec: LayerSpec, x: np.ndarray):
    """Parameter-independent part of a dense/conv layer's forward pass.

    Feed the result to :func:`apply_prepared` to evaluate the layer under many
    parameter values without rebuilding conv patches.
    """
    if spec.kind == "dense":
        if x.ndim != 2 or x.shape[1] != spec.in_size:
            raise DimensionError(f"{spec.signature} got batch of shape {x.shape}")
        return x
    if spec.kind == "conv":
        if x.ndim != 4 or x.shape[1] != spec.in_size:
            raise DimensionError(f"{spec.signature} got batch of shape {x.shape}")
        return _im2col(x, spec.kernel), x.shape
    raise InputError(f"{spec.kind} layers have no parameters")


def apply_prepared(spec: LayerSpec, lp: LayerParams, prepared):
    """``(out, cache)`` of a dense/conv layer from :func:`prepare_input` output."""
    if spec.kind == "dense":
        return prepared @ lp.weight + lp.bias, prepared
    cols, (n, _, h, w) = prepared
    wide = (lp.weight.reshape(spec.out_size, -1) @ cols).reshape(n, spec.out_size, h, -1)
    return wide[:, :, :, :w] + lp.bias[:, None, None], prepared


def layer_forward(spec: LayerSpec, lp: LayerParams, x: np.ndarray):
    """Apply one layer to a batch. Returns ``(out, cache)`` for ``layer_backward``."""
    kind = spec.kind
    if kind in PARAMETRIC:
        return apply_prepared(spec, lp, prepare_input(spec, x))
    if kind == "relu":
        return np.maximum(x, 0.0), x > 0
    if kind == "maxpool":
        if x.ndim != 4:
            raise DimensionError(f"maxpool got batch of shape {x.shape}")
        p = spec.pool
        ho, wo = x.shape[2] // p, x.shape[3] // p
        # window offsets in row-major order; the first maximum wins, as with argmax
        views = [x[:, :, i : ho * p : p, j : wo * p : p] for i in range(p) for j in range(p)]
        out = views[0].copy()
        for v in views[1:]:
            np.maximum(out, v, out=out)
        return out, (x, out)
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    raise InputError(kind)


def layer_backward(spec: LayerSpec, lp: LayerParams, cache, dout: np.ndarray, need_dx: bool = True):
    """Gradient of one layer. Returns ``(dx, LayerParams grad)``.

    ``dx`` is ``None`` when ``need_dx`` is false and the layer has parameters.
    """
    kind = spec.kind
    if kind == "dense":
        x = cache
        grad = LayerParams(x.T @ dout, dout.sum(axis=0))
        return (dout @ lp.weight.T if need_dx else None), grad
    if kind == "conv":
        cols, xshape = cache
        n, _, h, w = xshape
        dwide = np.zeros((n, spec.out_size, h, w + spec.kernel - 1))
        dwide[:, :, :, :w] = dout
        dflat = dwide.reshape(n, spec.out_size, -1)
        wmat = lp.weight.reshape(spec.out_size, -1)
        dw = np.matmul(dflat, cols.transpose(0, 2, 1)).sum(axis=0)
        grad = LayerParams(dw.reshape(lp.weight.shape), dout.sum(axis=(0, 2, 3)))
        return (_col2im(wmat.T @ dflat, xshape, spec.kernel) if need_dx else None), grad
    empty = LayerParams(_EMPTY.copy(), _EMPTY.copy())
    if kind == "relu":
        return dout * cache, empty
    if kind == "maxpool":
        x, out = cache
        p = spec.pool
        ho, wo = out.shape[2], out.shape[3]
        dx = np.zeros(x.shape)
        taken = np.zeros(out.shape, dtype=bool)
        for i in range(p):
            for j in range(p):
                hit = x[:, :, i : ho * p : p, j : wo * p : p] == out
                hit &= ~taken
                taken |= hit
                dx[:, :, i : ho * p : p, j : wo * p : p] = dout * hit
        return dx, empty
    if kind == "flatten":
        return dout.reshape(cache), empty
    raise InputError(kind)


# ---------------------------------------------------------------------------
# whole-model passes


def _check_batch(arch, batch):
    if batch.ndim != len(arch.input_shape) + 1 or tuple(batch.shape[1:]) != arch.input_shape:
        raise DimensionError(f"batch shape {batch.shape} does not match input {arch.input_shape}")


def forward(
    params: ParameterSet,
    batch: np.ndarray,
    capture: Iterable[int] = (),
    *,
    start: int = 0,
    stop: int | None = None,
    _caches: list | None = None,
):
    """Run ``batch`` through the model.

    Returns ``(logits, features)`` where ``features`` maps each index in
    ``capture`` to a ``FeatureMatrix`` of that layer's output. ``start``/``stop``
    run a slice of the layer stack (``batch`` is then the input of layer
    ``start`` and the first return value is the output of layer ``stop - 1``).
    """
    arch = params.arch
    stop = len(arch) if stop is None else stop
    capture = set(capture)
    bad = [i for i in capture if not 0 <= i < len(arch)]
    if bad:
        raise InputError(f"capture indices {sorted(bad)} outside 0..{len(arch) - 1}")
    x = np.asarray(batch, dtype=np.float64)
    if start == 0:
        _check_batch(arch, x)
    features = {}
    for i in range(start, stop):
        spec = arch.layers[i]
        x, cache = layer_forward(spec, params.layers[i], x)
        _check_finite(x, f"layer {i} ({spec.signature})")
        if _caches is not None:
            _caches.append(cache)
        if i in capture:
            features[i] = FeatureMatrix.from_batch(i, x)
    return x, features


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} logits")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logz - shifted[rows, labels]))
    grad = np.exp(shifted - logz[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


def feature_loss(output: np.ndarray, target: np.ndarray):
    """Squared L2 distance per sample, averaged over samples, with its gradient."""
    if output.shape != target.shape:
        raise DimensionError(f"feature shapes differ: {output.shape} vs {target.shape}")
    n = output.shape[0]
    diff = output - target
    loss = float(np.sum(diff * diff) / n)
    return loss, (2.0 / n) * diff


def backward_from(params: ParameterSet, caches: list, dout: np.ndarray, start: int = 0, need_dx: bool = True):
    """Backpropagate ``dout`` through layers ``start .. start+len(caches)-1``.

    Returns ``(d input, {layer: grad})``. With ``need_dx`` false the pass stops
    at the first layer that has parameters; the returned input gradient is
    then ``None`` and layers below it get empty gradients.
    """
    layers = params.arch.layers
    first = start
    if not need_dx:
        first = next((start + k for k in range(len(caches)) if layers[start + k].has_params), start + len(caches))
    grads = {}
    for offset in range(len(caches) - 1, -1, -1):
        i = start + offset
        if i < first:
            grads[i] = LayerParams(_EMPTY.copy(), _EMPTY.copy())
            continue
        dout, grads[i] = layer_backward(layers[i], params.layers[i], caches[offset], dout, need_dx=need_dx or i > first)
    return (dout if need_dx else None), grads


def _first_parametric(arch) -> int:
    return next((i for i, spec in enumerate(arch.layers) if spec.has_params), len(arch))


def backward_task_loss(params: ParameterSet, batch: np.ndarray, labels):
    """Cross-entropy loss on ``batch`` and per-layer gradients (``LayerParams`` list)."""
    caches = []
    logits, _ = forward(params, batch, _caches=caches)
    loss, dlogits = cross_entropy(logits, labels)
    _, grads = backward_from(params, caches, dlogits, need_dx=False)
    return loss, [grads[i] for i in range(len(params.layers))]


def _prepared_batches(params: ParameterSet, images: np.ndarray):
    """Shard-wide output of the fixed leading layers, plus the patch input of
    the first parametric layer, so mini-batches can just index into them."""
    arch = params.arch
    k = _first_parametric(arch)
    x = np.asarray(images, dtype=np.float64)
    _check_batch(arch, x)
    if k == len(arch):
        raise InputError("model has no trainable layers")
    x, _ = forward(params, x, stop=k)
    return k, prepare_input(arch.layers[k], x)


def _take(prepared, idx):
    if isinstance(prepared, tuple):
        cols, shape = prepared
        return cols[idx], (len(idx),) + tuple(shape[1:])
    return prepared[idx]


def _batch_loss_and_grads(params: ParameterSet, k: int, prepared, labels):
    # same arithmetic as backward_task_loss, from precomputed layer-k input
    arch = params.arch
    x, cache0 = apply_prepared(arch.layers[k], params.layers[k], prepared)
    _check_finite(x, f"layer {k} ({arch.layers[k].signature})")
    caches = [cache0]
    logits, _ = forward(params, x, start=k + 1, _caches=caches) if k + 1 < len(arch) else (x, {})
    loss, dlogits = cross_entropy(logits, labels)
    _, grads = backward_from(params, caches, dlogits, start=k, need_dx=False)
    empty = LayerParams(_EMPTY.copy(), _EMPTY.copy())
    return loss, [grads.get(i, empty) for i in range(len(arch))]


def predict(params: ParameterSet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for lo in range(0, len(images), batch_size):
        logits, _ = forward(params, images[lo : lo + batch_size])
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def accuracy(params: ParameterSet, images: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(params, images) == labels))


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise InputError("momentum must lie in [0, 1)")
        if not self.weight_decay >= 0:
            raise InputError("weight_decay must be >= 0")


@dataclass
class SgdState:
    velocity: list | None = None

    def copy(self) -> "SgdState":
        return SgdState(None if self.velocity is None else [v.copy() for v in self.velocity])


def _sgd_inplace(params: ParameterSet, grads: Sequence[LayerParams], state: SgdState, cfg: SgdConfig):
    if state.velocity is None:
        state.velocity = zeros_like(params)
    for lp, g, v in zip(params.layers, grads, state.velocity):
        for name in ("weight", "bias"):
            p, gp, vp = getattr(lp, name), getattr(g, name), getattr(v, name)
            if p.size == 0:
                continue
            if gp.shape != p.shape:
                raise DimensionError(f"gradient shape {gp.shape} for parameter {p.shape}")
            vp *= cfg.momentum
            vp += gp
            if cfg.weight_decay:
                vp += cfg.weight_decay * p
            p -= cfg.learning_rate * vp


def sgd_step(params: ParameterSet, grads, state: SgdState, cfg: SgdConfig):
    """One SGD update. Inputs are left untouched; returns ``(params, state)``."""
    if len(grads) != len(params.layers):
        raise DimensionError(f"{len(grads)} gradient blocks for {len(params.layers)} layers")
    params, state = params.copy(), state.copy()
    _sgd_inplace(params, grads, state, cfg)
    return params, state


def train_local(
    params: ParameterSet,
    state: SgdState,
    images: np.ndarray,
    labels,
    *,
    epochs: int,
    batch_size: int,
    cfg: SgdConfig,
    rng: np.random.Generator,
):
    """Mini-batch SGD over a client's shard. Returns new ``(params, state, mean_loss)``."""
    params, state = params.copy(), state.copy()
    labels = np.asarray(labels)
    n = len(labels)
    losses = []
    if epochs and n:
        k, prepared = _prepared_batches(params, images)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            loss, grads = _batch_loss_and_grads(params, k, _take(prepared, idx), labels[idx])
            _sgd_inplace(params, grads, state, cfg)
            losses.append(loss)
    return params, state, float(np.mean(losses)) if losses else 0.0


@dataclass
class Probe:
    """Result of ``train_probe``: the fitted single-layer model and its accuracy."""

    params: ParameterSet
    accuracy: float
    history: list = field(default_factory=list)


def train_probe(images, labels, num_classes, *, epochs=20, batch_size=32, seed=0, cfg=None) -> Probe:
    """Fit a flatten+dense linear classifier; used to check separability."""
    images = np.asarray(images, dtype=np.float64)
    arch = ModelArchitecture(
        "probe",
        images.shape[1:],
        (LayerSpec.flatten(), LayerSpec.dense(int(np.prod(images.shape[1:])), num_classes)),
        num_classes,
    )
    params = init_params(arch, seed)
    state = SgdState()
    rng = np.random.default_rng(seed)
    cfg = cfg or SgdConfig()
    history = []
    for _ in range(epochs):
        params, state, _ = train_local(
            params, state, images, labels, epochs=1, batch_size=batch_size, cfg=cfg, rng=rng
        )
        history.append(accuracy(params, images, labels))
    return Probe(params, history[-1] if history else accuracy(params, images, labels), history)
