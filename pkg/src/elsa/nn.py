"""Minimal deterministic feedforward engine.

Float32 arithmetic everywhere, with loss and batchnorm statistics
accumulated in float64. Parameters live in a :class:`ParamSet` whose
prunable tensors share one contiguous float32 buffer, so the flat index
space ``[0, D)`` used by masks, counters and scores is just that buffer.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, DimensionError, NumericError
from .rng import make_rng

BN_EPS = np.float32(1e-5)


# --------------------------------------------------------------------------- #
# Parameters
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class Entry:
    name: str
    shape: tuple
    prunable: bool
    start: int = 0  # offset into the prunable buffer; unused for non-prunable
    stop: int = 0

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamSet:
    """Ordered, named float32 tensors with a flat view over the prunable ones."""

    def __init__(self, entries: Iterable[tuple]):
        specs = []
        arrays = []
        offset = 0
        seen = set()
        for name, array, prunable in entries:
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
            array = np.asarray(array, dtype=np.float32)
            shape = tuple(int(s) for s in array.shape)
            if any(s <= 0 for s in shape):
                raise DimensionError(f"{name}: dimensions must be positive, got {shape}")
            if prunable:
                specs.append(Entry(name, shape, True, offset, offset + array.size))
                offset += array.size
            else:
                specs.append(Entry(name, shape, False))
            arrays.append(array)

        self._entries = tuple(specs)
        self._flat = np.empty(offset, dtype=np.float32)
        self._arrays = {}
        for e, a in zip(specs, arrays):
            if e.prunable:
                view = self._flat[e.start:e.stop].reshape(e.shape)
                view[...] = a
                self._arrays[e.name] = view
            else:
                self._arrays[e.name] = np.array(a, dtype=np.float32, copy=True)

    @property
    def entries(self) -> tuple:
        return self._entries

    @property
    def D(self) -> int:
        return self._flat.size

    @property
    def flat(self) -> np.ndarray:
        """The prunable buffer itself (not a copy)."""
        return self._flat

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def entry(self, name: str) -> Entry:
        for e in self._entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def items(self):
        for e in self._entries:
            yield e.name, self._arrays[e.name], e.prunable

    def prunable_entries(self) -> list:
        return [e for e in self._entries if e.prunable]

    def copy(self) -> "ParamSet":
        return ParamSet(self.items())

    def with_flat(self, flat: np.ndarray) -> "ParamSet":
        flat = np.asarray(flat, dtype=np.float32)
        if flat.shape != (self.D,):
            raise DimensionError(f"flat vector has length {flat.size}, expected {self.D}")
        out = self.copy()
        out._flat[...] = flat
        return out

    def zeros_like(self) -> "ParamSet":
        return ParamSet((n, np.zeros_like(a), p) for n, a, p in self.items())

    def index_mask(self, names: Iterable[str]) -> np.ndarray:
        """Boolean vector over ``[0, D)`` marking the prunable tensors in ``names``."""
        names = set(names)
        out = np.zeros(self.D, dtype=bool)
        for e in self.prunable_entries():
            if e.name in names:
                out[e.start:e.stop] = True
        return out

    def locate(self, index: int) -> tuple:
        """Map a flat index to ``(name, offset)``."""
        for e in self.prunable_entries():
            if e.start <= index < e.stop:
                return e.name, index - e.start
        raise IndexError(index)

    def digest(self) -> str:
        """SHA-256 over names, shapes and raw little-endian bit images."""
        h = hashlib.sha256()
        for name, array, prunable in self.items():
            h.update(name.encode("utf-8"))
            h.update(bytes([1 if prunable else 0]))
            h.update(np.asarray(array.shape, dtype="<u4").tobytes())
            h.update(np.ascontiguousarray(array, dtype="<f4").tobytes())
        return h.hexdigest()

    def bit_equal(self, other: "ParamSet") -> bool:
        if [(e.name, e.shape, e.prunable) for e in self._entries] != [
            (e.name, e.shape, e.prunable) for e in other._entries
        ]:
            return False
        return all(
            np.array_equal(a.view(np.uint32), other[n].view(np.uint32))
            for n, a, _ in self.items()
        )


# --------------------------------------------------------------------------- #
# Architecture
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class Affine:
    in_dim: int
    out_dim: int
    has_bias: bool = True


@dataclass(frozen=True)
class BatchNorm:
    dim: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class SoftmaxCrossEntropyHead:
    classes: int
    label_smoothing: float = 0.0


@dataclass(frozen=True)
class Network:
    """A layer sequence ending in exactly one softmax cross-entropy head.

    Parameter names are ``"<layer index>.<kind>"``, e.g. ``"0.weight"``,
    ``"0.bias"``, ``"1.gamma"``. Parameter-free layers leave gaps in the
    index sequence, which is how :meth:`from_entries` recovers ReLUs.
    """

    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers or not isinstance(layers[-1], SoftmaxCrossEntropyHead):
            raise DimensionError("network must end in a SoftmaxCrossEntropyHead")
        if sum(isinstance(l, SoftmaxCrossEntropyHead) for l in layers) != 1:
            raise DimensionError("network must have exactly one head")
        dim = None
        for i, layer in enumerate(layers):
            if isinstance(layer, Affine):
                if dim is not None and layer.in_dim != dim:
                    raise DimensionError(f"layer {i}: expects {layer.in_dim} inputs, gets {dim}")
                dim = layer.out_dim
            elif isinstance(layer, BatchNorm):
                if dim is None or layer.dim != dim:
                    raise DimensionError(f"layer {i}: batchnorm dim {layer.dim} != {dim}")
            elif isinstance(layer, SoftmaxCrossEntropyHead):
                if dim != layer.classes:
                    raise DimensionError(f"head expects {layer.classes} logits, gets {dim}")
            elif dim is None:
                raise DimensionError("network must start with an affine layer")

    @classmethod
    def mlp(cls, sizes: Sequence[int], batchnorm: str = "none", label_smoothing: float = 0.0):
        """``sizes = [in, h1, ..., classes]``; batchnorm in {"none", "first", "all"}."""
        if len(sizes) < 2:
            raise DimensionError("an MLP needs at least input and output sizes")
        if batchnorm not in ("none", "first", "all"):
            raise ValueError(f"unknown batchnorm placement {batchnorm!r}")
        layers = []
        hidden = len(sizes) - 2
        for k in range(len(sizes) - 1):
            layers.append(Affine(sizes[k], sizes[k + 1]))
            if k < hidden:
                if batchnorm == "all" or (batchnorm == "first" and k == 0):
                    layers.append(BatchNorm(sizes[k + 1]))
                layers.append(ReLU())
        layers.append(SoftmaxCrossEntropyHead(sizes[-1], label_smoothing))
        return cls(tuple(layers))

    @classmethod
    def from_entries(cls, entries: Sequence[Entry]):
        """Rebuild the architecture from a parameter table."""
        by_index = {}
        for e in entries:
            idx, _, kind = e.name.partition(".")
            by_index.setdefault(int(idx), {})[kind] = e
        layers = []
        last = max(by_index)
        for i in range(last + 1):
            kinds = by_index.get(i)
            if kinds is None:
                layers.append(ReLU())
            elif "weight" in kinds:
                out_dim, in_dim = kinds["weight"].shape
                layers.append(Affine(in_dim, out_dim, "bias" in kinds))
            elif "gamma" in kinds:
                layers.append(BatchNorm(kinds["gamma"].shape[0]))
            else:
                raise DimensionError(f"cannot interpret parameters of layer {i}: {sorted(kinds)}")
        if not isinstance(layers[-1], Affine):
            raise DimensionError("parameter table must end with an affine layer")
        layers.append(SoftmaxCrossEntropyHead(layers[-1].out_dim))
        return cls(tuple(layers))

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def classes(self) -> int:
        return self.layers[-1].classes

    @property
    def head(self) -> SoftmaxCrossEntropyHead:
        return self.layers[-1]

    def bn_layers(self) -> list:
        return [i for i, l in enumerate(self.layers) if isinstance(l, BatchNorm)]

    def bn_dims(self) -> list:
        return [self.layers[i].dim for i in self.bn_layers()]

    def with_label_smoothing(self, value: float) -> "Network":
        return Network(self.layers[:-1] + (replace(self.head, label_smoothing=value),))

    def init_params(self, seed: int) -> ParamSet:
        """He-uniform affine weights, zero biases, unit/zero batchnorm scale/shift.

        Affine weights are prunable; biases and batchnorm parameters are not.
        """
        entries = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Affine):
                rng = make_rng(seed, "init", i)
                limit = np.sqrt(6.0 / layer.in_dim)
                w = rng.uniform(-limit, limit, size=(layer.out_dim, layer.in_dim))
                entries.append((f"{i}.weight", w.astype(np.float32), True))
                if layer.has_bias:
                    entries.append((f"{i}.bias", np.zeros(layer.out_dim, np.float32), False))
            elif isinstance(layer, BatchNorm):
                entries.append((f"{i}.gamma", np.ones(layer.dim, np.float32), False))
                entries.append((f"{i}.beta", np.zeros(layer.dim, np.float32), False))
        return ParamSet(entries)


@dataclass
class BatchNormStats:
    """Per-batchnorm-layer mean and population variance, tagged with a level."""

    means: list
    variances: list
    level: Optional[int] = None

    def __post_init__(self):
        self.means = [np.asarray(m, dtype=np.float32) for m in self.means]
        self.variances = [np.asarray(v, dtype=np.float32) for v in self.variances]
        if len(self.means) != len(self.variances):
            raise DimensionError("mean/variance layer counts differ")
        for m, v in zip(self.means, self.variances):
            if m.shape != v.shape:
                raise DimensionError("mean/variance lengths differ")
            if np.any(v < 0):
                raise NumericError("negative batchnorm variance")

    def equal(self, other: "BatchNormStats") -> bool:
        return len(self.means) == len(other.means) and all(
            np.array_equal(a.view(np.uint32), b.view(np.uint32))
            for a, b in zip(self.means + self.variances, other.means + other.variances)
        )

    @property
    def nbytes(self) -> int:
        return sum(m.nbytes + v.nbytes for m, v in zip(self.means, self.variances))


@dataclass
class Dataset:
    x: np.ndarray
    y: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        if self.x.ndim != 2:
            raise DimensionError("inputs must be a 2-d matrix")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (self.x.shape[0],):
                raise DimensionError("label count does not match input count")

    def __len__(self):
        return self.x.shape[0]


# --------------------------------------------------------------------------- #
# Forward / backward
# --------------------------------------------------------------------------- #
def _check_finite(a, where):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite activation after {where}")


def _batch_moments(x):
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=0)
    var = ((x64 - mean) ** 2).mean(axis=0)
    return mean.astype(np.float32), var.astype(np.float32)


def _forward(network, params, x, stats, upto=None, keep=False):
    """Run layers ``[0, upto)``; returns ``(output, caches)``."""
    if x.ndim != 2 or x.shape[1] != network.in_dim:
        raise DimensionError(f"expected inputs of width {network.in_dim}, got shape {x.shape}")
    x = np.asarray(x, dtype=np.float32)
    caches = []
    bn_k = 0
    stop = len(network.layers) - 1 if upto is None else upto
    for i, layer in enumerate(network.layers[:stop]):
        if isinstance(layer, Affine):
            w = params[f"{i}.weight"]
            out = x @ w.T
            if layer.has_bias:
                out += params[f"{i}.bias"]
            caches.append(x if keep else None)
        elif isinstance(layer, BatchNorm):
            if stats is None:
                mean, var = _batch_moments(x)
            else:
                mean, var = stats.means[bn_k], stats.variances[bn_k]
            inv_std = np.float32(1.0) / np.sqrt(var + BN_EPS)
            xhat = (x - mean) * inv_std
            out = xhat * params[f"{i}.gamma"] + params[f"{i}.beta"]
            caches.append((xhat, inv_std) if keep else None)
            bn_k += 1
        elif isinstance(layer, ReLU):
            out = np.maximum(x, np.float32(0.0))
            caches.append(x if keep else None)
        _check_finite(out, f"layer {i}")
        x = out
    return x, caches


def _softmax_xent(logits, y, classes, smoothing):
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    target = np.full(z.shape, smoothing / classes)
    target[np.arange(len(y)), y] += 1.0 - smoothing
    n = len(y)
    loss = float(-(target * logp).sum() / n)
    dlogits = ((np.exp(logp) - target) / n).astype(np.float32)
    return loss, dlogits


def _check_labels(network, y):
    if y is None:
        raise DataError("labels required")
    if y.size and (y.min() < 0 or y.max() >= network.classes):
        raise DimensionError(f"labels must lie in [0, {network.classes})")


def forward(network: Network, params: ParamSet, x, y=None, stats: Optional[BatchNormStats] = None):
    """Evaluate the network.

    ``stats=None`` runs batchnorm in training mode (batch statistics);
    otherwise the given statistics are used. Returns ``(loss, logits)``;
    loss is ``None`` when no labels are passed.
    """
    x = np.asarray(x, dtype=np.float32)
    if network.bn_layers() and stats is not None and len(stats.means) != len(network.bn_layers()):
        raise DimensionError("statistics do not match the network's batchnorm layers")
    logits, _ = _forward(network, params, x, stats)
    if y is None:
        return None, logits
    y = np.asarray(y, dtype=np.int64)
    _check_labels(network, y)
    loss, _ = _softmax_xent(logits, y, network.classes, network.head.label_smoothing)
    return loss, logits


def loss_and_grad(network: Network, params: ParamSet, x, y):
    """Training-mode loss and gradient (a ParamSet congruent to ``params``)."""
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    _check_labels(network, y)
    logits, caches = _forward(network, params, x, None, keep=True)
    loss, dy = _softmax_xent(logits, y, network.classes, network.head.label_smoothing)
    grads = params.zeros_like()
    for i in range(len(network.layers) - 2, -1, -1):
        layer = network.layers[i]
        cache = caches[i]
        if isinstance(layer, Affine):
            grads[f"{i}.weight"][...] = dy.T @ cache
            if layer.has_bias:
                grads[f"{i}.bias"][...] = dy.sum(axis=0)
            dy = dy @ params[f"{i}.weight"]
        elif isinstance(layer, BatchNorm):
            xhat, inv_std = cache
            grads[f"{i}.gamma"][...] = (dy * xhat).sum(axis=0)
            grads[f"{i}.beta"][...] = dy.sum(axis=0)
            # float64 and explicit centring: the input gradient sums to zero over
            # the batch, which float32 cancellation alone does not deliver
            dxhat = dy.astype(np.float64) * params[f"{i}.gamma"]
            x64 = xhat.astype(np.float64)
            dx = dxhat - dxhat.mean(axis=0) - x64 * (dxhat * x64).mean(axis=0)
            dy = (inv_std * (dx - dx.mean(axis=0))).astype(np.float32)
        elif isinstance(layer, ReLU):
            dy = dy * (cache > 0)
    return loss, grads


def backward(network: Network, params: ParamSet, x, y) -> ParamSet:
    """Gradient of the training-mode loss w.r.t. every parameter."""
    return loss_and_grad(network, params, x, y)[1]


# --------------------------------------------------------------------------- #
# Optimisation
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    epochs: int = 30
    batch_size: int = 64
    weight_decay: float = 5e-4
    label_smoothing: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must lie in [0, 1)")


@dataclass
class OptimizerState:
    """Momentum buffers: one over the prunable flat space, one per other tensor."""

    buffer: np.ndarray
    others: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: ParamSet) -> "OptimizerState":
        others = {n: np.zeros_like(a) for n, a, p in params.items() if not p}
        return cls(np.zeros(params.D, dtype=np.float32), others)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.buffer.copy(), {k: v.copy() for k, v in self.others.items()})


def _sgd_update(theta, grad, buf, lr, mu, wd, nesterov, learnable):
    """In-place masked SGD on one tensor. ``learnable`` is a bool array or True."""
    g = grad + wd * theta if wd else grad.copy()
    if learnable is not True:
        g *= learnable
    if mu:
        buf *= mu
        buf += g
        step = g + mu * buf if nesterov else buf
    else:
        step = g
    if learnable is True:
        theta -= lr * step
    else:
        # where() instead of subtracting a masked step: x - 0.0 flips -0.0 to +0.0
        np.copyto(theta, theta - lr * step, where=learnable)


def _masked_sgd_inplace(params, grads, state, config, mask_bool, train_nonprunable=True):
    lr = np.float32(config.learning_rate)
    mu = np.float32(config.momentum)
    wd = np.float32(config.weight_decay)
    _sgd_update(params.flat, grads.flat, state.buffer, lr, mu, wd, config.nesterov, mask_bool)
    if train_nonprunable:
        for name, theta, prunable in params.items():
            if not prunable:
                _sgd_update(theta, grads[name], state.others[name], lr, mu, wd, config.nesterov, True)


def masked_sgd_step(
    params: ParamSet,
    grads: ParamSet,
    opt_state: OptimizerState,
    config: TrainConfig,
    mask: np.ndarray,
    train_nonprunable: bool = True,
):
    """One SGD(-momentum, optionally Nesterov) step that cannot move frozen weights.

    Weight decay is folded into the gradient before the mask multiply.
    Returns new ``(params, opt_state)``; inputs are left untouched.
    """
    mask = np.asarray(mask)
    if mask.shape != (params.D,):
        raise DimensionError(f"mask has length {mask.size}, expected {params.D}")
    params = params.copy()
    opt_state = opt_state.copy()
    _masked_sgd_inplace(params, grads, opt_state, config, mask.astype(bool), train_nonprunable)
    return params, opt_state


def train(
    network: Network,
    params: ParamSet,
    mask: Optional[np.ndarray],
    data: Dataset,
    config: TrainConfig,
    *,
    train_nonprunable: bool = True,
    step_hook: Optional[Callable[[int, ParamSet], None]] = None,
) -> ParamSet:
    """Masked mini-batch training for ``config.epochs`` epochs.

    Momentum starts from zero on every call. The shuffle order depends only on
    ``config.seed``. ``step_hook(step, params)`` runs after every optimizer step
    (``step`` counts from 1) and may modify ``params`` in place.
    """
    if len(data) == 0:
        raise DataError("cannot train on an empty dataset")
    if data.y is None:
        raise DataError("training needs labels")
    mask_bool = np.ones(params.D, dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    if mask_bool.shape != (params.D,):
        raise DimensionError(f"mask has length {mask_bool.size}, expected {params.D}")
    params = params.copy()
    if config.epochs == 0:
        return params

    net = network.with_label_smoothing(config.label_smoothing)
    state = OptimizerState.zeros(params)
    rng = make_rng(config.seed, "shuffle")
    n = len(data)
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            _, grads = loss_and_grad(net, params, data.x[idx], data.y[idx])
            _masked_sgd_inplace(params, grads, state, config, mask_bool, train_nonprunable)
            step += 1
            if step_hook is not None:
                step_hook(step, params)
    return params


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


# --------------------------------------------------------------------------- #
# Statistics and evaluation
# --------------------------------------------------------------------------- #
def compute_bn_stats(network: Network, params: ParamSet, x, level=None) -> BatchNormStats:
    """Population mean/variance of each batchnorm layer's input over all of ``x``.

    Layers are processed in order; earlier batchnorm layers normalise with the
    statistics already computed, i.e. exactly as they would at inference.
    """
    x = np.asarray(x.x if isinstance(x, Dataset) else x, dtype=np.float32)
    if x.shape[0] == 0:
        raise DataError("cannot compute statistics from an empty dataset")
    means, variances = [], []
    for i in network.bn_layers():
        partial = BatchNormStats(means, variances)
        act, _ = _forward(network, params, x, partial, upto=i)
        m, v = _batch_moments(act)
        means.append(m)
        variances.append(v)
    return BatchNormStats(means, variances, level)


def predict(network: Network, params: ParamSet, stats: Optional[BatchNormStats], x) -> np.ndarray:
    if network.bn_layers() and stats is None:
        raise DataError("evaluation of a batchnorm network needs statistics")
    _, logits = forward(network, params, x, None, stats if stats is not None else BatchNormStats([], []))
    return np.argmax(logits, axis=1)


def evaluate(network: Network, params: ParamSet, stats: Optional[BatchNormStats], data: Dataset) -> float:
    """Fraction of correct argmax predictions (ties go to the lowest class)."""
    if len(data) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(network, params, stats, data.x) == data.y))
