"""Minimal numpy training engine: conv / pool / dense / ReLU, masked weights, Nesterov SGD."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .masks import ConnectionMask

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    def __init__(self, layer: int, msg: str):
        super().__init__(f"layer {layer}: {msg}")
        self.layer = layer


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, epoch: int | None = None, batch: int | None = None):
        super().__init__(msg)
        self.epoch = epoch
        self.batch = batch


# ---------------------------------------------------------------------------
# layer and network specs


@dataclass(frozen=True)
class Conv2D:
    in_ch: int
    out_ch: int
    kh: int = 3
    kw: int = 3
    stride: int = 1
    pad: int = 0
    bias: bool = True
    kind = "conv2d"

    def __post_init__(self):
        if min(self.in_ch, self.out_ch, self.kh, self.kw, self.stride) < 1 or self.pad < 0:
            raise ValueError(f"bad conv dims {self}")

    @property
    def weight_shape(self):
        return (self.out_ch, self.in_ch, self.kh, self.kw)

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.in_ch:
            raise ValueError(f"expected {self.in_ch} input channels, got {c}")
        ho = (h + 2 * self.pad - self.kh) // self.stride + 1
        wo = (w + 2 * self.pad - self.kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} too small for kernel")
        return (self.out_ch, ho, wo)


@dataclass(frozen=True)
class MaxPool:
    k: int = 2
    stride: int = 2
    kind = "maxpool"

    def __post_init__(self):
        if self.k < 1 or self.stride < 1:
            raise ValueError(f"bad pool dims {self}")

    def out_shape(self, shape):
        c, h, w = shape
        ho, wo = (h - self.k) // self.stride + 1, (w - self.k) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} too small for pool")
        return (c, ho, wo)


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int
    bias: bool = True
    kind = "dense"

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError(f"bad dense dims {self}")

    @property
    def weight_shape(self):
        return (self.n_out, self.n_in)

    def out_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.n_in:
            raise ValueError(f"expected flat input of {self.n_in}, got {shape}")
        return (self.n_out,)


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def out_shape(self, shape):
        return shape


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"

    def out_shape(self, shape):
        return (int(np.prod(shape)),)


LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, MaxPool, Dense, ReLU, Flatten)}


def layer_to_dict(layer) -> dict:
    d = {"kind": layer.kind}
    d.update({k: getattr(layer, k) for k in layer.__dataclass_fields__})
    return d


def layer_from_dict(d: dict):
    d = dict(d)
    return LAYER_KINDS[d.pop("kind")](**d)


def has_weights(layer) -> bool:
    return isinstance(layer, (Conv2D, Dense))


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    num_labels: int
    input_shape: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self.shapes()  # validates
        last = self.layers[self.weight_layers()[-1]]
        if not isinstance(last, Dense) or last.n_out != self.num_labels:
            raise ShapeError(self.weight_layers()[-1], f"output layer must be Dense with {self.num_labels} outputs")
        if last.bias:
            raise ShapeError(self.weight_layers()[-1], "output layer must not have biases")

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every layer (excluding batch)."""
        out, shape = [], self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ValueError as e:
                raise ShapeError(i, str(e)) from None
            out.append(tuple(shape))
        return out

    def weight_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if has_weights(l)]

    def output_layer(self) -> int:
        return self.weight_layers()[-1]

    def feature_layers(self) -> list[int]:
        """Weighted layers other than the output layer, in order (probe cut points, 1-based m)."""
        return self.weight_layers()[:-1]

    def cut_index(self, m: int) -> int:
        """Index one past the last layer belonging to feature layer ``m``.

        The cut point is the input of the next weighted layer, so activation and
        pooling that follow layer m are included.
        """
        feats = self.feature_layers()
        if not 1 <= m <= len(feats):
            raise ValueError(f"feature layer m={m} out of range 1..{len(feats)}")
        nxt = self.weight_layers()[m]
        # stop before a Flatten so cut features keep their (C, H, W) layout
        while nxt > feats[m - 1] + 1 and isinstance(self.layers[nxt - 1], Flatten):
            nxt -= 1
        return nxt

    def cut_shape(self, m: int) -> tuple[int, ...]:
        return self.shapes()[self.cut_index(m) - 1]

    def to_dict(self) -> dict:
        return {
            "layers": [layer_to_dict(l) for l in self.layers],
            "num_labels": self.num_labels,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(layer_from_dict(l) for l in d["layers"]), d["num_labels"], tuple(d["input_shape"]))


# ---------------------------------------------------------------------------
# checkpoint


@dataclass
class Checkpoint:
    weights: list
    biases: list
    masks: dict = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            [None if w is None else w.copy() for w in self.weights],
            [None if b is None else b.copy() for b in self.biases],
            dict(self.masks),
            self.epoch,
            self.seed,
        )

    @property
    def dtype(self):
        return next(w.dtype for w in self.weights if w is not None)

    def weight_mask(self, i: int) -> np.ndarray | None:
        m = self.masks.get(i)
        return None if m is None else m.expand(self.weights[i].shape)

    def bias_mask(self, i: int) -> np.ndarray | None:
        """Biases of units whose inbound connections are all dropped go with the unit."""
        m = self.weight_mask(i)
        if m is None or self.biases[i] is None:
            return None
        return m.reshape(m.shape[0], -1).any(axis=1)

    def install_mask(self, i: int, mask: ConnectionMask | None) -> None:
        if mask is None:
            self.masks.pop(i, None)
            return
        mask.expand(self.weights[i].shape)  # shape check
        self.masks[i] = mask
        self.apply_masks()

    def apply_masks(self) -> None:
        for i in self.masks:
            self.weights[i] *= self.weight_mask(i)
            bm = self.bias_mask(i)
            if bm is not None:
                self.biases[i] *= bm

    def n_params(self) -> int:
        return sum(a.size for a in self.weights + self.biases if a is not None)


def init_checkpoint(spec: NetworkSpec, seed: int, dtype=np.float32) -> Checkpoint:
    """Uniform init with bound sqrt(6 / fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for layer in spec.layers:
        if has_weights(layer):
            shape = layer.weight_shape
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=shape).astype(dtype))
            biases.append(np.zeros(shape[0], dtype=dtype) if layer.bias else None)
        else:
            weights.append(None)
            biases.append(None)
    return Checkpoint(weights, biases, {}, 0, seed)


# ---------------------------------------------------------------------------
# forward / backward


# 4-D activations are NHWC inside the engine; the public API and flatten order are NCHW.


def to_internal(x: np.ndarray) -> np.ndarray:
    return x.transpose(0, 2, 3, 1) if x.ndim == 4 else x


def to_external(x: np.ndarray) -> np.ndarray:
    return x.transpose(0, 3, 1, 2) if x.ndim == 4 else x


def _im2col(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    n, h, w, c = x.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, : stride * ho : stride, : stride * wo : stride]
    # (n, ho, wo, c, kh, kw) -> rows ordered (kh, kw, c) so the copy reads contiguous channels
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    return cols, ho, wo


def _wmat(w):
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _conv_forward(layer: Conv2D, w, b, x):
    n = x.shape[0]
    cols, ho, wo = _im2col(x, layer.kh, layer.kw, layer.stride, layer.pad)
    y = cols @ _wmat(w).T
    if b is not None:
        y += b
    return y.reshape(n, ho, wo, layer.out_ch), (cols, x.shape, ho, wo)


def _conv_backward(layer: Conv2D, w, cache, dy, need_dx):
    cols, xshape, ho, wo = cache
    dy_mat = dy.reshape(-1, layer.out_ch)
    dw = (dy_mat.T @ cols).reshape(layer.out_ch, layer.kh, layer.kw, layer.in_ch).transpose(0, 3, 1, 2)
    db = dy_mat.sum(axis=0, dtype=np.float64).astype(w.dtype) if layer.bias else None
    if not need_dx:
        return None, dw, db
    n, h, wd, c = xshape
    p, s = layer.pad, layer.stride
    dcols = (dy_mat @ _wmat(w)).reshape(n, ho, wo, layer.kh, layer.kw, c)
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=dy.dtype)
    for i in range(layer.kh):
        for j in range(layer.kw):
            dxp[:, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, i, j]
    dx = dxp[:, p : p + h, p : p + wd] if p else dxp
    return dx, dw, db


def _pool_views(x, k, s, ho, wo):
    for a in range(k):
        for b in range(k):
            yield x[:, a : a + s * ho : s, b : b + s * wo : s]


def _pool_forward(layer: MaxPool, x):
    k, s = layer.k, layer.stride
    n, h, w, c = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    y = np.maximum.reduce(list(_pool_views(x, k, s, ho, wo)))
    return y, (x, y, ho, wo)


def _pool_backward(layer: MaxPool, cache, dy):
    x, y, ho, wo = cache
    k, s = layer.k, layer.stride
    dx = np.zeros(x.shape, dtype=dy.dtype)
    taken = np.zeros(y.shape, dtype=bool)
    for a in range(k):
        for b in range(k):
            # first maximum in scan order receives the gradient
            sel = x[:, a : a + s * ho : s, b : b + s * wo : s] == y
            sel &= ~taken
            taken |= sel
            dx[:, a : a + s * ho : s, b : b + s * wo : s] += dy * sel
    return dx


def _check_input(spec: NetworkSpec, x: np.ndarray, start: int):
    expected = spec.input_shape if start == 0 else spec.shapes()[start - 1]
    if tuple(x.shape[1:]) != tuple(expected):
        raise ShapeError(start, f"input shape {tuple(x.shape[1:])} != expected {tuple(expected)}")


def run_layers(spec: NetworkSpec, ckpt: Checkpoint, x: np.ndarray, start: int = 0, stop: int | None = None, caches=None):
    """Apply layers ``start:stop`` to an NCHW (or flat) batch and return the result in the same convention.

    Per-layer caches are appended to ``caches`` when given (internal layout).
    """
    stop = len(spec.layers) if stop is None else stop
    _check_input(spec, x, start)
    x = to_internal(x)
    for i in range(start, stop):
        layer = spec.layers[i]
        if isinstance(layer, Conv2D):
            x, cache = _conv_forward(layer, ckpt.weights[i], ckpt.biases[i], x)
        elif isinstance(layer, Dense):
            cache = x
            x = x @ ckpt.weights[i].T
            if ckpt.biases[i] is not None:
                x = x + ckpt.biases[i]
        elif isinstance(layer, ReLU):
            cache = x > 0
            x = x * cache
        elif isinstance(layer, MaxPool):
            x, cache = _pool_forward(layer, x)
        elif isinstance(layer, Flatten):
            cache = x.shape
            x = x.transpose(0, 3, 1, 2).reshape(x.shape[0], -1) if x.ndim == 4 else x.reshape(x.shape[0], -1)
        else:  # pragma: no cover
            raise TypeError(layer)
        if caches is not None:
            caches.append(cache)
    return to_external(x)


def forward(spec: NetworkSpec, ckpt: Checkpoint, x: np.ndarray) -> np.ndarray:
    """Logits for a batch."""
    return run_layers(spec, ckpt, np.asarray(x, dtype=ckpt.dtype))


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    n = len(labels)
    with np.errstate(all="ignore"):
        z = z - z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        p = ez / ez.sum(axis=1, keepdims=True)
        loss = float(-(z[np.arange(n), labels] - np.log(ez.sum(axis=1))).mean())
    p[np.arange(n), labels] -= 1.0
    return loss, (p / n).astype(logits.dtype)


@dataclass
class Gradients:
    loss: float
    weights: list
    biases: list
    logits: np.ndarray | None = None


def backward(
    spec: NetworkSpec,
    ckpt: Checkpoint,
    x: np.ndarray,
    labels: np.ndarray,
    frozen: Iterable[int] = (),
    start: int = 0,
    batch_index: int | None = None,
) -> Gradients:
    """Gradients of mean softmax cross-entropy.

    Frozen layers get ``None`` parameter gradients. Layers below the lowest
    trainable layer are skipped entirely.
    """
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_labels):
        raise ValueError(f"labels must lie in [0, {spec.num_labels})")
    frozen = set(frozen)
    x = np.asarray(x, dtype=ckpt.dtype)
    caches: list = []
    logits = run_layers(spec, ckpt, x, start=start, caches=caches)
    # logits are 2-D, so internal and external layouts coincide from here down
    loss, dy = softmax_xent(logits, labels)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss in batch {batch_index}", batch=batch_index)

    n_layers = len(spec.layers)
    gw, gb = [None] * n_layers, [None] * n_layers
    trainable = [i for i in spec.weight_layers() if i >= start and i not in frozen]
    lowest = min(trainable) if trainable else n_layers
    for i in range(n_layers - 1, start - 1, -1):
        if i < lowest:
            break
        layer, cache = spec.layers[i], caches[i - start]
        need_dx = i > lowest
        if isinstance(layer, Conv2D):
            dy, dw, db = _conv_backward(layer, ckpt.weights[i], cache, dy, need_dx)
        elif isinstance(layer, Dense):
            dw = dy.T @ cache
            db = dy.sum(axis=0, dtype=np.float64).astype(dy.dtype) if layer.bias else None
            dy = dy @ ckpt.weights[i] if need_dx else None
        elif isinstance(layer, ReLU):
            dy = dy * cache
        elif isinstance(layer, MaxPool):
            dy = _pool_backward(layer, cache, dy)
        elif isinstance(layer, Flatten):
            if len(cache) == 4:
                n, h, w, c = cache
                dy = dy.reshape(n, c, h, w).transpose(0, 2, 3, 1)
            else:
                dy = dy.reshape(cache)
        if has_weights(layer) and i not in frozen:
            wm = ckpt.weight_mask(i)
            if wm is not None:
                dw = dw * wm
                bm = ckpt.bias_mask(i)
                if bm is not None:
                    db = db * bm
            gw[i], gb[i] = dw, db
    return Gradients(loss, gw, gb, logits)


# ---------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class Schedule:
    """Learning-rate decay rule active from ``start`` (inclusive) to ``stop`` (exclusive, None = open)."""

    start: int
    stop: int | None
    q: float
    delta_t: int

    def contains(self, epoch: int) -> bool:
        return epoch >= self.start and (self.stop is None or epoch < self.stop)


@dataclass
class TrainConfig:
    eta: float = 5e-3
    mu: float = 0.93
    alpha: float = 1.5e-3
    schedule: list = field(default_factory=lambda: [Schedule(0, None, 0.65, 20)])
    batch_size: int = 100
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        self.schedule = [s if isinstance(s, Schedule) else Schedule(**s) for s in self.schedule]
        if self.eta <= 0 or not 0 <= self.mu < 1 or self.alpha < 0:
            raise ValueError("need eta > 0, 0 <= mu < 1, alpha >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        prev_stop = None
        for k, s in enumerate(self.schedule):
            if not 0 < s.q <= 1 or s.delta_t < 1:
                raise ValueError(f"schedule segment {k}: need q in (0, 1] and delta_t >= 1")
            if s.stop is not None and s.stop <= s.start:
                raise ValueError(f"schedule segment {k} is empty")
            if k and (prev_stop is None or s.start < prev_stop):
                raise ValueError("schedule segments must be ordered and disjoint")
            prev_stop = s.stop

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["schedule"] = [dict(s.__dict__) for s in self.schedule]
        return d


def _segment(config: TrainConfig, epoch: int) -> Schedule:
    for s in config.schedule:
        if s.contains(epoch):
            return s
    return config.schedule[-1]


def lr_at(config: TrainConfig, epoch: int) -> float:
    """eta0 times every decay factor applied so far.

    A decay happens at each epoch e > 0 that is a multiple of the delta_t of the
    segment containing e, using that segment's q. For a single segment this is
    eta0 * q ** (epoch // delta_t).
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    eta = config.eta
    for e in range(1, epoch + 1):
        s = _segment(config, e)
        if e % s.delta_t == 0:
            eta *= s.q
    return eta


def sgd_step(ckpt: Checkpoint, grads: Gradients, config: TrainConfig, epoch: int, velocity: dict, eta: float | None = None) -> Checkpoint:
    """In-place Nesterov SGD step.

    With g' = g + alpha * w (L2 folded into the gradient):
        v <- mu * v + g'
        w <- w - eta * (g' + mu * v)
    Masked entries are re-zeroed afterwards.
    """
    eta = lr_at(config, epoch) if eta is None else eta
    for kind, params, gs in (("w", ckpt.weights, grads.weights), ("b", ckpt.biases, grads.biases)):
        for i, g in enumerate(gs):
            if g is None or params[i] is None:
                continue
            p = params[i]
            if g.shape != p.shape:
                raise ShapeError(i, f"gradient shape {g.shape} != parameter shape {p.shape}")
            g = g + config.alpha * p if config.alpha else g
            v = velocity.get((kind, i))
            v = g.copy() if v is None else config.mu * v + g
            velocity[(kind, i)] = v
            p -= (eta * (g + config.mu * v)).astype(p.dtype, copy=False)
    if ckpt.masks:
        ckpt.apply_masks()
        for (kind, i), v in velocity.items():
            m = ckpt.weight_mask(i) if kind == "w" else ckpt.bias_mask(i)
            if m is not None:
                v *= m
    return ckpt


def predict(spec: NetworkSpec, ckpt: Checkpoint, x: np.ndarray, batch_size: int = 500, start: int = 0) -> np.ndarray:
    out = [run_layers(spec, ckpt, np.asarray(x[i : i + batch_size], dtype=ckpt.dtype), start=start) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, spec.num_labels), dtype=ckpt.dtype)


def evaluate(spec: NetworkSpec, ckpt: Checkpoint, x: np.ndarray, y: np.ndarray, batch_size: int = 500, start: int = 0) -> float:
    if len(y) == 0:
        return 0.0
    logits = predict(spec, ckpt, x, batch_size, start)
    return float(np.mean(logits.argmax(axis=1) == np.asarray(y)))


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    train_acc: float
    eval_acc: float | None = None


def train(
    spec: NetworkSpec,
    ckpt: Checkpoint,
    data: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
    frozen: Iterable[int] = (),
    augment: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
    eval_data: tuple[np.ndarray, np.ndarray] | None = None,
    start: int = 0,
) -> tuple[Checkpoint, list[EpochLog]]:
    """Mini-batch Nesterov SGD; returns a new checkpoint and per-epoch log.

    Batch order and augmentation draws come from ``config.seed`` only, so runs
    are reproducible. ``start`` lets a frozen prefix be skipped when ``data``
    already holds that prefix's outputs.
    """
    x, y = data
    if len(x) == 0:
        raise ValueError("empty dataset")
    frozen = set(frozen)
    bad = frozen - set(range(len(spec.layers)))
    if bad:
        raise ValueError(f"frozen layers {sorted(bad)} not in network")
    ckpt = ckpt.copy()
    ckpt.apply_masks()
    rng = np.random.default_rng(config.seed)
    velocity: dict = {}
    history = []
    all_frozen = not any(i >= start and i not in frozen for i in spec.weight_layers())
    for e in range(config.epochs):
        eta = lr_at(config, e)
        order = rng.permutation(len(x))
        loss_sum, correct = 0.0, 0
        for b, lo in enumerate(range(0, len(x), config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            xb = x[idx]
            if augment is not None:
                xb = augment(xb, rng)
            if all_frozen:
                logits = run_layers(spec, ckpt, np.asarray(xb, dtype=ckpt.dtype), start=start)
                loss, _ = softmax_xent(logits, y[idx])
                correct += int(np.sum(logits.argmax(1) == y[idx]))
                loss_sum += loss * len(idx)
                continue
            try:
                grads = backward(spec, ckpt, xb, y[idx], frozen, start=start, batch_index=b)
            except TrainingDiverged as err:
                raise TrainingDiverged(f"training diverged at epoch {e}, batch {b}", epoch=e, batch=b) from err
            loss_sum += grads.loss * len(idx)
            correct += int(np.sum(grads.logits.argmax(1) == y[idx]))
            sgd_step(ckpt, grads, config, e, velocity, eta=eta)
        ckpt.epoch += 1
        train_acc = correct / len(x)
        eval_acc = evaluate(spec, ckpt, *eval_data, start=start) if eval_data is not None else None
        history.append(EpochLog(ckpt.epoch, eta, loss_sum / len(x), train_acc, eval_acc))
        log.info("epoch %d lr %.3g loss %.4f eval %s", ckpt.epoch, eta, loss_sum / len(x), eval_acc)
        if not math.isfinite(loss_sum):
            raise TrainingDiverged(f"training diverged at epoch {e}", epoch=e)
    return ckpt, history
