"""A small numpy CNN: layers with hand-written backward passes, plain SGD.

Activations use NHWC layout (batch, height, width, channels). Every layer caches what its backward pass
needs during ``forward`` and writes parameter gradients into ``grads``.
"""
from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    pass


class NumericalDivergence(FloatingPointError):
    pass


class Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape

    def spec(self) -> dict:
        return {"type": type(self).__name__}


def _im2col(x, k, stride, ho, wo):
    n, _, _, c = x.shape
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)


def conv2d_forward(x, w, b, stride=1):
    """Valid cross-correlation on NHWC input with HWIO weights ``(k, k, C, F)``.

    Returns ``(out, cols)``; ``cols`` is the im2col matrix reused by the backward pass.
    """
    n, h, wd, c = x.shape
    k, k2, c2, f = w.shape
    if c != c2 or k != k2:
        raise ShapeMismatch(f"input channels {c} vs kernel {w.shape}")
    if h < k or wd < k:
        raise ShapeMismatch(f"input {h}x{wd} smaller than kernel {k}")
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    cols = _im2col(x, k, stride, ho, wo)
    out = cols @ w.reshape(-1, f)
    out += b
    return out.reshape(n, ho, wo, f), cols


def conv2d_backward(dout, cols, x_shape, w, stride=1, need_dx=True):
    """Gradients ``(dx, dw, db)`` of :func:`conv2d_forward`; ``dx`` is None unless requested."""
    n, h, wd, c = x_shape
    k, _, _, f = w.shape
    _, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, f)
    dw = (cols.T @ d2).reshape(w.shape)
    db = np.ones(len(d2), dtype=d2.dtype) @ d2
    if not need_dx:
        return None, dw, db
    dx = np.zeros(x_shape, dtype=dout.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dx[:, i:i + hs:stride, j:j + ws:stride, :] += (d2 @ w[i, j].T).reshape(n, ho, wo, c)
    return dx, dw, db


class Conv(Layer):
    """Convolution layer; activations are NHWC, weights ``(k, k, in, out)``."""

    def __init__(self, out_channels, kernel, stride=1):
        super().__init__()
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.need_dx = True

    def build(self, in_shape, rng, dtype):
        _, _, c = in_shape
        fan_in = c * self.kernel * self.kernel
        self.params["w"] = (rng.standard_normal((self.kernel, self.kernel, c, self.out_channels))
                            * math.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["b"] = np.zeros(self.out_channels, dtype=dtype)

    def output_shape(self, shape):
        h, w, _ = shape
        if h < self.kernel or w < self.kernel:
            raise ShapeMismatch(f"input {h}x{w} smaller than kernel {self.kernel}")
        return ((h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1,
                self.out_channels)

    def forward(self, x, train=True):
        out, cols = conv2d_forward(x, self.params["w"], self.params["b"], self.stride)
        if train:
            self._cache = (cols, x.shape)
        return out

    def backward(self, dout):
        cols, x_shape = self._cache
        dx, dw, db = conv2d_backward(dout, cols, x_shape, self.params["w"], self.stride,
                                     self.need_dx)
        self.grads["w"], self.grads["b"] = dw, db
        return dx

    def spec(self):
        return {"type": "Conv", "out_channels": self.out_channels, "kernel": self.kernel,
                "stride": self.stride}


class ReLU(Layer):
    def forward(self, x, train=True):
        out = np.maximum(x, 0)
        if train:
            self._mask = x > 0
        return out

    def backward(self, dout):
        return dout * self._mask


def maxpool2_forward(x):
    """2x2 max pooling on NHWC input. Returns ``(out, choice)``.

    ``choice`` holds the window position (0..3, row-major) of the maximum,
    the first one on ties. Trailing odd rows/columns are dropped.
    """
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ShapeMismatch(f"input {h}x{w} smaller than the pool window")
    quads = [x[:, di:2 * ho:2, dj:2 * wo:2, :] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    choice = np.full(out.shape, 3, dtype=np.int8)
    for q in (2, 1, 0):
        choice[quads[q] == out] = q
    return out, choice


def maxpool2_backward(dout, choice, x_shape):
    n, h, w, c = x_shape
    ho, wo = dout.shape[1], dout.shape[2]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    q = 0
    for di in (0, 1):
        for dj in (0, 1):
            dx[:, di:2 * ho:2, dj:2 * wo:2, :] = dout * (choice == q)
            q += 1
    return dx


class MaxPool(Layer):
    """Non-overlapping 2x2 max pooling."""

    def __init__(self, size=2):
        super().__init__()
        if size != 2:
            raise ValueError("only 2x2 pooling is supported")
        self.size = size

    def output_shape(self, shape):
        h, w, c = shape
        return (h // 2, w // 2, c)

    def forward(self, x, train=True):
        out, choice = maxpool2_forward(x)
        if train:
            self._cache = (choice, x.shape)
        return out

    def backward(self, dout):
        choice, x_shape = self._cache
        return maxpool2_backward(dout, choice, x_shape)

    def spec(self):
        return {"type": "MaxPool", "size": self.size}


class GlobalMaxPool(Layer):
    """Maximum over all spatial positions: (N, H, W, C) -> (N, C).

    The gradient goes to the first maximal position in row-major order.
    """

    def output_shape(self, shape):
        return (shape[-1],)

    def forward(self, x, train=True):
        n, h, w, c = x.shape
        flat = x.reshape(n, h * w, c)
        idx = flat.argmax(axis=1)
        if train:
            self._cache = (idx, x.shape)
        return np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]

    def backward(self, dout):
        idx, (n, h, w, c) = self._cache
        dx = np.zeros((n, h * w, c), dtype=dout.dtype)
        np.put_along_axis(dx, idx[:, None, :], dout[:, None, :], axis=1)
        return dx.reshape(n, h, w, c)


class Flatten(Layer):
    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    def __init__(self, out_features):
        super().__init__()
        self.out_features = out_features

    def build(self, in_shape, rng, dtype):
        if len(in_shape) != 1:
            raise ShapeMismatch(f"Dense expects flat input, got {in_shape}")
        fan_in = in_shape[0]
        self.params["w"] = (rng.standard_normal((self.out_features, fan_in))
                            * math.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["b"] = np.zeros(self.out_features, dtype=dtype)

    def output_shape(self, shape):
        return (self.out_features,)

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.params["w"].shape[1]:
            raise ShapeMismatch(f"Dense expects (batch, {self.params['w'].shape[1]}), got {x.shape}")
        if train:
            self._x = x
        return x @ self.params["w"].T + self.params["b"]

    def backward(self, dout):
        self.grads["w"] = dout.T @ self._x
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["w"]

    def spec(self):
        return {"type": "Dense", "out": self.out_features}


def dense_backward(dout, x, w):
    """Standalone gradients ``(dx, dw, db)`` for ``y = x @ w.T + b``."""
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def relu_backward(dout, x):
    return dout * (x > 0)


def log_softmax(logits):
    top = logits.argmax(axis=1)[:, None]
    z = logits - np.take_along_axis(logits, top, axis=1)
    e = np.exp(z)
    # log1p over the non-maximal terms keeps tiny losses accurate
    np.put_along_axis(e, top, 0.0, axis=1)
    return z - np.log1p(e.sum(axis=1, keepdims=True))


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ShapeMismatch(f"labels {labels.shape} do not fit logits {logits.shape}")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def softmax_xent_backward(logits, labels):
    return softmax_xent(logits, labels)[1]


def sgd_step(params, grads, lr):
    """In-place ``p -= lr * g``; returns ``params`` for convenience."""
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param {p.shape} vs grad {g.shape}")
        p -= lr * g
    return params


LAYER_TYPES = {"Conv": Conv, "ReLU": ReLU, "MaxPool": MaxPool, "GlobalMaxPool": GlobalMaxPool,
               "Flatten": Flatten, "Dense": Dense}


def layer_from_spec(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("type")
    if kind == "Dense":
        return Dense(d["out"])
    return LAYER_TYPES[kind](**d)


def _conv_stem():
    return [{"type": "Conv", "out_channels": 16, "kernel": 5, "stride": 1}, {"type": "ReLU"},
            {"type": "MaxPool", "size": 2},
            {"type": "Conv", "out_channels": 32, "kernel": 5, "stride": 1}, {"type": "ReLU"},
            {"type": "MaxPool", "size": 2},
            {"type": "Conv", "out_channels": 64, "kernel": 3, "stride": 1}, {"type": "ReLU"}]


def default_architecture(n_classes=2):
    """Conv(16,5)-ReLU-Pool-Conv(32,5)-ReLU-Pool-Conv(64,3)-ReLU-GlobalMaxPool-Dense.

    The global max keeps the classifier translation invariant, which is what
    lets it learn ANGLE and OFFS from 8k images instead of memorizing them.
    """
    return _conv_stem() + [{"type": "GlobalMaxPool"}, {"type": "Dense", "out": n_classes}]


def dense_head_architecture(n_classes=2):
    """Same stem with Pool-Flatten-Dense(128)-ReLU-Dense head."""
    return _conv_stem() + [{"type": "MaxPool", "size": 2}, {"type": "Flatten"},
                           {"type": "Dense", "out": 128}, {"type": "ReLU"},
                           {"type": "Dense", "out": n_classes}]


ARCHITECTURES = {"gmp": default_architecture, "dense": dense_head_architecture}


class Network:
    """A sequential network built from layer spec dicts for a given input shape."""

    def __init__(self, layers, input_shape, seed=0, dtype=np.float32):
        self.layer_specs = [dict(s) for s in layers]
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.layers = [layer_from_spec(s) for s in self.layer_specs]
        rng = np.random.default_rng(seed)
        shape = self.input_shape
        for layer in self.layers:
            if hasattr(layer, "build"):
                layer.build(shape, rng, self.dtype)
            shape = layer.output_shape(shape)
        if len(shape) != 1:
            raise ShapeMismatch(f"network must end in a flat layer, got {shape}")
        self.n_classes = shape[0]
        # the first layer never needs an input gradient
        if isinstance(self.layers[0], Conv):
            self.layers[0].need_dx = False

    def forward(self, x, train=True):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatch(f"expected input (batch, {self.input_shape}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def parameters(self):
        return [p for layer in self.layers for _, p in sorted(layer.params.items())]

    def gradients(self):
        return [layer.grads[name] for layer in self.layers for name in sorted(layer.params)]

    def get_state(self):
        return [p.copy() for p in self.parameters()]

    def set_state(self, state):
        for p, s in zip(self.parameters(), state, strict=True):
            p[...] = s

    def descriptor(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": self.layer_specs}

    def predict_logits(self, x, batch_size=256):
        outs = [self.forward(x[i:i + batch_size], train=False) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.n_classes), dtype=self.dtype)

    def save(self, path):
        save_checkpoint(path, self)


CHECKPOINT_MAGIC = b"KNZM"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, net: Network) -> None:
    """``KNZM`` | u32 version | u32 descriptor length | JSON descriptor | f32 LE params."""
    desc = json.dumps(net.descriptor(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(desc)) + desc)
        for p in net.parameters():
            f.write(np.asarray(p, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> Network:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    desc = json.loads(data[12:12 + n].decode("utf-8"))
    net = Network(desc["layers"], desc["input_shape"], dtype=dtype)
    offset = 12 + n
    for p in net.parameters():
        size = p.size * 4
        if offset + size > len(data):
            raise ValueError(f"{path}: truncated parameter block")
        p[...] = np.frombuffer(data, dtype="<f4", count=p.size, offset=offset).reshape(p.shape)
        offset += size
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return net


# --- training ------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 8
    max_epochs: int = 300
    target_val_accuracy: float = 0.95
    seed: int = 0
    eval_every: int = 1
    # stop this many evaluations after the best post-target val loss; None runs to max_epochs
    patience: int | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.target_val_accuracy <= 1.0:
            raise ValueError("target_val_accuracy must lie in [0, 1]")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float


EPOCH_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds")


@dataclass
class TrainResult:
    model: Network
    records: list
    reached_epoch: int | None
    selected_epoch: int
    diverged: bool = False

    @property
    def outcome(self) -> str:
        if self.reached_epoch is not None:
            return f"ReachedTarget({self.reached_epoch})"
        return "Diverged" if self.diverged else "ExhaustedEpochs"


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def loss_and_accuracy(net: Network, x, y, batch_size=256):
    if len(x) == 0:
        return float("nan"), float("nan")
    total, correct = 0.0, 0
    for i in range(0, len(x), batch_size):
        logits = net.forward(x[i:i + batch_size], train=False)
        yb = y[i:i + batch_size]
        loss, _ = softmax_xent(logits, yb)
        total += loss * len(yb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return total / len(x), correct / len(x)


def train(net: Network, train_set, val_set, cfg: TrainConfig, on_epoch=None) -> TrainResult:
    """SGD training with per-epoch validation.

    ``reached_epoch`` is the first epoch whose validation accuracy meets the
    target. The returned model carries the parameters of the selected epoch:
    the lowest validation loss at or after the target epoch, or the lowest
    overall if the target was never reached. Raises NumericalDivergence on a
    non-finite loss.
    """
    x, y = train_set
    xv, yv = val_set
    if len(x) == 0 or len(xv) == 0:
        raise ValueError("training and validation sets must be non-empty")
    records, reached = [], None
    best = (math.inf, 0, None)  # (val loss, epoch, state)
    since_best = 0
    params = net.parameters()
    bs = cfg.batch_size
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = epoch_permutation(cfg.seed, epoch, len(x))
        loss_sum, correct = 0.0, 0
        for i in range(0, len(x), bs):
            idx = order[i:i + bs]
            xb, yb = x[idx], y[idx]
            logits = net.forward(xb, train=True)
            loss, dlogits = softmax_xent(logits, yb)
            if not math.isfinite(loss):
                raise NumericalDivergence(f"non-finite loss at epoch {epoch}, step {i // bs}")
            net.backward(dlogits.astype(net.dtype, copy=False))
            sgd_step(params, net.gradients(), cfg.learning_rate)
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == yb).sum())
        if epoch % cfg.eval_every and epoch != cfg.max_epochs:
            continue
        val_loss, val_acc = loss_and_accuracy(net, xv, yv)
        if not math.isfinite(val_loss):
            raise NumericalDivergence(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, loss_sum / len(x), correct / len(x), val_loss, val_acc,
                          time.perf_counter() - t0)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        newly_reached = reached is None and val_acc >= cfg.target_val_accuracy
        if newly_reached:
            reached = epoch
        # before the target is hit any lower loss wins; the first post-target epoch always resets
        if newly_reached or val_loss < best[0]:
            best = (val_loss, epoch, net.get_state())
            since_best = 0
        else:
            since_best += 1
        if reached is not None and cfg.patience is not None and since_best >= cfg.patience:
            break
    net.set_state(best[2])
    return TrainResult(net, records, reached, best[1])


def evaluate(net: Network, images, labels, batch_size=256) -> float:
    """Test error rate in [0, 1]."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty test set")
    if labels.max() >= net.n_classes:
        raise ShapeMismatch(f"labels up to {labels.max()} but the head has {net.n_classes} outputs")
    pred = predict(net, images, batch_size)
    return float((pred != labels).mean())


def predict(net: Network, images, batch_size=256) -> np.ndarray:
    return net.predict_logits(images, batch_size).argmax(axis=1)


def prepare_images(images, downscale=1, dtype=np.float32) -> np.ndarray:
    """uint8 (N, H, W) -> float (N, H/d, W/d, 1) with ink mapped to 1, background to 0."""
    x = np.asarray(images, dtype=np.float64)
    if downscale > 1:
        n, h, w = x.shape
        d = downscale
        x = x[:, :h // d * d, :w // d * d].reshape(n, h // d, d, w // d, d).mean(axis=(2, 4))
    return ((255.0 - x) / 255.0).astype(dtype)[..., None]


def write_epoch_csv(path, records) -> None:
    lines = [",".join(EPOCH_FIELDS)]
    for r in records:
        lines.append(f"{r.epoch},{r.train_loss:.10g},{r.train_acc:.10g},{r.val_loss:.10g},"
                     f"{r.val_acc:.10g},{r.seconds:.3f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_epoch_csv(path) -> list:
    lines = Path(path).read_text().splitlines()[1:]
    out = []
    for line in lines:
        e, tl, ta, vl, va, s = line.split(",")
        out.append(EpochRecord(int(e), float(tl), float(ta), float(vl), float(va), float(s)))
    return out
