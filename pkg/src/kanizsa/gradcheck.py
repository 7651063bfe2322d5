"""Central finite-difference checks of the analytic gradients in :mod:`kanizsa.nn`."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv, GlobalMaxPool, MaxPool, Network, ReLU, softmax_xent

STEP = 1e-5
TOLERANCE = 1e-6


@dataclass
class GradCheckResult:
    config: dict
    max_rel_error: float
    worst_param: str

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def rel_error(analytic, numeric) -> float:
    """Norm-wise relative error ``|a - n| / max(|a| + |n|, tiny)``."""
    num = np.linalg.norm(analytic - numeric)
    den = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(num / den) if den > 1e-300 else 0.0


def _loss(net, x, y):
    return softmax_xent(net.forward(x, train=False), y)[0]


def numeric_grad(f, arr, step=STEP):
    """Central differences of the scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return g


def _top_gap(a, axis) -> float:
    top = np.sort(a, axis=axis)
    gap = np.take(top, -1, axis=axis) - np.take(top, -2, axis=axis)
    gap = gap[gap > 0]
    return float(gap.min()) if gap.size else np.inf


def kink_margin(net: Network, x) -> float:
    """Distance of the forward pass from the nearest non-differentiable point.

    That is the smallest |pre-activation| entering a ReLU and the smallest
    non-zero gap between the two largest entries of any pooling window.
    Exact ties come from structurally identical values (dead ReLUs feeding a
    pool, or a bias over an all-zero patch) and stay tied under the
    finite-difference perturbations, so they are not kinks.
    """
    margin = np.inf
    for layer in net.layers:
        if isinstance(layer, ReLU):
            margin = min(margin, float(np.abs(x).min()))
        if isinstance(layer, MaxPool):
            n, h, w, c = x.shape
            ho, wo = h // 2, w // 2
            win = (x[:, :2 * ho, :2 * wo].reshape(n, ho, 2, wo, 2, c)
                   .transpose(0, 1, 3, 5, 2, 4).reshape(-1, 4))
            margin = min(margin, _top_gap(win, axis=1))
        if isinstance(layer, GlobalMaxPool) and x.shape[1] * x.shape[2] > 1:
            margin = min(margin, _top_gap(x.reshape(x.shape[0], -1, x.shape[3]), axis=1))
        x = layer.forward(x, train=False)
    return margin


def check_network(net: Network, x, y, step=STEP) -> tuple[float, str]:
    """Largest relative error over all parameter tensors and the input."""
    logits = net.forward(x, train=True)
    _, dlogits = softmax_xent(logits, y)
    dx = net.backward(dlogits)
    worst, name = 0.0, ""
    f = lambda: _loss(net, x, y)  # noqa: E731
    for li, layer in enumerate(net.layers):
        for pname, p in sorted(layer.params.items()):
            err = rel_error(layer.grads[pname], numeric_grad(f, p, step))
            if err > worst:
                worst, name = err, f"layer{li}.{pname}"
    if dx is not None:
        err = rel_error(dx, numeric_grad(f, x, step))
        if err > worst:
            worst, name = err, "input"
    return worst, name


def random_config(rng: np.random.Generator) -> dict:
    """A small random network (2-4 weight layers) over 8x8-ish inputs."""
    size = int(rng.integers(7, 11))
    channels = int(rng.integers(1, 4))
    layers = []
    h = size
    n_conv = int(rng.integers(1, 3))
    for _ in range(n_conv):
        k = int(rng.integers(1, min(4, h) + 1))
        stride = int(rng.integers(1, 3)) if h - k >= 2 else 1
        layers.append({"type": "Conv", "out_channels": int(rng.integers(1, 5)), "kernel": k,
                       "stride": stride})
        h = (h - k) // stride + 1
        if rng.random() < 0.7:
            layers.append({"type": "ReLU"})
        if h >= 2 and rng.random() < 0.5:
            layers.append({"type": "MaxPool", "size": 2})
            h //= 2
    layers.append({"type": "GlobalMaxPool"} if rng.random() < 0.3 else {"type": "Flatten"})
    if rng.random() < 0.6:
        layers += [{"type": "Dense", "out": int(rng.integers(2, 7))}, {"type": "ReLU"}]
    layers.append({"type": "Dense", "out": int(rng.integers(2, 4))})
    return {"input_shape": [size, size, channels], "layers": layers,
            "batch": int(rng.integers(1, 4))}


def check_config(config: dict, seed: int, step=STEP, min_margin=1e-3,
                 attempts=50) -> GradCheckResult:
    """Run one configuration in float64, redrawing inputs that sit near a kink."""
    rng = np.random.default_rng(seed)
    net = Network(config["layers"], config["input_shape"], seed=seed, dtype=np.float64)
    if isinstance(net.layers[0], Conv):
        net.layers[0].need_dx = True
    # zero biases put units over all-zero inputs exactly on the ReLU kink
    for layer in net.layers:
        if "b" in layer.params:
            layer.params["b"][...] = rng.uniform(-0.5, 0.5, layer.params["b"].shape)
    for _ in range(attempts):
        x = rng.standard_normal((config["batch"], *config["input_shape"]))
        if kink_margin(net, x) > min_margin:
            break
    else:
        raise RuntimeError("could not find an input away from non-differentiable points")
    y = rng.integers(0, net.n_classes, size=config["batch"])
    err, name = check_network(net, x, y, step)
    return GradCheckResult(config, err, name)


def run_suite(n_configs=100, seed=0, step=STEP) -> list:
    rng = np.random.default_rng(seed)
    return [check_config(random_config(rng), seed * 100003 + i, step) for i in range(n_configs)]


def fixed_three_layer_check(seed=0) -> GradCheckResult:
    """Conv-ReLU-MaxPool, Conv-ReLU, Dense on 8x8 inputs."""
    config = {"input_shape": [8, 8, 1], "batch": 2,
              "layers": [{"type": "Conv", "out_channels": 3, "kernel": 3, "stride": 1},
                         {"type": "ReLU"}, {"type": "MaxPool", "size": 2},
                         {"type": "Conv", "out_channels": 4, "kernel": 2, "stride": 1},
                         {"type": "ReLU"}, {"type": "Flatten"}, {"type": "Dense", "out": 2}]}
    return check_config(config, seed)
