"""Small numpy training engine for materialized layer chains.

Tensors are NHWC (or NC for dense inputs). Every layer caches what it needs
in ``forward`` and returns the input gradient from ``backward``; parameter
gradients land in ``layer.grads``. Weighted layers can carry a weight
bitwidth and ReLU6 layers an activation range tracker, which turns the chain
into a fake-quantized network trained with the clipped straight-through
estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import quant
from .space import LayerSpec, QuantizationPolicy

BN_EPS = 1e-3
BN_MOMENTUM = 0.9


class Diverged(RuntimeError):
    """Training produced a non-finite loss."""


def _same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


class Layer:
    kind = ""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Weighted(Layer):
    """Shared weight handling: optional per-channel fake quantization."""

    bitwidth: int | None = None

    def __init__(self, spec: LayerSpec, dtype):
        super().__init__(spec)
        self.params["w"] = np.zeros(spec.weight_shape, dtype=dtype)
        self.params["b"] = np.zeros(spec.out_channels, dtype=dtype)
        self.fan_in = spec.n_weights // spec.out_channels if spec.kind != "depthwise_conv" else (
            spec.kernel_size**2
        )

    def effective_weight(self) -> np.ndarray:
        w = self.params["w"]
        if self.bitwidth is None:
            self._wmask = None
            return w
        qp = quant.calibrate_weights(w, self.bitwidth, channel_axis=-1)
        self._wmask = quant.ste_mask(w, qp)
        return quant.fake_quantize(w, qp).astype(w.dtype)

    def weight_grad(self, gw: np.ndarray) -> np.ndarray:
        if self._wmask is None:
            return gw
        return np.where(self._wmask, gw, 0.0)


class Dense(Weighted):
    kind = "dense"

    def forward(self, x, train):
        self._x = x
        self._w = self.effective_weight()
        return x @ self._w + self.params["b"]

    def backward(self, g):
        self.grads["w"] = self.weight_grad(self._x.T @ g)
        self.grads["b"] = g.sum(axis=0)
        return g @ self._w.T


class Pointwise(Weighted):
    kind = "pointwise_conv"

    def forward(self, x, train):
        w = self.effective_weight()
        self._w = w
        self._shape = x.shape
        x2 = x.reshape(-1, x.shape[-1])
        self._x2 = x2
        y = x2 @ w + self.params["b"]
        return y.reshape(*x.shape[:-1], w.shape[1])

    def backward(self, g):
        g2 = g.reshape(-1, g.shape[-1])
        self.grads["w"] = self.weight_grad(self._x2.T @ g2)
        self.grads["b"] = g2.sum(axis=0)
        return (g2 @ self._w.T).reshape(self._shape)


class Conv(Weighted):
    kind = "conv"

    def forward(self, x, train):
        k, s = self.spec.kernel_size, self.spec.stride
        n, h, w_, c = x.shape
        ho, pt, pb = _same_padding(h, k, s)
        wo, pl, pr = _same_padding(w_, k, s)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
        win = win[:, :ho, :wo]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
        w = self.effective_weight()
        wr = w.reshape(k * k * c, -1)
        self._cache = (x.shape, xp.shape, cols, wr, ho, wo, pt, pl)
        return (cols @ wr + self.params["b"]).reshape(n, ho, wo, -1)

    def backward(self, g):
        k, s = self.spec.kernel_size, self.spec.stride
        xshape, xpshape, cols, wr, ho, wo, pt, pl = self._cache
        n, h, w_, c = xshape
        g2 = g.reshape(-1, g.shape[-1])
        self.grads["w"] = self.weight_grad((cols.T @ g2).reshape(self.params["w"].shape))
        self.grads["b"] = g2.sum(axis=0)
        dcols = (g2 @ wr.T).reshape(n, ho, wo, k, k, c)
        dxp = np.zeros(xpshape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[
                    :, :, :, i, j
                ]
        return dxp[:, pt : pt + h, pl : pl + w_]


class Depthwise(Weighted):
    kind = "depthwise_conv"

    def forward(self, x, train):
        k, s = self.spec.kernel_size, self.spec.stride
        n, h, w_, c = x.shape
        ho, pt, pb = _same_padding(h, k, s)
        wo, pl, pr = _same_padding(w_, k, s)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        w = self.effective_weight()
        y = np.zeros((n, ho, wo, c), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                y += xp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] * w[i, j]
        self._cache = (x.shape, xp, w, ho, wo, pt, pl)
        return y + self.params["b"]

    def backward(self, g):
        k, s = self.spec.kernel_size, self.spec.stride
        xshape, xp, w, ho, wo, pt, pl = self._cache
        n, h, w_, c = xshape
        gw = np.empty_like(w)
        dxp = np.zeros_like(xp)
        g2 = g.reshape(-1, c)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
                gw[i, j] = np.einsum("mc,mc->c", xp[sl].reshape(-1, c), g2)
                dxp[sl] += g * w[i, j]
        self.grads["w"] = self.weight_grad(gw)
        self.grads["b"] = g2.sum(axis=0)
        return dxp[:, pt : pt + h, pl : pl + w_]


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, spec, dtype):
        super().__init__(spec)
        c = spec.out_channels
        self.params["gamma"] = np.ones(c, dtype=dtype)
        self.params["beta"] = np.zeros(c, dtype=dtype)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.folded = False

    def forward(self, x, train):
        if self.folded:
            return x
        shape = x.shape
        x2 = x.reshape(-1, shape[-1])
        if train:
            mean = x2.mean(axis=0)
            xc = x2 - mean
            var = np.einsum("mc,mc->c", xc, xc) / len(x2)
            m = BN_MOMENTUM
            self.running_mean = m * self.running_mean + (1 - m) * mean
            self.running_var = m * self.running_var + (1 - m) * var
        else:
            mean, var = self.running_mean, self.running_var
            xc = x2 - mean
        inv = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
        xhat = xc * inv
        self._cache = (xhat, inv, train)
        return (xhat * self.params["gamma"] + self.params["beta"]).reshape(shape)

    def backward(self, g):
        if self.folded:
            self.grads = {}
            return g
        xhat, inv, train = self._cache
        shape = g.shape
        g2 = g.reshape(-1, shape[-1])
        gamma = self.params["gamma"]
        self.grads["gamma"] = np.einsum("mc,mc->c", g2, xhat)
        self.grads["beta"] = g2.sum(axis=0)
        if not train:
            return (g2 * (gamma * inv)).reshape(shape)
        m = len(g2)
        gi = gamma * inv
        out = g2 * gi - (self.grads["beta"] * gi / m) - xhat * (self.grads["gamma"] * gi / m)
        return out.reshape(shape)


class ReLU6(Layer):
    """ReLU6, optionally followed by an asymmetric per-tensor fake quantizer."""

    kind = "relu6"

    def __init__(self, spec, dtype=None):
        super().__init__(spec)
        self.tracker: quant.RangeTracker | None = None
        self.act_bits = quant.ACTIVATION_BITS
        self.observe = False

    def forward(self, x, train):
        self._x = x
        y = np.clip(x, 0.0, 6.0)
        self._qmask = None
        if self.tracker is not None:
            if self.observe:
                self.tracker.observe(y)
            qp = self.tracker.params(self.act_bits)
            self._qmask = quant.ste_mask(y, qp)
            y = quant.fake_quantize(y, qp).astype(x.dtype)
        return y

    def backward(self, g):
        mask = (self._x > 0) & (self._x < 6)
        if self._qmask is not None:
            mask &= self._qmask
        return np.where(mask, g, 0.0)


class GlobalPool(Layer):
    kind = "global_pool"

    def forward(self, x, train):
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, g):
        n, h, w, c = self._shape
        return np.broadcast_to(g[:, None, None, :] / (h * w), self._shape).copy()


class ResidualAdd(Layer):
    """Marker; the model adds the shortcut activation."""

    kind = "residual_add"

    def forward(self, x, train):
        return x

    def backward(self, g):
        return g


_LAYERS = {
    "conv": Conv,
    "depthwise_conv": Depthwise,
    "pointwise_conv": Pointwise,
    "dense": Dense,
    "batchnorm": BatchNorm,
    "relu6": ReLU6,
    "global_pool": GlobalPool,
    "residual_add": ResidualAdd,
}


def build_layer(spec: LayerSpec, dtype=np.float64) -> Layer:
    cls = _LAYERS[spec.kind]
    if cls in (GlobalPool, ResidualAdd):
        return cls(spec)
    return cls(spec, dtype)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


# --------------------------------------------------------------------------
# model


class Model:
    """Executable layer chain built from ``LayerSpec``s."""

    def __init__(self, specs: Sequence[LayerSpec], dtype=np.float64):
        self.specs = list(specs)
        self.dtype = np.dtype(dtype)
        self.layers = [build_layer(s, self.dtype) for s in self.specs]
        self.policy: QuantizationPolicy | None = None

    @property
    def weighted(self) -> list[Weighted]:
        return [l for l in self.layers if isinstance(l, Weighted)]

    @property
    def num_classes(self) -> int:
        return self.specs[-1].out_channels

    def input_shape(self) -> tuple[int, ...] | None:
        first = self.specs[0]
        if first.kind == "dense":
            return (first.in_channels,)
        if first.in_hw is None:
            return None
        return (*first.in_hw, first.in_channels)

    def init_params(self, rng: np.random.Generator) -> "Model":
        """He-style uniform init, bound ``sqrt(6 / fan_in)``; zero biases."""
        for layer in self.layers:
            if isinstance(layer, Weighted):
                bound = math.sqrt(6.0 / layer.fan_in)
                w = layer.params["w"]
                w[...] = rng.uniform(-bound, bound, size=w.shape)
                layer.params["b"][...] = 0.0
            elif isinstance(layer, BatchNorm):
                layer.params["gamma"][...] = 1.0
                layer.params["beta"][...] = 0.0
                layer.running_mean[...] = 0.0
                layer.running_var[...] = 1.0
        return self

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        expected = self.input_shape()
        if expected is not None and tuple(x.shape[1:]) != expected:
            raise ValueError(f"input shape {x.shape[1:]} != expected {expected}")
        acts = [np.asarray(x, dtype=self.dtype)]
        for layer, spec in zip(self.layers, self.specs):
            out = layer.forward(acts[-1], train)
            if spec.kind == "residual_add":
                out = out + acts[spec.skip_from]
            acts.append(out)
        return acts[-1]

    __call__ = forward

    def backward(self, g: np.ndarray) -> np.ndarray:
        pending: dict[int, np.ndarray] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            spec = self.specs[i]
            if spec.kind == "residual_add":
                pending[spec.skip_from] = pending.get(spec.skip_from, 0) + g
            g = self.layers[i].backward(g)
            if i in pending:
                g = g + pending.pop(i)
        return g

    def parameters(self):
        for layer in self.layers:
            if isinstance(layer, BatchNorm) and layer.folded:
                continue
            for name in layer.params:
                yield layer, name

    def fold_batchnorm(self) -> "Model":
        """Fold every BN (inference statistics) into the preceding weighted layer."""
        for i, layer in enumerate(self.layers):
            if not isinstance(layer, BatchNorm) or layer.folded:
                continue
            prev = self.layers[i - 1]
            if not isinstance(prev, Weighted):
                raise ValueError(f"batchnorm at {i} does not follow a weighted layer")
            scale = layer.params["gamma"] / np.sqrt(layer.running_var + BN_EPS)
            prev.params["w"] = prev.params["w"] * scale
            prev.params["b"] = (prev.params["b"] - layer.running_mean) * scale + layer.params[
                "beta"
            ]
            layer.folded = True
        return self

    def attach_policy(self, policy: QuantizationPolicy) -> "Model":
        weighted = self.weighted
        if len(policy) != len(weighted):
            raise ValueError(
                f"policy has {len(policy)} entries, model has {len(weighted)} weighted layers"
            )
        for layer, bits in zip(weighted, policy.weight_bitwidths):
            layer.bitwidth = int(bits)
        for layer in self.layers:
            if isinstance(layer, ReLU6):
                layer.tracker = quant.RangeTracker()
                layer.act_bits = policy.activation_bitwidth
        self.policy = policy
        return self

    def detach_policy(self) -> "Model":
        for layer in self.weighted:
            layer.bitwidth = None
        for layer in self.layers:
            if isinstance(layer, ReLU6):
                layer.tracker = None
        self.policy = None
        return self

    def _observe(self, flag: bool) -> None:
        for layer in self.layers:
            if isinstance(layer, ReLU6):
                layer.observe = flag and layer.tracker is not None

    def calibrate(self, x: np.ndarray, batch_size: int = 128) -> "Model":
        """EMA activation ranges from inference passes over ``x``."""
        self._observe(True)
        try:
            for s in range(0, len(x), batch_size):
                self.forward(x[s : s + batch_size], train=False)
        finally:
            self._observe(False)
        return self

    def copy(self) -> "Model":
        import copy

        return copy.deepcopy(self)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    lr_schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")


def _lr(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "constant" or total <= 1:
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total))


def train(
    model: Model,
    data: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    qaft: bool = False,
) -> tuple[Model, list[float]]:
    """SGD with momentum on softmax cross-entropy; returns per-epoch mean loss.

    With ``qaft`` the attached policy's fake quantizers stay active in the
    forward pass and activation ranges keep tracking their EMA. Raises
    ``Diverged`` on a non-finite loss.
    """
    x, y = data
    if len(x) == 0:
        raise ValueError("empty dataset")
    if qaft and model.policy is None:
        raise ValueError("QAFT needs an attached quantization policy")
    if cfg.epochs == 0:
        return model, []
    rng = np.random.default_rng(cfg.seed)
    n = len(x)
    steps_per_epoch = -(-n // cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    velocity = {(id(l), k): np.zeros_like(l.params[k]) for l, k in model.parameters()}
    model._observe(qaft)
    losses = []
    step = 0
    try:
        for _ in range(cfg.epochs):
            perm = rng.permutation(n)
            epoch_loss = 0.0
            for s in range(0, n, cfg.batch_size):
                idx = perm[s : s + cfg.batch_size]
                logits = model.forward(x[idx], train=True)
                loss, g = cross_entropy(logits, y[idx])
                if not math.isfinite(loss):
                    raise Diverged(f"non-finite loss at step {step}")
                model.backward(g)
                lr = _lr(cfg, step, total)
                for layer, k in model.parameters():
                    grad = layer.grads.get(k)
                    if grad is None:
                        continue
                    v = velocity[(id(layer), k)]
                    v *= cfg.momentum
                    v += grad
                    layer.params[k] -= lr * v
                epoch_loss += loss * len(idx)
                step += 1
            losses.append(epoch_loss / n)
    finally:
        model._observe(False)
    return model, losses


def predict(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [model.forward(x[s : s + batch_size], train=False) for s in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0)


def evaluate(model: Model, data: tuple[np.ndarray, np.ndarray], batch_size: int = 256) -> float:
    x, y = data
    if len(x) == 0:
        raise ValueError("empty dataset")
    logits = predict(model, x, batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == y))


# --------------------------------------------------------------------------
# gradient checking


def _rel_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(num / den)


def _numeric_grad(f, arr: np.ndarray, eps: float) -> np.ndarray:
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        fp = f()
        arr[i] = old - eps
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def _check_model(model: Model, x: np.ndarray, rng, eps: float, train: bool) -> float:
    r = rng.standard_normal(model.forward(x, train).shape)

    def f():
        return float(np.sum(model.forward(x, train) * r))

    model.forward(x, train)
    gx = model.backward(r)
    errs = [_rel_error(gx, _numeric_grad(f, x, eps))]
    for layer, k in list(model.parameters()):
        model.forward(x, train)
        model.backward(r)
        analytic = layer.grads[k].copy()
        errs.append(_rel_error(analytic, _numeric_grad(f, layer.params[k], eps)))
    return max(errs)


GRADIENT_CHECK_KINDS = (
    "conv",
    "depthwise_conv",
    "pointwise_conv",
    "dense",
    "batchnorm",
    "relu6",
    "global_pool",
    "residual_add",
    "softmax_cross_entropy",
)


def gradient_check(layer_kind: str, eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients
    for one layer kind on random small tensors (float path)."""
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    rng = np.random.default_rng(seed)
    L = LayerSpec
    if layer_kind == "softmax_cross_entropy":
        logits = rng.standard_normal((4, 5))
        labels = rng.integers(5, size=4)
        _, g = cross_entropy(logits, labels)
        num = _numeric_grad(lambda: cross_entropy(logits, labels)[0], logits, eps)
        return _rel_error(g, num)
    if layer_kind == "dense":
        specs, shape = [L("dense", in_channels=5, out_channels=4)], (3, 5)
    elif layer_kind == "conv":
        errs = []
        for k, s in ((3, 1), (3, 2), (2, 2), (4, 1)):
            specs = [L("conv", kernel_size=k, stride=s, in_channels=2, out_channels=3, in_hw=(5, 5))]
            errs.append(_check_one(specs, (2, 5, 5, 2), rng, eps))
        return max(errs)
    elif layer_kind == "depthwise_conv":
        errs = []
        for k, s in ((3, 1), (3, 2), (2, 1), (5, 2)):
            specs = [L("depthwise_conv", kernel_size=k, stride=s, in_channels=3, out_channels=3, in_hw=(5, 5))]
            errs.append(_check_one(specs, (2, 5, 5, 3), rng, eps))
        return max(errs)
    elif layer_kind == "pointwise_conv":
        specs, shape = [L("pointwise_conv", in_channels=4, out_channels=3, in_hw=(3, 3))], (2, 3, 3, 4)
    elif layer_kind == "batchnorm":
        specs, shape = [L("batchnorm", in_channels=3, out_channels=3, in_hw=(3, 3))], (4, 3, 3, 3)
        model = Model(specs)
        model.layers[0].params["gamma"][...] = rng.uniform(0.5, 1.5, 3)
        model.layers[0].params["beta"][...] = rng.standard_normal(3)
        errs = [_check_model(model, rng.standard_normal(shape), rng, eps, train=True)]
        model.layers[0].running_mean[...] = rng.standard_normal(3)
        model.layers[0].running_var[...] = rng.uniform(0.5, 2, 3)
        errs.append(_check_model(model, rng.standard_normal(shape), rng, eps, train=False))
        return max(errs)
    elif layer_kind == "relu6":
        specs = [L("relu6", in_channels=3, out_channels=3, in_hw=(2, 2))]
        # keep every input at least 0.1 away from the kinks at 0 and 6
        x = rng.choice([-1.0, 1.0, 5.0, 7.0], size=(2, 2, 2, 3)) + rng.uniform(-0.9, 0.9, (2, 2, 2, 3))
        return _check_model(Model(specs), x, rng, eps, train=False)
    elif layer_kind == "global_pool":
        specs, shape = [L("global_pool", in_channels=2, out_channels=2, in_hw=(3, 3))], (2, 3, 3, 2)
    elif layer_kind == "residual_add":
        specs = [
            L("pointwise_conv", in_channels=3, out_channels=3, in_hw=(2, 2)),
            L("depthwise_conv", kernel_size=3, in_channels=3, out_channels=3, in_hw=(2, 2)),
            L("residual_add", in_channels=3, out_channels=3, skip_from=0, in_hw=(2, 2)),
            L("pointwise_conv", in_channels=3, out_channels=3, in_hw=(2, 2)),
            L("residual_add", in_channels=3, out_channels=3, skip_from=3, in_hw=(2, 2)),
        ]
        shape = (2, 2, 2, 3)
    else:
        raise ValueError(f"unknown layer kind {layer_kind!r}")
    return _check_one(specs, shape, rng, eps)


def _check_one(specs, shape, rng, eps) -> float:
    model = Model(specs).init_params(rng)
    for layer in model.weighted:
        layer.params["b"][...] = rng.standard_normal(layer.params["b"].shape)
    return _check_model(model, rng.standard_normal(shape), rng, eps, train=True)
