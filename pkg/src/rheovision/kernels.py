"""Numerical layer primitives with exact analytic forward and backward passes.

Everything runs on plain numpy arrays in NCHW layout. Layers cache whatever
the backward pass needs, accumulate parameter gradients into
``ParamTensor.grad`` and return the gradient with respect to their input.
Training runs in single precision; gradient verification must run in double
precision because central finite differences are meaningless in float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigurationError, InputError, NonFiniteGradientError

# Fixed so a stride-2 5x5 convolution exactly halves even spatial sizes
# (and a 1x1 map stays 1x1), which makes embedding lengths computable.
CONV_PADDING = 2

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ParamTensor:
    """A named learnable tensor with a gradient buffer of the same shape."""

    def __init__(self, value: np.ndarray, name: str):
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self):
        return f"ParamTensor({self.name}, shape={self.value.shape})"


def he_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """He initialization with a uniform distribution: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    if fan_in <= 0:
        raise ConfigurationError(f"fan_in must be positive, got {fan_in}")
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def conv_output_size(size: int, kernel: int = 5, stride: int = 2, padding: int = CONV_PADDING) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x < 0, slope * x, x)


class Conv2d:
    """5x5-style convolution over NCHW input with fixed zero padding.

    Output size per axis is floor((S + 2*padding - K) / stride) + 1. The
    forward pass runs as im2col + one GEMM; the backward pass scatters the
    column gradient back with K*K strided adds (fixed summation order, so
    results are reproducible).
    """

    def __init__(self, weights: ParamTensor, bias: ParamTensor, stride: int = 2,
                 padding: int = CONV_PADDING):
        if stride < 1:
            raise ConfigurationError(f"stride must be >= 1, got {stride}")
        if weights.value.ndim != 4:
            raise ConfigurationError(f"conv weights must be 4-d, got shape {weights.value.shape}")
        self.weights = weights
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self._cols = None
        self._x_shape = None

    @classmethod
    def create(cls, in_channels: int, out_channels: int, name: str, rng: np.random.Generator,
               kernel: int = 5, stride: int = 2, dtype=np.float32) -> "Conv2d":
        fan_in = in_channels * kernel * kernel
        w = ParamTensor(he_uniform((out_channels, in_channels, kernel, kernel), fan_in, rng, dtype),
                        f"{name}.weight")
        b = ParamTensor(np.zeros(out_channels, dtype=dtype), f"{name}.bias")
        return cls(w, b, stride=stride)

    def params(self):
        return [self.weights, self.bias]

    def buffers(self):
        return []

    def output_shape(self, h: int, w: int):
        k = self.weights.value.shape[2]
        return (conv_output_size(h, k, self.stride, self.padding),
                conv_output_size(w, k, self.stride, self.padding))

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        cout, cin, k, _ = self.weights.value.shape
        if x.ndim != 4 or x.shape[1] != cin:
            raise ConfigurationError(
                f"conv '{self.weights.name}' expects input channels {cin}, "
                f"got input shape {x.shape}")
        n, _, h, w = x.shape
        p, s = self.padding, self.stride
        if h + 2 * p < k or w + 2 * p < k:
            raise ConfigurationError(f"spatial size {h}x{w} too small for {k}x{k} kernel")
        ho, wo = self.output_shape(h, w)

        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        # (N, Ho, Wo, Cin*K*K) contiguous copy feeding one GEMM
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * k * k)
        wmat = self.weights.value.reshape(cout, -1)
        y = cols @ wmat.T + self.bias.value
        self._cols = cols
        self._x_shape = x.shape
        return y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cols is None:
            raise InputError("conv backward called before forward")
        cout, cin, k, _ = self.weights.value.shape
        n, _, h, w = self._x_shape
        ho, wo = self.output_shape(h, w)
        p, s = self.padding, self.stride

        dy_cols = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        self.weights.grad += (dy_cols.T @ self._cols).reshape(self.weights.value.shape)
        self.bias.grad += dy_cols.sum(axis=0)

        dcols = dy_cols @ self.weights.value.reshape(cout, -1)
        dcols = dcols.reshape(n, ho, wo, cin, k, k).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros((n, cin, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += dcols[:, :, :, :, ki, kj]
        return dxp[:, :, p:p + h, p:p + w]


class BatchNorm2d:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with biased batch statistics (eps 1e-5 in the
    denominator) and updates running statistics with momentum 0.1; eval mode
    uses the running statistics. Both modes have exact backward passes.
    """

    def __init__(self, gamma: ParamTensor, beta: ParamTensor,
                 eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.gamma = gamma
        self.beta = beta
        self.eps = eps
        self.momentum = momentum
        c = gamma.value.shape[0]
        self.running_mean = np.zeros(c, dtype=gamma.value.dtype)
        self.running_var = np.ones(c, dtype=gamma.value.dtype)
        self._cache = None

    @classmethod
    def create(cls, channels: int, name: str, dtype=np.float32) -> "BatchNorm2d":
        g = ParamTensor(np.ones(channels, dtype=dtype), f"{name}.gamma")
        b = ParamTensor(np.zeros(channels, dtype=dtype), f"{name}.beta")
        return cls(g, b)

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.gamma.name[:-6]}.running_mean", self.running_mean),
                (f"{self.gamma.name[:-6]}.running_var", self.running_var)]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        n, c, h, w = x.shape
        g = self.gamma.value.reshape(1, c, 1, 1)
        b = self.beta.value.reshape(1, c, 1, 1)
        if train:
            if n * h * w < 2:
                raise InputError(
                    f"batch norm needs at least 2 values per channel in train mode, "
                    f"got N*H*W = {n * h * w}")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
            m = self.momentum
            self.running_mean += m * (mean - self.running_mean)
            self.running_var += m * (var - self.running_var)
            self._cache = ("train", xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
            self._cache = ("eval", xhat, inv_std)
        return g * xhat + b

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise InputError("batch norm backward called before forward")
        mode, xhat, inv_std = self._cache
        c = dy.shape[1]
        self.gamma.grad += (dy * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dy.sum(axis=(0, 2, 3))
        g = self.gamma.value.reshape(1, c, 1, 1)
        if mode == "eval":
            return dy * g * inv_std.reshape(1, c, 1, 1)
        t = dy * g
        t_mean = t.mean(axis=(0, 2, 3), keepdims=True)
        tx_mean = (t * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (t - t_mean - xhat * tx_mean) * inv_std.reshape(1, c, 1, 1)


class ReLU:
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""

    def __init__(self):
        self._mask = None

    def params(self):
        return []

    def buffers(self):
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dy, 0.0)

    def activation_signature(self) -> int:
        return hash(self._mask.tobytes())


class LeakyReLU:
    """x < 0 ? slope*x : x. The x = 0 point sits on the identity branch."""

    def __init__(self, slope: float):
        if not 0.0 < slope < 1.0:
            raise ConfigurationError(f"leaky slope must be in (0, 1), got {slope}")
        self.slope = slope
        self._neg = None

    def params(self):
        return []

    def buffers(self):
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._neg = x < 0
        return np.where(self._neg, self.slope * x, x)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._neg, self.slope * dy, dy)

    def activation_signature(self) -> int:
        return hash(self._neg.tobytes())


class Dense:
    """Affine map y = x @ W.T + b with W of shape (out_features, in_features)."""

    def __init__(self, weights: ParamTensor, bias: ParamTensor):
        self.weights = weights
        self.bias = bias
        self._x = None

    @classmethod
    def create(cls, in_features: int, out_features: int, name: str, rng: np.random.Generator,
               dtype=np.float32) -> "Dense":
        w = ParamTensor(he_uniform((out_features, in_features), in_features, rng, dtype),
                        f"{name}.weight")
        b = ParamTensor(np.zeros(out_features, dtype=dtype), f"{name}.bias")
        return cls(w, b)

    def params(self):
        return [self.weights, self.bias]

    def buffers(self):
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        fout, fin = self.weights.value.shape
        if x.ndim != 2 or x.shape[1] != fin:
            raise ConfigurationError(
                f"dense '{self.weights.name}' expects {fin} input features, "
                f"got input shape {x.shape}")
        self._x = x
        return x @ self.weights.value.T + self.bias.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise InputError("dense backward called before forward")
        self.weights.grad += dy.T @ self._x
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weights.value


class NesterovSGD:
    """Nesterov-momentum SGD in the Sutskever formulation.

    Per step: v <- beta*v - lr*g ; w <- w + beta*v - lr*g (with the updated v).
    With beta = 0 this reduces exactly to plain gradient descent. Weight decay
    is *not* applied here: the trainer folds the 2*lambda*w term into the
    gradients before stepping, so the lambda stored on the state is
    bookkeeping only.
    """

    def __init__(self, learning_rate: float = 5e-3, momentum: float = 0.99,
                 weight_decay: float = 1e-3):
        if not 0.0 <= momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {momentum}")
        if learning_rate <= 0.0:
            raise ConfigurationError(f"learning rate must be positive, got {learning_rate}")
        if weight_decay < 0.0:
            raise ConfigurationError(f"weight decay must be >= 0, got {weight_decay}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities: dict[str, np.ndarray] = {}

    def step(self, params) -> None:
        lr, beta = self.learning_rate, self.momentum
        for p in params:
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for parameter '{p.name}'")
            v = self.velocities.get(p.name)
            if v is None:
                v = np.zeros_like(p.value)
                self.velocities[p.name] = v
            v *= beta
            v -= lr * g
            p.value += beta * v - lr * g


@dataclass
class GradCheckReport:
    """Result of comparing analytic gradients against central finite differences."""

    max_rel_err: float
    tolerance: float
    per_tensor: dict = field(default_factory=dict)
    worst: tuple = ("", ())
    n_checked: int = 0
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"gradient check {status}: max rel err {self.max_rel_err:.3e} "
                f"(tolerance {self.tolerance:.1e}, {self.n_checked} coordinates, "
                f"{self.n_skipped} skipped at kinks, "
                f"worst at {self.worst[0]}{list(self.worst[1])})")


def finite_difference_check(loss_fn, tensors: dict, analytic: dict, eps: float = 1e-5,
                            tolerance: float = 1e-4, max_coords: int | None = None,
                            rng: np.random.Generator | None = None,
                            signature_fn=None, abs_tol: float = 1e-7) -> GradCheckReport:
    """Compare analytic gradients to central finite differences coordinate-wise.

    ``loss_fn()`` evaluates the scalar loss at the current tensor values;
    ``tensors`` maps names to the float64 arrays perturbed in place and
    ``analytic`` maps the same names to the analytic gradients. When
    ``max_coords`` is given, at most that many coordinates per tensor are
    checked (sampled with ``rng``); otherwise every coordinate is checked.

    Central differences are undefined across a ReLU-style kink: if
    ``signature_fn`` reports different activation patterns for the +eps and
    -eps evaluations, that coordinate is skipped (and counted), because the
    secant there does not estimate the one-sided subgradient the backward
    pass is defined to return. Coordinates where analytic and numeric values
    agree within ``abs_tol`` count as exact: the difference quotient carries
    O(|loss|*2^-52/eps) rounding noise, so relative error is meaningless for
    gradients that are genuinely ~0.
    """
    report = GradCheckReport(max_rel_err=0.0, tolerance=tolerance)
    for name, arr in tensors.items():
        if arr.dtype != np.float64:
            raise InputError(f"finite differences need float64, tensor '{name}' is {arr.dtype}")
        grad = analytic[name]
        flat = arr.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(n, size=max_coords, replace=False)
            idx.sort()
        else:
            idx = range(n)
        worst_here = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn()
            sig_p = signature_fn() if signature_fn else None
            flat[i] = orig - eps
            lm = loss_fn()
            sig_m = signature_fn() if signature_fn else None
            flat[i] = orig
            if signature_fn and sig_p != sig_m:
                report.n_skipped += 1
                continue
            numeric = (lp - lm) / (2.0 * eps)
            a = grad.reshape(-1)[i]
            diff = abs(a - numeric)
            rel = 0.0 if diff < abs_tol else diff / max(abs(a) + abs(numeric), 1e-8)
            report.n_checked += 1
            if rel > worst_here:
                worst_here = rel
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst = (name, np.unravel_index(i, arr.shape))
        report.per_tensor[name] = worst_here
    return report


def gradient_check(fragment, inputs, tolerance: float = 1e-4, eps: float = 1e-5,
                   seed: int = 0, train: bool = True,
                   max_coords: int | None = None) -> GradCheckReport:
    """Check a layer or model fragment end to end.

    ``fragment`` needs ``forward(*inputs, train=...)``, ``backward(dout)``
    returning input gradients in the order of ``inputs``, and ``params()``
    (plus ``buffers()`` for layers with running statistics, which are
    restored before every evaluation so repeated forwards see identical
    state). The scalar objective is a fixed random projection of the output,
    so every output element influences the check.
    """
    rng = np.random.default_rng(seed)
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    buffers = fragment.buffers() if hasattr(fragment, "buffers") else []
    snapshot = [(buf, buf.copy()) for _, buf in buffers]

    def restore():
        for buf, saved in snapshot:
            buf[...] = saved

    restore()
    out = fragment.forward(*inputs, train=train)
    proj = rng.standard_normal(out.shape)

    def loss_fn() -> float:
        restore()
        return float((fragment.forward(*inputs, train=train) * proj).sum())

    for p in fragment.params():
        p.zero_grad()
    restore()
    fragment.forward(*inputs, train=train)
    din = fragment.backward(proj)
    if not isinstance(din, (tuple, list)):
        din = (din,)

    tensors: dict[str, np.ndarray] = {}
    analytic: dict[str, np.ndarray] = {}
    for i, (x, dx) in enumerate(zip(inputs, din)):
        tensors[f"input{i}"] = x
        analytic[f"input{i}"] = np.asarray(dx, dtype=np.float64)
    for p in fragment.params():
        tensors[p.name] = p.value
        analytic[p.name] = p.grad
    signature_fn = getattr(fragment, "activation_signature", None)
    try:
        return finite_difference_check(loss_fn, tensors, analytic, eps=eps,
                                       tolerance=tolerance, max_coords=max_coords, rng=rng,
                                       signature_fn=signature_fn)
    finally:
        restore()
