"""Minimal float64 tensors with reverse-mode gradients.

Only the operations the VAE needs are provided: 3x3 strided convolution and
its transpose, batch normalisation, (leaky) ReLU, fully connected layers,
the reparameterisation step and the two loss terms.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Dense float64 array plus the closure that propagates its gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        data = np.asarray(data, dtype=np.float64)
        _check_finite(data, name or "tensor")
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            _check_finite(g, f"gradient of {node.name or 'tensor'}")
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent._accumulate(pg)
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


class Parameter(Tensor):
    """Trainable tensor; ``state`` holds the optimizer slots."""

    __slots__ = ("state",)

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.state = {}

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# layer descriptors

LAYER_KINDS = ("conv2d", "conv_transpose2d", "batchnorm2d", "relu", "leaky_relu", "linear")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    output_padding: int = 0
    negative_slope: float = 0.01
    momentum: float = 0.1
    eps: float = 1e-5
    in_features: int = 0
    out_features: int = 0
    # a convolution feeding batch norm gets no bias: its gradient is identically zero there
    bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel <= 0 or self.stride <= 0 or self.padding < 0:
            raise ValueError("kernel and stride must be positive, padding non-negative")
        if self.kind in ("conv2d", "conv_transpose2d"):
            if self.in_channels <= 0 or self.out_channels <= 0:
                raise ValueError("channel counts must be positive")
            if not 0 <= self.output_padding < max(self.stride, 1) and self.kind == "conv_transpose2d":
                raise ValueError("output_padding must be smaller than stride")
        if self.kind == "batchnorm2d" and self.out_channels <= 0:
            raise ValueError("batchnorm2d needs out_channels")
        if self.kind == "linear" and (self.in_features <= 0 or self.out_features <= 0):
            raise ValueError("linear needs positive in/out features")


# --------------------------------------------------------------------------
# functional ops


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size, kernel, stride, padding, output_padding=0):
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of (N, Cin, H, W) with weights (Cout, Cin, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-d input, got {x.data.ndim} dims")
    n, c, h, w = x.shape
    co, ci, k, k2 = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input channel dim is {c} but weight expects {ci}")
    if k != k2:
        raise ShapeError("conv2d: only square kernels are supported")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: spatial dims {h}x{w} too small for kernel {k}")
    cols = kernels.im2col(np.ascontiguousarray(x.data), k, stride, padding, ho, wo)
    wm = weight.data.reshape(co, -1)
    out = np.matmul(wm, cols)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
    out = out.reshape(n, co, ho, wo)

    def backward(g):
        g2 = g.reshape(n, co, ho * wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        dcols = np.matmul(wm.T, g2)
        gx = kernels.col2im(np.ascontiguousarray(dcols), c, h, w, k, stride, padding, ho, wo)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(out, _parents=parents, _backward=backward, name="conv2d")


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Adjoint of :func:`conv2d`; weights are (Cin, Cout, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects a 4-d input, got {x.data.ndim} dims")
    n, c, h, w = x.shape
    ci, co, k, k2 = weight.shape
    if ci != c:
        raise ShapeError(f"conv_transpose2d: input channel dim is {c} but weight expects {ci}")
    if k != k2:
        raise ShapeError("conv_transpose2d: only square kernels are supported")
    if not 0 <= output_padding < stride:
        raise ShapeError("conv_transpose2d: output_padding must be smaller than stride")
    ho = conv_transpose_output_size(h, k, stride, padding, output_padding)
    wo = conv_transpose_output_size(w, k, stride, padding, output_padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d: non-positive output size")
    wm = weight.data.reshape(ci, -1)
    xm = x.data.reshape(n, ci, h * w)
    cols = np.matmul(wm.T, xm)
    out = kernels.col2im(np.ascontiguousarray(cols), co, ho, wo, k, stride, padding, h, w)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]

    def backward(g):
        dcols = kernels.im2col(np.ascontiguousarray(g), k, stride, padding, h, w)
        gx = np.matmul(wm, dcols).reshape(x.shape)
        gw = np.tensordot(xm, dcols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(out, _parents=parents, _backward=backward, name="conv_transpose2d")


def batchnorm2d(x, gamma, beta, running_mean, running_var, train=True, momentum=0.1, eps=1e-5):
    """Per-channel normalisation over (N, H, W).

    In train mode ``running_mean``/``running_var`` (plain arrays) are updated
    in place; in eval mode they are used instead of batch statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects a 4-d input, got {x.data.ndim} dims")
    n, c, h, w = x.shape
    if gamma.shape != (c,):
        raise ShapeError(f"batchnorm2d: channel dim is {c} but gamma has shape {gamma.shape}")
    g_ = gamma.data[None, :, None, None]
    if train:
        if n < 2:
            raise ValueError("batchnorm2d in train mode needs a batch of at least 2")
        m = n * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * m / max(m - 1, 1)
    else:
        mean = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * g_ + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * g_
        if train:
            m_ = n * h * w
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            dx = (inv[None, :, None, None] / m_) * (m_ * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv[None, :, None, None]
        return [dx, dgamma, dbeta]

    return Tensor(out, _parents=(x, gamma, beta), _backward=backward, name="batchnorm2d")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, 0.0), _parents=(x,),
                  _backward=lambda g: [g * mask], name="relu")


def leaky_relu(x, negative_slope=0.01):
    x = as_tensor(x)
    scale = np.where(x.data >= 0, 1.0, negative_slope)
    return Tensor(x.data * scale, _parents=(x,),
                  _backward=lambda g: [g * scale], name="leaky_relu")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with weight (D, K); extra input dims are flattened."""
    x, weight = as_tensor(x), as_tensor(weight)
    xin = x.data.reshape(x.shape[0], -1) if x.data.ndim != 2 else x.data
    d, k = weight.shape
    if xin.shape[1] != d:
        raise ShapeError(f"linear: input feature dim is {xin.shape[1]} but weight expects {d}")
    # one row at a time so a row's result never depends on its batch
    out = np.matmul(xin[:, None, :], weight.data)[:, 0, :]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data

    def backward(g):
        grads = [(g @ weight.data.T).reshape(x.shape), xin.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(out, _parents=parents, _backward=backward, name="linear")


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return Tensor(x.data.reshape(shape), _parents=(x,),
                  _backward=lambda g: [g.reshape(old)], name="reshape")


def reparameterize(mu, logvar, noise):
    """z = mu + exp(logvar / 2) * noise, differentiable in mu and logvar."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    noise = np.asarray(noise, dtype=np.float64)
    if mu.shape != logvar.shape or noise.shape != mu.shape:
        raise ShapeError("reparameterize: mu, logvar and noise must share a shape")
    std = np.exp(0.5 * logvar.data)
    return Tensor(mu.data + std * noise, _parents=(mu, logvar),
                  _backward=lambda g: [g, g * noise * 0.5 * std], name="z")


def mse_loss(x, xhat):
    """Mean of squared differences over every element."""
    x, xhat = as_tensor(x), as_tensor(xhat)
    if x.shape != xhat.shape:
        raise ShapeError(f"mse_loss: shapes {x.shape} and {xhat.shape} differ")
    diff = xhat.data - x.data
    n = diff.size
    val = np.dot(diff.ravel(), diff.ravel()) / n
    return Tensor(val, _parents=(x, xhat),
                  _backward=lambda g: [-2.0 * g * diff / n, 2.0 * g * diff / n],
                  name="mse")


def kl_loss(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)): summed over latent dims, mean over batch."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"kl_loss: shapes {mu.shape} and {logvar.shape} differ")
    batch = mu.shape[0] if mu.data.ndim > 1 else 1
    ev = np.exp(logvar.data)
    terms = 1.0 + logvar.data - ev - mu.data ** 2
    val = -0.5 * terms.sum() / batch
    return Tensor(val, _parents=(mu, logvar),
                  _backward=lambda g: [g * mu.data / batch, -0.5 * g * (1.0 - ev) / batch],
                  name="kl")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data + b.data, _parents=(a, b), _backward=lambda g: [g, g], name="add")


def scale(a, factor):
    a = as_tensor(a)
    return Tensor(a.data * factor, _parents=(a,), _backward=lambda g: [g * factor], name="scale")


# --------------------------------------------------------------------------
# layers built from specs


class Layer:
    spec: LayerSpec

    def parameters(self):
        return []

    def buffers(self):
        return []


class Conv2d(Layer):
    def __init__(self, spec, rng):
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel ** 2
        self.weight = Parameter(
            rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)),
            name="conv.weight")
        self.bias = Parameter(np.zeros(spec.out_channels), name="conv.bias") if spec.bias else None

    def __call__(self, x, train=True):
        return conv2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class ConvTranspose2d(Layer):
    def __init__(self, spec, rng):
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel ** 2 / spec.stride ** 2
        self.weight = Parameter(
            rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)),
            name="convT.weight")
        self.bias = Parameter(np.zeros(spec.out_channels), name="convT.bias") if spec.bias else None

    def __call__(self, x, train=True):
        s = self.spec
        return conv_transpose2d(x, self.weight, self.bias, s.stride, s.padding, s.output_padding)

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class BatchNorm2d(Layer):
    def __init__(self, spec, rng=None):
        self.spec = spec
        c = spec.out_channels
        self.gamma = Parameter(np.ones(c), name="bn.gamma")
        self.beta = Parameter(np.zeros(c), name="bn.beta")
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)

    def __call__(self, x, train=True):
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           train=train, momentum=self.spec.momentum, eps=self.spec.eps)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]


class ReLU(Layer):
    def __init__(self, spec, rng=None):
        self.spec = spec

    def __call__(self, x, train=True):
        return relu(x)


class LeakyReLU(Layer):
    def __init__(self, spec, rng=None):
        self.spec = spec

    def __call__(self, x, train=True):
        return leaky_relu(x, self.spec.negative_slope)


class Linear(Layer):
    def __init__(self, spec, rng):
        self.spec = spec
        self.weight = Parameter(
            rng.normal(0.0, np.sqrt(1.0 / spec.in_features), (spec.in_features, spec.out_features)),
            name="linear.weight")
        self.bias = Parameter(np.zeros(spec.out_features), name="linear.bias")

    def __call__(self, x, train=True):
        return linear(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


_LAYER_TYPES = {
    "conv2d": Conv2d,
    "conv_transpose2d": ConvTranspose2d,
    "batchnorm2d": BatchNorm2d,
    "relu": ReLU,
    "leaky_relu": LeakyReLU,
    "linear": Linear,
}


def build_layer(spec, rng):
    return _LAYER_TYPES[spec.kind](spec, rng)


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def __call__(self, x, train=True):
        for layer in self.layers:
            x = layer(x, train)
        return x

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        return [b for layer in self.layers for b in layer.buffers()]


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class Adam:
    params: list
    config: AdamConfig = field(default_factory=AdamConfig)
    t: int = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        optimizer_step(self.params, self.config, self)


def optimizer_step(params, config, optimizer=None):
    """One Adam update. ``optimizer`` carries the step counter when given."""
    for i, p in enumerate(params):
        if p.grad is None or not np.isfinite(p.grad).all():
            raise NonFiniteError(f"gradient of parameter {i} ({p.name}) is missing or not finite")
    if optimizer is not None:
        optimizer.t += 1
        t = optimizer.t
    else:
        t = params[0].state.get("t", 0) + 1 if params else 1
    c = config
    for p in params:
        st = p.state
        if "m" not in st:
            st["m"] = np.zeros_like(p.data)
            st["v"] = np.zeros_like(p.data)
        st["t"] = t
        st["m"] = c.beta1 * st["m"] + (1.0 - c.beta1) * p.grad
        st["v"] = c.beta2 * st["v"] + (1.0 - c.beta2) * p.grad * p.grad
        mhat = st["m"] / (1.0 - c.beta1 ** t)
        vhat = st["v"] / (1.0 - c.beta2 ** t)
        p.data = p.data - c.lr * mhat / (np.sqrt(vhat) + c.eps)


# --------------------------------------------------------------------------
# gradient checking


def _loss_value(out, loss, target):
    if loss == "mse":
        return mse_loss(target, out)
    if loss == "kl":
        half = out.shape[-1] // 2
        flat = out.data.reshape(out.shape[0], -1) if out.data.ndim > 1 else out.data[None]
        if flat.shape[-1] % 2:
            raise ShapeError("kl grad check needs an even feature count (mu | logvar)")
        half = flat.shape[-1] // 2
        o = reshape(out, flat.shape)
        mu = _take(o, slice(0, half))
        lv = _take(o, slice(half, None))
        return kl_loss(mu, lv)
    raise ValueError(f"unknown loss {loss!r}")


def _take(x, cols):
    def backward(g):
        full = np.zeros_like(x.data)
        full[:, cols] = g
        return [full]
    return Tensor(x.data[:, cols], _parents=(x,), _backward=backward, name="take")


def grad_check(network, x, loss="mse", seed=0, h=1e-4, target=None):
    """Max relative error between analytic and central-difference gradients.

    ``network`` is a list of :class:`LayerSpec`; layers are initialised from
    ``seed``. Every parameter element and every input element is perturbed.
    Relative error uses the denominator ``max(|a|, |n|, 1e-8)``.
    """
    rng = np.random.default_rng(seed)
    net = Sequential(build_layer(s, rng) for s in network)
    x = np.asarray(x, dtype=np.float64)
    if loss == "mse" and target is None:
        probe = net(Tensor(x), train=True)
        target = rng.normal(size=probe.shape)
        # forward above touched running stats; they do not affect train mode

    def f():
        return _loss_value(net(Tensor(xin), train=True), loss, target).item()

    xin = x.copy()
    inp = Tensor(xin, requires_grad=True, name="input")
    for p in net.parameters():
        p.zero_grad()
    out = _loss_value(net(inp, train=True), loss, target)
    out.backward()
    pairs = [(xin, inp.grad if inp.grad is not None else np.zeros_like(xin))]
    pairs += [(p.data, p.grad) for p in net.parameters()]

    worst = 0.0
    for arr, analytic in pairs:
        flat = arr.reshape(-1)
        agrad = analytic.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            a = agrad[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
