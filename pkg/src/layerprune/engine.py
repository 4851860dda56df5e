"""Dense-tensor storage and the forward/backward kernels everything else calls.

All activations are 4-D ``(batch, channel, height, width)`` float arrays.
Kernels preserve the input dtype, so the same code runs in float32 for
training and float64 for gradient checks. Convolution uses im2col plus one
matrix multiply; the naive looped reference lives with the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, ShapeError

DEFAULT_DTYPE = np.float32


class Tensor:
    """4-D array in (n, c, h, w) order with an optional same-shape grad buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        data = np.asarray(data)
        if data.ndim != 4:
            raise ShapeError(f"tensor must be 4-D (n, c, h, w), got shape {data.shape}")
        if grad is not None:
            grad = np.asarray(grad)
            if grad.shape != data.shape:
                raise ShapeError(f"grad shape {grad.shape} does not match data shape {data.shape}")
        self.data = data
        self.grad = grad

    @property
    def dims(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def check_finite(arr, what: str):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in {what}")


@dataclass
class ConvParams:
    """Weights of one convolution: weight (out, in, kh, kw), optional bias."""

    weight: Tensor
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    bias_grad: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if isinstance(self.weight, np.ndarray):
            self.weight = Tensor(self.weight)
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias)
            if self.bias.shape != (self.out_channels,):
                raise ShapeError(
                    f"bias length {self.bias.shape} does not match {self.out_channels} output channels"
                )
            if self.bias_grad is None:
                self.bias_grad = np.zeros_like(self.bias)

    @property
    def out_channels(self) -> int:
        return self.weight.dims[0]

    @property
    def in_channels(self) -> int:
        return self.weight.dims[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.dims[2], self.weight.dims[3]


@dataclass
class BNParams:
    """Per-channel batch-norm state: scale alpha, shift beta, running moments."""

    alpha: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    alpha_grad: np.ndarray = field(default=None, repr=False)
    beta_grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        vecs = (self.alpha, self.beta, self.running_mean, self.running_var)
        lengths = {np.asarray(v).shape for v in vecs}
        if len(lengths) != 1 or np.asarray(self.alpha).ndim != 1:
            raise ShapeError(f"BN vectors must share one 1-D length, got {[np.asarray(v).shape for v in vecs]}")
        if np.any(np.asarray(self.running_var) < 0):
            raise ShapeError("running_var must be non-negative")
        if self.eps <= 0:
            raise ShapeError(f"eps must be positive, got {self.eps}")
        if self.alpha_grad is None:
            self.alpha_grad = np.zeros_like(self.alpha)
        if self.beta_grad is None:
            self.beta_grad = np.zeros_like(self.beta)

    @property
    def channels(self) -> int:
        return len(self.alpha)

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-5, dtype=DEFAULT_DTYPE) -> "BNParams":
        return cls(
            alpha=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
        )


@dataclass
class FCParams:
    """Fully-connected head: weight (classes, features), bias (classes,)."""

    weight: np.ndarray
    bias: np.ndarray
    weight_grad: np.ndarray = field(default=None, repr=False)
    bias_grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        self.bias = np.asarray(self.bias)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"FC weight must be (classes, features) with matching bias, got {self.weight.shape} / {self.bias.shape}"
            )
        if self.weight_grad is None:
            self.weight_grad = np.zeros_like(self.weight)
        if self.bias_grad is None:
            self.bias_grad = np.zeros_like(self.bias)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def classes(self) -> int:
        return self.weight.shape[0]


# ---------------------------------------------------------------------------
# convolution


def conv_output_hw(h: int, w: int, kernel, stride: int, padding: int) -> tuple[int, int]:
    """Floor-division output size; rejects kernels that overhang the padded input."""
    kh, kw = kernel
    num_h = h + 2 * padding - kh
    num_w = w + 2 * padding - kw
    if num_h < 0 or num_w < 0:
        raise ShapeError(
            f"conv output size is not positive: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    return num_h // stride + 1, num_w // stride + 1


def _im2col(x: np.ndarray, kernel, stride: int, padding: int):
    """Unfold (n, c, h, w) into (n, c*kh*kw, ho*wo) patch columns.

    1x1/stride-1/no-pad convs reshape in place with no copy.
    """
    n, c, h, w = x.shape
    kh, kw = kernel
    ho, wo = conv_output_hw(h, w, kernel, stride, padding)
    if kh == kw == 1 and stride == 1 and padding == 0:
        return x.reshape(n, c, h * w), ho, wo
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(dcols: np.ndarray, x_shape, kernel, stride: int, padding: int) -> np.ndarray:
    """Scatter-add patch columns back to the (n, c, h, w) input layout."""
    n, c, h, w = x_shape
    kh, kw = kernel
    ho, wo = conv_output_hw(h, w, kernel, stride, padding)
    if kh == kw == 1 and stride == 1 and padding == 0:
        return dcols.reshape(n, c, h, w)
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
    if padding:
        dx = dx[:, :, padding : padding + h, padding : padding + w]
    return dx


def conv2d_forward(x, p: ConvParams):
    """Cross-correlate x with p.weight. Returns (output, cache for backward)."""
    x = _arr(x)
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ShapeError(f"conv expects {p.in_channels} input channels, got {c}")
    cols, ho, wo = _im2col(x, p.kernel, p.stride, p.padding)
    w2 = p.weight.data.reshape(p.out_channels, -1)
    out = np.matmul(w2, cols).reshape(n, p.out_channels, ho, wo)
    if p.bias is not None:
        out += p.bias[None, :, None, None]
    cache = (cols, x.shape)
    return Tensor(out), cache


def conv2d_backward(dout, cache, p: ConvParams) -> Tensor:
    """Accumulate weight/bias grads and return the input gradient."""
    if cache is None:
        raise ShapeError("conv backward called before forward")
    dout = _arr(dout)
    cols, x_shape = cache
    n = x_shape[0]
    dm = dout.reshape(n, p.out_channels, -1)
    wgrad = p.weight.ensure_grad()
    wgrad += np.matmul(dm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(p.weight.dims)
    if p.bias is not None:
        p.bias_grad += dout.sum(axis=(0, 2, 3))
    w2 = p.weight.data.reshape(p.out_channels, -1)
    dcols = np.matmul(w2.T, dm)
    return Tensor(_col2im(dcols, x_shape, p.kernel, p.stride, p.padding))


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm_forward(x, p: BNParams, mode: str = "train", momentum: float = 0.1):
    """y = alpha * (x - mean) / sqrt(var + eps) + beta, per channel.

    Train mode normalizes with biased batch moments and folds them into the
    running statistics with the given momentum; infer mode uses the stored
    running moments. Returns (output, cache).
    """
    x = _arr(x)
    if x.shape[1] != p.channels:
        raise ShapeError(f"BN expects {p.channels} channels, got {x.shape[1]}")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        xhat = x - mean[None, :, None, None]
        var = np.square(xhat).mean(axis=(0, 2, 3))  # biased (1/N), also what running_var stores
        p.running_mean *= 1.0 - momentum
        p.running_mean += momentum * mean
        p.running_var *= 1.0 - momentum
        p.running_var += momentum * var
    elif mode == "infer":
        mean = p.running_mean
        var = p.running_var
        xhat = x - mean[None, :, None, None]
    else:
        raise ValueError(f"unknown BN mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + np.asarray(p.eps, dtype=x.dtype))
    xhat *= inv_std[None, :, None, None]
    out = xhat * p.alpha[None, :, None, None]
    out += p.beta[None, :, None, None]
    cache = (xhat, inv_std, mode)
    return Tensor(out), cache


def batchnorm_backward(dout, cache, p: BNParams) -> Tensor:
    if cache is None:
        raise ShapeError("BN backward called before forward")
    dout = _arr(dout)
    xhat, inv_std, mode = cache
    s_beta = dout.sum(axis=(0, 2, 3))
    s_alpha = (dout * xhat).sum(axis=(0, 2, 3))
    p.alpha_grad += s_alpha
    p.beta_grad += s_beta
    coef = (p.alpha * inv_std)[None, :, None, None]
    if mode == "infer":
        return Tensor(dout * coef)
    # dxhat = dout*alpha per channel, so its moments are alpha-scaled dout moments
    n, _, h, w = dout.shape
    m = n * h * w
    dx = xhat * (-s_alpha / m)[None, :, None, None]
    dx += dout
    dx -= (s_beta / m)[None, :, None, None]
    dx *= coef
    return Tensor(dx)


# ---------------------------------------------------------------------------
# elementwise / head


def relu_forward(x):
    x = _arr(x)
    return Tensor(np.maximum(x, np.asarray(0, dtype=x.dtype))), x > 0


def relu_backward(dout, mask) -> Tensor:
    if mask is None:
        raise ShapeError("ReLU backward called before forward")
    return Tensor(_arr(dout) * mask)


def global_avg_pool_forward(x):
    x = _arr(x)
    out = x.mean(axis=(2, 3), keepdims=True)
    return Tensor(out), x.shape[2:]


def global_avg_pool_backward(dout, hw) -> Tensor:
    dout = _arr(dout)
    h, w = hw
    scale = np.asarray(1.0 / (h * w), dtype=dout.dtype)
    return Tensor(np.broadcast_to(dout * scale, dout.shape[:2] + (h, w)).copy())


def fc_forward(x, p: FCParams):
    """Flatten (n, c, 1, 1) features and apply the linear head."""
    x = _arr(x)
    shape4 = x.shape if x.ndim == 4 else None
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != p.in_features:
        raise ShapeError(f"FC expects {p.in_features} features, got {flat.shape[1]}")
    logits = flat @ p.weight.T + p.bias
    return logits, (flat, shape4)


def fc_backward(dlogits, cache, p: FCParams):
    if cache is None:
        raise ShapeError("FC backward called before forward")
    flat, shape4 = cache
    dlogits = np.asarray(dlogits)
    p.weight_grad += dlogits.T @ flat
    p.bias_grad += dlogits.sum(axis=0)
    dflat = dlogits @ p.weight
    return Tensor(dflat.reshape(shape4)) if shape4 is not None else dflat


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and top-1 accuracy. Returns (loss, top1, dlogits)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"label outside [0, {k}): {labels.min()}..{labels.max()}")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = float(-logp[np.arange(n), labels].mean())
    top1 = float((logits.argmax(axis=1) == labels).mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, top1, dlogits.astype(logits.dtype)


def head_forward(x, fc: FCParams, labels):
    """Global average pool + FC + softmax cross-entropy. Returns (loss, top1, cache)."""
    pooled, hw = global_avg_pool_forward(x)
    logits, fc_cache = fc_forward(pooled, fc)
    loss, top1, dlogits = softmax_cross_entropy(logits, labels)
    return loss, top1, (dlogits, fc_cache, hw)


def head_backward(cache, fc: FCParams) -> Tensor:
    dlogits, fc_cache, hw = cache
    dpooled = fc_backward(dlogits, fc_cache, fc)
    return global_avg_pool_backward(dpooled, hw)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             name: str = "param"):
    """In-place heavy-ball update: v = momentum*v + grad + wd*param; param -= lr*v.

    Weight decay is the caller's responsibility to disable for BN scale/shift.
    """
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ShapeError(f"sgd_step shape mismatch for {name}: {param.shape}/{grad.shape}/{velocity.shape}")
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * param
    param -= lr * velocity
    if not np.all(np.isfinite(param)):
        raise NumericsError(f"non-finite values in {name} after sgd step")
