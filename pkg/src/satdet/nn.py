"""Minimal dense-tensor neural network core.

Layers keep NCHW layout and double precision on training paths. Each layer
caches what its backward pass needs during forward(train=True); backward
consumes that cache exactly once. Heavy lifting is delegated to BLAS matmuls
through im2col; depthwise convolutions use per-offset accumulation instead.
"""

import struct

import numpy as np

from .errors import DataError, ShapeError


def _pair(v):
    return (v, v) if np.isscalar(v) else (int(v[0]), int(v[1]))


def conv_output_geometry(in_h, in_w, kh, kw, sh, sw, padding):
    """Output dims and (top, bottom, left, right) padding for a convolution.

    "valid" uses the floor formula; "same" pads to ceil(in/stride) outputs
    with the excess split low-side-first.
    """
    if padding == "valid":
        out_h = (in_h - kh) // sh + 1
        out_w = (in_w - kw) // sw + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"kernel ({kh}x{kw}) larger than input ({in_h}x{in_w}) with valid padding")
        return out_h, out_w, (0, 0, 0, 0)
    if padding == "same":
        out_h = -(-in_h // sh)
        out_w = -(-in_w // sw)
        pad_h = max((out_h - 1) * sh + kh - in_h, 0)
        pad_w = max((out_w - 1) * sw + kw - in_w, 0)
        return out_h, out_w, (pad_h // 2, pad_h - pad_h // 2, pad_w // 2, pad_w - pad_w // 2)
    raise ShapeError(f"unknown padding mode: {padding!r}")


def _pad_input(x, pads):
    pt, pb, pl, pr = pads
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def _im2col(xp, kh, kw, sh, sw, out_h, out_w):
    """Padded (N, C, Hp, Wp) -> patch matrix (N, C*kh*kw, out_h*out_w)."""
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, out_h, out_w), (s0, s1, s2, s3, s2 * sh, s3 * sw)
    )
    return view.reshape(n, c * kh * kw, out_h * out_w)


def _col2im(dcols, x_shape, pads, kh, kw, sh, sw, out_h, out_w):
    """Scatter-add patch gradients back to the (unpadded) input gradient."""
    n, c, h, w = x_shape
    pt, pb, pl, pr = pads
    dxp = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, kh, kw, out_h, out_w)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + out_h * sh : sh, j : j + out_w * sw : sw] += d6[:, :, i, j]
    return dxp[:, :, pt : pt + h, pl : pl + w]


class Param:
    """A learnable array plus its accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


class Layer:
    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def params(self):
        return []

    def _take_cache(self):
        if getattr(self, "_cache", None) is None:
            raise ShapeError(f"{type(self).__name__}: backward called without a cached forward")
        cache, self._cache = self._cache, None
        return cache


class Conv2D(Layer):
    """Cross-correlation with optional bias. weight is (Cout, Cin, kh, kw)."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1,
                 padding="same", bias=True, rng=None, name="conv"):
        kh, kw = _pair(kernel_size)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        self.stride = _pair(stride)
        self.padding = padding
        self.name = name
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kh * kw
        self.weight = Param(f"{name}.weight",
                            rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kh, kw)))
        self.bias = Param(f"{name}.bias", np.zeros(out_channels)) if bias else None
        self._cache = None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"{self.name}: input shape {x.shape} does not match weight shape "
                f"{self.weight.value.shape}"
            )
        n, _, h, w = x.shape
        kh, kw = self.kernel
        sh, sw = self.stride
        out_h, out_w, pads = conv_output_geometry(h, w, kh, kw, sh, sw, self.padding)
        co = self.out_channels
        if kh == kw == 1 and (sh, sw) == (1, 1):
            w2 = self.weight.value.reshape(co, self.in_channels)
            out = (w2 @ x.reshape(n, self.in_channels, h * w)).reshape(n, co, h, w)
            cols = None
        else:
            xp = _pad_input(x, pads)
            cols = _im2col(xp, kh, kw, sh, sw, out_h, out_w)
            w2 = self.weight.value.reshape(co, -1)
            out = (w2 @ cols).reshape(n, co, out_h, out_w)
        if self.bias is not None:
            out += self.bias.value[None, :, None, None]
        if train:
            self._cache = (x, cols, pads, out_h, out_w)
        return out

    def backward(self, grad):
        x, cols, pads, out_h, out_w = self._take_cache()
        n = x.shape[0]
        co = self.out_channels
        if grad.shape != (n, co, out_h, out_w):
            raise ShapeError(f"{self.name}: upstream grad {grad.shape} != output "
                             f"{(n, co, out_h, out_w)}")
        g2 = grad.reshape(n, co, out_h * out_w)
        if self.bias is not None:
            self.bias.grad += grad.sum(axis=(0, 2, 3))
        w2 = self.weight.value.reshape(co, -1)
        if cols is None:  # 1x1 stride-1 fast path
            x2 = x.reshape(n, self.in_channels, -1)
            self.weight.grad += np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(
                self.weight.value.shape)
            return np.matmul(w2.T, g2).reshape(x.shape)
        self.weight.grad += np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(
            self.weight.value.shape)
        dcols = np.matmul(w2.T, g2)
        kh, kw = self.kernel
        sh, sw = self.stride
        return _col2im(dcols, x.shape, pads, kh, kw, sh, sw, out_h, out_w)


class DepthwiseConv2D(Layer):
    """One k x k filter per channel; channel count is preserved."""

    def __init__(self, channels, kernel_size, stride=1, padding="same",
                 rng=None, name="dwconv"):
        kh, kw = _pair(kernel_size)
        self.channels = channels
        self.kernel = (kh, kw)
        self.stride = _pair(stride)
        self.padding = padding
        self.name = name
        rng = rng or np.random.default_rng(0)
        self.weight = Param(f"{name}.weight",
                            rng.normal(0.0, np.sqrt(2.0 / (kh * kw)), (channels, kh, kw)))
        self._cache = None

    def params(self):
        return [self.weight]

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: input shape {x.shape} does not match "
                             f"per-channel weights {self.weight.value.shape}")
        n, c, h, w = x.shape
        kh, kw = self.kernel
        sh, sw = self.stride
        out_h, out_w, pads = conv_output_geometry(h, w, kh, kw, sh, sw, self.padding)
        xp = _pad_input(x, pads)
        out = np.zeros((n, c, out_h, out_w), dtype=x.dtype)
        wv = self.weight.value
        for i in range(kh):
            for j in range(kw):
                out += wv[None, :, i, j, None, None] * xp[
                    :, :, i : i + out_h * sh : sh, j : j + out_w * sw : sw]
        if train:
            self._cache = (x.shape, xp, pads, out_h, out_w)
        return out

    def backward(self, grad):
        x_shape, xp, pads, out_h, out_w = self._take_cache()
        kh, kw = self.kernel
        sh, sw = self.stride
        wv = self.weight.value
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + out_h * sh : sh, j : j + out_w * sw : sw]
                self.weight.grad[:, i, j] += (grad * patch).sum(axis=(0, 2, 3))
                dxp[:, :, i : i + out_h * sh : sh, j : j + out_w * sw : sw] += (
                    wv[None, :, i, j, None, None] * grad)
        pt, pb, pl, pr = pads
        return dxp[:, :, pt : pt + x_shape[2], pl : pl + x_shape[3]]


class ChannelAffine(Layer):
    """Per-channel scale and shift (an inference-folded normalization layer)."""

    def __init__(self, channels, name="affine"):
        self.channels = channels
        self.name = name
        self.scale = Param(f"{name}.scale", np.ones(channels))
        self.shift = Param(f"{name}.shift", np.zeros(channels))
        self._cache = None

    def params(self):
        return [self.scale, self.shift]

    def forward(self, x, train=False):
        if x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: {x.shape} has {x.shape[1]} channels, expected {self.channels}")
        if train:
            self._cache = x
        return x * self.scale.value[None, :, None, None] + self.shift.value[None, :, None, None]

    def backward(self, grad):
        x = self._take_cache()
        self.scale.grad += (grad * x).sum(axis=(0, 2, 3))
        self.shift.grad += grad.sum(axis=(0, 2, 3))
        return grad * self.scale.value[None, :, None, None]


class ReLU6(Layer):
    """Elementwise min(max(x, 0), 6)."""

    def __init__(self, name="relu6"):
        self.name = name
        self._cache = None

    def forward(self, x, train=False):
        if train:
            self._cache = x
        return np.clip(x, 0.0, 6.0)

    def backward(self, grad):
        x = self._take_cache()
        return grad * ((x > 0.0) & (x < 6.0))


class InvertedResidual(Layer):
    """MobileNetV2-style bottleneck: 1x1 expand, 3x3 depthwise, 1x1 linear project.

    A skip connection is added iff stride is 1 and channel count is unchanged.
    """

    def __init__(self, in_channels, out_channels, expansion, stride, rng=None, name="block"):
        if expansion < 1:
            raise ShapeError(f"{name}: expansion factor must be >= 1, got {expansion}")
        if stride not in (1, 2):
            raise ShapeError(f"{name}: stride must be 1 or 2, got {stride}")
        mid = in_channels * expansion
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.use_skip = stride == 1 and in_channels == out_channels
        self.name = name
        layers = []
        if expansion > 1:
            layers += [
                Conv2D(in_channels, mid, 1, bias=False, rng=rng, name=f"{name}.expand"),
                ChannelAffine(mid, name=f"{name}.expand_aff"),
                ReLU6(name=f"{name}.expand_relu"),
            ]
        layers += [
            DepthwiseConv2D(mid, 3, stride=stride, padding="same", rng=rng, name=f"{name}.dw"),
            ChannelAffine(mid, name=f"{name}.dw_aff"),
            ReLU6(name=f"{name}.dw_relu"),
            Conv2D(mid, out_channels, 1, bias=False, rng=rng, name=f"{name}.project"),
            ChannelAffine(out_channels, name=f"{name}.project_aff"),
        ]
        self.body = Sequential(layers, name=f"{name}.body")

    def params(self):
        return self.body.params()

    def forward(self, x, train=False):
        out = self.body.forward(x, train=train)
        if self.use_skip:
            out = out + x
        return out

    def backward(self, grad):
        dx = self.body.backward(grad)
        if self.use_skip:
            dx = dx + grad
        return dx


class Sequential(Layer):
    def __init__(self, layers, name="seq"):
        self.layers = list(layers)
        self.name = name

    def params(self):
        out = []
        for l in self.layers:
            out.extend(l.params())
        return out

    def forward(self, x, train=False):
        for l in self.layers:
            x = l.forward(x, train=train)
        return x

    def backward(self, grad):
        for l in reversed(self.layers):
            grad = l.backward(grad)
        return grad


# ---------------------------------------------------------------------------
# optimization

def adam_step(value, grad, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update on a single tensor; state dict {m, v, t} is mutated."""
    if value.shape != grad.shape:
        raise ShapeError(f"param shape {value.shape} != grad shape {grad.shape}")
    if not state:
        state["m"] = np.zeros_like(value)
        state["v"] = np.zeros_like(value)
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    state["m"] = beta1 * state["m"] + (1.0 - beta1) * grad
    state["v"] = beta2 * state["v"] + (1.0 - beta2) * grad * grad
    m_hat = state["m"] / (1.0 - beta1 ** t)
    v_hat = state["v"] / (1.0 - beta2 ** t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a parameter list (defaults lr=1e-3, betas 0.9/0.999, eps 1e-8)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.param_list = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.param_list]
        self._v = [np.zeros_like(p.value) for p in self.param_list]

    def zero_grad(self):
        for p in self.param_list:
            p.grad[...] = 0.0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.param_list, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# binary tensor container

_MAGIC = b"SDTN"
_VERSION = 1
_DTYPE_TO_CODE = {"<f8": 0, "<f4": 1, "|i1": 2, "<i4": 3}
_CODE_TO_DTYPE = {v: k for k, v in _DTYPE_TO_CODE.items()}


def save_tensors(path, tensors) -> None:
    """Write named arrays to a single binary file; round trip is bit-exact.

    Layout: magic, version (u32), tensor count (u32), then per tensor a
    length-prefixed utf-8 name, dtype code (u8), ndim (u8), dims (u32 each),
    and the little-endian payload.
    """
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(items)))
        for name, arr in items:
            arr = np.asarray(arr)
            key = arr.dtype.newbyteorder("<").str if arr.dtype.itemsize > 1 else arr.dtype.str
            if key not in _DTYPE_TO_CODE:
                raise DataError(f"tensor {name}: unsupported dtype {arr.dtype}")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_TO_CODE[key], arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(arr, dtype=key).tobytes())


def load_tensors(path):
    """Read a tensor container written by save_tensors; returns an ordered dict."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise DataError(f"{path}: not a tensor container (magic {data[:4]!r})")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        if code not in _CODE_TO_DTYPE:
            raise DataError(f"{path}: tensor {name}: unknown dtype code {code}")
        shape = struct.unpack_from(f"<{ndim}I", data, pos) if ndim else ()
        pos += 4 * ndim
        dt = np.dtype(_CODE_TO_DTYPE[code])
        n_items = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(data, dtype=dt, count=n_items, offset=pos).reshape(shape)
        pos += n_items * dt.itemsize
        out[name] = arr.copy()
    return out
