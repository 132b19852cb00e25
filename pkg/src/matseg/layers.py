"""Convolutional building blocks with explicit forward/backward rules.

All feature maps are NCHW. Convolution is cross-correlation (no kernel
flip). The fast path is im2col + matmul; :func:`conv2d_reference` is the
direct sliding-window loop used as an oracle in tests.
"""

from __future__ import annotations

from typing import Iterator, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Variable, flush_subnormals, make_node, note_branch, relu
from .errors import ShapeError


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv: input size {size} with kernel {kernel}, stride {stride}, padding {padding} "
            "does not give an integral output size"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[1]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, C, Ho, Wo, kh, kw) -> (C*kh*kw, N*Ho*Wo)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, -1)


def conv2d(x: Variable, weight: Variable, bias: Optional[Variable] = None, stride: int = 1, padding: int = 0) -> Variable:
    """2-D cross-correlation of ``x`` (N,Cin,H,W) with ``weight`` (Cout,Cin,kh,kw)."""
    if x.value.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input, got shape {x.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xv = x.value
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.value.reshape(cout, -1)
    # pixels-as-rows products are markedly faster in BLAS for the small Cout here
    out = cols.T @ wmat.T
    if bias is not None:
        out += bias.value
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        gmat = flush_subnormals(np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1))
        gw = gx = None
        if weight.requires_grad:
            gw = (cols @ gmat.T).T.reshape(weight.shape)
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(cin, kh, kw, n, ho, wo)
            gxp = np.zeros((cin, n) + xp.shape[2:], dtype=xv.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=1) if bias.requires_grad else None)
        return grads

    return make_node(out, parents, backward_fn, "conv2d")


def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None,
                     stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct nested-loop convolution; slow, used only as a test oracle."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, cout, ho, wo), dtype=np.result_type(x, weight))
    for b in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, co, i, j] = np.sum(patch * weight[co])
            if bias is not None:
                out[b, co] += bias[co]
    return out


def conv2d_input_grad_reference(upstream: np.ndarray, weight: np.ndarray, input_hw: Tuple[int, int],
                                stride: int = 1, padding: int = 0) -> np.ndarray:
    """Brute-force d<conv(x, w), upstream>/dx, scattering each output back over its window."""
    n, _, ho, wo = upstream.shape
    cout, cin, kh, kw = weight.shape
    h, w = input_hw
    gxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=np.result_type(upstream, weight))
    for b in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    gxp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw] += upstream[b, co, i, j] * weight[co]
    return gxp[:, :, padding:padding + h, padding:padding + w]


def maxpool2d(x: Variable) -> Variable:
    """2x2 max pooling with stride 2; ties go to the first element in row-major window order."""
    if x.value.ndim != 4:
        raise ShapeError(f"maxpool2d: expected NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = x.value.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    note_branch(lambda: idx.astype(np.uint8))
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        routed = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(routed, idx[..., None], g[..., None], axis=-1)
        return (routed.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_node(out, (x,), backward_fn, "maxpool2d")


def avgpool(x: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping average pooling of a plain NCHW array."""
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avgpool: {h}x{w} not divisible by {factor}")
    return x.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def conv_transpose2d(x: Variable, weight: Variable, bias: Optional[Variable] = None) -> Variable:
    """Stride-2, kernel-2 transpose convolution; ``weight`` is (Cin, Cout, 2, 2).

    Every input pixel scatters ``value * weight`` into its own 2x2 output
    patch, so the output is exactly twice the input size with no overlaps.
    """
    if x.value.ndim != 4:
        raise ShapeError(f"conv_transpose2d: expected NCHW input, got shape {x.shape}")
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv_transpose2d: input has {cin} channels, weight expects {wcin}")
    if (kh, kw) != (2, 2):
        raise ShapeError("conv_transpose2d: only 2x2 kernels with stride 2 are supported")

    xmat = x.value.transpose(0, 2, 3, 1).reshape(n * h * w, cin)
    wmat = weight.value.reshape(cin, cout * 4)
    out = (xmat @ wmat).reshape(n, h, w, cout, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * w)
    if bias is not None:
        out += bias.value[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        gmat = g.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * w, cout * 4)
        gx = (gmat @ wmat.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xmat.T @ gmat).reshape(weight.shape) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads

    return make_node(out, parents, backward_fn, "conv_transpose2d")


# ---------------------------------------------------------------------------
# parameterised layers
# ---------------------------------------------------------------------------

class Module:
    """Minimal container: parameters are discovered in attribute definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Variable]]:
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(val, Variable) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2D(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, padding: int = 0,
                 stride: int = 1, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Variable(kaiming_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype),
                               requires_grad=True)
        self.bias = Variable(np.zeros(out_channels, dtype=dtype), requires_grad=True)
        self._stride = stride
        self._padding = padding

    @property
    def stride(self) -> int:
        return self._stride

    @property
    def padding(self) -> int:
        return self._padding

    def forward(self, x: Variable) -> Variable:
        return conv2d(x, self.weight, self.bias, stride=self._stride, padding=self._padding)


class MaxPool2D(Module):
    kernel = 2
    stride = 2

    def forward(self, x: Variable) -> Variable:
        return maxpool2d(x)


class TransposeConv2D(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        # each output pixel receives exactly one tap per input channel
        self.weight = Variable(kaiming_uniform(rng, (in_channels, out_channels, 2, 2), in_channels, dtype),
                               requires_grad=True)
        self.bias = Variable(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Variable) -> Variable:
        return conv_transpose2d(x, self.weight, self.bias)


class ConvBlock(Module):
    """Two same-padded 3x3 convolutions, each followed by ReLU."""

    def __init__(self, in_channels: int, out_channels: int, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        self.conv1 = Conv2D(in_channels, out_channels, 3, padding=1, rng=rng, dtype=dtype)
        self.conv2 = Conv2D(out_channels, out_channels, 3, padding=1, rng=rng, dtype=dtype)

    def forward(self, x: Variable) -> Variable:
        return relu(self.conv2(relu(self.conv1(x))))
