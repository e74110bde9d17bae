"""Differentiable operations needed by the INC network and the attacks.

Every function takes and returns :class:`~robusteeg.tensor.Tensor` values and
records a backward rule on the active tape. Arrays are NCHW.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, record


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def _same_pads(size: int, k: int, s: int) -> tuple[int, int]:
    # zero-based output count ceil(size/s); surplus padding goes on the high side
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    lo = total // 2
    return lo, total - lo


def _pads(h: int, w: int, kernel, stride, padding: str) -> tuple[tuple[int, int], tuple[int, int]]:
    if padding == "valid":
        return (0, 0), (0, 0)
    if padding == "same":
        return _same_pads(h, kernel[0], stride[0]), _same_pads(w, kernel[1], stride[1])
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _out_size(padded: int, k: int, s: int) -> int:
    return (padded - k) // s + 1


def _scatter_windows(dxp: np.ndarray, dwin: np.ndarray, stride, out_hw) -> None:
    """Add window-shaped gradients (B,C,Ho,Wo,kh,kw) back onto the padded input."""
    sh, sw = stride
    ho, wo = out_hw
    kh, kw = dwin.shape[-2:]
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += dwin[..., i, j]


def _zero_pad(a: np.ndarray, pt: int, pb: int, pl: int, pr: int) -> np.ndarray:
    if not (pt or pb or pl or pr):
        return a
    return np.pad(a, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride) -> np.ndarray:
    """(B, C, H, W) -> (B*Ho*Wo, kh*kw*C) patch matrix, columns ordered (i, j, c)."""
    b, c = xp.shape[:2]
    xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    win = sliding_window_view(xt, (kh, kw), axis=(1, 2))[:, ::stride[0], ::stride[1]]
    ho, wo = win.shape[1:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * c)


def _kernel_matrix(weight: np.ndarray) -> np.ndarray:
    """(Cout, Cin, kh, kw) -> (Cout, kh*kw*Cin), matching _im2col columns."""
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def conv2d(x, weight, bias, padding: str = "same", stride=1) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    ``weight`` is (Cout, Cin, kh, kw). "same" keeps H, W at stride 1 and puts
    the extra pad row/column on the high side for even kernels.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {cout} filters")
    stride = _pair(stride)
    (pt, pb), (pl, pr) = _pads(h, w, (kh, kw), stride, padding)
    if h + pt + pb < kh or w + pl + pr < kw:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {h + pt + pb}x{w + pl + pr}")

    xp = _zero_pad(x.data, pt, pb, pl, pr)
    ho = _out_size(xp.shape[2], kh, stride[0])
    wo = _out_size(xp.shape[3], kw, stride[1])
    cols = _im2col(xp, kh, kw, stride)
    wmat = _kernel_matrix(weight.data)
    out = (cols @ wmat.T + bias.data).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    result = Tensor(np.ascontiguousarray(out))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dx = dw = db = None
        if x.track and stride == (1, 1):
            # stride-1 input gradient: correlate the re-padded output gradient
            # with the flipped, channel-transposed kernel
            gp = _zero_pad(g, kh - 1 - pt, kh - 1 - pb, kw - 1 - pl, kw - 1 - pr)
            wflip = _kernel_matrix(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dx = (_im2col(gp, kh, kw, (1, 1)) @ wflip.T).reshape(b, h, w, cin).transpose(0, 3, 1, 2)
        elif x.track:
            dwin = (g2 @ wmat).reshape(b, ho, wo, kh, kw, cin).transpose(0, 5, 1, 2, 3, 4)
            dxp = np.zeros_like(xp)
            _scatter_windows(dxp, dwin, stride, (ho, wo))
            dx = dxp[:, :, pt:pt + h, pl:pl + w]
        if weight.track:
            dw = np.ascontiguousarray((g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2))
        if bias.track:
            db = g2.sum(axis=0)
        return dx, dw, db

    return record(result, (x, weight, bias), backward)


def _block_maxpool(x: Tensor, kh: int, kw: int) -> Tensor:
    """Non-overlapping pooling whose windows tile the input exactly."""
    b, c, h, w = x.shape
    ho, wo = h // kh, w // kw
    blocks = x.data.reshape(b, c, ho, kh, wo, kw).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, kh * kw)
    arg = blocks.argmax(axis=-1)
    result = Tensor(np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0])

    def backward(g):
        routed = (arg[..., None] == np.arange(kh * kw)) * g[..., None]
        return (routed.reshape(b, c, ho, wo, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)

    return record(result, (x,), backward)


def maxpool2d(x, kernel, stride=None, padding: str = "valid") -> Tensor:
    """Windowed maximum. Ties route the gradient to the lowest flat index."""
    x = as_tensor(x)
    kh, kw = _pair(kernel)
    stride = _pair(stride if stride is not None else kernel)
    b, c, h, w = x.shape
    (pt, pb), (pl, pr) = _pads(h, w, (kh, kw), stride, padding)
    if h + pt + pb < kh or w + pl + pr < kw:
        raise ValueError(f"maxpool2d window {kh}x{kw} larger than input {h}x{w} under {padding!r} padding")

    if padding == "valid" and (kh, kw) == stride and h % kh == 0 and w % kw == 0:
        return _block_maxpool(x, kh, kw)

    xp = x.data
    if pt or pb or pl or pr:
        xp = np.pad(xp, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=-np.inf)
    ho = _out_size(xp.shape[2], kh, stride[0])
    wo = _out_size(xp.shape[3], kw, stride[1])
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride[0], ::stride[1]]
    flat = win.reshape(b, c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    result = Tensor(out)

    def backward(g):
        onehot = (arg[..., None] == np.arange(kh * kw)) * g[..., None]
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        _scatter_windows(dxp, onehot.reshape(b, c, ho, wo, kh, kw), stride, (ho, wo))
        return (dxp[:, :, pt:pt + h, pl:pl + w],)

    return record(result, (x,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    result = Tensor(np.where(mask, x.data, 0).astype(x.dtype))
    return record(result, (x,), lambda g: (g * mask,))


def batchnorm2d(x, scale, shift, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, eps: float = 1e-5, momentum: float = 0.1,
                update_stats: bool = True) -> Tensor:
    """Per-channel normalization over (B, H, W).

    In training mode the biased batch variance is used and, when
    ``update_stats`` is set, the running buffers are updated in place.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    axes = (0, 2, 3)
    sc = scale.data.reshape(1, -1, 1, 1)
    if training:
        n = x.data.size // x.shape[1]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * var
    else:
        n = None
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(1, -1, 1, 1)
    xhat = (x.data - mean.reshape(1, -1, 1, 1).astype(x.dtype)) * inv_std
    result = Tensor(xhat * sc + shift.data.reshape(1, -1, 1, 1))

    def backward(g):
        dscale = (g * xhat).sum(axis=axes) if scale.track else None
        dshift = g.sum(axis=axes) if shift.track else None
        dx = None
        if x.track:
            dxhat = g * sc
            if training:
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                dx = inv_std * (dxhat - s1 / n - xhat * s2 / n)
            else:
                dx = dxhat * inv_std
        return dx, dscale, dshift

    return record(result, (x, scale, shift), backward)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity in eval mode or at rate 0."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    result = Tensor(x.data * mask)
    return record(result, (x,), lambda g: (g * mask,))


def dense(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight laid out (F, O)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"dense bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    result = Tensor(x.data @ weight.data + bias.data)

    def backward(g):
        return (
            g @ weight.data.T if x.track else None,
            x.data.T @ g if weight.track else None,
            g.sum(axis=0) if bias.track else None,
        )

    return record(result, (x, weight, bias), backward)


def concat_channels(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels spatial mismatch: {p.shape} vs {ref}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([p.shape[1] for p in parts])[:-1]
    result = Tensor(np.concatenate([p.data for p in parts], axis=1))
    return record(result, parts, lambda g: np.split(g, bounds, axis=1))


def flatten(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    result = Tensor(x.data.reshape(shape[0], -1))
    return record(result, (x,), lambda g: (g.reshape(shape),))


def reduce_sum(x) -> Tensor:
    x = as_tensor(x)
    result = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    return record(result, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    bsz, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(bsz)
    loss = np.mean(logsum - z[rows, labels])
    result = Tensor(np.asarray(loss, dtype=logits.dtype))

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1
        return (p * (g / bsz),)

    return record(result, (logits,), backward)
