"""Forward + adjoint kernels for the network and loss operations.

conv2d runs as im2col + matmul; the forward column buffer stays alive
in the backward closure because the weight gradient needs it anyway and
rebuilding it costs more than the memory it holds. All kernels are
plain numpy and preserve the input dtype, so the same code path serves
float32 training and float64 gradient checking.
"""

import numpy as np

from .tensor import Tensor, is_grad_enabled


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _im2col(xp, kh, kw, sh, sw, oh, ow):
    """[N,C,Hp,Wp] -> [N, C*kh*kw, oh*ow] column buffer."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(gcols, shape, kh, kw, sh, sw, oh, ow):
    """Adjoint of _im2col: scatter-add columns back onto the padded grid."""
    n, c = shape[:2]
    gx = np.zeros(shape, dtype=gcols.dtype)
    g6 = gcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += g6[:, :, i, j]
    return gx


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Cross-correlation of [N,C,H,W] with [O,C,kh,kw] kernels.

    Output extents follow the floor convention
    (H + 2*pad_h - kh) // stride_h + 1; trailing rows that do not fit a
    full stride are ignored. A kernel larger than the padded input has
    no integral output extent and raises ValueError.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = _as_tensor(bias) if bias is not None else None
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    n, c, h, w = x.shape
    o, ck, kh, kw = weight.shape
    if ck != c:
        raise ValueError(f"kernel expects {ck} channels, input has {c}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ValueError(
            f"non-integral output extent: kernel {kh}x{kw} exceeds "
            f"padded input {h + 2 * ph}x{w + 2 * pw}"
        )
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) \
        if (ph or pw) else x.data
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)
    w2 = weight.data.reshape(o, c * kh * kw)
    out_data = np.matmul(w2, cols)                      # [N, O, oh*ow]
    if bias is not None:
        out_data = out_data + bias.data[None, :, None]
    out_data = out_data.reshape(n, o, oh, ow)

    parents = (x, weight) if bias is None else (x, weight, bias)
    out_req = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(out_data, out_req, parents if out_req else ())
    if not out_req:
        return out
    # the column buffer is kept for the weight gradient; rebuilding it
    # in backward costs more than the memory it holds
    if not weight.requires_grad:
        cols = None

    def backward(g):
        g2 = g.reshape(n, o, oh * ow)
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            weight._accumulate(gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            gxp = _col2im(gcols, xp.shape, kh, kw, sh, sw, oh, ow)
            if ph or pw:
                gxp = gxp[:, :, ph:ph + h, pw:pw + w]
            x._accumulate(gxp)
    out._backward = backward
    return out


def dense(x, weight, bias=None):
    """Affine map on the last axis: x [.., n] @ weight [m, n].T + bias."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = _as_tensor(bias) if bias is not None else None
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"dense shape mismatch: input {x.shape[-1]} vs "
            f"weight {weight.shape}"
        )
    out_data = x.data @ weight.data.T
    if bias is not None:
        out_data = out_data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    out_req = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(out_data, out_req, parents if out_req else ())

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            gflat = g.reshape(-1, g.shape[-1])
            xflat = x.data.reshape(-1, x.data.shape[-1])
            weight._accumulate(gflat.T @ xflat)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
    out._backward = backward if out_req else None
    return out


def leaky_relu(x, slope=0.2):
    x = _as_tensor(x)
    out_req = is_grad_enabled() and x.requires_grad
    factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    out = Tensor(x.data * factor, out_req, (x,) if out_req else ())

    def backward(g):
        x._accumulate(g * factor)
    out._backward = backward if out_req else None
    return out


def batch_norm(x, gamma, beta, running_mean, running_var,
               training, momentum=0.1, eps=1e-5):
    """Per-channel normalization of [N,C] or [N,C,H,W].

    Training mode normalizes with batch statistics (biased variance)
    and updates running_mean/running_var in place; eval mode is a fixed
    affine map from the running statistics. Batch size must be >= 2 in
    training mode.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim == 2:
        axes, shape = (0,), (1, -1)
    elif x.ndim == 4:
        axes, shape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ValueError(f"batch_norm expects 2-D or 4-D input, got {x.ndim}-D")

    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm training mode needs batch size >= 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var

    mu_b = mu.reshape(shape)
    inv_std = (1.0 / np.sqrt(var + eps)).reshape(shape).astype(x.data.dtype)
    xhat = (x.data - mu_b) * inv_std
    out_data = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    parents = (x, gamma, beta)
    out_req = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(out_data, out_req, parents if out_req else ())

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gs = g * gamma.data.reshape(shape)
            if training:
                mean_gs = gs.mean(axis=axes).reshape(shape)
                mean_gs_xhat = (gs * xhat).mean(axis=axes).reshape(shape)
                gx = inv_std * (gs - mean_gs - xhat * mean_gs_xhat)
            else:
                gx = gs * inv_std
            x._accumulate(gx)
    out._backward = backward if out_req else None
    return out


def dropout(x, rate, training, rng=None, granularity="element"):
    """Zero units with probability rate, scale survivors by 1/(1-rate).

    granularity "featuremap" drops whole channels of a [N,C,H,W] input,
    which is the decoder's feature-map dropout.
    """
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return x
    if rng is None:
        rng = np.random.default_rng()
    if granularity == "element":
        keep = rng.random(x.shape) >= rate
    elif granularity == "featuremap":
        if x.ndim != 4:
            raise ValueError("featuremap dropout expects [N,C,H,W]")
        keep = rng.random(x.shape[:2]) >= rate
        keep = keep[:, :, None, None]
    else:
        raise ValueError(f"unknown dropout granularity {granularity!r}")
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.data.dtype)
    mask = keep * scale
    out_req = is_grad_enabled() and x.requires_grad
    out = Tensor(x.data * mask, out_req, (x,) if out_req else ())

    def backward(g):
        x._accumulate(g * mask)
    out._backward = backward if out_req else None
    return out


def upsample_nearest2(x):
    """Duplicate each pixel of [N,C,H,W] into a 2x2 block."""
    x = _as_tensor(x)
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    out_req = is_grad_enabled() and x.requires_grad
    out = Tensor(out_data, out_req, (x,) if out_req else ())

    def backward(g):
        n, c, h2, w2 = g.shape
        g4 = g.reshape(n, c, h2 // 2, 2, w2 // 2, 2)
        x._accumulate(g4.sum(axis=(3, 5)))
    out._backward = backward if out_req else None
    return out


def avg_pool2(x):
    """2x2 mean pooling with stride 2; odd trailing rows/cols dropped."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    if oh < 1 or ow < 1:
        raise ValueError(f"avg_pool2 input {h}x{w} too small")
    trimmed = x.data[:, :, :oh * 2, :ow * 2]
    out_data = trimmed.reshape(n, c, oh, 2, ow, 2).mean(axis=(3, 5))
    out_req = is_grad_enabled() and x.requires_grad
    out = Tensor(out_data, out_req, (x,) if out_req else ())

    def backward(g):
        gx = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        gx[:, :, :oh * 2, :ow * 2] = spread
        x._accumulate(gx)
    out._backward = backward if out_req else None
    return out


def concat(tensors, axis=0):
    """Concatenate along an axis; the adjoint is an exact split."""
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    out_req = is_grad_enabled() and any(t.requires_grad for t in tensors)
    out = Tensor(out_data, out_req, tuple(tensors) if out_req else ())
    extents = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + extents)

    def backward(g):
        index = [slice(None)] * g.ndim
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])
    out._backward = backward if out_req else None
    return out
