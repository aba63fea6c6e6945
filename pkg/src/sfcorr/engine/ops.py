"""Differentiable ops used by the encoders and losses.

Only what the pipeline needs: elementwise arithmetic with broadcasting,
reductions, reshapes, conv2d, batch norm, ReLU, L2 normalization, pairwise
cosine similarity and global average pooling. ``REGISTRY`` maps op names to
their :class:`Function` classes for the gradient checker.
"""

from __future__ import annotations

import numpy as np

from .. import kernels
from ..errors import ConfigError, ShapeError
from .tensor import Context, Function, Tensor, as_tensor

NORM_EPS = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class DegenerateBatchError(ConfigError):
    pass


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise / structural
# --------------------------------------------------------------------------

class Add(Function):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(sa=a.shape, sb=b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        return unbroadcast(g, ctx.sa), unbroadcast(g, ctx.sb)


class Sub(Function):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(sa=a.shape, sb=b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        return unbroadcast(g, ctx.sa), unbroadcast(-g, ctx.sb)


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a=a, b=b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        return unbroadcast(g * ctx.b, ctx.a.shape), unbroadcast(g * ctx.a, ctx.b.shape)


class Div(Function):
    name = "div"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a=a, b=b)
        return a / b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        return unbroadcast(g / b, a.shape), unbroadcast(-g * a / (b * b), b.shape)


class Neg(Function):
    name = "neg"

    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return (-g,)


class MatMul(Function):
    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
        ctx.save(a=a, b=b)
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


class Sum(Function):
    name = "sum"

    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.save(shape=a.shape, axis=axis, keepdims=keepdims)
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is not None and not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g, ctx.shape).copy(),)


class Reshape(Function):
    name = "reshape"

    @staticmethod
    def forward(ctx, a, shape):
        ctx.save(shape=a.shape)
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.shape),)


class Transpose(Function):
    name = "transpose"

    @staticmethod
    def forward(ctx, a, axes=None):
        axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
        ctx.save(axes=axes)
        return np.ascontiguousarray(a.transpose(axes))

    @staticmethod
    def backward(ctx, g):
        return (g.transpose(np.argsort(ctx.axes)),)


class Exp(Function):
    name = "exp"

    @staticmethod
    def forward(ctx, a):
        out = np.exp(a)
        ctx.save(out=out)
        return out

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.out,)


class Log(Function):
    name = "log"

    @staticmethod
    def forward(ctx, a):
        ctx.save(a=a)
        # non-positive inputs are reported by the finiteness check, not as a warning
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a)

    @staticmethod
    def backward(ctx, g):
        return (g / ctx.a,)


class LogSumExp(Function):
    name = "logsumexp"

    @staticmethod
    def forward(ctx, a, axis=-1):
        m = a.max(axis=axis, keepdims=True)
        e = np.exp(a - m)
        s = e.sum(axis=axis, keepdims=True)
        ctx.save(soft=e / s, axis=axis)
        return np.squeeze(m + np.log(s), axis=axis)

    @staticmethod
    def backward(ctx, g):
        return (np.expand_dims(g, ctx.axis) * ctx.soft,)


class Concat(Function):
    name = "concat"

    @staticmethod
    def forward(ctx, *arrays, axis=0):
        sizes = [a.shape[axis] for a in arrays]
        ctx.save(splits=np.cumsum(sizes)[:-1], axis=axis)
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        return tuple(np.split(g, ctx.splits, axis=ctx.axis))


# --------------------------------------------------------------------------
# network ops
# --------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


class Conv2d(Function):
    name = "conv2d"

    @staticmethod
    def forward(ctx, x, w, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
        n, c, h, wd = x.shape
        o, ck, kh, kw = w.shape
        if ck != c:
            raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ck}")
        if stride < 1:
            raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
        if kh > h + 2 * padding or kw > wd + 2 * padding:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
        ho = conv_output_size(h, kh, stride, padding)
        wo = conv_output_size(wd, kw, stride, padding)
        if kh == 1 and kw == 1 and padding == 0:
            xs = x[:, :, ::stride, ::stride]
            out = np.einsum("nchw,oc->nohw", xs, w[:, :, 0, 0], optimize=True)
            ctx.save(x=xs, w=w, pointwise=True, xshape=x.shape, stride=stride)
            return np.ascontiguousarray(out)
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        win = win[:, :, :ho, :wo]
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,O
        ctx.save(win=win, w=w, pointwise=False, pshape=xp.shape, padding=padding, stride=stride)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    @staticmethod
    def backward(ctx, g):
        w = ctx.w
        if ctx.pointwise:
            xs = ctx.x
            gw = np.einsum("nohw,nchw->oc", g, xs, optimize=True)[:, :, None, None]
            gxs = np.einsum("nohw,oc->nchw", g, w[:, :, 0, 0], optimize=True)
            if ctx.stride == 1:
                return gxs, gw
            gx = np.zeros(ctx.xshape, dtype=g.dtype)
            gx[:, :, ::ctx.stride, ::ctx.stride] = gxs
            return gx, gw
        gw = np.tensordot(g, ctx.win, axes=([0, 2, 3], [0, 2, 3]))  # O,C,kh,kw
        dcols = np.tensordot(g, w, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
        gxp = kernels.col2im(dcols, ctx.pshape, ctx.stride)
        p = ctx.padding
        gx = gxp[:, :, p:gxp.shape[2] - p, p:gxp.shape[3] - p] if p else gxp
        return np.ascontiguousarray(gx), gw


class BatchNorm(Function):
    """Per-channel normalization over every axis except axis 1.

    In train mode the running statistics arrays passed in are updated in place
    with the biased batch variance.
    """

    name = "batch_norm"

    @staticmethod
    def forward(ctx, x, gamma, beta, training=True, running_mean=None, running_var=None,
                momentum=BN_MOMENTUM, eps=BN_EPS):
        axes = (0,) + tuple(range(2, x.ndim))
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        count = x.size // x.shape[1]
        if training:
            if count < 2:
                raise DegenerateBatchError(f"batch_norm in train mode needs N*H*W >= 2, got {count}")
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            if running_mean is not None:
                running_mean *= momentum
                running_mean += (1 - momentum) * mu
                running_var *= momentum
                running_var += (1 - momentum) * var
        else:
            mu, var = running_mean, running_var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu.reshape(bshape)) * inv_std.reshape(bshape)
        ctx.save(xhat=xhat, gamma=gamma, inv_std=inv_std, training=training, axes=axes, bshape=bshape,
                 count=count)
        return xhat * gamma.reshape(bshape) + beta.reshape(bshape)

    @staticmethod
    def backward(ctx, g):
        axes, bshape, xhat = ctx.axes, ctx.bshape, ctx.xhat
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        dxhat = g * ctx.gamma.reshape(bshape)
        inv_std = ctx.inv_std.reshape(bshape)
        if not ctx.training:
            return dxhat * inv_std, ggamma, gbeta
        n = ctx.count
        gx = inv_std / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, ggamma, gbeta


class ReLU(Function):
    name = "relu"

    @staticmethod
    def forward(ctx, x):
        mask = x > 0
        ctx.save(mask=mask)
        return x * mask

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.mask,)


class L2Normalize(Function):
    name = "l2_normalize"

    @staticmethod
    def forward(ctx, x, axis=-1, eps=NORM_EPS):
        norm = np.sqrt((x * x).sum(axis=axis, keepdims=True) + eps)
        y = x / norm
        ctx.save(y=y, norm=norm, axis=axis)
        return y

    @staticmethod
    def backward(ctx, g):
        y = ctx.y
        return ((g - y * (g * y).sum(axis=ctx.axis, keepdims=True)) / ctx.norm,)


class PairwiseCosine(Function):
    """S[..., i, j] = cos(a_i, b_j) for A [..., M, D] and B [..., K, D]."""

    name = "pairwise_cosine"

    @staticmethod
    def forward(ctx, a, b, eps=NORM_EPS):
        if a.shape[-1] != b.shape[-1]:
            raise ShapeError(f"pairwise_cosine: feature dims differ, {a.shape} vs {b.shape}")
        na = np.sqrt((a * a).sum(axis=-1, keepdims=True) + eps)
        nb = np.sqrt((b * b).sum(axis=-1, keepdims=True) + eps)
        an, bn = a / na, b / nb
        ctx.save(an=an, bn=bn, na=na, nb=nb)
        return an @ np.swapaxes(bn, -1, -2)

    @staticmethod
    def backward(ctx, g):
        an, bn = ctx.an, ctx.bn
        gan = g @ bn
        gbn = np.swapaxes(g, -1, -2) @ an
        ga = (gan - an * (gan * an).sum(axis=-1, keepdims=True)) / ctx.na
        gb = (gbn - bn * (gbn * bn).sum(axis=-1, keepdims=True)) / ctx.nb
        return ga, gb


class GlobalAvgPool(Function):
    name = "global_avg_pool"

    @staticmethod
    def forward(ctx, x):
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
        ctx.save(shape=x.shape)
        return x.mean(axis=(2, 3))

    @staticmethod
    def backward(ctx, g):
        n, c, h, w = ctx.shape
        return (np.broadcast_to(g[:, :, None, None] / (h * w), ctx.shape).copy(),)


REGISTRY: dict[str, type[Function]] = {
    f.name: f for f in (Add, Sub, Mul, Div, Neg, MatMul, Sum, Reshape, Transpose, Exp, Log, LogSumExp,
                        Concat, Conv2d, BatchNorm, ReLU, L2Normalize, PairwiseCosine, GlobalAvgPool)
}


# --------------------------------------------------------------------------
# functional front-end
# --------------------------------------------------------------------------

def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b):
    return Add.apply(*_pair(a, b))


def sub(a, b):
    return Sub.apply(*_pair(a, b))


def mul(a, b):
    return Mul.apply(*_pair(a, b))


def div(a, b):
    return Div.apply(*_pair(a, b))


def neg(a):
    return Neg.apply(a)


def matmul(a, b):
    return MatMul.apply(*_pair(a, b))


def sum(a, axis=None, keepdims=False):
    if isinstance(axis, list):
        axis = tuple(axis)
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape):
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes=None):
    return Transpose.apply(a, axes=axes)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def logsumexp(a, axis=-1):
    return LogSumExp.apply(a, axis=axis)


def concat(tensors, axis=0):
    tensors = list(tensors)
    return Concat.apply(*tensors, axis=axis)


def conv2d(x, w, stride=1, padding=0):
    return Conv2d.apply(x, w, stride=stride, padding=padding)


def batch_norm(x, gamma, beta, training=True, running_mean=None, running_var=None,
               momentum=BN_MOMENTUM, eps=BN_EPS):
    if not training and (running_mean is None or running_var is None):
        raise ConfigError("batch_norm in eval mode needs running statistics")
    return BatchNorm.apply(x, gamma, beta, training=training, running_mean=running_mean,
                           running_var=running_var, momentum=momentum, eps=eps)


def relu(x):
    return ReLU.apply(x)


def l2_normalize(x, axis=-1):
    return L2Normalize.apply(x, axis=axis)


def pairwise_cosine(a, b):
    return PairwiseCosine.apply(a, b)


def global_avg_pool(x):
    return GlobalAvgPool.apply(x)
