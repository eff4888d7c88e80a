"""Layer primitives with hand-written backward passes.

Activations are channels-last, ``(batch, height, width, channels)``.
Each layer declares its parameters through :meth:`Layer.param_specs`;
the owning :class:`~fsddi.nn.network.Network` hands it views into one
flat parameter vector (``P``) and one flat gradient vector (``G``).
"""
import numpy as np

NORM_EPS = 1e-5
BN_MOMENTUM = 0.1


class ParamSpec:
    __slots__ = ("suffix", "shape", "init", "trainable")

    def __init__(self, suffix, shape, init, trainable=True):
        self.suffix = suffix
        self.shape = tuple(int(s) for s in shape)
        self.init = init
        self.trainable = trainable

    @property
    def size(self):
        return int(np.prod(self.shape))


class Layer:
    name = "layer"

    def param_specs(self):
        return []

    def forward(self, P, x, mode, buffers_out):
        raise NotImplementedError

    def backward(self, P, G, cache, dy, need_dx=True):
        raise NotImplementedError


def _kaiming(fan_in):
    return ("kaiming", fan_in)


class Conv3x3(Layer):
    """3x3 convolution, zero padding 1, stride 1 or 2.

    Weights are stored as ``(3, 3, c_in, c_out)``.
    """

    def __init__(self, name, c_in, c_out, stride=1):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.stride = stride

    def param_specs(self):
        return [
            ParamSpec("weight", (3, 3, self.c_in, self.c_out), _kaiming(9 * self.c_in)),
            ParamSpec("bias", (self.c_out,), ("zeros",)),
        ]

    def forward(self, P, x, mode, buffers_out):
        # patch matrix scales with c_in, tap outputs with c_out: use the smaller
        if self.stride == 1 and self.c_in > self.c_out:
            return self._forward_s1(P, x)
        return self._forward_im2col(P, x)

    def backward(self, P, G, cache, dy, need_dx=True):
        if cache[0] == "s1":
            return self._backward_s1(P, G, cache, dy, need_dx)
        return self._backward_im2col(P, G, cache, dy, need_dx)

    # stride 1 with wide input: one GEMM per tap over the padded input,
    # accumulated on the (narrower) output side
    def _forward_s1(self, P, x):
        B, H, W, ci = x.shape
        co = self.c_out
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        xflat = xp.reshape(-1, ci)
        out = np.empty((B, H, W, co))
        out[...] = P["bias"]
        for i in range(3):
            for j in range(3):
                y = (xflat @ P["weight"][i, j]).reshape(B, H + 2, W + 2, co)
                out += y[:, i:i + H, j:j + W]
        return out, ("s1", x)

    def _backward_s1(self, P, G, cache, dy, need_dx):
        _, x = cache
        B, H, W, ci = x.shape
        co = self.c_out
        G["bias"] += dy.reshape(-1, co).sum(axis=0)
        # patches of the (narrow) output gradient serve both products: the
        # transposed convolution for dx and, against the unpadded input,
        # the weight gradient (padding rows would only contribute zeros)
        dyp = np.pad(dy, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = np.empty((B, H, W, 3, 3, co))
        for i in range(3):
            for j in range(3):
                cols[:, :, :, i, j, :] = dyp[:, 2 - i:2 - i + H, 2 - j:2 - j + W, :]
        cols = cols.reshape(-1, 9 * co)
        gw = (x.reshape(-1, ci).T @ cols).reshape(ci, 3, 3, co)
        G["weight"] += gw.transpose(1, 2, 0, 3)
        if not need_dx:
            return None
        wt = P["weight"].transpose(0, 1, 3, 2).reshape(9 * co, ci)
        return (cols @ wt).reshape(B, H, W, ci)

    # general stride through explicit patch extraction
    def _forward_im2col(self, P, x):
        B, H, W, ci = x.shape
        s = self.stride
        if H % s or W % s:
            raise ValueError(f"{self.name}: spatial size {H}x{W} not divisible by stride {s}")
        Ho, Wo = H // s, W // s
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = np.empty((B, Ho, Wo, 3, 3, ci))
        for i in range(3):
            for j in range(3):
                cols[:, :, :, i, j, :] = xp[:, i:i + H:s, j:j + W:s, :]
        cols = cols.reshape(-1, 9 * ci)
        wm = P["weight"].reshape(9 * ci, self.c_out)
        out = (cols @ wm).reshape(B, Ho, Wo, self.c_out) + P["bias"]
        return out, ("im2col", cols, x.shape)

    def _backward_im2col(self, P, G, cache, dy, need_dx):
        _, cols, xshape = cache
        B, H, W, ci = xshape
        s = self.stride
        co = self.c_out
        dy2 = dy.reshape(-1, co)
        G["weight"] += (cols.T @ dy2).reshape(3, 3, ci, co)
        G["bias"] += dy2.sum(axis=0)
        if not need_dx:
            return None
        dcols = (dy2 @ P["weight"].reshape(9 * ci, co).T).reshape(B, H // s, W // s, 3, 3, ci)
        dxp = np.zeros((B, H + 2, W + 2, ci))
        for i in range(3):
            for j in range(3):
                dxp[:, i:i + H:s, j:j + W:s, :] += dcols[:, :, :, i, j, :]
        return dxp[:, 1:-1, 1:-1, :]


class Pointwise(Layer):
    """1x1 convolution; also serves as the dense head on pooled features."""

    def __init__(self, name, c_in, c_out):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out

    def param_specs(self):
        return [
            ParamSpec("weight", (self.c_in, self.c_out), _kaiming(self.c_in)),
            ParamSpec("bias", (self.c_out,), ("zeros",)),
        ]

    def forward(self, P, x, mode, buffers_out):
        return x @ P["weight"] + P["bias"], x

    def backward(self, P, G, cache, dy, need_dx=True):
        x = cache
        ci, co = self.c_in, self.c_out
        G["weight"] += x.reshape(-1, ci).T @ dy.reshape(-1, co)
        G["bias"] += dy.reshape(-1, co).sum(axis=0)
        if not need_dx:
            return None
        return dy @ P["weight"].T


def _channel_mean(a, b, axes):
    """Mean of ``a * b`` over ``axes`` without materializing the product."""
    if axes == (1, 2):
        s = np.einsum("bhwc,bhwc->bc", a, b)[:, None, None, :]
        n = a.shape[1] * a.shape[2]
    else:
        s = np.einsum("bhwc,bhwc->c", a, b)[None, None, None, :]
        n = a.shape[0] * a.shape[1] * a.shape[2]
    return s / n


def _norm_backward(dy, xhat, inv, gamma, axes):
    m1 = dy.mean(axis=axes, keepdims=True) * gamma
    m2 = _channel_mean(dy, xhat, axes) * gamma
    dx = dy * (gamma * inv)
    dx -= m1 * inv
    dx -= xhat * (m2 * inv)
    return dx


class InstanceNorm(Layer):
    """Per-sample, per-channel normalization over the spatial axes."""

    axes = (1, 2)

    def __init__(self, name, channels):
        self.name = name
        self.channels = channels

    def param_specs(self):
        c = self.channels
        return [ParamSpec("weight", (c,), ("ones",)), ParamSpec("bias", (c,), ("zeros",))]

    def normalize(self, x):
        mu = x.mean(axis=self.axes, keepdims=True)
        xc = x - mu
        var = _channel_mean(xc, xc, self.axes)
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        xc *= inv
        return xc, inv, mu, var

    def forward(self, P, x, mode, buffers_out):
        xhat, inv, _, _ = self.normalize(x)
        return xhat * P["weight"] + P["bias"], (xhat, inv)

    def backward(self, P, G, cache, dy, need_dx=True):
        xhat, inv = cache
        G["weight"] += np.einsum("bhwc,bhwc->c", dy, xhat)
        G["bias"] += dy.sum(axis=(0, 1, 2))
        if not need_dx:
            return None
        return _norm_backward(dy, xhat, inv, P["weight"], self.axes)


class BatchNorm(InstanceNorm):
    """Batch normalization with running statistics stored as parameters.

    The running mean and variance live in the flat vector as non-trainable
    entries, so federated averaging treats them like any other weight.
    """

    axes = (0, 1, 2)

    def param_specs(self):
        c = self.channels
        return super().param_specs() + [
            ParamSpec("running_mean", (c,), ("zeros",), trainable=False),
            ParamSpec("running_var", (c,), ("ones",), trainable=False),
        ]

    def forward(self, P, x, mode, buffers_out):
        if mode == "eval":
            inv = 1.0 / np.sqrt(P["running_var"] + NORM_EPS)
            xhat = (x - P["running_mean"]) * inv
            return xhat * P["weight"] + P["bias"], ("eval", xhat, inv)
        xhat, inv, mu, var = self.normalize(x)
        if buffers_out is not None:
            n = x.shape[0] * x.shape[1] * x.shape[2]
            unbiased = var.reshape(-1) * (n / max(n - 1, 1))
            buffers_out[self.name + ".running_mean"] = (
                (1 - BN_MOMENTUM) * P["running_mean"] + BN_MOMENTUM * mu.reshape(-1))
            buffers_out[self.name + ".running_var"] = (
                (1 - BN_MOMENTUM) * P["running_var"] + BN_MOMENTUM * unbiased)
        return xhat * P["weight"] + P["bias"], ("train", xhat, inv)

    def backward(self, P, G, cache, dy, need_dx=True):
        kind, xhat, inv = cache
        G["weight"] += np.einsum("bhwc,bhwc->c", dy, xhat)
        G["bias"] += dy.sum(axis=(0, 1, 2))
        if not need_dx:
            return None
        if kind == "eval":
            return dy * P["weight"] * inv
        return _norm_backward(dy, xhat, inv, P["weight"], self.axes)


class ReLU(Layer):
    def __init__(self, name):
        self.name = name

    def forward(self, P, x, mode, buffers_out):
        mask = x > 0
        return np.maximum(x, 0.0), mask

    def backward(self, P, G, cache, dy, need_dx=True):
        return np.where(cache, dy, 0.0)


class Upsample2(Layer):
    """Nearest-neighbour upsampling by 2 on both spatial axes."""

    def __init__(self, name):
        self.name = name

    def forward(self, P, x, mode, buffers_out):
        return x.repeat(2, axis=1).repeat(2, axis=2), None

    def backward(self, P, G, cache, dy, need_dx=True):
        B, H, W, C = dy.shape
        return dy.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


class MeanPool2(Layer):
    def __init__(self, name):
        self.name = name

    def forward(self, P, x, mode, buffers_out):
        B, H, W, C = x.shape
        return x.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4)), None

    def backward(self, P, G, cache, dy, need_dx=True):
        return 0.25 * dy.repeat(2, axis=1).repeat(2, axis=2)


class GlobalMeanPool(Layer):
    def __init__(self, name):
        self.name = name

    def forward(self, P, x, mode, buffers_out):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, P, G, cache, dy, need_dx=True):
        B, H, W, C = cache
        return np.broadcast_to(dy[:, None, None, :] / (H * W), cache).copy()


class Stash(Layer):
    """Identity that keeps its input for a later :class:`Concat` (skip connection)."""

    def __init__(self, name, key):
        self.name = name
        self.key = key

    def forward(self, P, x, mode, buffers_out):
        return x, None

    def backward(self, P, G, cache, dy, need_dx=True):
        return dy


class Concat(Layer):
    """Append the stashed tensor ``key`` along channels; the network routes it."""

    def __init__(self, name, key):
        self.name = name
        self.key = key

    def forward(self, P, x, mode, buffers_out, skip=None):
        return np.concatenate([x, skip], axis=-1), x.shape[-1]

    def backward(self, P, G, cache, dy, need_dx=True):
        c = cache
        return dy[..., :c], dy[..., c:]
