"""Minimal layer framework with explicit forward/backward passes.

Arrays are channels-first float64: (batch, channel, z, y, x) for volumes,
(batch, features) after flattening, (batch, seq, channel) for attention.
Each layer caches what its backward pass needs; backward must follow the
matching forward call.
"""

from __future__ import annotations

import numpy as np

from .. import backends
from ..errors import DimensionMismatchError


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_head(Q, K, V, d_k):
    """Scaled dot-product attention for single matrices: softmax(QK^T/sqrt(d_k)) V."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if Q.shape[1] != K.shape[1]:
        raise DimensionMismatchError(
            f"query dim {Q.shape[1]} != key dim {K.shape[1]}"
        )
    if K.shape[0] != V.shape[0]:
        raise DimensionMismatchError(
            f"{K.shape[0]} keys but {V.shape[0]} value rows"
        )
    if d_k < 1:
        raise ValueError("d_k must be positive")
    A = softmax(Q @ K.T / np.sqrt(float(d_k)), axis=-1)
    return A @ V


class Layer:
    """Base: parameterless identity. Subclasses override as needed."""

    name = "layer"

    def param_dict(self):
        return {}

    def grad_dict(self):
        return {}

    def forward(self, x, train=False, rng=None):
        return x

    def backward(self, gy):
        return gy


class Conv3D(Layer):
    """3x3x3 convolution, stride 1, zero-padded to 'same'."""

    def __init__(self, name, c_in, c_out, rng):
        self.name = name
        fan_in = c_in * 27
        self.w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, 3, 3, 3))
        self.b = np.zeros(c_out)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def param_dict(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def grad_dict(self):
        return {f"{self.name}.w": self.gw, f"{self.name}.b": self.gb}

    def forward(self, x, train=False, rng=None):
        self._x = x
        return backends.active().conv3d_forward(x, self.w, self.b)

    def backward(self, gy):
        gx, gw, gb = backends.active().conv3d_backward(self._x, self.w, gy)
        self.gw += gw
        self.gb += gb
        return gx


class ReLU(Layer):
    name = "relu"

    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, gy):
        return np.where(self._mask, gy, 0.0)


class MaxPool3D(Layer):
    """2x2x2 max pool, stride 2; axes of extent 1 are left unpooled and odd
    trailing voxels are dropped."""

    name = "maxpool"

    def forward(self, x, train=False, rng=None):
        n, c, D, H, W = x.shape
        pz = 2 if D >= 2 else 1
        py = 2 if H >= 2 else 1
        px = 2 if W >= 2 else 1
        Do, Ho, Wo = D // pz, H // py, W // px
        xc = x[:, :, : Do * pz, : Ho * py, : Wo * px]
        win = xc.reshape(n, c, Do, pz, Ho, py, Wo, px)
        win = win.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, Do, Ho, Wo, -1)
        self._idx = win.argmax(axis=-1)
        self._in_shape = x.shape
        self._pool = (pz, py, px)
        return np.take_along_axis(win, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, gy):
        n, c, D, H, W = self._in_shape
        pz, py, px = self._pool
        Do, Ho, Wo = gy.shape[2:]
        gwin = np.zeros((n, c, Do, Ho, Wo, pz * py * px))
        np.put_along_axis(gwin, self._idx[..., None], gy[..., None], axis=-1)
        gwin = gwin.reshape(n, c, Do, Ho, Wo, pz, py, px).transpose(
            0, 1, 2, 5, 3, 6, 4, 7
        )
        gx = np.zeros(self._in_shape)
        gx[:, :, : Do * pz, : Ho * py, : Wo * px] = gwin.reshape(
            n, c, Do * pz, Ho * py, Wo * px
        )
        return gx


class BatchNorm3D(Layer):
    """Per-channel normalization; batch statistics while training, running
    statistics at inference. eps fixed at 1e-5."""

    EPS = 1e-5

    def __init__(self, name, channels, momentum=0.1):
        self.name = name
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)

    def param_dict(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def grad_dict(self):
        return {f"{self.name}.gamma": self.ggamma, f"{self.name}.beta": self.gbeta}

    def state_dict(self):
        return {
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }

    def forward(self, x, train=False, rng=None):
        axes = (0, 2, 3, 4)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean = self.running_mean
            var = self.running_var
        self._train = train
        self._istd = 1.0 / np.sqrt(var + self.EPS)
        bshape = (1, -1, 1, 1, 1)
        self._xhat = (x - mean.reshape(bshape)) * self._istd.reshape(bshape)
        return self.gamma.reshape(bshape) * self._xhat + self.beta.reshape(bshape)

    def backward(self, gy):
        axes = (0, 2, 3, 4)
        bshape = (1, -1, 1, 1, 1)
        self.ggamma += (gy * self._xhat).sum(axis=axes)
        self.gbeta += gy.sum(axis=axes)
        gxhat = gy * self.gamma.reshape(bshape)
        if not self._train:
            return gxhat * self._istd.reshape(bshape)
        m = gy.shape[0] * gy.shape[2] * gy.shape[3] * gy.shape[4]
        sum_g = gxhat.sum(axis=axes).reshape(bshape)
        sum_gx = (gxhat * self._xhat).sum(axis=axes).reshape(bshape)
        return (self._istd.reshape(bshape) / m) * (
            m * gxhat - sum_g - self._xhat * sum_gx
        )


class Dropout(Layer):
    def __init__(self, name, rate):
        self.name = name
        self.rate = float(rate)

    def forward(self, x, train=False, rng=None):
        if not train or self.rate <= 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, gy):
        return gy if self._mask is None else gy * self._mask


class Flatten(Layer):
    name = "flatten"

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, gy):
        return gy.reshape(self._shape)


class ToSequence(Layer):
    """(n, c, D, H, W) -> (n, D*H*W, c) token sequence for attention."""

    name = "to_sequence"

    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        n, c = x.shape[:2]
        return x.reshape(n, c, -1).transpose(0, 2, 1)

    def backward(self, gy):
        n, c = self._shape[:2]
        return gy.transpose(0, 2, 1).reshape(self._shape)


class Dense(Layer):
    def __init__(self, name, n_in, n_out, rng):
        self.name = name
        self.w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
        self.b = np.zeros(n_out)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def param_dict(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def grad_dict(self):
        return {f"{self.name}.w": self.gw, f"{self.name}.b": self.gb}

    def forward(self, x, train=False, rng=None):
        self._x = x
        return x @ self.w + self.b

    def backward(self, gy):
        self.gw += self._x.T @ gy
        self.gb += gy.sum(axis=0)
        return gy @ self.w.T


class MultiHeadSelfAttention(Layer):
    """Self-attention over a token sequence; per-head learned Q/K/V projections,
    head outputs concatenated along the channel axis."""

    def __init__(self, name, channels, n_heads, d_k, d_v, rng):
        self.name = name
        self.n_heads = n_heads
        self.d_k = d_k
        self.d_v = d_v
        s_k = np.sqrt(1.0 / channels)
        self.wq = [rng.normal(0.0, s_k, size=(channels, d_k)) for _ in range(n_heads)]
        self.wk = [rng.normal(0.0, s_k, size=(channels, d_k)) for _ in range(n_heads)]
        self.wv = [rng.normal(0.0, s_k, size=(channels, d_v)) for _ in range(n_heads)]
        self.gwq = [np.zeros_like(m) for m in self.wq]
        self.gwk = [np.zeros_like(m) for m in self.wk]
        self.gwv = [np.zeros_like(m) for m in self.wv]

    def param_dict(self):
        out = {}
        for h in range(self.n_heads):
            out[f"{self.name}.h{h}.wq"] = self.wq[h]
            out[f"{self.name}.h{h}.wk"] = self.wk[h]
            out[f"{self.name}.h{h}.wv"] = self.wv[h]
        return out

    def grad_dict(self):
        out = {}
        for h in range(self.n_heads):
            out[f"{self.name}.h{h}.wq"] = self.gwq[h]
            out[f"{self.name}.h{h}.wk"] = self.gwk[h]
            out[f"{self.name}.h{h}.wv"] = self.gwv[h]
        return out

    def forward(self, x, train=False, rng=None):
        self._x = x
        self._cache = []
        outs = []
        scale = 1.0 / np.sqrt(float(self.d_k))
        for h in range(self.n_heads):
            Q = x @ self.wq[h]
            K = x @ self.wk[h]
            V = x @ self.wv[h]
            A = softmax(np.einsum("nsk,ntk->nst", Q, K) * scale, axis=-1)
            outs.append(np.einsum("nst,ntv->nsv", A, V))
            self._cache.append((Q, K, V, A))
        return np.concatenate(outs, axis=-1)

    def backward(self, gy):
        x = self._x
        gx = np.zeros_like(x)
        scale = 1.0 / np.sqrt(float(self.d_k))
        for h in range(self.n_heads):
            Q, K, V, A = self._cache[h]
            go = gy[..., h * self.d_v : (h + 1) * self.d_v]
            gA = np.einsum("nsv,ntv->nst", go, V)
            gV = np.einsum("nst,nsv->ntv", A, go)
            gS = A * (gA - (gA * A).sum(axis=-1, keepdims=True))
            gQ = np.einsum("nst,ntk->nsk", gS, K) * scale
            gK = np.einsum("nst,nsk->ntk", gS, Q) * scale
            self.gwq[h] += np.einsum("nsc,nsk->ck", x, gQ)
            self.gwk[h] += np.einsum("ntc,ntk->ck", x, gK)
            self.gwv[h] += np.einsum("ntc,ntv->cv", x, gV)
            gx += np.einsum("nsk,ck->nsc", gQ, self.wq[h])
            gx += np.einsum("ntk,ck->ntc", gK, self.wk[h])
            gx += np.einsum("ntv,cv->ntc", gV, self.wv[h])
        return gx
