"""Network building blocks on top of the autodiff tensor.

Modules hold named Parameters (leaf tensors with requires_grad). Names
are unique within a model, assembled from the registration path, so a
parameter set can be checkpointed as a flat name -> array mapping.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, name=None, dtype=None):
        super().__init__(np.asarray(data), requires_grad=True, dtype=dtype, name=name)


class Module:
    """Minimal container: child modules and parameters discovered by attribute scan."""

    def named_parameters(self, prefix=""):
        out = {}
        for key, value in vars(self).items():
            path = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(value, Parameter):
                out[path] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(path))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{path}.{i}"))
                    elif isinstance(item, Parameter):
                        out[f"{path}.{i}"] = item
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self):
        """Flat name -> ndarray snapshot (copies)."""
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_arrays(self, arrays):
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(
                f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        for k, p in params.items():
            a = arrays[k]
            if a.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for '{k}': checkpoint {a.shape} vs model {p.data.shape}"
                )
            p.data = np.asarray(a, dtype=p.data.dtype).copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _kaiming(rng, fan_in, shape, dtype):
    scale = math.sqrt(1.0 / fan_in)
    return (rng.standard_normal(shape) * scale).astype(dtype)


class Dense(Module):
    def __init__(self, d_in, d_out, rng, dtype=np.float32):
        self.w = Parameter(_kaiming(rng, d_in, (d_in, d_out), dtype))
        self.b = Parameter(np.zeros(d_out, dtype=dtype))

    def forward(self, x):
        return ad.matmul(x, self.w) + self.b


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0,
                 dtype=np.float32, init_scale=1.0):
        self.stride = stride
        self.padding = padding
        w = _kaiming(rng, c_in * kernel, (c_out, c_in, kernel), dtype) * init_scale
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x):
        return ad.conv1d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, dtype=np.float32):
        self.stride = stride
        self.padding = padding
        w = _kaiming(rng, c_in * kernel * kernel, (c_out, c_in, kernel, kernel), dtype)
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.eps = eps
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x):
        mu = ad.mean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = ad.mean(centered * centered, axis=-1, keepdims=True)
        inv = ad.power(var + self.eps, -0.5)
        return centered * inv * self.gain + self.bias


class CausalSelfAttention(Module):
    """Multi-head attention where position i attends to positions <= i."""

    def __init__(self, d_model, n_heads, rng, dtype=np.float32):
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = Dense(d_model, 3 * d_model, rng, dtype=dtype)
        self.proj = Dense(d_model, d_model, rng, dtype=dtype)

    def forward(self, x):
        N, L, D = x.shape
        h, dh = self.n_heads, self.d_head
        qkv = self.qkv(x)  # (N, L, 3D)
        q = ad.reshape(qkv[:, :, 0:D], (N, L, h, dh))
        k = ad.reshape(qkv[:, :, D : 2 * D], (N, L, h, dh))
        v = ad.reshape(qkv[:, :, 2 * D : 3 * D], (N, L, h, dh))
        q = ad.transpose(q, (0, 2, 1, 3))  # (N, h, L, dh)
        k = ad.transpose(k, (0, 2, 3, 1))  # (N, h, dh, L)
        v = ad.transpose(v, (0, 2, 1, 3))
        scores = ad.matmul(q, k) * (1.0 / math.sqrt(dh))
        mask = np.triu(np.full((L, L), -1e9, dtype=x.dtype), k=1)
        scores = scores + Tensor(mask)
        attn = ad.softmax(scores, axis=-1)
        out = ad.matmul(attn, v)  # (N, h, L, dh)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (N, L, D))
        return self.proj(out)


class TransformerBlock(Module):
    """Pre-norm: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, d_model, n_heads, d_ff, rng, dtype=np.float32):
        self.ln1 = LayerNorm(d_model, dtype=dtype)
        self.attn = CausalSelfAttention(d_model, n_heads, rng, dtype=dtype)
        self.ln2 = LayerNorm(d_model, dtype=dtype)
        self.fc1 = Dense(d_model, d_ff, rng, dtype=dtype)
        self.fc2 = Dense(d_ff, d_model, rng, dtype=dtype)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        h = ad.silu(self.fc1(self.ln2(x)))
        return x + self.fc2(h)


def sinusoidal_embedding(positions, dim, dtype=np.float32):
    """Classic sin/cos embedding table for integer or float positions (constant)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = positions[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2 == 1:
        emb = np.pad(emb, ((0, 0), (0, 1)))
    return emb.astype(dtype)
