"""Parameterized layers on top of the tape: linear, conv, norms, attention, LSTM.

Weights start from N(0, 0.02), biases at zero, normalization gains at one.
Every module owns an rng so parameter values depend only on (seed, module
name), not on what else the model instantiates.
"""

from __future__ import annotations

import zlib

import numpy as np

from .tensor import Tensor, concat, conv2d, scaled_dot_product_attention

INIT_STD = 0.02
NORM_EPS = 1e-5


def module_rng(seed: int, name: str) -> np.random.Generator:
    """Independent parameter stream per module name."""
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode())])


class Module:
    """Minimal parameter container with hierarchical registration."""

    def __init__(self, name: str):
        self.name = name
        self._params: dict[str, Tensor] = {}
        self._children: list[Module] = []

    def param(self, key: str, array: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)
        self._params[key] = t
        return t

    def child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def params(self) -> dict[str, Tensor]:
        out = {f"{self.name}.{k}": v for k, v in self._params.items()}
        for c in self._children:
            for k, v in c.params().items():
                out[f"{self.name}.{k}"] = v
        return out


class Linear(Module):
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__(name)
        self.w = self.param("w", rng.normal(0.0, INIT_STD, size=(d_in, d_out)))
        self.b = self.param("b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        if self.b is not None:
            y = y + self.b
        return y


class Conv2dLayer(Module):
    def __init__(self, name, c_in, c_out, k, rng, stride=1, pad=0, bias=True):
        super().__init__(name)
        self.stride, self.pad = stride, pad
        self.w = self.param("w", rng.normal(0.0, INIT_STD, size=(c_out, c_in, k, k)))
        self.b = self.param("b", np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class GroupNorm(Module):
    def __init__(self, name: str, groups: int, channels: int):
        super().__init__(name)
        if channels % groups:
            raise ValueError("channels must divide into groups")
        self.groups = groups
        self.gain = self.param("gain", np.ones((channels, 1, 1)))
        self.bias = self.param("bias", np.zeros((channels, 1, 1)))

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        g = self.groups
        xg = x.reshape(g, (c // g) * h * w)
        mu = xg.mean(axis=1, keepdims=True)
        centered = xg - mu
        var = (centered * centered).mean(axis=1, keepdims=True)
        norm = centered / (var + NORM_EPS) ** 0.5
        return norm.reshape(c, h, w) * self.gain + self.bias


class LayerNorm(Module):
    def __init__(self, name: str, dim: int):
        super().__init__(name)
        self.gain = self.param("gain", np.ones(dim))
        self.bias = self.param("bias", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / (var + NORM_EPS) ** 0.5 * self.gain + self.bias


class MultiheadAttention(Module):
    """Multi-head scaled dot-product attention over row-token matrices."""

    def __init__(self, name: str, dim: int, heads: int, rng: np.random.Generator):
        super().__init__(name)
        if dim % heads:
            raise ValueError("dim must divide into heads")
        self.dim, self.heads = dim, heads
        self.wq = self.child(Linear("wq", dim, dim, rng))
        self.wk = self.child(Linear("wk", dim, dim, rng))
        self.wv = self.child(Linear("wv", dim, dim, rng))
        self.wo = self.child(Linear("wo", dim, dim, rng))

    def __call__(self, q_in: Tensor, kv_in: Tensor) -> tuple[Tensor, np.ndarray]:
        """Returns (output [L_q x dim], per-head weights [heads, L_q, L_k])."""
        dk = self.dim // self.heads
        q = self.wq(q_in)
        k = self.wk(kv_in)
        v = self.wv(kv_in)
        outs = []
        weights = np.empty((self.heads, q_in.shape[0], kv_in.shape[0]))
        for h in range(self.heads):
            sl = slice(h * dk, (h + 1) * dk)
            o, wts = scaled_dot_product_attention(q[:, sl], k[:, sl], v[:, sl])
            outs.append(o)
            weights[h] = wts.data
        return self.wo(concat(outs, axis=1)), weights


class FeedForward(Module):
    def __init__(self, name: str, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__(name)
        self.fc1 = self.child(Linear("fc1", dim, hidden, rng))
        self.fc2 = self.child(Linear("fc2", hidden, dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


class EncoderLayer(Module):
    """Pre-layer-norm transformer encoder block."""

    def __init__(self, name: str, dim: int, heads: int, ffn: int, rng: np.random.Generator):
        super().__init__(name)
        self.ln1 = self.child(LayerNorm("ln1", dim))
        self.attn = self.child(MultiheadAttention("attn", dim, heads, rng))
        self.ln2 = self.child(LayerNorm("ln2", dim))
        self.ffn = self.child(FeedForward("ffn", dim, ffn, rng))

    def __call__(self, x: Tensor) -> tuple[Tensor, np.ndarray]:
        normed = self.ln1(x)
        attended, weights = self.attn(normed, normed)
        x = x + attended
        x = x + self.ffn(self.ln2(x))
        return x, weights


class DecoderLayer(Module):
    """Pre-layer-norm decoder block: query self-attention then cross-attention."""

    def __init__(self, name: str, dim: int, heads: int, ffn: int, rng: np.random.Generator):
        super().__init__(name)
        self.ln1 = self.child(LayerNorm("ln1", dim))
        self.self_attn = self.child(MultiheadAttention("self_attn", dim, heads, rng))
        self.ln2 = self.child(LayerNorm("ln2", dim))
        self.cross_attn = self.child(MultiheadAttention("cross_attn", dim, heads, rng))
        self.ln3 = self.child(LayerNorm("ln3", dim))
        self.ffn = self.child(FeedForward("ffn", dim, ffn, rng))

    def __call__(self, q: Tensor, memory: Tensor) -> tuple[Tensor, np.ndarray]:
        normed = self.ln1(q)
        attended, _ = self.self_attn(normed, normed)
        q = q + attended
        attended, cross_weights = self.cross_attn(self.ln2(q), memory)
        q = q + attended
        q = q + self.ffn(self.ln3(q))
        return q, cross_weights


class LSTMLayer(Module):
    """Single-direction LSTM over a (steps, d_in) sequence."""

    def __init__(self, name: str, d_in: int, hidden: int, rng: np.random.Generator):
        super().__init__(name)
        self.hidden = hidden
        self.wx = self.param("wx", rng.normal(0.0, INIT_STD, size=(d_in, 4 * hidden)))
        self.wh = self.param("wh", rng.normal(0.0, INIT_STD, size=(hidden, 4 * hidden)))
        self.b = self.param("b", np.zeros(4 * hidden))

    def __call__(self, xs: Tensor, reverse: bool = False) -> Tensor:
        steps = xs.shape[0]
        hd = self.hidden
        h = Tensor(np.zeros((1, hd)))
        c = Tensor(np.zeros((1, hd)))
        order = range(steps - 1, -1, -1) if reverse else range(steps)
        outs: list[Tensor | None] = [None] * steps
        for t in order:
            z = xs[t : t + 1, :] @ self.wx + h @ self.wh + self.b
            i = z[:, 0 * hd : 1 * hd].sigmoid()
            f = z[:, 1 * hd : 2 * hd].sigmoid()
            g = z[:, 2 * hd : 3 * hd].tanh()
            o = z[:, 3 * hd : 4 * hd].sigmoid()
            c = f * c + i * g
            h = o * c.tanh()
            outs[t] = h
        return concat(outs, axis=0)


class BiLSTM(Module):
    """Stack of bidirectional LSTM layers; output is (steps, 2*hidden)."""

    def __init__(self, name: str, d_in: int, hidden: int, layers: int, rng: np.random.Generator):
        super().__init__(name)
        self.layers = []
        for n in range(layers):
            fwd = self.child(LSTMLayer(f"l{n}_fwd", d_in if n == 0 else 2 * hidden, hidden, rng))
            bwd = self.child(LSTMLayer(f"l{n}_bwd", d_in if n == 0 else 2 * hidden, hidden, rng))
            self.layers.append((fwd, bwd))

    def __call__(self, xs: Tensor) -> Tensor:
        for fwd, bwd in self.layers:
            xs = concat([fwd(xs), bwd(xs, reverse=True)], axis=1)
        return xs
