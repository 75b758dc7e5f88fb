"""Minimal reverse-mode autodiff substrate and the set-encoder layers.

Everything runs on float64 numpy arrays. A Tensor wraps an array plus a
gradient slot and a backward closure; calling backward() on a scalar loss
walks the tape in reverse topological order. Layers expose both a graph
path (__call__, differentiable) and a forward_np path (plain numpy, no
tape) used for fast rollouts; the two are tested to agree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._io import read_arrays, read_json_block, write_arrays, write_json_block

NN_MAGIC = b"NN1\x00"


class DimensionMismatchError(ValueError):
    """Operand shapes are incompatible."""


class NonScalarLossError(ValueError):
    """backward() must start from a scalar."""


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_bw")

    def __init__(self, data, _parents=(), _bw=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._bw = _bw

    @property
    def shape(self):
        return self.data.shape

    def _acc(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += _unbroadcast(g, self.data.shape)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, (self, other))
        out._bw = lambda g: (self._acc(g), other._acc(g))
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))
        out._bw = lambda g: self._acc(-g)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data * other.data, (self, other))
        out._bw = lambda g: (self._acc(g * other.data), other._acc(g * self.data))
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data / other.data, (self, other))

        def bw(g):
            self._acc(g / other.data)
            other._acc(-g * self.data / other.data**2)

        out._bw = bw
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        out = Tensor(self.data**p, (self,))
        out._bw = lambda g: self._acc(g * p * self.data ** (p - 1))
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.data.shape[-1] != other.data.shape[-2 if other.data.ndim > 1 else 0]:
            raise DimensionMismatchError(
                f"matmul: {self.data.shape} @ {other.data.shape}"
            )
        out = Tensor(self.data @ other.data, (self, other))

        def bw(g):
            self._acc(g @ np.swapaxes(other.data, -1, -2))
            other._acc(np.swapaxes(self.data, -1, -2) @ g)

        out._bw = bw
        return out

    # -- elementwise functions ----------------------------------------------

    def exp(self):
        out = Tensor(np.exp(self.data), (self,))
        out._bw = lambda g: self._acc(g * out.data)
        return out

    def log(self):
        out = Tensor(np.log(self.data), (self,))
        out._bw = lambda g: self._acc(g / self.data)
        return out

    def tanh(self):
        out = Tensor(np.tanh(self.data), (self,))
        out._bw = lambda g: self._acc(g * (1.0 - out.data**2))
        return out

    # -- reductions and shape ops -------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def bw(g):
            if axis is None:
                self._acc(np.broadcast_to(g, self.data.shape))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._acc(np.broadcast_to(g, self.data.shape))

        out._bw = bw
        return out

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), (self,))
        out._bw = lambda g: self._acc(g.reshape(self.data.shape))
        return out

    def transpose(self, *axes):
        out = Tensor(self.data.transpose(*axes), (self,))
        inverse = np.argsort(axes)
        out._bw = lambda g: self._acc(g.transpose(*inverse))
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], (self,))

        def bw(g):
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            np.add.at(self.grad, key, g)

        out._bw = bw
        return out

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise NonScalarLossError(f"loss must be scalar, got shape {self.data.shape}")
        topo, seen, stack = [], set(), [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def cat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, a, b in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(a, b)
            t._acc(g[tuple(sl)])

    out._bw = bw
    return out


def _mask_bias(mask: np.ndarray) -> np.ndarray:
    # True = valid position; invalid positions get a large negative logit
    return np.where(mask, 0.0, -1e9)


def softmax(x: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Normalized exponentials; the shift by the (detached) max keeps the
    result invariant to adding a constant to all logits."""
    if mask is not None:
        x = x + Tensor(_mask_bias(mask))
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    z = (x - shift).exp()
    return z / z.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    if mask is not None:
        x = x + Tensor(_mask_bias(mask))
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    centered = x - shift
    return centered - centered.exp().sum(axis=axis, keepdims=True).log()


def softmax_np(x: np.ndarray, mask: np.ndarray | None = None, axis: int = -1) -> np.ndarray:
    if mask is not None:
        x = x + _mask_bias(mask)
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# layers


class Dense:
    def __init__(self, n_in, n_out, rng, bias=True):
        lim = 1.0 / math.sqrt(n_in)
        self.W = Tensor(rng.uniform(-lim, lim, size=(n_in, n_out)))
        self.b = Tensor(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = as_tensor(x) @ self.W
        return out + self.b if self.b is not None else out

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        out = x @ self.W.data
        return out + self.b.data if self.b is not None else out

    def named_params(self, prefix):
        yield f"{prefix}.W", self.W
        if self.b is not None:
            yield f"{prefix}.b", self.b


class LayerNorm:
    def __init__(self, dim, eps=1e-6):
        self.gain = Tensor(np.ones(dim))
        self.bias = Tensor(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / (var + self.eps) ** 0.5
        return normed * self.gain + self.bias

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered**2).mean(axis=-1, keepdims=True)
        return centered / np.sqrt(var + self.eps) * self.gain.data + self.bias.data

    def named_params(self, prefix):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


class MultiHeadSelfAttention:
    def __init__(self, dim, n_heads, rng):
        if dim % n_heads:
            raise DimensionMismatchError(f"dim {dim} not divisible by heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.wq = Dense(dim, dim, rng, bias=False)
        self.wk = Dense(dim, dim, rng, bias=False)
        self.wv = Dense(dim, dim, rng, bias=False)
        self.wo = Dense(dim, dim, rng, bias=False)

    def _split(self, x, B, n):
        return x.reshape(B, n, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        B, n, d = x.data.shape
        q = self._split(self.wq(x), B, n)
        k = self._split(self.wk(x), B, n)
        v = self._split(self.wv(x), B, n)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))
        key_mask = None if mask is None else mask[:, None, None, :]
        attn = softmax(scores, mask=key_mask, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
        return self.wo(out)

    def forward_np(self, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        B, n, d = x.shape

        def split(m):
            return m.reshape(B, n, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

        q, k, v = (split(w.forward_np(x)) for w in (self.wq, self.wk, self.wv))
        scores = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(self.head_dim)
        key_mask = None if mask is None else mask[:, None, None, :]
        attn = softmax_np(scores, mask=key_mask, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
        return self.wo.forward_np(out)

    def named_params(self, prefix):
        for name, layer in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            yield from layer.named_params(f"{prefix}.{name}")


class EncoderLayer:
    """Post-norm transformer block with a tanh feedforward."""

    def __init__(self, dim, n_heads, ff_dim, rng):
        self.attn = MultiHeadSelfAttention(dim, n_heads, rng)
        self.ln1 = LayerNorm(dim)
        self.ff1 = Dense(dim, ff_dim, rng)
        self.ff2 = Dense(ff_dim, dim, rng)
        self.ln2 = LayerNorm(dim)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        h = self.ln1(x + self.attn(x, mask))
        return self.ln2(h + self.ff2(self.ff1(h).tanh()))

    def forward_np(self, x: np.ndarray, mask=None) -> np.ndarray:
        h = self.ln1.forward_np(x + self.attn.forward_np(x, mask))
        return self.ln2.forward_np(h + self.ff2.forward_np(np.tanh(self.ff1.forward_np(h))))

    def named_params(self, prefix):
        yield from self.attn.named_params(f"{prefix}.attn")
        yield from self.ln1.named_params(f"{prefix}.ln1")
        yield from self.ff1.named_params(f"{prefix}.ff1")
        yield from self.ff2.named_params(f"{prefix}.ff2")
        yield from self.ln2.named_params(f"{prefix}.ln2")


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    model_dim: int = 64
    n_heads: int = 4
    n_layers: int = 2
    feedforward_dim: int = 128

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise DimensionMismatchError(
                f"model_dim {self.model_dim} must be divisible by n_heads {self.n_heads}"
            )


class SetEncoder:
    """Permutation-equivariant token encoder with a learned summary token.

    No positional encoding: permuting the input tokens permutes the
    per-token outputs identically and leaves the summary embedding alone.
    """

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        seq = np.random.SeedSequence([seed, 7001])
        rngs = [np.random.default_rng(s) for s in seq.spawn(cfg.n_layers + 2)]
        self.proj = Dense(cfg.input_dim, cfg.model_dim, rngs[0])
        lim = 1.0 / math.sqrt(cfg.model_dim)
        self.cls = Tensor(rngs[1].uniform(-lim, lim, size=(1, 1, cfg.model_dim)))
        self.layers = [
            EncoderLayer(cfg.model_dim, cfg.n_heads, cfg.feedforward_dim, rngs[2 + i])
            for i in range(cfg.n_layers)
        ]

    def _check(self, tokens_shape):
        if len(tokens_shape) != 3 or tokens_shape[2] != self.cfg.input_dim:
            raise DimensionMismatchError(
                f"tokens must be (batch, n, {self.cfg.input_dim}), got {tokens_shape}"
            )
        if tokens_shape[1] == 0:
            raise DimensionMismatchError("token set must be nonempty")

    @staticmethod
    def _full_mask(mask, B, n):
        if mask is None:
            return None
        return np.concatenate([np.ones((B, 1), dtype=bool), mask], axis=1)

    def encode(self, tokens: Tensor, mask: np.ndarray | None = None):
        tokens = as_tensor(tokens)
        self._check(tokens.data.shape)
        B, n, _ = tokens.data.shape
        x = cat([self.cls + Tensor(np.zeros((B, 1, self.cfg.model_dim))), self.proj(tokens)], axis=1)
        full_mask = self._full_mask(mask, B, n)
        for layer in self.layers:
            x = layer(x, full_mask)
        return x[:, 0, :], x[:, 1:, :]

    def encode_np(self, tokens: np.ndarray, mask: np.ndarray | None = None):
        self._check(tokens.shape)
        B, n, _ = tokens.shape
        x = np.concatenate(
            [np.broadcast_to(self.cls.data, (B, 1, self.cfg.model_dim)), self.proj.forward_np(tokens)],
            axis=1,
        )
        full_mask = self._full_mask(mask, B, n)
        for layer in self.layers:
            x = layer.forward_np(x, full_mask)
        return x[:, 0, :], x[:, 1:, :]

    def named_params(self, prefix="encoder"):
        yield f"{prefix}.cls", self.cls
        yield from self.proj.named_params(f"{prefix}.proj")
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.layer{i}")


def encode_set(encoder: SetEncoder, tokens) -> tuple[np.ndarray, np.ndarray]:
    """Encode one unbatched token set; returns (summary, per-token) arrays."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise DimensionMismatchError(f"expected (n, input_dim) tokens, got {tokens.shape}")
    cls, toks = encoder.encode_np(tokens[None])
    return cls[0], toks[0]


# ---------------------------------------------------------------------------
# optimization


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def sgd_step(params, grads, lr: float) -> None:
    """params <- params - lr * grads, elementwise."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise DimensionMismatchError("params and grads length differ")
    for p, g in zip(params, grads):
        g = np.asarray(g)
        if p.data.shape != g.shape:
            raise DimensionMismatchError(f"shape {p.data.shape} vs grad {g.shape}")
        p.data -= lr * g


def polyak_update(target_params, online_params, tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, elementwise."""
    target_params, online_params = list(target_params), list(online_params)
    if len(target_params) != len(online_params):
        raise DimensionMismatchError("parameter lists differ in length")
    for t, o in zip(target_params, online_params):
        if t.data.shape != o.data.shape:
            raise DimensionMismatchError(f"shape {t.data.shape} vs {o.data.shape}")
        t.data = tau * o.data + (1.0 - tau) * t.data


class SGD:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self):
        zero_grads(self.params)


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad**2
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self):
        zero_grads(self.params)


# ---------------------------------------------------------------------------
# NN1 parameter checkpoint


def save_params(path_or_f, named_params: dict) -> None:
    names = sorted(named_params)
    payload = {"names": names}

    def write(f):
        write_json_block(f, NN_MAGIC, payload)
        write_arrays(f, (np.asarray(getattr(named_params[n], "data", named_params[n])) for n in names))

    if hasattr(path_or_f, "write"):
        write(path_or_f)
    else:
        with open(path_or_f, "wb") as f:
            write(f)


def load_params(path_or_f) -> dict[str, np.ndarray]:
    def read(f):
        payload = read_json_block(f, NN_MAGIC)
        arrays = read_arrays(f, len(payload["names"]))
        return dict(zip(payload["names"], arrays))

    if hasattr(path_or_f, "read"):
        return read(path_or_f)
    with open(path_or_f, "rb") as f:
        return read(f)


def assign_params(named_params: dict, loaded: dict[str, np.ndarray]) -> None:
    for name, tensor in named_params.items():
        arr = loaded[name]
        if tensor.data.shape != arr.shape:
            raise DimensionMismatchError(f"{name}: shape {tensor.data.shape} vs {arr.shape}")
        tensor.data = arr.astype(np.float64)
