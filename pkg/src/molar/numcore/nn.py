"""Parameter containers and the two recurrent/attention building blocks."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from molar.errors import ConfigError, DimensionError
from molar.numcore import tensor as T
from molar.numcore.tensor import Parameter, Tensor

INIT_STD = 0.02


class Module:
    """Walks attributes in definition order to enumerate parameters.

    Parameter names are dotted attribute paths, so ``named_parameters`` is
    stable across runs and gives checkpoint files a fixed tensor order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        params = []
        for name, p in self.named_parameters():
            p.name = name
            params.append(p)
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise DimensionError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=T.DTYPE)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()]))


def normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class AttentionBlock(Module):
    """Pre-norm multi-head self-attention followed by a GELU feed-forward.

    ``forward`` takes ``x`` of shape [B, L, d] and a boolean ``allowed`` mask
    of shape [B, L, L] (query, key); both sublayers are residual.
    """

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, ffn_mult: int = 4):
        if n_heads < 1 or d % n_heads:
            raise ConfigError(f"model dimension {d} is not divisible by {n_heads} heads")
        self.d, self.n_heads = d, n_heads
        h = ffn_mult * d
        self.ln1 = LayerNorm(d)
        self.wq = Parameter(normal(rng, (d, d)))
        self.wk = Parameter(normal(rng, (d, d)))
        self.wv = Parameter(normal(rng, (d, d)))
        self.wo = Parameter(normal(rng, (d, d)))
        self.bo = Parameter(np.zeros(d))
        self.ln2 = LayerNorm(d)
        self.w1 = Parameter(normal(rng, (d, h)))
        self.b1 = Parameter(np.zeros(h))
        self.w2 = Parameter(normal(rng, (h, d)))
        self.b2 = Parameter(np.zeros(d))

    def __call__(self, x: Tensor, allowed: np.ndarray) -> Tensor:
        B, L, d = x.shape
        if d != self.d:
            raise DimensionError(f"block expects width {self.d}, got {d}")
        nh, dh = self.n_heads, d // self.n_heads
        a = self.ln1(x)

        def heads(w):
            return T.transpose(T.reshape(a @ w, (B, L, nh, dh)), (0, 2, 1, 3))

        q, k, v = heads(self.wq), heads(self.wk), heads(self.wv)
        scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        scores = T.masked_fill(scores, ~allowed[:, None, :, :])
        ctx = T.softmax(scores, axis=-1) @ v
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, d))
        x = x + (ctx @ self.wo + self.bo)
        f = T.gelu(self.ln2(x) @ self.w1 + self.b1) @ self.w2 + self.b2
        return x + f


def causal_mask(lengths: np.ndarray, L: int, causal: bool) -> np.ndarray:
    """Boolean [B, L, L] mask for left-padded rows of the given lengths.

    Real positions attend to real positions (only earlier ones when causal);
    padding rows attend to themselves so their softmax stays defined.
    """
    lengths = np.asarray(lengths)
    pos = np.arange(L)
    valid = pos[None, :] >= (L - lengths)[:, None]
    allowed = valid[:, None, :] & valid[:, :, None]
    if causal:
        allowed &= np.tril(np.ones((L, L), dtype=bool))[None]
    allowed |= np.eye(L, dtype=bool)[None]
    return allowed


def attention_block(x: Tensor, block: AttentionBlock, causal: bool) -> Tensor:
    """Run one block over a single [L, d] sequence."""
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"expected a non-empty [L, d] input, got {x.shape}")
    L = x.shape[0]
    out = block(T.reshape(x, (1, L, x.shape[1])), causal_mask(np.array([L]), L, causal))
    return T.reshape(out, (L, x.shape[1]))


class GRUCell(Module):
    """r/z/n gated recurrent unit; the reset gate scales the recurrent candidate term."""

    def __init__(self, d_in: int, d: int, rng: np.random.Generator):
        self.d_in, self.d = d_in, d
        std = 1.0 / np.sqrt(d)
        self.w_x = Parameter(rng.uniform(-std, std, size=(d_in, 3 * d)))
        self.w_h = Parameter(rng.uniform(-std, std, size=(d, 3 * d)))
        self.b_x = Parameter(np.zeros(3 * d))
        self.b_h = Parameter(np.zeros(3 * d))

    def __call__(self, x_t: Tensor, h_prev: Tensor) -> Tensor:
        if x_t.shape[-1] != self.d_in or h_prev.shape[-1] != self.d:
            raise DimensionError(
                f"GRU expects input width {self.d_in} and state width {self.d}, "
                f"got {x_t.shape} and {h_prev.shape}")
        d = self.d
        gx = x_t @ self.w_x + self.b_x if x_t.ndim > 1 else _row(x_t) @ self.w_x + self.b_x
        gh = h_prev @ self.w_h + self.b_h if h_prev.ndim > 1 else _row(h_prev) @ self.w_h + self.b_h
        r = T.sigmoid(gx[..., :d] + gh[..., :d])
        z = T.sigmoid(gx[..., d:2 * d] + gh[..., d:2 * d])
        n = T.tanh(gx[..., 2 * d:] + r * gh[..., 2 * d:])
        h = (1.0 - z) * n + z * (h_prev if h_prev.ndim > 1 else _row(h_prev))
        return h if x_t.ndim > 1 else T.reshape(h, (d,))


def _row(v: Tensor) -> Tensor:
    return T.reshape(v, (1, v.shape[0]))


def gru_cell(x_t: Tensor, h_prev: Tensor, cell: GRUCell) -> Tensor:
    return cell(x_t, h_prev)
