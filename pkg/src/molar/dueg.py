"""Dynamic user embedding generator.

A causal transformer that reads a user's item-embedding sequence followed by
a learned user token; the final hidden state at the user token is the
content-based user embedding.  There is no vocabulary table: inputs are item
embedding vectors produced by the item encoder.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from molar.errors import ConfigError, DimensionError, FormatError
from molar.numcore import tensor as T
from molar.numcore.nn import AttentionBlock, LayerNorm, Module, causal_mask, normal
from molar.numcore.tensor import Parameter, Tensor, as_tensor
from molar.numcore.tensorfile import load_tensors, save_tensors

MAGIC = b"MOLDUEG1"


class Dueg(Module):
    def __init__(self, d: int = 64, max_seq_len: int = 10, n_layers: int = 2, n_heads: int = 2,
                 seed: int = 0, input_projection: bool = True):
        if d < 1 or max_seq_len < 1:
            raise ConfigError("Dueg sizes must be positive")
        rng = np.random.default_rng(seed)
        self.d, self.max_seq_len = d, max_seq_len
        self.in_proj = Parameter(np.eye(d)) if input_projection else None
        self.pos_emb = Parameter(normal(rng, (max_seq_len + 1, d)))
        self.blocks = [AttentionBlock(d, n_heads, rng) for _ in range(n_layers)]
        self.user_token = Parameter(normal(rng, (d,)))
        self.ln_f = LayerNorm(d)

    @property
    def hparams(self) -> dict:
        return {"d": self.d, "max_seq_len": self.max_seq_len, "n_layers": len(self.blocks),
                "n_heads": self.blocks[0].n_heads if self.blocks else 1,
                "input_projection": self.in_proj is not None}

    def __call__(self, item_table, sequences: list[list[int]]) -> Tensor:
        """User embeddings [B, d] for index sequences into ``item_table`` [N, d]."""
        x = self.hidden_states(item_table, sequences)
        return self.ln_f(x[:, x.shape[1] - 1, :])

    def hidden_states(self, item_table, sequences: list[list[int]]) -> Tensor:
        """Pre-readout states [B, L, d]; sequences are left-padded and the user token sits at L-1."""
        table = as_tensor(item_table)
        if table.ndim != 2 or table.shape[1] != self.d:
            raise DimensionError(f"item embeddings must be [N, {self.d}], got {table.shape}")
        lengths = np.array([len(s) for s in sequences], dtype=np.int64)
        if lengths.size == 0:
            raise ConfigError("no sequences given")
        if lengths.min() < 1:
            raise ConfigError("cannot embed an empty item sequence")
        if lengths.max() > self.max_seq_len:
            raise ConfigError(f"sequence of length {lengths.max()} exceeds max_seq_len {self.max_seq_len}; truncate first")
        B, L = len(sequences), int(lengths.max()) + 1
        start = L - 1 - lengths
        idx = np.zeros((B, L), dtype=np.int64)
        on = np.zeros((B, L, 1))
        for b, s in enumerate(sequences):
            idx[b, start[b]:L - 1] = s
            on[b, start[b]:L - 1] = 1.0
        if idx.max() >= table.shape[0] or idx.min() < 0:
            raise ConfigError(f"item index out of range for a table of {table.shape[0]} items")
        x = T.take_rows(table, idx)
        if self.in_proj is not None:
            x = x @ self.in_proj
        x = x * on
        user_on = np.zeros((B, L, 1))
        user_on[:, L - 1] = 1.0
        x = x + T.reshape(self.user_token, (1, 1, self.d)) * user_on
        cols = np.arange(L)[None, :]
        valid = (cols >= start[:, None])[..., None].astype(np.float64)
        x = x + T.take_rows(self.pos_emb, np.clip(cols - start[:, None], 0, None)) * valid
        allowed = causal_mask(lengths + 1, L, causal=True)
        for block in self.blocks:
            x = block(x, allowed)
        return x

    def save(self, path: str | Path) -> None:
        save_tensors(path, MAGIC, {"kind": "dueg", "hparams": self.hparams},
                     [(n, p.data) for n, p in self.named_parameters()])

    @classmethod
    def load(cls, path: str | Path) -> "Dueg":
        meta, tensors = load_tensors(path, MAGIC)
        if meta.get("kind") != "dueg":
            raise FormatError(f"{path}: not a Dueg checkpoint")
        model = cls(**meta["hparams"])
        model.load_state_dict(tensors)
        return model


def dueg_forward(item_embeddings, model: Dueg) -> Tensor:
    """Embedding [d] of one ordered item-embedding sequence [n, d]."""
    emb = as_tensor(item_embeddings)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise ConfigError(f"expected a non-empty [n, d] sequence, got shape {emb.shape}")
    out = model(emb, [list(range(emb.shape[0]))])
    return T.reshape(out, (model.d,))


def score_item(user_embedding, item_embedding) -> float:
    u, e = np.asarray(user_embedding, dtype=np.float64), np.asarray(item_embedding, dtype=np.float64)
    if u.shape != e.shape or u.ndim != 1:
        raise DimensionError(f"cannot score: user vector {u.shape} vs item vector {e.shape}")
    return float(u @ e)


def predict_top_k(user_embedding, all_item_embeddings, k: int, exclude=()) -> np.ndarray:
    """Top-k item ids by dot product; ties go to the smaller id."""
    table = np.asarray(all_item_embeddings, dtype=np.float64)
    if not 1 <= k <= table.shape[0]:
        raise ConfigError(f"k={k} must lie in [1, {table.shape[0]}]")
    scores = table @ np.asarray(user_embedding, dtype=np.float64)
    if len(exclude):
        scores = scores.copy()
        scores[list(exclude)] = -np.inf
    # lexsort: last key is primary; negate scores for descending order
    return np.lexsort((np.arange(len(scores)), -scores))[:k]
