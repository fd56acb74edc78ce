"""Transformer item encoder with a learned readout token.

An item becomes the sequence ``[token embeddings..., projected image
features, readout token]``; after non-causal attention the hidden state at
the readout position is the item embedding.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass

import numpy as np

from molar.errors import ConfigError, DimensionError
from molar.numcore import tensor as T
from molar.numcore.nn import AttentionBlock, LayerNorm, Module, causal_mask, normal
from molar.numcore.optim import AdamState, adam_update, clip_grad_norm
from molar.numcore.tensor import Parameter, Tensor
from molar.itemrep.records import ItemRecord, tokenize
from molar.objectives import align_loss

TEXT = "text"
IMAGE = "image"
BOTH = (TEXT, IMAGE)


def parse_modality_mask(mask) -> tuple[str, ...]:
    if isinstance(mask, str):
        mask = [m for m in mask.replace("+", ",").split(",") if m]
    mask = tuple(sorted(set(mask)))
    if not mask or any(m not in BOTH for m in mask):
        raise ConfigError(f"modality mask must be a non-empty subset of {BOTH}, got {mask!r}")
    return mask


class ItemEncoder(Module):
    def __init__(self, vocab_size: int = 8192, d: int = 64, image_dim: int = 32, max_tokens: int = 16,
                 n_layers: int = 2, n_heads: int = 2, seed: int = 0, modality_mask=BOTH):
        if vocab_size < 1 or d < 1 or image_dim < 1 or max_tokens < 1:
            raise ConfigError("encoder sizes must be positive")
        rng = np.random.default_rng(seed)
        self.vocab_size, self.d, self.image_dim, self.max_tokens = vocab_size, d, image_dim, max_tokens
        self.modality_mask = parse_modality_mask(modality_mask)
        self.tok_emb = Parameter(normal(rng, (vocab_size, d)))
        self.img_proj = Parameter(normal(rng, (image_dim, d)))
        self.img_bias = Parameter(np.zeros(d))
        self.pos_emb = Parameter(normal(rng, (max_tokens + 2, d)))
        self.blocks = [AttentionBlock(d, n_heads, rng) for _ in range(n_layers)]
        self.cur_item_token = Parameter(normal(rng, (d,)))
        self.ln_f = LayerNorm(d)
        self.forward_count = 0
        self._tokens: dict[tuple[int, str, str], np.ndarray] = {}

    @property
    def hparams(self) -> dict:
        return {"vocab_size": self.vocab_size, "d": self.d, "image_dim": self.image_dim,
                "max_tokens": self.max_tokens, "n_layers": len(self.blocks),
                "n_heads": self.blocks[0].n_heads if self.blocks else 1}

    def version(self) -> str:
        """Content hash of all parameters; changes whenever any weight changes."""
        h = hashlib.blake2b(digest_size=12)
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        h.update(",".join(self.modality_mask).encode())
        return h.hexdigest()

    def _token_ids(self, record: ItemRecord) -> np.ndarray:
        key = (record.item_id, record.title, repr(sorted(record.attributes.items())))
        toks = self._tokens.get(key)
        if toks is None:
            raw = record.text_tokens if record.text_tokens is not None else tokenize(
                record.title, record.attributes, self.vocab_size)
            toks = np.asarray(raw[: self.max_tokens], dtype=np.int64)
            if toks.size and toks.max() >= self.vocab_size:
                raise ConfigError(f"item {record.item_id}: token id exceeds vocab_size {self.vocab_size}")
            self._tokens[key] = toks
        return toks

    def __call__(self, records: list[ItemRecord], modality_mask=None) -> Tensor:
        """Embed a batch of items; returns [B, d]."""
        mask = self.modality_mask if modality_mask is None else parse_modality_mask(modality_mask)
        use_text, use_image = TEXT in mask, IMAGE in mask
        B = len(records)
        if B == 0:
            return Tensor(np.zeros((0, self.d)))
        toks = [self._token_ids(r) if use_text else np.zeros(0, dtype=np.int64) for r in records]
        has_img = np.array([use_image and r.has_image for r in records])
        lengths = np.array([len(t) for t in toks]) + has_img + 1
        if np.any(lengths == 1):
            bad = [r.item_id for r, n in zip(records, lengths) if n == 1][:5]
            raise ConfigError(f"items {bad} have no content left under modality mask {mask}")
        L = int(lengths.max())
        start = L - lengths
        cols = np.arange(L)[None, :]

        tok_idx = np.zeros((B, L), dtype=np.int64)
        tok_on = np.zeros((B, L, 1))
        img_on = np.zeros((B, L, 1))
        feats = np.zeros((B, self.image_dim))
        for b, t in enumerate(toks):
            tok_idx[b, start[b]:start[b] + len(t)] = t
            tok_on[b, start[b]:start[b] + len(t)] = 1.0
            if has_img[b]:
                f = records[b].image_features
                if f.shape != (self.image_dim,):
                    raise DimensionError(f"item {records[b].item_id}: image_features has {f.size} dims, "
                                         f"encoder expects {self.image_dim}")
                feats[b] = f
                img_on[b, L - 2] = 1.0
        cur_on = np.zeros((B, L, 1))
        cur_on[:, L - 1] = 1.0
        pos_idx = np.clip(cols - start[:, None], 0, None)
        valid = (cols >= start[:, None])[..., None].astype(np.float64)

        x = T.take_rows(self.tok_emb, tok_idx) * tok_on
        if has_img.any():
            img = T.reshape(Tensor(feats) @ self.img_proj + self.img_bias, (B, 1, self.d))
            x = x + img * img_on
        x = x + T.reshape(self.cur_item_token, (1, 1, self.d)) * cur_on
        x = x + T.take_rows(self.pos_emb, pos_idx) * valid
        allowed = causal_mask(lengths, L, causal=False)
        for block in self.blocks:
            x = block(x, allowed)
        self.forward_count += B
        return self.ln_f(x[:, L - 1, :])


@dataclass
class ItemEmbedding:
    item_id: int
    vector: np.ndarray
    encoder_version: str


def encode_item(record: ItemRecord, encoder: ItemEncoder) -> ItemEmbedding:
    vec = encoder([record]).data[0].copy()
    return ItemEmbedding(record.item_id, vec, encoder.version())


class EmbeddingCache:
    """(item_id, encoder_version) -> vector; readers share, writers are exclusive."""

    def __init__(self):
        self._store: dict[tuple[int, str], np.ndarray] = {}
        self._lock = threading.Lock()

    def get(self, item_id: int, version: str):
        return self._store.get((item_id, version))

    def put_many(self, version: str, ids, vectors) -> None:
        with self._lock:
            for i, v in zip(ids, vectors):
                self._store[(int(i), version)] = v

    def drop_other_versions(self, version: str) -> None:
        with self._lock:
            self._store = {k: v for k, v in self._store.items() if k[1] == version}

    def __len__(self) -> int:
        return len(self._store)


def batch_encode(records: list[ItemRecord], encoder: ItemEncoder, cache: EmbeddingCache | None = None,
                 chunk: int = 256) -> np.ndarray:
    """[len(records), d] embeddings, reusing cached vectors for the current encoder version."""
    version = encoder.version()
    out = np.empty((len(records), encoder.d))
    todo = []
    for row, r in enumerate(records):
        hit = cache.get(r.item_id, version) if cache is not None else None
        if hit is None:
            todo.append(row)
        else:
            out[row] = hit
    for lo in range(0, len(todo), chunk):
        rows = todo[lo:lo + chunk]
        vecs = encoder([records[i] for i in rows]).data
        out[rows] = vecs
        if cache is not None:
            cache.put_many(version, [records[i].item_id for i in rows], vecs.copy())
    return out


def encode_catalog(items: list[ItemRecord], encoder: ItemEncoder, cache: EmbeddingCache | None = None) -> np.ndarray:
    return batch_encode(items, encoder, cache)


def pretrain_alignment(records: list[ItemRecord], encoder: ItemEncoder, tau: float = 0.07, steps: int = 100,
                       batch_size: int = 64, lr: float = 1e-3, seed: int = 0, clip: float = 1.0,
                       state: AdamState | None = None) -> list[float]:
    """Contrastive text-view vs image-view training of the encoder (in place).

    Each step draws ``batch_size`` distinct items, embeds them text-only and
    image-only, and minimises the symmetric InfoNCE between the two views.
    Returns the per-step loss.
    """
    if batch_size < 2:
        raise ConfigError("alignment pretraining needs a batch of at least 2 items (in-batch negatives)")
    ids = [r.item_id for r in records]
    if len(set(ids)) != len(ids):
        raise ConfigError("alignment batch repeats an item; each item must appear once")
    missing = [r.item_id for r in records if not r.has_image][:5]
    if missing:
        raise ConfigError(f"alignment pretraining needs image features; missing for items {missing}")
    if len(records) < 2:
        raise ConfigError("alignment pretraining needs at least 2 items")
    batch_size = min(batch_size, len(records))
    rng = np.random.default_rng(seed)
    state = state or AdamState()
    params = encoder.parameters()
    losses = []
    for _ in range(steps):
        pick = rng.choice(len(records), size=batch_size, replace=False)
        batch = [records[i] for i in pick]
        encoder.zero_grad()
        loss = align_loss(encoder(batch, (TEXT,)), encoder(batch, (IMAGE,)), tau)
        loss.backward()
        clip_grad_norm(params, clip)
        adam_update(params, state, lr)
        losses.append(loss.item())
    return losses
