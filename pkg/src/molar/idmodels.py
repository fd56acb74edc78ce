"""ID-based sequential recommenders: FPMC, GRU4Rec and SASRec.

All three share one contract: ``user_embedding(users, sequences) -> [B, d]``
and ``item_table() -> [N, d]``, with scores given by their dot product.  That
is what lets any of them serve as the alignment partner for the content model.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from molar.data import SplitDataset, epoch_batches
from molar.errors import ConfigError, DimensionError, FormatError, TrainingError
from molar.evaluation import MetricsReport, evaluate
from molar.numcore import tensor as T
from molar.numcore.nn import AttentionBlock, GRUCell, LayerNorm, Module, causal_mask, normal
from molar.numcore.optim import AdamState, adam_update, clip_grad_norm
from molar.numcore.tensor import Parameter, Tensor
from molar.numcore.tensorfile import load_tensors, save_tensors
from molar.objectives import bce_from_scores

log = logging.getLogger(__name__)

MAGIC = b"MOLIDM1"
EMB_STD = 0.1


def _check_items(sequences, num_items: int) -> None:
    for s in sequences:
        if len(s) == 0:
            raise ConfigError("ID models need a non-empty item sequence")
        bad = [i for i in s if not 0 <= i < num_items]
        if bad:
            raise ConfigError(f"unknown item id(s) {bad[:5]} (catalog has {num_items} items)")


def _left_pad(sequences, L: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    idx = np.zeros((len(sequences), L), dtype=np.int64)
    on = np.zeros((len(sequences), L))
    for b, s in enumerate(sequences):
        idx[b, L - len(s):] = s
        on[b, L - len(s):] = 1.0
    return idx, on, lengths


class IdModel(Module):
    kind = ""

    def __init__(self, num_items: int, d: int):
        if num_items < 1 or d < 1:
            raise ConfigError("ID model sizes must be positive")
        self.num_items, self.d = num_items, d

    def user_embedding(self, users, sequences) -> Tensor:
        raise NotImplementedError

    def item_table(self) -> Tensor:
        raise NotImplementedError

    @property
    def hparams(self) -> dict:
        raise NotImplementedError

    def score(self, user_ids, sequences, which=None) -> np.ndarray:
        """Evaluation scorer: [U, N] dot products against every item."""
        return self.user_embedding(user_ids, sequences).data @ self.item_table().data.T

    def save(self, path: str | Path) -> None:
        save_tensors(path, MAGIC, {"kind": self.kind, "hparams": self.hparams},
                     [(n, p.data) for n, p in self.named_parameters()])


class FPMC(IdModel):
    """Matrix factorisation plus a first-order item-to-item transition term."""

    kind = "fpmc"

    def __init__(self, num_users: int, num_items: int, d: int = 64, seed: int = 0):
        super().__init__(num_items, d)
        rng = np.random.default_rng(seed)
        self.num_users = num_users
        self.V_U = Parameter(normal(rng, (num_users, d), EMB_STD))
        self.V_IU = Parameter(normal(rng, (num_items, d), EMB_STD))
        self.V_LI = Parameter(normal(rng, (num_items, d), EMB_STD))
        self.V_IL = Parameter(normal(rng, (num_items, d), EMB_STD))

    @property
    def hparams(self) -> dict:
        return {"num_users": self.num_users, "num_items": self.num_items, "d": self.d}

    def user_embedding(self, users, sequences) -> Tensor:
        _check_items(sequences, self.num_items)
        users = np.asarray(users, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.num_users):
            raise ConfigError(f"unknown user id(s) for an FPMC model of {self.num_users} users")
        last = np.array([s[-1] for s in sequences], dtype=np.int64)
        return T.take_rows(self.V_U, users) + T.take_rows(self.V_LI, last)

    def item_table(self) -> Tensor:
        return self.V_IU + self.V_IL


class GRU4Rec(IdModel):
    """GRU over item embeddings; the output head reuses the input embedding table."""

    kind = "gru4rec"

    def __init__(self, num_items: int, d: int = 64, seed: int = 0):
        super().__init__(num_items, d)
        rng = np.random.default_rng(seed)
        self.item_emb = Parameter(normal(rng, (num_items, d), EMB_STD))
        self.cell = GRUCell(d, d, rng)

    @property
    def hparams(self) -> dict:
        return {"num_items": self.num_items, "d": self.d}

    def user_embedding(self, users, sequences) -> Tensor:
        _check_items(sequences, self.num_items)
        L = max(len(s) for s in sequences)
        idx, on, _ = _left_pad(sequences, L)
        x = T.take_rows(self.item_emb, idx)
        h = Tensor(np.zeros((len(sequences), self.d)))
        for t in range(L):
            step = self.cell(x[:, t, :], h)
            m = on[:, t:t + 1]
            # padding steps carry the (zero) state through untouched
            h = step * m + h * (1.0 - m) if not m.all() else step
        return h

    def item_table(self) -> Tensor:
        return self.item_emb


class SASRec(IdModel):
    """Causal self-attention over item embeddings plus learned positions."""

    kind = "sasrec"

    def __init__(self, num_items: int, d: int = 64, max_seq_len: int = 10, n_layers: int = 2,
                 n_heads: int = 2, seed: int = 0):
        super().__init__(num_items, d)
        rng = np.random.default_rng(seed)
        self.max_seq_len = max_seq_len
        self.item_emb = Parameter(normal(rng, (num_items, d), EMB_STD))
        self.pos_emb = Parameter(normal(rng, (max_seq_len, d), EMB_STD))
        self.blocks = [AttentionBlock(d, n_heads, rng) for _ in range(n_layers)]
        self.ln_f = LayerNorm(d)

    @property
    def hparams(self) -> dict:
        return {"num_items": self.num_items, "d": self.d, "max_seq_len": self.max_seq_len,
                "n_layers": len(self.blocks), "n_heads": self.blocks[0].n_heads if self.blocks else 1}

    def hidden_states(self, sequences) -> tuple[Tensor, np.ndarray]:
        _check_items(sequences, self.num_items)
        L = max(len(s) for s in sequences)
        if L > self.max_seq_len:
            raise ConfigError(f"sequence of length {L} exceeds max_seq_len {self.max_seq_len}")
        idx, on, lengths = _left_pad(sequences, L)
        start = L - lengths
        pos = np.clip(np.arange(L)[None, :] - start[:, None], 0, None)
        x = (T.take_rows(self.item_emb, idx) + T.take_rows(self.pos_emb, pos)) * on[..., None]
        allowed = causal_mask(lengths, L, causal=True)
        for block in self.blocks:
            x = block(x, allowed)
        return self.ln_f(x), lengths

    def user_embedding(self, users, sequences) -> Tensor:
        h, _ = self.hidden_states(sequences)
        return h[:, h.shape[1] - 1, :]

    def item_table(self) -> Tensor:
        return self.item_emb


ID_MODELS = {"fpmc": FPMC, "gru4rec": GRU4Rec, "sasrec": SASRec}


def build_id_model(kind: str, num_users: int, num_items: int, d: int, max_seq_len: int, seed: int = 0,
                   n_layers: int = 2, n_heads: int = 2) -> IdModel:
    if kind == "fpmc":
        return FPMC(num_users, num_items, d, seed)
    if kind == "gru4rec":
        return GRU4Rec(num_items, d, seed)
    if kind == "sasrec":
        return SASRec(num_items, d, max_seq_len, n_layers, n_heads, seed)
    raise ConfigError(f"unknown ID model {kind!r}; choose from {sorted(ID_MODELS)}")


def load_id_model(path: str | Path) -> IdModel:
    meta, tensors = load_tensors(path, MAGIC)
    cls = ID_MODELS.get(meta.get("kind"))
    if cls is None:
        raise FormatError(f"{path}: unknown ID model kind {meta.get('kind')!r}")
    model = cls(**meta["hparams"])
    model.load_state_dict(tensors)
    return model


def id_user_embedding(model: IdModel, sequence, user_id: int = 0) -> np.ndarray:
    return model.user_embedding([user_id], [list(sequence)]).data[0].copy()


def id_score(model: IdModel, user_embedding, item_id: int) -> float:
    if not 0 <= item_id < model.num_items:
        raise ConfigError(f"unknown item id {item_id}")
    e = np.asarray(user_embedding, dtype=np.float64)
    if e.shape != (model.d,):
        raise DimensionError(f"user embedding has shape {e.shape}, model dimension is {model.d}")
    return float(e @ model.item_table().data[item_id])


def id_bce(model: IdModel, batch) -> Tensor:
    """Point-wise BCE of a training batch: target vs one sampled negative per user."""
    e = model.user_embedding(batch.users, batch.inputs)
    table = model.item_table()
    pos = T.sum(e * T.take_rows(table, batch.targets), axis=-1)
    neg = T.sum(e * T.take_rows(table, batch.negatives), axis=-1)
    return bce_from_scores(pos, neg)


def pretrain_id_model(model: IdModel, split: SplitDataset, epochs: int = 5, batch_size: int = 128,
                      lr: float = 1e-3, seed: int = 0, clip: float = 1.0,
                      windows_per_user: int | None = None) -> tuple[list[float], MetricsReport]:
    """Train with BCE and 1:1 negatives; returns per-step losses and validation metrics."""
    state = AdamState()
    params = model.parameters()
    losses = []
    for epoch in range(epochs):
        for batch in epoch_batches(split, epoch, batch_size, seed, windows_per_user):
            model.zero_grad()
            loss = id_bce(model, batch)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"{model.kind}: non-finite loss at epoch {epoch}, step {len(losses)}")
            loss.backward()
            clip_grad_norm(params, clip)
            adam_update(params, state, lr)
            losses.append(loss.item())
    return losses, evaluate(model, split, which="valid")
