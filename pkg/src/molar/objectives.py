"""Point-wise BCE, bidirectional InfoNCE alignment and their weighted sum.

The loss functions take and return tape tensors so they can sit at the top
of a training graph; scalar inputs are accepted for direct evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from molar.errors import ConfigError, DimensionError, ZeroNormError
from molar.numcore import tensor as T
from molar.numcore.tensor import Tensor, as_tensor

PROB_EPS = 1e-7
NORM_FLOOR = 1e-12


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise ZeroNormError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class BcePair:
    x_pos: Tensor
    x_neg: Tensor


def bce_loss(x_pos, x_neg=None) -> Tensor:
    """Mean over pairs of -(log x_pos + log(1 - x_neg)), probabilities clamped to [eps, 1-eps]."""
    if isinstance(x_pos, BcePair):
        x_pos, x_neg = x_pos.x_pos, x_pos.x_neg
    p = T.clip(as_tensor(x_pos), PROB_EPS, 1 - PROB_EPS)
    n = T.clip(as_tensor(x_neg), PROB_EPS, 1 - PROB_EPS)
    per_pair = T.log(p) + T.log(1.0 - n)
    return -T.mean(per_pair)


def bce_from_scores(pos_scores: Tensor, neg_scores: Tensor) -> Tensor:
    """BCE with probabilities taken as the logistic of raw scores."""
    return bce_loss(T.sigmoid(pos_scores), T.sigmoid(neg_scores))


def comparison_mask(n: int, k: int | None, rng: np.random.Generator | None = None) -> np.ndarray | None:
    """Rows select the positive (diagonal) plus k-1 other batch members.

    Returns None when every member is compared (k == n), the default.
    """
    if k is None or k == n:
        return None
    if not 2 <= k <= n:
        raise ConfigError(f"K={k} must lie in [2, batch size {n}]")
    if rng is None:
        raise ConfigError("sub-sampled comparison sets need an rng")
    keep = np.eye(n, dtype=bool)
    for i in range(n):
        others = np.delete(np.arange(n), i)
        keep[i, rng.choice(others, size=k - 1, replace=False)] = True
    return keep


def align_loss(id_emb, con_emb, tau: float, k: int | None = None,
               rng: np.random.Generator | None = None, norm_eps: float = 0.0) -> Tensor:
    """Bidirectional InfoNCE between matched rows of two [U, d] embedding sets.

    Row u of each set belongs to the same user; the other rows act as in-batch
    negatives.  The id->content and content->id terms are summed per user and
    averaged over users.  With ``norm_eps`` > 0 the cosine uses the regularised
    norm sqrt(|x|^2 + eps^2) instead of raising on zero vectors.
    """
    id_emb, con_emb = as_tensor(id_emb), as_tensor(con_emb)
    if id_emb.shape != con_emb.shape or id_emb.ndim != 2:
        raise DimensionError(f"align_loss: shapes {id_emb.shape} and {con_emb.shape} must be equal [U, d]")
    n = id_emb.shape[0]
    if n < 2:
        raise ConfigError("align_loss needs at least two users per batch")
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    if norm_eps == 0.0:
        for emb in (id_emb, con_emb):
            if np.any(np.linalg.norm(emb.data, axis=1) < NORM_FLOOR):
                raise ZeroNormError("align_loss received a zero-norm embedding")
    a = T.l2_normalize(id_emb, eps=norm_eps)
    c = T.l2_normalize(con_emb, eps=norm_eps)
    # broadcast product + fixed-order sum: swapping the two sets transposes sim bit-exactly
    d = a.shape[1]
    sim = T.sum(T.reshape(a, (n, 1, d)) * T.reshape(c, (1, n, d)), axis=-1) * (1.0 / tau)
    keep = comparison_mask(n, k, rng)
    sim_rows, sim_cols = sim, T.transpose(sim, (1, 0))
    if keep is not None:
        sim_rows = T.masked_fill(sim_rows, ~keep)
        sim_cols = T.masked_fill(sim_cols, ~keep)
    diag = (np.arange(n), np.arange(n))
    id_to_con = T.log_softmax(sim_rows, axis=1)[diag]
    con_to_id = T.log_softmax(sim_cols, axis=1)[diag]
    return -T.sum(id_to_con + con_to_id) * (1.0 / n)


def total_loss(bce, align, alpha: float):
    if alpha < 0:
        raise ConfigError("alpha must be non-negative")
    if alpha == 0:
        return bce
    return bce + alpha * align
