"""Randomized finite-difference checks for every trainable component."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from molar.dueg import Dueg, dueg_forward
from molar.errors import ConfigError
from molar.idmodels import build_id_model
from molar.itemrep.encoder import ItemEncoder
from molar.itemrep.records import ItemRecord
from molar.numcore import tensor as T
from molar.numcore.gradcheck import GradcheckReport, finite_diff_gradcheck
from molar.numcore.nn import AttentionBlock, GRUCell, Module, attention_block
from molar.numcore.tensor import Parameter
from molar.objectives import align_loss, bce_loss, total_loss

MODEL_TOL = 1e-3
LOSS_TOL = 1e-6
COMPONENTS = ("numcore", "encoder", "dueg", "idmodels", "objectives")


@dataclass
class CheckResult:
    component: str
    name: str
    report: GradcheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        worst, err = self.report.worst()
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.component}/{self.name}: max rel err {err:.2e} (tol {self.report.tolerance:g}, worst {worst})"


def _jitter(module: Module, rng: np.random.Generator, scale: float = 0.3) -> list[Parameter]:
    params = module.parameters()
    for p in params:
        p.data = p.data + rng.normal(0, scale, size=p.shape)
    return params


def _check(forward, params, tol, corrupt) -> GradcheckReport:
    return finite_diff_gradcheck(forward, params, tolerance=tol, corrupt=corrupt)


def _numcore(rng, corrupt):
    for causal in (True, False):
        block = AttentionBlock(8, 2, rng)
        params = _jitter(block, rng)
        x = Parameter(rng.normal(size=(4, 8)))
        x.name = "x"
        w = rng.normal(size=(4, 8))
        yield f"attention(causal={causal})", _check(
            lambda: T.sum(attention_block(x, block, causal) * w), params + [x], MODEL_TOL, corrupt)
    cell = GRUCell(5, 6, rng)
    params = _jitter(cell, rng)
    xs = Parameter(rng.normal(size=(3, 5)))
    xs.name = "x"
    h0 = Parameter(rng.normal(size=6))
    h0.name = "h0"
    w = rng.normal(size=6)

    def unroll():
        h = h0
        for t in range(3):
            h = cell(xs[t], h)
        return T.sum(h * w)

    yield "gru_cell", _check(unroll, params + [xs, h0], MODEL_TOL, corrupt)


def _encoder(rng, corrupt):
    enc = ItemEncoder(vocab_size=12, d=8, image_dim=4, max_tokens=6, seed=int(rng.integers(1 << 30)))
    params = _jitter(enc, rng)
    recs = [ItemRecord(0, "a b c", {}, rng.normal(size=4)), ItemRecord(1, "d", {"k": "v"}, None)]
    w = rng.normal(size=(2, 8))
    yield "item_encoder", _check(lambda: T.sum(enc(recs) * w), params, MODEL_TOL, corrupt)


def _dueg(rng, corrupt):
    model = Dueg(d=8, max_seq_len=4, seed=int(rng.integers(1 << 30)))
    params = _jitter(model, rng)
    emb = Parameter(rng.normal(size=(3, 8)))
    emb.name = "item_embeddings"
    w = rng.normal(size=8)
    yield "dueg", _check(lambda: T.sum(dueg_forward(emb, model) * w), params + [emb], MODEL_TOL, corrupt)


def _idmodels(rng, corrupt):
    for kind in ("fpmc", "gru4rec", "sasrec"):
        model = build_id_model(kind, 4, 12, 8, 5, seed=int(rng.integers(1 << 30)))
        params = _jitter(model, rng)
        w = rng.normal(size=(3, 12))
        seqs = [[1, 2, 3], [4], [5, 6]]

        def forward(model=model, w=w):
            e = model.user_embedding([0, 1, 2], seqs)
            return T.sum((e @ T.transpose(model.item_table(), (1, 0))) * w)

        yield kind, _check(forward, params, MODEL_TOL, corrupt)


def _objectives(rng, corrupt):
    p = Parameter(rng.uniform(0.05, 0.95, size=6))
    n = Parameter(rng.uniform(0.05, 0.95, size=6))
    p.name, n.name = "x_pos", "x_neg"
    yield "bce", _check(lambda: bce_loss(p, n), [p, n], LOSS_TOL, corrupt)
    a = Parameter(rng.normal(size=(5, 4)))
    c = Parameter(rng.normal(size=(5, 4)))
    a.name, c.name = "id_emb", "con_emb"
    yield "align", _check(lambda: align_loss(a, c, 0.5), [a, c], LOSS_TOL, corrupt)
    s_pos = Parameter(rng.normal(size=5))
    s_neg = Parameter(rng.normal(size=5))
    s_pos.name, s_neg.name = "pos_score", "neg_score"

    def combined():
        bce = bce_loss(T.sigmoid(s_pos), T.sigmoid(s_neg))
        return total_loss(bce, align_loss(a, c, 0.3), 0.7)

    yield "total", _check(combined, [s_pos, s_neg, a, c], LOSS_TOL, corrupt)


_SUITES: dict[str, Callable] = {"numcore": _numcore, "encoder": _encoder, "dueg": _dueg,
                                "idmodels": _idmodels, "objectives": _objectives}


def run_gradchecks(component: str = "all", seed: int = 0, corrupt: float = 0.0) -> list[CheckResult]:
    if component != "all" and component not in _SUITES:
        raise ConfigError(f"unknown component {component!r}; choose from {('all',) + COMPONENTS}")
    names = COMPONENTS if component == "all" else (component,)
    results = []
    for comp in names:
        rng = np.random.default_rng([seed, COMPONENTS.index(comp)])
        results += [CheckResult(comp, name, rep) for name, rep in _SUITES[comp](rng, corrupt)]
    return results
