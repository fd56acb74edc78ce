"""Two-stage training.

Stage 1 aligns the item encoder's text and image views.  Stage 2 trains the
user-sequence model (and, unless frozen, the encoder) with point-wise BCE
against one sampled negative per target, plus ``alpha`` times the
bidirectional contrastive loss between content-based and ID-based user
embeddings of the same batch.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from molar.config import TrainingConfig
from molar.data import NegativeSampler, SplitDataset, TrainBatch, epoch_batches
from molar.dueg import Dueg
from molar.errors import ConfigError, FormatError, TrainingError, ZeroNormError
from molar.evaluation import MetricsReport, evaluate
from molar.idmodels import ID_MODELS, IdModel, build_id_model, id_bce, pretrain_id_model
from molar.itemrep.encoder import ItemEncoder, pretrain_alignment
from molar.itemrep.records import ItemRecord
from molar.numcore import tensor as T
from molar.numcore.nn import Module
from molar.numcore.optim import AdamState, LrSchedule, adam_update, clip_grad_norm, lr_schedule
from molar.numcore.tensor import Tensor
from molar.numcore.tensorfile import load_tensors, save_tensors
from molar.objectives import align_loss, bce_from_scores

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MOLCKPT1"
ENCODER_MAGIC = b"MOLENC1"
LOSS_COLUMNS = ("step", "lr", "bce", "align", "total", "grad_norm")
ZERO_NORM_EPS = 1e-6


# ---------------------------------------------------------------------------
# scorer over the content side
# ---------------------------------------------------------------------------

class MolarModel:
    """Scores every catalog item by dot product with the content user embedding."""

    kind = "molar"

    def __init__(self, encoder: ItemEncoder, dueg: Dueg, items: list[ItemRecord]):
        self.encoder, self.dueg, self.items = encoder, dueg, items
        self._catalog: tuple[str, np.ndarray] | None = None

    def catalog_embeddings(self) -> np.ndarray:
        version = self.encoder.version()
        if self._catalog is None or self._catalog[0] != version:
            table = np.concatenate([self.encoder(self.items[lo:lo + 512]).data
                                    for lo in range(0, len(self.items), 512)])
            self._catalog = (version, table)
        return self._catalog[1]

    def user_embeddings(self, sequences) -> np.ndarray:
        return self.dueg(self.catalog_embeddings(), [s[-self.dueg.max_seq_len:] for s in sequences]).data

    def score(self, user_ids, sequences, which=None) -> np.ndarray:
        return self.user_embeddings(sequences) @ self.catalog_embeddings().T


def image_dim_of(items: list[ItemRecord], default: int = 32) -> int:
    dims = {r.image_features.shape[0] for r in items if r.has_image}
    if len(dims) > 1:
        raise ConfigError(f"items carry image features of different sizes {sorted(dims)}")
    return dims.pop() if dims else default


def build_encoder(config: TrainingConfig, items: list[ItemRecord]) -> ItemEncoder:
    return ItemEncoder(vocab_size=config.vocab_size, d=config.d, image_dim=image_dim_of(items),
                       max_tokens=config.max_tokens, n_layers=config.n_layers, n_heads=config.n_heads,
                       seed=config.seed, modality_mask=config.modality_mask)


def save_encoder(encoder: ItemEncoder, path: str | Path) -> None:
    meta = {"kind": "encoder", "hparams": encoder.hparams, "modality_mask": list(encoder.modality_mask)}
    save_tensors(path, ENCODER_MAGIC, meta, [(n, p.data) for n, p in encoder.named_parameters()], dtype="f8")


def load_encoder(path: str | Path) -> ItemEncoder:
    meta, tensors = load_tensors(path, ENCODER_MAGIC)
    encoder = ItemEncoder(**meta["hparams"], modality_mask=meta["modality_mask"])
    encoder.load_state_dict(tensors)
    return encoder


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

@dataclass
class Stage1Result:
    encoder: ItemEncoder
    losses: list[float]


def run_stage1(items: list[ItemRecord], config: TrainingConfig, out_dir: str | Path | None = None,
               encoder: ItemEncoder | None = None) -> Stage1Result:
    """Image/text view alignment of the encoder; a no-op when ``stage1_it`` is off."""
    config = config.normalized()
    encoder = encoder or build_encoder(config, items)
    losses: list[float] = []
    if config.stage1_it and config.stage1_steps > 0:
        if "image" not in encoder.modality_mask or "text" not in encoder.modality_mask:
            log.info("stage 1 skipped: alignment needs both modalities, mask is %s", encoder.modality_mask)
        else:
            records = [r for r in items if r.has_image]
            if len(records) < 2:
                raise ConfigError("stage 1 needs at least two items with image features (or stage1_it = false)")
            if len(records) < len(items):
                log.info("stage 1: %d item(s) without image features left out", len(items) - len(records))
            losses = pretrain_alignment(records, encoder, tau=config.tau, steps=config.stage1_steps,
                                        batch_size=config.stage1_batch_size, lr=config.stage1_lr,
                                        seed=config.seed, clip=config.grad_clip)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_encoder(encoder, out / "ckpt.encoder")
        with open(out / "stage1_losses.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            every = config.stage1_log_every
            for lo in range(0, len(losses), every):
                w.writerow([lo + len(losses[lo:lo + every]), repr(float(np.mean(losses[lo:lo + every])))])
    return Stage1Result(encoder, losses)


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------

@dataclass
class StepLog:
    step: int
    lr: float
    bce: float
    align: float
    total: float
    grad_norm: float


@dataclass
class Stage2Result:
    test: MetricsReport
    valid: MetricsReport
    history: list[dict]
    losses: list[StepLog] = field(default_factory=list)


class Stage2Trainer:
    """Holds every piece of mutable training state so it can be checkpointed."""

    def __init__(self, split: SplitDataset, config: TrainingConfig, encoder: ItemEncoder,
                 id_model: IdModel | None = None, pretrain_id: bool = True):
        self.config = cfg = config.normalized()
        self.split = split
        self.items = split.dataset.items if split.dataset is not None else None
        if self.items is None or len(self.items) != split.num_items:
            raise ConfigError("stage 2 needs the item catalog attached to the split")
        if encoder.d != cfg.d:
            raise ConfigError(f"encoder dimension {encoder.d} differs from config d={cfg.d}")
        self.encoder = encoder
        self.dueg = Dueg(cfg.d, cfg.max_seq_len, cfg.n_layers, cfg.n_heads, seed=cfg.seed + 1)
        self.id_model = None
        if cfg.uses_id_model:
            if id_model is None:
                id_model = build_id_model(cfg.post_alignment_model, split.dataset.num_users,
                                          split.num_items, cfg.d, cfg.max_seq_len, cfg.seed + 2,
                                          cfg.n_layers, cfg.n_heads)
                if pretrain_id and cfg.id_model_mode != "joint" and cfg.id_pretrain_epochs > 0:
                    # the window cap only thins stage 2; ID pretraining is cheap and sees every window
                    pretrain_id_model(id_model, split, cfg.id_pretrain_epochs, cfg.batch_size,
                                      cfg.id_pretrain_lr, cfg.seed, cfg.grad_clip)
            if id_model.d != cfg.d:
                raise ConfigError(f"ID model dimension {id_model.d} differs from config d={cfg.d}")
            if id_model.kind != cfg.post_alignment_model:
                raise ConfigError(f"ID model is {id_model.kind}, config asks for {cfg.post_alignment_model}")
            self.id_model = id_model
        self.model = MolarModel(self.encoder, self.dueg, self.items)
        self.opt = {"encoder": AdamState(), "dueg": AdamState(), "id": AdamState()}
        self.epoch = 0
        self.batch_index = 0
        self.step = 0
        self.batches_per_epoch = len(self._batches(0))
        total = max(1, cfg.max_epochs * self.batches_per_epoch)
        self.schedule = LrSchedule(cfg.max_lr, min(int(cfg.warmup_fraction * total), total - 1), total)
        self.history: list[dict] = []
        self.best: dict | None = None
        self.losses: list[StepLog] = []
        self._frozen_table: np.ndarray | None = None

    # -- pieces -------------------------------------------------------------

    def _batches(self, epoch: int) -> list[TrainBatch]:
        cfg = self.config
        return epoch_batches(self.split, epoch, cfg.batch_size, cfg.seed, cfg.windows_per_user or None)

    def modules(self) -> dict[str, Module]:
        out: dict[str, Module] = {"encoder": self.encoder, "dueg": self.dueg}
        if self.id_model is not None:
            out["id"] = self.id_model
        return out

    def trainable(self) -> dict[str, list]:
        cfg = self.config
        groups = {"dueg": self.dueg.parameters()}
        if not cfg.freeze_encoder:
            groups["encoder"] = self.encoder.parameters()
        if self.id_model is not None and cfg.id_model_mode != "frozen":
            groups["id"] = self.id_model.parameters()
        return groups

    def _item_table(self, batch: TrainBatch, extra=()):
        """Item embeddings for the batch and a global->row index mapping."""
        if self.config.freeze_encoder:
            if self._frozen_table is None:
                self._frozen_table = self.model.catalog_embeddings()
            return Tensor(self._frozen_table), (lambda ids: np.asarray(ids, dtype=np.int64))
        ids = np.unique(np.concatenate([np.concatenate([np.asarray(s) for s in batch.inputs]),
                                        batch.targets, batch.negatives, *extra]).astype(np.int64))
        table = self.encoder([self.items[i] for i in ids])
        return table, (lambda g: np.searchsorted(ids, np.asarray(g, dtype=np.int64)))

    def _prefix_targets(self, batch: TrainBatch, epoch: int, index: int):
        """Item positions that predict the following input item, with one negative each.

        Returns (batch row, offset back from the user token, next item, negative).
        """
        cfg = self.config
        sampler = NegativeSampler(self.split.num_items, np.random.default_rng([cfg.seed, epoch, index, 11]))
        rows, back, nxt, negs = [], [], [], []
        for b, (seq, target) in enumerate(zip(batch.inputs, batch.targets)):
            n = len(seq)
            for j in range(n - 1):
                rows.append(b)
                back.append(n - j)  # item j sits n - j slots before the user token
                nxt.append(seq[j + 1])
                negs.append(sampler.sample(seq[j + 1], list(seq) + [int(target)]))
        return tuple(np.asarray(v, dtype=np.int64) for v in (rows, back, nxt, negs))

    def losses_for(self, batch: TrainBatch, epoch: int, index: int) -> tuple[Tensor, Tensor, Tensor | None]:
        cfg = self.config
        prefix = self._prefix_targets(batch, epoch, index) if cfg.per_position_targets else None
        table, local = self._item_table(batch, prefix[2:] if prefix else ())
        seqs = [list(local(s)) for s in batch.inputs]
        if prefix is None:
            e_con = self.dueg(table, seqs)
        else:
            hidden = self.dueg.hidden_states(table, seqs)
            e_con = self.dueg.ln_f(hidden[:, hidden.shape[1] - 1, :])
        pos = T.sum(e_con * T.take_rows(table, local(batch.targets)), axis=-1)
        neg = T.sum(e_con * T.take_rows(table, local(batch.negatives)), axis=-1)
        if prefix is not None and len(prefix[0]):
            rows, back, nxt, negs = prefix
            h = self.dueg.ln_f(hidden[rows, hidden.shape[1] - 1 - back, :])
            pos = T.concat([pos, T.sum(h * T.take_rows(table, local(nxt)), axis=-1)])
            neg = T.concat([neg, T.sum(h * T.take_rows(table, local(negs)), axis=-1)])
        bce = bce_from_scores(pos, neg)
        total, align = bce, None
        if self.id_model is not None and len(batch.users) >= 2:
            e_id = self.id_model.user_embedding(batch.users, batch.inputs)
            if cfg.id_model_mode == "frozen":
                e_id = Tensor(e_id.data)
            rng = np.random.default_rng([cfg.seed, epoch, index, 7])
            k = cfg.align_k if cfg.align_k and cfg.align_k < len(batch.users) else None
            try:
                align = align_loss(e_id, e_con, cfg.tau, k, rng)
            except ZeroNormError:
                log.warning("zero-norm user embedding at step %d; using regularised norms", self.step)
                align = align_loss(e_id, e_con, cfg.tau, k, np.random.default_rng([cfg.seed, epoch, index, 7]),
                                   norm_eps=ZERO_NORM_EPS)
            total = total + cfg.alpha * align
        if self.id_model is not None and cfg.id_model_mode == "joint":
            total = total + id_bce(self.id_model, batch)
        return total, bce, align

    def train_step(self, batch: TrainBatch, epoch: int, index: int) -> StepLog:
        cfg = self.config
        groups = self.trainable()
        for m in self.modules().values():
            m.zero_grad()
        total, bce, align = self.losses_for(batch, epoch, index)
        if not np.isfinite(total.item()):
            raise TrainingError(f"non-finite loss at step {self.step} (epoch {epoch}, batch {index}): "
                                f"bce={bce.item()} align={align.item() if align is not None else 0.0}")
        total.backward()
        flat = [p for ps in groups.values() for p in ps]
        grad_norm = clip_grad_norm(flat, cfg.grad_clip)
        if cfg.grad_clip > 0 and grad_norm > cfg.grad_clip:
            log.debug("step %d: gradient norm %.3g clipped to %.3g", self.step, grad_norm, cfg.grad_clip)
        lr = lr_schedule(self.step, self.schedule)
        for name, params in groups.items():
            scale = cfg.id_lr_scale if name == "id" and cfg.id_model_mode == "tuned" else 1.0
            adam_update(params, self.opt[name], lr * scale)
        self.step += 1
        entry = StepLog(self.step, lr, bce.item(), align.item() if align is not None else 0.0,
                        total.item(), grad_norm)
        self.losses.append(entry)
        return entry

    def validate(self) -> float:
        report = evaluate(self.model, self.split, which="valid", k_list=(10,),
                          filter_history=self.config.filter_history)
        score = report.ndcg[10]
        self.history.append({"epoch": self.epoch, "step": self.step, "valid_ndcg@10": score})
        if self.best is None or score > self.best["valid_ndcg@10"]:
            self.best = {"valid_ndcg@10": score, "step": self.step,
                         "state": {g: m.state_dict() for g, m in self.modules().items()}}
        log.info("epoch %d step %d: valid N@10 %.5f", self.epoch, self.step, score)
        return score

    # -- loop ---------------------------------------------------------------

    def run(self, max_steps: int | None = None) -> bool:
        """Train until the epoch budget is spent (True) or ``max_steps`` more steps ran (False)."""
        cfg = self.config
        done = 0
        while self.epoch < cfg.max_epochs:
            batches = self._batches(self.epoch)
            while self.batch_index < len(batches):
                if max_steps is not None and done >= max_steps:
                    return False
                self.train_step(batches[self.batch_index], self.epoch, self.batch_index)
                self.batch_index += 1
                done += 1
                if cfg.eval_every and self.step % cfg.eval_every == 0:
                    self.validate()
            self.validate()
            self.epoch += 1
            self.batch_index = 0
        if self.best is None:
            self.validate()
        return True

    def finish(self, k_list=(10, 20, 50)) -> Stage2Result:
        """Restore the best validation snapshot and evaluate on the test targets."""
        if self.best is not None:
            for g, m in self.modules().items():
                m.load_state_dict(self.best["state"][g])
        h = self.config.fingerprint()
        fh = self.config.filter_history
        valid = evaluate(self.model, self.split, k_list, "valid", h, filter_history=fh)
        test = evaluate(self.model, self.split, k_list, "test", h, filter_history=fh)
        return Stage2Result(test, valid, list(self.history), list(self.losses))

    # -- persistence ----------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        tensors: list[tuple[str, np.ndarray]] = []
        for g, m in self.modules().items():
            tensors += [(f"param/{g}/{n}", p.data) for n, p in m.named_parameters()]
        adam_meta = {}
        for g, st in self.opt.items():
            adam_meta[g] = {"step": st.step, "t": dict(sorted(st.t.items()))}
            for n in sorted(st.m):
                tensors += [(f"adam/{g}/m/{n}", st.m[n]), (f"adam/{g}/v/{n}", st.v[n])]
        best_meta = None
        if self.best is not None:
            best_meta = {"valid_ndcg@10": self.best["valid_ndcg@10"], "step": self.best["step"]}
            for g, state in self.best["state"].items():
                tensors += [(f"best/{g}/{n}", v) for n, v in state.items()]
        rows = np.array([[getattr(e, c) for c in LOSS_COLUMNS] for e in self.losses], dtype=np.float64)
        tensors.append(("log/losses", rows.reshape(-1, len(LOSS_COLUMNS))))
        meta = {
            "format": 1,
            "config": self.config.to_dict(),
            "fingerprint": self.config.fingerprint(),
            "epoch": self.epoch, "batch_index": self.batch_index, "step": self.step,
            "history": self.history, "best": best_meta, "adam": adam_meta,
            "id_kind": self.id_model.kind if self.id_model is not None else None,
            "id_hparams": self.id_model.hparams if self.id_model is not None else None,
            "encoder_hparams": self.encoder.hparams,
            "modality_mask": list(self.encoder.modality_mask),
        }
        save_tensors(path, CKPT_MAGIC, meta, tensors, dtype="f8")

    @classmethod
    def load_checkpoint(cls, path: str | Path, split: SplitDataset,
                        config: TrainingConfig | None = None) -> "Stage2Trainer":
        meta, tensors = load_tensors(path, CKPT_MAGIC)
        if meta.get("format") != 1:
            raise FormatError(f"{path}: unsupported checkpoint version {meta.get('format')!r}")
        saved = TrainingConfig.from_dict(meta["config"])
        if config is not None:
            config = config.normalized()
            if config.d != saved.d:
                raise ConfigError(f"{path}: checkpoint has d={saved.d}, config asks for d={config.d}")
            if config.fingerprint() != saved.fingerprint():
                raise ConfigError(f"{path}: config differs from the one the checkpoint was trained with")
        encoder = ItemEncoder(**meta["encoder_hparams"], modality_mask=meta["modality_mask"])
        id_model = None
        if meta["id_kind"] is not None:
            id_model = ID_MODELS[meta["id_kind"]](**meta["id_hparams"])
        trainer = cls(split, saved, encoder, id_model, pretrain_id=False)

        def take(prefix):
            return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

        for g, m in trainer.modules().items():
            m.load_state_dict(take(f"param/{g}/"))
        for g, st in trainer.opt.items():
            st.step = meta["adam"][g]["step"]
            st.t = {k: int(v) for k, v in meta["adam"][g]["t"].items()}
            st.m = take(f"adam/{g}/m/")
            st.v = take(f"adam/{g}/v/")
        if meta["best"] is not None:
            trainer.best = {**meta["best"], "state": {g: take(f"best/{g}/") for g in trainer.modules()}}
        trainer.epoch, trainer.batch_index, trainer.step = meta["epoch"], meta["batch_index"], meta["step"]
        trainer.history = meta["history"]
        trainer.losses = [StepLog(int(r[0]), *map(float, r[1:])) for r in tensors["log/losses"]]
        return trainer


def write_losses_csv(losses: list[StepLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for e in losses:
            w.writerow([e.step] + [repr(float(getattr(e, c))) for c in LOSS_COLUMNS[1:]])


def run_stage2(split: SplitDataset, config: TrainingConfig, encoder: ItemEncoder,
               id_model: IdModel | None = None, out_dir: str | Path | None = None) -> tuple[Stage2Trainer, Stage2Result]:
    trainer = Stage2Trainer(split, config, encoder, id_model)
    trainer.run()
    result = trainer.finish()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trainer.save_checkpoint(out / "ckpt.stage2")
        trainer.dueg.save(out / "ckpt.dueg")
        if trainer.id_model is not None:
            trainer.id_model.save(out / "ckpt.idm")
        write_losses_csv(result.losses, out / "losses.csv")
    return trainer, result
