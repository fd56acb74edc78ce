"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from molar.errors import ConfigError
from molar.itemrep.encoder import parse_modality_mask

POST_ALIGNMENT_MODELS = ("none", "fpmc", "gru4rec", "sasrec")
ID_MODEL_MODES = ("frozen", "tuned", "joint")
NEGATIVE_POLICIES = ("uniform",)


@dataclass(frozen=True)
class TrainingConfig:
    # shared sizes
    d: int = 64
    max_seq_len: int = 10
    min_interactions: int = 3
    n_layers: int = 2
    n_heads: int = 2
    vocab_size: int = 8192
    max_tokens: int = 16
    # stage 2
    batch_size: int = 128
    max_epochs: int = 5
    max_lr: float = 1e-4
    warmup_fraction: float = 0.05
    alpha: float = 0.1
    tau: float = 0.07
    align_k: int = 0  # 0 = every other user in the batch
    negative_policy: str = "uniform"
    grad_clip: float = 1.0
    windows_per_user: int = 0  # 0 = all sliding windows every epoch
    eval_every: int = 0  # steps between validation passes; 0 = once per epoch
    per_position_targets: bool = False  # also train every prefix position on its next item
    filter_history: bool = False  # drop already-seen items from validation/test rankings
    # content side
    modality_mask: str = "image,text"
    freeze_encoder: bool = False
    # ID partner
    post_alignment_model: str = "sasrec"
    id_model_mode: str = "tuned"
    id_pretrain_epochs: int = 5
    id_pretrain_lr: float = 1e-3
    id_lr_scale: float = 0.1
    # stage 1
    stage1_it: bool = True
    stage1_steps: int = 200
    stage1_batch_size: int = 64
    stage1_lr: float = 1e-3
    stage1_log_every: int = 10
    seed: int = 0

    def validate(self) -> "TrainingConfig":
        problems = []
        for name in ("d", "max_seq_len", "n_layers", "n_heads", "vocab_size", "max_tokens", "batch_size",
                     "stage1_batch_size", "stage1_log_every"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        for name in ("max_epochs", "stage1_steps", "id_pretrain_epochs", "align_k", "windows_per_user",
                     "eval_every"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be non-negative")
        for name in ("max_lr", "stage1_lr", "id_pretrain_lr", "id_lr_scale", "grad_clip"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be non-negative")
        if self.min_interactions < 3:
            problems.append("min_interactions must be at least 3 (leave-one-out needs train, valid and test items)")
        if self.alpha < 0:
            problems.append("alpha must be non-negative")
        if self.tau <= 0:
            problems.append("tau must be positive")
        if self.align_k == 1:
            problems.append("align_k must be 0 (whole batch) or at least 2")
        if not 0 <= self.warmup_fraction < 1:
            problems.append("warmup_fraction must lie in [0, 1)")
        if self.n_heads >= 1 and self.d % self.n_heads:
            problems.append(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.post_alignment_model not in POST_ALIGNMENT_MODELS:
            problems.append(f"post_alignment_model must be one of {POST_ALIGNMENT_MODELS}")
        if self.id_model_mode not in ID_MODEL_MODES:
            problems.append(f"id_model_mode must be one of {ID_MODEL_MODES}")
        if self.negative_policy not in NEGATIVE_POLICIES:
            problems.append(f"negative_policy must be one of {NEGATIVE_POLICIES}")
        try:
            parse_modality_mask(self.modality_mask)
        except ConfigError as exc:
            problems.append(str(exc))
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))
        return self

    def normalized(self) -> "TrainingConfig":
        """Resolve implied settings: no alignment partner means no alignment term."""
        cfg = self.validate()
        if cfg.post_alignment_model == "none" and cfg.alpha != 0:
            cfg = replace(cfg, alpha=0.0)
        mask = ",".join(parse_modality_mask(cfg.modality_mask))
        if mask != cfg.modality_mask:
            cfg = replace(cfg, modality_mask=mask)
        return cfg

    @property
    def uses_id_model(self) -> bool:
        return self.post_alignment_model != "none" and self.alpha > 0

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.blake2b(blob, digest_size=8).hexdigest()

    def with_overrides(self, overrides: dict) -> "TrainingConfig":
        return replace(self, **_coerce(overrides))

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainingConfig":
        return cls().with_overrides(obj).validate()


def _coerce(raw: dict) -> dict:
    types = {f.name: type(getattr(TrainingConfig(), f.name)) for f in fields(TrainingConfig)}
    unknown = sorted(set(raw) - set(types))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    out = {}
    for key, value in raw.items():
        kind = types[key]
        try:
            if kind is bool:
                if isinstance(value, bool):
                    out[key] = value
                elif str(value).strip().lower() in ("1", "true", "yes", "on"):
                    out[key] = True
                elif str(value).strip().lower() in ("0", "false", "no", "off"):
                    out[key] = False
                else:
                    raise ValueError(value)
            elif kind is int:
                f = float(value)
                if f != int(f):
                    raise ValueError(value)
                out[key] = int(f)
            else:
                out[key] = kind(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key}: cannot parse {value!r} as {kind.__name__}") from exc
    return out


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment; repeated keys are an error."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path: str | Path | None, overrides: dict | None = None) -> TrainingConfig:
    raw = parse_config_text(Path(path).read_text(), str(path)) if path else {}
    raw.update(overrides or {})
    return TrainingConfig.from_dict(raw)


def dump_config(cfg: TrainingConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
