"""Item catalog records, the metadata JSONL format, and the hashing tokenizer."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from molar.errors import FormatError

_SPLIT = re.compile(r"[^0-9a-z]+")


@dataclass
class ItemRecord:
    item_id: int
    title: str
    attributes: dict[str, str] = field(default_factory=dict)
    image_features: np.ndarray | None = None
    text_tokens: list[int] | None = None

    @property
    def has_image(self) -> bool:
        return self.image_features is not None and self.image_features.size > 0

    def to_json(self) -> dict:
        obj = {"item_id": int(self.item_id), "title": self.title, "attributes": dict(self.attributes)}
        if self.has_image:
            obj["image_features"] = [float(v) for v in self.image_features]
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ItemRecord":
        try:
            item_id = int(obj["item_id"])
            title = str(obj.get("title", ""))
            attrs = obj.get("attributes") or {}
            if not isinstance(attrs, dict):
                raise TypeError("attributes must be an object")
            feats = obj.get("image_features")
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad item record {obj!r}: {exc}") from exc
        image = None
        if feats is not None:
            image = np.asarray(feats, dtype=np.float64)
            if image.ndim != 1 or not np.all(np.isfinite(image)):
                raise FormatError(f"item {item_id}: image_features must be a finite 1-d list")
        return cls(item_id, title, {str(k): str(v) for k, v in attrs.items()}, image)


def _token_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def words(title: str, attributes: dict[str, str] | None = None) -> list[str]:
    """Lowercased alphanumeric words of the title followed by each "key value" pair."""
    text = title + "".join(f" {k} {v}" for k, v in (attributes or {}).items())
    return [w for w in _SPLIT.split(text.lower()) if w]


def tokenize(title: str, attributes: dict[str, str] | None, vocab_size: int) -> list[int]:
    return [_token_hash(w) % vocab_size for w in words(title, attributes)]


def tokenize_records(records: list[ItemRecord], vocab_size: int) -> None:
    for r in records:
        r.text_tokens = tokenize(r.title, r.attributes, vocab_size)


def read_items_jsonl(path: str | Path) -> list[ItemRecord]:
    records, seen = [], set()
    dims = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            rec = ItemRecord.from_json(obj)
            if rec.item_id in seen:
                raise FormatError(f"{path}:{lineno}: duplicate item_id {rec.item_id}")
            seen.add(rec.item_id)
            if rec.has_image:
                dims.add(rec.image_features.size)
            records.append(rec)
    if len(dims) > 1:
        raise FormatError(f"{path}: image_features dimensions differ across items: {sorted(dims)}")
    return records


def write_items_jsonl(records: list[ItemRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
