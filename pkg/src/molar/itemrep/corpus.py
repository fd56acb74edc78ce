"""Fine-tuning corpora: image->text (IT), attributes->text (SA), history->next item (UB).

Records are plain dicts ``{"task", "input", "output"}`` written one per line.
Prompt wording is left to whoever consumes the files.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import TYPE_CHECKING

from molar.itemrep.records import ItemRecord

if TYPE_CHECKING:
    from molar.data import SplitDataset

log = logging.getLogger(__name__)

CORPUS_SCHEMA = {
    "type": "object",
    "required": ["task", "input", "output"],
    "additionalProperties": False,
    "properties": {
        "task": {"enum": ["IT", "SA", "UB"]},
        "input": {"type": "object"},
        "output": {"type": "object"},
    },
    "allOf": [
        {"if": {"properties": {"task": {"const": "IT"}}},
         "then": {"properties": {
             "input": {"required": ["item_id", "image_ref"], "additionalProperties": False,
                       "properties": {"item_id": {"type": "integer"}, "image_ref": {"type": "string"}}},
             "output": {"required": ["text"], "properties": {"text": {"type": "string"}}}}}},
        {"if": {"properties": {"task": {"const": "SA"}}},
         "then": {"properties": {
             "input": {"required": ["item_id", "title", "attributes"], "additionalProperties": False,
                       "properties": {"item_id": {"type": "integer"}, "title": {"type": "string"},
                                      "attributes": {"type": "object",
                                                     "additionalProperties": {"type": "string"}}}},
             "output": {"required": ["text"], "properties": {"text": {"type": "string"}}}}}},
        {"if": {"properties": {"task": {"const": "UB"}}},
         "then": {"properties": {
             "input": {"required": ["user_id", "history"], "additionalProperties": False,
                       "properties": {"user_id": {"type": "integer"},
                                      "history": {"type": "array", "minItems": 1, "items": {
                                          "type": "object", "required": ["item_id", "description"],
                                          "properties": {"item_id": {"type": "integer"},
                                                         "description": {"type": "string"},
                                                         "image_ref": {"type": "string"}}}}}},
             "output": {"required": ["item_id"], "properties": {"item_id": {"type": "integer"},
                                                                 "description": {"type": "string"}}}}}},
    ],
}


def image_ref(item_id: int) -> str:
    return f"item:{item_id}"


def describe(record: ItemRecord) -> str:
    """Fixed template: ``title is {title}. {key} is {value}. ...``"""
    parts = [f"title is {record.title}."]
    parts.extend(f"{k} is {v}." for k, v in record.attributes.items())
    return " ".join(parts)


def generate_it_corpus(records: list[ItemRecord]) -> list[dict]:
    out, skipped = [], 0
    for r in records:
        if not r.has_image:
            skipped += 1
            continue
        out.append({"task": "IT", "input": {"item_id": r.item_id, "image_ref": image_ref(r.item_id)},
                    "output": {"text": describe(r)}})
    if skipped:
        log.info("IT corpus: skipped %d item(s) without image features", skipped)
    return out


def generate_sa_corpus(records: list[ItemRecord]) -> list[dict]:
    return [{"task": "SA", "input": {"item_id": r.item_id, "title": r.title, "attributes": dict(r.attributes)},
             "output": {"text": describe(r)}} for r in records]


def generate_ub_corpus(split: "SplitDataset", records: list[ItemRecord]) -> list[dict]:
    """One record per user: the validation input window and its target.

    The test target never appears, so the corpus cannot leak evaluation data.
    """
    by_id = {r.item_id: r for r in records}
    out = []
    for u in split.user_ids:
        s = split.users[u]
        history = []
        for i in s.valid_input[-split.max_seq_len:]:
            entry = {"item_id": i, "description": describe(by_id[i])}
            if by_id[i].has_image:
                entry["image_ref"] = image_ref(i)
            history.append(entry)
        out.append({"task": "UB", "input": {"user_id": u, "history": history},
                    "output": {"item_id": s.valid_target, "description": describe(by_id[s.valid_target])}})
    return out


def write_corpus(records: list[dict], path: str | Path) -> int:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
    return len(records)
