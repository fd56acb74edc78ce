"""MovieLens-100K conversion to the standard interaction/item inputs.

Titles (with their release year) become item text.  The 19 binary genre
flags become the per-item feature vector that fills the image slot, since
the dataset ships no pictures.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from molar.data import Interaction, write_interactions
from molar.errors import FormatError
from molar.itemrep.records import ItemRecord, write_items_jsonl

GENRES = ("unknown", "action", "adventure", "animation", "children's", "comedy", "crime", "documentary",
          "drama", "fantasy", "film-noir", "horror", "musical", "mystery", "romance", "sci-fi", "thriller",
          "war", "western")


def read_ml100k_items(path: str | Path) -> list[ItemRecord]:
    records = []
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("|")
            if len(parts) != 5 + len(GENRES):
                raise FormatError(f"{path}:{lineno}: expected {5 + len(GENRES)} '|' fields, got {len(parts)}")
            flags = np.array([float(x) for x in parts[5:]])
            attrs = {"released": parts[2]} if parts[2] else {}
            records.append(ItemRecord(int(parts[0]), parts[1], attrs, flags))
    return records


def read_ml100k_ratings(path: str | Path) -> list[Interaction]:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if len(row) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields")
            rows.append(Interaction(int(row[0]), int(row[1]), int(row[3])))
    return rows


def convert_ml100k(src: str | Path, out: str | Path) -> tuple[int, int]:
    """Every rating counts as an implicit interaction; returns (#interactions, #items)."""
    src, out = Path(src), Path(out)
    rows = read_ml100k_ratings(src / "u.data")
    items = read_ml100k_items(src / "u.item")
    write_interactions(rows, out / "interactions.csv")
    write_items_jsonl(items, out / "items.jsonl")
    return len(rows), len(items)
