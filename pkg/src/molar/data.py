"""Interaction ingestion, leave-one-out splits, negative sampling, synthetic data."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from molar.errors import ConfigError, FormatError
from molar.itemrep.records import ItemRecord

log = logging.getLogger(__name__)

MAX_MALFORMED_FRACTION = 0.01
DEFAULT_MAX_SEQ_LEN = 10
DEFAULT_MIN_INTERACTIONS = 3
NEGATIVE_TRIES = 100


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    timestamp: int


class InteractionLog(list):
    """List of interactions that also remembers how many rows were rejected."""

    def __init__(self, rows=(), malformed: int = 0, total_rows: int = 0):
        super().__init__(rows)
        self.malformed = malformed
        self.total_rows = total_rows


def _parse_row(row: list[str]) -> Interaction | None:
    if len(row) not in (3, 4):
        return None
    try:
        user, item = int(row[0]), int(row[1])
        ts = int(float(row[2]))
    except ValueError:
        return None
    if user < 0 or item < 0:
        return None
    return Interaction(user, item, ts)


def load_interactions(path: str | Path) -> InteractionLog:
    """Read a user,item,timestamp[,rating] CSV or TSV; a header row is auto-detected."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read interactions file {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        log.warning("interactions file %s is empty", path)
        return InteractionLog()
    delim = "\t" if "\t" in lines[0] else ","
    rows = list(csv.reader(lines, delimiter=delim))
    if _parse_row([c.strip() for c in rows[0]]) is None and not rows[0][0].strip().lstrip("-").isdigit():
        rows = rows[1:]
    out, bad = [], 0
    for row in rows:
        parsed = _parse_row([c.strip() for c in row])
        if parsed is None:
            bad += 1
        else:
            out.append(parsed)
    if bad:
        log.warning("%s: %d malformed row(s) skipped", path, bad)
    if rows and bad / len(rows) > MAX_MALFORMED_FRACTION:
        raise FormatError(f"{path}: {bad} of {len(rows)} rows are malformed (limit 1%)")
    return InteractionLog(out, malformed=bad, total_rows=len(rows))


def write_interactions(rows: list[Interaction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "item", "timestamp"])
        w.writerows(rows)


@dataclass
class Dataset:
    """Chronological per-user item sequences over a dense item catalog.

    ``sequences[u]`` lists dense item ids; ``items[i].item_id == i``.
    ``user_raw`` / ``item_raw`` map dense ids back to ids in the input files.
    """

    sequences: dict[int, list[int]]
    items: list[ItemRecord]
    user_raw: list[int] = field(default_factory=list)
    item_raw: list[int] = field(default_factory=list)
    dropped_users: int = 0
    dropped_interactions: int = 0

    @property
    def num_users(self) -> int:
        return len(self.sequences)

    @property
    def num_items(self) -> int:
        return len(self.items)

    @property
    def num_interactions(self) -> int:
        return sum(len(s) for s in self.sequences.values())


def sequences_by_user(interactions: list[Interaction]) -> dict[int, list[int]]:
    """Group by user, ordering by (timestamp, file order)."""
    grouped: dict[int, list[tuple[int, int, int]]] = {}
    for pos, it in enumerate(interactions):
        grouped.setdefault(it.user_id, []).append((it.timestamp, pos, it.item_id))
    return {u: [item for _, _, item in sorted(rows)] for u, rows in grouped.items()}


def build_dataset(interactions: list[Interaction], items: list[ItemRecord],
                  min_interactions: int = DEFAULT_MIN_INTERACTIONS) -> Dataset:
    """Remap raw ids to dense ones and drop users below ``min_interactions``.

    Interactions whose item is missing from the catalog are dropped and
    counted.  Dense item ids follow ascending raw id; dense user ids follow
    ascending raw id among kept users.
    """
    if min_interactions < 3:
        raise ConfigError("min_interactions must be at least 3 for a leave-one-out split")
    catalog = sorted(items, key=lambda r: r.item_id)
    item_dense = {r.item_id: i for i, r in enumerate(catalog)}
    kept_rows = [it for it in interactions if it.item_id in item_dense]
    dropped_interactions = len(interactions) - len(kept_rows)
    if dropped_interactions:
        log.warning("%d interaction(s) reference items missing from the catalog", dropped_interactions)
    seqs = sequences_by_user(kept_rows)
    kept_users = sorted(u for u, s in seqs.items() if len(s) >= min_interactions)
    dropped_users = len(seqs) - len(kept_users)
    dense_items = [ItemRecord(i, r.title, dict(r.attributes), r.image_features) for i, r in enumerate(catalog)]
    return Dataset(
        sequences={du: [item_dense[i] for i in seqs[u]] for du, u in enumerate(kept_users)},
        items=dense_items,
        user_raw=kept_users,
        item_raw=[r.item_id for r in catalog],
        dropped_users=dropped_users,
        dropped_interactions=dropped_interactions,
    )


@dataclass
class UserSplit:
    train: list[int]
    valid_input: list[int]
    valid_target: int
    test_input: list[int]
    test_target: int


@dataclass
class SplitDataset:
    users: dict[int, UserSplit]
    num_items: int
    max_seq_len: int
    dropped_users: int = 0
    dataset: Dataset | None = None

    @property
    def user_ids(self) -> list[int]:
        return sorted(self.users)

    def train_windows(self, user: int) -> list[tuple[list[int], int]]:
        """(input, target) pairs sliding over the training prefix; inputs truncated to max_seq_len."""
        train = self.users[user].train
        L = self.max_seq_len
        return [(train[max(0, t - L):t], train[t]) for t in range(1, len(train))]

    def inputs(self, which: str) -> tuple[list[int], list[list[int]], np.ndarray]:
        """User ids, input sequences and targets for 'valid' or 'test'."""
        if which not in ("valid", "test"):
            raise ValueError(f"unknown split part {which!r}")
        uids = self.user_ids
        seqs = [getattr(self.users[u], f"{which}_input") for u in uids]
        targets = np.array([getattr(self.users[u], f"{which}_target") for u in uids], dtype=np.int64)
        return uids, seqs, targets


def leave_one_out_split(dataset: Dataset, max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
                        min_interactions: int = DEFAULT_MIN_INTERACTIONS) -> SplitDataset:
    """Last item -> test target, second to last -> validation target, rest -> training."""
    if max_seq_len < 1:
        raise ConfigError("max_seq_len must be positive")
    users, dropped = {}, dataset.dropped_users
    for u, seq in dataset.sequences.items():
        if len(seq) < max(3, min_interactions):
            dropped += 1
            continue
        L = max_seq_len
        users[u] = UserSplit(
            train=list(seq[:-2]),
            valid_input=list(seq[:-2][-L:]),
            valid_target=seq[-2],
            test_input=list(seq[:-1][-L:]),
            test_target=seq[-1],
        )
    if dropped:
        log.info("leave-one-out split: %d user(s) dropped for having too few interactions", dropped)
    return SplitDataset(users, dataset.num_items, max_seq_len, dropped, dataset)


def split_manifest(split: SplitDataset, min_interactions: int) -> dict:
    return {
        "format": "molar-split-v1",
        "max_seq_len": split.max_seq_len,
        "min_interactions": min_interactions,
        "num_users": len(split.users),
        "num_items": split.num_items,
        "dropped_users": split.dropped_users,
        "users": {str(u): {"valid_target": s.valid_target, "test_target": s.test_target}
                  for u, s in sorted(split.users.items())},
    }


def write_json(obj, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


class NegativeSampler:
    """Uniform 1:1 negatives avoiding the positive and the user's in-window items."""

    def __init__(self, num_items: int, rng: np.random.Generator):
        if num_items < 2:
            raise ConfigError("negative sampling needs at least two items")
        self.num_items = num_items
        self.rng = rng

    def sample(self, positive: int, exclude=()) -> int:
        excluded = set(exclude)
        excluded.add(positive)
        for _ in range(NEGATIVE_TRIES):
            cand = int(self.rng.integers(self.num_items))
            if cand not in excluded:
                return cand
        cand = int(self.rng.integers(self.num_items - 1))
        return cand + 1 if cand >= positive else cand


def sample_negative(positive: int, exclude, num_items: int, rng: np.random.Generator) -> int:
    return NegativeSampler(num_items, rng).sample(positive, exclude)


class TrainBatch(NamedTuple):
    users: list[int]
    inputs: list[list[int]]
    targets: np.ndarray
    negatives: np.ndarray


def epoch_batches(split: SplitDataset, epoch: int, batch_size: int, seed: int,
                  windows_per_user: int | None = None) -> list[TrainBatch]:
    """Training batches for one epoch with distinct users inside every batch.

    Each user's sliding windows are shuffled (and optionally capped); the
    epoch then proceeds in rounds where every user with windows left
    contributes one, in shuffled user order.  A batch never spans two
    rounds, so the in-batch alignment negatives are always other users.
    Everything is a pure function of (seed, epoch), which makes resuming
    from a mid-epoch checkpoint exact.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    rng = np.random.default_rng([seed, epoch, 0])
    queues: dict[int, list[tuple[list[int], int]]] = {}
    for u in split.user_ids:
        windows = split.train_windows(u)
        if not windows:
            continue
        order = rng.permutation(len(windows))
        if windows_per_user is not None:
            order = order[:windows_per_user]
        queues[u] = [windows[i] for i in order]
    batches: list[TrainBatch] = []
    rounds = max((len(q) for q in queues.values()), default=0)
    for r in range(rounds):
        users = [u for u in queues if len(queues[u]) > r]
        users = [users[i] for i in rng.permutation(len(users))]
        for lo in range(0, len(users), batch_size):
            chunk = users[lo:lo + batch_size]
            inputs = [queues[u][r][0] for u in chunk]
            targets = np.array([queues[u][r][1] for u in chunk], dtype=np.int64)
            neg_rng = np.random.default_rng([seed, epoch, len(batches) + 1])
            sampler = NegativeSampler(split.num_items, neg_rng)
            negatives = np.array([sampler.sample(int(t), s) for t, s in zip(targets, inputs)], dtype=np.int64)
            batches.append(TrainBatch(chunk, inputs, targets, negatives))
    return batches


# ---------------------------------------------------------------------------
# synthetic data with separately controllable content and collaborative signal
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    num_users: int = 2000
    num_items: int = 500
    latent_dim: int = 8
    sequence_length: int = 12
    content_signal_weight: float = 0.5
    id_signal_weight: float = 0.5
    seed: int = 0
    image_dim: int = 32
    title_words: int = 3
    word_pool: int = 200
    style_pool: int = 12
    modality_split: bool = False
    sharpness: float = 2.0

    def validate(self) -> None:
        problems = []
        for name in ("num_users", "num_items", "latent_dim", "image_dim", "title_words", "word_pool", "style_pool"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if self.sequence_length < 3:
            problems.append("sequence_length must be at least 3")
        if self.sequence_length > self.num_items:
            problems.append("sequence_length cannot exceed num_items (sequences never repeat an item)")
        for name in ("content_signal_weight", "id_signal_weight", "sharpness"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be non-negative")
        if self.modality_split and self.latent_dim < 2:
            problems.append("modality_split needs latent_dim >= 2")
        if problems:
            raise ConfigError("invalid synthetic spec: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, obj: dict) -> "SyntheticSpec":
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(obj) - set(known))
        if unknown:
            raise ConfigError(f"unknown synthetic spec field(s): {', '.join(unknown)}")
        defaults = asdict(cls())
        values = {}
        for key, raw in obj.items():
            kind = type(defaults[key])
            try:
                if kind is bool:
                    values[key] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
                else:
                    values[key] = kind(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"synthetic spec field {key}: cannot parse {raw!r}") from exc
        spec = cls(**values)
        spec.validate()
        return spec


def _sample_words(rng, latent, prototypes, strength, count):
    logits = strength * latent @ prototypes.T / np.sqrt(latent.shape[1])
    picks = []
    for _ in range(count):
        g = rng.gumbel(size=logits.shape)
        picks.append(np.argmax(logits + g, axis=1))
    return np.stack(picks, axis=1)


def generate_synthetic_dataset(spec: SyntheticSpec) -> tuple[list[Interaction], list[ItemRecord], dict]:
    """Items with latent vectors, noisy content views of them, and Markov user trajectories.

    Each item has a content latent ``z`` and a collaborative latent ``c``.
    Image features are ``w_content * z P + noise``; title words and a style
    attribute are Gumbel-max draws whose logits scale with ``w_content``, so
    at weight 0 the content is independent of ``z``.  Trajectories move from
    item i to an unvisited j with logits
    ``sharpness * (z_j.(z_i + taste_u) + w_id * c_j.c_i) / sqrt(k)``, so ``c``
    is visible only through co-occurrence.  With ``modality_split`` text
    sees the first half of ``z`` and images the second half.

    Returns interactions, item records and the latents (for diagnostics).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, k = spec.num_items, spec.latent_dim
    z = rng.normal(size=(n, k))
    c = rng.normal(size=(n, k))
    taste = rng.normal(scale=0.5, size=(spec.num_users, k))

    z_text, z_img = z.copy(), z.copy()
    if spec.modality_split:
        half = k // 2
        z_text[:, half:] = 0.0
        z_img[:, :half] = 0.0
    proj = rng.normal(size=(k, spec.image_dim)) / np.sqrt(k)
    image = spec.content_signal_weight * 2.0 * (z_img @ proj) + rng.normal(size=(n, spec.image_dim))

    strength = 4.0 * spec.content_signal_weight
    word_proto = rng.normal(size=(spec.word_pool, k))
    style_proto = rng.normal(size=(spec.style_pool, k))
    title_idx = _sample_words(rng, z_text, word_proto, strength, spec.title_words)
    style_idx = _sample_words(rng, z_text, style_proto, strength, 1)[:, 0]
    items = [
        ItemRecord(i, " ".join(f"w{w}" for w in title_idx[i]), {"style": f"s{style_idx[i]}"}, image[i].copy())
        for i in range(n)
    ]

    scale = spec.sharpness / np.sqrt(k)
    rows: list[Interaction] = []
    for u in range(spec.num_users):
        visited = np.zeros(n, dtype=bool)
        logits = scale * (z @ taste[u])
        cur = _draw(rng, logits, visited)
        seq = [cur]
        visited[cur] = True
        for _ in range(spec.sequence_length - 1):
            logits = scale * (z @ (z[cur] + taste[u]) + spec.id_signal_weight * (c @ c[cur]))
            cur = _draw(rng, logits, visited)
            visited[cur] = True
            seq.append(cur)
        base = 1_000_000 + 10_000 * u
        rows.extend(Interaction(u, item, base + 60 * t) for t, item in enumerate(seq))
    return rows, items, {"content_latent": z, "collab_latent": c, "taste": taste}


def _draw(rng, logits, visited):
    logits = np.where(visited, -np.inf, logits)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    return int(rng.choice(p.size, p=p))


def synthetic_split(spec: SyntheticSpec, max_seq_len: int = DEFAULT_MAX_SEQ_LEN) -> SplitDataset:
    rows, items, _ = generate_synthetic_dataset(spec)
    return leave_one_out_split(build_dataset(rows, items), max_seq_len)
