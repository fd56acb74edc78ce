"""``molar`` command-line interface.

Exit codes: 0 success, 1 runtime or training failure, 2 usage or config error.
Every command writes ``manifest.json`` into its output directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

from molar.config import TrainingConfig, load_config, parse_config_text
from molar.data import (Interaction, SplitDataset, SyntheticSpec, build_dataset,
                        generate_synthetic_dataset, leave_one_out_split, load_interactions,
                        split_manifest, write_interactions, write_json)
from molar.errors import ConfigError, FormatError, MolarError, TrainingError
from molar.evaluation import MetricsReport, OracleScorer, RandomScorer, evaluate, parse_k_list
from molar.gradchecks import COMPONENTS, run_gradchecks
from molar.idmodels import MAGIC as IDM_MAGIC, load_id_model
from molar.itemrep.corpus import generate_it_corpus, generate_sa_corpus, generate_ub_corpus, write_corpus
from molar.itemrep.records import read_items_jsonl, write_items_jsonl
from molar.trainer import (CKPT_MAGIC, Stage2Trainer, build_encoder, load_encoder, run_stage1,
                           run_stage2, write_losses_csv)

log = logging.getLogger("molar")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
ABLATIONS = {
    "wo-cl": {"alpha": 0.0},
    "wo-it": {"stage1_it": False},
    "text-only": {"modality_mask": "text"},
    "image-only": {"modality_mask": "image"},
}


class UsageError(Exception):
    """Bad flags or missing inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def file_hash(path: str | Path) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def source_version() -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{version}+{rev}" if rev else version


class RunManifest:
    def __init__(self, command: str, argv: list[str]):
        self.data = {"command": command, "argv": argv, "config": {}, "inputs": {}, "outputs": [],
                     "version": source_version(), "start_time": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
        self._t0 = time.perf_counter()

    def add_input(self, path: str | Path) -> None:
        p = Path(path)
        files = sorted(f for f in p.iterdir() if f.is_file()) if p.is_dir() else [p]
        for f in files:
            self.data["inputs"][str(f)] = file_hash(f)

    def write(self, out_dir: Path, outputs: list[str]) -> None:
        self.data["outputs"] = sorted(outputs)
        self.data["end_time"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.data["wall_clock_seconds"] = round(time.perf_counter() - self._t0, 3)
        write_json(self.data, out_dir / "manifest.json")


# ---------------------------------------------------------------------------
# prepared-data directory
# ---------------------------------------------------------------------------

def _require_file(path: str | None, flag: str) -> Path:
    if not path:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: file not found: {path}")
    return p


def load_raw(interactions: Path, items: Path, min_interactions: int, max_seq_len: int) -> SplitDataset:
    rows = load_interactions(interactions)
    records = read_items_jsonl(items)
    return leave_one_out_split(build_dataset(rows, records, min_interactions), max_seq_len, min_interactions)


def load_prepared(data_dir: str | Path) -> SplitDataset:
    """Rebuild the split written by ``prepare`` (dense ids, already filtered)."""
    d = Path(data_dir)
    manifest = d / "split.json"
    if not manifest.is_file():
        raise UsageError(f"--data: {d} has no split.json; run `molar prepare` first")
    meta = json.loads(manifest.read_text())
    split = load_raw(d / "interactions.csv", d / "items.jsonl", meta["min_interactions"], meta["max_seq_len"])
    if len(split.users) != meta["num_users"] or split.num_items != meta["num_items"]:
        raise FormatError(f"{d}: prepared files do not match split.json")
    return split


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_prepare(args, manifest: RunManifest) -> list[str]:
    interactions = _require_file(args.interactions, "--interactions")
    items = _require_file(args.items, "--items")
    manifest.add_input(interactions)
    manifest.add_input(items)
    rows = load_interactions(interactions)
    records = read_items_jsonl(items)
    dataset = build_dataset(rows, records, args.min_interactions)
    split = leave_one_out_split(dataset, args.max_seq_len, args.min_interactions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # dense-id copies; timestamps become positions so chronological order survives exactly
    dense_rows = [Interaction(u, i, t) for u, seq in sorted(dataset.sequences.items()) for t, i in enumerate(seq)]
    write_interactions(dense_rows, out / "interactions.csv")
    write_items_jsonl(dataset.items, out / "items.jsonl")
    with open(out / "user_map.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dense_id", "raw_id"])
        w.writerows(enumerate(dataset.user_raw))
    with open(out / "item_map.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dense_id", "raw_id"])
        w.writerows(enumerate(dataset.item_raw))
    write_json(split_manifest(split, args.min_interactions), out / "split.json")
    manifest.data["config"] = {"min_interactions": args.min_interactions, "max_seq_len": args.max_seq_len}
    manifest.data["summary"] = {"users": len(split.users), "items": split.num_items,
                                "dropped_users": split.dropped_users,
                                "malformed_rows": rows.malformed,
                                "dropped_interactions": dataset.dropped_interactions}
    print(f"prepared {len(split.users)} users, {split.num_items} items "
          f"({split.dropped_users} users dropped, {rows.malformed} malformed rows)")
    return ["interactions.csv", "items.jsonl", "user_map.csv", "item_map.csv", "split.json"]


def cmd_gen_corpus(args, manifest: RunManifest) -> list[str]:
    split = load_prepared(args.data)
    manifest.add_input(args.data)
    items = split.dataset.items
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = ["it", "sa", "ub"] if args.task == "all" else [args.task]
    written = []
    for task in tasks:
        records = {"it": lambda: generate_it_corpus(items), "sa": lambda: generate_sa_corpus(items),
                   "ub": lambda: generate_ub_corpus(split, items)}[task]()
        name = f"corpus_{task}.jsonl"
        n = write_corpus(records, out / name)
        print(f"{name}: {n} records")
        written.append(name)
    manifest.data["config"] = {"task": args.task}
    return written


def resolve_config(args) -> TrainingConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.freeze_encoder:
        overrides["freeze_encoder"] = True
    if args.per_position_targets:
        overrides["per_position_targets"] = True
    for name in args.ablate or []:
        overrides.update(ABLATIONS[name])
    if args.config and not Path(args.config).is_file():
        raise UsageError(f"--config: file not found: {args.config}")
    return load_config(args.config, overrides).normalized()


def cmd_train(args, manifest: RunManifest) -> list[str]:
    cfg = resolve_config(args)
    split = load_prepared(args.data)
    manifest.add_input(args.data)
    manifest.data["config"] = cfg.to_dict()
    manifest.data["ablations"] = list(args.ablate or [])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text("".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items()))
    written = ["config.txt"]
    items = split.dataset.items
    encoder = None
    if args.stage in ("1", "all"):
        res = run_stage1(items, cfg, out)
        encoder = res.encoder
        written += ["ckpt.encoder", "stage1_losses.csv"]
        if res.losses:
            print(f"stage 1: {len(res.losses)} steps, loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}")
        else:
            print("stage 1: skipped (encoder left at initialization)")
    if args.stage in ("2", "all"):
        if args.resume:
            trainer = Stage2Trainer.load_checkpoint(args.resume, split, cfg)
            trainer.run()
            result = trainer.finish()
            trainer.save_checkpoint(out / "ckpt.stage2")
            trainer.dueg.save(out / "ckpt.dueg")
            if trainer.id_model is not None:
                trainer.id_model.save(out / "ckpt.idm")
            write_losses_csv(result.losses, out / "losses.csv")
        else:
            if encoder is None:
                enc_path = Path(args.encoder_ckpt) if args.encoder_ckpt else out / "ckpt.encoder"
                if enc_path.is_file():
                    encoder = load_encoder(enc_path)
                else:
                    log.warning("no stage-1 encoder checkpoint found; stage 2 starts from a fresh encoder")
                    encoder = build_encoder(cfg, items)
            id_model = load_id_model(args.id_ckpt) if args.id_ckpt else None
            trainer, result = run_stage2(split, cfg, encoder, id_model, out)
        written += ["ckpt.stage2", "ckpt.dueg", "losses.csv", "metrics.json", "metrics.csv",
                    "valid_metrics.json", "valid_metrics.csv"]
        if trainer.id_model is not None:
            written.append("ckpt.idm")
        result.test.write(out, "metrics")
        result.valid.write(out, "valid_metrics")
        manifest.data["history"] = result.history
        _print_report("test", result.test)
    return sorted(set(written))


def _print_report(label: str, report: MetricsReport) -> None:
    parts = [f"N@{k}={v:.4f}" for k, v in sorted(report.ndcg.items())]
    parts += [f"R@{k}={v:.4f}" for k, v in sorted(report.recall.items())]
    print(f"{label} ({report.n_users} users): " + " ".join(parts))


def load_scorer(ckpt: str, split: SplitDataset, seed: int):
    if ckpt == "oracle":
        return OracleScorer(split)
    if ckpt == "random":
        return RandomScorer(split.num_items, seed)
    path = Path(ckpt)
    if not path.is_file():
        raise UsageError(f"--ckpt: file not found: {ckpt}")
    head = path.read_bytes()[:8]
    if head.startswith(CKPT_MAGIC):
        trainer = Stage2Trainer.load_checkpoint(path, split)
        if trainer.best is not None:
            for g, m in trainer.modules().items():
                m.load_state_dict(trainer.best["state"][g])
        return trainer.model
    if head.startswith(IDM_MAGIC):
        return load_id_model(path)
    raise UsageError(f"--ckpt: {ckpt} is not a stage-2 or ID-model checkpoint")


def cmd_eval(args, manifest: RunManifest) -> list[str]:
    ks = parse_k_list(args.k)
    split = load_prepared(args.data)
    manifest.add_input(args.data)
    if Path(args.ckpt).is_file():
        manifest.add_input(args.ckpt)
    scorer = load_scorer(args.ckpt, split, args.seed or 0)
    key = f"{args.ckpt}|{args.which}|{ks}" + ("|filtered" if args.filter_history else "")
    config_hash = hashlib.blake2b(key.encode(), digest_size=8).hexdigest()
    report = evaluate(scorer, split, ks, args.which, config_hash, filter_history=args.filter_history)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out, "metrics")
    manifest.data["config"] = {"k": ks, "which": args.which, "ckpt": args.ckpt,
                               "filter_history": args.filter_history}
    _print_report(args.which, report)
    return ["metrics.json", "metrics.csv"]


def cmd_gradcheck(args, manifest: RunManifest) -> list[str]:
    results = run_gradchecks(args.component, args.seed or 0, args.corrupt)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    manifest.data["config"] = {"component": args.component, "corrupt": args.corrupt}
    manifest.data["results"] = {f"{r.component}/{r.name}": r.report.max_error for r in results}
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    if failed:
        raise TrainingError(f"{len(failed)} gradient check(s) failed")
    return []


def cmd_synth(args, manifest: RunManifest) -> list[str]:
    raw = {}
    if args.spec:
        spec_path = _require_file(args.spec, "--spec")
        manifest.add_input(spec_path)
        raw = parse_config_text(spec_path.read_text(), str(spec_path))
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = SyntheticSpec.from_dict(raw)
    rows, items, _ = generate_synthetic_dataset(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(rows, out / "interactions.csv")
    write_items_jsonl(items, out / "items.jsonl")
    manifest.data["config"] = asdict(spec)
    print(f"wrote {len(rows)} interactions over {len(items)} items for {spec.num_users} users")
    return ["interactions.csv", "items.jsonl"]


def cmd_convert_ml100k(args, manifest: RunManifest) -> list[str]:
    from molar.movielens import convert_ml100k
    src = Path(args.src)
    if not (src / "u.data").is_file() or not (src / "u.item").is_file():
        raise UsageError(f"--src: {src} must contain u.data and u.item")
    manifest.add_input(src / "u.data")
    manifest.add_input(src / "u.item")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_rows, n_items = convert_ml100k(src, out)
    print(f"converted {n_rows} ratings over {n_items} movies")
    return ["interactions.csv", "items.jsonl"]


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="molar", description="Multimodal sequential recommendation with "
                                "post-hoc ID/content user-embedding alignment.")
    p.add_argument("--threads", type=int, default=None, help="cap numeric worker threads (env MOLAR_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="filter, remap and split raw interactions")
    s.add_argument("--interactions", required=True)
    s.add_argument("--items", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--min-interactions", type=int, default=3)
    s.add_argument("--max-seq-len", type=int, default=10)

    s = sub.add_parser("gen-corpus", help="write IT / SA / UB fine-tuning corpora")
    s.add_argument("--task", choices=["it", "sa", "ub", "all"], default="all")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="stage 1 and/or stage 2 training")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--stage", choices=["1", "2", "all"], default="all")
    s.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    s.add_argument("--seed", type=int)
    s.add_argument("--freeze-encoder", action="store_true")
    s.add_argument("--per-position-targets", action="store_true", help="supervise every prefix position")
    s.add_argument("--encoder-ckpt", help="stage-1 encoder for --stage 2 (default: OUT/ckpt.encoder)")
    s.add_argument("--id-ckpt", help="pretrained ID model (skips ID pretraining)")
    s.add_argument("--resume", help="stage-2 checkpoint to continue from")

    s = sub.add_parser("eval", help="full-ranking evaluation of a checkpoint")
    s.add_argument("--ckpt", required=True, help="stage-2 or ID-model checkpoint, or 'oracle' / 'random'")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", default="10,20,50")
    s.add_argument("--which", choices=["valid", "test"], default="test")
    s.add_argument("--filter-history", action="store_true", help="exclude already-seen items from the ranking")
    s.add_argument("--seed", type=int)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--component", choices=("all",) + COMPONENTS, default="all")
    s.add_argument("--corrupt", type=float, default=0.0, help="offset added to analytic gradients (negative control)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default=None)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", help="key = value file of synthetic-spec fields")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)

    s = sub.add_parser("convert-ml100k", help="convert MovieLens-100K u.data/u.item to the standard inputs")
    s.add_argument("--src", required=True)
    s.add_argument("--out", required=True)
    return p


COMMANDS = {"prepare": cmd_prepare, "gen-corpus": cmd_gen_corpus, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "synth": cmd_synth, "convert-ml100k": cmd_convert_ml100k}


def _thread_limit(args):
    n = args.threads if args.threads is not None else os.environ.get("MOLAR_THREADS")
    if n is None:
        return nullcontext()
    try:
        n = int(n)
    except ValueError:
        raise UsageError(f"thread count must be an integer, got {n!r}") from None
    if n < 1:
        raise UsageError("thread count must be positive")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(n)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(args.command, argv)
    try:
        with _thread_limit(args):
            outputs = COMMANDS[args.command](args, manifest)
    except (UsageError, ConfigError) as exc:
        print(f"molar {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"molar {args.command}: failed: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
        outputs = []
    except (MolarError, OSError, ValueError) as exc:
        print(f"molar {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    else:
        code = EXIT_OK
    out = getattr(args, "out", None)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        manifest.write(Path(out), outputs + ["manifest.json"])
    return code


if __name__ == "__main__":
    sys.exit(main())
