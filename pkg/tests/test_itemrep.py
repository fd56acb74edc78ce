import json
import math

import jsonschema
import numpy as np
import pytest

from molar.data import SyntheticSpec, build_dataset, generate_synthetic_dataset, leave_one_out_split
from molar.errors import ConfigError, DimensionError, FormatError
from molar.itemrep import (CORPUS_SCHEMA, EmbeddingCache, ItemEncoder, ItemRecord, batch_encode,
                           encode_item, generate_it_corpus, generate_sa_corpus, generate_ub_corpus,
                           load_embeddings, load_external_embeddings, pretrain_alignment,
                           read_items_jsonl, save_embeddings, tokenize, write_corpus,
                           write_items_jsonl)
from molar.itemrep.records import words
from molar.numcore import Tensor, finite_diff_gradcheck
from molar.numcore import tensor as T


def small_encoder(seed=0, **kw):
    kw.setdefault("d", 8)
    kw.setdefault("image_dim", 4)
    kw.setdefault("vocab_size", 50)
    return ItemEncoder(seed=seed, **kw)


def randomize(module, rng, scale=0.4):
    for p in module.parameters():
        p.data = rng.normal(0, scale, size=p.shape)


def record(i=0, title="red shirt", attrs=None, img=True, dim=4, seed=0):
    feats = np.random.default_rng(seed + i).normal(size=dim) if img else None
    return ItemRecord(i, title, attrs if attrs is not None else {"price": "10"}, feats)


class TestTokenize:
    def test_words_and_stability(self):
        assert words("Red Shirt", {"price": "10"}) == ["red", "shirt", "price", "10"]
        a = tokenize("Red Shirt", {"price": "10"}, 8192)
        assert len(a) == 4 and a == tokenize("Red Shirt", {"price": "10"}, 8192)
        assert all(0 <= t < 8192 for t in a)

    def test_known_hash_values(self):
        # frozen: the tokenizer must stay stable across releases
        assert tokenize("Red Shirt", {"price": "10"}, 8192) == tokenize("red  SHIRT", {"price": "10"}, 8192)
        assert tokenize("", {}, 10) == []

    def test_vocab_one(self):
        assert tokenize("a b c d", {"k": "v"}, 1) == [0] * 6


class TestEncoder:
    def test_output_dimension(self):
        enc = small_encoder()
        for r in [record(0), record(1, title="x", attrs={}), record(2, img=False)]:
            assert encode_item(r, enc).vector.shape == (8,)

    def test_deterministic(self):
        enc = small_encoder()
        assert np.array_equal(encode_item(record(), enc).vector, encode_item(record(), enc).vector)

    def test_modality_mask_changes_embedding(self):
        enc = small_encoder()
        r = record()
        both = enc([r], ("text", "image")).data
        text = enc([r], ("text",)).data
        assert not np.allclose(both, text)

    def test_empty_after_masking(self):
        enc = small_encoder(modality_mask=("image",))
        with pytest.raises(ConfigError):
            enc([record(img=False)])
        with pytest.raises(ConfigError):
            small_encoder(modality_mask=())

    def test_image_dim_checked(self):
        with pytest.raises(DimensionError):
            small_encoder()([record(dim=5)])

    def test_batch_matches_single(self):
        rng = np.random.default_rng(1)
        enc = small_encoder()
        randomize(enc, rng)
        recs = [record(0), record(1, title="a much longer item title here"), record(2, img=False)]
        batch = enc(recs).data
        for row, r in enumerate(recs):
            np.testing.assert_allclose(batch[row], enc([r]).data[0], rtol=1e-10, atol=1e-12)

    def test_token_order_irrelevant_without_positions(self):
        rng = np.random.default_rng(2)
        enc = small_encoder()
        randomize(enc, rng)
        enc.pos_emb.data[:] = 0.0
        a = enc([record(0, title="alpha beta gamma", attrs={})]).data
        b = enc([record(0, title="gamma alpha beta", attrs={})]).data
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
        enc.pos_emb.data = rng.normal(size=enc.pos_emb.shape)
        c = enc([record(0, title="alpha beta gamma", attrs={})]).data
        d = enc([record(0, title="gamma alpha beta", attrs={})]).data
        assert not np.allclose(c, d)

    def test_readout_depends_on_every_position(self):
        # finite-difference sensitivity of the readout to each of 3 token positions + image
        rng = np.random.default_rng(3)
        enc = small_encoder()
        randomize(enc, rng)
        r = record(0, title="one two three", attrs={})
        toks = tokenize(r.title, r.attributes, enc.vocab_size)
        base = enc([r]).data[0]
        assert len(set(toks)) == 3
        for t in toks:
            bump = rng.normal(size=enc.d) * 1e-4
            enc.tok_emb.data[t] += bump
            assert np.abs(enc([r]).data[0] - base).max() > 1e-9
            enc.tok_emb.data[t] -= bump
        r.image_features = r.image_features + rng.normal(size=4) * 1e-3
        assert np.abs(enc([r]).data[0] - base).max() > 1e-9

    def test_gradients(self):
        rng = np.random.default_rng(4)
        enc = small_encoder(vocab_size=12)
        randomize(enc, rng, 0.3)
        recs = [record(0, title="a b c", attrs={}), record(1, title="d", attrs={"k": "v"})]
        w = rng.normal(size=(2, 8))
        report = finite_diff_gradcheck(lambda: T.sum(enc(recs) * w), enc.parameters(), tolerance=1e-4)
        assert report.passed, report.worst()


class TestCache:
    def test_second_call_has_no_forwards(self):
        enc = small_encoder()
        recs = [record(i) for i in range(5)]
        cache = EmbeddingCache()
        first = batch_encode(recs, enc, cache)
        before = enc.forward_count
        second = batch_encode(recs, enc, cache)
        assert enc.forward_count == before
        assert np.array_equal(first, second)

    def test_param_update_invalidates(self):
        enc = small_encoder()
        recs = [record(i) for i in range(3)]
        cache = EmbeddingCache()
        v1 = enc.version()
        batch_encode(recs, enc, cache)
        enc.cur_item_token.data = enc.cur_item_token.data + 0.1
        assert enc.version() != v1
        before = enc.forward_count
        batch_encode(recs, enc, cache)
        assert enc.forward_count == before + 3

    def test_cached_equals_fresh(self):
        enc = small_encoder()
        recs = [record(i) for i in range(4)]
        cache = EmbeddingCache()
        batch_encode(recs, enc, cache)
        assert np.array_equal(batch_encode(recs, enc, cache), batch_encode(recs, enc, None))


class TestPretrainAlignment:
    def test_rejects_small_or_degenerate_batches(self):
        enc = small_encoder()
        recs = [record(i) for i in range(4)]
        with pytest.raises(ConfigError):
            pretrain_alignment(recs, enc, batch_size=1, steps=1)
        with pytest.raises(ConfigError):
            pretrain_alignment([recs[0], recs[0]], enc, batch_size=2, steps=1)
        with pytest.raises(ConfigError):
            pretrain_alignment([record(0), record(1, img=False)], enc, batch_size=2, steps=1)

    def test_initial_loss_near_uniform(self):
        _, items, _ = generate_synthetic_dataset(SyntheticSpec(num_users=2, num_items=64, seed=0))
        enc = ItemEncoder(d=32, image_dim=32, seed=0)
        loss0 = pretrain_alignment(items, enc, tau=0.07, steps=1, batch_size=64, lr=0.0)[0]
        assert abs(loss0 - 2 * math.log(64)) <= 0.2 * 2 * math.log(64)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_views_align_after_training(self, seed):
        _, items, _ = generate_synthetic_dataset(
            SyntheticSpec(num_users=2, num_items=200, content_signal_weight=0.5, seed=seed))
        enc = ItemEncoder(d=32, image_dim=32, seed=seed)
        pretrain_alignment(items, enc, tau=0.07, steps=120, batch_size=32, lr=1e-3, seed=seed)
        a, b = enc(items, ("text",)).data, enc(items, ("image",)).data
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        sim = a @ b.T
        same = np.mean(np.diag(sim))
        cross = (sim.sum() - np.trace(sim)) / (sim.size - len(sim))
        assert same - cross >= 0.2


class TestEmbeddingFile:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        emb = {i: rng.normal(size=16).astype(np.float32) for i in (3, 1, 7)}
        save_embeddings(emb, tmp_path / "e.bin")
        loaded, d = load_embeddings(tmp_path / "e.bin")
        assert d == 16 and sorted(loaded) == [1, 3, 7]
        for i, v in emb.items():
            assert loaded[i].tobytes() == v.tobytes()
        save_embeddings(loaded, tmp_path / "f.bin")
        assert (tmp_path / "e.bin").read_bytes() == (tmp_path / "f.bin").read_bytes()

    def test_layout(self, tmp_path):
        save_embeddings({5: np.array([1.0, -2.0], dtype=np.float32)}, tmp_path / "e.bin")
        blob = (tmp_path / "e.bin").read_bytes()
        assert blob[:7] == b"MOLEMB1"
        assert blob[7:15] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert blob[15:23] == (5).to_bytes(8, "little")
        assert np.frombuffer(blob[23:], "<f4").tolist() == [1.0, -2.0]

    def test_dimension_mismatch(self, tmp_path):
        save_embeddings({0: np.zeros(16)}, tmp_path / "e.bin")
        with pytest.raises(FormatError, match="16.*32"):
            load_external_embeddings(tmp_path / "e.bin", expected_d=32)

    def test_missing_catalog_items(self, tmp_path):
        save_embeddings({0: np.zeros(4), 2: np.ones(4)}, tmp_path / "e.bin")
        with pytest.raises(FormatError, match="1, 3"):
            load_external_embeddings(tmp_path / "e.bin", 4, catalog_ids=[0, 1, 2, 3])

    def test_duplicate_ids(self, tmp_path):
        save_embeddings({0: np.zeros(2), 1: np.ones(2)}, tmp_path / "e.bin")
        blob = bytearray((tmp_path / "e.bin").read_bytes())
        blob[15 + 16:15 + 24] = (0).to_bytes(8, "little")
        (tmp_path / "d.bin").write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="duplicate"):
            load_embeddings(tmp_path / "d.bin")


class TestCorpora:
    def test_sa_template(self):
        (rec,) = generate_sa_corpus([ItemRecord(0, "Shirt", {"price": "10", "color": "red"})])
        text = rec["output"]["text"]
        for value in ("Shirt", "10", "red"):
            assert text.count(value) == 1

    def test_it_skips_missing_images(self):
        recs = [record(0), record(1, img=False), record(2)]
        assert [r["input"]["item_id"] for r in generate_it_corpus(recs)] == [0, 2]

    def test_ub_history_truncated_and_schema(self, tmp_path):
        rows, items, _ = generate_synthetic_dataset(SyntheticSpec(num_users=6, num_items=30, sequence_length=9))
        split = leave_one_out_split(build_dataset(rows, items), max_seq_len=4)
        ub = generate_ub_corpus(split, split.dataset.items)
        assert len(ub) == 6
        assert all(len(r["input"]["history"]) == min(7, 4) for r in ub)
        for rec in ub + generate_it_corpus(split.dataset.items) + generate_sa_corpus(split.dataset.items):
            jsonschema.validate(rec, CORPUS_SCHEMA)

    def test_pure_and_line_count(self, tmp_path):
        recs = [record(i) for i in range(5)]
        n = write_corpus(generate_sa_corpus(recs), tmp_path / "a.jsonl")
        write_corpus(generate_sa_corpus(recs), tmp_path / "b.jsonl")
        assert n == 5 == len((tmp_path / "a.jsonl").read_text().splitlines())
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_schema_rejects_wrong_fields(self):
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate({"task": "IT", "input": {"item_id": 1}, "output": {"text": "x"}}, CORPUS_SCHEMA)


class TestItemsJsonl:
    def test_round_trip(self, tmp_path):
        recs = [record(0), record(1, img=False)]
        write_items_jsonl(recs, tmp_path / "items.jsonl")
        back = read_items_jsonl(tmp_path / "items.jsonl")
        assert back[0].title == "red shirt" and np.array_equal(back[0].image_features, recs[0].image_features)
        assert back[1].image_features is None

    def test_duplicate_and_bad_json(self, tmp_path):
        (tmp_path / "a.jsonl").write_text('{"item_id": 1, "title": "x"}\n{"item_id": 1, "title": "y"}\n')
        with pytest.raises(FormatError, match="duplicate"):
            read_items_jsonl(tmp_path / "a.jsonl")
        (tmp_path / "b.jsonl").write_text("{not json}\n")
        with pytest.raises(FormatError):
            read_items_jsonl(tmp_path / "b.jsonl")
