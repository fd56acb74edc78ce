import logging
import math

import numpy as np
import pytest

from molar.data import (Interaction, NegativeSampler, SyntheticSpec, build_dataset,
                        generate_synthetic_dataset, leave_one_out_split, load_interactions,
                        sample_negative, split_manifest, write_interactions)
from molar.errors import ConfigError, FormatError
from molar.itemrep.records import ItemRecord


def catalog(ids):
    return [ItemRecord(i, f"item {i}") for i in ids]


class TestLoad:
    def test_basic_rows(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("1,10,100\n1,11,200\n")
        rows = load_interactions(p)
        assert rows == [Interaction(1, 10, 100), Interaction(1, 11, 200)]
        ds = build_dataset(rows + [Interaction(1, 12, 300)], catalog([10, 11, 12]))
        assert ds.sequences[0] == [0, 1, 2]

    def test_header_tsv_and_rating_column(self, tmp_path):
        p = tmp_path / "x.tsv"
        p.write_text("user\titem\ttimestamp\trating\n3\t7\t5\t4.5\n")
        assert load_interactions(p) == [Interaction(3, 7, 5)]

    def test_out_of_order_sorted_stably(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("1,10,300\n1,11,100\n1,12,100\n1,13,200\n")
        ds = build_dataset(load_interactions(p), catalog([10, 11, 12, 13]))
        # items 11 and 12 share a timestamp: file order wins
        assert [ds.item_raw[i] for i in ds.sequences[0]] == [11, 12, 13, 10]

    def test_empty_file_warns(self, tmp_path, caplog):
        p = tmp_path / "x.csv"
        p.write_text("")
        with caplog.at_level(logging.WARNING):
            assert load_interactions(p) == []
        assert "empty" in caplog.text

    def test_too_many_malformed(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("1,2,3\n" * 50 + "a,b\n")
        with pytest.raises(FormatError):
            load_interactions(p)

    def test_few_malformed_counted(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("1,2,3\n" * 200 + "1,x,3\n")
        rows = load_interactions(p)
        assert len(rows) == 200 and rows.malformed == 1

    def test_unreadable(self, tmp_path):
        with pytest.raises(OSError):
            load_interactions(tmp_path / "missing.csv")

    def test_dense_remap_stable(self):
        rows = [Interaction(9, 50, t) for t in range(3)] + [Interaction(4, 70, t) for t in range(3)]
        a = build_dataset(rows, catalog([70, 50, 60]))
        b = build_dataset(list(rows), catalog([60, 70, 50]))
        assert a.sequences == b.sequences and a.user_raw == [4, 9] and a.item_raw == [50, 60, 70]


class TestSplit:
    def make(self, seqs, max_seq_len=10):
        rows = [Interaction(u, it, t) for u, s in seqs.items() for t, it in enumerate(s)]
        ids = sorted({it for s in seqs.values() for it in s})
        return leave_one_out_split(build_dataset(rows, catalog(ids)), max_seq_len)

    def test_four_items(self):
        split = self.make({0: [0, 1, 2, 3]})
        s = split.users[0]
        assert s.train == [0, 1]
        assert split.train_windows(0) == [([0], 1)]
        assert (s.valid_input, s.valid_target) == ([0, 1], 2)
        assert (s.test_input, s.test_target) == ([0, 1, 2], 3)

    def test_truncation(self):
        split = self.make({0: [0, 1, 2, 3]}, max_seq_len=2)
        assert split.users[0].test_input == [1, 2]

    def test_short_user_dropped(self):
        rows = [Interaction(0, 0, 0), Interaction(0, 1, 1), Interaction(1, 0, 0), Interaction(1, 1, 1),
                Interaction(1, 2, 2)]
        ds = build_dataset(rows, catalog([0, 1, 2]))
        split = leave_one_out_split(ds)
        assert list(split.users) == [0] and split.dropped_users == 1

    def test_partition_property(self):
        rng = np.random.default_rng(0)
        seqs = {u: list(rng.permutation(30)[: rng.integers(3, 25)]) for u in range(40)}
        split = self.make(seqs, max_seq_len=4)
        for u, s in split.users.items():
            full = split.dataset.sequences[u]
            assert s.test_target == full[-1] and s.valid_target == full[-2]
            assert s.train == full[:-2]
            for inp, tgt in split.train_windows(u):
                assert len(inp) <= 4 and tgt in s.train

    def test_manifest_deterministic(self):
        seqs = {0: [0, 1, 2, 3], 1: [3, 2, 1]}
        assert split_manifest(self.make(seqs), 3) == split_manifest(self.make(seqs), 3)


class TestNegativeSampler:
    def test_two_items(self):
        rng = np.random.default_rng(0)
        assert all(sample_negative(0, (), 2, rng) == 1 for _ in range(50))

    def test_uniform_within_three_sigma(self):
        sampler = NegativeSampler(10, np.random.default_rng(1))
        draws = 100_000
        counts = np.bincount([sampler.sample(3, exclude=(5, 7)) for _ in range(draws)], minlength=10)
        assert counts[3] == counts[5] == counts[7] == 0
        p = 1 / 7
        sigma = math.sqrt(draws * p * (1 - p))
        for i in set(range(10)) - {3, 5, 7}:
            assert abs(counts[i] - draws * p) <= 3 * sigma

    def test_seeded_stream(self):
        a = NegativeSampler(50, np.random.default_rng(9))
        b = NegativeSampler(50, np.random.default_rng(9))
        assert [a.sample(1, (2,)) for _ in range(100)] == [b.sample(1, (2,)) for _ in range(100)]

    def test_fallback_when_everything_excluded(self):
        s = NegativeSampler(5, np.random.default_rng(0))
        assert all(s.sample(2, exclude=range(5)) != 2 for _ in range(20))

    def test_requires_two_items(self):
        with pytest.raises(ConfigError):
            NegativeSampler(1, np.random.default_rng(0))


class TestSynthetic:
    def test_shape(self):
        spec = SyntheticSpec(num_users=30, num_items=40, sequence_length=7, seed=1)
        rows, items, _ = generate_synthetic_dataset(spec)
        ds = build_dataset(rows, items)
        assert ds.num_users == 30 and all(len(s) == 7 for s in ds.sequences.values())
        assert len(items) == 40 and all(len(set(s)) == 7 for s in ds.sequences.values())

    def test_bit_identical(self, tmp_path):
        spec = SyntheticSpec(num_users=20, num_items=30, sequence_length=5, seed=4)
        r1, i1, _ = generate_synthetic_dataset(spec)
        r2, i2, _ = generate_synthetic_dataset(spec)
        assert r1 == r2
        assert all(np.array_equal(a.image_features, b.image_features) and a.title == b.title for a, b in zip(i1, i2))
        write_interactions(r1, tmp_path / "a.csv")
        write_interactions(r2, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_zero_content_weight_is_uninformative(self):
        spec = SyntheticSpec(num_users=5, num_items=4000, sequence_length=3, content_signal_weight=0.0, seed=2)
        _, items, lat = generate_synthetic_dataset(spec)
        img = np.stack([it.image_features for it in items])
        z = lat["content_latent"]
        corr = np.corrcoef(np.hstack([z, img]).T)[: z.shape[1], z.shape[1]:]
        assert np.abs(corr).max() < 0.08

    def test_positive_content_weight_is_informative(self):
        spec = SyntheticSpec(num_users=5, num_items=4000, sequence_length=3, content_signal_weight=0.5, seed=2)
        _, items, lat = generate_synthetic_dataset(spec)
        img = np.stack([it.image_features for it in items])
        z = lat["content_latent"]
        corr = np.corrcoef(np.hstack([z, img]).T)[: z.shape[1], z.shape[1]:]
        assert np.abs(corr).max() > 0.2

    def test_validation_names_fields(self):
        with pytest.raises(ConfigError, match="num_users"):
            SyntheticSpec.from_dict({"num_users": 0})
        with pytest.raises(ConfigError, match="bogus"):
            SyntheticSpec.from_dict({"bogus": 1})
        with pytest.raises(ConfigError, match="content_signal_weight"):
            SyntheticSpec.from_dict({"content_signal_weight": -1})
