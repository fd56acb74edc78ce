import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from molar.dueg import Dueg, dueg_forward, predict_top_k, score_item
from molar.errors import ConfigError, DimensionError, FormatError
from molar.evaluation import rank_targets
from molar.numcore import Parameter, finite_diff_gradcheck
from molar.numcore import tensor as T


def random_dueg(d=8, max_seq_len=5, seed=0, scale=0.3):
    model = Dueg(d=d, max_seq_len=max_seq_len, n_layers=2, n_heads=2, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in model.parameters():
        p.data = p.data + rng.normal(0, scale, size=p.shape)
    return model


def test_output_shape_and_determinism():
    model = random_dueg()
    emb = np.random.default_rng(0).normal(size=(3, 8))
    a = dueg_forward(emb, model).data
    assert a.shape == (8,)
    assert np.array_equal(a, dueg_forward(emb, model).data)


def test_order_sensitive():
    model = random_dueg()
    emb = np.random.default_rng(1).normal(size=(3, 8))
    assert not np.allclose(dueg_forward(emb, model).data, dueg_forward(emb[::-1], model).data)


def test_single_item_depends_only_on_that_item():
    model = random_dueg()
    rng = np.random.default_rng(2)
    table = rng.normal(size=(6, 8))
    one = dueg_forward(table[4:5], model).data
    assert np.array_equal(model(table, [[4]]).data[0], one)


def test_batch_matches_single():
    model = random_dueg()
    rng = np.random.default_rng(3)
    table = rng.normal(size=(10, 8))
    seqs = [[1], [2, 3, 4, 5, 6], [7, 0, 9]]
    batch = model(table, seqs).data
    for row, s in enumerate(seqs):
        np.testing.assert_allclose(batch[row], dueg_forward(table[s], model).data, rtol=1e-10, atol=1e-12)


def test_every_position_matters():
    model = random_dueg()
    rng = np.random.default_rng(4)
    emb = rng.normal(size=(4, 8))
    base = dueg_forward(emb, model).data
    for t in range(4):
        moved = emb.copy()
        moved[t] += rng.normal(size=8) * 1e-3
        assert np.abs(dueg_forward(moved, model).data - base).max() > 1e-9


def test_sequence_length_errors():
    model = random_dueg(max_seq_len=3)
    with pytest.raises(ConfigError):
        dueg_forward(np.zeros((0, 8)), model)
    with pytest.raises(ConfigError):
        dueg_forward(np.ones((4, 8)), model)
    with pytest.raises(DimensionError):
        dueg_forward(np.ones((2, 4)), model)


def test_gradients_inputs_and_params():
    model = random_dueg(d=8, max_seq_len=4)
    rng = np.random.default_rng(5)
    emb = Parameter(rng.normal(size=(3, 8)))
    w = rng.normal(size=8)
    report = finite_diff_gradcheck(lambda: T.sum(dueg_forward(emb, model) * w),
                                   model.parameters() + [emb], tolerance=1e-3)
    assert report.passed, report.worst()
    assert report.max_error < 1e-5


def test_score_item():
    assert score_item([1.0, 0.0], [0.0, 1.0]) == 0.0
    rng = np.random.default_rng(6)
    u, e, f = rng.normal(size=(3, 5))
    assert score_item(u, e) + score_item(u, f) == pytest.approx(score_item(u, e + f), abs=1e-12)
    with pytest.raises(DimensionError):
        score_item(u, np.ones(4))


def test_top1_matches_scan():
    rng = np.random.default_rng(7)
    table = rng.normal(size=(100, 8))
    u = rng.normal(size=8)
    best = max(range(100), key=lambda i: score_item(u, table[i]))
    assert predict_top_k(u, table, 1)[0] == best


def test_top_k_ties_and_full_permutation():
    assert predict_top_k(np.zeros(4), np.ones((9, 4)), 5).tolist() == [0, 1, 2, 3, 4]
    rng = np.random.default_rng(8)
    perm = predict_top_k(rng.normal(size=4), rng.normal(size=(9, 4)), 9)
    assert sorted(perm.tolist()) == list(range(9))
    with pytest.raises(ConfigError):
        predict_top_k(np.zeros(4), np.ones((3, 4)), 4)


def test_top_k_agrees_with_sort_oracle():
    rng = np.random.default_rng(9)
    for _ in range(1000):
        scores = rng.integers(0, 6, size=12).astype(float)
        table = np.eye(12)
        got = predict_top_k(scores, table, 5).tolist()
        oracle = sorted(range(12), key=lambda i: (-scores[i], i))[:5]
        assert got == oracle
        ranks = rank_targets(scores[None, :].repeat(5, 0), np.array(oracle))
        assert ranks.tolist() == [1, 2, 3, 4, 5]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=20), st.integers(1, 20))
def test_top_k_is_sorted(scores, k):
    k = min(k, len(scores))
    s = np.array(scores)
    top = predict_top_k(s, np.eye(len(s)), k)
    assert np.all(np.diff(s[top]) <= 0)


def test_checkpoint_round_trip(tmp_path):
    model = random_dueg()
    model.save(tmp_path / "m.bin")
    back = Dueg.load(tmp_path / "m.bin")
    assert back.hparams == model.hparams
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data.astype(np.float32), p2.data)
    assert (tmp_path / "m.bin").read_bytes()[:8] == b"MOLDUEG1"
    back.save(tmp_path / "n.bin")
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "n.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"MOLIDM1\x00")
    with pytest.raises(FormatError):
        Dueg.load(tmp_path / "bad.bin")
