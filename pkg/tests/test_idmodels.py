import numpy as np
import pytest

from molar.data import SyntheticSpec, synthetic_split
from molar.errors import ConfigError, DimensionError, FormatError
from molar.evaluation import RandomScorer, evaluate
from molar.idmodels import (build_id_model, id_score, id_user_embedding,
                            load_id_model, pretrain_id_model)
from molar.numcore import finite_diff_gradcheck
from molar.numcore import tensor as T

KINDS = ["fpmc", "gru4rec", "sasrec"]


def small(kind, seed=0, d=8, num_items=12, scale=0.3):
    model = build_id_model(kind, num_users=4, num_items=num_items, d=d, max_seq_len=5, seed=seed)
    rng = np.random.default_rng(seed + 50)
    for p in model.parameters():
        p.data = p.data + rng.normal(0, scale, size=p.shape)
    return model


@pytest.mark.parametrize("kind", KINDS)
def test_embedding_dimension(kind):
    model = small(kind)
    assert id_user_embedding(model, [1, 2, 3], user_id=1).shape == (8,)
    assert model.item_table().shape == (12, 8)


@pytest.mark.parametrize("kind", KINDS)
def test_unknown_items_rejected(kind):
    model = small(kind)
    with pytest.raises(ConfigError):
        id_user_embedding(model, [1, 12])
    with pytest.raises(ConfigError):
        id_user_embedding(model, [])
    with pytest.raises(ConfigError):
        id_score(model, np.zeros(8), 12)


def test_sasrec_appending_changes_embedding():
    model = small("sasrec")
    assert not np.allclose(id_user_embedding(model, [1, 2]), id_user_embedding(model, [1, 2, 3]))


def test_sasrec_causal_prefix():
    model = small("sasrec")
    h, _ = model.hidden_states([[4, 5, 6, 7]])
    h2, _ = model.hidden_states([[4, 5, 9, 1]])
    np.testing.assert_array_equal(h.data[0, :2], h2.data[0, :2])
    assert not np.allclose(h.data[0, 2:], h2.data[0, 2:])


@pytest.mark.parametrize("kind", ["gru4rec", "sasrec"])
def test_batch_matches_single(kind):
    model = small(kind)
    seqs = [[1], [2, 3, 4, 5, 6], [7, 0, 9]]
    batch = model.user_embedding([0, 1, 2], seqs).data
    for row, s in enumerate(seqs):
        np.testing.assert_allclose(batch[row], id_user_embedding(model, s, row), rtol=1e-10, atol=1e-12)


def test_fpmc_zero_transitions():
    model = small("fpmc")
    model.V_LI.data[:] = 0.0
    assert np.array_equal(id_user_embedding(model, [3, 4], user_id=2), model.V_U.data[2])
    with pytest.raises(ConfigError):
        model.user_embedding([9], [[1]])


@pytest.mark.parametrize("kind", KINDS)
def test_score_contract(kind):
    model = small(kind)
    assert all(id_score(model, np.zeros(8), i) == 0.0 for i in range(12))
    e = id_user_embedding(model, [1, 2])
    assert id_score(model, 2 * e, 5) == 2 * id_score(model, e, 5)
    scan = [id_score(model, e, i) for i in range(12)]
    assert int(np.argmax(model.score([0], [[1, 2]])[0])) == int(np.argmax(scan))
    with pytest.raises(DimensionError):
        id_score(model, np.zeros(7), 0)


@pytest.mark.parametrize("kind", KINDS)
def test_gradients(kind):
    model = small(kind)
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 12))
    seqs = [[1, 2, 3], [4], [5, 6]]

    def forward():
        e = model.user_embedding([0, 1, 2], seqs)
        return T.sum((e @ T.transpose(model.item_table(), (1, 0))) * w)

    report = finite_diff_gradcheck(forward, model.parameters(), tolerance=1e-3)
    assert report.passed, report.worst()


@pytest.mark.parametrize("kind", KINDS)
def test_checkpoint_round_trip(kind, tmp_path):
    model = small(kind)
    model.save(tmp_path / "m.bin")
    blob = (tmp_path / "m.bin").read_bytes()
    assert blob[:7] == b"MOLIDM1"
    back = load_id_model(tmp_path / "m.bin")
    assert type(back) is type(model) and back.hparams == model.hparams
    back.save(tmp_path / "n.bin")
    assert (tmp_path / "n.bin").read_bytes() == blob
    (tmp_path / "cut.bin").write_bytes(blob[:-3])
    with pytest.raises(FormatError):
        load_id_model(tmp_path / "cut.bin")


@pytest.fixture(scope="module")
def tiny_split():
    return synthetic_split(SyntheticSpec(num_users=120, num_items=40, sequence_length=8, seed=3), 6)


def test_zero_lr_leaves_params_unchanged(tiny_split):
    model = build_id_model("sasrec", 120, 40, 8, 6, seed=0)
    before = model.state_dict()
    pretrain_id_model(model, tiny_split, epochs=1, batch_size=32, lr=0.0, seed=0)
    for name, value in model.state_dict().items():
        assert np.array_equal(value, before[name]), name


def test_training_deterministic(tiny_split):
    runs = []
    for _ in range(2):
        model = build_id_model("gru4rec", 120, 40, 8, 6, seed=1)
        losses, report = pretrain_id_model(model, tiny_split, epochs=1, batch_size=32, lr=1e-2, seed=1)
        runs.append((losses[-1], report.ndcg[10]))
    assert runs[0] == runs[1]


def test_unknown_kind():
    with pytest.raises(ConfigError):
        build_id_model("duorec", 1, 2, 4, 3)


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sasrec_beats_random(seed):
    split = synthetic_split(SyntheticSpec(num_users=1000, num_items=300, id_signal_weight=1.0, seed=seed), 10)
    model = build_id_model("sasrec", 1000, 300, 32, 10, seed=seed)
    pretrain_id_model(model, split, epochs=3, batch_size=128, lr=1e-3, seed=seed)
    trained = evaluate(model, split).ndcg[10]
    random = np.mean([evaluate(RandomScorer(300, s), split).ndcg[10] for s in range(5)])
    assert trained >= 3 * random
