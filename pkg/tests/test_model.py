import numpy as np
import pytest

from eulerformer import tensor as T
from eulerformer.attention import EncodingKind, EncodingSpec
from eulerformer.checks import tiny_gradcheck_setup
from eulerformer.euler import ConfigurationError
from eulerformer.model import ModelConfig, SequenceEncoder, load_checkpoint, save_checkpoint, score_items

ALL_KINDS = [k.value for k in EncodingKind]


def small_cfg(kind="euler_adaptive", **kw):
    base = dict(vocab=20, max_len=8, d=16, heads=2, layers=2, ffn_dim=32, dropout=0.0, encoding=EncodingSpec(kind))
    base.update(kw)
    return ModelConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        small_cfg(d=12, heads=4)
    with pytest.raises(ValueError):
        small_cfg(vocab=1)
    cfg = small_cfg()
    assert cfg.d_head == 8
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_forward_shapes(kind):
    model = SequenceEncoder(small_cfg(kind), 0)
    out = model.forward(np.array([[0, 0, 3, 4, 5, 6, 7, 8], [1, 2, 3, 4, 5, 6, 7, 20]]))
    assert out.hidden.shape == (2, 8, 16)
    assert len(out.records) == 2
    assert out.records[0].weights.shape == (2, 2, 8, 8)
    assert model.logits(out.hidden).shape == (2, 8, 20)
    if EncodingSpec(kind).is_euler:
        assert out.records[0].theta_q.shape == (2, 2, 8, 4)


def test_single_item_attends_to_itself():
    model = SequenceEncoder(small_cfg(), 0)
    out = model.forward(np.array([[5]]))
    assert out.hidden.shape == (1, 1, 16)
    np.testing.assert_array_equal(out.records[0].weights.data, 1.0)


def test_out_of_range_ids_rejected():
    model = SequenceEncoder(small_cfg(), 0)
    with pytest.raises(ValueError):
        model.forward(np.array([[1, 21]]))
    with pytest.raises(ValueError):
        model.forward(np.array([[-1, 2]]))
    with pytest.raises(ConfigurationError):
        model.forward(np.ones((1, 9), dtype=int))


def test_identical_batches_bit_identical():
    ids = np.array([[0, 2, 4, 6, 8, 10, 12, 14]])
    a = SequenceEncoder(small_cfg(), 3).forward(ids).hidden.data
    b = SequenceEncoder(small_cfg(), 3).forward(ids).hidden.data
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_causality(kind):
    model = SequenceEncoder(small_cfg(kind), 1)
    for p in model.params.values():
        p.data = p.data + np.random.default_rng(0).normal(0, 0.3, size=p.shape)
    a = model.forward(np.array([[1, 2, 3, 4, 5, 6, 7, 8]])).hidden.data
    b = model.forward(np.array([[1, 2, 3, 4, 5, 9, 10, 11]])).hidden.data
    np.testing.assert_array_equal(a[:, :5], b[:, :5])
    assert not np.allclose(a[:, 5:], b[:, 5:])


def test_padding_keys_get_no_weight_and_rows_are_independent():
    model = SequenceEncoder(small_cfg("rope"), 2)
    row = np.array([[0, 0, 0, 4, 5, 6, 7, 8]])
    alone = model.forward(row)
    batched = model.forward(np.vstack([row, [[1, 2, 3, 4, 5, 6, 7, 8]]])).hidden.data
    np.testing.assert_array_equal(batched[:1], alone.hidden.data)
    np.testing.assert_array_equal(alone.records[1].weights.data[0, :, 3:, :3], 0.0)


def test_score_items_examples():
    rng = np.random.default_rng(0)
    emb = np.linalg.qr(rng.normal(size=(16, 16)))[0][:10]  # orthonormal rows for items 1..10
    hidden = emb[6] * 3.0
    scores = score_items(hidden, emb).data
    assert int(np.argmax(scores)) + 1 == 7
    np.testing.assert_array_equal(score_items(np.zeros(16), emb).data, 0.0)


def test_weight_tying():
    model = SequenceEncoder(small_cfg(), 0)
    table = model.item_table()
    np.testing.assert_array_equal(table.data, model.params["item_emb"].data[1:])


def test_parameter_sets_per_encoding():
    adaptive = SequenceEncoder(small_cfg("euler_adaptive"), 0)
    assert {"psi", "pos_emb", "layer0.delta", "layer0.phase_bias", "layer0.pcl_w"} <= set(adaptive.params)
    assert "layer0.freq" in adaptive.buffers
    vanilla = SequenceEncoder(small_cfg("euler_vanilla"), 0)
    assert "layer0.delta" in vanilla.buffers and "layer0.delta" not in vanilla.params
    rope = SequenceEncoder(small_cfg("rope"), 0)
    assert "pos_emb" not in rope.params and "psi" not in rope.params
    sin = SequenceEncoder(small_cfg("sinusoidal"), 0)
    assert "pos_emb" in sin.buffers


def test_vanilla_and_adaptive_agree_at_init():
    ids = np.array([[0, 3, 1, 4, 1, 5, 9, 2]])
    a = SequenceEncoder(small_cfg("euler_adaptive"), 4).forward(ids).hidden.data
    v = SequenceEncoder(small_cfg("euler_vanilla"), 4).forward(ids).hidden.data
    np.testing.assert_array_equal(a, v)


def test_end_to_end_gradients():
    model, loss_fn = tiny_gradcheck_setup(0)
    errors = T.gradcheck(loss_fn, model.params)
    assert {"layer0.delta", "layer0.phase_bias", "psi", "layer0.pcl_w"} <= set(errors)
    assert max(errors.values()) < 1e-4


def test_checkpoint_round_trip(tmp_path):
    model = SequenceEncoder(small_cfg("euler_adaptive"), 5)
    model.params["layer1.delta"].data += 0.25
    save_checkpoint(tmp_path / "m.npz", model, {"seed": 5})
    loaded, extra = load_checkpoint(tmp_path / "m.npz")
    assert extra == {"seed": 5}
    assert loaded.cfg == model.cfg
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(loaded.state_dict()[k], v)
    ids = np.array([[0, 1, 2, 3, 4, 5, 6, 7]])
    np.testing.assert_array_equal(loaded.forward(ids).hidden.data, model.forward(ids).hidden.data)


def test_load_state_dict_rejects_mismatch():
    model = SequenceEncoder(small_cfg(), 0)
    state = model.state_dict()
    state.pop("psi")
    with pytest.raises(ValueError):
        model.load_state_dict(state)
