import os

import numpy as np
import pytest

from tfcal import model as M
from tfcal import stylecal as SC
from tfcal import tensor as T


def spec7():
    return M.default_spec(7, (3, 32, 32))


def test_same_seed_same_parameters():
    a, b = M.build(spec7(), 3), M.build(spec7(), 3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.value.tobytes() == pb.value.tobytes()
    c = M.build(spec7(), 4)
    assert a.parameters()[0].value.tobytes() != c.parameters()[0].value.tobytes()


def test_logit_shape_and_parameter_count():
    m = M.build(spec7(), 0)
    out = m.forward(np.zeros((5, 3, 32, 32), dtype=np.float32))
    assert out.shape == (5, 7)
    # conv: cin*cout*9 + cout per block; dense: 64 * 2 * 2 * 7 + 7
    convs = [(3, 16), (16, 32), (32, 32), (32, 64)]
    closed = sum(ci * co * 9 + co for ci, co in convs) + 64 * 4 * 7 + 7
    assert closed == 34631
    assert m.num_parameters() == closed


def test_spec_validation():
    with pytest.raises(ValueError):
        M.default_spec(4, (1, 32, 32), insertion_after_block=5)
    with pytest.raises(ValueError):
        M.default_spec(4, (1, 32, 32), insertion_after_block=0)
    with pytest.raises(T.ShapeError):
        M.default_spec(4, (1, 30, 30))
    assert M.default_spec().legal_insertions() == [1, 2, 3, 4]


def test_param_groups_split_head():
    m = M.build(M.default_spec(), 0)
    g = m.param_groups()
    assert len(g["head"]) == 2 and len(g["extractor"]) == 8
    assert g["head"][0].shape == (256, 4)


def test_tau_zero_matches_plain_network():
    m = M.build(M.default_spec(), 1)
    x = np.random.default_rng(0).normal(size=(4, 1, 32, 32)).astype(np.float32)
    plain = m.forward(x).value
    ctx = SC.StyleContext(tau=0.0, record=False)
    styled = m.forward(x, "test", ctx).value
    assert np.max(np.abs(plain - styled)) < 1e-4


def test_zero_head_gives_zero_logits():
    m = M.build(M.default_spec(), 2)
    dense = m.blocks[-1][1]
    dense.weight.value[:] = 0
    dense.bias.value[:] = 0
    x = np.random.default_rng(1).normal(size=(2, 1, 32, 32))
    coins = SC.StyleCoins(aaf=True, delta=0.0, perm=np.array([1, 0]))
    assert np.all(m.forward(x, "train", SC.StyleContext(coins=coins)).value == 0)


def _train_ctx(proto):
    coins = SC.StyleCoins(aaf=True, delta=0.3, perm=np.array([2, 0, 1]), cal=True)
    return SC.StyleContext(bank=SC.PrototypeBank(prototype=proto), coins=coins, record=False)


def test_frozen_coins_are_bitwise_reproducible():
    m = M.build(M.default_spec(), 3)
    x = np.random.default_rng(2).normal(size=(3, 1, 32, 32)).astype(np.float32)
    proto = np.abs(np.random.default_rng(3).normal(size=(1, 32, 8, 8))).astype(np.float32)
    proto = 0.5 * (proto + SC.mirror_bins(proto))
    a = m.forward(x, "train", _train_ctx(proto)).value
    b = m.forward(x, "train", _train_ctx(proto)).value
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_every_insertion_point_runs(k):
    m = M.build(M.default_spec(insertion_after_block=k), 0)
    x = np.random.default_rng(4).normal(size=(2, 1, 32, 32)).astype(np.float32)
    ctx = SC.StyleContext(coins=SC.StyleCoins(aaf=True, delta=0.5, perm=np.array([1, 0])))
    loss = T.cross_entropy(m.forward(x, "train", ctx), [0, 1])
    T.backward(loss)
    assert all(np.all(np.isfinite(p.grad)) for p in m.parameters())
    c = 16 if k == 1 else 32 if k < 4 else 64
    assert ctx.bank.bin_shape == (c, 32 >> k, 32 >> k)


def test_capture_sees_pre_and_post_features():
    m = M.build(M.default_spec(), 0)
    cap = {}
    m.forward(np.zeros((1, 1, 32, 32)), capture=cap)
    assert cap["pre"].shape == (1, 32, 8, 8)
    np.testing.assert_array_equal(cap["pre"], cap["post"])


def test_input_shape_checked():
    with pytest.raises(ValueError, match="input shape"):
        M.build(M.default_spec(), 0).forward(np.zeros((1, 3, 32, 32)))


def _checkpoint(proto=True):
    m = M.build(M.default_spec(), 5)
    p = np.abs(np.random.default_rng(6).normal(size=(1, 32, 8, 8))).astype(np.float32)
    p = 0.5 * (p + SC.mirror_bins(p))
    return M.ModelCheckpoint(m, p if proto else None, 11 if proto else None, {"seed": 5, "x": [1, 2]}, 5, 0.25, 0.5)


def test_checkpoint_roundtrip_bitwise(tmp_path):
    ck = _checkpoint()
    M.save_checkpoint(ck, tmp_path)
    back = M.load_checkpoint(tmp_path)
    for (na, pa), (nb, pb) in zip(ck.model.named_parameters(), back.model.named_parameters()):
        assert na == nb and pa.value.tobytes() == pb.value.tobytes()
    assert back.prototype.tobytes() == ck.prototype.tobytes()
    assert back.prototype_epoch == 11 and back.seed == 5
    assert back.input_mean == 0.25 and back.input_std == 0.5
    x = np.random.default_rng(7).normal(size=(3, 1, 32, 32)).astype(np.float32)
    for style in (None, 0.5):
        a = ck.model.forward(x, "test", None if style is None else ck.style_context(style)).value
        b = back.model.forward(x, "test", None if style is None else back.style_context(style)).value
        assert a.tobytes() == b.tobytes()


def test_checkpoint_manifest_contents(tmp_path):
    ck = _checkpoint()
    M.save_checkpoint(ck, tmp_path)
    man = M.read_manifest(tmp_path)
    assert man["config_digest"] == M.config_digest(ck.config)
    assert man["seed"] == "5"
    assert man["prototype_file"] == "prototype.tfc"
    assert "blocks" in man["spec"]
    assert os.path.exists(tmp_path / "params" / "block1.0.weight.tfc")


def test_checkpoint_without_prototype(tmp_path):
    M.save_checkpoint(_checkpoint(), tmp_path)
    os.remove(tmp_path / "prototype.tfc")
    back = M.load_checkpoint(tmp_path)
    assert back.prototype is None
    with pytest.raises(SC.UncalibratedModelError):
        back.model.forward(np.zeros((1, 1, 32, 32)), "test", back.style_context(0.5))


def test_checkpoint_digest_mismatch(tmp_path):
    M.save_checkpoint(_checkpoint(), tmp_path)
    path = tmp_path / "manifest.txt"
    text = path.read_text().replace('"seed": 5', '"seed": 6')
    path.write_text(text)
    with pytest.raises(ValueError, match="digest"):
        M.load_checkpoint(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest"):
        M.load_checkpoint(tmp_path)
