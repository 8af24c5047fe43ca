import numpy as np
import pytest

from edgediag.layers import BuildError
from edgediag.models import (
    CModel,
    EModel,
    ModelConfig,
    build_model,
    freeze_pre_fe,
    share_pre_fe,
)
from edgediag.tensor import Tape, Tensor, tsum

CFG = ModelConfig()

SMALL = ModelConfig(
    input_shape=(2, 16, 16),
    num_classes=3,
    pre_fe_channels=(4,),
    c_stage_channels=(6, 8),
    e_stage_channels=(4, 6, 6, 8),
    feature_dim=8,
)


def test_build_determinism_bit_identical():
    a = build_model(CFG, "edge", seed=42)
    b = build_model(CFG, "edge", seed=42)
    for (na, ta), (nb, tb) in zip(a.store.items(), b.store.items()):
        assert na == nb
        assert ta.data.tobytes() == tb.data.tobytes()


def test_build_different_seeds_differ():
    a = build_model(CFG, "cloud", seed=1)
    b = build_model(CFG, "cloud", seed=2)
    assert a.store["pre_fe.conv1.weight"].data.tobytes() != b.store["pre_fe.conv1.weight"].data.tobytes()


def test_edge_logits_shape_contract():
    model = build_model(CFG, "edge", seed=0)
    model.set_training(False)
    x = Tensor(np.random.default_rng(0).standard_normal((3, 6, 32, 32)).astype(np.float32))
    out = model.forward_logits(x)
    assert out.shape == (3, CFG.num_classes)


def test_cloud_logits_shape_contract():
    model = build_model(CFG, "cloud", seed=0)
    model.set_training(False)
    x = Tensor(np.random.default_rng(1).standard_normal((2, 6, 32, 32)).astype(np.float32))
    assert model.forward_logits(x).shape == (2, CFG.num_classes)


def test_unknown_kind_rejected():
    with pytest.raises(BuildError, match="kind"):
        build_model(CFG, "fog", seed=0)


def test_invalid_stage_spec_names_field():
    bad = ModelConfig(e_stage_channels=(8, 8, 8))
    with pytest.raises(BuildError, match="e_stage_channels"):
        build_model(bad, "edge", seed=0)
    with pytest.raises(BuildError, match="num_classes"):
        build_model(ModelConfig(num_classes=1), "cloud", seed=0)


def test_param_ratio_under_default_config():
    c = build_model(CFG, "cloud", seed=0)
    e = build_model(CFG, "edge", seed=0)
    ratio = e.store.element_count() / c.store.element_count()
    assert ratio <= 0.10
    assert c.store.element_count() >= 10 * e.store.element_count()


def test_param_ordering_any_valid_config():
    c = build_model(SMALL, "cloud", seed=3)
    e = build_model(SMALL, "edge", seed=3)
    assert e.store.element_count() < c.store.element_count()


def test_feature_dims_equal_across_models():
    c = build_model(CFG, "cloud", seed=0)
    e = build_model(CFG, "edge", seed=0)
    c.set_training(False)
    e.set_training(False)
    x = Tensor(np.random.default_rng(2).standard_normal((2, 6, 32, 32)).astype(np.float32))
    fc = c.forward_features(x)
    fe = e.forward_features(x)
    assert fc.shape == fe.shape == (2, CFG.feature_dim)


def test_zero_input_zero_stem_finite():
    model = build_model(CFG, "edge", seed=0)
    for conv in model.pre_fe.convs:
        conv.weight.data[...] = 0.0
    model.set_training(False)
    x = Tensor(np.zeros((2, 6, 32, 32), dtype=np.float32))
    out = model.forward_features(x)  # NonFiniteError would propagate from the engine
    assert np.all(np.isfinite(out.data))


def test_pre_fe_structural_identity():
    for cfg in (CFG, SMALL):
        c = build_model(cfg, "cloud", seed=9)
        e = build_model(cfg, "edge", seed=10)
        c_names = [n for n in c.store.names() if n.startswith("pre_fe.")]
        e_names = [n for n in e.store.names() if n.startswith("pre_fe.")]
        assert c_names == e_names
        for n in c_names:
            assert c.store[n].shape == e.store[n].shape


def test_share_pre_fe_copies_bit_equal():
    c = build_model(CFG, "cloud", seed=1)
    e = build_model(CFG, "edge", seed=2)
    share_pre_fe(c, e)
    for n in c.store.names():
        if n.startswith("pre_fe."):
            assert c.store[n].data.tobytes() == e.store[n].data.tobytes()


def test_share_pre_fe_no_aliasing():
    c = build_model(CFG, "cloud", seed=1)
    e = build_model(CFG, "edge", seed=2)
    share_pre_fe(c, e)
    snap = e.store["pre_fe.conv1.weight"].data.copy()
    c.store["pre_fe.conv1.weight"].data[...] += 1.0
    assert np.array_equal(e.store["pre_fe.conv1.weight"].data, snap)


def test_share_pre_fe_structure_mismatch_reported():
    c = build_model(CFG, "cloud", seed=1)
    e = build_model(ModelConfig(pre_fe_channels=(12, 12, 12)), "edge", seed=2)
    with pytest.raises(BuildError, match="pre_fe"):
        share_pre_fe(c, e)


def test_share_pre_fe_shape_mismatch_reported():
    c = build_model(CFG, "cloud", seed=1)
    e = build_model(ModelConfig(pre_fe_channels=(12, 16)), "edge", seed=2)
    with pytest.raises(BuildError, match="pre_fe"):
        share_pre_fe(c, e)


def test_shared_pre_fe_activations_bit_exact():
    c = build_model(CFG, "cloud", seed=1)
    e = build_model(CFG, "edge", seed=2)
    share_pre_fe(c, e)
    freeze_pre_fe(e)
    c.set_training(False)
    e.set_training(False)
    x = Tensor(np.random.default_rng(3).standard_normal((2, 6, 32, 32)).astype(np.float32))
    hc = c.forward_pre_fe(x)
    he = e.forward_pre_fe(x)
    assert hc.data.tobytes() == he.data.tobytes()


def test_freeze_flags_and_bn_mode():
    e = build_model(CFG, "edge", seed=0)
    freeze_pre_fe(e)
    for n in e.store.names():
        assert e.store.is_frozen(n) == n.startswith("pre_fe.")
    for bn in e.pre_fe.bns:
        assert bn.frozen and not bn.training
    e.set_training(True)
    for bn in e.pre_fe.bns:
        assert not bn.training  # frozen BN stays in eval
    for b in e.blocks:
        assert all(bn.training for bn in b.bn_layers())


def test_frozen_params_still_get_gradients():
    e = build_model(CFG, "edge", seed=0)
    freeze_pre_fe(e)
    e.set_training(True)
    x = Tensor(np.random.default_rng(4).standard_normal((2, 6, 32, 32)).astype(np.float32))
    w = e.store["pre_fe.conv1.weight"]
    with Tape() as tape:
        loss = tsum(e.forward_logits(x))
        g = tape.backward(loss, [w])
    assert np.any(g[w].data != 0.0)  # skipped at update time, not detached


def test_architecture_covers_all_parameters():
    for kind in ("cloud", "edge"):
        model = build_model(CFG, kind, seed=0)
        arch = model.architecture()
        named = [a for a in arch if a.layer is not None]
        total = 0
        for a in named:
            layer = a.layer
            for attr in ("weight", "bias", "gamma", "beta"):
                t = getattr(layer, attr, None)
                if t is not None:
                    total += t.size
        assert total == model.store.element_count(trainable_only=True)
        assert arch[-1].out_shape == (CFG.num_classes,)


def test_architecture_shapes_match_forward():
    model = build_model(CFG, "edge", seed=0)
    model.set_training(False)
    x = Tensor(np.random.default_rng(5).standard_normal((1, 6, 32, 32)).astype(np.float32))
    out = model.forward_logits(x)
    assert out.shape[1:] == model.architecture()[-1].out_shape
