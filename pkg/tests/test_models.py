import numpy as np
import pytest

from otformer import tensor as T
from otformer.blocks import block_forward
from otformer.gradcheck import check_gradients
from otformer.models import (
    CheckpointError,
    ModelConfig,
    SequenceLengthError,
    Variant,
    VocabularyError,
    dumps_checkpoint,
    embed,
    forward,
    init_model,
    load_checkpoint,
    loads_checkpoint,
    pool,
    predict,
    save_checkpoint,
)
from otformer.ode import IntegrationBlowup, single_step_equivalence_input
from otformer.tensor import Tensor

TINY = dict(d=4, k=2, heads=2, depth=2, feature_dim=3, n_max=5, classes=3, steps=2, precision="f64")


def jitter(model, rng, scale=0.3):
    for _, p in model.named_parameters():
        p.data += rng.normal(0, scale, p.data.shape)
    return model


def test_identity_token_map_and_zero_positional_give_raw_features():
    cfg = ModelConfig(d=3, k=2, feature_dim=3, n_max=4, cls_token=False, precision="f64")
    m = init_model(cfg, 0)
    m.embed.token_map.data = np.eye(3)
    m.embed.positional.data[...] = 0
    Z = np.random.default_rng(0).normal(size=(2, 4, 3))
    np.testing.assert_array_equal(embed(Z, m.embed).data, np.swapaxes(Z, 1, 2))


def test_cls_token_is_prepended():
    cfg = ModelConfig(d=3, k=2, feature_dim=2, n_max=4, cls_token=True, precision="f64")
    m = init_model(cfg, 0)
    X = embed(np.ones((1, 2)), m.embed)
    assert X.shape == (3, 2)
    np.testing.assert_array_equal(X.data[:, 0], m.embed.cls_token.data[:, 0])


def test_mnist_patches_give_sixteen_tokens_plus_cls():
    m = init_model(ModelConfig(), 0)
    assert embed(np.zeros((2, 16, 49)), m.embed).shape == (2, 64, 17)


def test_lookup_embedding_and_errors():
    cfg = ModelConfig(d=4, k=2, token_map="lookup", vocab=2, n_max=3, cls_token=False, precision="f64")
    m = init_model(cfg, 0)
    X = embed(np.array([[1, 0]]), m.embed).data
    np.testing.assert_array_equal(X[0, :, 0], m.embed.token_map.data[1] + m.embed.positional.data[:, 0])
    with pytest.raises(VocabularyError):
        embed(np.array([[2, 0]]), m.embed)
    with pytest.raises(SequenceLengthError):
        embed(np.zeros((1, 4), dtype=int), m.embed)


def test_pool_examples():
    x = Tensor(np.array([[1.0, 3.0]]))
    np.testing.assert_array_equal(pool(x, cls=False).data, [2.0])
    np.testing.assert_array_equal(pool(Tensor(np.array([[5.0]])), cls=False).data, [5.0])
    y = Tensor(np.array([[[7.0, 1.0, 2.0]]]))
    np.testing.assert_array_equal(pool(y, cls=True).data, [[7.0]])


def test_single_step_ot_equals_vanilla_bitwise():
    rng = np.random.default_rng(1)
    cfg = ModelConfig(**{**TINY, "depth": 1})
    ot = jitter(init_model(cfg, 1), rng)
    van = ot.with_variant("vanilla")
    Z = rng.normal(size=(3, 5, 3))
    a = forward(ot, Z, integrator=single_step_equivalence_input()).logits.data
    b = forward(van, Z).logits.data
    assert a.tobytes() == b.tobytes()


def test_vanilla_wraps_each_block_in_a_residual():
    rng = np.random.default_rng(2)
    van = init_model(ModelConfig(**{**TINY, "variant": "vanilla"}), 2)
    Z = rng.normal(size=(2, 5, 3))
    X = embed(Z, van.embed)
    for b in van.stack.blocks:
        X = X + block_forward(X, b)
    np.testing.assert_array_equal(forward(van, Z).final_state.data, X.data)
    assert forward(van, Z).transport_cost_raw is None


def test_node_equals_ot_at_depth_one_without_fc():
    rng = np.random.default_rng(3)
    cfg = ModelConfig(**{**TINY, "depth": 1, "fc_mult": 0})
    ot = jitter(init_model(cfg, 3), rng)
    node = ot.with_variant("node")
    Z = rng.normal(size=(2, 5, 3))
    a, b = forward(ot, Z), forward(node, Z)
    assert a.logits.data.tobytes() == b.logits.data.tobytes()
    assert a.transport_cost_raw.data.tobytes() == b.transport_cost_raw.data.tobytes()


def test_node_and_ot_differ_at_depth_two():
    rng = np.random.default_rng(4)
    ot = jitter(init_model(ModelConfig(**TINY), 4), rng)
    node = ot.with_variant("node")
    Z = rng.normal(size=(2, 5, 3))
    a, b = forward(ot, Z), forward(node, Z)
    assert not np.allclose(a.final_state.data, b.final_state.data)
    assert len(b.trajectories) == 2 and len(a.trajectories) == 1
    costs = sum(t.transport_cost_raw.data for t in b.trajectories)
    np.testing.assert_array_equal(b.transport_cost_raw.data, costs)


@pytest.mark.parametrize("variant", list(Variant))
def test_logits_gradient_all_weight_groups(variant):
    rng = np.random.default_rng(5)
    m = jitter(init_model(ModelConfig(**{**TINY, "variant": variant}), 5), rng)
    Z = rng.normal(size=(2, 5, 3))
    w = Tensor(rng.normal(size=(2, 3)))

    def loss():
        out = forward(m, Z)
        val = T.tsum(out.logits * w)
        if out.transport_cost_raw is not None:
            val = val + T.tsum(out.transport_cost_raw)
        return val

    res = check_gradients(loss, m.parameters())
    assert res.max_rel_err < 1e-4


def test_parameter_counts_for_mnist_configs():
    base = dict(fc_mult=0, heads=1, depth=1)
    ot = init_model(ModelConfig(d=64, k=64, **base), 0).num_parameters()
    van = init_model(ModelConfig(d=128, k=128, variant="vanilla", **base), 0).num_parameters()
    assert ot < van and ot <= 0.3 * van
    node = init_model(ModelConfig(d=64, k=64, variant="node", **base), 0).num_parameters()
    assert node == ot


def test_forward_blowup_reports_variant():
    m = init_model(ModelConfig(**TINY), 0)
    m.stack.blocks[0].heads[0].W.data[...] = 1e300
    with np.errstate(over="ignore"), pytest.raises(IntegrationBlowup, match=r"\[ot\]"):
        forward(m, np.ones((1, 5, 3)))


def test_predict_batches_consistently():
    rng = np.random.default_rng(6)
    m = init_model(ModelConfig(**TINY), 6)
    Z = rng.normal(size=(7, 5, 3))
    np.testing.assert_array_equal(predict(m, Z, batch_size=3), forward(m, Z).logits.data.argmax(1))


@pytest.mark.parametrize("precision", ["f32", "f64"])
def test_checkpoint_round_trip_is_bitwise(tmp_path, precision):
    rng = np.random.default_rng(7)
    m = jitter(init_model(ModelConfig(**{**TINY, "precision": precision}), 7), rng)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, m, extra={"epoch": 3})
    back, extra = load_checkpoint(path)
    assert extra == {"epoch": 3}
    assert back.config == m.config
    for (na, a), (nb, b) in zip(m.named_parameters(), back.named_parameters()):
        assert na == nb and a.data.dtype == b.data.dtype and a.data.tobytes() == b.data.tobytes()
    assert dumps_checkpoint(back, {"epoch": 3}) == path.read_bytes()


def test_checkpoint_rejects_corruption():
    blob = dumps_checkpoint(init_model(ModelConfig(**TINY), 0))
    with pytest.raises(CheckpointError, match="magic"):
        loads_checkpoint(b"X" + blob[1:])
    with pytest.raises(CheckpointError, match="truncated"):
        loads_checkpoint(blob[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        loads_checkpoint(blob + b"\x00")


def test_config_round_trips_through_dict():
    cfg = ModelConfig(**TINY)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig(classes=1)
