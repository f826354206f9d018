import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_model
from fedpeft.errors import ConfigError, RankError, ShapeError
from fedpeft.model import ModelConfig, ParamDelta, delta, forward, init_model
from fedpeft.peft import (
    LoRABlock,
    PeftConfig,
    TrainState,
    adapter_attach,
    adapter_sites,
    bitfit_mask,
    build_state,
    default_rank_plan,
    full_mask,
    full_rank_plan,
    lora_forward,
    lora_init_random,
    lora_prime,
    mask_generate,
    masked_step,
    popcount_for,
    trainable_count,
)


@pytest.fixture
def model():
    cfg = ModelConfig(input_dim=10, embed_dim=12, hidden_dims=(12, 12), pre_dim=14, num_classes=5)
    return init_model(cfg, seed=0)


def test_lora_forward_formula(small_model):
    rng = np.random.default_rng(0)
    layer = small_model.layers[1]
    blk = LoRABlock(rng.normal(size=(3, 8)), rng.normal(size=(7, 3)), 3, 6.0, 1)
    x = rng.normal(size=8)
    expected = layer.weight @ x + layer.bias + 2.0 * blk.B @ (blk.A @ x)
    assert np.allclose(lora_forward(layer, blk, x), expected, atol=1e-12)


def test_random_init_is_zero_product(small_model):
    blk = lora_init_random(small_model.layers[0], 2, 2.0, seed=1, target_layer=0)
    assert blk.A.shape == (2, 6) and blk.B.shape == (8, 2)
    assert not blk.B.any() and blk.A.any()
    assert 0.005 < blk.A.std() < 0.05


@pytest.mark.parametrize("r", [0, 9, 1.5])
def test_random_init_bad_rank(small_model, r):
    with pytest.raises(RankError):
        lora_init_random(small_model.layers[0], r, 1.0, 0, 0)


def test_block_shape_check():
    with pytest.raises(ShapeError):
        LoRABlock(np.ones((2, 3)), np.ones((4, 3)), 2, 1.0, 0)


@pytest.mark.parametrize("method", ["lora", "houlsby", "pfeiffer"])
def test_attached_at_init_is_noop(model, method):
    x = np.random.default_rng(7).normal(size=(100, 10))
    state = build_state(model, PeftConfig(method=method, hidden_rank=4, pre_rank=6), seed=3)
    base, _ = forward(model, x)
    got, _ = state.forward(x)
    assert base.tobytes() == got.tobytes()


def test_priming_full_rank_reproduces_target(model):
    target = make_like(model, seed=5)
    plan = full_rank_plan(model)
    blocks = lora_prime(delta(target, model), plan, beta=None)
    rest = {k: v for k, v in target.tensors().items() if not any(k == f"layers.{i}.weight" for i in plan)}
    state = TrainState(model.with_tensors(rest), lora=blocks)
    x = np.random.default_rng(1).normal(size=(50, 10))
    assert np.abs(state.forward(x)[0] - forward(target, x)[0]).max() < 1e-9


@pytest.mark.parametrize("beta", [None, 1.0, 16.0])
def test_priming_is_beta_invariant(model, beta):
    target = make_like(model, seed=6)
    plan = default_rank_plan(model, 4, 5)
    blocks = lora_prime(delta(target, model), plan, beta)
    ref = lora_prime(delta(target, model), plan, None)
    for i in plan:
        assert np.allclose(blocks[i].dense(), ref[i].dense(), atol=1e-12)


def test_priming_zero_delta_is_exact(model):
    zero = delta(model, model)
    blocks = lora_prime(zero, default_rank_plan(model, 3, 3), None)
    x = np.random.default_rng(2).normal(size=(20, 10))
    assert forward(model, x)[0].tobytes() == TrainState(model, lora=blocks).forward(x)[0].tobytes()


def test_priming_rank_too_large(model):
    with pytest.raises(RankError):
        lora_prime(delta(model, model), {1: 13}, None)


def test_priming_truncation_error(model):
    target = make_like(model, seed=8)
    d = delta(target, model)
    blocks = lora_prime(d, {2: 3}, None)
    tail = np.linalg.svd(d.tensors["layers.2.weight"], compute_uv=False)[3:]
    err = np.linalg.norm(d.tensors["layers.2.weight"] - blocks[2].dense())
    assert err == pytest.approx(np.sqrt((tail**2).sum()), abs=1e-9)


def make_like(model, seed):
    rng = np.random.default_rng(seed)
    return model.with_tensors({k: v + rng.normal(0, 0.1, v.shape) for k, v in model.tensors().items()})


@given(st.floats(0.01, 1.0), st.integers(0, 10_000))
def test_mask_popcount_exact(density, seed):
    model = init_model(ModelConfig(input_dim=7, embed_dim=9, hidden_dims=(11,), pre_dim=6, num_classes=3), 0)
    mask = mask_generate(model, density, seed)
    counts = mask.layer_popcounts()
    for i, layer in enumerate(model.layers):
        if layer.role in ("hidden", "pre_classification"):
            assert counts[i] == max(1, math.floor(density * layer.size + 0.5))
        else:
            assert counts[i] == 0


def test_popcount_rounding():
    assert popcount_for(0.1, 25) == 3  # 2.5 rounds half up
    assert popcount_for(0.1, 5) == 1
    assert popcount_for(0.001, 10) == 1


def test_mask_seeded(model):
    a, b = mask_generate(model, 0.2, 4), mask_generate(model, 0.2, 4)
    c = mask_generate(model, 0.2, 5)
    assert all(np.array_equal(a.masks[k], b.masks[k]) for k in a.masks)
    assert any(not np.array_equal(a.masks[k], c.masks[k]) for k in a.masks)


@pytest.mark.parametrize("density", [0.0, 1.5])
def test_mask_bad_density(model, density):
    with pytest.raises(ConfigError):
        mask_generate(model, density, 0)


def test_full_mask_density_one(model):
    m = full_mask(model)
    assert m.popcount == model.total_params


def test_masked_step_keeps_off_mask_bits(model):
    mask = mask_generate(model, 0.1, 2)
    rng = np.random.default_rng(3)
    grads = ParamDelta({k: rng.normal(size=v.shape) for k, v in model.tensors().items()})
    out = masked_step(model, grads, mask, lr=0.5)
    for k, v in model.tensors().items():
        new = out.tensors()[k]
        off = ~mask.masks[k]
        assert new[off].tobytes() == v[off].tobytes()
        assert np.allclose(new[mask.masks[k]], (v - 0.5 * grads.tensors[k])[mask.masks[k]])


def test_adapter_sites(model):
    assert adapter_sites(model, "houlsby") == [1, 2, 3]
    assert adapter_sites(model, "pfeiffer") == [2]
    with pytest.raises(ConfigError):
        adapter_sites(model, "nowhere")


def test_adapter_param_count(model):
    blocks = adapter_attach(model, 4, "houlsby", seed=0)
    for i, b in blocks.items():
        d = model.layers[i].out_dim
        assert b.size == 2 * d * 4 + 4 + d


def test_trainable_counts(model):
    head = model.layers[-1].size
    assert trainable_count(model, PeftConfig("fft"))[0] == model.total_params
    n_bias = sum(l.bias.size for l in model.layers)
    assert trainable_count(model, PeftConfig("bitfit"))[0] == n_bias - model.layers[-1].bias.size + head
    plan = default_rank_plan(model, 3, 4)
    lora_n = sum(r * (model.layers[i].in_dim + model.layers[i].out_dim) for i, r in plan.items())
    assert trainable_count(model, PeftConfig("lora", hidden_rank=3, pre_rank=4))[0] == lora_n + head
    assert trainable_count(model, PeftConfig("lora", hidden_rank=3, pre_rank=4, train_head=False))[0] == lora_n


def test_bitfit_mask_only_biases(model):
    m = bitfit_mask(model)
    assert all(not v.any() for k, v in m.masks.items() if k.endswith("weight"))


def test_unknown_method(model):
    with pytest.raises(ConfigError):
        build_state(model, PeftConfig("prefix"), 0)


def test_step_and_update_respect_mask(model):
    state = build_state(model, PeftConfig("sft", density=0.1), seed=1)
    x = np.random.default_rng(0).normal(size=(8, 10))
    _, g = state.grads(x, np.arange(8) % 5)
    new = state.step(g, 0.1)
    for k, v in model.tensors().items():
        off = ~state.mask.masks[k]
        assert new.base.tensors()[k][off].tobytes() == v[off].tobytes()
