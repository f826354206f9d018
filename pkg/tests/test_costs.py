import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedpeft import costs
from fedpeft.errors import ConfigError
from fedpeft.linalg import count_flops
from fedpeft.model import ModelConfig, init_model
from fedpeft.peft import LoRABlock, PeftConfig, TrainState, build_state, full_mask


@pytest.fixture
def model():
    return init_model(ModelConfig(input_dim=6, embed_dim=8, hidden_dims=(7,), pre_dim=9, num_classes=4), 0)


def test_comm_bits_examples():
    assert costs.comm_bits(0, 10) == 0
    assert costs.comm_bits(100, 1, 32, 2) == 6400
    with pytest.raises(ConfigError):
        costs.comm_bits(-1, 1)


@given(st.integers(1, 10**6), st.integers(1, 10**6), st.integers(1, 100))
def test_comm_ratio_is_param_ratio(a, b, k):
    from fractions import Fraction

    assert Fraction(costs.comm_bits(a, k), costs.comm_bits(b, k)) == Fraction(a, b)


def test_sparse_bits():
    assert costs.index_bits(1000) == 10
    assert costs.index_bits(1024) == 10
    assert costs.sparse_bits(7, 1025) == 7 * (32 + 11)


@pytest.mark.parametrize("method", ["fft", "sft", "bitfit", "lora", "houlsby", "pfeiffer"])
@pytest.mark.parametrize("batch", [1, 5])
def test_closed_form_matches_counter(model, method, batch):
    state = build_state(model, PeftConfig(method, hidden_rank=3, pre_rank=4, adapter_rank=2), seed=0)
    x = np.random.default_rng(0).normal(size=(batch, 6))
    y = np.arange(batch) % 4
    with count_flops() as box:
        state.grads(x, y)
    assert box[0] == costs.step_flops(state, batch)
    with count_flops() as box:
        state.forward(x)
    assert box[0] == costs.step_flops(state, batch, backward=False)


def test_counter_with_lora_on_first_layer(model):
    rng = np.random.default_rng(1)
    blk = LoRABlock(rng.normal(size=(2, 6)), rng.normal(size=(8, 2)), 2, 2.0, 0)
    state = TrainState(model, lora={0: blk})
    x = rng.normal(size=(3, 6))
    with count_flops() as box:
        state.grads(x, np.array([0, 1, 2]))
    assert box[0] == costs.step_flops(state, 3)


def test_single_layer_forward_closed_form(model):
    # the first layer's forward share for batch 1 is 2 * d * k
    state = TrainState(model)
    layer_costs = [2 * l.in_dim * l.out_dim for l in model.layers]
    assert costs.step_flops(state, 1, backward=False) == sum(layer_costs)


def test_lora_forward_overhead(model):
    lora = build_state(model, PeftConfig("lora", hidden_rank=3, pre_rank=4), 0)
    base = TrainState(model)
    assert costs.step_flops(lora, 32, backward=False) > costs.step_flops(base, 32, backward=False)


def test_epoch_flops_partial_batch(model):
    state = TrainState(model, mask=full_mask(model))
    assert costs.epoch_flops(state, 70, 32) == 2 * costs.step_flops(state, 32) + costs.step_flops(state, 6)


def ledger(rows):
    lg = costs.CostLedger()
    for i, (up, flops) in enumerate(rows, 1):
        lg.record(costs.RoundCost(i, 1, 2, up, up, flops * 2, flops))
    return lg


def test_ledger_totals_and_cumulative():
    lg = ledger([(64, 10), (96, 20)])
    assert lg.bits_up == 2 * 64 + 2 * 96
    assert lg.total_bits == 2 * lg.bits_up
    assert lg.cumulative() == [(256, 20), (640, 60)]
    assert lg.flops == 60


def test_ledger_rejects_misordered_or_fractional():
    lg = ledger([(64, 1)])
    with pytest.raises(ValueError):
        lg.record(costs.RoundCost(1, 1, 1, 32, 32, 0, 0))
    with pytest.raises(ValueError):
        lg.record(costs.RoundCost(2, 1, 1, 33, 32, 0, 0))


def test_wallclock():
    assert costs.wallclock_model(costs.CostLedger()) == 0.0
    lg = ledger([(5_000_000, 0)])
    assert costs.wallclock_model(lg) == pytest.approx(2.0)
    assert costs.wallclock_model(lg, 1e7, 1e7) == pytest.approx(1.0)
    lg2 = ledger([(0, 10**9)])
    assert costs.wallclock_model(lg2) == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        costs.wallclock_model(lg, 0.0)


def test_default_bandwidth():
    assert costs.DEFAULT_BANDWIDTH == 5e6 and costs.DEFAULT_BITS_PER_PARAM == 32
