import numpy as np
import pytest
from hypothesis import settings

from fedpeft.model import DenseLayer, ModelParams

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def make_model(dims, seed=0, roles=None, scale=0.5):
    """Random dense stack; ``dims`` = (input, ..., classes), at least two layers."""
    rng = np.random.default_rng(seed)
    n = len(dims) - 1
    if roles is None:
        roles = ["hidden"] * (n - 2) + ["pre_classification", "classification"]
    layers = []
    for i in range(n):
        w = rng.normal(0.0, scale, size=(dims[i + 1], dims[i]))
        b = rng.normal(0.0, 0.1, size=dims[i + 1])
        act = "none" if roles[i] == "classification" else "relu"
        layers.append(DenseLayer(w, b, roles[i], act))
    return ModelParams(tuple(layers), dims[0], dims[-1])


@pytest.fixture
def small_model():
    return make_model((6, 8, 7, 4), seed=3)


def tiny_world(n_clients=8, samples=400, seed=0, pathological=False):
    from fedpeft.data import partition_dirichlet, partition_pathological, split_train_test, synth_generate
    from fedpeft.model import ModelConfig, pretrain

    mc = ModelConfig(input_dim=8, embed_dim=12, hidden_dims=(12,), pre_dim=12, num_classes=6)
    w0 = pretrain(mc, synth_generate(6, 8, 300, seed=50), epochs=2, lr=0.1, seed=1)
    train, test = split_train_test(synth_generate(6, 8, samples, seed=9), 0.6, 0)
    if pathological:
        part = partition_pathological(train, n_clients, 2, seed)
    else:
        part = partition_dirichlet(train, n_clients, 0.5, seed)
    return w0, train, test, part


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion, echoed in the terminal summary."""

    def emit(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
