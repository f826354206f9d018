import json

import pytest
from hypothesis import given, strategies as st

from fedpeft.cli import main
from fedpeft.config import ExperimentSpec, format_config, load_config, parse_config
from fedpeft.errors import ConfigError
from fedpeft.fed import ALGORITHMS


def test_empty_config_is_defaults():
    spec = parse_config("")
    assert spec == ExperimentSpec()
    f = spec.federated
    assert (f.n_clients, f.local_epochs, f.batch_size) == (100, 1, 32)
    assert format_config(spec) == format_config(parse_config(""))


def test_flag_style_overrides():
    spec = parse_config("", ["algorithm=slora", "d1=0.10"])
    assert spec.federated.algorithm == "slora" and spec.federated.d1 == 0.1


def test_sections_and_comments():
    text = """
    # a comment
    [federated]
    algorithm = flora   # trailing comment
    rank_plan = 1:4,2:6
    beta = 8
    [partition]
    kind = pathological
    [run]
    seeds = 0,1,2
    """
    spec = parse_config(text)
    assert spec.federated.rank_plan == ((1, 4), (2, 6))
    assert spec.federated.beta == 8.0
    assert spec.partition.kind == "pathological"
    assert spec.run.seeds == (0, 1, 2)


@pytest.mark.parametrize(
    "override,key",
    [("bogus=1", "bogus"), ("n_clients=ten", "n_clients"), ("federated.nope=1", "nope"), ("federated.seed=3", "seed")],
)
def test_errors_name_the_key(override, key):
    with pytest.raises(ConfigError, match=key):
        parse_config("", [override])


def test_invalid_values():
    with pytest.raises(ConfigError):
        parse_config("", ["algorithm=foo"])
    with pytest.raises(ConfigError):
        parse_config("", ["kind=random"])
    with pytest.raises(ConfigError):
        parse_config("", ["seeds="])


def test_missing_dataset_file(tmp_path):
    with pytest.raises(ConfigError, match="train_csv"):
        parse_config("", ["source=csv", f"train_csv={tmp_path / 'x.csv'}"])
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_unknown_section():
    with pytest.raises(ConfigError, match="nonsense"):
        parse_config("[nonsense]\n")


specs = st.builds(
    lambda algo, n, k, d1, beta, plan, seeds, alpha, train_head: parse_config(
        "",
        [
            f"algorithm={algo}", f"n_clients={n}", f"clients_per_round={min(k, n)}", f"d1={d1!r}",
            f"beta={'none' if beta is None else repr(beta)}",
            f"rank_plan={'none' if plan is None else ','.join(f'{a}:{b}' for a, b in plan)}",
            f"seeds={','.join(map(str, seeds))}", f"alpha={alpha!r}", f"train_head={train_head}",
        ],
    ),
    st.sampled_from(ALGORITHMS),
    st.integers(1, 200),
    st.integers(1, 200),
    st.floats(0.001, 1.0),
    st.none() | st.floats(0.1, 64.0),
    st.none() | st.lists(st.tuples(st.integers(0, 5), st.integers(1, 30)), min_size=1, max_size=3).map(tuple),
    st.lists(st.integers(0, 99), min_size=1, max_size=5),
    st.floats(0.01, 1e4),
    st.booleans(),
)


@given(specs)
def test_roundtrip(spec):
    assert parse_config(format_config(spec)) == spec


def test_cli_config_prints_defaults(capsys):
    assert main(["config"]) == 0
    assert capsys.readouterr().out == format_config(ExperimentSpec())


def test_cli_bad_key_exit_code(capsys):
    assert main(["config", "bogus=1"]) == 2
    assert "bogus" in capsys.readouterr().err


SMALL = ["n_clients=6", "clients_per_round=2", "rounds_stage1=2", "rounds_stage2=2", "samples=300",
         "num_classes=5", "dims=6", "embed_dim=8", "hidden_dims=8", "pre_dim=8", "hidden_rank=2", "pre_rank=3",
         "pretrain.epochs=1", "source_samples=100"]


def test_cli_run_writes_outputs(tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("[federated]\nalgorithm = slora\n")
    out = tmp_path / "run"
    assert main(["run", str(cfg), *SMALL, "--seed", "3", "--out", str(out)]) == 0
    for name in ("rounds.csv", "summary.json", "partition.json", "costs.csv", "w0.ckpt", "final.ckpt", "stage1.ckpt"):
        assert (out / name).exists(), name
    lines = (out / "rounds.csv").read_text().splitlines()
    assert lines[0] == "# fedpeft rounds v1"
    assert lines[1] == "round,stage,accuracy,bits_up,bits_down,cum_bits,cum_flops"
    assert json.loads((out / "summary.json").read_text())["seed"] == 3
