"""Experiment specs in a plain sectioned ``key = value`` format.

Example::

    [federated]
    algorithm = slora
    d1 = 0.1
    [run]
    seeds = 0,1,2,3,4

Keys may also be given without a section when the name is unambiguous,
either in the file or as command-line ``key=value`` overrides.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError, FedPeftError
from .fed import FedConfig


@dataclass(frozen=True)
class DataSpec:
    source: str = "synthetic"  # synthetic | csv
    train_csv: str = ""
    test_csv: str = ""
    num_classes: int = 20
    dims: int = 32
    samples: int = 6000
    data_seed: int = 7
    separation: float = 1.0
    noise: float = 1.0
    modes: int = 2
    train_fraction: float = 0.6
    split_seed: int = 0


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "dirichlet"  # dirichlet | pathological | iid
    alpha: float = 0.1
    shards_per_client: int = 2


@dataclass(frozen=True)
class ModelSpec:
    embed_dim: int = 64
    hidden_dims: tuple[int, ...] = (64, 64)
    pre_dim: int = 64


@dataclass(frozen=True)
class PretrainSpec:
    epochs: int = 5
    lr: float = 0.1
    seed: int = 1
    batch_size: int = 32
    source_samples: int = 4000
    source_seed: int = 100
    fresh_head: bool = True


@dataclass(frozen=True)
class RunSpec:
    seeds: tuple[int, ...] = (0,)
    out: str = "runs/experiment"
    budget_bits: int = 0
    bandwidth_up: float = 5e6
    bandwidth_down: float = 5e6
    flops_rate: float = 1e9
    checkpoints: bool = True


@dataclass(frozen=True)
class ExperimentSpec:
    federated: FedConfig = field(default_factory=FedConfig)
    data: DataSpec = field(default_factory=DataSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    run: RunSpec = field(default_factory=RunSpec)

    def fed_for(self, seed: int) -> FedConfig:
        return replace(self.federated, seed=seed)


SECTIONS = ("federated", "data", "partition", "model", "pretrain", "run")
# the run seed comes from [run] seeds, never from [federated]
EXCLUDED = {("federated", "seed")}


def _hints(cls) -> dict[str, object]:
    return typing.get_type_hints(cls)


def _section_keys() -> dict[str, list[str]]:
    out = {}
    for sec in SECTIONS:
        cls = _hints(ExperimentSpec)[sec]
        out[sec] = [f.name for f in fields(cls) if (sec, f.name) not in EXCLUDED]
    return out


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}:{b}" for a, b in value)
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_value(hint, raw: str, key: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
            if raw.lower() in ("none", ""):
                return None
            inner = [a for a in args if a is not type(None)][0]
            return _parse_value(inner, raw, key)
        if hint is bool:
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if origin is tuple:
            items = [p.strip() for p in raw.split(",") if p.strip()]
            if args and typing.get_origin(args[0]) is tuple:
                pairs = []
                for item in items:
                    a, b = item.split(":")
                    pairs.append((int(a), int(b)))
                return tuple(pairs)
            return tuple(args[0](p) for p in items)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from exc
    raise ConfigError(f"unsupported type for {key}")  # pragma: no cover


def _resolve(key: str, section: str | None) -> tuple[str, str]:
    keys = _section_keys()
    if "." in key and section is None:
        section, key = key.split(".", 1)
    if section is not None:
        if section not in keys:
            raise ConfigError(f"unknown section [{section}]")
        if key not in keys[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        return section, key
    owners = [s for s in SECTIONS if key in keys[s]]
    if not owners:
        raise ConfigError(f"unknown key {key!r}")
    if len(owners) > 1:
        raise ConfigError(f"key {key!r} is ambiguous; qualify it as one of {[f'{s}.{key}' for s in owners]}")
    return owners[0], key


def parse_config(text: str = "", overrides: typing.Iterable[str] = ()) -> ExperimentSpec:
    """Parse config text plus ``key=value`` overrides into a validated spec."""
    values: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
    section = None
    lines = [(ln, f"line {i}") for i, ln in enumerate(text.splitlines(), 1)]
    lines += [(o, f"override {o!r}") for o in overrides]
    for raw_line, where in lines:
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            if where.startswith("override"):
                raise ConfigError(f"{where}: sections are not allowed in overrides")
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value")
        key, val = (p.strip() for p in line.split("=", 1))
        sec, key = _resolve(key, None if where.startswith("override") else section)
        cls = _hints(ExperimentSpec)[sec]
        values[sec][key] = _parse_value(_hints(cls)[key], val, f"{sec}.{key}")
    try:
        parts = {s: _hints(ExperimentSpec)[s](**values[s]) for s in SECTIONS}
    except FedPeftError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    spec = ExperimentSpec(**parts)
    validate(spec)
    return spec


def load_config(path: str | Path | None, overrides: typing.Iterable[str] = ()) -> ExperimentSpec:
    text = ""
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        text = p.read_text()
    return parse_config(text, overrides)


def validate(spec: ExperimentSpec) -> None:
    d, p, r = spec.data, spec.partition, spec.run
    if d.source not in ("synthetic", "csv"):
        raise ConfigError(f"data.source must be synthetic or csv, got {d.source!r}")
    if d.source == "csv":
        if not d.train_csv:
            raise ConfigError("data.train_csv is required when data.source = csv")
        for key in ("train_csv", "test_csv"):
            path = getattr(d, key)
            if path and not Path(path).exists():
                raise ConfigError(f"data.{key}: file {path} does not exist")
    if p.kind not in ("dirichlet", "pathological", "iid"):
        raise ConfigError(f"partition.kind must be dirichlet, pathological or iid, got {p.kind!r}")
    if p.alpha <= 0:
        raise ConfigError("partition.alpha must be positive")
    if p.shards_per_client < 1:
        raise ConfigError("partition.shards_per_client must be >= 1")
    if not r.seeds:
        raise ConfigError("run.seeds must list at least one seed")
    if r.budget_bits < 0:
        raise ConfigError("run.budget_bits must be nonnegative")
    if min(r.bandwidth_up, r.bandwidth_down, r.flops_rate) <= 0:
        raise ConfigError("bandwidths and flops_rate must be positive")
    if not 0 < d.train_fraction < 1:
        raise ConfigError("data.train_fraction must be in (0, 1)")


def format_config(spec: ExperimentSpec) -> str:
    """Canonical text form; ``parse_config(format_config(s)) == s``."""
    keys = _section_keys()
    out = []
    for sec in SECTIONS:
        part = getattr(spec, sec)
        out.append(f"[{sec}]")
        for k in keys[sec]:
            out.append(f"{k} = {_format(getattr(part, k))}")
        out.append("")
    return "\n".join(out)


def spec_dict(spec: ExperimentSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["federated"].pop("seed", None)
    return d
