"""Launch runs from an :class:`ExperimentSpec`, write outputs, sweep seeds, compare runs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import costs
from .checkpoint import Checkpoint, save
from .config import ExperimentSpec, format_config, spec_dict
from .data import (
    Dataset,
    Partition,
    load_csv,
    partition_dirichlet,
    partition_iid,
    partition_pathological,
    split_train_test,
    synth_generate,
)
from .errors import ComparisonError, FedPeftError
from .fed import ExperimentReport, FedConfig, run_experiment
from .model import ModelConfig, ModelParams, pretrain
from .peft import trainable_count

log = logging.getLogger(__name__)

COSTS_HEADER = "round,stage,participants,up_bits_per_client,down_bits_per_client,flops_total,flops_critical,seconds"


@dataclass(frozen=True)
class World:
    train: Dataset
    test: Dataset
    partition: Partition
    w0: ModelParams
    dataset_hash: str


def load_dataset(spec: ExperimentSpec) -> tuple[Dataset, Dataset]:
    d = spec.data
    if d.source == "csv":
        full = load_csv(d.train_csv, d.num_classes)
        if d.test_csv:
            return full, load_csv(d.test_csv, d.num_classes)
        return split_train_test(full, d.train_fraction, d.split_seed)
    ds = synth_generate(d.num_classes, d.dims, d.samples, d.data_seed, d.separation, d.noise, d.modes)
    return split_train_test(ds, d.train_fraction, d.split_seed)


def model_config(spec: ExperimentSpec, dims: int) -> ModelConfig:
    m = spec.model
    return ModelConfig(dims, m.embed_dim, m.hidden_dims, m.pre_dim, spec.data.num_classes)


@lru_cache(maxsize=8)
def _pretrained(mc: ModelConfig, p) -> ModelParams:
    source = synth_generate(mc.num_classes, mc.input_dim, p.source_samples, p.source_seed)
    return pretrain(mc, source, p.epochs, p.lr, p.seed, p.batch_size, p.fresh_head)


def pretrained_weights(spec: ExperimentSpec, dims: int) -> ModelParams:
    """W0 depends only on the model and pretrain sections, never on the run seed."""
    return _pretrained(model_config(spec, dims), spec.pretrain)


def make_partition(spec: ExperimentSpec, train: Dataset, seed: int) -> Partition:
    p, n = spec.partition, spec.federated.n_clients
    if p.kind == "iid":
        return partition_iid(train, n, seed)
    if p.kind == "pathological":
        return partition_pathological(train, n, p.shards_per_client, seed)
    return partition_dirichlet(train, n, p.alpha, seed)


def build_world(spec: ExperimentSpec, seed: int) -> World:
    train, test = load_dataset(spec)
    h = dataset_hash(train, test)
    return World(train, test, make_partition(spec, train, seed), pretrained_weights(spec, train.dims), h)


def dataset_hash(train: Dataset, test: Dataset) -> str:
    return hashlib.sha256((train.fingerprint() + test.fingerprint()).encode()).hexdigest()


def budget_rounds(cfg: FedConfig, w0: ModelParams, budget_bits: int) -> int:
    """Rounds a single-stage method needs before its cumulative bits reach ``budget_bits``."""
    count, _ = trainable_count(w0, cfg.peft(cfg.algorithm))
    per_round = costs.comm_bits(count, cfg.clients_per_round, cfg.bits_per_param)
    return max(1, math.ceil(budget_bits / per_round))


def padded_config(cfg: FedConfig, w0: ModelParams, budget_bits: int) -> FedConfig:
    # two-stage methods define the budget; only single-stage baselines are padded
    if budget_bits <= 0 or cfg.algorithm in ("flora", "slora"):
        return cfg
    n = budget_rounds(cfg, w0, budget_bits)
    if cfg.algorithm in ("fft", "sft"):
        return replace(cfg, rounds_stage1=n)
    return replace(cfg, rounds_stage2=n)


def costs_csv(report: ExperimentReport, spec: ExperimentSpec) -> str:
    r_ = spec.run
    lines = ["# fedpeft costs v1", COSTS_HEADER]
    for r in report.ledger.rounds:
        sec = (
            r.up_bits_per_client / r_.bandwidth_up
            + r.down_bits_per_client / r_.bandwidth_down
            + r.flops_critical / r_.flops_rate
        )
        lines.append(
            f"{r.round},{r.stage},{r.participants},{r.up_bits_per_client},{r.down_bits_per_client},"
            f"{r.flops_total},{r.flops_critical},{sec!r}"
        )
    return "\n".join(lines) + "\n"


def _write(path: Path, text: str) -> None:
    path.write_text(text)


def run_single(spec: ExperimentSpec, seed: int, out: str | Path) -> dict:
    """Run one seed and write rounds.csv, costs.csv, summary.json, partition.json, config.txt and checkpoints."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    # the output location is not part of the result; keep files relocatable and byte-stable
    spec = replace(spec, run=replace(spec.run, out=""))
    world = build_world(spec, seed)
    cfg = padded_config(spec.fed_for(seed), world.w0, spec.run.budget_bits)
    report = run_experiment(cfg, world.w0, world.train, world.test, world.partition)
    summary = dict(report.summary)
    summary["modeled_seconds"] = costs.wallclock_model(
        report.ledger, spec.run.bandwidth_up, spec.run.bandwidth_down, spec.run.flops_rate
    )
    summary["modeled_minutes"] = summary["modeled_seconds"] / 60.0
    summary["dataset_hash"] = world.dataset_hash
    summary["partition"] = world.partition.scheme
    summary["spec"] = spec_dict(spec)
    summary["budget_bits"] = spec.run.budget_bits
    _write(out / "rounds.csv", report.csv())
    _write(out / "costs.csv", costs_csv(report, spec))
    _write(out / "partition.json", world.partition.to_json() + "\n")
    _write(out / "config.txt", format_config(spec))
    _write(out / "summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    if spec.run.checkpoints:
        save(out / "w0.ckpt", Checkpoint(world.w0))
        fs = report.final_state
        save(out / "final.ckpt", Checkpoint(fs.base, fs.lora, fs.adapters, fs.mask))
        if report.stage1_state is not None:
            s1 = report.stage1_state
            save(out / "stage1.ckpt", Checkpoint(s1.base, mask=s1.mask))
    return summary


def seed_dir(out: str | Path, seed: int) -> Path:
    return Path(out) / f"seed_{seed}"


def aggregate_seeds(finals: list[float]) -> dict:
    arr = np.asarray(finals, dtype=np.float64)
    top = np.sort(arr)[::-1][:3]
    return {
        "n": int(arr.size),
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
        "best3_mean": float(top.mean()),
        "min": float(arr.min()),
        "max": float(arr.max()),
    }


def run_sweep(spec: ExperimentSpec, out: str | Path | None = None) -> int:
    """Run every seed into ``out/seed_<s>``; returns a process exit code.

    A failing seed is logged and recorded in the summary; the others still
    run, and the exit code is nonzero.
    """
    out = Path(out if out is not None else spec.run.out)
    out.mkdir(parents=True, exist_ok=True)
    per_seed, failed = {}, {}
    for s in spec.run.seeds:
        try:
            per_seed[s] = run_single(spec, s, seed_dir(out, s))
        except (FedPeftError, ArithmeticError, ValueError) as exc:
            log.error("seed %d failed: %s", s, exc)
            failed[s] = f"{type(exc).__name__}: {exc}"
    body = {
        "algorithm": spec.federated.algorithm,
        "seeds": list(spec.run.seeds),
        "completed": sorted(per_seed),
        "failed": {str(k): v for k, v in sorted(failed.items())},
        "per_seed": {
            str(s): {k: v[k] for k in ("final_accuracy", "best_accuracy", "total_bits", "modeled_seconds", "total_rounds")}
            for s, v in sorted(per_seed.items())
        },
    }
    if per_seed:
        body["final_accuracy"] = aggregate_seeds([v["final_accuracy"] for _, v in sorted(per_seed.items())])
        body["best_accuracy"] = aggregate_seeds([v["best_accuracy"] for _, v in sorted(per_seed.items())])
        first = per_seed[min(per_seed)]
        body["dataset_hash"] = first["dataset_hash"]
        body["trainable_params"] = first["trainable_params"]
        body["total_bits"] = first["total_bits"]
    (out / "summary.json").write_text(json.dumps(body, sort_keys=True, indent=2) + "\n")
    return 1 if failed else 0


# ---------------------------------------------------------------- comparison


@dataclass(frozen=True)
class RunView:
    name: str
    summary: dict
    rows: list[dict]
    seconds: list[float]  # modeled seconds per ledger round, aligned with rows[1:]


def read_rounds(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        rows.append(
            {
                "round": int(r["round"]),
                "stage": int(r["stage"]),
                "accuracy": float(r["accuracy"]) if r["accuracy"] else None,
                "bits_up": int(r["bits_up"]),
                "bits_down": int(r["bits_down"]),
                "cum_bits": int(r["cum_bits"]),
                "cum_flops": int(r["cum_flops"]),
            }
        )
    return rows


def _read_seconds(path: Path) -> list[float]:
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return [float(r["seconds"]) for r in csv.DictReader(lines)]


def _run_dirs(d: Path) -> list[Path]:
    if (d / "rounds.csv").exists():
        return [d]
    subs = sorted(p for p in d.glob("seed_*") if (p / "rounds.csv").exists())
    if not subs:
        raise ComparisonError(f"{d} is not a completed run or sweep directory")
    return subs


def load_runs(d: str | Path) -> list[RunView]:
    out = []
    for rd in _run_dirs(Path(d)):
        summary = json.loads((rd / "summary.json").read_text())
        out.append(RunView(str(d), summary, read_rounds(rd / "rounds.csv"), _read_seconds(rd / "costs.csv")))
    return out


def _acc_at(rows: list[dict], rnd: int) -> float:
    best = rows[0]["accuracy"]
    for r in rows:
        if r["round"] > rnd:
            break
        if r["accuracy"] is not None:
            best = r["accuracy"]
    return best


def _point(run: RunView, rnd: int) -> dict:
    rnd = min(rnd, run.rows[-1]["round"])
    row = [r for r in run.rows if r["round"] <= rnd][-1]
    return {
        "round": rnd,
        "accuracy": _acc_at(run.rows, rnd),
        "cum_bits": row["cum_bits"],
        "seconds": float(sum(run.seconds[:rnd])),
    }


def _budget_round(run: RunView, budget: int) -> tuple[int, int]:
    """(round where cumulative bits first reach ``budget``, rounds still needed if never)."""
    for r in run.rows:
        if r["cum_bits"] >= budget:
            return r["round"], 0
    last = run.rows[-1]
    per_round = last["bits_up"] + last["bits_down"]
    missing = math.ceil((budget - last["cum_bits"]) / per_round) if per_round else 0
    return last["round"], missing


def compare_report(dirs: list[str | Path], mode: str = "rounds") -> dict:
    """Align runs at the first run's round count (``rounds``) or total bits (``budget``).

    Each directory may hold one run or a sweep of seeds; sweep seeds are
    averaged point by point. Deltas are taken against the first directory.
    """
    if mode not in ("rounds", "budget"):
        raise ComparisonError(f"mode must be rounds or budget, got {mode!r}")
    if len(dirs) < 2:
        raise ComparisonError("compare needs at least two run directories")
    groups = [load_runs(d) for d in dirs]
    hashes = {v.summary.get("dataset_hash") for g in groups for v in g}
    if len(hashes) != 1:
        raise ComparisonError("runs were produced on different datasets (dataset hashes differ)")
    ref = groups[0]
    ref_rounds = ref[0].rows[-1]["round"]
    ref_bits = int(np.mean([v.rows[-1]["cum_bits"] for v in ref]))
    table = []
    for d, g in zip(dirs, groups):
        pts, missing = [], 0
        for v in g:
            if mode == "rounds":
                pts.append(_point(v, ref_rounds))
            else:
                rnd, miss = _budget_round(v, ref_bits)
                missing = max(missing, miss)
                pts.append(_point(v, rnd))
        accs = [p["accuracy"] for p in pts]
        table.append(
            {
                "run": str(d),
                "algorithm": g[0].summary["algorithm"],
                "seeds": len(g),
                "trainable_params": g[0].summary["trainable_params"],
                "round": int(max(p["round"] for p in pts)),
                "accuracy": float(np.mean(accs)),
                "accuracy_std": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
                "gbits": float(np.mean([p["cum_bits"] for p in pts])) / 1e9,
                "minutes": float(np.mean([p["seconds"] for p in pts])) / 60.0,
                "rounds_short": int(missing),
            }
        )
    base = table[0]
    for row in table:
        row["delta_accuracy"] = row["accuracy"] - base["accuracy"]
        row["delta_gbits"] = row["gbits"] - base["gbits"]
    return {
        "mode": mode,
        "reference": str(dirs[0]),
        "reference_rounds": ref_rounds,
        "reference_bits": ref_bits,
        "rows": table,
    }


def format_table(report: dict) -> str:
    cols = ["algorithm", "trainable_params", "round", "accuracy", "delta_accuracy", "gbits", "minutes", "rounds_short", "run"]
    head = f"# compare mode={report['mode']} reference={report['reference']}"
    lines = [head, "\t".join(cols)]
    for r in report["rows"]:
        cells = []
        for c in cols:
            v = r[c]
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
