"""Synchronous FedAvg rounds and the two-stage primed-LoRA orchestrator."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import costs
from .data import Dataset, Partition, check_partition
from .errors import ConfigError, PartitionError, ProtocolError
from .model import ModelParams, ParamDelta, delta
from .peft import (
    DEFAULT_LORA_ROLES,
    DEFAULT_MASK_ROLES,
    PeftConfig,
    SparseMask,
    TrainState,
    build_state,
    full_mask,
    head_mask,
    lora_init_random,
    lora_prime,
    mask_generate,
    resolve_beta,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("fft", "lora", "sft", "bitfit", "houlsby", "pfeiffer", "flora", "slora")
SAMPLE_STREAM = 41
CLIENT_STREAM = 42


@dataclass(frozen=True)
class FedConfig:
    algorithm: str = "slora"
    n_clients: int = 100
    clients_per_round: int = 10
    local_epochs: int = 1
    rounds_stage1: int = 50
    rounds_stage2: int = 50
    d1: float = 0.1
    rank_plan: tuple[tuple[int, int], ...] | None = None
    hidden_rank: int = 10
    pre_rank: int = 18
    beta: float | None = None  # None: beta = r for every block
    adapter_rank: int = 8
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    aggregation: str = "uniform"
    train_head: bool = True
    mask_roles: tuple[str, ...] = DEFAULT_MASK_ROLES
    lora_roles: tuple[str, ...] = DEFAULT_LORA_ROLES
    stage2_init: str = "prime"
    eval_every: int = 1
    workers: int = 1
    bits_per_param: int = costs.DEFAULT_BITS_PER_PARAM

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if not 1 <= self.clients_per_round <= self.n_clients:
            raise ConfigError(f"need 1 <= K <= N, got K={self.clients_per_round}, N={self.n_clients}")
        if self.rounds_stage1 < 0 or self.rounds_stage2 < 0 or self.local_epochs < 0:
            raise ConfigError("round and epoch counts must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.d1 <= 1.0:
            raise ConfigError(f"d1 must be in (0, 1], got {self.d1}")
        if self.aggregation not in ("uniform", "weighted"):
            raise ConfigError(f"aggregation must be uniform or weighted, got {self.aggregation!r}")
        if self.stage2_init not in ("prime", "random"):
            raise ConfigError(f"stage2_init must be prime or random, got {self.stage2_init!r}")
        if self.eval_every < 1 or self.workers < 1:
            raise ConfigError("eval_every and workers must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def peft(self, method: str) -> PeftConfig:
        return PeftConfig(
            method=method,
            density=self.d1,
            rank_plan=self.rank_plan,
            hidden_rank=self.hidden_rank,
            pre_rank=self.pre_rank,
            beta=self.beta,
            adapter_rank=self.adapter_rank,
            train_head=self.train_head,
            mask_roles=self.mask_roles,
            lora_roles=self.lora_roles,
        )

    @property
    def total_rounds(self) -> int:
        if self.algorithm in ("fft", "sft"):
            return self.rounds_stage1
        if self.algorithm in ("flora", "slora"):
            return self.rounds_stage1 + self.rounds_stage2
        return self.rounds_stage2


@dataclass(frozen=True)
class RoundUpdate:
    client_id: int
    delta: ParamDelta
    sample_count: int
    flops: int = 0


@dataclass(frozen=True)
class RoundRecord:
    round: int
    stage: int
    clients: tuple[int, ...]
    accuracy: float | None
    bits_up: int
    bits_down: int
    cum_bits: int
    cum_flops: int


CSV_HEADER = "round,stage,accuracy,bits_up,bits_down,cum_bits,cum_flops"


def record_row(r: RoundRecord) -> str:
    acc = "" if r.accuracy is None else repr(float(r.accuracy))
    return f"{r.round},{r.stage},{acc},{r.bits_up},{r.bits_down},{r.cum_bits},{r.cum_flops}"


def sample_clients(round_idx: int, n_clients: int, k: int, seed: int) -> np.ndarray:
    """Uniform draw of ``k`` distinct clients, fixed by ``(seed, round_idx)``; sorted."""
    if not 1 <= k <= n_clients:
        raise ConfigError(f"cannot sample {k} of {n_clients} clients")
    rng = np.random.default_rng([seed, SAMPLE_STREAM, round_idx])
    return np.sort(rng.choice(n_clients, size=k, replace=False))


def client_rng(seed: int, round_idx: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, CLIENT_STREAM, round_idx, client_id])


def local_train(
    state: TrainState,
    data: Dataset,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    client_id: int = 0,
) -> RoundUpdate:
    """Mini-batch SGD on the trainable set; returns the change against ``state``."""
    n = len(data)
    if n == 0:
        raise PartitionError(f"client {client_id} has no samples")
    start = state.trainable()
    cur = state
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            _, grads = cur.grads(data.features[idx], data.labels[idx])
            cur = cur.step(grads, lr)
    end = cur.trainable()
    d = ParamDelta({k: end[k] - start[k] for k in start})
    flops = epochs * costs.epoch_flops(state, n, batch_size)
    return RoundUpdate(client_id, d, n, flops)


def aggregate(updates: Sequence[RoundUpdate], mode: str = "uniform") -> ParamDelta:
    """Mean of client deltas, summed in ascending client-id order."""
    if not updates:
        raise ProtocolError("no updates to aggregate")
    ups = sorted(updates, key=lambda u: u.client_id)
    keys = ups[0].delta.tensors.keys()
    for u in ups[1:]:
        if u.delta.tensors.keys() != keys:
            raise ProtocolError(f"update from client {u.client_id} has a different parameter set")
    out = {}
    if mode == "uniform":
        for k in keys:
            acc = ups[0].delta.tensors[k].copy()
            for u in ups[1:]:
                acc = acc + u.delta.tensors[k]
            out[k] = acc / len(ups)
    elif mode == "weighted":
        total = sum(u.sample_count for u in ups)
        if total <= 0:
            raise ProtocolError("weighted aggregation needs positive sample counts")
        for k in keys:
            acc = ups[0].sample_count * ups[0].delta.tensors[k]
            for u in ups[1:]:
                acc = acc + u.sample_count * u.delta.tensors[k]
            out[k] = acc / total
    else:
        raise ConfigError(f"unknown aggregation mode {mode!r}")
    return ParamDelta(out)


def evaluate(state: TrainState, test: Dataset) -> float:
    if len(test) == 0:
        return 0.0
    return float(np.mean(state.predict(test.features) == test.labels))


@dataclass
class RunLog:
    records: list[RoundRecord] = field(default_factory=list)
    ledger: costs.CostLedger = field(default_factory=costs.CostLedger)
    sparse_bits: int = 0  # uplink if mask stages used (index, value) encoding

    @property
    def last_round(self) -> int:
        return self.records[-1].round if self.records else 0


def run_rounds(
    state: TrainState,
    cfg: FedConfig,
    stage: int,
    rounds: int,
    train: Dataset,
    test: Dataset,
    partition: Partition,
    log_: RunLog,
    on_round: Callable[[int, TrainState], None] | None = None,
) -> TrainState:
    """``rounds`` synchronous FedAvg rounds on ``state``'s trainable set."""
    if partition.n_clients != cfg.n_clients:
        raise ConfigError(f"partition has {partition.n_clients} clients, config says {cfg.n_clients}")
    client_data = [train.subset(idx) for idx in partition.clients]
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    total_params = state.base.total_params
    try:
        for step in range(1, rounds + 1):
            g = log_.last_round + 1
            clients = sample_clients(g, cfg.n_clients, cfg.clients_per_round, cfg.seed)
            snapshot = state

            def work(cid: int, snapshot=snapshot, g=g) -> RoundUpdate:
                return local_train(
                    snapshot, client_data[cid], cfg.local_epochs, cfg.lr, cfg.batch_size,
                    client_rng(cfg.seed, g, int(cid)), int(cid),
                )

            if pool is None:
                updates = [work(int(c)) for c in clients]
            else:
                updates = list(pool.map(work, [int(c) for c in clients]))
            state = state.apply_update(aggregate(updates, cfg.aggregation))
            params = state.trainable_count()
            per_client = params * cfg.bits_per_param
            flops = [u.flops for u in updates]
            log_.ledger.record(
                costs.RoundCost(g, stage, len(updates), per_client, per_client, sum(flops), max(flops))
            )
            if state.mask is not None and not state.lora and not state.adapters:
                log_.sparse_bits += len(updates) * costs.sparse_bits(params, total_params, cfg.bits_per_param)
            acc = evaluate(state, test) if (step % cfg.eval_every == 0 or step == rounds) else None
            cum_bits, cum_flops = log_.ledger.cumulative()[-1]
            rec = RoundRecord(
                g, stage, tuple(int(c) for c in clients), acc,
                log_.ledger.rounds[-1].bits_up, log_.ledger.rounds[-1].bits_down, cum_bits, cum_flops,
            )
            log_.records.append(rec)
            if on_round is not None:
                on_round(g, state)
    finally:
        if pool is not None:
            pool.shutdown()
    return state


def stage1_state(cfg: FedConfig, w0: ModelParams) -> TrainState:
    """Dense (FLoRA/FFT) or server-seeded sparse (SLoRA/SFT) mask over W0."""
    if cfg.algorithm in ("flora", "fft"):
        return TrainState(w0, mask=full_mask(w0))
    if cfg.algorithm in ("slora", "sft"):
        mask = mask_generate(w0, cfg.d1, cfg.seed, cfg.mask_roles)
        if cfg.train_head:
            mask = mask.with_full_layers([w0.head_index])
        return TrainState(w0, mask=mask)
    raise ConfigError(f"algorithm {cfg.algorithm!r} has no stage 1")


@dataclass
class StageResult:
    state: TrainState
    log: RunLog
    initial_accuracy: float


def run_stage1(
    cfg: FedConfig, w0: ModelParams, train: Dataset, test: Dataset, partition: Partition, log_: RunLog | None = None
) -> StageResult:
    log_ = log_ if log_ is not None else RunLog(ledger=costs.CostLedger(cfg.bits_per_param))
    state = stage1_state(cfg, w0)
    acc0 = evaluate(state, test)
    state = run_rounds(state, cfg, 1, cfg.rounds_stage1, train, test, partition, log_)
    return StageResult(state, log_, acc0)


def carry_over(w0: ModelParams, w_r: ModelParams, plan: dict[int, int]) -> ModelParams:
    """Stage-2 base: W0 weights, stage-1 biases, and the stage-1 task head."""
    tensors = {}
    cur = w_r.tensors()
    for i in range(len(w0.layers)):
        tensors[f"layers.{i}.bias"] = cur[f"layers.{i}.bias"]
    h = w0.head_index
    if h not in plan:
        tensors[f"layers.{h}.weight"] = cur[f"layers.{h}.weight"]
    return w0.with_tensors(tensors)


def prime_state(cfg: FedConfig, w0: ModelParams, w_r: ModelParams) -> TrainState:
    """Stage-2 starting point: LoRA blocks from the truncated SVD of W_R - W0."""
    plan = cfg.peft("lora").plan_for(w0)
    base = carry_over(w0, w_r, plan)
    if cfg.stage2_init == "prime":
        blocks = lora_prime(delta(w_r, w0), plan, cfg.beta)
    else:
        blocks = {
            i: lora_init_random(w0.layers[i], r, resolve_beta(cfg.beta, r), cfg.seed, i) for i, r in sorted(plan.items())
        }
    mask = head_mask(w0) if cfg.train_head else None
    return TrainState(base, lora=blocks, mask=mask)


def run_stage2(
    cfg: FedConfig,
    w0: ModelParams,
    w_r: ModelParams,
    train: Dataset,
    test: Dataset,
    partition: Partition,
    log_: RunLog | None = None,
) -> StageResult:
    log_ = log_ if log_ is not None else RunLog(ledger=costs.CostLedger(cfg.bits_per_param))
    state = prime_state(cfg, w0, w_r)
    acc0 = evaluate(state, test)
    state = run_rounds(state, cfg, 2, cfg.rounds_stage2, train, test, partition, log_)
    return StageResult(state, log_, acc0)


@dataclass
class ExperimentReport:
    config: FedConfig
    records: list[RoundRecord]
    ledger: costs.CostLedger
    final_state: TrainState
    summary: dict
    stage1_state: TrainState | None = None

    def csv(self) -> str:
        lines = ["# fedpeft rounds v1", CSV_HEADER]
        lines += [record_row(r) for r in self.records]
        return "\n".join(lines) + "\n"


def config_dict(cfg: FedConfig) -> dict:
    d = asdict(cfg)
    d["rank_plan"] = None if cfg.rank_plan is None else [list(p) for p in cfg.rank_plan]
    d["mask_roles"] = list(cfg.mask_roles)
    d["lora_roles"] = list(cfg.lora_roles)
    return d


def run_experiment(
    cfg: FedConfig, w0: ModelParams, train: Dataset, test: Dataset, partition: Partition
) -> ExperimentReport:
    """Run one algorithm end to end and collect its round log and cost summary."""
    check_partition(partition, len(train))
    log_ = RunLog(ledger=costs.CostLedger(cfg.bits_per_param))
    algo = cfg.algorithm
    stage1 = None
    trainable_by_stage: dict[str, int] = {}
    if algo in ("fft", "sft", "flora", "slora"):
        first = stage1_state(cfg, w0)
        log_.records.append(RoundRecord(0, 0, (), evaluate(first, test), 0, 0, 0, 0))
        trainable_by_stage["stage1"] = first.trainable_count()
        stage1 = run_rounds(first, cfg, 1, cfg.rounds_stage1, train, test, partition, log_)
        final = stage1
        if algo in ("flora", "slora"):
            primed = prime_state(cfg, w0, stage1.base)
            trainable_by_stage["stage2"] = primed.trainable_count()
            final = run_rounds(primed, cfg, 2, cfg.rounds_stage2, train, test, partition, log_)
    elif algo in ("lora", "bitfit", "houlsby", "pfeiffer"):
        first = build_state(w0, cfg.peft(algo), cfg.seed)
        log_.records.append(RoundRecord(0, 0, (), evaluate(first, test), 0, 0, 0, 0))
        trainable_by_stage["stage2"] = first.trainable_count()
        final = run_rounds(first, cfg, 2, cfg.rounds_stage2, train, test, partition, log_)
    else:  # pragma: no cover - guarded by FedConfig
        raise ConfigError(f"unknown algorithm {algo!r}")

    accs = [r.accuracy for r in log_.records if r.accuracy is not None and r.round > 0]
    ledger = log_.ledger
    summary = {
        "algorithm": algo,
        "seed": cfg.seed,
        "total_rounds": log_.last_round,
        "rounds_stage1": cfg.rounds_stage1 if algo in ("fft", "sft", "flora", "slora") else 0,
        "rounds_stage2": cfg.rounds_stage2 if algo not in ("fft", "sft") else 0,
        "initial_accuracy": log_.records[0].accuracy,
        "final_accuracy": log_.records[-1].accuracy,
        "best_accuracy": max(accs) if accs else log_.records[0].accuracy,
        "trainable_params": final.trainable_count(),
        "trainable_by_stage": trainable_by_stage,
        "base_params": w0.total_params,
        "trainable_density": final.trainable_count() / w0.total_params,
        "bits_up": ledger.bits_up,
        "bits_down": ledger.bits_down,
        "total_bits": ledger.total_bits,
        "gbits": ledger.total_bits / 1e9,
        "sparse_uplink_bits": log_.sparse_bits,
        "flops": ledger.flops,
        "modeled_seconds": costs.wallclock_model(ledger),
        "formulas": dict(costs.FORMULAS),
        "config": config_dict(cfg),
    }
    return ExperimentReport(cfg, log_.records, ledger, final, summary, stage1)


def with_algorithm(cfg: FedConfig, algorithm: str, **changes) -> FedConfig:
    return replace(cfg, algorithm=algorithm, **changes)
