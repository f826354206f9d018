"""Analytic communication, computation and wall-clock accounting.

Formulas used throughout (also emitted in every report header):

* bits per round = params x participants x bits_per_param x directions
* sparse (index, value) encoding = popcount x (bits_per_param + ceil(log2 total))
* FLOPs count 2 per multiply-add of every matrix product the kernels issue
* wall clock per round = up_bits / bw_up + down_bits / bw_down
  + max client FLOPs / flops_rate (synchronous critical path)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError
from .peft import TrainState

DEFAULT_BITS_PER_PARAM = 32
DEFAULT_BANDWIDTH = 5e6  # bit/s, uplink and downlink
DEFAULT_FLOPS_RATE = 1e9

FORMULAS = {
    "comm_bits": "trainable_params * participants * bits_per_param * directions",
    "sparse_bits": "popcount * (bits_per_param + ceil(log2(total_params)))",
    "flops": "2*m*k*n per (m x k)(k x n) product issued in forward/backward",
    "wallclock": "sum_rounds(up_bits_per_client/bw_up + down_bits_per_client/bw_down + max_client_flops/flops_rate)",
}


def comm_bits(update_params: int, participants: int, bits_per_param: int = DEFAULT_BITS_PER_PARAM, directions: int = 2) -> int:
    if min(update_params, participants, bits_per_param, directions) < 0:
        raise ConfigError("communication factors must be nonnegative")
    return update_params * participants * bits_per_param * directions


def index_bits(total_params: int) -> int:
    return max(1, math.ceil(math.log2(total_params)))


def sparse_bits(popcount: int, total_params: int, bits_per_param: int = DEFAULT_BITS_PER_PARAM) -> int:
    return popcount * (bits_per_param + index_bits(total_params))


def step_flops(state: TrainState, batch_size: int, backward: bool = True) -> int:
    """FLOPs of one forward (and backward) pass over a batch, matching the kernels exactly."""
    n = batch_size
    wanted = state.weight_grad_layers()
    total = 0
    for i, layer in enumerate(state.base.layers):
        k, d = layer.in_dim, layer.out_dim
        total += 2 * n * k * d
        blk = state.lora.get(i)
        if blk is not None:
            total += 2 * n * k * blk.r + 2 * n * blk.r * d
        ad = state.adapters.get(i)
        if ad is not None:
            total += 4 * n * d * ad.r
        if not backward:
            continue
        if ad is not None:
            total += 8 * n * d * ad.r
        if i in wanted:
            total += 2 * n * k * d
        if blk is not None:
            total += 4 * n * d * blk.r + 2 * n * blk.r * k
            if i > 0:
                total += 2 * n * blk.r * k
        if i > 0:
            total += 2 * n * d * k
    return total


def flops_estimate(state: TrainState, batch_size: int) -> int:
    """FLOPs of one local training step (forward + backward) on a full batch."""
    return step_flops(state, batch_size, backward=True)


def epoch_flops(state: TrainState, n_samples: int, batch_size: int) -> int:
    full, rest = divmod(n_samples, batch_size)
    total = full * step_flops(state, batch_size)
    if rest:
        total += step_flops(state, rest)
    return total


@dataclass(frozen=True)
class RoundCost:
    round: int
    stage: int
    participants: int
    up_bits_per_client: int
    down_bits_per_client: int
    flops_total: int
    flops_critical: int  # slowest sampled client

    @property
    def bits_up(self) -> int:
        return self.up_bits_per_client * self.participants

    @property
    def bits_down(self) -> int:
        return self.down_bits_per_client * self.participants


@dataclass
class CostLedger:
    bits_per_param: int = DEFAULT_BITS_PER_PARAM
    rounds: list[RoundCost] = field(default_factory=list)

    def record(self, entry: RoundCost) -> None:
        if self.rounds and entry.round <= self.rounds[-1].round:
            raise ValueError("rounds must be recorded in increasing order")
        if entry.up_bits_per_client % self.bits_per_param or entry.down_bits_per_client % self.bits_per_param:
            raise ValueError("bit counts must be whole parameters")
        self.rounds.append(entry)

    @property
    def bits_up(self) -> int:
        return sum(r.bits_up for r in self.rounds)

    @property
    def bits_down(self) -> int:
        return sum(r.bits_down for r in self.rounds)

    @property
    def total_bits(self) -> int:
        return self.bits_up + self.bits_down

    @property
    def flops(self) -> int:
        return sum(r.flops_total for r in self.rounds)

    def cumulative(self) -> list[tuple[int, int]]:
        """(cumulative bits, cumulative FLOPs) after each recorded round."""
        out, bits, flops = [], 0, 0
        for r in self.rounds:
            bits += r.bits_up + r.bits_down
            flops += r.flops_total
            out.append((bits, flops))
        return out


def wallclock_model(
    ledger: CostLedger,
    bandwidth_up: float = DEFAULT_BANDWIDTH,
    bandwidth_down: float = DEFAULT_BANDWIDTH,
    flops_rate: float = DEFAULT_FLOPS_RATE,
) -> float:
    """Modeled seconds along the synchronous critical path."""
    if bandwidth_up <= 0 or bandwidth_down <= 0 or flops_rate <= 0:
        raise ConfigError("bandwidths and flops_rate must be positive")
    total = 0.0
    for r in ledger.rounds:
        total += r.up_bits_per_client / bandwidth_up + r.down_bits_per_client / bandwidth_down
        total += r.flops_critical / flops_rate
    return total
