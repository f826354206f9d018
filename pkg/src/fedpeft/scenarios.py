"""Desk-scale trend scenarios shared by the acceptance tests and ``scripts/``.

The world is a 20-class synthetic task with two clusters per class, a
pretrained 32-64-64-64-64-20 MLP as ``W0``, and 50 clients of which 10 train
per round. Only the partition and the per-run seed change between runs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .data import Dataset, Partition, partition_dirichlet, partition_pathological, split_train_test, synth_generate
from .fed import FedConfig, run_experiment
from .model import ModelConfig, ModelParams, pretrain

MODEL = ModelConfig(input_dim=32, embed_dim=64, hidden_dims=(64, 64), pre_dim=64, num_classes=20)
N_CLIENTS = 50
CLIENTS_PER_ROUND = 10
SEEDS = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class Scenario:
    samples: int = 6000
    modes: int = 2
    data_seed: int = 7
    pretrain_epochs: int = 5
    lr: float = 0.1


@lru_cache(maxsize=4)
def world(sc: Scenario = Scenario()) -> tuple[ModelParams, Dataset, Dataset]:
    source = synth_generate(MODEL.num_classes, MODEL.input_dim, 4000, seed=100)
    w0 = pretrain(MODEL, source, epochs=sc.pretrain_epochs, lr=0.1, seed=1)
    data = synth_generate(MODEL.num_classes, MODEL.input_dim, sc.samples, seed=sc.data_seed, modes=sc.modes)
    train, test = split_train_test(data, 0.6, 0)
    return w0, train, test


def partition(train: Dataset, kind: str, seed: int) -> Partition:
    if kind == "pathological":
        return partition_pathological(train, N_CLIENTS, 2, seed)
    if kind.startswith("dirichlet:"):
        return partition_dirichlet(train, N_CLIENTS, float(kind.split(":", 1)[1]), seed)
    raise ValueError(f"unknown partition kind {kind!r}")


def base_config(sc: Scenario = Scenario(), **changes) -> FedConfig:
    cfg = FedConfig(
        n_clients=N_CLIENTS,
        clients_per_round=CLIENTS_PER_ROUND,
        lr=sc.lr,
        eval_every=10,
    )
    return replace(cfg, **changes)


def final_accuracy(cfg: FedConfig, kind: str, sc: Scenario = Scenario()) -> float:
    w0, train, test = world(sc)
    rep = run_experiment(cfg, w0, train, test, partition(train, kind, cfg.seed))
    return float(rep.summary["final_accuracy"])


def across_seeds(cfg: FedConfig, kind: str, seeds=SEEDS, sc: Scenario = Scenario()) -> np.ndarray:
    return np.array([final_accuracy(replace(cfg, seed=s), kind, sc) for s in seeds])


def heterogeneity_gap(rounds: int, kind: str, seeds=SEEDS, sc: Scenario = Scenario()) -> tuple[np.ndarray, np.ndarray]:
    """Per-seed (FFT, LoRA) final accuracy after the same number of rounds."""
    fft = across_seeds(base_config(sc, algorithm="fft", rounds_stage1=rounds), kind, seeds, sc)
    lora = across_seeds(base_config(sc, algorithm="lora", rounds_stage2=rounds), kind, seeds, sc)
    return fft, lora


def slora_vs_lora(rounds_stage1: int, rounds_stage2: int, kind: str = "pathological", seeds=SEEDS, sc: Scenario = Scenario()):
    """Per-seed final accuracy of SLoRA and of zero-init LoRA with equal stage-2 rounds."""
    slora = across_seeds(
        base_config(sc, algorithm="slora", rounds_stage1=rounds_stage1, rounds_stage2=rounds_stage2), kind, seeds, sc
    )
    lora = across_seeds(base_config(sc, algorithm="lora", rounds_stage2=rounds_stage2), kind, seeds, sc)
    return slora, lora


def flora_stage1_sweep(stage1_rounds, rounds_stage2: int, kind: str = "pathological", seeds=SEEDS, sc: Scenario = Scenario()):
    """Per-seed FLoRA final accuracy for each stage-1 round count."""
    return {
        r1: across_seeds(base_config(sc, algorithm="flora", rounds_stage1=r1, rounds_stage2=rounds_stage2), kind, seeds, sc)
        for r1 in stage1_rounds
    }
