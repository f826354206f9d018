"""Trainable-parameter restrictions: LoRA, sparse masks, BitFit and adapters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, RankError, ShapeError
from .linalg import matmul, truncated_factors
from .model import ROLES, DenseLayer, ModelParams, ParamDelta, backward, forward

LORA_STREAM = 21
MASK_STREAM = 22
ADAPTER_STREAM = 23

LORA_INIT_STD = 0.02
ADAPTER_INIT_STD = 0.02

DEFAULT_LORA_ROLES = ("hidden", "pre_classification")
DEFAULT_MASK_ROLES = ("hidden", "pre_classification")

PLACEMENTS = {
    "houlsby": "after_hidden_each",
    "pfeiffer": "after_last_hidden",
    "after_hidden_each": "after_hidden_each",
    "after_last_hidden": "after_last_hidden",
}


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LoRABlock:
    A: np.ndarray  # r x k
    B: np.ndarray  # d x r
    r: int
    beta: float
    target_layer: int

    def __post_init__(self):
        if self.A.shape[0] != self.r or self.B.shape[1] != self.r:
            raise ShapeError(f"A {self.A.shape} and B {self.B.shape} do not have rank {self.r}")

    @property
    def scale(self) -> float:
        return self.beta / self.r

    def check_layer(self, layer: DenseLayer) -> None:
        if self.B.shape[0] != layer.out_dim or self.A.shape[1] != layer.in_dim:
            raise ShapeError(
                f"block {self.B.shape[0]}x{self.A.shape[1]} does not fit layer {layer.out_dim}x{layer.in_dim}"
            )

    @property
    def size(self) -> int:
        return self.A.size + self.B.size

    def dense(self) -> np.ndarray:
        return self.scale * (self.B @ self.A)


@dataclass(frozen=True)
class AdapterBlock:
    down: np.ndarray  # r x d
    down_bias: np.ndarray
    up: np.ndarray  # d x r
    up_bias: np.ndarray
    placement: str
    site: int

    @property
    def r(self) -> int:
        return self.down.shape[0]

    @property
    def size(self) -> int:
        return self.down.size + self.down_bias.size + self.up.size + self.up_bias.size


@dataclass(frozen=True)
class SparseMask:
    """Boolean mask over every base tensor; ``True`` marks a trainable entry."""

    masks: dict[str, np.ndarray]
    density: float
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "masks", {k: _readonly(v.astype(bool)) for k, v in self.masks.items()})

    @property
    def popcount(self) -> int:
        return int(sum(np.count_nonzero(m) for m in self.masks.values()))

    def layer_popcounts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for k, m in self.masks.items():
            i = int(k.split(".")[1])
            out[i] = out.get(i, 0) + int(np.count_nonzero(m))
        return out

    def active_layers(self) -> set[int]:
        return {i for i, c in self.layer_popcounts().items() if c}

    def weight_layers(self) -> set[int]:
        """Layers whose weight matrix has at least one trainable entry."""
        return {int(k.split(".")[1]) for k, m in self.masks.items() if k.endswith(".weight") and m.any()}

    def with_full_layers(self, indices: Iterable[int]) -> SparseMask:
        idx = set(indices)
        new = {k: (np.ones_like(m) if int(k.split(".")[1]) in idx else m) for k, m in self.masks.items()}
        return SparseMask(new, self.density, self.seed)


def lora_init_random(
    layer: DenseLayer, r: int, beta: float, seed: int, target_layer: int, std: float = LORA_INIT_STD
) -> LoRABlock:
    """Gaussian ``A``, zero ``B``: the attached block is a no-op at init."""
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= min(layer.weight.shape):
        raise RankError(f"rank {r!r} invalid for layer {target_layer} of shape {layer.weight.shape}")
    rng = np.random.default_rng([seed, LORA_STREAM, target_layer])
    a = rng.normal(0.0, std, size=(r, layer.in_dim))
    b = np.zeros((layer.out_dim, r))
    return LoRABlock(a, b, int(r), float(beta), target_layer)


def lora_forward(layer: DenseLayer, block: LoRABlock, x: np.ndarray) -> np.ndarray:
    """``W0 x + bias + (beta / r) B (A x)`` for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.in_dim,):
        raise ShapeError(f"input of shape {x.shape} for layer with {layer.in_dim} inputs")
    block.check_layer(layer)
    col = x[:, None]
    base = matmul(layer.weight, col)[:, 0] + layer.bias
    return base + block.scale * matmul(block.B, matmul(block.A, col))[:, 0]


def resolve_beta(beta: float | None, r: int) -> float:
    # None means beta = r, i.e. unit scaling for every block
    return float(r) if beta is None else float(beta)


def lora_prime(delta: ParamDelta, rank_plan: Mapping[int, int], beta: float | None) -> dict[int, LoRABlock]:
    """Blocks whose product reproduces the rank-r SVD approximation of each layer's delta."""
    blocks = {}
    for i, r in sorted(rank_plan.items()):
        key = f"layers.{i}.weight"
        if key not in delta.tensors:
            raise ConfigError(f"rank plan names layer {i} but the delta has no {key}")
        b_eff = resolve_beta(beta, r)
        try:
            b, a = truncated_factors(delta.tensors[key], r)
        except RankError as exc:
            raise RankError(f"layer {i}: {exc}") from exc
        blocks[i] = LoRABlock(a, b * (r / b_eff), int(r), b_eff, i)
    return blocks


def default_rank_plan(
    model: ModelParams, hidden_rank: int = 10, pre_rank: int = 18, roles: Iterable[str] = DEFAULT_LORA_ROLES
) -> dict[int, int]:
    plan = {}
    for i in model.layer_indices(roles):
        plan[i] = pre_rank if model.layers[i].role == "pre_classification" else hidden_rank
    return plan


def full_rank_plan(model: ModelParams, roles: Iterable[str] = ("embedding", "hidden", "pre_classification")) -> dict[int, int]:
    return {i: min(model.layers[i].weight.shape) for i in model.layer_indices(roles)}


def check_rank_plan(model: ModelParams, plan: Mapping[int, int]) -> None:
    for i, r in plan.items():
        if not 0 <= i < len(model.layers):
            raise ConfigError(f"rank plan names layer {i}, model has {len(model.layers)} layers")
        if not 1 <= r <= min(model.layers[i].weight.shape):
            raise RankError(f"rank {r} invalid for layer {i} of shape {model.layers[i].weight.shape}")


def popcount_for(density: float, size: int) -> int:
    """round-half-up of density * size, never below one."""
    return max(1, int(math.floor(density * size + 0.5)))


def mask_generate(
    model: ModelParams, density: float, seed: int, roles: Iterable[str] = DEFAULT_MASK_ROLES
) -> SparseMask:
    """Random data-independent mask, same density in every maskable layer.

    Each maskable layer (weight and bias together) gets exactly
    ``popcount_for(density, size)`` ones, drawn without replacement.
    """
    if not 0.0 < density <= 1.0:
        raise ConfigError(f"density must be in (0, 1], got {density}")
    roles = set(roles)
    unknown = roles - set(ROLES)
    if unknown:
        raise ConfigError(f"unknown roles {sorted(unknown)}")
    masks = {}
    for i, layer in enumerate(model.layers):
        wkey, bkey = f"layers.{i}.weight", f"layers.{i}.bias"
        if layer.role not in roles:
            masks[wkey] = np.zeros(layer.weight.shape, bool)
            masks[bkey] = np.zeros(layer.bias.shape, bool)
            continue
        flat = np.zeros(layer.size, bool)
        if density == 1.0:
            flat[:] = True
        else:
            rng = np.random.default_rng([seed, MASK_STREAM, i])
            flat[rng.permutation(layer.size)[: popcount_for(density, layer.size)]] = True
        masks[wkey] = flat[: layer.weight.size].reshape(layer.weight.shape)
        masks[bkey] = flat[layer.weight.size :]
    return SparseMask(masks, float(density), seed)


def full_mask(model: ModelParams) -> SparseMask:
    return mask_generate(model, 1.0, 0, roles=ROLES)


def empty_mask(model: ModelParams) -> SparseMask:
    return SparseMask({k: np.zeros(v.shape, bool) for k, v in model.tensors().items()}, 0.0, None)


def bitfit_mask(model: ModelParams) -> SparseMask:
    masks = {k: np.full(v.shape, k.endswith(".bias")) for k, v in model.tensors().items()}
    n_bias = sum(layer.bias.size for layer in model.layers)
    return SparseMask(masks, n_bias / model.total_params, None)


def masked_step(model: ModelParams, grads: ParamDelta, mask: SparseMask, lr: float) -> ModelParams:
    """SGD step restricted to the mask; entries outside it keep their exact bits."""
    base = model.tensors()
    new = {}
    for k, m in mask.masks.items():
        if k not in base or m.shape != base[k].shape:
            raise ShapeError(f"mask entry {k} does not match the model")
        if not m.any():
            continue
        g = grads.tensors.get(k)
        if g is None:
            raise ShapeError(f"no gradient for trainable tensor {k}")
        if g.shape != m.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, expected {m.shape}")
        new[k] = np.where(m, base[k] - lr * g, base[k])
    return model.with_tensors(new)


def adapter_sites(model: ModelParams, placement: str) -> list[int]:
    kind = PLACEMENTS.get(placement)
    if kind is None:
        raise ConfigError(f"unknown adapter placement {placement!r}")
    if kind == "after_hidden_each":
        return model.layer_indices(("hidden", "pre_classification"))
    hidden = model.layer_indices(("hidden",))
    return hidden[-1:] if hidden else model.layer_indices(("pre_classification",))


def adapter_attach(
    model: ModelParams, r: int, placement: str, seed: int, std: float = ADAPTER_INIT_STD
) -> dict[int, AdapterBlock]:
    """Residual bottlenecks ``x + up(relu(down(x)))``; zero ``up`` makes them no-ops at init."""
    if r < 1:
        raise ConfigError(f"adapter rank must be >= 1, got {r}")
    blocks = {}
    for site in adapter_sites(model, placement):
        d = model.layers[site].out_dim
        rng = np.random.default_rng([seed, ADAPTER_STREAM, site])
        blocks[site] = AdapterBlock(
            down=rng.normal(0.0, std, size=(r, d)),
            down_bias=np.zeros(r),
            up=np.zeros((d, r)),
            up_bias=np.zeros(d),
            placement=PLACEMENTS[placement],
            site=site,
        )
    return blocks


@dataclass(frozen=True)
class TrainState:
    """Base weights plus whatever a PEFT method lets clients change.

    ``mask`` selects the trainable base entries (``None``: base frozen);
    LoRA blocks and adapters are always fully trainable.
    """

    base: ModelParams
    lora: dict[int, LoRABlock] = field(default_factory=dict)
    adapters: dict[int, AdapterBlock] = field(default_factory=dict)
    mask: SparseMask | None = None

    def forward(self, x: np.ndarray):
        return forward(self.base, x, self.lora, self.adapters)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x)[0], axis=1)

    def weight_grad_layers(self) -> set[int]:
        return self.mask.weight_layers() if self.mask is not None else set()

    def grads(self, x: np.ndarray, labels: np.ndarray) -> tuple[float, ParamDelta]:
        _, cache = self.forward(x)
        return backward(self.base, cache, labels, weight_grads=self.weight_grad_layers())

    def trainable(self) -> dict[str, np.ndarray]:
        out = {}
        if self.mask is not None:
            base = self.base.tensors()
            for k, m in self.mask.masks.items():
                if m.any():
                    out[k] = base[k]
        for i, blk in sorted(self.lora.items()):
            out[f"lora.{i}.A"] = blk.A
            out[f"lora.{i}.B"] = blk.B
        for i, ad in sorted(self.adapters.items()):
            out[f"adapter.{i}.down"] = ad.down
            out[f"adapter.{i}.down_bias"] = ad.down_bias
            out[f"adapter.{i}.up"] = ad.up
            out[f"adapter.{i}.up_bias"] = ad.up_bias
        return out

    def trainable_count(self) -> int:
        n = self.mask.popcount if self.mask is not None else 0
        n += sum(b.size for b in self.lora.values())
        n += sum(a.size for a in self.adapters.values())
        return n

    def replace(self, tensors: Mapping[str, np.ndarray]) -> TrainState:
        base_part = {k: v for k, v in tensors.items() if k.startswith("layers.")}
        base = self.base.with_tensors(base_part) if base_part else self.base
        lora = dict(self.lora)
        for i, blk in self.lora.items():
            a = tensors.get(f"lora.{i}.A", blk.A)
            b = tensors.get(f"lora.{i}.B", blk.B)
            if a is not blk.A or b is not blk.B:
                lora[i] = LoRABlock(a, b, blk.r, blk.beta, blk.target_layer)
        adapters = dict(self.adapters)
        for i, ad in self.adapters.items():
            parts = {n: tensors.get(f"adapter.{i}.{n}", getattr(ad, n)) for n in ("down", "down_bias", "up", "up_bias")}
            adapters[i] = AdapterBlock(**parts, placement=ad.placement, site=ad.site)
        return TrainState(base, lora, adapters, self.mask)

    def step(self, grads: ParamDelta, lr: float) -> TrainState:
        """One SGD step on the trainable set only."""
        new_base = masked_step(self.base, grads, self.mask, lr) if self.mask is not None else self.base
        extra = {}
        for k, v in self.trainable().items():
            if k.startswith("layers."):
                continue
            extra[k] = v - lr * grads.tensors[k]
        state = TrainState(new_base, self.lora, self.adapters, self.mask)
        return state.replace(extra) if extra else state

    def apply_update(self, d: ParamDelta) -> TrainState:
        """Add an aggregated update; base entries outside the mask stay bit-exact."""
        cur = self.trainable()
        if set(d.tensors) - set(cur):
            raise ShapeError(f"update touches non-trainable tensors {sorted(set(d.tensors) - set(cur))}")
        new = {}
        for k, v in d.tensors.items():
            updated = cur[k] + v
            if k.startswith("layers."):
                updated = np.where(self.mask.masks[k], updated, cur[k])
            new[k] = updated
        return self.replace(new)


@dataclass(frozen=True)
class PeftConfig:
    method: str = "lora"  # fft | sft | bitfit | lora | houlsby | pfeiffer
    density: float = 0.1
    rank_plan: tuple[tuple[int, int], ...] | None = None
    hidden_rank: int = 10
    pre_rank: int = 18
    beta: float | None = None
    adapter_rank: int = 8
    train_head: bool = True
    mask_roles: tuple[str, ...] = DEFAULT_MASK_ROLES
    lora_roles: tuple[str, ...] = DEFAULT_LORA_ROLES

    def plan_for(self, model: ModelParams) -> dict[int, int]:
        if self.rank_plan is not None:
            plan = dict(self.rank_plan)
        else:
            plan = default_rank_plan(model, self.hidden_rank, self.pre_rank, self.lora_roles)
        check_rank_plan(model, plan)
        return plan


METHODS = ("fft", "sft", "bitfit", "lora", "houlsby", "pfeiffer")


def head_mask(model: ModelParams) -> SparseMask:
    return empty_mask(model).with_full_layers([model.head_index])


def build_state(model: ModelParams, cfg: PeftConfig, seed: int) -> TrainState:
    """Fresh trainable state for a method, attached to ``model``."""
    head = [model.head_index] if cfg.train_head else []
    if cfg.method == "fft":
        return TrainState(model, mask=full_mask(model))
    if cfg.method == "sft":
        return TrainState(model, mask=mask_generate(model, cfg.density, seed, cfg.mask_roles).with_full_layers(head))
    if cfg.method == "bitfit":
        return TrainState(model, mask=bitfit_mask(model).with_full_layers(head))
    mask = head_mask(model) if cfg.train_head else None
    if cfg.method == "lora":
        blocks = {
            i: lora_init_random(model.layers[i], r, resolve_beta(cfg.beta, r), seed, i)
            for i, r in sorted(cfg.plan_for(model).items())
        }
        return TrainState(model, lora=blocks, mask=mask)
    if cfg.method in ("houlsby", "pfeiffer"):
        return TrainState(model, adapters=adapter_attach(model, cfg.adapter_rank, cfg.method, seed), mask=mask)
    raise ConfigError(f"unknown PEFT method {cfg.method!r}")


def trainable_count(model: ModelParams, cfg: PeftConfig) -> tuple[int, float]:
    """Parameters local training may modify, and their share of the base model size."""
    n = build_state(model, cfg, seed=0).trainable_count()
    return n, n / model.total_params
