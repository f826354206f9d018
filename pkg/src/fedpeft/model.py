"""Small dense classifier with hand-written forward and backward passes.

The network stands in for a pre-trained transformer: an embedding-role
linear layer, relu hidden layers, a pre-classification layer and a
classification head. LoRA blocks (parallel) and bottleneck adapters (serial)
can be attached per layer at call time without touching the base weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .linalg import matmul

if TYPE_CHECKING:
    from .peft import AdapterBlock, LoRABlock

ROLES = ("embedding", "hidden", "pre_classification", "classification")
ACTIVATIONS = ("relu", "none")

# RNG stream tags, combined with the user seed via SeedSequence
INIT_STREAM = 11
PRETRAIN_STREAM = 12


@dataclass(frozen=True)
class DenseLayer:
    weight: np.ndarray  # out x in
    bias: np.ndarray
    role: str
    activation: str = "relu"

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("weight must be 2-D and bias 1-D")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError(f"bias length {self.bias.shape[0]} != weight rows {self.weight.shape[0]}")
        if self.role not in ROLES:
            raise ConfigError(f"unknown layer role {self.role!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def size(self) -> int:
        return self.weight.size + self.bias.size


@dataclass(frozen=True)
class ModelParams:
    layers: tuple[DenseLayer, ...]
    input_dim: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        prev = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.in_dim != prev:
                raise ShapeError(f"layer {i} expects {layer.in_dim} inputs, previous layer gives {prev}")
            prev = layer.out_dim
        if prev != self.num_classes:
            raise ShapeError(f"last layer has {prev} outputs, expected {self.num_classes} classes")
        roles = [layer.role for layer in self.layers]
        if roles.count("classification") != 1 or roles.count("pre_classification") != 1:
            raise ConfigError("model needs exactly one pre_classification and one classification layer")
        if roles[-1] != "classification":
            raise ConfigError("classification layer must be last")

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layers.{i}.weight"] = layer.weight
            out[f"layers.{i}.bias"] = layer.bias
        return out

    def with_tensors(self, tensors: Mapping[str, np.ndarray]) -> ModelParams:
        """Copy of the model with some tensors replaced by name."""
        layers = []
        for i, layer in enumerate(self.layers):
            w = tensors.get(f"layers.{i}.weight", layer.weight)
            b = tensors.get(f"layers.{i}.bias", layer.bias)
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ShapeError(f"replacement for layer {i} has the wrong shape")
            layers.append(DenseLayer(w, b, layer.role, layer.activation))
        return ModelParams(tuple(layers), self.input_dim, self.num_classes)

    def layer_indices(self, roles: Iterable[str]) -> list[int]:
        roles = set(roles)
        return [i for i, layer in enumerate(self.layers) if layer.role in roles]

    @property
    def head_index(self) -> int:
        return len(self.layers) - 1

    @property
    def total_params(self) -> int:
        return sum(layer.size for layer in self.layers)


@dataclass(frozen=True)
class ParamDelta:
    """Named arrays of differences (or gradients) for some parameter set."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def _check(self, other: ParamDelta) -> None:
        if self.tensors.keys() != other.tensors.keys():
            raise ShapeError("parameter sets differ")
        for k, v in self.tensors.items():
            if v.shape != other.tensors[k].shape:
                raise ShapeError(f"shape mismatch for {k}: {v.shape} vs {other.tensors[k].shape}")

    def __add__(self, other: ParamDelta) -> ParamDelta:
        self._check(other)
        return ParamDelta({k: v + other.tensors[k] for k, v in self.tensors.items()})

    def scaled(self, c: float) -> ParamDelta:
        return ParamDelta({k: c * v for k, v in self.tensors.items()})

    def zeros_like(self) -> ParamDelta:
        return ParamDelta({k: np.zeros_like(v) for k, v in self.tensors.items()})

    def nonzero_count(self) -> int:
        return int(sum(np.count_nonzero(v) for v in self.tensors.values()))

    def __len__(self) -> int:
        return len(self.tensors)


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 32
    embed_dim: int = 64
    hidden_dims: tuple[int, ...] = (64, 64)
    pre_dim: int = 64
    num_classes: int = 20

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        dims = (self.input_dim, self.embed_dim, *self.hidden_dims, self.pre_dim, self.num_classes)
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"all layer widths must be positive, got {dims}")


def init_layer(in_dim: int, out_dim: int, role: str, activation: str, seed: int, index: int) -> DenseLayer:
    rng = np.random.default_rng([seed, INIT_STREAM, index])
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    weight = rng.uniform(-limit, limit, size=(out_dim, in_dim))
    return DenseLayer(weight, np.zeros(out_dim), role, activation)


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases; layer ``i`` draws from its own stream."""
    spec = [(config.input_dim, config.embed_dim, "embedding", "none")]
    prev = config.embed_dim
    for h in config.hidden_dims:
        spec.append((prev, h, "hidden", "relu"))
        prev = h
    spec.append((prev, config.pre_dim, "pre_classification", "relu"))
    spec.append((config.pre_dim, config.num_classes, "classification", "none"))
    layers = tuple(init_layer(*s, seed=seed, index=i) for i, s in enumerate(spec))
    return ModelParams(layers, config.input_dim, config.num_classes)


@dataclass
class Cache:
    """Activations saved by :func:`forward` for :func:`backward`."""

    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation of each layer
    post: list[np.ndarray]  # activation output, before any adapter
    lora_mid: dict[int, np.ndarray]
    adapter_mid: dict[int, np.ndarray]
    logits: np.ndarray
    lora: Mapping[int, LoRABlock]
    adapters: Mapping[int, AdapterBlock]


def _act(z: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(z, 0.0) if activation == "relu" else z


def forward(
    model: ModelParams,
    batch: np.ndarray,
    lora: Mapping[int, LoRABlock] | None = None,
    adapters: Mapping[int, AdapterBlock] | None = None,
) -> tuple[np.ndarray, Cache]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"batch shape {x.shape} does not match input_dim {model.input_dim}")
    lora = lora or {}
    adapters = adapters or {}
    cache = Cache([], [], [], {}, {}, x, lora, adapters)
    a = x
    for i, layer in enumerate(model.layers):
        cache.inputs.append(a)
        z = matmul(a, layer.weight.T) + layer.bias
        block = lora.get(i)
        if block is not None:
            mid = matmul(a, block.A.T)
            cache.lora_mid[i] = mid
            z = z + block.scale * matmul(mid, block.B.T)
        cache.pre.append(z)
        a = _act(z, layer.activation)
        cache.post.append(a)
        ad = adapters.get(i)
        if ad is not None:
            h = matmul(a, ad.down.T) + ad.down_bias
            cache.adapter_mid[i] = h
            a = a + (matmul(np.maximum(h, 0.0), ad.up.T) + ad.up_bias)
    cache.logits = a
    return a, cache


def predict(model: ModelParams, batch: np.ndarray, lora=None, adapters=None) -> np.ndarray:
    logits, _ = forward(model, batch, lora, adapters)
    return np.argmax(logits, axis=1)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise DataError(f"labels must be integers in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def backward(
    model: ModelParams,
    cache: Cache,
    labels: np.ndarray,
    weight_grads: Iterable[int] | None = None,
) -> tuple[float, ParamDelta]:
    """Loss and gradients for every parameter touched by the forward pass.

    ``weight_grads`` limits which base weight matrices get a gradient (``None``
    means all); skipping frozen ones keeps the FLOP count honest. Bias, LoRA
    and adapter gradients are always returned.
    """
    loss, d = cross_entropy(cache.logits, labels)
    wanted = set(range(len(model.layers))) if weight_grads is None else set(weight_grads)
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        ad = cache.adapters.get(i)
        if ad is not None:
            h = cache.adapter_mid[i]
            g = np.maximum(h, 0.0)
            grads[f"adapter.{i}.up"] = matmul(d.T, g)
            grads[f"adapter.{i}.up_bias"] = d.sum(axis=0)
            dh = matmul(d, ad.up) * (h > 0.0)
            grads[f"adapter.{i}.down"] = matmul(dh.T, cache.post[i])
            grads[f"adapter.{i}.down_bias"] = dh.sum(axis=0)
            d = d + matmul(dh, ad.down)
        if layer.activation == "relu":
            d = d * (cache.pre[i] > 0.0)
        a = cache.inputs[i]
        if i in wanted:
            grads[f"layers.{i}.weight"] = matmul(d.T, a)
        grads[f"layers.{i}.bias"] = d.sum(axis=0)
        block = cache.lora.get(i)
        d_in = None
        if block is not None:
            mid = cache.lora_mid[i]
            grads[f"lora.{i}.B"] = block.scale * matmul(d.T, mid)
            d_mid = block.scale * matmul(d, block.B)
            grads[f"lora.{i}.A"] = matmul(d_mid.T, a)
            if i > 0:
                d_in = matmul(d_mid, block.A)
        if i > 0:
            d_base = matmul(d, layer.weight)
            d = d_base if d_in is None else d_base + d_in
    return loss, ParamDelta(grads)


def delta(current: ModelParams, origin: ModelParams) -> ParamDelta:
    cur, org = current.tensors(), origin.tensors()
    if cur.keys() != org.keys() or any(cur[k].shape != org[k].shape for k in cur):
        raise ShapeError("models are not shape-congruent")
    return ParamDelta({k: cur[k] - org[k] for k in cur})


def apply(
    model: ModelParams,
    d: ParamDelta,
    scale: float = 1.0,
    where: Mapping[str, np.ndarray] | None = None,
) -> ModelParams:
    """``model + scale * d``; with ``where``, entries outside it are copied bit-exactly."""
    base = model.tensors()
    new = {}
    for k, v in d.tensors.items():
        if k not in base:
            raise ShapeError(f"delta entry {k} is not a model parameter")
        if v.shape != base[k].shape:
            raise ShapeError(f"shape mismatch for {k}: {v.shape} vs {base[k].shape}")
        updated = base[k] + scale * v
        if where is not None and k in where:
            updated = np.where(where[k], updated, base[k])
        elif where is not None:
            updated = base[k]
        new[k] = updated
    return model.with_tensors(new)


def sgd_step(model: ModelParams, grads: ParamDelta, lr: float) -> ModelParams:
    base = model.tensors()
    return model.with_tensors({k: base[k] - lr * g for k, g in grads.tensors.items() if k in base})


def accuracy(model: ModelParams, features: np.ndarray, labels: np.ndarray, lora=None, adapters=None) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(model, features, lora, adapters) == labels))


def pretrain(
    config: ModelConfig,
    source,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    fresh_head: bool = True,
) -> ModelParams:
    """Centralized SGD on a source task to manufacture pre-trained weights.

    With ``fresh_head`` the classification layer is re-drawn from its initial
    stream afterwards, as a new task head would be. ``epochs=0`` returns the
    seeded initialization unchanged.
    """
    model = init_model(config, seed)
    if source.features.shape[1] != config.input_dim:
        raise ShapeError("source features do not match the model input dimension")
    rng = np.random.default_rng([seed, PRETRAIN_STREAM])
    n = len(source.labels)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, cache = forward(model, source.features[idx])
            _, grads = backward(model, cache, source.labels[idx])
            model = sgd_step(model, grads, lr)
    if fresh_head and epochs > 0:
        h = model.head_index
        old = model.layers[h]
        head = init_layer(old.in_dim, old.out_dim, old.role, old.activation, seed=seed, index=h)
        model = ModelParams(model.layers[:h] + (head,), model.input_dim, model.num_classes)
    return model
