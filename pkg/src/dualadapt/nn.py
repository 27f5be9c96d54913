"""Dense feature extractors and classifier heads."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ContractError, ShapeError
from .numerics import Tensor

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    feature_dim: int = 32
    num_classes: int = 4
    g_hidden: tuple[int, ...] = (64,)
    f_hidden: tuple[int, ...] = ()
    activation: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "g_hidden", tuple(int(w) for w in self.g_hidden))
        object.__setattr__(self, "f_hidden", tuple(int(w) for w in self.f_hidden))
        dims = (self.input_dim, self.feature_dim, self.num_classes, *self.g_hidden, *self.f_hidden)
        if any(d < 1 for d in dims):
            raise ContractError("all model dimensions must be >= 1")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class ModelParams:
    """A chain of affine layers.

    ``activation`` is applied after every layer except the last; when
    ``activate_output`` is set it is applied after the last layer as well
    (feature extractors emit post-activation features, classifier heads emit
    logits).
    """

    layers: tuple[tuple[Tensor, Tensor], ...]
    activation: str = "relu"
    activate_output: bool = False

    def __post_init__(self):
        prev = None
        for w, b in self.layers:
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"bad layer shapes {w.shape} / {b.shape}")
            if prev is not None and w.shape[0] != prev:
                raise ShapeError("layer dimensions do not chain")
            prev = w.shape[1]

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def param_count(self) -> int:
        return int(sum(w.data.size + b.data.size for w, b in self.layers))

    def tensors(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors()]

    def with_arrays(self, arrays, requires_grad: bool = False) -> "ModelParams":
        it = iter(arrays)
        layers = tuple(
            (Tensor(next(it), requires_grad), Tensor(next(it), requires_grad)) for _ in self.layers
        )
        return ModelParams(layers, self.activation, self.activate_output)

    def trainable(self) -> "ModelParams":
        """Copy whose tensors are gradient leaves."""
        return self.with_arrays(self.arrays(), requires_grad=True)

    def frozen(self) -> "ModelParams":
        """Copy whose tensors never record gradients."""
        if not any(t.requires_grad for t in self.tensors()):
            return self
        return self.with_arrays(self.arrays())

    def equals(self, other: "ModelParams") -> bool:
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _glorot_layer(rng: np.random.Generator, n_in: int, n_out: int) -> tuple[Tensor, Tensor]:
    a = np.sqrt(6.0 / (n_in + n_out))
    return Tensor(rng.uniform(-a, a, size=(n_in, n_out))), Tensor(np.zeros(n_out))


def init_head(rng: np.random.Generator, dims: list[int], activation: str, activate_output: bool) -> ModelParams:
    layers = tuple(_glorot_layer(rng, i, o) for i, o in zip(dims[:-1], dims[1:]))
    return ModelParams(layers, activation, activate_output)


def init_model(config: ModelConfig) -> tuple[ModelParams, ModelParams]:
    """Glorot-uniform weights, zero biases; G first then F from one seeded stream."""
    rng = np.random.default_rng(config.init_seed)
    g_dims = [config.input_dim, *config.g_hidden, config.feature_dim]
    f_dims = [config.feature_dim, *config.f_hidden, config.num_classes]
    G = init_head(rng, g_dims, config.activation, activate_output=True)
    F = init_head(rng, f_dims, config.activation, activate_output=False)
    return G, F


def _activate(x: Tensor, activation: str) -> Tensor:
    return nx.relu(x) if activation == "relu" else nx.tanh(x)


def forward(m: ModelParams, x) -> Tensor:
    x = nx.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != m.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match model input dim {m.in_dim}")
    last = len(m.layers) - 1
    for i, (w, b) in enumerate(m.layers):
        x = nx.matmul(x, w) + b
        if i < last or m.activate_output:
            x = _activate(x, m.activation)
    return x


def forward_features(G: ModelParams, x) -> Tensor:
    return forward(G, x)


def forward_classifier(F: ModelParams, z) -> Tensor:
    """Class probabilities (softmax over the head's logits)."""
    return nx.softmax(forward(F, z))


def clone_classifier(F_g: ModelParams) -> ModelParams:
    return F_g.with_arrays([a.copy() for a in F_g.arrays()])


def _layers_to_json(m: ModelParams) -> list:
    return [[w.data.tolist(), b.data.tolist()] for w, b in m.layers]


def model_to_dict(m: ModelParams, config: ModelConfig | None = None) -> dict:
    out = {
        "activation": m.activation,
        "activate_output": m.activate_output,
        "layers": _layers_to_json(m),
    }
    if config is not None:
        out["config"] = asdict(config)
    return out


def model_from_dict(d: dict) -> ModelParams:
    layers = tuple((Tensor(w), Tensor(b)) for w, b in d["layers"])
    return ModelParams(layers, d.get("activation", "relu"), bool(d.get("activate_output", False)))


@dataclass
class Checkpoint:
    config: ModelConfig
    G: ModelParams
    F: ModelParams
    extra_heads: dict[str, ModelParams] = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    payload = {
        "config": asdict(ckpt.config),
        "G": model_to_dict(ckpt.G),
        "F": model_to_dict(ckpt.F),
        "heads": {k: model_to_dict(v) for k, v in sorted(ckpt.extra_heads.items())},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path) -> Checkpoint:
    d = json.loads(Path(path).read_text())
    cfg = ModelConfig(**d["config"])
    return Checkpoint(
        cfg,
        model_from_dict(d["G"]),
        model_from_dict(d["F"]),
        {k: model_from_dict(v) for k, v in d.get("heads", {}).items()},
    )
