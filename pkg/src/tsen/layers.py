"""TSEN building blocks, model assembly and the ablation variants.

Parameter names follow ``layer{t}.{block}.{tensor}``. Layer 0 only holds the
readout gate for the raw input features; layers 1..num_layers each hold a
graph convolution, the encoder blocks their variant uses and a readout gate.
The classifier lives under ``head.``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .graph import Graph
from .tensor import Tape, Tensor

VARIANTS = ("GCN", "SBGCN", "SBGCN_FFN", "SBGCN_SA", "GCN_Trans", "TSEN")
CHECKPOINT_VERSION = 1

# (snowball history, attention block, ffn block) per variant
_WIRING = {
    "GCN": (False, False, False),
    "SBGCN": (True, False, False),
    "SBGCN_FFN": (True, False, True),
    "SBGCN_SA": (True, True, False),
    "GCN_Trans": (False, True, True),
    "TSEN": (True, True, True),
}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "TSEN"
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: Optional[int] = None  # None -> 4 * hidden_dim
    dropout_transformer: float = 0.1
    dropout_mlp: float = 0.5
    mlp_hidden: int = 64
    conv_activation: str = "tanh"
    ffn_activation: str = "gelu"
    include_input_readout: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be at least 1")
        for name in ("hidden_dim", "num_heads", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.ffn_dim is not None and self.ffn_dim < 1:
            raise ValueError("ffn_dim must be positive")
        for name in ("dropout_transformer", "dropout_mlp"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        for name in ("conv_activation", "ffn_activation"):
            if getattr(self, name) not in T.ACTIVATIONS:
                raise ValueError(f"{name} must be one of {T.ACTIVATIONS}")

    @property
    def ffn_width(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.hidden_dim

    @property
    def snowball(self) -> bool:
        return _WIRING[self.variant][0]

    @property
    def uses_attention(self) -> bool:
        return _WIRING[self.variant][1]

    @property
    def uses_ffn(self) -> bool:
        return _WIRING[self.variant][2]

    def conv_input_dim(self, layer: int, feature_dim: int) -> int:
        """Input width of the layer-``layer`` convolution (layers count from 1)."""
        if layer == 1:
            return feature_dim
        if self.snowball:
            return feature_dim + (layer - 1) * self.hidden_dim
        return self.hidden_dim

    def readout_dims(self, feature_dim: int) -> list[int]:
        dims = [self.hidden_dim] * self.num_layers
        return ([feature_dim] if self.include_input_readout else []) + dims

    def representation_dim(self, feature_dim: int) -> int:
        return sum(self.readout_dims(feature_dim))

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model keys {sorted(unknown)}")
        return cls(**d)


class ModelParams:
    """Named trainable tensors for one model instance."""

    def __init__(self, tensors: Mapping[str, Tensor], config: ModelConfig, feature_dim: int, class_count: int):
        self.tensors: dict[str, Tensor] = dict(tensors)
        self.config = config
        self.feature_dim = feature_dim
        self.class_count = class_count

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def tracked(self, tape: Tape) -> dict[str, Tensor]:
        return {name: tape.track(t) for name, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.values.copy(), requires_grad=v.requires_grad)
                            for k, v in self.tensors.items()},
                           self.config, self.feature_dim, self.class_count)

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.values).tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        """Write an ``.npz`` archive: one row-major array per parameter name."""
        arrays = {name: t.values for name, t in self.tensors.items()}
        meta = {"version": CHECKPOINT_VERSION, "config": asdict(self.config),
                "feature_dim": self.feature_dim, "class_count": self.class_count,
                "order": list(self.tensors)}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "ModelParams":
        with np.load(Path(path), allow_pickle=False) as z:
            if "__meta__" not in z:
                raise ValueError(f"{path}: not a parameter checkpoint (no metadata)")
            meta = json.loads(str(z["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
            tensors = {name: Tensor(np.array(z[name]), requires_grad=True) for name in meta["order"]}
        return cls(tensors, ModelConfig.from_dict(meta["config"]), meta["feature_dim"], meta["class_count"])


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(config: ModelConfig, feature_dim: int, class_count: int, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit/zero LayerNorm affine."""
    rng = np.random.default_rng(seed)
    d = config.hidden_dim
    shapes: dict[str, tuple[str, tuple[int, int]]] = {}

    def gate(prefix: str, width: int):
        shapes[f"{prefix}.readout.w1"] = ("w", (width, d))
        shapes[f"{prefix}.readout.b1"] = ("zero", (1, d))
        # no output bias: softmax over nodes ignores a shared shift
        shapes[f"{prefix}.readout.w2"] = ("w", (d, 1))

    if config.include_input_readout:
        gate("layer0", feature_dim)
    for t in range(1, config.num_layers + 1):
        p = f"layer{t}"
        shapes[f"{p}.conv.weight"] = ("w", (config.conv_input_dim(t, feature_dim), d))
        if config.uses_attention:
            shapes[f"{p}.ln1.gamma"] = ("one", (1, d))
            shapes[f"{p}.ln1.beta"] = ("zero", (1, d))
            for m in ("q", "k", "v", "out"):
                shapes[f"{p}.attn.{m}"] = ("w", (d, d))
        if config.uses_ffn:
            shapes[f"{p}.ln2.gamma"] = ("one", (1, d))
            shapes[f"{p}.ln2.beta"] = ("zero", (1, d))
            shapes[f"{p}.ffn.w1"] = ("w", (d, config.ffn_width))
            shapes[f"{p}.ffn.b1"] = ("zero", (1, config.ffn_width))
            shapes[f"{p}.ffn.w2"] = ("w", (config.ffn_width, d))
            shapes[f"{p}.ffn.b2"] = ("zero", (1, d))
        gate(p, d)
    shapes["head.fc1.weight"] = ("w", (config.representation_dim(feature_dim), config.mlp_hidden))
    shapes["head.fc1.bias"] = ("zero", (1, config.mlp_hidden))
    shapes["head.fc2.weight"] = ("w", (config.mlp_hidden, class_count))
    shapes["head.fc2.bias"] = ("zero", (1, class_count))

    tensors = {}
    for name, (kind, shape) in shapes.items():
        if kind == "w":
            values = glorot(rng, *shape)
        elif kind == "one":
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        tensors[name] = Tensor(values, requires_grad=True)
    return ModelParams(tensors, config, feature_dim, class_count)


# --- blocks ----------------------------------------------------------------------------
# Node-level blocks accept a single graph (n x c features, n x n Laplacian tensor) or a
# stacked batch of equal-size graphs (rows grouped per graph, Laplacians as a
# (groups, n, n) array); ``groups`` is the number of stacked graphs.

Laplacian = Union[Tensor, np.ndarray]


def _propagate(L: Laplacian, Y: Tensor) -> Tensor:
    if isinstance(L, Tensor):
        if L.shape != (Y.rows, Y.rows):
            raise T.ShapeError(f"Laplacian {L.shape} does not fit features {Y.shape}")
        return T.matmul(L, Y)
    return T.block_matmul(L, Y)


def gcn_layer(L: Laplacian, X: Tensor, W: Tensor, act: str) -> Tensor:
    """``act(L X W)``."""
    if X.cols != W.rows:
        raise T.ShapeError(f"gcn_layer: features {X.shape} do not fit weight {W.shape}")
    return T.activation(_propagate(L, T.matmul(X, W)), act)


def snowball_conv(L: Laplacian, history: Sequence[Tensor], W: Tensor, act: str) -> Tensor:
    """Graph convolution of the column-concatenation of every earlier layer output."""
    return gcn_layer(L, T.concat_cols(list(history)), W, act)


def mh_attention(X: Tensor, Wq: Tensor, Wk: Tensor, Wv: Tensor, Wo: Tensor, heads: int,
                 dropout: float = 0.0, training: bool = False, rng=None, groups: int = 1) -> Tensor:
    q, k, v = T.matmul(X, Wq), T.matmul(X, Wk), T.matmul(X, Wv)
    a = T.attention_heads(q, k, v, heads, groups)
    return T.matmul(T.dropout(a, dropout, training, rng), Wo)


def ffn(X: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor, act: str = "gelu",
        dropout: float = 0.0, training: bool = False, rng=None) -> Tensor:
    h = T.activation(T.add(T.matmul(X, W1), b1), act)
    return T.add(T.matmul(T.dropout(h, dropout, training, rng), W2), b2)


def attention_block(S: Tensor, w: Mapping[str, Tensor], prefix: str, config: ModelConfig,
                    training: bool = False, rng=None, groups: int = 1) -> Tensor:
    """``mh_attention(LayerNorm(S)) + S``."""
    x = T.layer_norm(S, w[f"{prefix}.ln1.gamma"], w[f"{prefix}.ln1.beta"])
    a = mh_attention(x, w[f"{prefix}.attn.q"], w[f"{prefix}.attn.k"], w[f"{prefix}.attn.v"],
                     w[f"{prefix}.attn.out"], config.num_heads, config.dropout_transformer, training, rng,
                     groups)
    return T.add(a, S)


def ffn_block(H: Tensor, w: Mapping[str, Tensor], prefix: str, config: ModelConfig,
              training: bool = False, rng=None) -> Tensor:
    """``FFN(LayerNorm(H)) + H``."""
    x = T.layer_norm(H, w[f"{prefix}.ln2.gamma"], w[f"{prefix}.ln2.beta"])
    f = ffn(x, w[f"{prefix}.ffn.w1"], w[f"{prefix}.ffn.b1"], w[f"{prefix}.ffn.w2"], w[f"{prefix}.ffn.b2"],
            config.ffn_activation, config.dropout_transformer, training, rng)
    return T.add(f, H)


def transformer_encode(S: Tensor, w: Mapping[str, Tensor], prefix: str, config: ModelConfig,
                       training: bool = False, rng=None, groups: int = 1) -> Tensor:
    """Pre-LN encoder layer: attention sub-block then feed-forward sub-block."""
    H = attention_block(S, w, prefix, config, training, rng, groups)
    return ffn_block(H, w, prefix, config, training, rng)


def global_attention_readout(H: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, groups: int = 1) -> Tensor:
    """Gate-weighted sum of node rows; weights are a softmax over each graph's nodes.

    Returns one row per graph (groups x d).
    """
    if H.rows == 0:
        raise T.ShapeError("global_attention_readout: graph has no nodes")
    scores = T.matmul(T.activation(T.add(T.matmul(H, W1), b1), "tanh"), W2)
    weights = T.segment_softmax(scores, groups)
    return T.segment_sum(T.mul(weights, H), groups)


def assemble_representation(readouts: Sequence[Tensor]) -> Tensor:
    if not readouts:
        raise T.ShapeError("assemble_representation needs at least one readout")
    return T.concat_cols(list(readouts))


def mlp_head(h: Tensor, w: Mapping[str, Tensor], config: ModelConfig, training: bool = False, rng=None) -> Tensor:
    z = T.activation(T.add(T.matmul(h, w["head.fc1.weight"]), w["head.fc1.bias"]), "relu")
    z = T.dropout(z, config.dropout_mlp, training, rng)
    return T.add(T.matmul(z, w["head.fc2.weight"]), w["head.fc2.bias"])


# --- whole model ---------------------------------------------------------------------------


def _weights(params: ModelParams, tape: Optional[Tape]) -> Mapping[str, Tensor]:
    return params.tracked(tape) if tape is not None else params.tensors


def _encode_stacked(graphs: Sequence[Graph], params: ModelParams, w: Mapping[str, Tensor],
                    training: bool, rng) -> list[Tensor]:
    config = params.config
    for g in graphs:
        if g.feature_dim != params.feature_dim:
            raise T.ShapeError(f"graph has {g.feature_dim} features, model expects {params.feature_dim}")
    groups = len(graphs)
    if groups == 1:
        L = Tensor(graphs[0].laplacian)
        X = Tensor(graphs[0].features)
    else:
        L = np.stack([g.laplacian for g in graphs])
        X = Tensor(np.concatenate([g.features for g in graphs], axis=0))

    def readout(H: Tensor, t: int) -> Tensor:
        p = f"layer{t}.readout"
        return global_attention_readout(H, w[f"{p}.w1"], w[f"{p}.b1"], w[f"{p}.w2"], groups)

    readouts = [readout(X, 0)] if config.include_input_readout else []
    history = [X]
    for t in range(1, config.num_layers + 1):
        p = f"layer{t}"
        if config.snowball:
            H = snowball_conv(L, history, w[f"{p}.conv.weight"], config.conv_activation)
        else:
            H = gcn_layer(L, history[-1], w[f"{p}.conv.weight"], config.conv_activation)
        if config.uses_attention:
            H = attention_block(H, w, p, config, training, rng, groups)
        if config.uses_ffn:
            H = ffn_block(H, w, p, config, training, rng)
        history.append(H)
        readouts.append(readout(H, t))
    return readouts


def encode_batch(graphs: Sequence[Graph], params: ModelParams, training: bool = False, rng=None,
                 tape: Optional[Tape] = None, weights: Optional[Mapping[str, Tensor]] = None) -> list[Tensor]:
    """Per-layer readouts for several graphs, one row per graph in each tensor.

    Graphs of equal size run as one stacked pass; mixed sizes fall back to
    one pass per graph.
    """
    if not graphs:
        raise ValueError("encode_batch needs at least one graph")
    w = weights if weights is not None else _weights(params, tape)
    if len({g.n for g in graphs}) == 1:
        return _encode_stacked(graphs, params, w, training, rng)
    per_graph = [_encode_stacked([g], params, w, training, rng) for g in graphs]
    return [T.concat_rows([r[t] for r in per_graph]) for t in range(len(per_graph[0]))]


def encode(graph: Graph, params: ModelParams, training: bool = False, rng=None,
           tape: Optional[Tape] = None, weights: Optional[Mapping[str, Tensor]] = None) -> list[Tensor]:
    """Per-layer readout vectors (each 1 x width) for one graph.

    With ``include_input_readout`` the list starts with the raw-feature
    readout at index 0; otherwise index 0 is the first encoder layer.
    """
    return encode_batch([graph], params, training, rng, tape, weights)


def forward_batch(graphs: Sequence[Graph], params: ModelParams, training: bool = False, rng=None,
                  tape: Optional[Tape] = None, weights: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """Class logits, one row per graph."""
    w = weights if weights is not None else _weights(params, tape)
    h = assemble_representation(encode_batch(graphs, params, training, rng, weights=w))
    return mlp_head(h, w, params.config, training, rng)


def forward(graph: Graph, params: ModelParams, training: bool = False, rng=None,
            tape: Optional[Tape] = None, weights: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """Class logits (1 x class_count) for one graph."""
    return forward_batch([graph], params, training, rng, tape, weights)


def predict(graphs: Sequence[Graph], params: ModelParams, batch_size: int = 64) -> np.ndarray:
    """Eval-mode argmax class per graph; ties go to the lower index."""
    out = []
    for i in range(0, len(graphs), batch_size):
        logits = forward_batch(graphs[i:i + batch_size], params).values
        out.extend(int(np.argmax(row)) for row in logits)
    return np.array(out, dtype=np.int64)
