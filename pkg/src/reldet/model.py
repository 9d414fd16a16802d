"""The detector forward pass: conv backbone, encoder, two-pass decoder, heads.

A small three-stage stride-2 convolutional backbone produces a feature map,
a 1x1 channel reduction and a flatten turn it into encoder tokens, and a
transformer encoder/decoder transforms N learned query embeddings into N
predictions. The decoder runs in two passes: a standard stack decodes
preliminary detections, a kNN graph over their box centers mixes each query's
features with its neighbors', and one further decoder layer refines the
relation-fixed embeddings before the prediction heads.

Positional encodings are added to attention queries and keys only, never to
values, at every layer. Parameters live in an ordered name -> Tensor dict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numeric
from .errors import ContractError, ShapeError
from .geometry import Box
from .matching import Prediction
from .numeric import Tensor
from .relation import RelationLayerParams, aggregate, build_knn_graph

_FFN_MULT = 2  # feed-forward hidden width, in units of model_dim


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple[int, int] = (32, 32)
    backbone_channels: int = 16
    model_dim: int = 32
    num_heads: int = 4
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2  # first decode pass; the relation refine pass adds one more layer
    num_queries: int = 16
    num_classes: int = 5
    knn_k: int = 3
    seed: int = 3

    def __post_init__(self):
        h, w = self.image_size
        if h % 8 or w % 8 or h < 8 or w < 8:
            raise ContractError(f"image size {self.image_size} must be a multiple of 8 in both extents")
        if self.model_dim % self.num_heads:
            raise ContractError(f"model_dim {self.model_dim} not divisible by {self.num_heads} heads")
        if self.num_queries < 1 or self.num_classes < 1:
            raise ContractError("need at least one query and one class")
        if self.knn_k < 0:
            raise ContractError("knn_k must be nonnegative")

    @property
    def feature_hw(self) -> tuple[int, int]:
        return (self.image_size[0] // 8, self.image_size[1] // 8)

    @property
    def num_tokens(self) -> int:
        fh, fw = self.feature_hw
        return fh * fw


@dataclass
class DetectionOutput:
    """N decoded slots: class probabilities [N, K+1] and boxes [N, 4], on tape."""

    class_probs: Tensor
    boxes: Tensor

    @property
    def predictions(self) -> list[Prediction]:
        probs = self.class_probs.data
        boxes = self.boxes.data
        return [Prediction(probs[i].copy(), Box(*boxes[i])) for i in range(probs.shape[0])]


def _attention_param_names(prefix: str, d: int):
    for proj in ("wq", "wk", "wv", "wo"):
        yield f"{prefix}.{proj}", (d, d), d
    for bias in ("bq", "bk", "bv", "bo"):
        yield f"{prefix}.{bias}", (d,), None


def _ffn_param_names(prefix: str, d: int):
    hidden = _FFN_MULT * d
    yield f"{prefix}.w1", (d, hidden), d
    yield f"{prefix}.b1", (hidden,), None
    yield f"{prefix}.w2", (hidden, d), hidden
    yield f"{prefix}.b2", (d,), None


def param_spec(config: ModelConfig):
    """Canonical (name, shape, fan_in) list; fan_in None means zero-init bias.

    Checkpoints and optimizer state follow this exact order.
    """
    c, d, k = config.backbone_channels, config.model_dim, config.num_classes
    spec: list[tuple[str, tuple, object]] = []
    in_ch = 3
    for stage in range(3):
        spec.append((f"backbone.conv{stage}.weight", (in_ch * 9, c), in_ch * 9))
        spec.append((f"backbone.conv{stage}.bias", (c,), None))
        in_ch = c
    spec.append(("reduce.weight", (c, d), c))
    spec.append(("reduce.bias", (d,), None))
    for layer in range(config.num_encoder_layers):
        spec.extend(_attention_param_names(f"encoder.{layer}.attn", d))
        spec.extend(_ffn_param_names(f"encoder.{layer}.ffn", d))
    for layer in range(config.num_decoder_layers):
        spec.extend(_attention_param_names(f"decoder.{layer}.self_attn", d))
        spec.extend(_attention_param_names(f"decoder.{layer}.cross_attn", d))
        spec.extend(_ffn_param_names(f"decoder.{layer}.ffn", d))
    spec.extend(_attention_param_names("refine.0.self_attn", d))
    spec.extend(_attention_param_names("refine.0.cross_attn", d))
    spec.extend(_ffn_param_names("refine.0.ffn", d))
    spec.append(("query_embed", (config.num_queries, d), "query"))
    spec.append(("relation.weight", (d, 2 * d), 2 * d))
    spec.append(("relation.bias", (d,), None))
    spec.append(("class_head.weight", (d, k + 1), d))
    spec.append(("class_head.bias", (k + 1,), None))
    for i, (w_shape, fan) in enumerate((((d, d), d), ((d, d), d), ((d, 4), d))):
        spec.append((f"box_head.w{i}", w_shape, fan))
        spec.append((f"box_head.b{i}", (w_shape[1],), None))
    return spec


def init_params(config: ModelConfig, seed: int | None = None) -> dict[str, Tensor]:
    """Deterministic init: affine weights uniform +-1/sqrt(fan_in), biases zero,
    query embeddings 0.02 * standard normal."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params: dict[str, Tensor] = {}
    for name, shape, fan in param_spec(config):
        if fan is None:
            data = np.zeros(shape)
        elif fan == "query":
            data = 0.02 * rng.standard_normal(shape)
        else:
            bound = 1.0 / math.sqrt(fan)
            data = rng.uniform(-bound, bound, shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# stages


def _conv3x3(x: Tensor, params, name: str, out_hw: tuple[int, int]) -> Tensor:
    cols = numeric.im2col(x, 3, stride=2, pad=1)
    out = numeric.add_rowvec(numeric.matmul(cols, params[f"{name}.weight"]), params[f"{name}.bias"])
    c_out = params[f"{name}.weight"].shape[1]
    return numeric.reshape(numeric.transpose(out), (c_out, *out_hw))


def backbone_forward(image: Tensor, params, config: ModelConfig) -> Tensor:
    """Three stride-2 3x3 conv + ReLU stages: [3, H, W] -> [C, H/8, W/8]."""
    h, w = config.image_size
    if image.shape != (3, h, w):
        raise ShapeError(f"image shape {image.shape} does not match configured {(3, h, w)}")
    x = image
    for stage in range(3):
        h, w = h // 2, w // 2
        x = numeric.relu(_conv3x3(x, params, f"backbone.conv{stage}", (h, w)))
    return x


def channel_reduce(f: Tensor, params, config: ModelConfig) -> Tensor:
    """Per-pixel affine map C -> d (a 1x1 convolution)."""
    c, fh, fw = f.shape
    if c != config.backbone_channels:
        raise ShapeError(f"feature map has {c} channels, expected {config.backbone_channels}")
    flat = numeric.transpose(numeric.reshape(f, (c, fh * fw)))
    out = numeric.add_rowvec(numeric.matmul(flat, params["reduce.weight"]), params["reduce.bias"])
    return numeric.reshape(numeric.transpose(out), (config.model_dim, fh, fw))


def flatten_hw(z: Tensor) -> Tensor:
    """[d, H, W] -> [H*W, d] with row t = pixel (t div W, t mod W)."""
    d, fh, fw = z.shape
    return numeric.transpose(numeric.reshape(z, (d, fh * fw)))


def unflatten_hw(t: Tensor, hw: tuple[int, int]) -> Tensor:
    fh, fw = hw
    n, d = t.shape
    if n != fh * fw:
        raise ShapeError(f"cannot unflatten {n} rows into {fh}x{fw}")
    return numeric.reshape(numeric.transpose(t), (d, fh, fw))


def sinusoidal_pe(num_positions: int, d: int) -> Tensor:
    """Fixed sin/cos positional encodings over a flat position index."""
    if d % 2:
        raise ContractError(f"positional encoding width must be even, got {d}")
    pos = np.arange(num_positions)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.empty((num_positions, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return Tensor(pe)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, params, prefix: str, num_heads: int) -> Tensor:
    """Scaled dot-product attention with per-head column slices of d."""
    d = q.shape[1]
    if d % num_heads:
        raise ShapeError(f"model width {d} not divisible by {num_heads} heads")
    if k.shape != v.shape or q.shape[1] != k.shape[1]:
        raise ShapeError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    dh = d // num_heads
    qp = numeric.add_rowvec(numeric.matmul(q, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    kp = numeric.add_rowvec(numeric.matmul(k, params[f"{prefix}.wk"]), params[f"{prefix}.bk"])
    vp = numeric.add_rowvec(numeric.matmul(v, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])
    heads = []
    scale = 1.0 / math.sqrt(dh)
    for h in range(num_heads):
        qh = numeric.narrow(qp, 1, h * dh, dh)
        kh = numeric.narrow(kp, 1, h * dh, dh)
        vh = numeric.narrow(vp, 1, h * dh, dh)
        scores = numeric.mul(numeric.matmul(qh, numeric.transpose(kh)), scale)
        heads.append(numeric.matmul(numeric.softmax(scores, 1), vh))
    mixed = heads[0] if num_heads == 1 else numeric.concat(heads, axis=1)
    return numeric.add_rowvec(numeric.matmul(mixed, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _ffn(x: Tensor, params, prefix: str) -> Tensor:
    h = numeric.relu(numeric.add_rowvec(numeric.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return numeric.add_rowvec(numeric.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _encoder_layer(x: Tensor, pe: Tensor, params, prefix: str, heads: int) -> Tensor:
    qk = numeric.add(x, pe)
    x = numeric.layer_norm(numeric.add(x, multi_head_attention(qk, qk, x, params, f"{prefix}.attn", heads)))
    return numeric.layer_norm(numeric.add(x, _ffn(x, params, f"{prefix}.ffn")))


def encoder_forward(tokens: Tensor, pe: Tensor, params, config: ModelConfig) -> Tensor:
    if tokens.shape != pe.shape:
        raise ShapeError(f"tokens {tokens.shape} and positional encodings {pe.shape} differ")
    x = tokens
    for layer in range(config.num_encoder_layers):
        x = _encoder_layer(x, pe, params, f"encoder.{layer}", config.num_heads)
    return x


def _decoder_layer(x: Tensor, qe: Tensor, memory: Tensor, mem_pe: Tensor, params, prefix: str, heads: int) -> Tensor:
    qk = numeric.add(x, qe)
    x = numeric.layer_norm(numeric.add(x, multi_head_attention(qk, qk, x, params, f"{prefix}.self_attn", heads)))
    mem_k = numeric.add(memory, mem_pe)
    x = numeric.layer_norm(
        numeric.add(x, multi_head_attention(numeric.add(x, qe), mem_k, memory, params, f"{prefix}.cross_attn", heads))
    )
    return numeric.layer_norm(numeric.add(x, _ffn(x, params, f"{prefix}.ffn")))


def decode_stack(x: Tensor, queries: Tensor, memory: Tensor, mem_pe: Tensor, params, prefixes, heads: int) -> Tensor:
    for prefix in prefixes:
        x = _decoder_layer(x, queries, memory, mem_pe, params, prefix, heads)
    return x


def decoder_forward(memory: Tensor, queries: Tensor, pe: Tensor, params, config: ModelConfig):
    """Two-pass decode: standard stack, relation fix-up, one refining layer.

    Returns (final embeddings [N, d], preliminary DetectionOutput). The kNN
    graph is built from the preliminary box centers as plain structure; no
    gradient flows through the center coordinates.
    """
    x0 = queries
    prefixes = [f"decoder.{layer}" for layer in range(config.num_decoder_layers)]
    x1 = decode_stack(x0, queries, memory, pe, params, prefixes, config.num_heads)
    prelim = predict_heads(x1, params, config)
    graph = build_knn_graph(prelim.boxes.data[:, :2], config.knn_k)
    fixed = aggregate(x1, graph, RelationLayerParams(params["relation.weight"], params["relation.bias"]))
    x2 = decode_stack(fixed, queries, memory, pe, params, ["refine.0"], config.num_heads)
    return x2, prelim


def predict_heads(embeddings: Tensor, params, config: ModelConfig) -> DetectionOutput:
    """Class head: one affine map to K+1 logits, softmax (last class = no object).
    Box head: 3-layer MLP with hidden width d, sigmoid into (0, 1)^4."""
    logits = numeric.add_rowvec(numeric.matmul(embeddings, params["class_head.weight"]), params["class_head.bias"])
    probs = numeric.softmax(logits, 1)
    h = embeddings
    for i in range(2):
        h = numeric.relu(numeric.add_rowvec(numeric.matmul(h, params[f"box_head.w{i}"]), params[f"box_head.b{i}"]))
    boxes = numeric.sigmoid(numeric.add_rowvec(numeric.matmul(h, params["box_head.w2"]), params["box_head.b2"]))
    return DetectionOutput(probs, boxes)


def forward(image: Tensor, params, config: ModelConfig) -> DetectionOutput:
    """Full pipeline; deterministic given (image, params, config)."""
    feats = backbone_forward(image, params, config)
    reduced = channel_reduce(feats, params, config)
    tokens = flatten_hw(reduced)
    pe = sinusoidal_pe(config.num_tokens, config.model_dim)
    memory = encoder_forward(tokens, pe, params, config)
    embeddings, _ = decoder_forward(memory, params["query_embed"], pe, params, config)
    return predict_heads(embeddings, params, config)
