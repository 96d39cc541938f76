"""Architectures: shared conv backbone, per-task heads, label encoder and
the task-conditioned channel-attention modulator.

The attention module emits a squashed deviation from identity: its output
projection is zero-initialized, so an untrained module multiplies every
feature map by exactly 1 and the network behaves bit-for-bit like the
plain baseline (the identity-at-init contract). The multiplier applied to
the feature maps is ``1 - tanh(raw)``, which keeps it inside (0, 2).

Parameter tensors live in plain name->Tensor dicts grouped per component;
seeding is per-component (spawn keys), so adding an attention module never
changes how the backbone or heads are initialized.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from mmtl import layers as L
from mmtl.tensor import (
    ShapeError,
    Tensor,
    concat,
    relu,
    reshape,
    tanh,
    tmean,
)

ParamDict = dict[str, Tensor]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BackboneConfig:
    """Conv backbone: `blocks` repetitions of conv3x3 + batch-norm + relu +
    2x2 max-pool, all with `channels` filters."""

    blocks: int = 4
    channels: int = 32
    in_shape: tuple[int, int, int] = (3, 84, 84)
    kernel: int = 3

    def __post_init__(self):
        if self.blocks < 1 or self.channels < 1:
            raise ValueError("backbone needs at least one block and one channel")
        if self.final_spatial()[0] < 1 or self.final_spatial()[1] < 1:
            raise ValueError(
                f"backbone reduces {self.in_shape[1:]} below 1x1 after "
                f"{self.blocks} pooling stages")

    def spatial_after(self, n_blocks: int) -> tuple[int, int]:
        h, w = self.in_shape[1], self.in_shape[2]
        for _ in range(n_blocks):
            h = (h - 2) // 2 + 1
            w = (w - 2) // 2 + 1
        return h, w

    def final_spatial(self) -> tuple[int, int]:
        return self.spatial_after(self.blocks)

    @property
    def embed_dim(self) -> int:
        h, w = self.final_spatial()
        return self.channels * h * w

    @property
    def modulation_len(self) -> int:
        return self.blocks * self.channels


@dataclass(frozen=True)
class HeadSpec:
    """Per-task output network.

    fully_connected: single affine map embed_dim -> out_dim.
    conv_transpose: the embedding reshaped to (C, s, s) and upsampled by
    `blocks` stages of [conv-transpose k2 s2 + conv3x3], then a 1x1
    projection to `out_shape` channels; spatial extent is s * 2**blocks.
    """

    kind: str
    out_dim: int = 0
    out_shape: tuple[int, int, int] = ()
    filters: int = 4
    blocks: int = 4

    def __post_init__(self):
        if self.kind not in ("fully_connected", "conv_transpose"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.kind == "fully_connected" and self.out_dim < 1:
            raise ValueError("fully_connected head needs out_dim >= 1")
        if self.kind == "conv_transpose" and len(self.out_shape) != 3:
            raise ValueError("conv_transpose head needs out_shape (c, h, w)")


@dataclass(frozen=True)
class LabelSpec:
    """How a task's raw labels become the vector fed to the attention module."""

    kind: str  # 'classes' | 'vector' | 'image'
    classes: int = 0
    dim: int = 0
    shape: tuple[int, int, int] = ()

    ENCODER_FILTERS = 4
    ENCODER_BLOCKS = 3

    def __post_init__(self):
        if self.kind not in ("classes", "vector", "image"):
            raise ValueError(f"unknown label kind {self.kind!r}")

    def encoded_dim(self) -> int:
        if self.kind == "classes":
            return self.classes
        if self.kind == "vector":
            return self.dim
        h, w = self.shape[1], self.shape[2]
        for _ in range(self.ENCODER_BLOCKS):
            h = (h - 2) // 2 + 1
            w = (w - 2) // 2 + 1
        return self.ENCODER_FILTERS * h * w


@dataclass(frozen=True)
class AttentionConfig:
    """Stack of plain dot-product attention blocks over support tokens.

    The default width keeps the whole module at roughly a tenth of the
    backbone+head parameter count for the standard 4x32 configuration.
    """

    depth: int = 2
    width: int = 4


@dataclass
class ModelConfig:
    backbone: BackboneConfig
    heads: dict[str, HeadSpec]
    labels: dict[str, LabelSpec]
    attention: AttentionConfig | None = None
    probabilistic: bool = False

    def token_dim(self, task_id: str) -> int:
        return self.backbone.embed_dim + self.labels[task_id].encoded_dim()


@dataclass
class ModelParams:
    """Mutable container of all parameter tensors, grouped per component."""

    backbone: ParamDict = field(default_factory=dict)
    heads: dict[str, ParamDict] = field(default_factory=dict)
    attention: dict[str, ParamDict] = field(default_factory=dict)
    label_encoders: dict[str, ParamDict] = field(default_factory=dict)

    def named(self) -> dict[str, Tensor]:
        flat: dict[str, Tensor] = {}
        for k, t in self.backbone.items():
            flat[f"backbone.{k}"] = t
        for tid, d in sorted(self.heads.items()):
            for k, t in d.items():
                flat[f"head.{tid}.{k}"] = t
        for tid, d in sorted(self.attention.items()):
            for k, t in d.items():
                flat[f"attn.{tid}.{k}"] = t
        for tid, d in sorted(self.label_encoders.items()):
            for k, t in d.items():
                flat[f"lblenc.{tid}.{k}"] = t
        return flat

    def load_named(self, flat: dict[str, np.ndarray]) -> None:
        own = self.named()
        missing = sorted(set(own) - set(flat))
        extra = sorted(set(flat) - set(own))
        if missing or extra:
            raise ShapeError(
                "parameter table does not match this architecture; "
                f"missing={missing} extra={extra}")
        for name, arr in flat.items():
            t = own[name]
            if t.shape != arr.shape:
                raise ShapeError(
                    f"parameter {name!r}: stored shape {arr.shape} != "
                    f"model shape {t.shape}")
            t.data = np.array(arr, dtype=t.data.dtype)


def checksum(params: ParamDict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> ParamDict:
    params: ParamDict = {}
    c_in = cfg.in_shape[0]
    k = cfg.kernel
    for i in range(cfg.blocks):
        fan_in = c_in * k * k
        params[f"block{i}.conv.w"] = L.kaiming_uniform(
            rng, (cfg.channels, c_in, k, k), fan_in)
        params[f"block{i}.conv.b"] = L.zeros_param((cfg.channels,))
        params[f"block{i}.bn.gamma"] = L.ones_param((cfg.channels,))
        params[f"block{i}.bn.beta"] = L.zeros_param((cfg.channels,))
        c_in = cfg.channels
    return params


def backbone_block_forward(x: Tensor, cfg: BackboneConfig, params: ParamDict,
                           i: int) -> Tensor:
    pad = cfg.kernel // 2
    h = L.conv2d(x, params[f"block{i}.conv.w"], params[f"block{i}.conv.b"],
                 stride=1, pad=pad)
    h = L.batch_norm(h, params[f"block{i}.bn.gamma"], params[f"block{i}.bn.beta"])
    h = relu(h)
    return L.max_pool2d(h, 2)


def backbone_forward(x: Tensor, cfg: BackboneConfig, params: ParamDict,
                     multiplier: Tensor | None = None
                     ) -> tuple[list[Tensor], Tensor]:
    """Run all blocks; each block's post-pool activation is scaled by its
    slice of the multiplier before feeding the next block.

    `multiplier=None` is the identity: no scaling is applied and the
    result is bit-identical to a plain forward. Returns the per-block
    (modulated) activations and the flattened final-block embedding.
    """
    if x.ndim != 4 or x.shape[1] != cfg.in_shape[0]:
        raise ShapeError(
            f"backbone: input shape {x.shape} does not match configured "
            f"channels {cfg.in_shape[0]}")
    if multiplier is not None and multiplier.shape != (cfg.modulation_len,):
        raise ShapeError(
            f"backbone: multiplier length {multiplier.shape} != "
            f"({cfg.modulation_len},)")
    acts: list[Tensor] = []
    h = x
    for i in range(cfg.blocks):
        h = backbone_block_forward(h, cfg, params, i)
        if multiplier is not None:
            m_i = multiplier[i * cfg.channels:(i + 1) * cfg.channels]
            h = L.channel_modulate(h, m_i)
        acts.append(h)
    n = h.shape[0]
    embed = reshape(h, (n, cfg.embed_dim))
    return acts, embed


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


def init_head(spec: HeadSpec, backbone: BackboneConfig,
              rng: np.random.Generator) -> ParamDict:
    params: ParamDict = {}
    d = backbone.embed_dim
    if spec.kind == "fully_connected":
        params["w"] = L.kaiming_uniform(rng, (d, spec.out_dim), d)
        params["b"] = L.zeros_param((spec.out_dim,))
        return params
    s_h, s_w = backbone.final_spatial()
    want_h = s_h * 2 ** spec.blocks
    if (spec.out_shape[1], spec.out_shape[2]) != (want_h, s_w * 2 ** spec.blocks):
        raise ValueError(
            f"conv_transpose head produces {want_h}x{s_w * 2 ** spec.blocks} "
            f"but out_shape is {spec.out_shape[1:]}")
    c_prev = backbone.channels
    f = spec.filters
    for i in range(spec.blocks):
        params[f"block{i}.up.w"] = L.kaiming_uniform(
            rng, (c_prev, f, 2, 2), c_prev * 4)
        params[f"block{i}.up.b"] = L.zeros_param((f,))
        params[f"block{i}.conv.w"] = L.kaiming_uniform(rng, (f, f, 3, 3), f * 9)
        params[f"block{i}.conv.b"] = L.zeros_param((f,))
        c_prev = f
    params["proj.w"] = L.kaiming_uniform(rng, (spec.out_shape[0], f, 1, 1), f)
    params["proj.b"] = L.zeros_param((spec.out_shape[0],))
    return params


def head_forward(x: Tensor, spec: HeadSpec, params: ParamDict,
                 backbone: BackboneConfig) -> Tensor:
    """Map an embedding batch to task output (logits, vector, or image)."""
    if x.ndim != 2 or x.shape[1] != backbone.embed_dim:
        raise ShapeError(
            f"head: embedding shape {x.shape} != (n, {backbone.embed_dim})")
    if spec.kind == "fully_connected":
        return L.linear(x, params["w"], params["b"])
    n = x.shape[0]
    s_h, s_w = backbone.final_spatial()
    h = reshape(x, (n, backbone.channels, s_h, s_w))
    for i in range(spec.blocks):
        h = L.conv_transpose2d(h, params[f"block{i}.up.w"],
                               params[f"block{i}.up.b"], stride=2)
        h = relu(h)
        h = L.conv2d(h, params[f"block{i}.conv.w"], params[f"block{i}.conv.b"],
                     stride=1, pad=1)
        h = relu(h)
    return L.conv2d(h, params["proj.w"], params["proj.b"], stride=1, pad=0)


# ---------------------------------------------------------------------------
# label encoding
# ---------------------------------------------------------------------------


def init_label_encoder(spec: LabelSpec, rng: np.random.Generator) -> ParamDict:
    params: ParamDict = {}
    c_in = spec.shape[0]
    f = spec.ENCODER_FILTERS
    for i in range(spec.ENCODER_BLOCKS):
        params[f"block{i}.w"] = L.kaiming_uniform(rng, (f, c_in, 3, 3),
                                                  c_in * 9)
        params[f"block{i}.b"] = L.zeros_param((f,))
        c_in = f
    return params


def label_encoder_forward(y: Tensor, spec: LabelSpec, params: ParamDict) -> Tensor:
    h = y
    for i in range(spec.ENCODER_BLOCKS):
        h = L.conv2d(h, params[f"block{i}.w"], params[f"block{i}.b"],
                     stride=1, pad=1)
        h = relu(h)
        h = L.max_pool2d(h, 2)
    n = h.shape[0]
    return reshape(h, (n, spec.encoded_dim()))


def encode_labels(labels: np.ndarray, spec: LabelSpec,
                  encoder_params: ParamDict | None = None) -> Tensor:
    """Per-sample flat label vector: one-hot for class indices, identity
    for vectors, the 3-block CNN for pixel-domain labels."""
    labels = np.asarray(labels)
    if spec.kind == "classes":
        n = labels.shape[0]
        onehot = np.zeros((n, spec.classes))
        idx = labels.astype(int)
        if idx.min() < 0 or idx.max() >= spec.classes:
            raise ValueError(
                f"class label out of range [0, {spec.classes})")
        onehot[np.arange(n), idx] = 1.0
        return Tensor(onehot, op="const")
    if spec.kind == "vector":
        if labels.ndim != 2 or labels.shape[1] != spec.dim:
            raise ShapeError(
                f"vector labels shape {labels.shape} != (n, {spec.dim})")
        return Tensor(labels, op="const")
    if encoder_params is None:
        raise ValueError("pixel-domain labels need label-encoder parameters")
    if labels.ndim != 4 or labels.shape[1:] != spec.shape:
        raise ShapeError(
            f"image labels shape {labels.shape} != (n, {spec.shape})")
    return label_encoder_forward(Tensor(labels, op="const"), spec, encoder_params)


# ---------------------------------------------------------------------------
# attention modulator
# ---------------------------------------------------------------------------


@dataclass
class AttentionOutput:
    """Channel-weight prediction for one episode.

    Deterministic: `delta` in (-1, 1) per channel; multiplier 1 - delta.
    Probabilistic: a diagonal Gaussian over the pre-squash latent; the
    multiplier for a latent z is 1 - tanh(z), and the test-time path uses
    the distribution mean.
    """

    delta: Tensor | None = None
    gaussian: L.GaussianParams | None = None

    def multiplier(self) -> Tensor:
        if self.delta is not None:
            return 1.0 - self.delta
        return multiplier_from_latent(self.gaussian.mu)


def multiplier_from_latent(z: Tensor) -> Tensor:
    return 1.0 - tanh(z)


def init_attention_module(token_dim: int, out_len: int, cfg: AttentionConfig,
                          rng: np.random.Generator,
                          probabilistic: bool = False) -> ParamDict:
    params: ParamDict = {}
    params["in.w"] = L.kaiming_uniform(rng, (token_dim, cfg.width), token_dim)
    params["in.b"] = L.zeros_param((cfg.width,))
    for i in range(cfg.depth):
        for proj in ("q", "k", "v"):
            params[f"blk{i}.{proj}.w"] = L.kaiming_uniform(
                rng, (cfg.width, cfg.width), cfg.width)
    width_out = 2 * out_len if probabilistic else out_len
    # zero-initialized output projection: identity modulation at start
    params["out.w"] = L.zeros_param((cfg.width, width_out))
    params["out.b"] = L.zeros_param((width_out,))
    return params


def attention_forward(x_support: Tensor, y_encoded: Tensor, params: ParamDict,
                      cfg: AttentionConfig, out_len: int,
                      probabilistic: bool = False) -> AttentionOutput:
    """Predict channel weights from the support set.

    Tokens are (embedding || encoded label) per support sample; they pass
    through the stacked self-attention blocks, are mean-pooled over the
    set (permutation invariant) and projected to the weight vector, or to
    (mu, raw-sigma) for the probabilistic variant.
    """
    if x_support.ndim != 2 or y_encoded.ndim != 2:
        raise ShapeError(
            f"attention_forward: need 2-d inputs, got {x_support.shape}, "
            f"{y_encoded.shape}")
    if x_support.shape[0] == 0:
        raise ValueError("attention_forward: empty support set")
    if x_support.shape[0] != y_encoded.shape[0]:
        raise ShapeError(
            f"attention_forward: {x_support.shape[0]} embeddings vs "
            f"{y_encoded.shape[0]} labels")
    tokens = concat([x_support, y_encoded], axis=1)
    t = L.linear(tokens, params["in.w"], params["in.b"])
    depth = len({k.split(".")[0] for k in params if k.startswith("blk")})
    for i in range(depth):
        q = t @ params[f"blk{i}.q.w"]
        k = t @ params[f"blk{i}.k.w"]
        v = t @ params[f"blk{i}.v.w"]
        t = L.scaled_dot_product_attention(q, k, v)
    pooled = tmean(t, axis=0, keepdims=True)  # (1, width)
    raw = L.linear(pooled, params["out.w"], params["out.b"])
    if not probabilistic:
        delta = reshape(tanh(raw), (out_len,))
        return AttentionOutput(delta=delta)
    mu = reshape(raw[:, :out_len], (out_len,))
    sigma = L.positive_sigma(reshape(raw[:, out_len:], (out_len,)))
    return AttentionOutput(gaussian=L.GaussianParams(mu, sigma))


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def _component_rng(seed: int, group: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(group, index)))


def build_model(cfg: ModelConfig, seed: int) -> ModelParams:
    """Initialize all components with per-component random streams."""
    params = ModelParams()
    params.backbone = init_backbone(cfg.backbone, _component_rng(seed, 0))
    for idx, tid in enumerate(sorted(cfg.heads)):
        params.heads[tid] = init_head(cfg.heads[tid], cfg.backbone,
                                      _component_rng(seed, 1, idx))
    for idx, tid in enumerate(sorted(cfg.labels)):
        if cfg.labels[tid].kind == "image":
            params.label_encoders[tid] = init_label_encoder(
                cfg.labels[tid], _component_rng(seed, 2, idx))
    if cfg.attention is not None:
        for idx, tid in enumerate(sorted(cfg.heads)):
            params.attention[tid] = init_attention_module(
                cfg.token_dim(tid), cfg.backbone.modulation_len, cfg.attention,
                _component_rng(seed, 3, idx), probabilistic=cfg.probabilistic)
    return params


def count_parameters(params: ModelParams) -> dict:
    """Exact per-component parameter counts and the attention overhead ratio.

    The ratio compares the full model against the same model with the
    modulation machinery (attention modules and label encoders, which
    exist only to feed them) removed.
    """
    def total(d: ParamDict) -> int:
        return int(sum(t.size for t in d.values()))

    counts = {
        "backbone": total(params.backbone),
        "heads": {tid: total(d) for tid, d in sorted(params.heads.items())},
        "attention": {tid: total(d) for tid, d in sorted(params.attention.items())},
        "label_encoders": {tid: total(d)
                           for tid, d in sorted(params.label_encoders.items())},
    }
    base = counts["backbone"] + sum(counts["heads"].values())
    overhead = sum(counts["attention"].values()) + sum(
        counts["label_encoders"].values())
    counts["total_without_attention"] = base
    counts["total_with_attention"] = base + overhead
    counts["ratio"] = round((base + overhead) / base, 3) if base else 1.0
    return counts
