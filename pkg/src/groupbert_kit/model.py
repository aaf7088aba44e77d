"""BERT and GroupBERT encoder stacks with MLM / NSP heads.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names
(``layers.3.2.conv.kernel.weight``); the forward functions are plain
functions over those dicts so the same code runs on shadow copies of the
weights (gradient sharding) and on checkpoints loaded from disk.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterator, Mapping

import numpy as np

from . import tensor as T
from .grouped_ops import (ConfigError, ConvWeight, check_conv, check_grouping, glu, grouped_conv1d, grouped_matmul,
                          truncated_normal)
from .tensor import Tensor

FAMILY_MODULES = {
    "bert": ("mha", "ffn"),
    "groupbert": ("mha", "gffn", "conv", "gffn"),
}
FAMILY_NORM = {"bert": "postnorm", "groupbert": "prenorm"}
MODULE_KINDS = ("mha", "ffn", "gffn", "conv")
NORM_POLICIES = ("prenorm", "postnorm")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description shared by the model builder and the cost model.

    ``layer_modules`` overrides the family's per-layer module sequence (used
    for the ablation grid); ``norm_policy`` defaults to postnorm for BERT and
    prenorm for GroupBERT.
    """

    family: str = "bert"
    layers: int = 12
    hidden: int = 768
    heads: int = 12
    ffn_groups: int = 4
    conv_kernel: int = 7
    conv_group_size: int = 16
    vocab_size: int = 30522
    max_positions: int = 512
    segment_types: int = 2
    norm_policy: str | None = None
    dropout_rate: float = 0.0
    tie_mlm_embedding: bool = True
    include_pooler: bool = True
    layer_modules: tuple[str, ...] | None = None
    init_std: float = 0.02
    layernorm_eps: float = 1e-6

    def __post_init__(self):
        if self.family not in FAMILY_MODULES:
            raise ConfigError(f"family must be one of {sorted(FAMILY_MODULES)}, got {self.family!r}")
        if self.norm_policy is None:
            object.__setattr__(self, "norm_policy", FAMILY_NORM[self.family])
        if self.layer_modules is None:
            object.__setattr__(self, "layer_modules", FAMILY_MODULES[self.family])
        else:
            object.__setattr__(self, "layer_modules", tuple(self.layer_modules))
        self.validate()

    def validate(self) -> None:
        problems = []
        for name in ("layers",):
            if getattr(self, name) < 0:
                problems.append(f"{name}={getattr(self, name)} must be >= 0")
        for name in ("hidden", "heads", "vocab_size", "max_positions", "segment_types"):
            if getattr(self, name) <= 0:
                problems.append(f"{name}={getattr(self, name)} must be positive")
        if self.norm_policy not in NORM_POLICIES:
            problems.append(f"norm_policy={self.norm_policy!r} must be one of {NORM_POLICIES}")
        unknown = [m for m in self.layer_modules if m not in MODULE_KINDS]
        if unknown or not self.layer_modules:
            problems.append(f"layer_modules={self.layer_modules!r} must be a non-empty sequence of {MODULE_KINDS}")
        if self.hidden > 0 and self.heads > 0 and self.hidden % self.heads:
            problems.append(f"heads={self.heads} does not divide hidden={self.hidden}")
        if "gffn" in self.layer_modules:
            try:
                check_grouping(self.ffn_inner, self.hidden, self.ffn_groups)
            except ConfigError:
                problems.append(f"ffn_groups={self.ffn_groups} must divide hidden={self.hidden} "
                                f"and ffn_inner={self.ffn_inner}")
        if "conv" in self.layer_modules:
            try:
                check_conv(self.hidden, self.conv_kernel, self.conv_group_size)
            except ConfigError as exc:
                problems.append(f"conv_kernel/conv_group_size: {exc}")
        if not 0.0 <= self.dropout_rate < 1.0:
            problems.append(f"dropout_rate={self.dropout_rate} must lie in [0, 1)")
        if self.init_std <= 0 or self.layernorm_eps <= 0:
            problems.append("init_std and layernorm_eps must be positive")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))

    @property
    def ffn_inner(self) -> int:
        return 4 * self.hidden

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def has_final_norm(self) -> bool:
        return self.norm_policy == "prenorm" and self.layers > 0

    def replace(self, **changes) -> "ModelConfig":
        data = self.to_dict()
        data.update(changes)
        return ModelConfig.from_dict(data)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["layer_modules"] = list(self.layer_modules)
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**dict(data))


# ---------------------------------------------------------------------------
# parameter layout


def _module_specs(kind: str, cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, inner = cfg.hidden, cfg.ffn_inner
    if kind == "mha":
        specs = []
        for proj in ("q", "k", "v", "o"):
            specs += [(f"{proj}.weight", (d, d), "normal"), (f"{proj}.bias", (d,), "zeros")]
        return specs
    if kind == "ffn":
        return [("fc1.weight", (d, inner), "normal"), ("fc1.bias", (inner,), "zeros"),
                ("fc2.weight", (inner, d), "normal"), ("fc2.bias", (d,), "zeros")]
    if kind == "gffn":
        g = cfg.ffn_groups
        return [("fc1.weight", (d, inner), "normal"), ("fc1.bias", (inner,), "zeros"),
                ("grouped.weight", (g, inner // g, d // g), "normal"), ("grouped.bias", (d,), "zeros"),
                ("proj.weight", (d, d), "normal"), ("proj.bias", (d,), "zeros")]
    if kind == "conv":
        s, k = cfg.conv_group_size, cfg.conv_kernel
        return [("pointwise_in.weight", (d, 2 * d), "normal"), ("pointwise_in.bias", (2 * d,), "zeros"),
                ("kernel.weight", (d // s, k, s, s), "normal"), ("kernel.bias", (d,), "zeros"),
                ("norm.gamma", (d,), "ones"), ("norm.beta", (d,), "zeros"),
                ("pointwise_out.weight", (d, d), "normal"), ("pointwise_out.bias", (d,), "zeros")]
    raise ConfigError(f"unknown module kind {kind!r}")


def _norm_specs(prefix: str, d: int):
    return [(f"{prefix}.gamma", (d,), "ones"), (f"{prefix}.beta", (d,), "zeros")]


def module_prefix(layer: int, index: int, kind: str) -> str:
    return f"layers.{layer}.{index}.{kind}"


def parameter_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Every parameter the builder creates as ``(name, shape, init)``, in creation order."""
    d = cfg.hidden
    specs = [
        ("embeddings.token", (cfg.vocab_size, d), "normal"),
        ("embeddings.position", (cfg.max_positions, d), "normal"),
        ("embeddings.segment", (cfg.segment_types, d), "normal"),
        *_norm_specs("embeddings.norm", d),
    ]
    for layer in range(cfg.layers):
        for index, kind in enumerate(cfg.layer_modules):
            prefix = module_prefix(layer, index, kind)
            specs += [(f"{prefix}.{name}", shape, init) for name, shape, init in _module_specs(kind, cfg)]
            specs += _norm_specs(f"{prefix}.residual_norm", d)
    if cfg.has_final_norm:
        specs += _norm_specs("final_norm", d)
    specs += [("mlm.transform.weight", (d, d), "normal"), ("mlm.transform.bias", (d,), "zeros"),
              *_norm_specs("mlm.norm", d)]
    if not cfg.tie_mlm_embedding:
        specs.append(("mlm.decoder.weight", (d, cfg.vocab_size), "normal"))
    specs.append(("mlm.bias", (cfg.vocab_size,), "zeros"))
    if cfg.include_pooler:
        specs += [("pooler.weight", (d, d), "normal"), ("pooler.bias", (d,), "zeros"),
                  ("nsp.weight", (d, 2), "normal"), ("nsp.bias", (2,), "zeros")]
    return specs


# ---------------------------------------------------------------------------
# model


class Model:
    """A built encoder: its config plus named parameter tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def scope(self, prefix: str) -> dict[str, Tensor]:
        return scope(self.params, prefix)

    def shadow(self) -> "Model":
        """Same weight buffers, fresh gradient slots (one per worker when sharding)."""
        return Model(self.config, {k: Tensor(v.data, requires_grad=v.requires_grad, dtype=v.dtype)
                                   for k, v in self.params.items()})

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __call__(self, tokens, segments=None, mask=None, **kwargs) -> "EncoderOutput":
        return encoder_forward(self, tokens, segments, mask, **kwargs)


def scope(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def build_model(config: ModelConfig, seed: int = 0, *, precision: str | None = None,
                requires_grad: bool = True) -> Model:
    """Initialise every parameter: weights TruncNormal(0, init_std) cut at 2 std, biases 0, LN gamma 1."""
    dtype = T.PRECISIONS[precision] if precision else T.default_dtype()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, init in parameter_specs(config):
        if init == "normal":
            data = truncated_normal(rng, shape, config.init_std, dtype=dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(data, requires_grad=requires_grad, dtype=dtype)
    return Model(config, params)


# ---------------------------------------------------------------------------
# building blocks


def linear(x: Tensor, w: Mapping[str, Tensor], name: str) -> Tensor:
    return T.bias_add(T.matmul(x, w[f"{name}.weight"]), w[f"{name}.bias"])


def norm(x: Tensor, w: Mapping[str, Tensor], name: str, eps: float = 1e-6) -> Tensor:
    return T.layernorm(x, w[f"{name}.gamma"], w[f"{name}.beta"], eps)


def embed(model: Model, tokens, segments=None, positions=None) -> Tensor:
    """Token + position + segment embeddings, layer-normalised."""
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise T.ShapeError(f"tokens must be [batch, length], got shape {tokens.shape}")
    batch, length = tokens.shape
    if length > cfg.max_positions:
        raise ValueError(f"sequence length {length} exceeds max_positions {cfg.max_positions}")
    segments = np.zeros_like(tokens) if segments is None else np.asarray(segments, dtype=np.int64)
    positions = np.broadcast_to(np.arange(length), tokens.shape) if positions is None else np.asarray(positions)
    for label, ids, size in (("token", tokens, cfg.vocab_size), ("segment", segments, cfg.segment_types),
                             ("position", positions, cfg.max_positions)):
        bad = np.argwhere((ids < 0) | (ids >= size))
        if bad.size:
            b, l = bad[0]
            raise IndexError(f"{label} id {ids[b, l]} at position (batch={b}, index={l}) outside [0, {size})")
    p = model.params
    x = T.embedding(p["embeddings.token"], tokens)
    x = T.add(x, T.embedding(p["embeddings.position"], positions))
    x = T.add(x, T.embedding(p["embeddings.segment"], segments))
    return T.layernorm(x, p["embeddings.norm.gamma"], p["embeddings.norm.beta"], cfg.layernorm_eps)


@dataclass
class AttentionOutput:
    hidden: Tensor
    maps: np.ndarray | None = None  # [batch, heads, L, L]


def mha_forward(x: Tensor, mask: np.ndarray | None, w: Mapping[str, Tensor], heads: int,
                retain: bool = False) -> AttentionOutput:
    """Scaled dot-product multi-head self-attention; padded keys get zero weight."""
    batch, length, d = x.shape
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (batch, length, heads, dh)), (0, 2, 1, 3))

    q, k, v = (split(linear(x, w, name)) for name in ("q", "k", "v"))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    key_mask = None if mask is None else np.asarray(mask, dtype=bool)[:, None, None, :]
    try:
        probs = T.softmax(scores, key_mask)
    except ValueError as exc:
        raise ValueError(f"attention: {exc}") from None
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (batch, length, d))
    return AttentionOutput(linear(ctx, w, "o"), probs.data if retain else None)


def ffn_forward(x: Tensor, w: Mapping[str, Tensor]) -> Tensor:
    return linear(T.gelu(linear(x, w, "fc1")), w, "fc2")


def gffn_forward(x: Tensor, w: Mapping[str, Tensor]) -> Tensor:
    """Dense fan-out, GELU, grouped fan-in, dense output projection."""
    h = T.gelu(linear(x, w, "fc1"))
    h = T.bias_add(grouped_matmul(h, w["grouped.weight"]), w["grouped.bias"])
    return linear(h, w, "proj")


def conv_module_forward(x: Tensor, mask: np.ndarray | None, w: Mapping[str, Tensor], eps: float = 1e-6) -> Tensor:
    """Pointwise gate (d -> 2d, GLU), grouped conv, layernorm, Swish, pointwise d -> d."""
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError(f"conv module needs [batch, length >= 1, d] input, got {x.shape}")
    h = glu(linear(x, w, "pointwise_in"))
    h = grouped_conv1d(h, ConvWeight(w["kernel.weight"], w["kernel.bias"]), mask)
    h = T.swish(norm(h, w, "norm", eps))
    return linear(h, w, "pointwise_out")


def residual_apply(module_fn: Callable[[Tensor], Tensor], x: Tensor, w: Mapping[str, Tensor], norm_policy: str,
                   dropout_rate: float = 0.0, rng: np.random.Generator | None = None, eps: float = 1e-6) -> Tensor:
    """Wrap ``module_fn`` with a shortcut and a layernorm (``w`` holds ``gamma``/``beta``)."""
    if norm_policy == "prenorm":
        y = module_fn(T.layernorm(x, w["gamma"], w["beta"], eps))
        return T.add(x, T.dropout(y, dropout_rate, rng))
    if norm_policy == "postnorm":
        y = T.dropout(module_fn(x), dropout_rate, rng)
        return T.layernorm(T.add(x, y), w["gamma"], w["beta"], eps)
    raise ConfigError(f"unknown norm policy {norm_policy!r}")


@dataclass
class EncoderOutput:
    hidden: Tensor
    attention: list[np.ndarray] = field(default_factory=list)  # per layer, [batch, heads, L, L]
    residual_calls: int = 0


def encoder_forward(model: Model, tokens, segments=None, mask=None, *, training: bool = False,
                    rng: np.random.Generator | None = None, retain_attention: bool = False,
                    dropout_rate: float | None = None) -> EncoderOutput:
    """Embeddings followed by every layer's residual-wrapped modules.

    ``dropout_rate`` overrides the config's rate; dropout only applies when
    ``training`` is true.
    """
    cfg = model.config
    rate = cfg.dropout_rate if dropout_rate is None else dropout_rate
    rate = rate if training else 0.0
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    x = T.dropout(embed(model, tokens, segments), rate, rng)
    out = EncoderOutput(x)
    eps = cfg.layernorm_eps
    for layer in range(cfg.layers):
        for index, kind in enumerate(cfg.layer_modules):
            prefix = module_prefix(layer, index, kind)
            w = model.scope(prefix)
            if kind == "mha":
                def fn(h, w=w):
                    res = mha_forward(h, mask, w, cfg.heads, retain_attention)
                    if retain_attention:
                        out.attention.append(res.maps)
                    return res.hidden
            elif kind == "ffn":
                def fn(h, w=w):
                    return ffn_forward(h, w)
            elif kind == "gffn":
                def fn(h, w=w):
                    return gffn_forward(h, w)
            else:
                def fn(h, w=w):
                    return conv_module_forward(h, mask, w, eps)
            x = residual_apply(fn, x, model.scope(prefix + ".residual_norm"), cfg.norm_policy, rate, rng, eps)
            out.residual_calls += 1
    if cfg.has_final_norm:
        x = norm(x, model.params, "final_norm", eps)
    out.hidden = x
    return out


def mlm_logits(hidden: Tensor, model: Model) -> Tensor:
    """Transform (dense, GELU, layernorm) then project onto the vocabulary."""
    p, cfg = model.params, model.config
    h = T.gelu(linear(hidden, p, "mlm.transform"))
    h = norm(h, p, "mlm.norm", cfg.layernorm_eps)
    decoder = T.transpose(p["embeddings.token"], (1, 0)) if cfg.tie_mlm_embedding else p["mlm.decoder.weight"]
    return T.bias_add(T.matmul(h, decoder), p["mlm.bias"])


def nsp_logits(hidden: Tensor, model: Model) -> Tensor:
    p = model.params
    if not model.config.include_pooler:
        raise ConfigError("NSP head needs include_pooler=True")
    first = T.getitem(hidden, (slice(None), 0, slice(None)))
    pooled = T.tanh(linear(first, p, "pooler"))
    return linear(pooled, p, "nsp")


def heads_forward(hidden: Tensor, model: Model, positions: np.ndarray | None = None) -> dict[str, Tensor]:
    """MLM logits (``[B, L, V]``, or ``[N, V]`` at flat ``positions``) and NSP logits ``[B, 2]``."""
    if positions is None:
        source = hidden
    else:
        batch, length, d = hidden.shape
        source = T.getitem(T.reshape(hidden, (batch * length, d)), np.asarray(positions, dtype=np.int64))
    out = {"mlm_logits": mlm_logits(source, model)}
    if model.config.include_pooler:
        out["nsp_logits"] = nsp_logits(hidden, model)
    return out
