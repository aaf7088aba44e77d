"""Closed-form parameter and FLOP counts, plus pipeline batch arithmetic.

FLOP convention: one multiply-accumulate is 2 FLOPs, training costs three
forward passes, and cheap pointwise work is charged at leading order using
:data:`FLOP_CONSTANTS` (FLOPs per element). Embedding lookups are free. The
MLM projection is charged over every position of the sequence.

The parameter formulas here are written out by hand and never consult the
model builder; tests compare the two.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .model import ModelConfig

FLOP_CONSTANTS = {
    "add": 1,        # residual / embedding sums, bias adds
    "layernorm": 5,  # mean, variance, normalise, scale, shift
    "softmax": 5,    # max, subtract, exp, sum, divide
    "gelu": 8,
    "swish": 4,
    "sigmoid": 4,
    "tanh": 4,
    "mul": 1,
}

COMPONENTS = ("embeddings", "mha", "ffn", "gffn", "conv", "residual_norms", "final_norm",
              "mlm_head", "pooler", "nsp")


# ---------------------------------------------------------------------------
# parameters


def module_params(kind: str, cfg: ModelConfig) -> int:
    """Parameters of one module of ``kind``, excluding its residual layernorm."""
    d, g = cfg.hidden, cfg.ffn_groups
    if kind == "mha":
        return 4 * d * d + 4 * d
    if kind == "ffn":
        return 8 * d * d + 5 * d
    if kind == "gffn":
        # fan-out d*4d + 4d, grouped 4d*d/G + d, projection d*d + d
        return 4 * d * d + 4 * d + (4 * d * d) // g + d + d * d + d
    if kind == "conv":
        k, s = cfg.conv_kernel, cfg.conv_group_size
        # pointwise d*2d + 2d, grouped kernel k*s*d + d, inner layernorm 2d, pointwise d*d + d
        return 2 * d * d + 2 * d + k * s * d + d + 2 * d + d * d + d
    raise ValueError(f"unknown module kind {kind!r}")


def ffn_weight_params(cfg: ModelConfig, grouped: bool) -> int:
    """Weight-matrix parameters only (no biases, no norms) of a dense FFN or a GFFN."""
    d = cfg.hidden
    if grouped:
        return 4 * d * d + (4 * d * d) // cfg.ffn_groups + d * d
    return 8 * d * d


@dataclass
class CostReport:
    name: str
    params: dict[str, int]
    per_layer: dict[str, int] = field(default_factory=dict)
    forward_flops: dict[int, int] = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def layer_params(self) -> int:
        return sum(self.per_layer.values())

    def to_dict(self) -> dict:
        data = asdict(self)
        data["total_params"] = self.total_params
        data["forward_flops"] = {str(k): v for k, v in self.forward_flops.items()}
        return data


def count_params(cfg: ModelConfig, name: str = "") -> CostReport:
    d, V = cfg.hidden, cfg.vocab_size
    per_layer: dict[str, int] = {}
    for kind in cfg.layer_modules:
        per_layer[kind] = per_layer.get(kind, 0) + module_params(kind, cfg)
    per_layer["residual_norms"] = 2 * d * len(cfg.layer_modules)
    params = {c: 0 for c in COMPONENTS}
    params["embeddings"] = (V + cfg.max_positions + cfg.segment_types) * d + 2 * d
    for key, value in per_layer.items():
        params[key] = cfg.layers * value
    params["final_norm"] = 2 * d if cfg.has_final_norm else 0
    params["mlm_head"] = d * d + d + 2 * d + V + (0 if cfg.tie_mlm_embedding else d * V)
    if cfg.include_pooler:
        params["pooler"] = d * d + d
        params["nsp"] = 2 * d + 2
    return CostReport(name or cfg.family, params, per_layer)


# ---------------------------------------------------------------------------
# FLOPs


def matmul_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def grouped_linear_flops(a: int, b: int, c: int, groups: int) -> int:
    """``a x b`` input against a ``b x c`` block-diagonal weight with ``groups`` blocks."""
    return 2 * a * b * c // groups


def _linear(rows: int, k: int, n: int) -> int:
    return matmul_flops(rows, k, n) + FLOP_CONSTANTS["add"] * rows * n


def module_flops(kind: str, cfg: ModelConfig, length: int) -> int:
    """Forward FLOPs of one module on one sequence of ``length`` tokens."""
    d, h, L, c = cfg.hidden, cfg.heads, length, FLOP_CONSTANTS
    if kind == "mha":
        return (4 * _linear(L, d, d)
                + matmul_flops(L, d, L)            # Q K^T summed over heads
                + L * L * h                        # 1/sqrt(d_head) scaling
                + c["softmax"] * L * L * h
                + matmul_flops(L, L, d))           # attention-weighted values
    if kind == "ffn":
        inner = cfg.ffn_inner
        return _linear(L, d, inner) + c["gelu"] * L * inner + _linear(L, inner, d)
    if kind == "gffn":
        inner = cfg.ffn_inner
        return (_linear(L, d, inner) + c["gelu"] * L * inner
                + grouped_linear_flops(L, inner, d, cfg.ffn_groups) + c["add"] * L * d
                + _linear(L, d, d))
    if kind == "conv":
        k, s = cfg.conv_kernel, cfg.conv_group_size
        return (_linear(L, d, 2 * d)
                + (c["sigmoid"] + c["mul"]) * L * d        # GLU
                + 2 * L * k * s * d + c["add"] * L * d     # grouped conv + bias
                + c["layernorm"] * L * d + c["swish"] * L * d
                + _linear(L, d, d))
    raise ValueError(f"unknown module kind {kind!r}")


def flop_breakdown(cfg: ModelConfig, length: int) -> dict[str, int]:
    """Forward FLOPs per component for one sequence."""
    if not 1 <= length <= cfg.max_positions:
        raise ValueError(f"sequence length {length} outside [1, {cfg.max_positions}]")
    d, V, L, c = cfg.hidden, cfg.vocab_size, length, FLOP_CONSTANTS
    out = {k: 0 for k in COMPONENTS}
    out["embeddings"] = 2 * c["add"] * L * d + c["layernorm"] * L * d
    for kind in cfg.layer_modules:
        out[kind] += cfg.layers * module_flops(kind, cfg, L)
    out["residual_norms"] = cfg.layers * len(cfg.layer_modules) * (c["add"] + c["layernorm"]) * L * d
    out["final_norm"] = c["layernorm"] * L * d if cfg.has_final_norm else 0
    out["mlm_head"] = (_linear(L, d, d) + c["gelu"] * L * d + c["layernorm"] * L * d
                       + _linear(L, d, V))
    if cfg.include_pooler:
        out["pooler"] = _linear(1, d, d) + c["tanh"] * d
        out["nsp"] = _linear(1, d, 2)
    return out


def count_flops(cfg: ModelConfig, sequence_length: int, batch: int = 1) -> int:
    """Forward FLOPs for ``batch`` sequences of ``sequence_length`` tokens."""
    return batch * sum(flop_breakdown(cfg, sequence_length).values())


def layer_flops(cfg: ModelConfig, sequence_length: int) -> int:
    """Forward FLOPs of a single encoder layer, residual norms included."""
    L, d, c = sequence_length, cfg.hidden, FLOP_CONSTANTS
    mods = sum(module_flops(kind, cfg, L) for kind in cfg.layer_modules)
    return mods + len(cfg.layer_modules) * (c["add"] + c["layernorm"]) * L * d


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class Phase:
    sequence_length: int
    steps: int
    global_batch_size: int

    def __post_init__(self):
        if min(self.sequence_length, self.steps, self.global_batch_size) <= 0:
            raise ValueError(f"phase fields must be positive: {self}")


@dataclass(frozen=True)
class TrainingSchedule:
    phases: tuple[Phase, ...]

    def __post_init__(self):
        if not self.phases:
            raise ValueError("a training schedule needs at least one phase")
        object.__setattr__(self, "phases", tuple(self.phases))

    @classmethod
    def two_phase(cls, batch: int, phase1_steps: int = 800_000, phase2_steps: int = 200_000) -> "TrainingSchedule":
        """Sequence length 128 then 384 at a fixed global batch."""
        return cls((Phase(128, phase1_steps, batch), Phase(384, phase2_steps, batch)))

    @classmethod
    def from_list(cls, items) -> "TrainingSchedule":
        return cls(tuple(p if isinstance(p, Phase) else Phase(**p) for p in items))

    def to_list(self) -> list[dict]:
        return [asdict(p) for p in self.phases]


def phase_flops(cfg: ModelConfig, schedule: TrainingSchedule) -> list[int]:
    """Training FLOPs of each phase: 3 x forward x batch x steps."""
    return [3 * count_flops(cfg, p.sequence_length) * p.global_batch_size * p.steps for p in schedule.phases]


def training_flops(cfg: ModelConfig, schedule: TrainingSchedule) -> int:
    return sum(phase_flops(cfg, schedule))


# ---------------------------------------------------------------------------
# pipeline arithmetic


@dataclass(frozen=True)
class PipelinePlan:
    replicas: int
    accumulation_factor: int
    pipeline_depth: int
    compute_batch_size: int

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")


def global_batch(plan: PipelinePlan) -> int:
    return plan.replicas * plan.accumulation_factor * plan.pipeline_depth * plan.compute_batch_size


def solve_accumulation(target: int, replicas: int, pipeline_depth: int, compute_batch_size: int) -> PipelinePlan:
    """The plan whose accumulation factor hits ``target`` exactly; ``ValueError`` otherwise."""
    per_step = replicas * pipeline_depth * compute_batch_size
    if per_step <= 0 or target <= 0:
        raise ValueError("target and pipeline fields must be positive")
    factor, rest = divmod(target, per_step)
    if rest or factor == 0:
        lower = max(factor, 1) * per_step
        raise ValueError(f"global batch {target} is not a multiple of replicas*depth*compute = {per_step} "
                         f"(nearest achievable: {lower} or {lower + per_step})")
    return PipelinePlan(replicas, factor, pipeline_depth, compute_batch_size)
