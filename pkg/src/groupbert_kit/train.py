"""MLM/NSP training: masking, AdamW, warmup-decay schedule and the training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .data import FIRST_REGULAR, MASK, SPECIAL_IDS, Batch, PretrainingData
from .io_utils import atomic_write
from .model import Model, encoder_forward, heads_forward
from .tensor import Tensor

log = logging.getLogger(__name__)

THREADS_ENV = "GROUPBERT_KIT_THREADS"
METRIC_FIELDS = ("step", "lr", "loss", "mlm_loss", "nsp_loss")


class DivergenceError(RuntimeError):
    """Training loss stayed far above its starting value."""

    def __init__(self, message: str, step: int, loss: float, initial: float):
        super().__init__(message)
        self.step, self.loss, self.initial = step, loss, initial


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str, step: int):
        super().__init__(f"non-finite gradient in {name!r} at step {step}")
        self.name, self.step = name, step


@dataclass(frozen=True)
class OptimizerConfig:
    peak_lr: float = 1e-3
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    bias_correction: bool = False
    warmup_steps: int | None = None  # default min(1e4, 0.1 * total_steps)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if self.peak_lr < 0 or self.weight_decay < 0:
            raise ValueError("peak_lr and weight_decay must be non-negative")

    @property
    def warmup(self) -> int:
        if self.warmup_steps is not None:
            return int(self.warmup_steps)
        return int(min(10_000, 0.1 * self.total_steps))


@dataclass(frozen=True)
class MaskingConfig:
    mask_prob: float = 0.15
    replace_mask: float = 0.8
    replace_random: float = 0.1
    keep: float = 0.1
    mask_token_id: int = MASK
    seed: int = 0
    special_ids: tuple[int, ...] = SPECIAL_IDS

    def __post_init__(self):
        if not 0 <= self.mask_prob <= 1:
            raise ValueError("mask_prob must lie in [0, 1]")
        parts = (self.replace_mask, self.replace_random, self.keep)
        if min(parts) < 0 or not math.isclose(sum(parts), 1.0, abs_tol=1e-9):
            raise ValueError(f"replace_mask + replace_random + keep must equal 1, got {sum(parts)}")
        object.__setattr__(self, "special_ids", tuple(self.special_ids))


@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# masking


def mask_mlm(tokens, config: MaskingConfig, rng: np.random.Generator, vocab_size: int):
    """Corrupt one sequence for MLM.

    Returns ``(corrupted, positions, labels)`` where ``positions`` index the
    selected tokens and ``labels`` hold their original ids. Selected tokens
    become ``[MASK]``, a random regular id, or stay unchanged in the
    configured proportions.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    maskable = ~np.isin(tokens, config.special_ids)
    chosen = (rng.random(tokens.shape) < config.mask_prob) & maskable
    positions = np.flatnonzero(chosen)
    corrupted = tokens.copy()
    labels = tokens[positions]
    u = rng.random(positions.size)
    to_mask = positions[u < config.replace_mask]
    to_random = positions[(u >= config.replace_mask) & (u < config.replace_mask + config.replace_random)]
    corrupted[to_mask] = config.mask_token_id
    corrupted[to_random] = rng.integers(FIRST_REGULAR, vocab_size, size=to_random.size)
    return corrupted, positions, labels


@dataclass
class MaskedBatch:
    tokens: np.ndarray       # corrupted [B, L]
    positions: np.ndarray    # flat indices into B*L
    labels: np.ndarray
    skipped: int             # sequences with nothing maskable


def mask_batch(batch: Batch, config: MaskingConfig, vocab_size: int) -> MaskedBatch:
    """Mask every row with an rng keyed by ``(config.seed, sequence index)``."""
    tokens = batch.tokens.copy()
    positions, labels, skipped = [], [], 0
    length = tokens.shape[1]
    for row, seq_index in enumerate(batch.index):
        if not (~np.isin(batch.tokens[row], config.special_ids)).any():
            skipped += 1
            continue
        rng = np.random.default_rng([config.seed, int(seq_index)])
        corrupted, pos, lab = mask_mlm(batch.tokens[row], config, rng, vocab_size)
        tokens[row] = corrupted
        positions.append(pos + row * length)
        labels.append(lab)
    if skipped:
        log.warning("%d sequence(s) had no maskable tokens and were skipped", skipped)
    cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64))
    return MaskedBatch(tokens, cat(positions), cat(labels), skipped)


# ---------------------------------------------------------------------------
# optimisation


def lr_schedule(step: int, config: OptimizerConfig) -> float:
    """Linear warm-up from 0 to ``peak_lr`` then linear decay to 0 at ``total_steps``."""
    total, warmup, peak = config.total_steps, config.warmup, config.peak_lr
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if total == warmup:
        return peak
    return peak * (total - step) / (total - warmup)


def decays(name: str) -> bool:
    """Weight decay skips biases and layernorm parameters."""
    return not name.endswith((".bias", ".gamma", ".beta"))


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: TrainState,
               config: OptimizerConfig, lr: float) -> TrainState:
    """One AdamW update in place; weight decay is decoupled from the adaptive step."""
    t = state.step + 1
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(name, t)
    b1, b2 = config.beta1, config.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if config.bias_correction:
            update = (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + config.eps)
        else:
            update = m / (np.sqrt(v) + config.eps)
        if config.weight_decay and decays(name):
            update = update + config.weight_decay * p.data
        p.data -= lr * update
    state.step = t
    return state


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossParts:
    loss: Tensor
    mlm_sum: float
    nsp_sum: float
    n_masked: int
    n_sequences: int


def batch_loss(model: Model, batch: Batch, masked: MaskedBatch, *, nsp: bool, mlm_denominator: float,
               nsp_denominator: float, training: bool = False, rng=None, dropout_rate: float | None = None) -> LossParts:
    """Summed MLM (and NSP) cross-entropy divided by the given denominators.

    Passing whole-batch denominators lets shards of one batch produce
    gradients that simply add up.
    """
    out = encoder_forward(model, masked.tokens, batch.segments, batch.mask, training=training, rng=rng,
                          dropout_rate=dropout_rate)
    heads = heads_forward(out.hidden, model, masked.positions)
    n = int(masked.positions.size)
    loss = None
    mlm_sum = 0.0
    if n:
        mlm = T.cross_entropy(heads["mlm_logits"], masked.labels, mlm_denominator)
        mlm_sum = mlm.item() * mlm_denominator
        loss = mlm
    nsp_sum = 0.0
    if nsp and "nsp_logits" in heads:
        nsp_loss = T.cross_entropy(heads["nsp_logits"], batch.nsp_labels, nsp_denominator)
        nsp_sum = nsp_loss.item() * nsp_denominator
        loss = nsp_loss if loss is None else T.add(loss, nsp_loss)
    if loss is None:
        loss = T.scale(T.sum(heads["mlm_logits"]), 0.0)
    return LossParts(loss, mlm_sum, nsp_sum, n, len(batch))


def _worker_count(workers: int | None) -> int:
    if workers is not None:
        return max(int(workers), 1)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(int(env), 1)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return 1


def compute_gradients(model: Model, batch: Batch, masked: MaskedBatch, *, nsp: bool, training: bool,
                      dropout_rate: float, seed: int, step: int, workers: int = 1):
    """Loss terms and summed gradients; shards are reduced in worker-index order."""
    total_masked = max(int(masked.positions.size), 1)
    total_seq = len(batch)
    length = batch.tokens.shape[1]
    shards = [s for s in np.array_split(np.arange(total_seq), min(workers, total_seq)) if s.size]

    def run(shard_id: int, rows: np.ndarray):
        shadow = model if len(shards) == 1 else model.shadow()
        shadow.zero_grad()
        lo, hi = rows[0] * length, (rows[-1] + 1) * length
        keep = (masked.positions >= lo) & (masked.positions < hi)
        sub = MaskedBatch(masked.tokens[rows], masked.positions[keep] - lo, masked.labels[keep], 0)
        rng = np.random.default_rng([seed, step, shard_id]) if training and dropout_rate > 0 else None
        parts = batch_loss(shadow, batch.take(rows), sub, nsp=nsp, mlm_denominator=total_masked,
                           nsp_denominator=total_seq, training=training, rng=rng, dropout_rate=dropout_rate)
        T.backward(parts.loss)
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in shadow.params.items()}
        return parts, grads

    if len(shards) == 1:
        results = [run(0, shards[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            results = list(pool.map(run, range(len(shards)), shards))
    grads = dict(results[0][1])
    for _, g in results[1:]:
        for k in grads:
            grads[k] = grads[k] + g[k]
    mlm_sum = sum(p.mlm_sum for p, _ in results)
    nsp_sum = sum(p.nsp_sum for p, _ in results)
    n_masked = sum(p.n_masked for p, _ in results)
    return grads, mlm_sum / max(n_masked, 1), nsp_sum / total_seq if nsp else 0.0, n_masked


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    metrics: list[dict]
    state: TrainState
    skipped_sequences: int = 0

    @property
    def losses(self) -> list[float]:
        return [m["loss"] for m in self.metrics]


class _MetricsWriter:
    """Appends rows to ``<path>.partial`` and renames it into place on close."""

    def __init__(self, path: Path | None):
        self.path = Path(path) if path else None
        self.fh = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.partial = self.path.with_name(self.path.name + ".partial")
            self.fh = open(self.partial, "w", newline="")
            self.writer = csv.DictWriter(self.fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
            self.writer.writeheader()

    def write(self, row: dict) -> None:
        if self.fh:
            self.writer.writerow({k: row[k] for k in METRIC_FIELDS})
            self.fh.flush()

    def close(self, commit: bool = True) -> None:
        if self.fh:
            self.fh.close()
            self.fh = None
            if commit:
                os.replace(self.partial, self.path)


def train_loop(model: Model, data: PretrainingData, optimizer: OptimizerConfig, *, mode: str = "pretrain",
               masking: MaskingConfig | None = None, batch_size: int = 16, seed: int = 0, nsp: bool = True,
               metrics_path: Path | str | None = None, checkpoint_dir: Path | str | None = None,
               checkpoint_every: int = 0, workers: int | None = None, divergence_factor: float = 10.0,
               divergence_patience: int = 50, state: TrainState | None = None) -> TrainResult:
    """Run ``optimizer.total_steps`` steps of MLM (+NSP) training.

    ``mode="pretrain"`` runs without dropout; ``mode="finetune"`` uses the
    model's configured dropout and forces AdamW bias correction on. Raises
    :class:`DivergenceError` once the loss has stayed above
    ``divergence_factor`` x the first step's loss for ``divergence_patience``
    consecutive steps.
    """
    if mode not in ("pretrain", "finetune"):
        raise ValueError(f"mode must be 'pretrain' or 'finetune', got {mode!r}")
    masking = masking or MaskingConfig(seed=seed)
    if mode == "finetune":
        optimizer = replace(optimizer, bias_correction=True)
        dropout_rate = model.config.dropout_rate
    else:
        dropout_rate = 0.0
    state = state or TrainState()
    n_workers = _worker_count(workers)
    writer = _MetricsWriter(metrics_path)
    metrics: list[dict] = []
    initial = None
    over = 0
    skipped = 0
    committed = False
    try:
        for step in range(state.step, optimizer.total_steps):
            if mode == "pretrain":
                assert dropout_rate == 0.0, "pre-training must run without dropout"
            batch = data.batch_for_step(step, batch_size)
            masked = mask_batch(batch, masking, model.config.vocab_size)
            skipped += masked.skipped
            grads, mlm_loss, nsp_loss, _ = compute_gradients(
                model, batch, masked, nsp=nsp, training=dropout_rate > 0, dropout_rate=dropout_rate,
                seed=seed, step=step, workers=n_workers)
            loss = mlm_loss + nsp_loss
            lr = lr_schedule(step, optimizer)
            row = {"step": step, "lr": lr, "loss": loss, "mlm_loss": mlm_loss, "nsp_loss": nsp_loss}
            metrics.append(row)
            writer.write(row)
            if initial is None:
                initial = loss
            if not math.isfinite(loss) or loss > divergence_factor * initial:
                over += 1
                if over >= divergence_patience:
                    raise DivergenceError(
                        f"loss {loss:.4g} exceeded {divergence_factor:g}x the initial loss {initial:.4g} "
                        f"for {over} consecutive steps (step {step}, lr {lr:.3g})", step, loss, initial)
            else:
                over = 0
            adamw_step(model.params, grads, state, optimizer, lr)
            if checkpoint_dir and checkpoint_every and (step + 1) % checkpoint_every == 0:
                from .checkpoint import save_checkpoint
                save_checkpoint(model, Path(checkpoint_dir) / f"step{step + 1:06d}.ckpt",
                                extra={"step": step + 1})
        committed = True
    finally:
        writer.close(commit=committed)
    model.zero_grad()
    return TrainResult(metrics, state, skipped)


def evaluate_mlm(model: Model, data: PretrainingData, masking: MaskingConfig | None = None,
                 batch_size: int = 64, eval_seed: int = 1234) -> float:
    """Mean MLM cross-entropy over all masked positions, no dropout, no gradients."""
    if len(data) == 0:
        raise ValueError("evaluation data is empty")
    masking = replace(masking or MaskingConfig(), seed=eval_seed)
    total, count = 0.0, 0
    with T.no_grad():
        for batch in data.batches(batch_size):
            masked = mask_batch(batch, masking, model.config.vocab_size)
            if not masked.positions.size:
                continue
            out = encoder_forward(model, masked.tokens, batch.segments, batch.mask, training=False)
            logits = heads_forward(out.hidden, model, masked.positions)["mlm_logits"]
            total += T.cross_entropy(logits, masked.labels, 1.0).item()
            count += masked.positions.size
    if count == 0:
        raise ValueError("evaluation data produced no masked positions")
    return total / count


def write_metrics_csv(metrics: list[dict], path: Path | str) -> Path:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in metrics:
        writer.writerow({k: row[k] for k in METRIC_FIELDS})
    return atomic_write(path, buf.getvalue())
