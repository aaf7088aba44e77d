"""scikit-learn style wrapper: fit a toy MLM encoder on token arrays."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .data import FIRST_REGULAR, MASK, PretrainingData
from .model import ModelConfig, build_model, encoder_forward, heads_forward
from .train import MaskingConfig, OptimizerConfig, evaluate_mlm, train_loop
from .validation import check_token_array, padding_mask


class GroupBERTEncoder(TransformerMixin, BaseEstimator):
    """Masked-language-model encoder over integer token arrays.

    ``X`` is ``[n_sequences, length]`` with ids right-padded by 0.
    ``fit`` trains with MLM only; ``transform`` returns mean-pooled hidden
    states; ``predict`` fills ``[MASK]`` (id 3) positions; ``score`` is the
    negated held-out MLM loss.
    """

    def __init__(self, family: str = "groupbert", layers: int = 2, hidden: int = 64, heads: int = 4,
                 ffn_groups: int = 4, conv_kernel: int = 7, conv_group_size: int = 16,
                 vocab_size: int | None = None, max_positions: int | None = None, peak_lr: float = 5e-4,
                 n_steps: int = 500, batch_size: int = 16, mask_prob: float = 0.15, weight_decay: float = 0.01,
                 random_state: int = 0, precision: str = "oracle64"):
        self.family = family
        self.layers = layers
        self.hidden = hidden
        self.heads = heads
        self.ffn_groups = ffn_groups
        self.conv_kernel = conv_kernel
        self.conv_group_size = conv_group_size
        self.vocab_size = vocab_size
        self.max_positions = max_positions
        self.peak_lr = peak_lr
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.mask_prob = mask_prob
        self.weight_decay = weight_decay
        self.random_state = random_state
        self.precision = precision

    def _data(self, X) -> PretrainingData:
        tokens = check_token_array(X, vocab_size=getattr(self, "vocab_size_", self.vocab_size),
                                   max_length=getattr(self, "model_", None) and self.model_.config.max_positions)
        zeros = np.zeros_like(tokens)
        return PretrainingData(tokens, zeros, padding_mask(tokens), np.zeros(len(tokens), dtype=np.int64),
                               self.vocab_size_ if hasattr(self, "vocab_size_") else int(tokens.max()) + 1)

    def fit(self, X, y=None):
        tokens = check_token_array(X, vocab_size=self.vocab_size, max_length=self.max_positions)
        self.vocab_size_ = self.vocab_size or max(int(tokens.max()) + 1, FIRST_REGULAR + 1)
        self.n_features_in_ = tokens.shape[1]
        config = ModelConfig(family=self.family, layers=self.layers, hidden=self.hidden, heads=self.heads,
                             ffn_groups=self.ffn_groups, conv_kernel=self.conv_kernel,
                             conv_group_size=self.conv_group_size, vocab_size=self.vocab_size_,
                             max_positions=self.max_positions or tokens.shape[1], include_pooler=False)
        config.validate()
        with T.precision(self.precision):
            self.model_ = build_model(config, self.random_state)
            data = self._data(tokens)
            result = train_loop(self.model_, data, self._optimizer(), masking=self._masking(),
                                batch_size=min(self.batch_size, len(data)), seed=self.random_state, nsp=False)
        self.loss_curve_ = result.losses
        return self

    def _optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(peak_lr=self.peak_lr, total_steps=self.n_steps, weight_decay=self.weight_decay)

    def _masking(self) -> MaskingConfig:
        return MaskingConfig(mask_prob=self.mask_prob, seed=self.random_state)

    def _hidden(self, tokens: np.ndarray) -> np.ndarray:
        with T.precision(self.precision), T.no_grad():
            return encoder_forward(self.model_, tokens, None, padding_mask(tokens)).hidden.data

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        data = self._data(X)
        hidden = self._hidden(data.tokens)
        weights = data.mask[..., None].astype(hidden.dtype)
        return (hidden * weights).sum(axis=1) / weights.sum(axis=1)

    def predict(self, X) -> np.ndarray:
        """Copy of ``X`` with every ``[MASK]`` replaced by the most likely regular token."""
        check_is_fitted(self, "model_")
        data = self._data(X)
        tokens = data.tokens.copy()
        rows, cols = np.nonzero(tokens == MASK)
        if rows.size:
            with T.precision(self.precision), T.no_grad():
                hidden = encoder_forward(self.model_, tokens, None, data.mask).hidden
                flat = rows * tokens.shape[1] + cols
                logits = heads_forward(hidden, self.model_, flat)["mlm_logits"].data
            tokens[rows, cols] = FIRST_REGULAR + np.argmax(logits[:, FIRST_REGULAR:], axis=1)
        return tokens

    def score(self, X, y=None) -> float:
        """Negated mean MLM loss under a fixed evaluation mask (higher is better)."""
        check_is_fitted(self, "model_")
        with T.precision(self.precision):
            return -evaluate_mlm(self.model_, self._data(X), self._masking())
