"""Input checks for token arrays handed to the estimator API."""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .data import PAD


def check_token_array(X, *, vocab_size: int | None = None, max_length: int | None = None) -> np.ndarray:
    """Coerce ``X`` to a 2-D int64 array of token ids, right-padded with ``PAD``.

    Rejects non-integral values, negative ids, ids outside ``vocab_size``,
    rows longer than ``max_length``, all-padding rows and padding that is
    not a suffix.
    """
    arr = check_array(X, dtype=None, ensure_2d=True, ensure_all_finite=True)
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("token ids must be integers")
    arr = arr.astype(np.int64)
    if arr.min() < 0:
        raise ValueError("token ids must be non-negative")
    if vocab_size is not None and arr.max() >= vocab_size:
        raise ValueError(f"token id {int(arr.max())} outside vocabulary of size {vocab_size}")
    if max_length is not None and arr.shape[1] > max_length:
        raise ValueError(f"sequences of length {arr.shape[1]} exceed the model's {max_length} positions")
    real = arr != PAD
    if not real.any(axis=1).all():
        raise ValueError("every sequence needs at least one non-padding token")
    lengths = real.sum(axis=1)
    if (real != (np.arange(arr.shape[1]) < lengths[:, None])).any():
        raise ValueError("padding must be a suffix of each sequence")
    return arr


def padding_mask(tokens: np.ndarray) -> np.ndarray:
    return tokens != PAD
