"""Input validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .corpus import Vocab
from .errors import DataError
from .model import FhmmParams


def check_token_sequences(X, n_symbols=None):
    """Coerce ``X`` to a list of 1-d int64 arrays of non-negative ids.

    Returns ``(sequences, n_symbols)``; when ``n_symbols`` is None it is
    inferred as ``max id + 1``.
    """
    sequences = []
    for i, seq in enumerate(X):
        arr = np.asarray(seq)
        if arr.ndim != 1 or arr.size == 0:
            raise DataError(f"sequence {i} must be a non-empty 1-d id array")
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(arr == np.floor(arr)):
                raise DataError(f"sequence {i} contains non-integer ids")
        arr = arr.astype(np.int64)
        if arr.min() < 0:
            raise DataError(f"sequence {i} contains negative ids")
        sequences.append(arr)
    if not sequences:
        raise DataError("no sequences given")
    top = int(max(int(s.max()) for s in sequences))
    if n_symbols is None:
        return sequences, top + 1
    if top >= n_symbols:
        raise DataError(f"token id {top} out of range for {n_symbols} symbols")
    return sequences, int(n_symbols)


def check_model_vocab(params: FhmmParams, vocab: Vocab) -> None:
    """The model's symbol count must match the vocabulary size."""
    if params.n_symbols != len(vocab):
        raise DataError(
            f"model expects {params.n_symbols} symbols but vocab has {len(vocab)}")
