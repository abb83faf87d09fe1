"""Exception types and input checks shared across the package."""
from __future__ import annotations

import numpy as np


class InkError(Exception):
    """Base class for all package errors."""


class InputError(InkError, ValueError):
    """Malformed or out-of-range user input."""


class SequenceLengthError(InputError):
    pass


class NumericError(InkError, ArithmeticError):
    """A non-finite value reached a computation that requires finite input."""


class DatastoreStateError(InkError, RuntimeError):
    pass


class FormatError(InkError, ValueError):
    """A binary or text file does not match its declared layout."""


class TrainingError(InkError, RuntimeError):
    def __init__(self, message, last_good_state=None):
        super().__init__(message)
        self.last_good_state = last_good_state


def check_token_ids(ids, vocab_size, name="tokens"):
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim != 1:
        raise InputError(f"{name} must be a 1-D sequence of token ids")
    if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        raise InputError(f"{name} contains ids outside [0, {vocab_size})")
    return arr


def check_pair(src, tgt, vocab_size, max_len):
    """Validate one parallel pair; returns int64 arrays.

    The target length limit counts the appended eos position.
    """
    src = check_token_ids(src, vocab_size, "source")
    tgt = check_token_ids(tgt, vocab_size, "target")
    if src.size == 0:
        raise InputError("source sequence is empty")
    if src.size > max_len:
        raise SequenceLengthError(f"source length {src.size} exceeds max_len {max_len}")
    if tgt.size + 1 > max_len:
        raise SequenceLengthError(f"target length {tgt.size + 1} exceeds max_len {max_len}")
    return src, tgt


def check_pairs(sources, targets=None):
    if targets is None:
        pairs = list(sources)
        if pairs and not (isinstance(pairs[0], (tuple, list)) and len(pairs[0]) == 2):
            raise InputError("expected a list of (source, target) pairs")
        return [(list(s), list(t)) for s, t in pairs]
    sources, targets = list(sources), list(targets)
    if len(sources) != len(targets):
        raise InputError(f"{len(sources)} sources but {len(targets)} targets")
    return [(list(s), list(t)) for s, t in zip(sources, targets)]


def check_vector(x, dim=None, name="vector"):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InputError(f"{name} must be 1-D")
    if dim is not None and arr.shape[0] != dim:
        raise InputError(f"{name} has width {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} has non-finite entries")
    return arr


def check_probability(value, name):
    if not 0.0 <= value <= 1.0:
        raise InputError(f"{name} must lie in [0, 1], got {value}")
    return float(value)
