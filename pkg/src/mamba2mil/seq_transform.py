"""Sequence squaring and the row orderings applied to squared sequences.

A bag of ``N`` instance rows is padded to ``L = ceil(sqrt(N))**2`` rows by
appending copies of its first ``L - N`` rows. The padded sequence can then be
read as a ``side x side`` grid, which is what the transposed ordering needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractError, EmptyBagError

KINDS = ("original", "flipped", "transposed", "random", "stride")


@dataclass(frozen=True)
class SquaredSequence:
    data: np.ndarray
    original_len: int
    side: int
    pad_len: int

    @property
    def length(self) -> int:
        return self.side * self.side


@dataclass(frozen=True)
class Ordering:
    """Row ordering. ``random`` needs a seed; ``stride`` needs ``stride >= 1``."""

    kind: str
    seed: int | None = None
    stride: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown ordering {self.kind!r}; expected one of {KINDS}")
        if self.kind == "random" and self.seed is None:
            raise ValueError("random ordering requires an explicit seed")
        if self.kind == "stride" and (self.stride is None or self.stride < 1):
            raise ValueError("stride ordering requires stride >= 1")

    @classmethod
    def parse(cls, text: str, default_seed: int = 0, default_stride: int = 10) -> "Ordering":
        """Parse ``'flipped'``, ``'random:7'``, ``'stride:4'`` and the like."""
        name, _, arg = text.strip().partition(":")
        if name == "random":
            return cls("random", seed=int(arg) if arg else default_seed)
        if name == "stride":
            return cls("stride", stride=int(arg) if arg else default_stride)
        if arg:
            raise ValueError(f"ordering {name!r} takes no argument")
        return cls(name)

    def __str__(self):
        if self.kind == "random":
            return f"random:{self.seed}"
        if self.kind == "stride":
            return f"stride:{self.stride}"
        return self.kind


ORIGINAL = Ordering("original")
FLIPPED = Ordering("flipped")
TRANSPOSED = Ordering("transposed")


def squared_length(n: int) -> int:
    side = math.isqrt(n - 1) + 1 if n > 0 else 0
    return side * side


def square(seq) -> SquaredSequence:
    seq = np.asarray(seq)
    n = seq.shape[0]
    if n == 0:
        raise EmptyBagError("cannot square an empty sequence")
    side = math.isqrt(n - 1) + 1
    L = side * side
    idx = np.arange(L) % n
    return SquaredSequence(seq[idx], n, side, L - n)


def square_index(n: int) -> np.ndarray:
    """Source row for every row of the squared sequence."""
    return np.arange(squared_length(n)) % n


@lru_cache(maxsize=512)
def _perm(L: int, ordering: Ordering) -> np.ndarray:
    k = ordering.kind
    if k == "original":
        p = np.arange(L)
    elif k == "flipped":
        p = np.arange(L)[::-1].copy()
    elif k == "transposed":
        side = math.isqrt(L)
        if side * side != L:
            raise ContractError(f"transposed ordering needs a square length, got {L}")
        p = np.arange(L).reshape(side, side).T.ravel()
    elif k == "random":
        p = np.random.default_rng(ordering.seed).permutation(L)
    else:
        R = ordering.stride
        p = np.concatenate([np.arange(r, L, R) for r in range(min(R, L))]) if L else np.arange(0)
    p.setflags(write=False)
    return p


def ordering_permutation(L: int, ordering: Ordering) -> np.ndarray:
    """``reorder(X)[i] == X[perm[i]]``."""
    return _perm(int(L), ordering)


def reorder(sq, ordering: Ordering) -> np.ndarray:
    data = sq.data if isinstance(sq, SquaredSequence) else np.asarray(sq)
    return data[ordering_permutation(data.shape[0], ordering)]


def inverse_reorder(F, ordering: Ordering) -> np.ndarray:
    """Undo :func:`reorder`. The ordering must be the one used forwards; a
    mismatch cannot be detected."""
    F = np.asarray(F)
    out = np.empty_like(F)
    out[ordering_permutation(F.shape[0], ordering)] = F
    return out
