"""Semirings over float64 scores.

Every scoring algorithm in this package is written once against the
(zero, one, plus, times) interface and instantiated with one of three
semirings: max-product for Viterbi-style probability scoring, max-sum
for Viterbi in log space, and sum-product for forward-style expected
counts.  The two max semirings have an idempotent plus, which is what
makes best-match traceback possible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_PRODUCT = "max-product"
MAX_SUM = "max-sum"
SUM_PRODUCT = "sum-product"

KINDS = (MAX_PRODUCT, MAX_SUM, SUM_PRODUCT)

# ufuncs implementing plus/times per kind
_PLUS_UFUNC = {MAX_PRODUCT: np.maximum, MAX_SUM: np.maximum, SUM_PRODUCT: np.add}
_TIMES_UFUNC = {MAX_PRODUCT: np.multiply, MAX_SUM: np.add, SUM_PRODUCT: np.multiply}


def _reject_nan(a, b):
    if math.isnan(a) or math.isnan(b):
        raise ValueError("NaN semiring operand (upstream numerical fault)")


@dataclass(frozen=True)
class Semiring:
    """A commutative semiring on floats.

    ``plus``/``times`` are the scalar operations with NaN rejection; the
    ``*_arrays`` variants are the unchecked numpy fast path used inside the
    scoring recurrence (and by instrumentation wrappers).
    """

    kind: str
    zero: float
    one: float
    idempotent_plus: bool

    def plus(self, a: float, b: float) -> float:
        _reject_nan(a, b)
        return float(_PLUS_UFUNC[self.kind](a, b))

    def times(self, a: float, b: float) -> float:
        _reject_nan(a, b)
        return float(_TIMES_UFUNC[self.kind](a, b))

    # -- numpy fast path ---------------------------------------------------

    def plus_arrays(self, a, b):
        return _PLUS_UFUNC[self.kind](a, b)

    def times_arrays(self, a, b):
        return _TIMES_UFUNC[self.kind](a, b)

    def plus_reduce(self, x, axis):
        return _PLUS_UFUNC[self.kind].reduce(x, axis=axis)

    @property
    def times_is_addition(self) -> bool:
        return self.kind == MAX_SUM

    # -- path algebra --------------------------------------------------------
    #
    # Identity-encoded scores may be negative, and that breaks max-product in
    # two ways.  Its declared zero (0.0) is no longer neutral: folding it in
    # would clip real negative path scores, so scoring recurrences mark "no
    # path" with -inf internally (a true identity for max) and map -inf back
    # to the declared zero at the public boundary.  Worse, max does not
    # distribute over multiplication by a negative factor, so a recurrence
    # that keeps only the running max of path products is wrong: the smallest
    # prefix times a negative score can be the largest product.  Recurrences
    # therefore track per state the max path product AND the negated min
    # (both max-plus folds with -inf as absent) and extend them with the
    # sign-selected product below.  For max-sum and sum-product the path
    # algebra coincides with plus/times.

    @property
    def absent(self) -> float:
        return float("-inf") if self.idempotent_plus else 0.0

    def path_times_arrays(self, a, b):
        if self.kind != MAX_PRODUCT:
            return _TIMES_UFUNC[self.kind](a, b)
        gone = np.isneginf(a) | np.isneginf(b)
        with np.errstate(invalid="ignore"):
            return np.where(gone, float("-inf"), np.multiply(a, b))

    def dual_times_arrays(self, amax, aneg, b):
        """Extend (max, -min) path products by factor b, elementwise.

        amax holds the largest product over a path set, aneg the negated
        smallest; absent sets hold -inf in both.  b = -inf marks a disabled
        transition.  Returns the pair for the extended set: multiplying by a
        negative factor swaps which extreme produces which, and computing the
        swapped case as aneg*(-b) keeps every result bitwise equal to the
        underlying path's left-to-right product.
        """
        if self.kind != MAX_PRODUCT:
            raise ValueError("dual products are specific to max-product scoring")
        gone = np.isneginf(b) | np.isneginf(amax)
        nonneg = b >= 0.0
        with np.errstate(invalid="ignore"):
            pmax = np.where(nonneg, amax * b, aneg * -b)
            pneg = np.where(nonneg, aneg * b, amax * -b)
        return (np.where(gone, float("-inf"), pmax),
                np.where(gone, float("-inf"), pneg))

    def finalize_scores(self, x):
        """Map internal absent markers back to the declared zero."""
        if self.kind != MAX_PRODUCT:
            return x
        return np.where(np.isneginf(x), 0.0, x)


MAX_PRODUCT_SEMIRING = Semiring(MAX_PRODUCT, zero=0.0, one=1.0, idempotent_plus=True)
MAX_SUM_SEMIRING = Semiring(MAX_SUM, zero=float("-inf"), one=0.0, idempotent_plus=True)
SUM_PRODUCT_SEMIRING = Semiring(SUM_PRODUCT, zero=0.0, one=1.0, idempotent_plus=False)

_REGISTRY = {
    MAX_PRODUCT: MAX_PRODUCT_SEMIRING,
    MAX_SUM: MAX_SUM_SEMIRING,
    SUM_PRODUCT: SUM_PRODUCT_SEMIRING,
}


def get_semiring(kind: str) -> Semiring:
    try:
        return _REGISTRY[kind]
    except KeyError:
        raise ValueError(f"unknown semiring {kind!r}; expected one of {', '.join(KINDS)}") from None


def plus(kind: str, a: float, b: float) -> float:
    return get_semiring(kind).plus(a, b)


def times(kind: str, a: float, b: float) -> float:
    return get_semiring(kind).times(a, b)


class CountingSemiring:
    """Wraps a semiring and counts plus/times invocations (per array element).

    Used to verify that document scoring costs a linear number of semiring
    operations in document length.
    """

    def __init__(self, base: Semiring):
        self.base = base
        self.kind = base.kind
        self.zero = base.zero
        self.one = base.one
        self.idempotent_plus = base.idempotent_plus
        self.times_is_addition = base.times_is_addition
        self.absent = base.absent
        self.plus_count = 0
        self.times_count = 0

    def reset(self):
        self.plus_count = 0
        self.times_count = 0

    @property
    def total(self) -> int:
        return self.plus_count + self.times_count

    @staticmethod
    def _elements(a, b) -> int:
        shape = np.broadcast_shapes(np.shape(a), np.shape(b))
        return int(np.prod(shape, dtype=np.int64))

    def plus(self, a, b):
        self.plus_count += 1
        return self.base.plus(a, b)

    def times(self, a, b):
        self.times_count += 1
        return self.base.times(a, b)

    def plus_arrays(self, a, b):
        self.plus_count += self._elements(a, b)
        return self.base.plus_arrays(a, b)

    def times_arrays(self, a, b):
        self.times_count += self._elements(a, b)
        return self.base.times_arrays(a, b)

    def plus_reduce(self, x, axis):
        n = np.shape(x)[axis]
        self.plus_count += max(n - 1, 0) * (np.size(x) // max(n, 1))
        return self.base.plus_reduce(x, axis)

    def path_times_arrays(self, a, b):
        self.times_count += self._elements(a, b)
        return self.base.path_times_arrays(a, b)

    def dual_times_arrays(self, amax, aneg, b):
        self.times_count += 2 * self._elements(amax, b)
        return self.base.dual_times_arrays(amax, aneg, b)

    def finalize_scores(self, x):
        return self.base.finalize_scores(x)
