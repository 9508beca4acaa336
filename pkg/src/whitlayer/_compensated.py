"""Error-free transformations for compensated (doubled-precision) arithmetic.

Values in doubled precision are carried as unevaluated pairs ``hi + lo`` with
``|lo| <= ulp(hi) / 2`` after normalization. Everything is elementwise numpy;
none of it survives fused multiply-add contraction, which numpy never applies.
"""

import numpy as np

_SPLITTER = 134217729.0  # 2**27 + 1


def split(a):
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


def two_sum(a, b):
    """``s + e == a + b`` exactly (Knuth)."""
    s = a + b
    v = s - a
    return s, (a - (s - v)) + (b - v)


def two_product(a, b):
    """``p + e == a * b`` exactly (Dekker)."""
    p = a * b
    a_hi, a_lo = split(a)
    b_hi, b_lo = split(b)
    e = ((a_hi * b_hi - p) + a_hi * b_lo + a_lo * b_hi) + a_lo * b_lo
    return p, e


class Accumulator:
    """Running sum of products in doubled precision.

    ``add`` accepts a doubled-precision operand ``hi + lo``; the product of
    the coefficient with ``lo`` only needs working precision.
    """

    def __init__(self, initial):
        self.s = np.array(initial, dtype=np.float64)
        self.c = np.zeros_like(self.s)

    def add(self, where, coef, hi, lo=None):
        p, e = two_product(coef, hi)
        s, q = two_sum(self.s[where], p)
        self.s[where] = s
        if lo is not None:
            e = e + coef * lo
        self.c[where] += q + e

    def result(self):
        """Normalized pair ``(hi, lo)``."""
        return two_sum(self.s, self.c)
