"""Exact algebra of bivariate exponential polynomials.

An :class:`ExpPoly` is a finite sum of terms

    coef * h**h_power * d**d_power * exp(h_rate * h + d_rate * d)

which is the function class closed under the conditional-moment recursions:
shifting the exponential rate in ``h`` and integrating ``int_0^h ... dw``.

Coefficients and rates are held as :mod:`mpmath` numbers.  Rates produced by
the recursions can nearly coincide (for the reference parameters two of them
differ by ~4e-4), and the closed-form antiderivative then divides by powers
of that difference; double precision would lose most significant digits to
the resulting cancellation.
"""

from __future__ import annotations

import json
import math
from typing import Iterable

import mpmath

__all__ = [
    "ExpPoly",
    "WORKING_DPS",
    "RATE_TOL",
    "ep_add",
    "ep_scale_exp",
    "ep_integrate_h",
    "ep_eval",
]

WORKING_DPS = 60
RATE_TOL = 1e-12
_DROP_TOL = 1e-300

_ctx = mpmath.MPContext()
_ctx.dps = WORKING_DPS
_mpf = _ctx.mpf


def _to_mp(x):
    return x if isinstance(x, _ctx.mpf) else _mpf(x)


class ExpPoly:
    """Immutable sum of ``coef * h^a * d^b * exp(lam*h + mu*d)`` terms.

    Terms with equal powers and rates (within ``RATE_TOL``) are merged on
    construction, so no two stored terms share a key.
    """

    __slots__ = ("_buckets",)

    def __init__(self, terms: Iterable[tuple] = ()):
        # (h_power, d_power) -> list of [h_rate, d_rate, coef]
        buckets: dict[tuple[int, int], list[list]] = {}
        for coef, hp, dp, hr, dr in terms:
            _merge_into(buckets, int(hp), int(dp), _to_mp(hr), _to_mp(dr), _to_mp(coef))
        self._buckets = _prune(buckets)

    @classmethod
    def _from_buckets(cls, buckets):
        obj = cls.__new__(cls)
        obj._buckets = _prune(buckets)
        return obj

    @classmethod
    def zero(cls) -> "ExpPoly":
        return cls()

    @classmethod
    def constant(cls, value) -> "ExpPoly":
        return cls([(value, 0, 0, 0, 0)])

    @classmethod
    def term(cls, coef=1, h_power=0, d_power=0, h_rate=0, d_rate=0) -> "ExpPoly":
        return cls([(coef, h_power, d_power, h_rate, d_rate)])

    def iter_terms(self):
        """Yield ``(coef, h_power, d_power, h_rate, d_rate)`` with mpmath values."""
        for (hp, dp), items in self._buckets.items():
            for hr, dr, c in items:
                yield c, hp, dp, hr, dr

    @property
    def terms(self) -> list[tuple[float, int, int, float, float]]:
        """Float view of the terms, sorted by key."""
        out = [(float(c), hp, dp, float(hr), float(dr)) for c, hp, dp, hr, dr in self.iter_terms()]
        out.sort(key=lambda t: (t[1], t[2], t[3], t[4], t[0]))
        return out

    def __len__(self):
        return sum(len(v) for v in self._buckets.values())

    def is_zero(self) -> bool:
        return len(self) == 0

    def __repr__(self):
        return f"ExpPoly({self.terms!r})"

    # --- algebra ---------------------------------------------------------

    def __add__(self, other: "ExpPoly") -> "ExpPoly":
        if not isinstance(other, ExpPoly):
            return NotImplemented
        buckets = _copy_buckets(self._buckets)
        for c, hp, dp, hr, dr in other.iter_terms():
            _merge_into(buckets, hp, dp, hr, dr, c)
        return ExpPoly._from_buckets(buckets)

    def __neg__(self) -> "ExpPoly":
        return self.scale(-1)

    def __sub__(self, other: "ExpPoly") -> "ExpPoly":
        if not isinstance(other, ExpPoly):
            return NotImplemented
        return self + (-other)

    def scale(self, factor) -> "ExpPoly":
        factor = _to_mp(factor)
        return ExpPoly._from_buckets(
            {k: [[hr, dr, c * factor] for hr, dr, c in v] for k, v in self._buckets.items()}
        )

    def __mul__(self, factor):
        if isinstance(factor, ExpPoly):
            return NotImplemented
        return self.scale(factor)

    __rmul__ = __mul__

    def shift_h_rate(self, shift) -> "ExpPoly":
        """Multiply by ``exp(shift * h)``."""
        shift = _to_mp(shift)
        return ExpPoly._from_buckets(
            {k: [[hr + shift, dr, c] for hr, dr, c in v] for k, v in self._buckets.items()}
        )

    def integrate_h(self) -> "ExpPoly":
        """Return ``F(h, d) = int_0^h f(w, d) dw`` in closed form."""
        buckets: dict = {}
        for c, p, dp, alpha, dr in self.iter_terms():
            if abs(alpha) <= RATE_TOL:
                _merge_into(buckets, p + 1, dp, _mpf(0), dr, c / (p + 1))
                continue
            # int_0^h w^p e^{aw} dw = e^{ah} sum_j (-1)^j p!/(p-j)! h^(p-j) / a^(j+1)
            #                          - (-1)^p p! / a^(p+1)
            falling = _mpf(1)
            inv_a = 1 / alpha
            inv_pow = inv_a
            for j in range(p + 1):
                coef = c * falling * inv_pow
                if j % 2:
                    coef = -coef
                _merge_into(buckets, p - j, dp, alpha, dr, coef)
                if j < p:
                    falling *= p - j
                    inv_pow *= inv_a
            # falling == p!, inv_pow == a^-(p+1): subtract the antiderivative at 0
            lower = c * falling * inv_pow
            if p % 2 == 0:
                lower = -lower
            _merge_into(buckets, 0, dp, _mpf(0), dr, lower)
        return ExpPoly._from_buckets(buckets)

    def along_total_lag(self) -> "ExpPoly":
        """Reinterpret a function of ``h`` alone as a function of ``h + d``.

        Requires every term to have ``d_power == 0`` and ``d_rate == 0``.
        """
        buckets: dict = {}
        for c, p, dp, rate, dr in self.iter_terms():
            if dp or abs(dr) > RATE_TOL:
                raise ValueError("along_total_lag needs a function of h only")
            for a in range(p + 1):
                _merge_into(buckets, a, p - a, rate, rate, c * math.comb(p, a))
        return ExpPoly._from_buckets(buckets)

    # --- evaluation ------------------------------------------------------

    def evaluate_mp(self, h, d=0):
        """Value at ``(h, d)`` as an mpmath number (compensated, magnitude-ordered)."""
        h = _to_mp(h)
        d = _to_mp(d)
        vals = []
        for c, hp, dp, hr, dr in self.iter_terms():
            v = c * _ctx.exp(hr * h + dr * d)
            if hp:
                v *= h**hp
            if dp:
                v *= d**dp
            vals.append(v)
        if not vals:
            return _mpf(0)
        vals.sort(key=abs, reverse=True)
        return _ctx.fsum(vals)

    def __call__(self, h, d=0) -> float:
        return float(self.evaluate_mp(h, d))

    def max_rate(self) -> float:
        """Largest ``h_rate + d_rate`` over the terms (``-inf`` when empty)."""
        rates = [float(hr + dr) for _, _, _, hr, dr in self.iter_terms()]
        return max(rates) if rates else -math.inf

    def to_json(self) -> str:
        """Debug serialization: sorted list of ``[coef, h_power, d_power, h_rate, d_rate]``."""
        return json.dumps([list(t) for t in self.terms])


def _copy_buckets(buckets):
    return {k: [list(item) for item in v] for k, v in buckets.items()}


def _merge_into(buckets, hp, dp, hr, dr, coef):
    items = buckets.setdefault((hp, dp), [])
    for item in items:
        if abs(item[0] - hr) <= RATE_TOL and abs(item[1] - dr) <= RATE_TOL:
            item[2] += coef
            return
    items.append([hr, dr, coef])


def _prune(buckets):
    out = {}
    for k, items in buckets.items():
        kept = [item for item in items if abs(item[2]) >= _DROP_TOL]
        if kept:
            out[k] = kept
    return out


def ep_add(f: ExpPoly, g: ExpPoly) -> ExpPoly:
    return f + g


def ep_scale_exp(f: ExpPoly, h_rate_shift: float) -> ExpPoly:
    return f.shift_h_rate(h_rate_shift)


def ep_integrate_h(f: ExpPoly) -> ExpPoly:
    return f.integrate_h()


def ep_eval(f: ExpPoly, h: float, d: float = 0.0) -> float:
    return f(h, d)
