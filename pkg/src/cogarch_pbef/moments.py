"""Stationary, transient, conditional and joint moments of (G, sigma^2).

Notation: for the increment ``G_{s,h} = G_{s+h} - G_s`` and ``d = s - v``,

    E_v[G_{s,h}^{2i} sigma_{s+h}^{2(k-i)}] = sum_r J_{kir}(h, d) sigma_v^{2r}.

Applying the generator of (G, sigma^2) to ``y^{2i} x^{k-i}`` gives the linear
ODE system in ``h``

    F_{k,i}' = Psi(k-i) F_{k,i} + (k-i) beta F_{k-1,i}
               + sum_{l=1}^{i} binom(2i, 2l) c(l, k-i) F_{k,i-l},
    c(l, m)  = E[L]_1^{(2l)} + sum_{j=1}^{m} binom(m, j) phi^j E[L]_1^{(2l+2j)},

with ``F_{k,i}(0) = 0`` for ``i >= 1``.  Every coefficient is an
:class:`~cogarch_pbef.expfun.ExpPoly` obtained by variation of constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MomentError, ParameterError
from .expfun import ExpPoly
from .levy import LevyModel, Theta, psi, qv_moment, stationarity_check

__all__ = [
    "K_MAX",
    "JTable",
    "MomentCache",
    "stationary_sigma_moment",
    "build_jtable",
    "build_moment_cache",
    "conditional_product_moment",
    "marginal_g_moment",
    "joint_return_moment",
]

K_MAX = 4
_GAP_TOL = 1e-9


def stationary_sigma_moment(model: LevyModel, theta: Theta, k: int) -> float:
    """``E sigma_inf^{2k} = k! beta^k prod_{l<=k} (-1/Psi(l))``."""
    if k < 0:
        raise ParameterError(f"k must be >= 0, got {k}")
    value = math.factorial(k) * theta.beta**k
    for ell in range(1, k + 1):
        p = psi(model, theta, ell)
        if p >= 0:
            raise MomentError(f"stationary moment does not exist: Psi({ell}) = {p:.6g} >= 0")
        value /= -p
    return value


class _Coefficients:
    """Scalar inputs of the recursions for one (model, theta)."""

    def __init__(self, model: LevyModel, theta: Theta, k_max: int):
        self.beta = theta.beta
        self.psi = [psi(model, theta, c) for c in range(k_max + 1)]
        qv = {ell: qv_moment(model, 2 * ell) for ell in range(1, 2 * k_max + 1) if model.moment_is_finite(2 * ell)}
        self.c = {}
        for m in range(k_max + 1):
            for ell in range(1, k_max - m + 1):
                val = qv[ell]
                for j in range(1, m + 1):
                    val += math.comb(m, j) * theta.phi**j * qv[ell + j]
                self.c[ell, m] = val

    def source(self, k, i, lookup, r):
        """Right-hand side of the ODE for F_{k,i}, coefficient of sigma_v^{2r}."""
        total = ExpPoly.zero()
        if i < k and (k - 1, i, r) in lookup:
            total = total + lookup[k - 1, i, r].scale((k - i) * self.beta)
        for ell in range(1, i + 1):
            key = (k, i - ell, r)
            if key in lookup:
                total = total + lookup[key].scale(math.comb(2 * i, 2 * ell) * self.c[ell, k - i])
        return total


def _variation_of_constants(source: ExpPoly, rate: float) -> ExpPoly:
    """``exp(rate h) int_0^h exp(-rate w) source(w) dw``."""
    return source.shift_h_rate(-rate).integrate_h().shift_h_rate(rate)


@dataclass(frozen=True)
class JTable:
    """Conditional-moment coefficients ``J_{kir}(h, d)`` for ``k <= k_max``.

    Evaluations are memoized per ``(k, i, h, d)``; the table itself is
    immutable after :func:`build_jtable`.
    """

    model: LevyModel
    theta: Theta
    k_max: int
    entries: dict
    _eval_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __getitem__(self, key) -> ExpPoly:
        k, i, r = key
        if not (0 <= i <= k <= self.k_max) or not (0 <= r <= k):
            raise MomentError(f"not tabulated: J[{k},{i},{r}] with k_max={self.k_max}")
        return self.entries.get(key, ExpPoly.zero())

    def coefficient_vector(self, k: int, i: int, h: float, d: float) -> np.ndarray:
        """``[J_{ki0}(h,d), ..., J_{kik}(h,d)]`` as floats."""
        if not (0 <= i <= k <= self.k_max):
            raise MomentError(f"not tabulated: (k={k}, i={i}) with k_max={self.k_max}")
        key = (k, i, float(h), float(d))
        vec = self._eval_cache.get(key)
        if vec is None:
            vec = np.array([self[k, i, r](h, d) for r in range(k + 1)])
            vec.setflags(write=False)
            self._eval_cache[key] = vec
        return vec


def build_jtable(model: LevyModel, theta: Theta, k_max: int = K_MAX) -> JTable:
    """Tabulate every ``J_{kir}``, ``0 <= i, r <= k <= k_max``."""
    if not 0 <= k_max <= K_MAX:
        raise ParameterError(f"k_max must lie in [0, {K_MAX}], got {k_max}")
    _require_stationary(model, theta, k_max)
    co = _Coefficients(model, theta, k_max)

    # i = 0: functions of the total lag t = h + d only,
    # g_{k,r}' = Psi(k) g_{k,r} + k beta g_{k-1,r}, g_{k,r}(0) = [r == k].
    g = {(0, 0): ExpPoly.constant(1)}
    for k in range(1, k_max + 1):
        g[k, k] = ExpPoly.term(1, h_rate=co.psi[k])
        for r in range(k):
            g[k, r] = _variation_of_constants(g[k - 1, r].scale(k * co.beta), co.psi[k])

    entries = {}
    for (k, r), fn in g.items():
        entries[k, 0, r] = fn.along_total_lag()
    for k in range(1, k_max + 1):
        for i in range(1, k + 1):
            for r in range(k + 1):
                src = co.source(k, i, entries, r)
                if src.is_zero():
                    continue
                entries[k, i, r] = _variation_of_constants(src, co.psi[k - i])
    return JTable(model=model, theta=theta, k_max=k_max, entries=entries)


@dataclass(frozen=True)
class MomentCache:
    """Stationary sigma moments, transient products and the conditional table.

    ``transient_products[k, i]`` is ``E(G_t^{2i} sigma_t^{2(k-i)})`` as an
    ExpPoly in ``t`` (stored in the ``h`` slot), for ``G_0 = 0`` and a
    stationary ``sigma_0``.
    """

    stationary_sigma: tuple
    transient_products: dict
    jtable: JTable

    @property
    def model(self) -> LevyModel:
        return self.jtable.model

    @property
    def theta(self) -> Theta:
        return self.jtable.theta

    @property
    def k_max(self) -> int:
        return self.jtable.k_max


def build_moment_cache(model: LevyModel, theta: Theta, k_max: int = K_MAX, jtable: JTable | None = None) -> MomentCache:
    if jtable is None:
        jtable = build_jtable(model, theta, k_max)
    elif jtable.k_max < k_max:
        raise ParameterError(f"jtable has k_max={jtable.k_max} < {k_max}")
    sig = tuple(stationary_sigma_moment(model, theta, k) for k in range(k_max + 1))
    co = _Coefficients(model, theta, k_max)
    prods = {(k, 0): ExpPoly.constant(sig[k]) for k in range(k_max + 1)}
    for k in range(1, k_max + 1):
        for i in range(1, k + 1):
            # same ODE as the conditional table; drop the sigma index by using r = 0
            src = co.source(k, i, {(kk, ii, 0): v for (kk, ii), v in prods.items()}, 0)
            prods[k, i] = _variation_of_constants(src, co.psi[k - i])
    return MomentCache(stationary_sigma=sig, transient_products=prods, jtable=jtable)


def conditional_product_moment(jt: JTable, k: int, i: int, h: float, d: float, sigma2_v: float) -> float:
    """``E_v[G_{s,h}^{2i} sigma_{s+h}^{2(k-i)}]`` given ``sigma_v^2`` and ``d = s - v``."""
    if h < 0 or d < 0:
        raise ParameterError(f"h and d must be >= 0, got h={h}, d={d}")
    vec = jt.coefficient_vector(k, i, h, d)
    return float(np.polynomial.polynomial.polyval(sigma2_v, vec))


def marginal_g_moment(cache: MomentCache, k: int, t: float) -> float:
    """``E G_t^{2k}`` for ``G_0 = 0`` and stationary ``sigma_0``."""
    if not 0 <= k <= cache.k_max:
        raise MomentError(f"not tabulated: k={k} with k_max={cache.k_max}")
    if t < 0:
        raise ParameterError(f"t must be >= 0, got {t}")
    return cache.transient_products[k, k](t)


def _transient(cache: MomentCache, k: int, i: int, t: float) -> float:
    key = ("transient", k, i, float(t))
    store = cache.jtable._eval_cache
    val = store.get(key)
    if val is None:
        val = cache.transient_products[k, i](t)
        store[key] = val
    return val


def joint_return_moment(jt: JTable, cache: MomentCache, lags, r: float) -> float:
    """``E(prod_j G_{t_j, r}^{2 i_j})`` for ``lags = [(t_j, i_j), ...]``.

    Start times must satisfy ``t_j - t_{j-1} >= r`` (adjacent returns allowed).
    """
    lags = sorted((float(t), int(i)) for t, i in lags)
    if not lags:
        return 1.0
    if lags[0][0] < 0:
        raise ParameterError("start times must be >= 0")
    for (t0, _), (t1, _) in zip(lags, lags[1:]):
        if t1 - t0 < r - _GAP_TOL * max(1.0, r):
            raise MomentError(f"unsupported overlap: returns at {t0} and {t1} with lag {r}")
    if any(i < 0 for _, i in lags):
        raise ParameterError("exponents must be >= 0")
    total = sum(i for _, i in lags)
    if total > min(jt.k_max, cache.k_max):
        raise MomentError(f"order not tabulated: total {total} > {min(jt.k_max, cache.k_max)}")
    lags = [(t, i) for t, i in lags if i > 0]
    if not lags:
        return 1.0
    if len(lags) == 1:
        return _transient(cache, lags[0][1], lags[0][1], r)

    # poly[R] is the coefficient of sigma^{2R} at the end of the current return
    poly = np.array([1.0])
    for j in range(len(lags) - 1, 0, -1):
        i = lags[j][1]
        gap = max(0.0, lags[j][0] - lags[j - 1][0] - r)
        new = np.zeros(len(poly) + i)
        for r1, c in enumerate(poly):
            if c != 0.0:
                new[: r1 + i + 1] += c * jt.coefficient_vector(r1 + i, i, r, gap)
        poly = new
    i1 = lags[0][1]
    return float(sum(c * _transient(cache, R + i1, i1, r) for R, c in enumerate(poly) if c != 0.0))


def _require_stationary(model, theta, k):
    if k > 0 and not stationarity_check(model, theta, k):
        bad = [j for j in range(1, k + 1) if model.moment_is_finite(2 * j) and psi(model, theta, j) >= 0]
        if bad:
            raise MomentError(
                f"stationary moment does not exist: Psi({bad[0]}) = {psi(model, theta, bad[0]):.6g} >= 0"
            )
        raise MomentError(f"stationary moment does not exist: moment of order {2 * k} not finite")
