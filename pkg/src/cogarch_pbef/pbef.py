"""Prediction-based estimating functions for squared COGARCH returns.

Observations are ``Y_i = G_{ir,r}^2``.  The predictor of ``Y_i`` is the
projection onto ``span(1, Y_{i-1}, ..., Y_{i-q})``; with
``Z_i = (1, Y_{i-1}, ..., Y_{i-q})`` and prediction error
``e_i = Y_i - a_tilde . Z_i`` the estimating-function summand is
``H^i = Z_i e_i``.  All population quantities are assembled from the joint
return moments of :mod:`cogarch_pbef.moments`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import mpmath
import numpy as np
from scipy import linalg, optimize

from .errors import MomentError, NumericalError, ParameterError
from .levy import LevyModel, Theta, psi, stationarity_check
from .moments import JTable, MomentCache, build_moment_cache, joint_return_moment

__all__ = [
    "ReturnMoments",
    "PredictorCoeffs",
    "EstimationResult",
    "predictor_coeffs",
    "predictors",
    "prediction_errors",
    "mspe_contrast",
    "h_vectors",
    "h_cross_moment",
    "h_mean",
    "expect_forms",
    "m_matrix",
    "a_tilde_jacobian",
    "optimal_weights",
    "estimating_function",
    "asymptotic_variance",
    "estimate",
    "METHODS",
]

log = logging.getLogger(__name__)

METHODS = ("mspe", "opbe")
COND_LIMIT = 1e12
FD_REL_STEP = 1e-5


class ReturnMoments:
    """Memoized ``E(prod_j Y_{p_j}^{e_j})`` on the integer observation grid."""

    def __init__(self, jt: JTable, cache: MomentCache, lag_r: float):
        if lag_r <= 0:
            raise ParameterError(f"lag_r must be > 0, got {lag_r}")
        self.jt = jt
        self.cache = cache
        self.lag_r = float(lag_r)
        self._memo: dict[tuple, float] = {}

    def __call__(self, positions) -> float:
        """Expectation of the product of ``Y_p`` over ``positions`` (repeats allowed)."""
        if not positions:
            return 1.0
        counts: dict[int, int] = {}
        for p in positions:
            counts[p] = counts.get(p, 0) + 1
        base = min(counts)
        key = tuple(sorted((p - base, e) for p, e in counts.items()))
        val = self._memo.get(key)
        if val is None:
            lags = [(p * self.lag_r, e) for p, e in key]
            val = joint_return_moment(self.jt, self.cache, lags, self.lag_r)
            self._memo[key] = val
        return val

    def mean(self) -> float:
        return self((0,))

    def autocovariance(self, lag: int) -> float:
        mu = self.mean()
        return self((0, abs(lag))) - mu * mu

    def autocovariances(self, max_lag: int) -> np.ndarray:
        """``[gamma(0), ..., gamma(max_lag)]`` of the squared returns.

        From lag 2 on the autocovariance decays exactly like
        ``exp(Psi(1) r (lag - 2))``: conditional on sigma^2 at the end of the
        earlier return, the later squared return is affine in
        ``exp(Psi(1) gap)``.
        """
        head = [self.autocovariance(j) for j in range(min(max_lag, 2) + 1)]
        if max_lag <= 2:
            return np.array(head)
        rho = math.exp(psi(self.jt.model, self.jt.theta, 1) * self.lag_r)
        tail = head[2] * rho ** np.arange(1, max_lag - 1)
        return np.concatenate([head, tail])


@dataclass(frozen=True)
class PredictorCoeffs:
    """Best linear predictor of ``Y_i`` from ``(1, Y_{i-1}, ..., Y_{i-q})``."""

    q: int
    a_tilde: np.ndarray
    C: np.ndarray
    b: np.ndarray
    C_tilde: np.ndarray
    mean: float

    @property
    def a(self) -> np.ndarray:
        return self.a_tilde[1:]


def predictor_coeffs(jt: JTable, cache: MomentCache, q: int, lag_r: float, moments: ReturnMoments | None = None) -> PredictorCoeffs:
    """Solve the normal equations ``C a = b`` and form ``a_0`` and ``C_tilde``."""
    if q < 0:
        raise ParameterError(f"q must be >= 0, got {q}")
    mom = moments if moments is not None else ReturnMoments(jt, cache, lag_r)
    mu = mom.mean()
    gamma = mom.autocovariances(q)
    C = linalg.toeplitz(gamma[:q]) if q else np.zeros((0, 0))
    b = gamma[1 : q + 1]
    if q:
        cond = np.linalg.cond(C)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise NumericalError(f"degenerate predictor space: cond(C) = {cond:.3g}")
        a = linalg.solve(C, b, assume_a="pos")
    else:
        a = np.zeros(0)
    a0 = mu * (1.0 - a.sum())
    raw = gamma[:q] + mu * mu
    C_tilde = np.empty((q + 1, q + 1))
    C_tilde[0, 0] = 1.0
    C_tilde[0, 1:] = C_tilde[1:, 0] = mu
    if q:
        C_tilde[1:, 1:] = linalg.toeplitz(raw)
    return PredictorCoeffs(q=q, a_tilde=np.concatenate([[a0], a]), C=C, b=b, C_tilde=C_tilde, mean=mu)


def _lagged_design(y2: np.ndarray, q: int) -> np.ndarray:
    """Rows ``Z_i = (1, Y_{i-1}, ..., Y_{i-q})`` for ``i = q, ..., n-1``."""
    n = len(y2)
    Z = np.ones((n - q, q + 1))
    for j in range(1, q + 1):
        Z[:, j] = y2[q - j : n - j]
    return Z


def predictors(a_tilde: np.ndarray, y2: np.ndarray) -> np.ndarray:
    """Predictions of ``y2[q:]`` from the preceding ``q`` squared returns."""
    q = len(a_tilde) - 1
    return _lagged_design(np.asarray(y2, dtype=float), q) @ a_tilde


def prediction_errors(a_tilde: np.ndarray, y2: np.ndarray) -> np.ndarray:
    q = len(a_tilde) - 1
    y2 = np.asarray(y2, dtype=float)
    return y2[q:] - predictors(a_tilde, y2)


def h_vectors(a_tilde: np.ndarray, y2: np.ndarray) -> np.ndarray:
    """Stack of ``H^i = Z_i e_i`` for every usable ``i``; shape ``(n - q, q + 1)``."""
    q = len(a_tilde) - 1
    y2 = np.asarray(y2, dtype=float)
    Z = _lagged_design(y2, q)
    e = y2[q:] - Z @ a_tilde
    return Z * e[:, None]


# --- population moments of H --------------------------------------------
#
# Expectations of products of (up to four) linear forms in the Y_p are
# evaluated by a backward sweep over observation times.  The state for each
# subset U of factors already placed at later times is the polynomial in
# sigma^2 (at the start of the current return) representing
# E[prod_{m in U} (factor m restricted to later times) | F].


def _propagator(jt: JTable, kmax: int, s: int, h: float) -> np.ndarray:
    """``P[R', R] = J_{R+s, s, R'}(h, 0)``: maps sigma-power coefficients at the
    end of a return of length ``h`` (raised to ``2s``) back to its start."""
    P = np.zeros((kmax + 1, kmax + 1))
    for R in range(kmax + 1 - s):
        P[: R + s + 1, R] = jt.coefficient_vector(R + s, s, h, 0.0)
    return P


def expect_forms(jt: JTable, stationary_sigma, lag_r: float, consts, weights, end_power: int = 0) -> np.ndarray:
    """``E[prod_m (consts[m] + sum_p weights[m][p] Y_p) * sigma^{2 end_power}]``.

    ``weights[m]`` has shape ``(P, *batch)`` over observation positions
    ``0..P-1`` and ``consts[m]`` broadcasts to ``batch``.  The optional sigma
    power is taken at the end of position ``P-1``.  ``stationary_sigma`` is the
    vector of sigma moments at the start of position 0 (pass a unit vector to
    read off conditional coefficients).  Returns an array of shape ``batch``.
    """
    nf = len(consts)
    kmax = jt.k_max
    if nf + end_power > kmax:
        raise MomentError(f"order not tabulated: {nf} factors and sigma power {end_power} > {kmax}")
    weights = [np.asarray(w, dtype=float) for w in weights]
    consts = [np.asarray(c, dtype=float) for c in consts]
    P = weights[0].shape[0]
    batch = np.broadcast_shapes(*(w.shape[1:] for w in weights), *(c.shape for c in consts))
    props = [_propagator(jt, kmax, s, lag_r) for s in range(nf + 1)]
    subsets = range(1 << nf)
    popcount = [bin(u).count("1") for u in subsets]
    state = [np.zeros(batch + (kmax + 1,)) for _ in subsets]
    state[0][..., end_power] = 1.0
    gap = 0
    for p in range(P - 1, -1, -1):
        active = sum(1 << m for m in range(nf) if np.any(weights[m][p]))
        if not active:
            gap += 1
            continue
        if gap:
            prop = _propagator(jt, kmax, 0, gap * lag_r)
            state = [st @ prop.T for st in state]
            gap = 0
        new = []
        for u in subsets:
            acc = state[u] @ props[0].T
            sub = u & active
            s_ = sub
            while s_:
                w = np.ones(batch)
                for m in range(nf):
                    if s_ >> m & 1:
                        w = w * weights[m][p]
                acc = acc + (w[..., None] * state[u & ~s_]) @ props[popcount[s_]].T
                s_ = (s_ - 1) & sub
            new.append(acc)
        state = new
    if gap:
        prop = _propagator(jt, kmax, 0, gap * lag_r)
        state = [st @ prop.T for st in state]
    sig = np.asarray(stationary_sigma[: kmax + 1], dtype=float)
    total = np.zeros(batch)
    for u in subsets:
        c = np.ones(batch)
        for m in range(nf):
            if not u >> m & 1:
                c = c * consts[m]
        total = total + c * (state[u] @ sig)
    return total


def _block_forms(a_tilde: np.ndarray, P: int, origin: int):
    """Weights of ``Z_a`` (batched over ``a``) and of ``e`` at observation
    ``origin`` on positions ``0..P-1``, plus their constants."""
    q = len(a_tilde) - 1
    zw = np.zeros((P, q + 1))
    zc = np.zeros(q + 1)
    zc[0] = 1.0
    for j in range(1, q + 1):
        zw[origin - j, j] = 1.0
    ew = np.zeros(P)
    ew[origin] = 1.0
    for j in range(1, q + 1):
        ew[origin - j] -= a_tilde[j]
    return zw, zc, ew, np.asarray(-a_tilde[0])


def _cross(jt, sig, lag_r, a_tilde, lag_k):
    q = len(a_tilde) - 1
    P = q + lag_k + 1
    z0w, z0c, e0w, e0c = _block_forms(a_tilde, P, q)
    z1w, z1c, e1w, e1c = _block_forms(a_tilde, P, q + lag_k)
    return expect_forms(
        jt, sig, lag_r,
        [z0c[:, None], e0c, z1c[None, :], e1c],
        [z0w[:, :, None], e0w, z1w[:, None, :], e1w],
    )


def h_cross_moment(jt: JTable, cache: MomentCache, q: int, lag_r: float, theta: Theta | None, a_tilde: np.ndarray, lag_k: int) -> np.ndarray:
    """``E(H^v (H^{v+lag_k})^T)`` as a ``(q+1) x (q+1)`` matrix."""
    if lag_k < 0:
        raise ParameterError(f"lag_k must be >= 0, got {lag_k}")
    a_tilde = np.asarray(a_tilde, dtype=float)
    if len(a_tilde) != q + 1:
        raise ParameterError(f"a_tilde has length {len(a_tilde)}, expected {q + 1}")
    return _cross(jt, cache.stationary_sigma, lag_r, a_tilde, lag_k)


def h_mean(jt: JTable, cache: MomentCache, lag_r: float, a_tilde: np.ndarray) -> np.ndarray:
    """``E H^v`` from the moment engine (zero when ``a_tilde`` solves the normal equations)."""
    a_tilde = np.asarray(a_tilde, dtype=float)
    q = len(a_tilde) - 1
    zw, zc, ew, ec = _block_forms(a_tilde, q + 1, q)
    return expect_forms(jt, cache.stationary_sigma, lag_r, [zc, ec], [zw, ew])


def _tail_sum(jt: JTable, sig, lag_r: float, a_tilde: np.ndarray) -> np.ndarray:
    """``sum_{k > q} E(H^v (H^{v+k})^T)`` in closed form.

    For disjoint blocks the dependence crosses the gap only through sigma^2:
    ``E_k = left @ P((k-q-1) r) @ right.T`` with the propagator
    ``P(t)[R', R] = J_{R0R'}(t, 0)``.  Each entry of ``P`` is an exponential
    polynomial in ``t`` whose constant part pairs with ``E H = 0``; the rest
    sums to polylogarithms.
    """
    q = len(a_tilde) - 1
    n_r = jt.k_max - 1
    zw, zc, ew, ec = _block_forms(a_tilde, q + 1, q)
    left = np.stack([expect_forms(jt, sig, lag_r, [zc, ec], [zw, ew], end_power=R) for R in range(n_r)], axis=-1)
    unit = np.eye(jt.k_max + 1)
    right = np.stack([expect_forms(jt, unit[R], lag_r, [zc, ec], [zw, ew]) for R in range(n_r)], axis=-1)
    S = np.zeros((n_r, n_r))
    for R in range(n_r):
        for Rp in range(R + 1):
            S[Rp, R] = _series_minus_limit(jt[R, 0, Rp], lag_r)
    return left @ S @ right.T


def _series_minus_limit(fn, lag_r: float) -> float:
    """``sum_{m >= 0} [f(m r, 0) - f(inf, 0)]`` for an ExpPoly with decaying rates."""
    total = mpmath.mpf(0)
    r = mpmath.mpf(lag_r)
    for c, hp, dp, hr, _ in fn.iter_terms():
        if dp:
            continue  # vanishes at d = 0
        if abs(hr) <= 1e-12:
            if hp:
                raise NumericalError("divergent series in the M tail")
            continue  # the limit f(inf)
        if hr > 0:
            raise NumericalError("divergent series in the M tail")
        z = mpmath.exp(hr * r)
        if hp == 0:
            total += c / (1 - z)
        else:
            total += c * r**hp * mpmath.polylog(-hp, z)
    return float(total)


def m_matrix(jt: JTable, cache: MomentCache, q: int, lag_r: float, theta: Theta | None, truncation_K: int | None = 0, a_tilde: np.ndarray | None = None, moments: ReturnMoments | None = None, check_pd: bool = True) -> np.ndarray:
    """Long-run covariance of ``H`` truncated after ``truncation_K`` lags.

    ``truncation_K = 0`` gives the lag-zero matrix ``M_0``; ``None`` sums
    all lags (the tail beyond ``q`` in closed form).
    """
    if truncation_K is not None and truncation_K < 0:
        raise ParameterError(f"truncation_K must be >= 0, got {truncation_K}")
    if a_tilde is None:
        a_tilde = predictor_coeffs(jt, cache, q, lag_r, moments=moments).a_tilde
    a_tilde = np.asarray(a_tilde, dtype=float)
    sig = cache.stationary_sigma
    M = _cross(jt, sig, lag_r, a_tilde, 0)
    last = q if truncation_K is None else truncation_K
    for k in range(1, last + 1):
        E = _cross(jt, sig, lag_r, a_tilde, k)
        M = M + E + E.T
    if truncation_K is None:
        T = _tail_sum(jt, sig, lag_r, a_tilde)
        M = M + T + T.T
    M = 0.5 * (M + M.T)
    if check_pd:
        try:
            linalg.cholesky(M)
        except linalg.LinAlgError:
            raise NumericalError("M not PD; increase K or check theta") from None
    return M


# --- derivatives and weights ---------------------------------------------


def _a_tilde_at(model: LevyModel, theta: Theta, q: int, lag_r: float) -> np.ndarray:
    cache = build_moment_cache(model, theta, k_max=2)
    return predictor_coeffs(cache.jtable, cache, q, lag_r).a_tilde


def a_tilde_jacobian(model: LevyModel, theta: Theta, q: int, lag_r: float, rel_step: float = FD_REL_STEP) -> np.ndarray:
    """Central-difference Jacobian ``d a_tilde / d theta^T``, shape ``(q+1, 3)``."""
    base = np.array(theta.as_tuple())
    jac = np.empty((q + 1, 3))
    for j in range(3):
        step = rel_step * base[j]
        up, down = base.copy(), base.copy()
        up[j] += step
        down[j] -= step
        a_up = _a_tilde_at(model, Theta(*up), q, lag_r)
        a_down = _a_tilde_at(model, Theta(*down), q, lag_r)
        jac[:, j] = (a_up - a_down) / (2 * step)
    return jac


@dataclass
class _PopulationQuantities:
    coeffs: PredictorCoeffs
    jac: np.ndarray
    moments: ReturnMoments
    _m: dict = field(default_factory=dict)

    def M(self, K: int) -> np.ndarray:
        if K not in self._m:
            mom = self.moments
            self._m[K] = m_matrix(mom.jt, mom.cache, self.coeffs.q, mom.lag_r, None, K, a_tilde=self.coeffs.a_tilde, moments=mom)
        return self._m[K]


def _population(model: LevyModel, theta: Theta, q: int, lag_r: float, rel_step: float = FD_REL_STEP) -> _PopulationQuantities:
    cache = build_moment_cache(model, theta, k_max=4)
    mom = ReturnMoments(cache.jtable, cache, lag_r)
    coeffs = predictor_coeffs(cache.jtable, cache, q, lag_r, moments=mom)
    jac = a_tilde_jacobian(model, theta, q, lag_r, rel_step)
    return _PopulationQuantities(coeffs=coeffs, jac=jac, moments=mom)


def optimal_weights(jac: np.ndarray, C_tilde: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``W* = (d a_tilde)^T C_tilde M^{-1}``, shape ``(3, q+1)``."""
    try:
        Minv_Ct = linalg.solve(M, C_tilde, assume_a="pos")
    except linalg.LinAlgError:
        raise NumericalError("M not PD; increase K or check theta") from None
    return jac.T @ Minv_Ct.T


def mspe_weights(jac: np.ndarray) -> np.ndarray:
    return jac.T.copy()


def asymptotic_variance(model: LevyModel, theta: Theta, q: int, lag_r: float, method: str = "mspe", truncation_K: int | None = 0, sandwich_K: int | None | str = "same", rel_step: float = FD_REL_STEP, population: _PopulationQuantities | None = None) -> np.ndarray:
    """Asymptotic covariance of ``sqrt(n) (theta_hat - theta)``.

    ``method="mspe"`` uses weights ``(d a_tilde)^T``; ``method="opbe"`` uses the
    optimal weights built from ``M`` truncated at ``truncation_K``.  The
    sandwich ``D^{-1} W M W^T D^{-T}`` uses ``M`` truncated at ``sandwich_K``
    (``"same"``: equal to ``truncation_K``).  A truncation of ``None`` means
    all lags.  For OPBE with ``sandwich_K ==
    truncation_K`` this equals ``(jac^T C_tilde M^{-1} C_tilde jac)^{-1}``.
    """
    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}; expected one of {METHODS}")
    pop = population if population is not None else _population(model, theta, q, lag_r, rel_step)
    if sandwich_K == "same":
        sandwich_K = truncation_K
    jac, Ct = pop.jac, pop.coeffs.C_tilde
    if method == "mspe":
        W = mspe_weights(jac)
    else:
        W = optimal_weights(jac, Ct, pop.M(truncation_K))
    D = -W @ Ct @ jac
    if np.linalg.matrix_rank(D) < 3 or np.linalg.cond(D) > COND_LIMIT:
        raise NumericalError(f"identifiability failure at {theta}: D is rank deficient")
    Dinv = linalg.inv(D)
    V = Dinv @ W @ pop.M(sandwich_K) @ W.T @ Dinv.T
    return 0.5 * (V + V.T)


# --- estimation ----------------------------------------------------------


@dataclass
class EstimationResult:
    theta_hat: Theta
    objective_value: float
    iterations: int
    converged: bool
    method: str
    q: int
    trunc_K: int = 0
    asymptotic_cov: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "theta_hat": list(self.theta_hat.as_tuple()),
            "objective_value": self.objective_value,
            "iterations": self.iterations,
            "converged": self.converged,
            "method": self.method_label,
            "q": self.q,
            "trunc_K": self.trunc_K,
            "asymptotic_cov": None if self.asymptotic_cov is None else self.asymptotic_cov.tolist(),
            "diagnostics": self.diagnostics,
        }

    @property
    def method_label(self) -> str:
        if self.method == "mspe":
            return "MSPE"
        return "OPBE_M0" if self.trunc_K == 0 else f"OPBE_Mn({self.trunc_K})"


def _as_returns(data) -> tuple[np.ndarray, float]:
    values = getattr(data, "values", data)
    lag_r = getattr(data, "lag_r", None)
    return np.asarray(values, dtype=float), lag_r


def mspe_contrast(model: LevyModel, data, theta: Theta, q: int = 1, lag_r: float | None = None) -> float:
    """Sum of squared one-step prediction errors of the squared returns."""
    values, data_lag = _as_returns(data)
    lag_r = lag_r if lag_r is not None else data_lag
    if lag_r is None:
        raise ParameterError("lag_r is required")
    if len(values) <= q:
        raise ParameterError(f"need more than q={q} returns, got {len(values)}")
    cache = build_moment_cache(model, theta, k_max=2)
    a_tilde = predictor_coeffs(cache.jtable, cache, q, lag_r).a_tilde
    err = prediction_errors(a_tilde, values**2)
    return float(err @ err)


def estimating_function(a_tilde: np.ndarray, W: np.ndarray, y2: np.ndarray) -> np.ndarray:
    """``S_n = W sum_i H^i``."""
    return W @ h_vectors(a_tilde, y2).sum(axis=0)


_PENALTY = 1e30


class _SampleGram:
    """Cross products of ``(Y_i, Z_i)`` so sample criteria cost O(q^2) per call."""

    def __init__(self, y2: np.ndarray, q: int):
        Z = _lagged_design(y2, q)
        y = y2[q:]
        self.n = len(y)
        self.yy = float(y @ y)
        self.Zy = Z.T @ y
        self.ZZ = Z.T @ Z

    def sse(self, a_tilde: np.ndarray) -> float:
        """``sum_i e_i^2``."""
        return float(self.yy - 2.0 * a_tilde @ self.Zy + a_tilde @ self.ZZ @ a_tilde)

    def mean_h(self, a_tilde: np.ndarray) -> np.ndarray:
        """``(1/n) sum_i H^i``."""
        return (self.Zy - self.ZZ @ a_tilde) / self.n


def _check_degenerate(y2: np.ndarray, q: int):
    if q and np.ptp(y2) <= 1e-14 * max(1.0, float(np.abs(y2).max(initial=0.0))):
        raise NumericalError("degenerate predictor space: all squared returns are equal")


def estimate(data, model: LevyModel, method: str = "mspe", q: int = 1, init: Theta | None = None, *, lag_r: float | None = None, trunc_K: int = 0, n_starts: int = 5, jitter: float = 0.25, seed: int = 0, xatol: float = 1e-7, fatol: float = 1e-10, maxiter: int = 4000, compute_cov: bool = False, start_order: list[int] | None = None, preliminary: Theta | None = None) -> EstimationResult:
    """Estimate ``theta`` from equally spaced returns.

    MSPE minimizes the mean-square prediction-error contrast; OPBE solves
    ``W* sum H^i = 0`` by minimizing its squared norm, with ``W*`` frozen at
    the current point (two stages: MSPE start, freeze, solve, re-freeze,
    re-solve).  Optimization runs over ``log theta`` with Nelder-Mead from
    ``init`` plus ``n_starts - 1`` jittered starts.  For OPBE a
    ``preliminary`` estimate (e.g. an earlier MSPE fit on the same data)
    replaces the MSPE stage.
    """
    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}; expected one of {METHODS}")
    values, data_lag = _as_returns(data)
    lag_r = lag_r if lag_r is not None else data_lag
    if lag_r is None:
        raise ParameterError("lag_r is required")
    if len(values) <= q:
        raise ParameterError(f"need more than q={q} returns, got {len(values)}")
    y2 = values**2
    _check_degenerate(y2, q)
    if q + 1 < 3:
        log.warning("q=%d gives %d predictor coefficients for 3 parameters: theta is not identifiable", q, q + 1)
    if init is None:
        init = _moment_start(y2, lag_r)
    need_k = 2 if method == "mspe" else 4

    n_eff = len(y2) - q
    gram = _SampleGram(y2, q)
    scale = float(np.mean(y2) ** 2) if np.mean(y2) > 0 else 1.0

    def mspe_obj(log_theta):
        theta = _theta_or_none(log_theta)
        if theta is None or not stationarity_check(model, theta, 2):
            return _PENALTY
        try:
            cache = build_moment_cache(model, theta, k_max=2)
            a_tilde = predictor_coeffs(cache.jtable, cache, q, lag_r).a_tilde
        except (MomentError, NumericalError):
            return _PENALTY
        return gram.sse(a_tilde) / (n_eff * scale)

    if method == "opbe" and preliminary is not None:
        best = optimize.OptimizeResult(x=np.log(np.array(preliminary.as_tuple())), nit=0, success=True)
        best.fun = mspe_obj(best.x)
    else:
        starts = _starts(init, n_starts, jitter, seed)
        if start_order is not None:
            starts = [starts[i] for i in start_order]
        best = _multistart(mspe_obj, starts, xatol, fatol, maxiter)
    iterations = best.nit
    converged = bool(best.success)
    history = [{"stage": "mspe", "theta": _theta_list(best.x), "objective": float(best.fun)}]
    objective = float(best.fun) * n_eff * scale

    if method == "opbe":
        x = best.x
        for stage in range(2):
            theta_fix = _theta_or_none(x)
            try:
                if theta_fix is None or not stationarity_check(model, theta_fix, need_k):
                    raise MomentError(f"optimal weights need Psi({need_k}) < 0, violated at {theta_fix}")
                pop = _population(model, theta_fix, q, lag_r)
                W = optimal_weights(pop.jac, pop.coeffs.C_tilde, pop.M(trunc_K))
            except (MomentError, NumericalError) as exc:
                if stage == 0:
                    # no OPBE estimate exists without weights at the preliminary estimate
                    raise NumericalError(f"OPBE weights unavailable at the preliminary estimate: {exc}") from None
                log.warning("OPBE weights failed at %s, keeping stage %d: %s", theta_fix, stage, exc)
                history.append({"stage": f"opbe{stage + 1}", "theta": _theta_list(x), "error": str(exc)})
                break
            Wn = W / np.linalg.norm(W, axis=1, keepdims=True)

            def opbe_obj(log_theta, Wn=Wn):
                theta = _theta_or_none(log_theta)
                if theta is None or not stationarity_check(model, theta, 2):
                    return _PENALTY
                try:
                    cache = build_moment_cache(model, theta, k_max=2)
                    a_tilde = predictor_coeffs(cache.jtable, cache, q, lag_r).a_tilde
                except (MomentError, NumericalError):
                    return _PENALTY
                S = Wn @ gram.mean_h(a_tilde)
                return float(S @ S) / scale**2

            res = _multistart(opbe_obj, [x] + _starts(_theta_or_none(x), 3, jitter / 4, seed + stage + 1)[1:], xatol, fatol * 1e-6, maxiter)
            iterations += res.nit
            x = res.x
            converged = bool(res.success)
            objective = float(res.fun)
            history.append({"stage": f"opbe{stage + 1}", "theta": _theta_list(x), "objective": objective})
        best_x = x
    else:
        best_x = best.x

    theta_hat = Theta(*np.exp(best_x))
    cov = None
    if compute_cov:
        try:
            cov = asymptotic_variance(model, theta_hat, q, lag_r, method, trunc_K) / len(values)
        except (MomentError, NumericalError) as exc:
            log.warning("plug-in covariance failed: %s", exc)
    return EstimationResult(
        theta_hat=theta_hat,
        objective_value=objective,
        iterations=int(iterations),
        converged=converged,
        method=method,
        q=q,
        trunc_K=trunc_K if method == "opbe" else 0,
        asymptotic_cov=cov,
        diagnostics={"history": history, "xatol": xatol, "fatol": fatol},
    )


def _theta_or_none(log_theta):
    vals = np.exp(np.asarray(log_theta, dtype=float))
    if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
        return None
    return Theta(*vals)


def _theta_list(log_theta):
    return [float(v) for v in np.exp(log_theta)]


def _starts(init: Theta, n_starts: int, jitter: float, seed: int) -> list[np.ndarray]:
    x0 = np.log(np.array(init.as_tuple()))
    rng = np.random.default_rng(seed)
    out = [x0]
    for _ in range(max(0, n_starts - 1)):
        out.append(x0 + rng.uniform(-jitter, jitter, size=3))
    return out


def _multistart(fun: Callable, starts, xatol, fatol, maxiter):
    best = None
    for x0 in starts:
        res = optimize.minimize(
            fun, x0, method="Nelder-Mead",
            options={"xatol": xatol, "fatol": fatol, "maxiter": maxiter, "maxfev": 2 * maxiter},
        )
        if best is None or res.fun < best.fun - 1e-15 or (abs(res.fun - best.fun) <= 1e-15 and tuple(res.x) < tuple(best.x)):
            best = res
    return best


def _moment_start(y2: np.ndarray, lag_r: float) -> Theta:
    """Crude starting point from the sample mean and lag-one autocorrelation.

    Uses ``E Y = beta r / (eta - phi)`` and ``corr(Y_0, Y_1) ~ exp(-(eta - phi) r)``
    with ``phi = eta / 2`` as a neutral split.
    """
    mean = float(np.mean(y2))
    yc = y2 - mean
    rho = float(yc[1:] @ yc[:-1] / (yc @ yc)) if len(y2) > 2 and yc @ yc > 0 else 0.5
    rho = min(max(rho, 0.05), 0.95)
    gap = -math.log(rho) / lag_r
    eta = 2.0 * gap
    phi = gap
    beta = max(mean * gap / lag_r, 1e-6)
    return Theta(beta, eta, phi)
