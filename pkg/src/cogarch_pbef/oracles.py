"""Brute-force references for the closed-form moment engine.

Nothing here is used by estimation.  The functions recompute quantities by
routes independent of :mod:`cogarch_pbef.expfun`: adaptive quadrature,
numerical ODE integration, scalar formulas written out by hand for
``k <= 2``, and Monte Carlo over simulated paths.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .errors import NumericalError, ParameterError
from .levy import CompoundPoissonNormal, LevyModel, Theta, VarianceGamma
from .simulator import SimConfig, default_burn_in, path_rng, _run

__all__ = [
    "McEstimate",
    "MomentSpec",
    "quadrature_integral",
    "levy_moment_quadrature",
    "psi_quadrature",
    "nested_j_quadrature",
    "ode_jtable",
    "k2_moments",
    "mc_moment",
    "mc_moments",
]


@dataclass(frozen=True)
class McEstimate:
    value: float
    std_error: float
    n_paths: int

    def __post_init__(self):
        if not self.std_error > 0:
            raise NumericalError(f"Monte Carlo standard error must be > 0, got {self.std_error}")

    def z_score(self, reference: float) -> float:
        return (self.value - reference) / self.std_error


def quadrature_integral(f, a: float, b: float, tol: float = 1e-10, limit: int = 200) -> float:
    """Adaptive Gauss-Kronrod integral of ``f`` over ``[a, b]``.

    Raises :class:`NumericalError` when the error estimate exceeds ``tol``
    (absolute, or relative to the result, whichever is looser).
    """
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(f, a, b, epsabs=tol, epsrel=tol, limit=limit)
        except integrate.IntegrationWarning as exc:
            raise NumericalError(f"quadrature did not converge: {exc}") from None
    if err > max(tol, tol * abs(val)) * 10:
        raise NumericalError(f"quadrature did not converge: error estimate {err:.3g}")
    return float(val)


def _density(model: LevyModel):
    """Lévy density on ``x > 0`` (both families are symmetric)."""
    if isinstance(model, VarianceGamma):
        lam = math.sqrt(2.0 * model.C) / model.A
        return lambda x: model.C / x * math.exp(-lam * x)
    if isinstance(model, CompoundPoissonNormal):
        s = model.jump_sd
        return lambda x: model.rate * math.exp(-0.5 * (x / s) ** 2) / (s * math.sqrt(2 * math.pi))
    raise ParameterError(f"no density for Lévy family {model.family!r}")


def levy_moment_quadrature(model: LevyModel, order: int, tol: float = 1e-11) -> float:
    """``int x^order nu(dx)`` by quadrature of the Lévy density."""
    if order % 2:
        return 0.0
    dens = _density(model)
    return 2.0 * quadrature_integral(lambda x: x**order * dens(x), 0.0, np.inf, tol)


def psi_quadrature(model: LevyModel, theta: Theta, c: int, tol: float = 1e-11) -> float:
    """``Psi(c) = -eta c + int ((1 + phi x^2)^c - 1) nu(dx)`` by quadrature."""
    dens = _density(model)
    val = 2.0 * quadrature_integral(lambda x: ((1.0 + theta.phi * x * x) ** c - 1.0) * dens(x), 0.0, np.inf, tol)
    return -theta.eta * c + val


class _QuadModel:
    """Lévy moments and Psi values computed by quadrature, cached."""

    def __init__(self, model: LevyModel, theta: Theta, k_max: int):
        self.theta = theta
        self.m = {2 * j: levy_moment_quadrature(model, 2 * j) for j in range(1, 2 * k_max + 1)}
        self.qv = dict(self.m)
        self.qv[2] += max(0.0, 1.0 - self.m[2])
        self.psi = [psi_quadrature(model, theta, c) for c in range(k_max + 1)]


def nested_j_quadrature(model: LevyModel, theta: Theta, k: int, i: int, t: float, tol: float = 1e-11) -> float:
    """``J_{k0(k-i)}`` at total lag ``t`` by i-fold nested quadrature.

    ``k!/(k-i)! beta^i int_0^t ds_i ... int_0^{s_2} ds_1
    exp(s_1 Psi(k-i) + sum_j (s_{j+1} - s_j) Psi(k-i+j))`` with ``s_{i+1} = t``.
    """
    if not 0 <= i <= k <= 3:
        raise ParameterError(f"nested quadrature supports 0 <= i <= k <= 3, got k={k}, i={i}")
    qm = _QuadModel(model, theta, k)
    psi = qm.psi

    def inner(level, upper):
        # level j integrates s_j over [0, upper]; factor exp((upper - s_j) Psi(k-i+j))
        if level == 0:
            return math.exp(upper * psi[k - i])
        rate = psi[k - i + level]
        return quadrature_integral(lambda s: math.exp((upper - s) * rate) * inner(level - 1, s), 0.0, upper, tol)

    return math.factorial(k) / math.factorial(k - i) * theta.beta**i * inner(i, float(t))


def _c_coeffs(qm: _QuadModel, k_max: int):
    phi = qm.theta.phi
    c = {}
    for m in range(k_max + 1):
        for ell in range(1, k_max - m + 1):
            c[ell, m] = qm.qv[2 * ell] + sum(math.comb(m, j) * phi**j * qm.qv[2 * ell + 2 * j] for j in range(1, m + 1))
    return c


def ode_jtable(model: LevyModel, theta: Theta, h: float, d: float, k_max: int = 3, rtol: float = 1e-13) -> dict:
    """All ``J_{kir}(h, d)``, ``k <= k_max``, by numerical integration of the generator ODEs.

    The ``i = 0`` row at ``h = 0`` is obtained by integrating over the total
    lag ``d`` first; then the full system is integrated in ``h``.  Moments and
    Psi come from quadrature, not from :mod:`cogarch_pbef.levy`.
    """
    qm = _QuadModel(model, theta, k_max)
    c = _c_coeffs(qm, k_max)
    psi, beta = qm.psi, theta.beta
    keys = [(k, i, r) for k in range(k_max + 1) for i in range(k + 1) for r in range(k + 1)]
    index = {key: n for n, key in enumerate(keys)}
    A = np.zeros((len(keys), len(keys)))
    for (k, i, r), row in index.items():
        A[row, row] = psi[k - i]
        if i < k and (k - 1, i, r) in index:
            A[row, index[k - 1, i, r]] += (k - i) * beta
        for ell in range(1, i + 1):
            A[row, index[k, i - ell, r]] += math.comb(2 * i, 2 * ell) * c[ell, k - i]
    y0 = np.array([1.0 if (i == 0 and r == k) else 0.0 for k, i, r in keys])
    row0 = [index[key] for key in keys if key[1] == 0]
    # i = 0 block over the lag d, then everything over h
    y = y0.copy()
    if d > 0:
        A0 = A[np.ix_(row0, row0)]
        y[row0] = _solve_linear(A0, y0[row0], d, rtol)
    y[[n for n in range(len(keys)) if n not in set(row0)]] = 0.0
    if h > 0:
        y = _solve_linear(A, y, h, rtol)
    return {key: float(y[n]) for key, n in index.items()}


def _solve_linear(A, y0, t, rtol):
    sol = integrate.solve_ivp(lambda _, y: A @ y, (0.0, t), y0, method="DOP853", rtol=rtol, atol=1e-16)
    if not sol.success:
        raise NumericalError(f"ODE integration failed: {sol.message}")
    return sol.y[:, -1]


def k2_moments(model: LevyModel, theta: Theta, r: float) -> dict:
    """Second and fourth order return moments written out by hand.

    Returns ``E G_r^2``, ``E G_r^4``, ``E G_r^2 sigma_r^2`` and a function
    ``joint(lag)`` giving ``E(G_{0,r}^2 G_{lag r, r}^2)`` for integer ``lag >= 1``.
    """
    m2, m4 = levy_moment_quadrature(model, 2), levy_moment_quadrature(model, 4)
    qv2 = m2 + max(0.0, 1.0 - m2)
    beta, eta, phi = theta.beta, theta.eta, theta.phi
    p1 = -eta + phi * m2
    p2 = -2 * eta + 2 * phi * m2 + phi**2 * m4
    s1 = beta / -p1
    s2 = 2 * beta**2 / (p1 * p2)
    a, t = p1, float(r)
    e1 = math.expm1(a * t) / a                             # int_0^t e^{a(t-s)} ds
    e2 = (math.expm1(a * t) - a * t) / a**2                # int_0^t s e^{a(t-s)} ds
    e3 = (math.expm1(a * t) / a - t - a * t * t / 2) / a**2  # int_0^t e2(s) ds
    g2 = qv2 * s1 * t
    g2s2 = beta * qv2 * s1 * e2 + (qv2 + phi * m4) * s2 * e1
    # E G^4 = int_0^t (6 qv2 E(G^2 sigma^2) + qv4 E sigma^4) ds
    int_e1 = (e1 - t) / a
    g4 = 6 * qv2 * (beta * qv2 * s1 * e3 + (qv2 + phi * m4) * s2 * int_e1) + m4 * s2 * t

    def joint(lag: int) -> float:
        if lag < 1:
            raise ParameterError(f"lag must be >= 1, got {lag}")
        dgap = (lag - 1) * t
        # E[G^2_{s,t} | sigma_v^2] = qv2 (s1 t + (sigma_v^2 - s1) e^{a dgap} e1')
        decay = math.exp(a * dgap) * math.expm1(a * t) / a
        return qv2 * (s1 * t * g2 + (g2s2 - s1 * g2) * decay)

    return {"EG2": g2, "EG4": g4, "EG2sigma2": g2s2, "Esigma2": s1, "Esigma4": s2, "joint": joint}


@dataclass(frozen=True)
class MomentSpec:
    """Product ``prod G_{p r, r}^{2 i} * prod sigma^{2 e}_{(p+1) r}`` over one window.

    ``returns`` and ``sigma`` are lists of ``(position, exponent)`` with
    positions counted in units of ``r`` from the window start.  Exponents on
    returns are powers of ``G`` itself (``2`` for a squared return).
    """

    returns: tuple = ()
    sigma: tuple = ()
    label: str = field(default="", compare=False)

    @property
    def span(self) -> int:
        pos = [p for p, _ in self.returns] + [p for p, _ in self.sigma]
        return max(pos) + 1 if pos else 1


def mc_moments(model: LevyModel, theta: Theta, specs, n_paths: int, seed: int, lag_r: float = 1.0,
               refine: int = 1000, n_chains: int = 10, batches_per_chain: int = 10) -> list[McEstimate]:
    """Monte Carlo estimates of several window moments from shared simulations.

    ``n_chains`` independent stationary chains (own RNG substream and
    burn-in) are cut into ``n_paths`` disjoint windows of the longest span.
    Each window contributes one draw per spec; the standard error is the
    spread of batch means over contiguous blocks of windows, which absorbs
    the weak dependence between neighbouring windows.
    """
    specs = list(specs)
    if n_paths < n_chains * batches_per_chain:
        raise ParameterError("n_paths must be at least n_chains * batches_per_chain")
    width = max(s.span for s in specs)
    per_chain = -(-n_paths // n_chains)
    batch_means = [[] for _ in specs]
    totals = [0.0 for _ in specs]
    count = 0
    for chain in range(n_chains):
        cfg = SimConfig(n_obs=per_chain * width, lag_r=lag_r, refine=refine, burn_in=default_burn_in(model, theta), seed=seed)
        returns, sig_end, _ = _run(model, theta, cfg, path_rng(seed, chain), record=True, sigma_out=True)
        G = returns.reshape(per_chain, width)
        S = sig_end.reshape(per_chain, width)
        for n, spec in enumerate(specs):
            draws = np.ones(per_chain)
            for p, e in spec.returns:
                draws = draws * G[:, p] ** e
            for p, e in spec.sigma:
                draws = draws * S[:, p] ** e
            totals[n] += draws.sum()
            batch_means[n].extend(b.mean() for b in np.array_split(draws, batches_per_chain))
        count += per_chain
    out = []
    for n in range(len(specs)):
        bm = np.asarray(batch_means[n])
        se = float(bm.std(ddof=1) / math.sqrt(len(bm)))
        out.append(McEstimate(value=totals[n] / count, std_error=se, n_paths=count))
    return out


def mc_moment(model: LevyModel, theta: Theta, spec: MomentSpec, n_paths: int, seed: int, **kwargs) -> McEstimate:
    return mc_moments(model, theta, [spec], n_paths, seed, **kwargs)[0]
