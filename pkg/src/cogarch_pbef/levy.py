"""Driving Lévy processes and the Laplace exponent of the auxiliary process.

Two symmetric, standardized (E L_1 = 0, E L_1^2 = 1) families are supported:

* Variance Gamma with Lévy density ``C/|x| exp(-|x| sqrt(2C)/A)``; the
  standardization forces ``A = 1``.
* Compound Poisson with centred normal jumps; standardization forces
  ``rate * jump_sd**2 = 1``.

Both are pure jump, so the Brownian variance ``tau2 = 1 - int x^2 nu(dx)``
is zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import MomentError, ParameterError

__all__ = [
    "Theta",
    "LevyModel",
    "VarianceGamma",
    "CompoundPoissonNormal",
    "levy_measure_moment",
    "qv_moment",
    "psi",
    "stationarity_check",
    "model_from_dict",
]

_STANDARDIZATION_TOL = 1e-12


@dataclass(frozen=True)
class Theta:
    """COGARCH(1,1) parameter triple ``(beta, eta, phi)``, all strictly positive."""

    beta: float
    eta: float
    phi: float

    def __post_init__(self):
        for name in ("beta", "eta", "phi"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value)):
                raise ParameterError(f"theta.{name} must be a finite real, got {value!r}")
            if value <= 0:
                raise ParameterError(f"theta.{name} must be > 0, got {value!r}")
            object.__setattr__(self, name, float(value))

    @classmethod
    def from_sequence(cls, values) -> "Theta":
        values = list(values)
        if len(values) != 3:
            raise ParameterError(f"theta needs 3 components (beta, eta, phi), got {len(values)}")
        return cls(*(float(v) for v in values))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.beta, self.eta, self.phi)


def _double_factorial(n: int) -> int:
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


@dataclass(frozen=True)
class LevyModel:
    """Base class for a standardized, symmetric driving Lévy process.

    ``max_moment_order`` caps the moment orders treated as finite; ``None``
    means every order is finite (true for both supported families).
    """

    max_moment_order: int | None = field(default=None, kw_only=True)

    family = "abstract"

    @property
    def tau2(self) -> float:
        value = 1.0 - self._even_measure_moment(2)
        return 0.0 if value <= _STANDARDIZATION_TOL else value

    def _even_measure_moment(self, order: int) -> float:
        raise NotImplementedError

    def _check_standardized(self):
        m2 = self._even_measure_moment(2)
        if m2 > 1.0 + _STANDARDIZATION_TOL:
            raise ParameterError(
                f"{self.family}: int x^2 nu(dx) = {m2} exceeds 1, violates E(L_1^2) = 1"
            )

    def moment_is_finite(self, order: int) -> bool:
        return self.max_moment_order is None or order <= self.max_moment_order

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class VarianceGamma(LevyModel):
    """Variance Gamma driver; ``A`` must equal 1 for a standardized process."""

    C: float = 1.0
    A: float = 1.0

    family = "variance_gamma"

    def __post_init__(self):
        if not (math.isfinite(self.C) and self.C > 0):
            raise ParameterError(f"variance_gamma: C must be > 0, got {self.C!r}")
        if not (math.isfinite(self.A) and self.A > 0):
            raise ParameterError(f"variance_gamma: A must be > 0, got {self.A!r}")
        if abs(self.A - 1.0) > _STANDARDIZATION_TOL:
            raise ParameterError(
                f"variance_gamma: Var(L_1) = A^2 = {self.A ** 2} but standardization requires A = 1"
            )
        self._check_standardized()

    def _even_measure_moment(self, order: int) -> float:
        C, A = self.C, self.A
        return 2.0 * C * math.factorial(order - 1) * (A / math.sqrt(2.0 * C)) ** order

    def to_dict(self) -> dict:
        return {"family": self.family, "C": self.C}


@dataclass(frozen=True)
class CompoundPoissonNormal(LevyModel):
    """Compound Poisson driver with N(0, jump_sd^2) jumps and ``rate * jump_sd^2 = 1``."""

    rate: float = 1.0
    jump_sd: float | None = None

    family = "compound_poisson_normal"

    def __post_init__(self):
        if not (math.isfinite(self.rate) and self.rate > 0):
            raise ParameterError(f"compound_poisson_normal: rate must be > 0, got {self.rate!r}")
        derived = 1.0 / math.sqrt(self.rate)
        if self.jump_sd is None:
            object.__setattr__(self, "jump_sd", derived)
        elif abs(self.jump_sd - derived) > 1e-12 * max(1.0, derived):
            raise ParameterError(
                "compound_poisson_normal: rate * jump_sd^2 must equal 1 "
                f"(rate={self.rate}, jump_sd={self.jump_sd})"
            )
        self._check_standardized()

    def _even_measure_moment(self, order: int) -> float:
        return self.rate * self.jump_sd**order * _double_factorial(order - 1)

    def to_dict(self) -> dict:
        return {"family": self.family, "rate": self.rate}


def model_from_dict(spec: dict) -> LevyModel:
    """Build a model from ``{"family": "variance_gamma", "C": 1.0}`` style mappings."""
    spec = dict(spec)
    family = spec.pop("family", None)
    if family == "variance_gamma":
        allowed = {"C", "A", "max_moment_order"}
        cls = VarianceGamma
    elif family == "compound_poisson_normal":
        allowed = {"rate", "jump_sd", "max_moment_order"}
        cls = CompoundPoissonNormal
    else:
        raise ParameterError(f"unknown Lévy family {family!r}")
    unknown = set(spec) - allowed
    if unknown:
        raise ParameterError(f"{family}: unknown keys {sorted(unknown)}")
    return cls(**spec)


def levy_measure_moment(model: LevyModel, order: int) -> float:
    """Return ``int x^order nu(dx)`` for ``order >= 2``.

    Odd orders vanish because both supported Lévy measures are symmetric.
    """
    if order < 2:
        raise ParameterError(f"Lévy measure moments are defined here for order >= 2, got {order}")
    if not model.moment_is_finite(order):
        raise MomentError(f"moment not finite: order {order} exceeds {model.max_moment_order}")
    if order % 2:
        return 0.0
    return model._even_measure_moment(order)


def qv_moment(model: LevyModel, order: int) -> float:
    """Expectation of the ``order``-th quadratic variation ``[L]_1^{(order)}``.

    Order 2 includes the Brownian part and equals 1; higher orders are purely
    discontinuous and coincide with the Lévy-measure moment.
    """
    if order % 2 or order < 2:
        raise ParameterError(f"qv_moment needs an even order >= 2, got {order}")
    m = levy_measure_moment(model, order)
    if order == 2:
        return model.tau2 + m
    return m


def psi(model: LevyModel, theta: Theta, c: int) -> float:
    """Laplace exponent ``Psi(c) = -eta c + sum_i binom(c, i) phi^i int x^{2i} nu(dx)``."""
    if c < 0:
        raise ParameterError(f"psi needs c >= 0, got {c}")
    if not model.moment_is_finite(2 * c):
        raise MomentError(f"Psi undefined: moment of order {2 * c} is not finite")
    total = -theta.eta * c
    for i in range(1, c + 1):
        total += math.comb(c, i) * theta.phi**i * levy_measure_moment(model, 2 * i)
    return total


def stationarity_check(model: LevyModel, theta: Theta, k: int) -> bool:
    """True iff moments of order ``2k`` are finite and ``Psi(j) < 0`` for ``1 <= j <= k``."""
    if not model.moment_is_finite(2 * k):
        return False
    return all(psi(model, theta, j) < 0 for j in range(1, k + 1))
