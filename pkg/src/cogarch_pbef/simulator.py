"""Fine-grid Euler simulation of COGARCH(1,1) returns.

On a grid of step ``dt = lag_r / refine`` the state is advanced by

    G      <- G + sigma * dL
    sigma2 <- sigma2 + (beta - eta sigma2) dt + phi sigma2 dQV

with ``sigma`` taken before the update (left limits).  Within each block of
grid steps the affine sigma^2 recursion ``x_{j+1} = a_j x_j + c`` is solved in
closed form with cumulative products, so only the block boundaries are
visited in a Python loop.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import NumericalError, ParameterError
from .levy import CompoundPoissonNormal, LevyModel, Theta, VarianceGamma, psi, stationarity_check
from .moments import stationary_sigma_moment

__all__ = [
    "SimConfig",
    "ReturnsSample",
    "default_burn_in",
    "path_rng",
    "simulate_levy_increment",
    "simulate_path",
    "simulate_sigma2_path",
    "write_returns",
    "read_returns",
]

# fine steps simulated per vectorized block
_BLOCK_STEPS = 1 << 20


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings; ``burn_in=None`` selects :func:`default_burn_in`."""

    n_obs: int
    lag_r: float = 1.0
    refine: int = 1000
    burn_in: float | None = None
    seed: int = 0

    def __post_init__(self):
        if int(self.n_obs) != self.n_obs or self.n_obs < 1:
            raise ParameterError(f"n_obs must be an integer >= 1, got {self.n_obs!r}")
        if int(self.refine) != self.refine or self.refine < 1:
            raise ParameterError(f"refine must be an integer >= 1, got {self.refine!r}")
        if not (math.isfinite(self.lag_r) and self.lag_r > 0):
            raise ParameterError(f"lag_r must be > 0, got {self.lag_r!r}")
        if self.burn_in is not None and not (math.isfinite(self.burn_in) and self.burn_in >= 0):
            raise ParameterError(f"burn_in must be >= 0, got {self.burn_in!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")


@dataclass(frozen=True)
class ReturnsSample:
    """Equally spaced returns ``G_{jr,r}``, ``j = 0, ..., n-1``."""

    lag_r: float
    values: np.ndarray

    def __post_init__(self):
        if not (math.isfinite(self.lag_r) and self.lag_r > 0):
            raise ParameterError(f"lag_r must be > 0, got {self.lag_r!r}")
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise ParameterError("returns must be a one-dimensional array")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)


def default_burn_in(model: LevyModel, theta: Theta) -> float:
    """``20 / (-Psi(1))``: twenty e-folding times of the sigma^2 mean."""
    p1 = psi(model, theta, 1)
    if p1 >= 0:
        raise ParameterError(f"Psi(1) = {p1:.6g} >= 0: no stationary variance")
    return 20.0 / -p1


def path_rng(seed: int, path_index: int = 0) -> np.random.Generator:
    """Independent generator for path ``path_index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(path_index)]))


def simulate_levy_increment(model: LevyModel, dt: float, rng: np.random.Generator, size=None):
    """Draw increments ``(dL, dQV)`` of the driver over a step ``dt``.

    Variance Gamma: ``dL = sqrt(V) N`` with ``V ~ Gamma(C dt, A^2 / C)``, and
    ``dQV = dL^2``.  Compound Poisson: sum of ``Poisson(rate dt)`` normal
    jumps, ``dQV`` the sum of their squares.
    """
    if not dt > 0:
        raise ParameterError(f"dt must be > 0, got {dt!r}")
    shape = () if size is None else size
    if isinstance(model, VarianceGamma):
        var = rng.gamma(model.C * dt, model.A**2 / model.C, size=shape)
        dL = np.sqrt(var) * rng.standard_normal(size=shape)
        dQV = dL * dL
    elif isinstance(model, CompoundPoissonNormal):
        counts = np.asarray(rng.poisson(model.rate * dt, size=shape))
        flat = counts.ravel()
        owner = np.repeat(np.arange(flat.size), flat)
        jumps = model.jump_sd * rng.standard_normal(owner.size)
        dL = np.bincount(owner, jumps, minlength=flat.size).reshape(counts.shape)
        dQV = np.bincount(owner, jumps * jumps, minlength=flat.size).reshape(counts.shape)
    else:
        raise ParameterError(f"no sampler for Lévy family {model.family!r}")
    if size is None:
        return float(dL), float(dQV)
    return dL, dQV


def _euler_block(x0, dL, dQV, dt, theta):
    """Advance sigma^2 over rows of fine steps; returns (sigma2 before each step, end state).

    ``dL`` and ``dQV`` have shape ``(m, steps)``; rows are consecutive.
    """
    a = 1.0 - theta.eta * dt + theta.phi * dQV
    c = theta.beta * dt
    # within a row: x_j = A_j (x_row + c B_j), A_j = prod_{m<j} a_m, B_j = sum_{m<j} 1/A_{m+1}
    A_incl = np.cumprod(a, axis=1)
    A = np.empty_like(a)
    A[:, 0] = 1.0
    A[:, 1:] = A_incl[:, :-1]
    B = np.zeros_like(a)
    B[:, 1:] = np.cumsum(1.0 / A_incl[:, :-1], axis=1)
    row_end_A = A_incl[:, -1]
    row_end_B = B[:, -1] + 1.0 / A_incl[:, -1]
    starts = np.empty(len(a))
    x = x0
    for i in range(len(a)):
        starts[i] = x
        x = row_end_A[i] * (x + c * row_end_B[i])
    return A * (starts[:, None] + c * B), x


def _rows_per_block(refine: int) -> int:
    return max(1, _BLOCK_STEPS // refine)


def _check_state(x, offset, what="sigma2"):
    bad = ~np.isfinite(x) | (x <= 0)
    if np.any(bad):
        step = offset + int(np.argmax(bad.ravel()))
        raise NumericalError(f"path diverged at step {step}: non-finite or non-positive {what}")


def _run(model, theta, cfg: SimConfig, rng, record: bool, sigma_out: bool = False):
    dt = cfg.lag_r / cfg.refine
    if theta.eta * dt >= 1.0:
        raise ParameterError(f"eta * dt = {theta.eta * dt:.3g} >= 1: refine the grid")
    burn = default_burn_in(model, theta) if cfg.burn_in is None else cfg.burn_in
    n_burn = int(math.ceil(burn / cfg.lag_r))
    x = stationary_sigma_moment(model, theta, 1)
    rows_per = _rows_per_block(cfg.refine)
    total_rows = n_burn + (cfg.n_obs if record else 0)
    returns = np.empty(cfg.n_obs) if record else None
    sig_end = np.empty(cfg.n_obs) if sigma_out else None
    done = 0
    while done < total_rows:
        m = min(rows_per, total_rows - done)
        dL, dQV = simulate_levy_increment(model, dt, rng, size=(m, cfg.refine))
        sig2, x = _euler_block(x, dL, dQV, dt, theta)
        _check_state(sig2, done * cfg.refine)
        _check_state(np.array([x]), (done + m) * cfg.refine)
        lo = done - n_burn
        if record and lo + m > 0:
            keep = slice(max(0, -lo), m)
            rows = np.sum(np.sqrt(sig2[keep]) * dL[keep], axis=1)
            dst = slice(max(0, lo), lo + m)
            returns[dst] = rows
            if sigma_out:
                sig_end[dst] = _row_ends(sig2[keep], dQV[keep], dt, theta)
        done += m
    if record and not np.all(np.isfinite(returns)):
        raise NumericalError("path diverged: non-finite return")
    return returns, sig_end, x


def _row_ends(sig2, dQV, dt, theta):
    last = sig2[:, -1]
    return last + (theta.beta - theta.eta * last) * dt + theta.phi * last * dQV[:, -1]


def simulate_path(model: LevyModel, theta: Theta, cfg: SimConfig, path_index: int = 0, with_sigma2: bool = False):
    """Simulate ``cfg.n_obs`` returns at spacing ``cfg.lag_r`` after burn-in.

    sigma^2 starts at its stationary mean and runs through ``cfg.burn_in``
    time units before the first recorded return.  With ``with_sigma2`` the
    function also returns sigma^2 at the end of each return interval.
    """
    if not stationarity_check(model, theta, 1):
        raise ParameterError(f"no stationary variance at {theta}: Psi(1) >= 0")
    rng = path_rng(cfg.seed, path_index)
    returns, sig_end, _ = _run(model, theta, cfg, rng, record=True, sigma_out=with_sigma2)
    sample = ReturnsSample(lag_r=cfg.lag_r, values=returns)
    return (sample, sig_end) if with_sigma2 else sample


def simulate_sigma2_path(model: LevyModel, theta: Theta, cfg: SimConfig, path_index: int = 0) -> float:
    """Terminal sigma^2 after the burn-in only (no recorded returns)."""
    rng = path_rng(cfg.seed, path_index)
    _, _, x = _run(model, theta, cfg, rng, record=False)
    return x


def write_returns(path, sample: ReturnsSample, metadata: dict):
    """Write a single-column CSV plus a ``.json`` sidecar with ``metadata``."""
    path = str(path)
    np.savetxt(path, sample.values, fmt="%.17g", header="return", comments="")
    meta = dict(metadata)
    meta["lag_r"] = sample.lag_r
    meta["n_obs"] = len(sample)
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def read_returns(path, lag_r: float | None = None) -> ReturnsSample:
    """Read a returns CSV; ``lag_r`` defaults to the sidecar value (else 1)."""
    path = str(path)
    try:
        values = np.loadtxt(path, skiprows=1, ndmin=1, dtype=float)
    except ValueError as exc:
        raise ParameterError(f"{path}: cannot parse returns: {exc}") from None
    if lag_r is None:
        try:
            with open(path + ".json") as fh:
                lag_r = float(json.load(fh)["lag_r"])
        except (OSError, KeyError, ValueError):
            lag_r = 1.0
    return ReturnsSample(lag_r=lag_r, values=values)


def _jsonable(obj):
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
