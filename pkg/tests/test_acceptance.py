"""Acceptance suite: one test per criterion, each reported as a pass/fail line.

Run alone with ``python tests/test_acceptance.py`` or
``pytest tests/test_acceptance.py -v``.  The simulation study (criterion 7)
dominates the runtime, roughly 35 minutes on one core.
"""

import csv

import numpy as np
import pytest

from cogarch_pbef.cli import StudyConfig, run_study
from cogarch_pbef.errors import CogarchError
from cogarch_pbef.expfun import ExpPoly, ep_integrate_h
from cogarch_pbef.levy import Theta, psi
from cogarch_pbef.moments import build_jtable, build_moment_cache, joint_return_moment, marginal_g_moment
from cogarch_pbef.oracles import MomentSpec, mc_moments, nested_j_quadrature, ode_jtable
from cogarch_pbef.pbef import _population, asymptotic_variance, h_mean, m_matrix, predictor_coeffs

ACCEPTANCE_Q = 70
Q_SWEEP = (1, 2, 3, ACCEPTANCE_Q)

V_MSPE = np.array([[4.668, 2.989, 1.216], [2.989, 3.172, 2.058], [1.216, 2.058, 1.628]])
V_OPBE_M0 = np.array([[4.504, 2.845, 1.134], [2.845, 3.047, 1.988], [1.134, 1.988, 1.588]])
V_OPBE = np.array([[4.503, 2.844, 1.133], [2.844, 3.045, 1.985], [1.133, 1.985, 1.587]])

RNG_SEED = 20240601


def _max_rel(a, b):
    return float(np.max(np.abs(a - b) / np.abs(b)))


@pytest.fixture(scope="module")
def variance_blocks(vg, theta0):
    """MSPE sweep over ``Q_SWEEP`` and the three table blocks at the selected q."""
    sweep = {}
    pops = {}
    for q in Q_SWEEP:
        try:
            pops[q] = _population(vg, theta0, q, 1.0)
            V = asymptotic_variance(vg, theta0, q, 1.0, "mspe", None, population=pops[q])
            sweep[q] = _max_rel(V, V_MSPE)
        except CogarchError as exc:
            sweep[q] = f"{type(exc).__name__}"
    q = min((k for k, v in sweep.items() if isinstance(v, float)), key=lambda k: sweep[k])
    pop = pops[q]
    return {
        "sweep": sweep,
        "q": q,
        "mspe": asymptotic_variance(vg, theta0, q, 1.0, "mspe", None, population=pop),
        "opbe_m0": asymptotic_variance(vg, theta0, q, 1.0, "opbe", 0, sandwich_K=None, population=pop),
        "opbe": asymptotic_variance(vg, theta0, q, 1.0, "opbe", None, population=pop),
    }


def test_criterion_1_psi(vg, theta0, acceptance):
    value = psi(vg, theta0, 4)
    ok = abs(value - (-0.0261)) <= 5e-4
    acceptance(1, ok, f"Psi(4) = {value:.5f}, reference -0.0261 +- 5e-4")
    assert ok


def test_criterion_2_variance_table(variance_blocks, acceptance):
    b = variance_blocks
    sweep = ", ".join(f"q={k}: {v if isinstance(v, str) else f'{v:.3g}'}" for k, v in b["sweep"].items())
    errs = {name: _max_rel(b[name], ref) for name, ref in (("mspe", V_MSPE), ("opbe_m0", V_OPBE_M0), ("opbe", V_OPBE))}
    ok = all(e <= 0.02 for e in errs.values())
    detail = (f"selected q={b['q']}; MSPE max rel err by q [{sweep}]; at q={b['q']}: "
              + ", ".join(f"{k} {v:.2e}" for k, v in errs.items()) + " (tol 2e-2)")
    acceptance(2, ok, detail)
    assert ok


def test_criterion_3_m0_approximation(variance_blocks, acceptance):
    err = _max_rel(variance_blocks["opbe_m0"], variance_blocks["opbe"])
    ok = err < 0.005
    acceptance(3, ok, f"OPBE(M0 weights) vs OPBE(full M) max rel diff {err:.2e} (tol 5e-3)")
    assert ok


def test_criterion_4_monte_carlo(vg, theta0, jt, cache, acceptance):
    lags = (1, 2, 5, 10)
    specs = [MomentSpec(returns=((0, 2),)), MomentSpec(returns=((0, 4),))]
    specs += [MomentSpec(returns=((0, 2), (k, 2))) for k in lags]
    expected = [marginal_g_moment(cache, 1, 1.0), marginal_g_moment(cache, 2, 1.0)]
    expected += [joint_return_moment(jt, cache, [(0, 1), (k, 1)], 1.0) for k in lags]
    est = mc_moments(vg, theta0, specs, n_paths=10**5, seed=RNG_SEED, refine=1000)
    names = ["E G^2", "E G^4"] + [f"E G^2 G^2_{k}" for k in lags]
    z = [e.z_score(ref) for e, ref in zip(est, expected)]
    ok = all(abs(v) < 3 for v in z)
    acceptance(4, ok, f"{est[0].n_paths} windows; z-scores " + ", ".join(f"{n}: {v:+.2f}" for n, v in zip(names, z)))
    assert ok


def test_criterion_5_symbolic_vs_quadrature(vg, theta0, acceptance):
    table = build_jtable(vg, theta0, 3)
    rng = np.random.default_rng(RNG_SEED)
    worst = 0.0
    for h, d in rng.uniform(0.0, 20.0, size=(10, 2)):
        for (k, i, r), ref in ode_jtable(vg, theta0, h, d, k_max=3).items():
            worst = max(worst, abs(table[k, i, r](h, d) - ref) / (1e-8 * abs(ref) + 1e-14))
    for t in rng.uniform(0.1, 5.0, size=3):
        for k in range(1, 4):
            for i in range(k + 1):
                ref = nested_j_quadrature(vg, theta0, k, i, t)
                worst = max(worst, abs(table[k, 0, k - i](t, 0.0) - ref) / (1e-8 * abs(ref) + 1e-14))
    ok = worst <= 1.0
    acceptance(5, ok, f"worst |J - quadrature| / (1e-8 |ref| + 1e-14) = {worst:.3f} over 10 points (ODE) and 3 lags (nested)")
    assert ok


def test_criterion_6_total_expectation(jt, cache, acceptance):
    sig = np.array(cache.stationary_sigma)
    rng = np.random.default_rng(RNG_SEED + 1)
    worst = 0.0
    for h, d in rng.uniform(0.0, 50.0, size=(20, 2)):
        for k in range(jt.k_max + 1):
            lhs = sum(jt[k, 0, r](h, d) * sig[r] for r in range(k + 1))
            worst = max(worst, abs(lhs - sig[k]) / sig[k])
    ok = worst <= 1e-10
    acceptance(6, ok, f"max rel residual {worst:.2e} for k <= {jt.k_max} at 20 points (tol 1e-10)")
    assert ok


def _paired_estimates(path):
    """Estimates of replications where every method produced a fit, keyed by method."""
    with open(path) as fh:
        rows = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
    by_rep = {}
    for r in rows:
        by_rep.setdefault(int(r["replication"]), {})[r["method"]] = r
    methods = {r["method"] for r in rows}
    keep = [reps for reps in by_rep.values() if all(reps.get(m, {}).get("status") == "ok" for m in methods)]
    return {m: np.array([[float(reps[m][k]) for k in ("beta", "eta", "phi")] for reps in keep]) for m in methods}


def test_criterion_7_simulation_study(vg, theta0, tmp_path_factory, acceptance):
    cfg = StudyConfig(model=vg, theta0=theta0, n_obs=5000, replications=200, methods=("mspe", "opbe"),
                      q=ACCEPTANCE_Q, trunc_K=0, seed=RNG_SEED, refine=1000,
                      out_dir=str(tmp_path_factory.mktemp("acceptance_study")))
    summary = run_study(cfg)["methods"]
    target = np.array(theta0.as_tuple())
    median = np.array(summary["mspe"]["median"])
    rel = median / target - 1
    median_ok = bool(np.all(np.abs(rel) <= 0.15))
    # compare covariances on replications where both estimators exist
    paired = _paired_estimates(f"{cfg.out_dir}/estimates.csv")
    tr = {m: float(np.trace(np.cov(est, rowvar=False))) for m, est in paired.items()}
    tr_all = {m: float(np.trace(summary[m]["cov"])) for m in cfg.methods}
    trace_ok = tr["opbe"] <= tr["mspe"]
    ok = median_ok and trace_ok
    detail = (f"MSPE median rel err (beta, eta, phi) = ({rel[0]:+.3f}, {rel[1]:+.3f}, {rel[2]:+.3f}) "
              f"{'ok' if median_ok else 'exceeds 0.15'}; trace cov on {len(paired['mspe'])} paired reps "
              f"OPBE {tr['opbe']:.3e} vs MSPE {tr['mspe']:.3e} (all fits: {tr_all['opbe']:.3e} vs {tr_all['mspe']:.3e}); "
              f"fits ok MSPE {summary['mspe']['n_ok']}, OPBE {summary['opbe']['n_ok']} of {cfg.replications}; output {cfg.out_dir}")
    acceptance(7, ok, detail)
    assert ok


def test_criterion_8_properties(vg, theta0, variance_blocks, acceptance):
    failures = []
    # normal equations of the best linear predictor
    worst_ne = 0.0
    for theta in (theta0, Theta(0.04, 0.5, 0.1), Theta(0.1, 0.2, 0.05)):
        c = build_moment_cache(vg, theta, 4)
        for q in (1, 3, 12):
            a = predictor_coeffs(c.jtable, c, q, 1.0).a_tilde
            worst_ne = max(worst_ne, float(np.max(np.abs(h_mean(c.jtable, c, 1.0, a)))) / max(1.0, marginal_g_moment(c, 2, 1.0)))
    if worst_ne >= 1e-10:
        failures.append("normal equations")

    # M symmetric positive definite, truncated and full
    c = build_moment_cache(vg, theta0, 4)
    a = predictor_coeffs(c.jtable, c, 3, 1.0).a_tilde
    min_eig, asym = np.inf, 0.0
    for K in (0, 1, 5, 20, None):
        M = m_matrix(c.jtable, c, 3, 1.0, theta0, K, a_tilde=a)
        asym = max(asym, float(np.max(np.abs(M - M.T)) / np.max(np.abs(M))))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(M).min()))
    if not (min_eig > 0 and asym < 1e-12):
        failures.append("M positive definite")

    # optimality: V_MSPE - V* is positive semidefinite
    gap_eigs = [float(np.linalg.eigvalsh(variance_blocks["mspe"] - variance_blocks["opbe"]).min())]
    pop = _population(vg, theta0, 3, 1.0)
    for K in (0, 2, None):
        Vm = asymptotic_variance(vg, theta0, 3, 1.0, "mspe", K, population=pop)
        Vo = asymptotic_variance(vg, theta0, 3, 1.0, "opbe", K, population=pop)
        gap_eigs.append(float(np.linalg.eigvalsh(Vm - Vo).min()))
    if min(gap_eigs) < -1e-8:
        failures.append("optimality")

    # ExpPoly integrate / differentiate round trip
    rng = np.random.default_rng(RNG_SEED + 2)
    worst_rt = 0.0
    for _ in range(20):
        terms = [(rng.uniform(-3, 3), int(rng.integers(0, 3)), int(rng.integers(0, 2)), rng.uniform(-0.5, 0.1), rng.uniform(-0.3, 0))
                 for _ in range(int(rng.integers(1, 6)))]
        f = ExpPoly(terms)
        F = ep_integrate_h(f)
        for h, d in rng.uniform(0.1, 5.0, size=(5, 2)):
            step = 1e-4
            deriv = float((F.evaluate_mp(h + step, d) - F.evaluate_mp(h - step, d)) / (2 * step))
            worst_rt = max(worst_rt, abs(deriv - f(h, d)) / max(1.0, abs(f(h, d))))
    if worst_rt >= 1e-6:
        failures.append("ExpPoly round trip")

    ok = not failures
    detail = (f"normal-eq residual {worst_ne:.1e}; M min eig {min_eig:.2e}, asym {asym:.1e}; "
              f"min eig(V_MSPE - V*) {min(gap_eigs):.2e}; ExpPoly round trip {worst_rt:.1e}"
              + ("" if ok else f"; failed: {', '.join(failures)}"))
    acceptance(8, ok, detail)
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
