import json
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from cogarch_pbef.cli import main, parse_config, run_study
from cogarch_pbef.errors import ConfigError
from cogarch_pbef.levy import Theta

BASE = """\
model = {"family": "variance_gamma", "C": 1.0}   # driver
theta0 = 0.04, 0.053, 0.038
n_obs = 400
replications = 3
"""


def _write(tmp_path, text, name="study.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_config_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, BASE))
    assert cfg.theta0 == Theta(0.04, 0.053, 0.038)
    assert (cfg.refine, cfg.q, cfg.trunc_K, cfg.methods, cfg.burn_in) == (1000, 1, 0, ("mspe",), None)
    assert cfg.to_dict()["model"] == {"family": "variance_gamma", "C": 1.0}


@pytest.mark.parametrize(
    "extra, message",
    [
        ("gamma = 1\n", "study.cfg:5: unknown key 'gamma'"),
        ("q = 2\nq = 3\n", "study.cfg:6: duplicate key 'q'"),
        ("methods = mspe, mle\n", "study.cfg:5: methods"),
        ("trunc_K = 51\n", "study.cfg:5: trunc_K"),
        ("just words\n", "study.cfg:5: expected 'key = value'"),
    ],
)
def test_config_errors_point_at_line(tmp_path, extra, message):
    with pytest.raises(ConfigError) as exc:
        parse_config(_write(tmp_path, BASE + extra))
    assert message in str(exc.value)


def test_config_negative_beta(tmp_path):
    with pytest.raises(ConfigError, match=r"study.cfg:2: theta0: .*beta must be > 0"):
        parse_config(_write(tmp_path, BASE.replace("0.04, 0.053", "-0.04, 0.053")))


def test_config_missing_key(tmp_path):
    with pytest.raises(ConfigError, match="missing required key"):
        parse_config(_write(tmp_path, "n_obs = 10\n"))


def test_exit_codes(tmp_path, capsys):
    bad = _write(tmp_path, BASE + "gamma = 1\n")
    assert main(["study", str(bad)]) == 2
    assert "unknown key 'gamma'" in capsys.readouterr().err
    assert main(["asymvar", "--theta", "0.04,-1,0.038"]) == 2
    # the nonstationary parameter has no finite fourth moment
    assert main(["moments", "--theta", "0.04,0.01,0.038"]) in (2, 3)


def test_estimate_nonconvergence_exit(tmp_path, capsys):
    data = tmp_path / "r.csv"
    assert main(["simulate", "--n-obs", "300", "--refine", "20", "--burn-in", "50", "--out", str(data)]) == 0
    code = main(["estimate", "--data", str(data), "--q", "3", "--n-starts", "1", "--init", "0.04,0.053,0.038"])
    out = json.loads(capsys.readouterr().out)
    assert code == (0 if out["converged"] else 3)
    assert out["provenance"]["n_obs"] == 300 and out["method"] == "MSPE"


def test_simulate_and_moments(tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert main(["simulate", "--n-obs", "50", "--refine", "10", "--burn-in", "5", "--seed", "3", "--out", str(out)]) == 0
    meta = json.loads((tmp_path / "r.csv.json").read_text())
    assert meta["sim_config"]["seed"] == 3 and meta["theta"] == [0.04, 0.053, 0.038]
    capsys.readouterr()
    assert main(["moments", "--entry", "1,1,1,0"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "k,i,h,d,value"
    assert float(lines[1].split(",")[-1]) == pytest.approx(8 / 3, rel=1e-12)
    assert main(["moments", "--entry", "1,0,1,0", "--sigma2-v", "2"]) == 0
    j0 = np.exp(-0.015)
    value = float(capsys.readouterr().out.strip().splitlines()[1].split(",")[-1])
    assert value == pytest.approx(0.04 * (1 - j0) / 0.015 + 2 * j0, rel=1e-12)


def test_asymvar_command(capsys):
    assert main(["asymvar", "--q", "3", "--method", "opbe", "--trunc-K", "0", "--sandwich-K", "inf"]) == 0
    V = np.loadtxt(capsys.readouterr().out.splitlines(), delimiter=",")
    assert V.shape == (3, 3)
    np.testing.assert_allclose(V, V.T, rtol=1e-8)
    assert np.linalg.eigvalsh(V).min() > 0


def test_oracle_requires_dev(capsys):
    with pytest.raises(SystemExit):
        main(["oracle", "psi"])
    capsys.readouterr()
    assert main(["--dev", "oracle", "psi", "--k", "4"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(-0.0261, abs=5e-5)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cogarch_pbef", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "0.1.0" in res.stdout


@pytest.fixture(scope="module")
def study_cfg(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("study")
    text = BASE + "methods = mspe, opbe\nq = 3\nrefine = 20\nburn_in = 100\nn_starts = 1\nmaxiter = 60\nhist_bins = 5\n"
    return parse_config(_write(tmp, text))


def _outputs(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


def test_study_reproducible(study_cfg, tmp_path):
    cfg = replace(study_cfg, out_dir=str(tmp_path / "a"))
    s1 = run_study(cfg)
    first = _outputs(tmp_path / "a")
    run_study(cfg)
    assert _outputs(tmp_path / "a") == first
    s2 = run_study(cfg, workers=2)
    assert _outputs(tmp_path / "a") == first
    assert s1 == s2
    assert {"estimates.csv", "summary.json", "hist_opbe_phi.csv"} <= set(first)

    summary = json.loads(first["summary.json"])
    assert summary["provenance"]["config"]["q"] == 3
    for method in ("mspe", "opbe"):
        entry = summary["methods"][method]
        assert entry["replications"] == 3
        assert entry["n_ok"] + round(entry["failure_rate"] * 3) == 3
    header = first["estimates.csv"].decode().splitlines()[:2]
    assert header[0].startswith("# {") and header[1].startswith("replication,method,label")


def test_study_maxiter_validated(tmp_path):
    with pytest.raises(ConfigError, match="maxiter"):
        parse_config(_write(tmp_path, BASE + "maxiter = 0\n"))
