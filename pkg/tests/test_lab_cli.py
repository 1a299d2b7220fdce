import csv
import json

import numpy as np
import pytest

from mctoda import dwhitham as dw
from mctoda import lab_cli as cli
from mctoda.gspec import GSpec
from mctoda.toda_core import birkhoff_factorize, dress_state

from conftest import FACTOR_BASE

FACTORIZE_YAML = """\
experiment: fz
target: factorize
seed: 3
times:
  - {j: 1, a: "1", value: 0.01}
"""

FLOW_YAML = """\
experiment: flow
target: whitham-flow
options:
  nodes: 40
  t_end: 0.04
  dt: 0.01
  oracle: dkdv-linear
"""


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_config_gets_defaults():
    cfg = cli.parse_config("experiment: e\ntarget: factorize\nseed: 1\n")
    assert (cfg.N, cfg.K, cfg.window) == (2, 6, (-16, 16))
    assert cfg.tolerances == {"residual": 1e-10, "agreement": 1e-9}


@pytest.mark.parametrize("text,field", [
    ("experiment: e\ntarget: factorize\nseed: 1\ncharges: [1, 0, 0, 0]\n", "charges"),
    ("experiment: e\ntarget: factorize\nseed: 1\ncharges: [1, -1]\n", "charges"),
    ("experiment: e\ntarget: factorize\n", "seed"),
    ("experiment: e\ntarget: nope\n", "target"),
    ("experiment: e\ntarget: factorize\nseed: 1\nbogus: 2\n", "bogus"),
    ("experiment: e\ntarget: factorize\nseed: 1\nwindow: [4, 2]\n", "window"),
    ("experiment: e\ntarget: factorize\nseed: 1\ntolerances: {residual: -1}\n", "tolerances.residual"),
    ("target: factorize\n", "experiment"),
])
def test_validation_names_field(text, field):
    with pytest.raises(cli.ConfigError, match=rf"^{field}"):
        cli.parse_config(text)


def test_yaml_error_has_position():
    with pytest.raises(cli.ConfigError, match=r"parse error at line \d+, column \d+"):
        cli.parse_config("experiment: e\ntarget: [factorize\n")


def test_echo_and_hash_stable():
    a = cli.parse_config(FACTORIZE_YAML)
    b = cli.parse_config("seed: 3\n" + FACTORIZE_YAML.replace("seed: 3\n", ""))
    assert a.echo() == b.echo()
    assert a.hash() == b.hash() and len(a.hash()) == 16
    c = cli.parse_config(FACTORIZE_YAML.replace("seed: 3", "seed: 4"))
    assert c.hash() != a.hash()


def test_report_body_deterministic(tmp_path):
    cfg = cli.parse_config(FACTORIZE_YAML)
    b1 = cli.run_experiment(cfg, tmp_path / "a").body()
    b2 = cli.run_experiment(cfg, tmp_path / "b").body()
    assert b1 == b2
    assert b1["verdict"] == "pass"


def test_main_writes_reports(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "out"))
    rc = cli.main(["factorize", "--config", str(write(tmp_path, FACTORIZE_YAML))])
    assert rc == cli.EXIT_PASS
    out = tmp_path / "out"
    rep = json.loads((out / "fz.report.json").read_text())
    assert rep["config_hash"] == cli.parse_config(FACTORIZE_YAML).hash()
    with (out / "fz.residuals.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == cli.CSV_COLUMNS
    assert all(r[4] == "true" for r in rows[1:])
    assert "PASS" in capsys.readouterr().out


def test_exit_codes(tmp_path):
    bad = write(tmp_path, "experiment: e\ntarget: factorize\n", "bad.yaml")
    assert cli.main(["factorize", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["factorize", "--config", str(tmp_path / "missing.yaml")]) == cli.EXIT_CONFIG
    good = write(tmp_path, FACTORIZE_YAML)
    assert cli.main(["dispersive-verify", "--config", str(good)]) == cli.EXIT_CONFIG
    strict = write(tmp_path, FACTORIZE_YAML + "tolerances: {residual: 1.0e-30}\n", "strict.yaml")
    assert cli.main(["factorize", "--config", str(strict), "--out", str(tmp_path / "o")]) == cli.EXIT_FAIL
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["factorize", "--config", str(good), "--out", str(blocker / "sub")]) == cli.EXIT_IO


def test_seed_override(tmp_path):
    cfg = write(tmp_path, "experiment: e\ntarget: factorize\n")
    assert cli.main(["factorize", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "o")]) == 0


def test_state_round_trip(tmp_path):
    st = dress_state(birkhoff_factorize(GSpec(seed=2), FACTOR_BASE))
    p = cli.persist_state(st, tmp_path / "s.json")
    back = cli.load_state(p, window=(-16, 16))
    assert (back.S - st.S).max_norm() == 0.0
    assert (back.L - st.L).max_norm() == 0.0
    assert back.params == st.params
    with pytest.raises(ValueError, match="window mismatch"):
        cli.load_state(p, window=(-8, 8))
    env = json.loads(p.read_text())
    env["schema"] = "mctoda-state/0"
    p.write_text(json.dumps(env))
    with pytest.raises(ValueError, match="schema version mismatch"):
        cli.load_state(p)


def test_dispersive_from_persisted_state(tmp_path):
    st = dress_state(birkhoff_factorize(GSpec(seed=2), FACTOR_BASE))
    p = cli.persist_state(st, tmp_path / "s.json")
    cfg = cli.parse_config(f"experiment: d\ntarget: dispersive-verify\nseed: 2\n"
                           f"options: {{state: {p}, flow_orders: []}}\n")
    rep = cli.run_experiment(cfg, tmp_path)
    assert rep.verdict


def test_flow_resume_matches_single_shot(tmp_path):
    single = cli.run_experiment(cli.parse_config(FLOW_YAML.replace("t_end: 0.04", "t_end: 0.08")), tmp_path / "s")
    first = cli.run_experiment(cli.parse_config(FLOW_YAML), tmp_path / "r1")
    resumed = cli.parse_config(FLOW_YAML.replace("oracle: dkdv-linear", f"field: {first.artifacts['field']}"))
    second = cli.run_experiment(resumed, tmp_path / "r2")
    a = cli.load_state(single.artifacts["field"]).W
    b = cli.load_state(second.artifacts["field"]).W
    assert np.max(np.abs(a - b)) <= 1e-10
    assert single.verdict and second.verdict


def test_flow_trajectory_csv(tmp_path):
    rep = cli.run_experiment(cli.parse_config(FLOW_YAML), tmp_path)
    with open(rep.artifacts["trajectory"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "x", "u/1/0.re", "u/1/0.im"]
    assert len(rows) == 1 + 5 * 40
    assert rep.data["probe"]["x"] == 0.5


def test_unknown_initial_parameter():
    with pytest.raises(cli.ConfigError, match="options.initial"):
        cli._field_from_options({"initial": {"q/2": [0.0]}})


def test_hodograph_target(tmp_path):
    cfg = cli.load_config("configs/hodograph_two_puncture.yaml")
    rep = cli.run_experiment(cfg, tmp_path)
    assert rep.verdict, [(c.check_id, c.residual) for c in rep.checks]
    fld = cli.load_state(rep.artifacts["field"])
    assert isinstance(fld, dw.WhithamField) and fld.W.shape == (21, 2)
