from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vortexsim.core import ScenarioError
from vortexsim.scenario import (
    ALL_CHECKS,
    InitialCondition,
    Scenario,
    ScenarioParseError,
    load_scenario,
    parse_scenario,
)
from vortexsim.yudovich import YudovichProfile

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

BASIC = """
# comment line
[core]
name = demo
initial = gaussian   # trailing comment
width = 0.3
center = (0.1, -0.2)
n_particles = 400

[transport]
dt = 0.002
end_time = 0.1
snapshot_interval = 0.02

[field_ops]
profile = power
profile_alpha = 0.5
"""


def test_parse_basic():
    s = parse_scenario(BASIC)
    assert s.name == "demo"
    assert s.initial == InitialCondition("gaussian", center=(0.1, -0.2), width=0.3)
    assert s.n_target == 400
    assert s.dt == 0.002 and s.end_time == 0.1
    assert s.profile == YudovichProfile("power", alpha=0.5)
    assert s.checks == ALL_CHECKS
    assert s.integrator.snapshot_stride == 10


@pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.scn")), ids=lambda p: p.name)
def test_shipped_scenarios_parse_and_roundtrip(path):
    s = load_scenario(path)
    assert parse_scenario(s.to_text()) == s


def test_roundtrip_point_vortices():
    s = Scenario(
        InitialCondition("point_vortices", vortices=((1.0, -0.5, 0.0), (1.0, 0.5, 0.0))),
        name="pair", summation_mode="direct", dt=1e-3, end_time=0.5, snapshot_interval=0.1,
        checks=("marginal_identity",), p_grid=(1.0, 4.0),
    )
    assert parse_scenario(s.to_text()) == s


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(["rankine", "gaussian", "vortex_pair"]),
    st.floats(0.05, 2.0),
    st.integers(10, 10**6),
    st.sampled_from([1e-3, 2e-3, 5e-3]),
    st.integers(1, 20),
    st.floats(0.1, 1.0),
)
def test_roundtrip_property(kind, size, n, dt, k, theta):
    s = Scenario(
        InitialCondition(kind, radius=size, width=size), n_target=n, dt=dt,
        snapshot_interval=k * dt, end_time=3 * k * dt, theta_mac=theta,
    )
    back = parse_scenario(s.to_text())
    assert back == s
    assert back.fingerprint() == s.fingerprint()


@pytest.mark.parametrize(
    "text, line, column, fragment",
    [
        ("[core]\nbogus = 1\n", 2, 1, "unknown key 'bogus'"),
        ("[nowhere]\n", 1, 1, "unknown section"),
        ("dt = 1\n", 1, 1, "outside of any"),
        ("[transport]\ndt = 0.1\n  dt = 0.2\n", 3, 3, "duplicate key 'dt'"),
        ("[core]\nn_particles = 2.5\n", 2, 15, "must be an integer"),
        ("[core]\ncenter = (1, \n", 2, 10, "cannot parse value"),
        ("[core]\nradius =\n", 2, 9, "missing value"),
        ("[core]\njust words here\n", 2, 1, "expected"),
    ],
)
def test_parse_errors_report_position(text, line, column, fragment):
    with pytest.raises(ScenarioParseError) as ei:
        parse_scenario(text, source="x.scn")
    assert (ei.value.line, ei.value.column) == (line, column)
    assert fragment in str(ei.value)
    assert str(ei.value).startswith(f"x.scn:{line}:{column}:")


def test_semantic_errors():
    with pytest.raises(ScenarioError, match="integer multiple of dt"):
        parse_scenario("[transport]\ndt = 0.003\nsnapshot_interval = 0.01\n")
    with pytest.raises(ScenarioError):
        parse_scenario("[core]\ninitial = hurricane\n")
    with pytest.raises(ScenarioError):
        parse_scenario("[biot_savart]\nmode = fmm\n")


def test_load_missing_file_names_path(tmp_path):
    p = tmp_path / "nope.scn"
    with pytest.raises(FileNotFoundError, match="nope.scn"):
        load_scenario(p)


def test_grid_file_path_resolved_relative_to_scenario(tmp_path):
    (tmp_path / "sub").mkdir()
    f = tmp_path / "sub" / "s.scn"
    f.write_text("[core]\ninitial = grid_file\npath = init.vxf\n")
    s = load_scenario(f)
    assert Path(s.initial.path) == (tmp_path / "sub" / "init.vxf").resolve()


def test_fingerprint_ignores_end_time_only():
    s = Scenario(InitialCondition())
    assert s.fingerprint() == s.with_(end_time=5.0).fingerprint()
    assert s.fingerprint(include_end_time=True) != s.with_(end_time=5.0).fingerprint(include_end_time=True)
    assert s.fingerprint() != s.with_(dt=2e-3).fingerprint()
    assert s.fingerprint() != s.with_(theta_mac=0.3).fingerprint()
    assert len(s.fingerprint()) == 32


def test_initial_condition_validation():
    with pytest.raises(ScenarioError):
        InitialCondition("rankine", radius=0.0)
    with pytest.raises(ScenarioError):
        InitialCondition("vortex_pair", sign=0.5)
    with pytest.raises(ScenarioError):
        InitialCondition("grid_file")
    with pytest.raises(ScenarioError):
        InitialCondition("point_vortices", vortices=((1.0, 0.0),))


def test_outside_mass_fraction_oracles():
    # disk of radius 1 cut by the half-plane x <= 0 loses exactly half
    ic = InitialCondition("rankine")
    assert ic.outside_mass_fraction((-2, -2, 0, 2)) == pytest.approx(0.5, abs=1e-12)
    assert ic.outside_mass_fraction((-1, -1, 1, 1)) == pytest.approx(0.0, abs=1e-12)
    # Gaussian of width w: outside |x| <= w in one direction is erfc(1)
    g = InitialCondition("gaussian", width=0.5)
    assert g.outside_mass_fraction((-0.5, -100, 0.5, 100)) == pytest.approx(math.erfc(1.0), rel=1e-12)


def test_profiles_of_initial_conditions():
    ic = InitialCondition("vortex_pair", separation=1.0, width=0.2, sign=-1.0)
    f = ic.profile()
    assert f(np.array(0.5), np.array(0.0)) == pytest.approx(1 - math.exp(-25.0))
    assert f(np.array(0.0), np.array(0.0)) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ScenarioError):
        InitialCondition("point_vortices").profile()
