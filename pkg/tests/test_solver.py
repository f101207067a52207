import numpy as np
import pytest
from hypothesis import given, strategies as st

from rigidflow.config import ConfigError, RunConfig, parse_config
from rigidflow.diagnostics import _edge_values, discrete_test_space, kinetic_energies, scheme_residual
from rigidflow.kinematics import RigidState, perp, rotation_matrix
from rigidflow.solver import (COLLISION, COMPLETED, FSISolver, NumericalError, collision_distance,
                              initial_fields, run, setup_from_config)

BASE = RunConfig(outer_radius=1.0, body_radius=0.2, dt=1e-3, t_final=0.01, nr=4, ntheta=16,
                 l0=(0.2, 0.1), r0=0.5, fluid_ic="rigid-extension")


@pytest.fixture(scope="module")
def moving():
    return run(BASE)


def _rigid_rows(traj):
    return np.array([[*s.h, s.theta, *f.l, f.r] for s, f in zip(traj.states, traj.fields)])


# collision distance -------------------------------------------------------------

def test_collision_distance_examples():
    assert collision_distance(RigidState(), 0.2, 1.0) == pytest.approx(0.8, abs=1e-15)
    assert collision_distance(RigidState(h=(0.5, 0.0)), 0.2, 1.0) == pytest.approx(0.3, abs=1e-15)
    assert collision_distance(RigidState(h=(0.6, 0.0)), 0.2, 1.0, container_center=(0.1, 0.0)) == pytest.approx(0.3)


@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(0.0, 2 * np.pi))
def test_collision_distance_rotation_invariant(x, y, angle):
    h = np.array([x, y])
    d0 = collision_distance(RigidState(h=h), 0.2, 1.0)
    d1 = collision_distance(RigidState(h=rotation_matrix(angle) @ h), 0.2, 1.0)
    assert d1 == pytest.approx(d0, abs=1e-14)
    assert d0 == pytest.approx(0.8 - np.hypot(x, y), abs=1e-14)


# run ------------------------------------------------------------------------------

def test_zero_final_time_single_entry():
    tr = run(BASE.with_(t_final=0.0))
    assert len(tr) == 1 and tr.status == COMPLETED
    assert tr.fields[0].t == 0.0


def test_rest_is_fixed_point():
    tr = run(BASE.with_(l0=(0.0, 0.0), r0=0.0, fluid_ic="zero", dt=0.01, t_final=1.0))
    assert len(tr) == 101
    assert tr.status == COMPLETED
    for s, f in zip(tr.states, tr.fields):
        assert not np.any(f.v) and not np.any(f.l) and f.r == 0.0
        assert not np.any(s.h) and s.theta == 0.0
    np.testing.assert_allclose(tr.times, np.linspace(0.0, 1.0, 101), atol=1e-12)


def test_times_strictly_increasing_and_metadata(moving):
    t = moving.times
    assert np.all(np.diff(t) > 0)
    assert t[-1] == pytest.approx(BASE.t_final, abs=1e-12)
    assert len(moving.info) == len(moving) - 1
    assert moving.meta["picard_tol"] == BASE.picard_tol
    assert len(moving.meta["config_hash"]) == 64
    d = [moving.solver.distance(s) for s in moving.states]
    assert min(d) > 0


def test_picard_converges_quickly(moving):
    its = [i.iterations for i in moving.info]
    assert max(its) <= 8
    assert all(i.increment <= BASE.picard_tol for i in moving.info)


def test_normal_trace_nodal(moving):
    d = moving.disc
    mi = d.mesh.inner_nodes
    mo = d.mesh.outer_nodes
    for s, f in zip(moving.states, moving.fields):
        v = f.v.reshape(-1, 2)
        us = s.Q.T @ f.l + f.r * perp(d.y_in)
        assert np.abs(((v[mi] - us) * d.n_in).sum(-1)).max() <= 1e-8
        assert np.abs((v[mo] * d.n_out).sum(-1)).max() <= 1e-8


def test_normal_flux_through_body_matches_rigid(moving):
    e = moving.disc.mesh.inner
    for s, f in zip(moving.states, moving.fields):
        rel = _edge_values(e, f.v) - s.Q.T @ f.l - f.r * perp(e.points)
        assert abs(float((e.weights * (rel * e.normals).sum(-1)).sum())) <= 1e-8


def test_energy_dissipation_per_step(moving):
    E = np.array([sum(kinetic_energies(moving, k)) for k in range(len(moving))])
    dt = BASE.dt
    assert np.all(np.diff(E) <= 1.0 * dt**2)
    assert E[-1] < E[0]


def test_coupled_rows_satisfied(moving, disc4):
    tests = discrete_test_space(moving.disc, 4, np.random.default_rng(3))
    for n in (1, len(moving) - 1):
        res = scheme_residual(moving, n, tests)
        scale = np.abs(tests).max() / BASE.dt
        assert np.abs(res).max() <= 1e-8 * scale


def test_symmetric_fall_stays_symmetric():
    tr = run(BASE.with_(l0=(0.0, -0.1), r0=0.0, fluid_ic="zero", t_final=0.01))
    rows = _rigid_rows(tr)
    assert np.abs(rows[:, 0]).max() <= 1e-9
    assert np.abs(rows[:, 5]).max() <= 1e-9
    assert rows[-1, 1] < 0


def test_first_order_in_dt():
    cfg = BASE.with_(t_final=0.1)
    finals = [_rigid_rows(run(cfg.with_(dt=dt)))[-1] for dt in (0.02, 0.01, 0.005)]
    c1 = np.linalg.norm(finals[1] - finals[0])
    c2 = np.linalg.norm(finals[2] - finals[1])
    assert 0.4 <= c2 / c1 <= 0.6


def test_collision_flagged_and_truncated():
    cfg = BASE.with_(l0=(1.0, 0.0), r0=0.0, t_final=0.1, dt=0.01)
    disc, params, cutoff, settings = setup_from_config(cfg)
    solver = FSISolver(disc, params, cutoff, settings, collision_threshold=0.795)
    tr = solver.run(*initial_fields(disc, cfg))
    assert tr.status == COLLISION
    assert len(tr) < 11
    assert solver.distance(tr.states[-1]) <= 0.795
    assert all(solver.distance(s) > 0.795 for s in tr.states[:-1])


def test_collision_at_start():
    cfg = BASE
    disc, params, cutoff, settings = setup_from_config(cfg)
    solver = FSISolver(disc, params, cutoff, settings, collision_threshold=0.9)
    tr = solver.run(*initial_fields(disc, cfg))
    assert tr.status == COLLISION and len(tr) == 1


def test_picard_failure_raises_after_halving():
    with pytest.raises(NumericalError, match="Picard"):
        run(BASE.with_(picard_max=1, t_final=0.002))


# configuration ------------------------------------------------------------------

MINIMAL = "outer_radius = 1.0\nbody_radius = 0.2\ndt = 0.01\nt_final = 1  # seconds\n"


def test_parse_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.picard_tol == 1e-10
    assert cfg.ode_substeps == 4
    assert cfg.picard_max == 50
    assert cfg.body_center == (0.0, 0.0)
    assert cfg.delta_safe_value == pytest.approx(0.4)


def test_parse_body_radius_error():
    with pytest.raises(ConfigError) as exc:
        parse_config(MINIMAL.replace("0.2", "1.5"))
    assert exc.value.key == "body_radius"


@pytest.mark.parametrize("text,key", [
    (MINIMAL + "colour = red\n", "colour"),
    (MINIMAL.replace("dt = 0.01\n", ""), "dt"),
    (MINIMAL.replace("dt = 0.01", "dt = -1"), "dt"),
    (MINIMAL + "l0 = 1\n", "l0"),
    (MINIMAL + "delta_safe = 0.5\n", "delta_safe"),
    (MINIMAL + "fluid_ic = vortex\n", "fluid_ic"),
    (MINIMAL + "fluid_ic = stream: x +* y\n", "fluid_ic"),
])
def test_parse_errors_name_key(text, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.key == key


@given(st.floats(0.05, 0.3), st.floats(-0.2, 0.2), st.floats(-0.2, 0.2), st.floats(1e-4, 0.1),
       st.sampled_from(["zero", "rigid-extension", "stream:x*y*(1-x**2-y**2)"]))
def test_config_roundtrip(a, cx, cy, dt, ic):
    cfg = RunConfig(outer_radius=1.0, body_radius=a, body_center=(cx, cy), dt=dt, t_final=0.5, fluid_ic=ic,
                    l0=(0.1, -0.2), r0=0.3)
    again = parse_config(cfg.serialize())
    assert again == cfg
    assert again.serialize() == cfg.serialize()


def test_stream_initial_condition_is_admissible():
    cfg = BASE.with_(fluid_ic="stream:0.1*(1-x**2-y**2)**2", l0=(0.0, 0.0), r0=0.0, t_final=0.0)
    tr = run(cfg)
    f = tr.fields[0]
    assert np.abs(tr.disc.B @ f.v).max() <= 1e-10
    assert np.abs(f.v).max() > 1e-3
