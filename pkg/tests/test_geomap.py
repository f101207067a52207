import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rigidflow.geomap import (FlowMap, FlowMapError, FlowSample, build_cutoff, compose_maps, fd_divergence,
                              invert_map, lambda_componentwise, lambda_field, metric_and_christoffel,
                              prescribed_flowmap, rigid_map, smooth_sample_points, smoothstep5,
                              verify_invariants)
from rigidflow.kinematics import RigidState, rotation_matrix


def ring_points(radius, n=16, center=(0.0, 0.0)):
    a = 2 * np.pi * np.arange(n) / n
    return np.asarray(center) + radius * np.stack([np.cos(a), np.sin(a)], -1)


def random_points(rng, n, rmax=0.99, center=(0.0, 0.0), R=1.0):
    a = rng.uniform(0, 2 * np.pi, n)
    r = R * np.sqrt(rng.uniform(0, rmax**2, n))
    return np.asarray(center) + r[:, None] * np.stack([np.cos(a), np.sin(a)], -1)


# cutoff ------------------------------------------------------------------------

def test_cutoff_levels(cutoff):
    d = cutoff.delta
    assert cutoff.delta == pytest.approx(0.4)
    for dist, val in ((d, 1.0), (d / 8, 0.0), (3 * d / 8, 0.5), (0.0, 0.0), (d / 2, 1.0), (d / 4, 0.0)):
        x = np.array([[1.0 - dist, 0.0]])
        assert cutoff(x)[0] == pytest.approx(val, abs=1e-15)


@given(st.floats(0.0, 1.0))
def test_smoothstep_bounds_and_symmetry(s):
    v = smoothstep5(s)[0]
    assert 0.0 <= v <= 1.0
    assert v + smoothstep5(1.0 - s)[0] == pytest.approx(1.0, abs=1e-14)


def test_cutoff_rejects_body_near_wall():
    with pytest.raises(ValueError):
        build_cutoff(np.zeros(2), 1.0, 0.2, delta_safe=0.5)
    with pytest.raises(ValueError):
        build_cutoff(np.zeros(2), 1.0, 0.2, delta_safe=0.0)


def test_cutoff_derivatives_match_finite_differences(cutoff):
    x = random_points(np.random.default_rng(1), 200)
    psi, g, Hs, T = cutoff.derivatives(x)
    eps = 1e-6
    for j, e in enumerate(np.eye(2)):
        gp = cutoff.derivatives(x + eps * e)
        gm = cutoff.derivatives(x - eps * e)
        assert np.allclose((gp[0] - gm[0]) / (2 * eps), g[:, j], atol=1e-6)
        assert np.allclose((gp[1] - gm[1]) / (2 * eps), Hs[:, :, j], atol=1e-4)
        assert np.allclose((gp[2] - gm[2]) / (2 * eps), T[:, :, :, j], atol=1e-2)


# extension field ------------------------------------------------------------------

def test_lambda_vanishes_for_resting_body(cutoff):
    x = random_points(np.random.default_rng(0), 50)
    assert np.array_equal(lambda_field(np.zeros(2), np.zeros(2), 0.0, cutoff, x), np.zeros((50, 2)))


def test_lambda_is_rigid_where_cutoff_is_one(cutoff):
    x = np.array([[0.3, 0.1], [-0.5, 0.2], [0.0, 0.79]])
    lam = lambda_field(np.zeros(2), np.array([1.0, 0.0]), 0.0, cutoff, x)
    assert np.allclose(lam, [[1.0, 0.0]] * 3, atol=1e-15)
    h, l, r = np.array([0.05, -0.02]), np.array([0.2, 0.1]), 0.7
    lam = lambda_field(h, l, r, cutoff, x)
    z = x - h
    assert np.allclose(lam, l + r * np.stack([-z[:, 1], z[:, 0]], -1), atol=1e-14)


def test_lambda_vanishes_near_wall(cutoff):
    x = ring_points(0.95, 40)
    assert np.array_equal(lambda_field(np.zeros(2), np.array([0.3, 0.2]), 1.0, cutoff, x), np.zeros((40, 2)))


def test_lambda_matches_componentwise_formula(cutoff):
    rng = np.random.default_rng(7)
    x = random_points(rng, 1000)
    h, l, r = np.array([0.03, 0.01]), np.array([0.1, -0.2]), 0.5
    a = lambda_field(h, l, r, cutoff, x)
    b = lambda_componentwise(h, l, r, cutoff, x)
    assert np.max(np.abs(a - b)) <= 1e-12


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-2, 2), st.integers(0, 2**31))
def test_lambda_divergence_free(l1, l2, r, seed):
    cut = build_cutoff(np.zeros(2), 1.0, 0.2)
    # stencils kept off the circles where the cutoff is only C^2
    x = smooth_sample_points(cut, np.random.default_rng(seed), 100)
    f = lambda p: lambda_field(np.zeros(2), np.array([l1, l2]), r, cut, p)
    scale = max(float(np.max(np.abs(f(x)))), 1e-300)
    assert np.max(np.abs(fd_divergence(f, x))) <= 1e-8 * scale + 1e-300
    # the analytic gradient is trace free too
    _, G = lambda_field(np.zeros(2), np.array([l1, l2]), r, cut, x, order=1)
    assert np.max(np.abs(G[:, 0, 0] + G[:, 1, 1])) <= 1e-12 * max(1.0, scale)


# flow map ---------------------------------------------------------------------

def test_resting_body_gives_identity_map(cutoff, mesh4):
    fm = prescribed_flowmap(mesh4.vnodes, cutoff, (0.0, 0.0), 0.0, 0.01, 5)
    for s in fm.samples:
        assert np.array_equal(s.X, mesh4.vnodes)
        assert np.array_equal(s.F, np.broadcast_to(np.eye(2), s.F.shape))


def test_rotation_solution_in_rigid_region(cutoff):
    y = np.concatenate([ring_points(r, 12) for r in (0.1, 0.3, 0.5, 0.75)])
    r, dt, n = 1.3, 1e-3, 200
    fm = prescribed_flowmap(y, cutoff, (0.0, 0.0), r, dt, n)
    for k in (50, 200):
        exact = y @ rotation_matrix(r * k * dt).T
        assert np.max(np.abs(fm.samples[k].X - exact)) <= 1e-8


def test_det_preserved_at_small_steps(cutoff, mesh4):
    pts = np.vstack([mesh4.vnodes, mesh4.qp_points.reshape(-1, 2)])
    fm = prescribed_flowmap(pts, cutoff, (0.1, 0.0), 0.5, 1e-3, 100)
    assert fm.max_det_error() <= 1e-8


def test_identity_near_the_wall(cutoff, mesh4):
    pts = mesh4.vnodes
    fm = prescribed_flowmap(pts, cutoff, (0.1, 0.05), 0.5, 0.01, 20)
    near = cutoff.distance(pts) <= cutoff.delta / 4
    assert near.any()
    assert np.array_equal(fm.samples[-1].X[near], pts[near])


def test_body_moves_rigidly(cutoff):
    y = np.concatenate([ring_points(0.2, 20), ring_points(0.1, 10), np.zeros((1, 2))])
    fm = prescribed_flowmap(y, cutoff, (0.1, -0.05), 0.8, 0.01, 30)
    for k in (10, 30):
        assert np.max(np.abs(fm.samples[k].X - rigid_map(fm.states[k], y))) <= 1e-10


def test_node_leaving_domain_is_reported(cutoff):
    fm = FlowMap.start(np.array([[0.0, 0.0], [0.5, 0.0]]), cutoff, RigidState())
    bad = FlowSample(np.array([[0.0, 0.0], [1.5, 0.0]]), np.tile(np.eye(2), (2, 1, 1)), np.zeros((2, 2, 2, 2)))
    with pytest.raises(FlowMapError, match="node 1"):
        fm.commit(RigidState(), 0.1, bad, 1)


def test_inversion(cutoff):
    rng = np.random.default_rng(3)
    y0 = random_points(rng, 30, rmax=0.95)
    fm0 = prescribed_flowmap(y0, cutoff, (0.0, 0.0), 0.0, 0.01, 2)
    assert np.allclose(invert_map(fm0, 2, y0), y0, atol=1e-15)
    fm = prescribed_flowmap(y0, cutoff, (0.1, 0.0), 0.6, 0.01, 10)
    y, _ = fm.invert(10, fm.samples[10].X, tol=1e-12)
    assert np.max(np.abs(y - y0)) <= 1e-10
    # rotation at dt = 1e-3: Newton from the nearest stored node
    ring = ring_points(0.4, 32)
    fr = prescribed_flowmap(ring, cutoff, (0.0, 0.0), 1.0, 1e-3, 5)
    target = ring_points(0.4, 7) @ rotation_matrix(0.003).T
    y, it = fr.invert(5, target, tol=1e-12)
    assert it <= 6
    assert np.max(np.abs(fr.forward(y, 5).X - target)) <= 1e-12


def test_metric_identity_and_rigid(cutoff):
    idm = FlowSample.identity(np.zeros((5, 2)))
    c = metric_and_christoffel(idm)
    assert np.array_equal(c.g_lower, c.F) and np.array_equal(c.gamma, np.zeros((5, 2, 2, 2)))
    y = ring_points(0.3, 10)
    fm = prescribed_flowmap(y, cutoff, (0.1, 0.1), 0.9, 0.01, 20)
    c = metric_and_christoffel(fm.samples[-1])
    assert np.max(np.abs(c.g_lower - np.eye(2))) <= 1e-9
    assert np.max(np.abs(c.gamma)) <= 1e-9


def test_metric_inverse_and_symmetry(cutoff, mesh4):
    fm = prescribed_flowmap(mesh4.vnodes, cutoff, (0.1, 0.0), 0.5, 0.01, 20)
    c = metric_and_christoffel(fm.samples[-1])
    assert np.max(np.abs(np.einsum("nik,nkj->nij", c.g_upper, c.g_lower) - np.eye(2))) <= 1e-10
    assert np.array_equal(c.g_lower, np.swapaxes(c.g_lower, 1, 2)) or \
        np.max(np.abs(c.g_lower - np.swapaxes(c.g_lower, 1, 2))) <= 1e-14
    assert np.max(np.abs(c.gamma - np.swapaxes(c.gamma, 2, 3))) <= 1e-10 * max(1.0, np.max(np.abs(c.gamma)))


def test_singular_metric_rejected():
    s = FlowSample(np.zeros((1, 2)), np.zeros((1, 2, 2)), np.zeros((1, 2, 2, 2)))
    with pytest.raises(FlowMapError):
        metric_and_christoffel(s)


def test_compose_maps(cutoff):
    pts = np.concatenate([ring_points(r, 24) for r in (0.2, 0.5, 0.85, 0.95)])
    fm1 = prescribed_flowmap(pts, cutoff, (0.1, 0.0), 0.5, 0.01, 20)
    fm2 = prescribed_flowmap(pts, cutoff, (0.0, 0.08), -0.4, 0.01, 20)
    x = random_points(np.random.default_rng(2), 20, rmax=0.9)
    phi, G = compose_maps(fm1, fm1, 20, x)
    assert np.max(np.abs(phi - x)) <= 1e-10 and np.max(np.abs(G - np.eye(2))) <= 1e-10
    s1, s2 = fm1.states[20], fm2.states[20]
    markers = rigid_map(s1, ring_points(0.2, 16))
    phi, G = compose_maps(fm1, fm2, 20, markers)
    assert np.max(np.abs(np.linalg.norm(phi - s2.h, axis=1) - 0.2)) <= 1e-8
    inner = rigid_map(s1, ring_points(0.1, 8))
    _, G = compose_maps(fm1, fm2, 20, inner)
    assert np.max(np.abs(G - s2.Q @ s1.Q.T)) <= 1e-9


def test_compose_requires_shared_grid(cutoff):
    pts = ring_points(0.5, 8)
    fm1 = prescribed_flowmap(pts, cutoff, (0.1, 0.0), 0.0, 0.01, 3)
    fm2 = prescribed_flowmap(pts, cutoff, (0.1, 0.0), 0.0, 0.02, 3)
    with pytest.raises(FlowMapError):
        compose_maps(fm1, fm2, 2, pts)


def test_smooth_sample_points_avoid_transitions(cutoff):
    x = smooth_sample_points(cutoff, np.random.default_rng(0), 500, clearance=1e-2)
    d = cutoff.distance(x)
    assert len(x) == 500 and np.all(d > 0)
    assert np.all(np.abs(d - 0.1) > 1e-2) and np.all(np.abs(d - 0.2) > 1e-2)


def test_invariant_suite(cutoff, mesh4):
    pts = np.vstack([mesh4.vnodes, mesh4.qp_points.reshape(-1, 2)])
    fm = prescribed_flowmap(pts, cutoff, (0.1, 0.0), 0.5, 0.01, 30)
    body = np.concatenate([ring_points(0.2, 16), ring_points(0.1, 8)])
    checks = verify_invariants(fm, mesh4.qp_weights, np.random.default_rng(0), n_points=300, body_points=body)
    assert {c[0] for c in checks} == {"div_lambda_rel", "cell_area_rel", "det_error", "inverse_jacobian_drift",
                                      "body_rigidity"}
    for name, value, tol in checks:
        assert value <= tol, name
