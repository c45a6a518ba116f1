"""Particle-varifold operations: mass, variation, curvature, graphs.

Frozen oracles:
  - mean curvature magnitude m/rho for the round m-sphere and 1/rho for
    the cylinder surface in R^3, direction the inward normal,
  - tilt-excess slope for the one-dimensional graph of eps*x^2 against
    the horizontal line: phi(0, r) = (4/sqrt(3)) * eps * r + O(eps^2),
  - two-plane tilt identity phi^2 = (other-plane mass) * |P1 - P2|_F^2,
    exact arithmetic,
  - first variation of a sphere against the weighted normal integral,
  - lattice-plane ball masses against unit_ball_measure.
"""

import json
import math

import numpy as np
import pytest

from varjet.fields import Ball, _eroded_mask, unit_ball_measure, weak_gradient
from varjet.varifold import (
    BumpVectorField,
    Cylinder,
    DiscreteVarifold,
    GraphFrame,
    RadialBumpField,
    check_lemma31_hypotheses,
    first_variation,
    good_point_filter,
    graph_extract,
    load_varifold,
    mass,
    mean_curvature_estimate,
    save_varifold,
    tilt_excess,
    tilt_minimizing_matrix,
    tilt_vs_graph_check,
)

GRAPH_TILT_SLOPE = 4.0 / math.sqrt(3.0)


# -- generators -------------------------------------------------------------


def lattice_axis(half, spacing):
    return np.arange(-half, half + spacing / 2.0, spacing)


def lattice_plane(spacing, half=1.0, weight_factor=1.0, height=0.0):
    """Unit-density patch of the x-y plane in R^3, w = spacing^2 each."""
    ax = lattice_axis(half, spacing)
    x = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
    z = np.column_stack([x, np.full(len(x), float(height))])
    P = np.zeros((3, 3))
    P[0, 0] = P[1, 1] = 1.0
    w = np.full(len(x), weight_factor * spacing ** 2)
    return DiscreteVarifold(3, 2, z, np.broadcast_to(P, (len(x), 3, 3)), w)


def fibonacci_sphere(n_pts, rho=1.0):
    i = np.arange(n_pts)
    zc = 1.0 - 2.0 * (i + 0.5) / n_pts
    ang = math.pi * (3.0 - math.sqrt(5.0)) * i
    rr = np.sqrt(np.clip(1.0 - zc ** 2, 0.0, None))
    nu = np.stack([rr * np.cos(ang), rr * np.sin(ang), zc], axis=1)
    P = np.eye(3)[None] - nu[:, :, None] * nu[:, None, :]
    w = np.full(n_pts, 4.0 * math.pi * rho ** 2 / n_pts)
    return DiscreteVarifold(3, 2, rho * nu, P, w), nu


def cylinder_surface(rho, spacing, half=1.0):
    n_ang = max(int(round(2.0 * math.pi * rho / spacing)), 8)
    theta = 2.0 * math.pi * np.arange(n_ang) / n_ang
    s = lattice_axis(half, spacing)
    tt, ss = np.meshgrid(theta, s, indexing="ij")
    tt = tt.reshape(-1)
    ss = ss.reshape(-1)
    z = np.column_stack([rho * np.cos(tt), rho * np.sin(tt), ss])
    t1 = np.column_stack([-np.sin(tt), np.cos(tt), np.zeros_like(tt)])
    P = t1[:, :, None] * t1[:, None, :]
    P[:, 2, 2] += 1.0
    w = np.full(len(z), (2.0 * math.pi * rho / n_ang) * spacing)
    return DiscreteVarifold(3, 2, z, P, w)


def graph_varifold(u, du, spacing, half=1.0, heights=(0.0,), noise=None):
    """Graph(s) of u over [-half, half]^2 with exact tangent data."""
    ax = lattice_axis(half, spacing)
    x = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
    uv = u(x)
    g1, g2 = du(x)
    det = 1.0 + g1 ** 2 + g2 ** 2
    A = np.zeros((len(x), 3, 2))
    A[:, 0, 0] = 1.0
    A[:, 1, 1] = 1.0
    A[:, 2, 0] = g1
    A[:, 2, 1] = g2
    Ginv = np.empty((len(x), 2, 2))
    Ginv[:, 0, 0] = 1.0 + g2 ** 2
    Ginv[:, 1, 1] = 1.0 + g1 ** 2
    Ginv[:, 0, 1] = Ginv[:, 1, 0] = -g1 * g2
    Ginv /= det[:, None, None]
    P = np.einsum("nia,nab,njb->nij", A, Ginv, A)
    w = np.sqrt(det) * spacing ** 2
    zs, Ps, ws = [], [], []
    rng = np.random.default_rng(11)
    for c in heights:
        h = uv + c
        if noise:
            h = h + rng.uniform(-noise, noise, size=len(x))
        zs.append(np.column_stack([x, h]))
        Ps.append(P)
        ws.append(w)
    return DiscreteVarifold(
        3, 2, np.concatenate(zs), np.concatenate(Ps), np.concatenate(ws)
    )


def line_graph(u, du, spacing, half=1.0):
    """m=1 graph in R^2 with exact tangent lines and length weights."""
    x = lattice_axis(half, spacing)
    s = du(x)
    t = np.stack([np.ones_like(x), s], axis=1)
    P = t[:, :, None] * t[:, None, :] / (1.0 + s ** 2)[:, None, None]
    w = np.sqrt(1.0 + s ** 2) * spacing
    z = np.stack([x, u(x)], axis=1)
    return DiscreteVarifold(2, 1, z, P, w)


def crossing_lines(spacing, half=1.5):
    x = lattice_axis(half, spacing)
    z = np.concatenate([
        np.stack([x, np.zeros_like(x)], axis=1),
        np.stack([np.zeros_like(x), x], axis=1),
    ])
    P1 = np.array([[1.0, 0.0], [0.0, 0.0]])
    P2 = np.array([[0.0, 0.0], [0.0, 1.0]])
    P = np.concatenate([
        np.broadcast_to(P1, (len(x), 2, 2)),
        np.broadcast_to(P2, (len(x), 2, 2)),
    ])
    w = np.full(2 * len(x), spacing)
    return DiscreteVarifold(2, 1, z, P, w)


class ConstField:
    def __init__(self, vec):
        self.vec = np.asarray(vec, dtype=float)

    def value(self, pts):
        pts = np.atleast_2d(pts)
        return np.broadcast_to(self.vec, (len(pts), len(self.vec)))

    def jacobian(self, pts):
        pts = np.atleast_2d(pts)
        return np.zeros((len(pts), len(self.vec), pts.shape[1]))


# -- types and invariants ---------------------------------------------------


def test_particle_invariants_rejected():
    z = np.zeros((1, 3))
    w = [1.0]
    bad_proj = np.eye(3) * 0.5
    with pytest.raises(ValueError, match="not projections"):
        DiscreteVarifold(3, 2, z, bad_proj[None], w)
    full = np.eye(3)
    with pytest.raises(ValueError, match="dimension mismatch"):
        DiscreteVarifold(3, 2, z, full[None], w)
    ok = np.diag([1.0, 1.0, 0.0])
    with pytest.raises(ValueError, match="nonpositive"):
        DiscreteVarifold(3, 2, z, ok[None], [-1.0])
    V = DiscreteVarifold(3, 2, z, ok[None], w)
    assert len(V) == 1


def test_frame_invariants():
    eye = np.eye(3)
    with pytest.raises(ValueError, match="orthonormal-split"):
        GraphFrame(eye[:2], eye[:1])
    fr = GraphFrame.standard(3, 2)
    assert fr.m == 2 and fr.codim == 1
    b1 = np.array([1.0, 0.0, 1.0]) / math.sqrt(2.0)
    b2 = np.array([0.0, 1.0, 0.0])
    P = np.outer(b1, b1) + np.outer(b2, b2)
    fr2 = GraphFrame.from_projection(P)
    assert np.max(np.abs(fr2.base_projection() - P)) < 1e-12
    x = np.array([[0.3, -0.2]])
    y = np.array([[0.7]])
    z = fr.embed(x, y)
    assert np.allclose(fr.base(z), x)
    assert np.allclose(fr.height(z), y)


def test_cylinder_containment_closed():
    S = np.diag([1.0, 1.0, 0.0])
    cyl = Cylinder.over(np.zeros(3), S, 1.0, 0.5)
    pts = np.array([
        [0.5, 0.0, 0.3],
        [1.5, 0.0, 0.0],
        [0.0, 0.0, 0.6],
        [1.0, 0.0, 0.5],
    ])
    assert cyl.contains(pts).tolist() == [True, False, False, True]


# -- mass -------------------------------------------------------------------


def test_mass_empty_varifold():
    V = DiscreteVarifold(3, 2, np.zeros((0, 3)), np.zeros((0, 3, 3)),
                         np.zeros(0))
    assert mass(V) == 0.0
    assert mass(V, Ball((0.0, 0.0, 0.0), 1.0)) == 0.0


def test_mass_plane_patch():
    spacing = 2.0 ** -5
    V = lattice_plane(spacing)
    r = 0.5
    target = unit_ball_measure(2) * r ** 2
    got = mass(V, Ball((0.0, 0.0, 0.0), r))
    assert abs(got - target) <= 4.0 * r * spacing
    # whole patch: exact lattice area
    assert mass(V) == pytest.approx(len(V) * spacing ** 2)


def test_mass_stacked_multiplicity():
    spacing = 2.0 ** -5
    eta = 0.01
    V1 = lattice_plane(spacing, height=eta)
    V2 = lattice_plane(spacing, height=-eta)
    V = DiscreteVarifold(
        3, 2,
        np.concatenate([V1.z, V2.z]),
        np.concatenate([V1.P, V2.P]),
        np.concatenate([V1.w, V2.w]),
    )
    r = 0.5
    target = 2.0 * unit_ball_measure(2) * r ** 2
    got = mass(V, Ball((0.0, 0.0, 0.0), r))
    assert abs(got - target) <= 8.0 * r * spacing


# -- first variation --------------------------------------------------------


def test_first_variation_constant_field_zero():
    V, _ = fibonacci_sphere(2000)
    assert first_variation(V, ConstField([0.3, -0.2, 0.1])) == 0.0


def test_first_variation_plane_stationary():
    spacing = 2.0 ** -5
    V = lattice_plane(spacing)
    g_norm = BumpVectorField((0.0, 0.0, 0.0), 0.5, (0.0, 0.0, 1.0))
    # normal direction: P c = 0 at every particle, exactly zero
    assert first_variation(V, g_norm) == 0.0
    g_tang = BumpVectorField((0.0, 0.0, 0.0), 0.5, (1.0, 0.0, 0.0))
    # lattice sum of the derivative of a smooth compact bump
    assert abs(first_variation(V, g_tang)) <= 1e-8


def test_first_variation_sphere_curvature():
    rho = 1.0
    V, nu = fibonacci_sphere(20000, rho)
    pole = np.array([0.0, 0.0, rho])
    for g in (
        BumpVectorField(pole, 0.8, (0.0, 0.0, 1.0)),
        RadialBumpField(pole, 0.8),
    ):
        lhs = first_variation(V, g)
        # delta V(g) = (m/rho) * int nu.g with nu the outward normal
        rhs = (2.0 / rho) * float(
            np.sum(V.w * np.sum(nu * g.value(V.z), axis=1))
        )
        assert abs(lhs - rhs) <= 0.02 * abs(rhs)


# -- mean curvature ---------------------------------------------------------


def test_mean_curvature_plane_floor():
    spacing = 2.0 ** -5
    V = lattice_plane(spacing)
    r = 0.5
    h, _ = mean_curvature_estimate(V, (0.0, 0.0, 0.0), r)
    assert np.linalg.norm(h) <= 10.0 * spacing / r ** 2


def test_mean_curvature_sphere():
    rho = 1.0
    V, _ = fibonacci_sphere(20000, rho)
    pole = np.array([0.0, 0.0, rho])
    h, resid = mean_curvature_estimate(V, pole, 0.6)
    mag = np.linalg.norm(h)
    assert abs(mag - 2.0 / rho) <= 0.05 * (2.0 / rho)
    inward = np.array([0.0, 0.0, -1.0])
    assert float(h @ inward) / mag >= math.cos(math.radians(5.0))
    assert resid < 0.2


def test_mean_curvature_cylinder():
    rho = 0.5
    V = cylinder_surface(rho, 0.02)
    at = np.array([rho, 0.0, 0.0])
    # fit radius small against rho: the constant-vector model averages
    # the rotating inward normal, shrinking |h| quadratically in r/rho
    h, _ = mean_curvature_estimate(V, at, 0.3)
    mag = np.linalg.norm(h)
    assert abs(mag - 1.0 / rho) <= 0.05 / rho
    inward = np.array([-1.0, 0.0, 0.0])
    assert float(h @ inward) / mag >= math.cos(math.radians(5.0))


def test_mean_curvature_insufficient_coverage():
    V = lattice_plane(2.0 ** -4)
    with pytest.raises(ValueError, match="insufficient test coverage"):
        mean_curvature_estimate(V, (50.0, 0.0, 0.0), 0.5)


# -- tilt excess ------------------------------------------------------------


def test_tilt_excess_zero_on_plane():
    V = lattice_plane(2.0 ** -4)
    T = np.diag([1.0, 1.0, 0.0])
    assert tilt_excess(V, (0.0, 0.0, 0.0), 0.5, T) == 0.0


def test_tilt_excess_graph_slope():
    eps = 0.01
    spacing = 2.0 ** -9
    V = line_graph(
        lambda x: eps * x ** 2, lambda x: 2.0 * eps * x, spacing
    )
    T = np.array([[1.0, 0.0], [0.0, 0.0]])
    for r in (0.2, 0.4):
        phi = tilt_excess(V, (0.0, 0.0), r, T)
        assert abs(phi - GRAPH_TILT_SLOPE * eps * r) <= 0.05 * eps * r
    phi1 = tilt_excess(V, (0.0, 0.0), 0.2, T)
    phi2 = tilt_excess(V, (0.0, 0.0), 0.4, T)
    assert abs(phi2 / phi1 - 2.0) <= 0.05


def test_tilt_excess_two_planes_exact():
    P1 = np.diag([1.0, 0.0])
    P2 = np.diag([0.0, 1.0])
    z = np.array([[0.25, 0.0], [-0.25, 0.0], [0.0, 0.25], [0.0, -0.5]])
    P = np.stack([P1, P1, P2, P2])
    w = np.array([0.125, 0.125, 0.25, 0.5])
    V = DiscreteVarifold(2, 1, z, P, w)
    phi = tilt_excess(V, (0.0, 0.0), 1.0, P1)
    other_mass = 0.25 + 0.5
    assert phi == math.sqrt(other_mass * float(np.sum((P1 - P2) ** 2)))


def test_tilt_minimizer_weighted_mean():
    V = crossing_lines(2.0 ** -6)
    a, r = (0.0, 0.0), 0.7
    T_star = tilt_minimizing_matrix(V, a, r)
    base = tilt_excess(V, a, r, T_star)
    rng = np.random.default_rng(3)
    cands = [np.diag([1.0, 0.0]), np.diag([0.0, 1.0]), np.eye(2) * 0.5]
    for _ in range(10):
        th = rng.uniform(0, math.pi)
        t = np.array([math.cos(th), math.sin(th)])
        cands.append(np.outer(t, t))
    for T in cands:
        assert base <= tilt_excess(V, a, r, T) + 1e-12


# -- good point filter ------------------------------------------------------


def test_good_point_filter_flat_plane():
    V = lattice_plane(2.0 ** -4)
    rep = good_point_filter(V, Ball((0.0, 0.0, 0.0), 0.5), 0.05, 0.4)
    assert not rep.bad.any()
    assert np.all(rep.variation_refined >= rep.variation_stat - 1e-15)


def test_good_point_filter_crossing_lines():
    spacing = 2.0 ** -7
    V = crossing_lines(spacing)
    ref = np.array([[1.0, 0.0], [0.0, 0.0]])
    rep = good_point_filter(
        V, Ball((0.0, 0.0), 0.8), 0.2, 0.3, reference=ref, scales=3
    )
    dist = np.linalg.norm(V.z[rep.indices], axis=1)
    on_ref_line = np.abs(V.z[rep.indices, 1]) < spacing / 2
    near = dist <= 0.05
    assert rep.bad[near].all()
    assert not rep.variation_fired.any()
    far_ref = on_ref_line & (dist >= 0.2)
    assert not rep.bad[far_ref].any()
    far_other = ~on_ref_line & (dist >= 0.2)
    assert rep.bad[far_other].all()


def test_good_point_filter_sphere_large_delta():
    V, _ = fibonacci_sphere(5000)
    rep = good_point_filter(
        V, Ball((0.0, 0.0, 1.0), 0.4), 20.0, 0.5, refine=False
    )
    assert not rep.bad.any()


# -- hypothesis checks ------------------------------------------------------


def test_lemma31_checks_plane():
    V = lattice_plane(2.0 ** -5, half=1.0)
    fr = GraphFrame.standard(3, 2)
    rep = check_lemma31_hypotheses(V, fr, 0.5, 1, (0.5, 0.5), 10.0)
    assert rep["all_pass"]
    assert abs(rep["lower"]["ratio"] - 1.0) <= 0.05
    V2 = lattice_plane(2.0 ** -5, weight_factor=2.0)
    rep2 = check_lemma31_hypotheses(V2, fr, 0.5, 1, (0.5, 0.5), 10.0)
    assert rep2["lower"]["pass"] and not rep2["upper"]["pass"]
    empty = DiscreteVarifold(3, 2, np.zeros((0, 3)), np.zeros((0, 3, 3)),
                             np.zeros(0))
    rep3 = check_lemma31_hypotheses(empty, fr, 0.5, 1, (0.5, 0.5), 10.0)
    assert not rep3["lower"]["pass"]
    assert not rep3["all_pass"]


# -- graph extraction -------------------------------------------------------


def u_smooth(x):
    return 0.1 * np.sin(2.0 * x[:, 0]) * np.cos(x[:, 1])


def du_smooth(x):
    return (
        0.2 * np.cos(2.0 * x[:, 0]) * np.cos(x[:, 1]),
        -0.1 * np.sin(2.0 * x[:, 0]) * np.sin(x[:, 1]),
    )


def lap_smooth(x):
    return -0.5 * np.sin(2.0 * x[:, 0]) * np.cos(x[:, 1])


def test_graph_extract_smooth_single_sheet():
    V = graph_varifold(u_smooth, du_smooth, 2.0 ** -6)
    fr = GraphFrame.standard(3, 2)
    ex = graph_extract(V, fr, None, L=0.9, Q_hint=1)
    assert ex.diagnostics["coverage"] >= 0.95
    assert ex.diagnostics["ambiguous_fraction"] <= 0.2
    dom = ex.g.domain
    nodes = dom.nodes().reshape(-1, 2)
    kf = ex.K.reshape(-1)
    err = np.abs(ex.g.values.reshape(-1)[kf] - u_smooth(nodes[kf]))
    assert np.max(err) <= 1e-3
    # tangent planes of the recovered graph vs exact normals; stay off
    # the K boundary where stencils touch the extension
    dg = weak_gradient(ex.g, 1)
    kf_in = _eroded_mask(ex.K, 1, box=True).reshape(-1) & kf
    sample = np.flatnonzero(kf_in & dg.mask.reshape(-1))[::37]
    worst = 0.0
    for idx in sample:
        x = nodes[idx]
        g1, g2 = du_smooth(x[None])
        t1 = np.array([1.0, 0.0, float(g1[0])])
        t2 = np.array([0.0, 1.0, float(g2[0])])
        A = np.stack([t1, t2], axis=1)
        q, _ = np.linalg.qr(A)
        P_exact = q @ q.T
        P_got = fr.tangent_projection(dg.values.reshape(-1, 1, 2)[idx])
        worst = max(worst, float(np.max(np.abs(P_got - P_exact))))
    assert worst <= math.sqrt(2.0) * math.sin(math.radians(5.0))
    # flux distribution matches the analytic curvature density
    alt = ex.T.alt_density
    amask = alt.mask.reshape(-1) & kf_in
    dens = alt.values.reshape(-1)[amask]
    assert np.max(np.abs(-dens - lap_smooth(nodes[amask]))) <= 0.05
    pts = ex.graph_points()
    assert pts.shape == (dom.node_count, 3)


def test_graph_extract_two_parallel_sheets():
    c = 0.4
    V = graph_varifold(u_smooth, du_smooth, 2.0 ** -6, heights=(0.0, c))
    fr = GraphFrame.standard(3, 2)
    ex = graph_extract(V, fr, None, L=0.9, Q_hint=2)
    assert ex.Q == 2
    mult = ex.diagnostics["multiplicity"]
    assert round(float(np.nanmedian(mult))) == 2
    assert ex.diagnostics["coverage"] >= 0.95
    dom = ex.g.domain
    nodes = dom.nodes().reshape(-1, 2)
    kf = ex.K.reshape(-1)
    err = np.abs(
        ex.g.values.reshape(-1)[kf] - (u_smooth(nodes[kf]) + c / 2.0)
    )
    assert np.max(err) <= 1e-3


def test_graph_extract_steep_graph_rejected():
    V = graph_varifold(
        lambda x: 2.0 * x[:, 0], lambda x: (np.full(len(x), 2.0),
                                            np.zeros(len(x))),
        2.0 ** -5,
    )
    fr = GraphFrame.standard(3, 2)
    try:
        ex = graph_extract(V, fr, None, L=0.5, Q_hint=1)
    except ValueError:
        return
    assert ex.diagnostics["coverage"] < 0.5


def test_graph_extract_ambiguity_error():
    spacing = 2.0 ** -5
    ax = lattice_axis(1.0, spacing)
    x = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
    ij = np.stack(np.meshgrid(np.arange(len(ax)), np.arange(len(ax)),
                              indexing="ij"), axis=-1).reshape(-1, 2)
    h = 0.3 * ((ij[:, 0] + ij[:, 1]) % 2)
    z = np.column_stack([x, h])
    P = np.zeros((3, 3))
    P[0, 0] = P[1, 1] = 1.0
    V = DiscreteVarifold(3, 2, z, np.broadcast_to(P, (len(z), 3, 3)),
                         np.full(len(z), spacing ** 2))
    with pytest.raises(ValueError, match="ambiguity"):
        graph_extract(V, GraphFrame.standard(3, 2), None, L=0.9, Q_hint=1)


def test_graph_extract_recovers_under_noise():
    noise = 5e-4
    V = graph_varifold(u_smooth, du_smooth, 2.0 ** -6, noise=noise)
    ex = graph_extract(V, GraphFrame.standard(3, 2), None, L=0.9, Q_hint=1)
    dom = ex.g.domain
    nodes = dom.nodes().reshape(-1, 2)
    kf = ex.K.reshape(-1)
    err = np.abs(ex.g.values.reshape(-1)[kf] - u_smooth(nodes[kf]))
    assert np.max(err) <= 2.0 * noise + 1e-3


# -- tilt vs graph transfer -------------------------------------------------


def test_tilt_vs_graph_flat_plane():
    V = lattice_plane(2.0 ** -5)
    ex = graph_extract(V, GraphFrame.standard(3, 2), None, L=0.9, Q_hint=1)
    rep = tilt_vs_graph_check(V, ex, [(0.0, 0.0)], [0.3, 0.15])
    assert rep["max_ratio"] == 0.0


def test_tilt_vs_graph_smooth():
    V = graph_varifold(u_smooth, du_smooth, 2.0 ** -6)
    ex = graph_extract(V, GraphFrame.standard(3, 2), None, L=0.9, Q_hint=1)
    pts = [(0.0, 0.0), (0.3, -0.2), (-0.4, 0.1)]
    rep = tilt_vs_graph_check(V, ex, pts, [0.3, 0.15])
    assert np.isfinite(rep["graph_side"]).all()
    assert rep["max_ratio"] <= 1.2


def test_tilt_vs_graph_two_sheets():
    V = graph_varifold(u_smooth, du_smooth, 2.0 ** -6, heights=(0.0, 0.4))
    ex = graph_extract(V, GraphFrame.standard(3, 2), None, L=0.9, Q_hint=2)
    rep = tilt_vs_graph_check(V, ex, [(0.0, 0.0), (0.25, 0.25)], [0.3, 0.15])
    assert rep["max_ratio"] <= 1.2


# -- file format ------------------------------------------------------------


def test_save_load_roundtrip(tmp_path):
    V = cylinder_surface(0.5, 0.1, half=0.3)
    path = tmp_path / "particles.jsonl"
    save_varifold(path, V)
    W = load_varifold(path)
    assert W.n == 3 and W.m == 2
    assert np.allclose(W.z, V.z) and np.allclose(W.P, V.P)
    assert np.allclose(W.w, V.w)


def test_load_basis_form_and_validation(tmp_path):
    path = tmp_path / "basis.jsonl"
    rec = {"z": [0.0, 0.0, 1.0], "basis": [[2.0, 0.0, 0.0],
                                           [0.0, 3.0, 0.0]], "w": 0.5}
    with open(path, "w") as fh:
        fh.write(json.dumps(rec) + "\n")
    V = load_varifold(path)
    assert np.allclose(V.P[0], np.diag([1.0, 1.0, 0.0]))
    bad = tmp_path / "bad.jsonl"
    with open(bad, "w") as fh:
        fh.write(json.dumps({"z": [0.0, 0.0], "P": [1.0, 0.3, 0.3, 0.0],
                             "w": 1.0}) + "\n")
    with pytest.raises(ValueError, match="not projections"):
        load_varifold(bad)
    missing = tmp_path / "missing.jsonl"
    with open(missing, "w") as fh:
        fh.write(json.dumps({"z": [0.0, 0.0], "w": 1.0}) + "\n")
    with pytest.raises(ValueError, match="missing P or basis"):
        load_varifold(missing)
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(ValueError, match="empty particle file"):
        load_varifold(empty)
