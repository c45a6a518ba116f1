"""Generator ground truth against closed forms, determinism, and the
corpus file format."""

import math

import numpy as np
import pytest

from varjet.synth import (
    field_example,
    gen_graph_varifold,
    gen_special,
    read_ground_truth,
    write_corpus,
)
from varjet.varifold import load_varifold, mean_curvature_estimate

FLAT = (
    lambda x: np.zeros(len(x)),
    lambda x: np.zeros_like(x),
    lambda x: np.zeros((len(x), x.shape[1], x.shape[1])),
)

BOX = [(-1.0, 1.0), (-1.0, 1.0)]


def sine_jet(eps):
    def hess(x):
        out = np.zeros((len(x), 2, 2))
        out[:, 0, 0] = -eps * np.sin(x[:, 0])
        return out

    return (
        lambda x: eps * np.sin(x[:, 0]),
        lambda x: np.stack(
            [eps * np.cos(x[:, 0]), np.zeros(len(x))], axis=1),
        hess,
    )


def projection_residuals(P, m):
    sym = np.max(np.abs(P - np.swapaxes(P, 1, 2)))
    idem = np.max(np.abs(np.einsum("pij,pjk->pik", P, P) - P))
    tr = np.max(np.abs(np.trace(P, axis1=1, axis2=2) - m))
    return max(sym, idem, tr)


def test_flat_graph_truth():
    V, gt = gen_graph_varifold(FLAT, BOX, density=2500.0)
    assert np.all(gt.curvature == 0.0)
    assert np.all(V.z[:, 2] == 0.0)
    assert np.all(V.w == 1.0 / 2500.0)
    assert V.total_mass() == pytest.approx(4.0, rel=1e-9)
    assert gt.tangent_error(V) == 0.0
    assert projection_residuals(gt.tangent, 2) <= 1e-12


def test_sine_graph_matches_curvature_formula():
    eps = 0.3
    V, gt = gen_graph_varifold(sine_jet(eps), BOX, density=400.0)
    x0 = V.z[:, 0]
    expected = np.abs(eps * np.sin(x0)) / (
        1.0 + eps ** 2 * np.cos(x0) ** 2) ** 1.5
    assert np.linalg.norm(gt.curvature, axis=1) == pytest.approx(
        expected, abs=1e-12)
    # curvature is normal to the attached plane
    tang = np.einsum("pij,pj->pi", gt.tangent, gt.curvature)
    assert np.max(np.abs(tang)) <= 1e-12


def test_stacked_graph_offsets():
    V, gt = gen_graph_varifold(sine_jet(0.1), BOX, density=100.0, Q=2,
                               offset=0.3)
    n = len(V) // 2
    assert np.all(V.z[n:, :2] == V.z[:n, :2])
    assert V.z[n:, 2] - V.z[:n, 2] == pytest.approx(0.3, abs=1e-15)
    assert np.all(gt.tangent[n:] == gt.tangent[:n])
    # the two-sheet center sits offset/2 above the lower sheet
    center = 0.5 * (V.z[:n, 2] + V.z[n:, 2])
    assert center - V.z[:n, 2] == pytest.approx(0.15, abs=1e-15)


def test_graph_seed_controls_noise_and_placement():
    a1, _ = gen_graph_varifold(FLAT, BOX, 200.0, noise=1e-3, seed=7)
    a2, _ = gen_graph_varifold(FLAT, BOX, 200.0, noise=1e-3, seed=7)
    b, _ = gen_graph_varifold(FLAT, BOX, 200.0, noise=1e-3, seed=8)
    assert np.array_equal(a1.z, a2.z)
    assert not np.array_equal(a1.z, b.z)
    assert np.max(np.abs(a1.z[:, 2])) < 1e-2


def test_graph_region_validation():
    with pytest.raises(ValueError, match="lo, hi"):
        gen_graph_varifold(FLAT, (0.0, 1.0), 100.0)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="unknown kind"):
        gen_special("torus")


@pytest.mark.parametrize("kind,params", [
    ("sphere", {"n_particles": 4000}),
    ("cylinder", {"n_particles": 4000}),
    ("crossing_planes", {"density": 900.0}),
    ("tangent_touch", {"density": 400.0}),
    ("c1alpha_model", {"spacing": 2.0 ** -8}),
])
def test_special_truth_is_projection_exact(kind, params):
    V, gt = gen_special(kind, **params)
    assert gt.tangent_error(V) == 0.0
    assert projection_residuals(gt.tangent, V.m) <= 1e-12
    # curvature is always normal to the plane
    tang = np.einsum("pij,pj->pi", gt.tangent, gt.curvature)
    assert np.max(np.abs(tang)) <= 1e-12


def test_sphere_truth_and_estimate():
    V, gt = gen_special("sphere", rho=0.8, n_particles=40000)
    mags = np.linalg.norm(gt.curvature, axis=1)
    assert mags == pytest.approx(2.0 / 0.8, abs=1e-12)
    # points at the center
    inward = np.einsum("pi,pi->p", gt.curvature, V.z)
    assert np.all(inward < 0)
    pole = np.array([0.0, 0.0, 0.8])
    h, resid = mean_curvature_estimate(V, pole, 0.25)
    truth = gt.curvature[np.argmin(np.linalg.norm(V.z - pole, axis=1))]
    assert np.linalg.norm(h - truth) <= 0.05 * np.linalg.norm(truth)


def test_cylinder_truth():
    V, gt = gen_special("cylinder", rho=0.5, n_particles=3000)
    assert np.linalg.norm(gt.curvature, axis=1) == pytest.approx(
        2.0, abs=1e-12)
    # the axis direction lies in every tangent plane
    axis = np.array([0.0, 0.0, 1.0])
    assert np.max(np.abs(
        np.einsum("pij,j->pi", gt.tangent, axis) - axis)) <= 1e-12


def test_crossing_planes_mark_the_line():
    V, gt = gen_special("crossing_planes", density=2500.0)
    assert np.all(gt.curvature == 0.0)
    marked = ~gt.has_tangent
    assert marked.any()
    assert marked.mean() < 0.05
    # marked particles hug the y-axis, unmarked ones keep their distance
    d_line = np.linalg.norm(V.z[:, [0, 2]], axis=1)
    tol = gt.meta["line_tol"]
    assert np.max(d_line[marked]) <= tol + 1e-12
    assert np.min(d_line[~marked]) > tol


def test_tangent_touch_pieces():
    V, gt = gen_special("tangent_touch", rho=1.0, density=400.0)
    plane = gt.piece == 0
    sphere = gt.piece == 1
    assert np.all(gt.curvature[plane] == 0.0)
    assert np.linalg.norm(
        gt.curvature[sphere], axis=1) == pytest.approx(2.0, abs=1e-12)
    assert np.all(V.z[plane, 2] == 0.0)
    assert np.linalg.norm(
        V.z[sphere] - [0, 0, 1], axis=1) == pytest.approx(1.0, abs=1e-12)
    # the sphere rests on the plane: it reaches z = 0 but never below
    assert np.min(V.z[sphere, 2]) >= 0.0
    assert np.min(np.linalg.norm(V.z[sphere], axis=1)) < 0.1
    assert np.all(V.w == V.w[0])


def test_c1alpha_sentinel_and_slope():
    V, gt = gen_special("c1alpha_model", alpha=0.5, spacing=2.0 ** -6)
    at0 = np.flatnonzero(np.all(V.z == 0.0, axis=1))
    assert len(at0) == 1
    assert np.all(gt.curvature[at0] == 0.0)
    x = V.z[:, 0]
    mags = np.linalg.norm(gt.curvature, axis=1)
    nz = x != 0
    expected = 0.75 * np.abs(x[nz]) ** -0.5 / (
        1.0 + 2.25 * np.abs(x[nz])) ** 1.5
    assert mags[nz] == pytest.approx(expected, rel=1e-10)


def test_regeneration_is_bit_identical():
    a, gta = gen_special("sphere", n_particles=1000, seed=5)
    b, gtb = gen_special("sphere", n_particles=1000, seed=5)
    c, _ = gen_special("sphere", n_particles=1000, seed=6)
    assert np.array_equal(a.z, b.z) and np.array_equal(a.w, b.w)
    assert gta.seed == gtb.seed == 5
    assert not np.array_equal(a.z, c.z)


def test_field_example_jets():
    f, gt = field_example("quadratic", spacing=2.0 ** -4)
    pts = f.domain.nodes().reshape(-1, 2)
    assert gt.jet["value"] == pytest.approx(
        0.5 * np.sum(pts ** 2, axis=1), abs=1e-15)
    assert np.array_equal(gt.jet["gradient"], pts)

    fh, gth = field_example("harmonic", spacing=2.0 ** -4)
    assert np.max(np.abs(np.trace(
        gth.jet["hessian"], axis1=1, axis2=2))) == 0.0

    ft, gtt = field_example("trig_quartic", spacing=2.0 ** -5)
    assert ft.values.shape == ft.domain.shape + (1,)
    # closed-form jet agrees with centered differences of the values
    vals = ft.values[..., 0]
    h = 2.0 ** -5
    g0 = (vals[2:, 1:-1] - vals[:-2, 1:-1]) / (2 * h)
    grad = gtt.jet["gradient"].reshape(vals.shape + (2,))
    assert np.max(np.abs(g0 - grad[1:-1, 1:-1, 0])) <= 5e-3
    h11 = (vals[1:-1, 2:] - 2 * vals[1:-1, 1:-1] + vals[1:-1, :-2]) / h ** 2
    hess = gtt.jet["hessian"].reshape(vals.shape + (2, 2))
    assert np.max(np.abs(h11 - hess[1:-1, 1:-1, 1, 1])) <= 5e-3

    with pytest.raises(ValueError, match="unknown field example"):
        field_example("sawtooth")


def test_corpus_roundtrip(tmp_path):
    V, gt = gen_special("tangent_touch", density=100.0, seed=3)
    pp = tmp_path / "particles.jsonl"
    tp = tmp_path / "truth.jsonl"
    write_corpus(pp, tp, V, gt)
    V2 = load_varifold(pp, m=2)
    gt2 = read_ground_truth(tp)
    assert np.array_equal(V2.z, V.z)
    assert np.array_equal(V2.P, V.P)
    assert np.array_equal(V2.w, V.w)
    assert np.array_equal(gt2.tangent, gt.tangent)
    assert np.array_equal(gt2.curvature, gt.curvature)
    assert np.array_equal(gt2.piece, gt.piece)
    assert gt2.seed == 3
    assert gt2.meta["kind"] == "tangent_touch"

    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"P": [1.0], "h": [0.0], "ok": true}\n')
    with pytest.raises(ValueError, match="header"):
        read_ground_truth(bad)
