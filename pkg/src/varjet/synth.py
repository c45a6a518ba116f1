"""Synthetic particle corpora and sampled fields with exact ground truth.

Every generator returns its data object together with a GroundTruth
carrying closed-form tangent projections, mean curvature vectors, and
(for field corpora) 2-jets, so estimator output can be scored against
values exact to machine precision.  Particles sit on low-discrepancy
lattices in parameter space rather than i.i.d. draws; the only
randomness is a seeded lattice shift, recorded in the output, so equal
seeds regenerate bit-identical corpora.

Mean curvature sign convention: normals are oriented outward (away from
the enclosed region, or upward for graphs), and curvature vectors point
the other way, so a sphere's h aims at its center with |h| = m / rho.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .fields import SampledField, cube_domain
from .varifold import DiscreteVarifold, save_varifold

__all__ = [
    "GroundTruth",
    "gen_graph_varifold",
    "gen_special",
    "field_example",
    "write_corpus",
    "read_ground_truth",
]

SPECIAL_KINDS = (
    "sphere", "cylinder", "crossing_planes", "tangent_touch",
    "c1alpha_model",
)

# real root of x^3 = x + 1; its inverse powers drive the rank-1 lattice
_PLASTIC = 1.324717957244746


def _kronecker_lattice(n_pts, dim, shift):
    g = 1.0 / _PLASTIC ** np.arange(1, dim + 1)
    i = np.arange(n_pts, dtype=float)[:, None]
    return np.mod(np.asarray(shift, dtype=float) + i * g, 1.0)


@dataclass
class GroundTruth:
    """Exact per-particle (or per-node) reference data.

    ``tangent`` holds (N, n, n) projection matrices and ``curvature``
    (N, n) mean curvature vectors; ``has_tangent`` is False on particles
    where no single plane exists (e.g. on the intersection line of two
    crossing planes).  Field corpora fill ``jet`` with exact value,
    gradient, and hessian arrays per grid node instead.  ``piece``
    labels the component each particle came from in composite corpora.
    """

    seed: int
    meta: dict
    tangent: np.ndarray = None
    curvature: np.ndarray = None
    has_tangent: np.ndarray = None
    piece: np.ndarray = None
    jet: dict = None

    def tangent_error(self, V):
        """Max absolute deviation of the varifold's planes from truth."""
        return float(np.max(np.abs(V.P - self.tangent)))


def _graph_geometry(du, d2u):
    """Exact projection and curvature vector of a codimension-1 graph.

    du (N, m), d2u (N, m, m).  With W^2 = 1 + |du|^2 and upward normal
    nu = (-du, 1)/W, the curvature vector is kappa nu where
    kappa = tr(d2u)/W - du.d2u.du / W^3.
    """
    du = np.asarray(du, dtype=float)
    d2u = np.asarray(d2u, dtype=float)
    n_pts, m = du.shape
    w2 = 1.0 + np.sum(du * du, axis=1)
    w = np.sqrt(w2)
    nu = np.concatenate([-du, np.ones((n_pts, 1))], axis=1) / w[:, None]
    P = np.eye(m + 1)[None] - nu[:, :, None] * nu[:, None, :]
    kappa = (np.trace(d2u, axis1=1, axis2=2) / w
             - np.einsum("pi,pij,pj->p", du, d2u, du) / w ** 3)
    return P, kappa[:, None] * nu, w


def gen_graph_varifold(u, region, density, Q=1, noise=None, offset=0.2,
                       seed=0):
    """Multiplicity-Q stack of graphs of a scalar 2-jet over a box.

    ``u`` is a triple of callables (value, gradient, hessian) mapping
    (N, m) base points to (N,), (N, m), (N, m, m); ``region`` a sequence
    of (lo, hi) per base axis; ``density`` particles per unit base
    volume, so each particle weighs area element / density.  Sheet j
    sits at height value + j*offset; ``noise``, when given, adds a
    seeded Gaussian of that scale to the height coordinate only, and
    the attached ground truth stays the exact closed form at the
    unperturbed base point.
    """
    value, grad, hess = u
    region = np.asarray(region, dtype=float)
    if region.ndim != 2 or region.shape[1] != 2:
        raise ValueError("region must be a sequence of (lo, hi) pairs")
    m = len(region)
    lo, hi = region[:, 0], region[:, 1]
    vol = float(np.prod(hi - lo))
    n_base = max(int(round(density * vol)), 1)
    rng = np.random.default_rng(seed)
    x = lo + _kronecker_lattice(n_base, m, rng.random(m)) * (hi - lo)
    val = np.asarray(value(x), dtype=float).reshape(n_base)
    P, h, w_el = _graph_geometry(
        np.asarray(grad(x), dtype=float).reshape(n_base, m),
        np.asarray(hess(x), dtype=float).reshape(n_base, m, m),
    )
    z = np.concatenate([
        np.concatenate([x, (val + j * offset)[:, None]], axis=1)
        for j in range(Q)
    ])
    P_all = np.concatenate([P] * Q)
    h_all = np.concatenate([h] * Q)
    w = np.concatenate([w_el] * Q) / density
    if noise is not None and noise > 0:
        z[:, m] += rng.normal(0.0, noise, len(z))
    V = DiscreteVarifold(m + 1, m, z, P_all, w)
    gt = GroundTruth(
        seed=seed,
        meta={"kind": "graph", "m": m, "Q": Q, "offset": float(offset),
              "density": float(density),
              "noise": float(noise) if noise else 0.0,
              "region": region.tolist()},
        tangent=P_all, curvature=h_all,
        has_tangent=np.ones(len(z), dtype=bool),
    )
    return V, gt


def _fibonacci_directions(n_pts, shift):
    i = np.arange(n_pts)
    zc = 1.0 - 2.0 * (i + 0.5) / n_pts
    ang = math.pi * (3.0 - math.sqrt(5.0)) * i + 2.0 * math.pi * shift
    rr = np.sqrt(np.clip(1.0 - zc ** 2, 0.0, None))
    return np.stack([rr * np.cos(ang), rr * np.sin(ang), zc], axis=1)


def _gen_sphere(rho=1.0, n_particles=20000, center=(0.0, 0.0, 0.0),
                seed=0):
    center = np.asarray(center, dtype=float)
    rng = np.random.default_rng(seed)
    nu = _fibonacci_directions(n_particles, rng.random())
    P = np.eye(3)[None] - nu[:, :, None] * nu[:, None, :]
    w = np.full(n_particles, 4.0 * math.pi * rho ** 2 / n_particles)
    V = DiscreteVarifold(3, 2, center + rho * nu, P, w)
    gt = GroundTruth(
        seed=seed,
        meta={"kind": "sphere", "rho": float(rho),
              "center": center.tolist(), "h_mag": 2.0 / rho},
        tangent=P, curvature=(-2.0 / rho) * nu,
        has_tangent=np.ones(n_particles, dtype=bool),
    )
    return V, gt


def _gen_cylinder(rho=1.0, half=1.0, n_particles=20000, seed=0):
    rng = np.random.default_rng(seed)
    par = _kronecker_lattice(n_particles, 2, rng.random(2))
    theta = 2.0 * math.pi * par[:, 0]
    s = (2.0 * par[:, 1] - 1.0) * half
    nu = np.stack([np.cos(theta), np.sin(theta), np.zeros_like(theta)],
                  axis=1)
    z = np.stack([rho * np.cos(theta), rho * np.sin(theta), s], axis=1)
    P = np.eye(3)[None] - nu[:, :, None] * nu[:, None, :]
    area = 2.0 * math.pi * rho * 2.0 * half
    w = np.full(n_particles, area / n_particles)
    V = DiscreteVarifold(3, 2, z, P, w)
    gt = GroundTruth(
        seed=seed,
        meta={"kind": "cylinder", "rho": float(rho), "half": float(half),
              "h_mag": 1.0 / rho},
        tangent=P, curvature=(-1.0 / rho) * nu,
        has_tangent=np.ones(n_particles, dtype=bool),
    )
    return V, gt


def _gen_crossing_planes(half=1.0, density=4096.0, angle=math.pi / 2,
                         line_tol=None, seed=0):
    """Two unit-density planes meeting along the y-axis.

    Particles within ``line_tol`` of the intersection line (default
    half a mean lattice cell) are flagged has_tangent = False: the
    union has no single plane there.
    """
    rng = np.random.default_rng(seed)
    n_pts = max(int(round(density * (2.0 * half) ** 2)), 1)
    if line_tol is None:
        line_tol = 0.5 / math.sqrt(density)
    x = (2.0 * _kronecker_lattice(n_pts, 2, rng.random(2)) - 1.0) * half
    zA = np.concatenate([x, np.zeros((n_pts, 1))], axis=1)
    PA = np.zeros((3, 3))
    PA[0, 0] = PA[1, 1] = 1.0
    c, s = math.cos(angle), math.sin(angle)
    R = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    zB = zA @ R.T
    PB = R @ PA @ R.T
    z = np.vstack([zA, zB])
    P = np.concatenate([np.broadcast_to(PA, (n_pts, 3, 3)),
                        np.broadcast_to(PB, (n_pts, 3, 3))])
    w = np.full(2 * n_pts, 1.0 / density)
    on_line = np.abs(np.concatenate([x[:, 0], x[:, 0]])) <= line_tol
    V = DiscreteVarifold(3, 2, z, P, w)
    gt = GroundTruth(
        seed=seed,
        meta={"kind": "crossing_planes", "half": float(half),
              "angle": float(angle), "line_tol": float(line_tol)},
        tangent=P, curvature=np.zeros((2 * n_pts, 3)),
        has_tangent=~on_line,
        piece=np.repeat([0, 1], n_pts),
    )
    return V, gt


def _gen_tangent_touch(rho=1.0, half=2.0, density=4000.0, seed=0):
    """Plane with a sphere resting tangentially on it at the origin.

    Piece 0 is the plane z = 0 over [-half, half]^2 (h = 0), piece 1
    the sphere of radius rho centered at (0, 0, rho), so both share the
    tangent plane at the touch point.  Weights match a single uniform
    sampling density across both pieces.
    """
    rng = np.random.default_rng(seed)
    n_pl = max(int(round(density * (2.0 * half) ** 2)), 1)
    x = (2.0 * _kronecker_lattice(n_pl, 2, rng.random(2)) - 1.0) * half
    z_pl = np.concatenate([x, np.zeros((n_pl, 1))], axis=1)
    P_pl = np.zeros((3, 3))
    P_pl[0, 0] = P_pl[1, 1] = 1.0

    n_sp = max(int(round(density * 4.0 * math.pi * rho ** 2)), 1)
    nu = _fibonacci_directions(n_sp, rng.random())
    z_sp = np.array([0.0, 0.0, rho]) + rho * nu
    P_sp = np.eye(3)[None] - nu[:, :, None] * nu[:, None, :]

    z = np.vstack([z_pl, z_sp])
    P = np.concatenate([np.broadcast_to(P_pl, (n_pl, 3, 3)), P_sp])
    w = np.full(n_pl + n_sp, 1.0 / density)
    h = np.concatenate([np.zeros((n_pl, 3)), (-2.0 / rho) * nu])
    V = DiscreteVarifold(3, 2, z, P, w)
    gt = GroundTruth(
        seed=seed,
        meta={"kind": "tangent_touch", "rho": float(rho),
              "half": float(half), "touch_point": [0.0, 0.0, 0.0],
              "plane_h_mag": 0.0, "sphere_h_mag": 2.0 / rho},
        tangent=P, curvature=h,
        has_tangent=np.ones(n_pl + n_sp, dtype=bool),
        piece=np.repeat([0, 1], [n_pl, n_sp]),
    )
    return V, gt


def _gen_c1alpha_model(alpha=0.5, spacing=2.0 ** -12, half=1.0, seed=0):
    """m = 1 graph of |x|^(1+alpha): C^1 with Holder-alpha derivative.

    The rough point is the origin; the curvature magnitude blows up
    like |x|^(alpha-1) there, and the particle at x = 0 (if the lattice
    hits it) carries curvature 0 as a sentinel.
    """
    x = np.arange(-half, half + spacing / 2, spacing)
    ax = np.abs(x)
    u = ax ** (1.0 + alpha)
    du = (1.0 + alpha) * np.sign(x) * ax ** alpha
    d2u = np.where(ax > 0, (1.0 + alpha) * alpha
                   * np.maximum(ax, 1e-300) ** (alpha - 1.0), 0.0)
    P, h, w_el = _graph_geometry(du[:, None], d2u[:, None, None])
    V = DiscreteVarifold(2, 1, np.stack([x, u], axis=1), P,
                         w_el * spacing)
    gt = GroundTruth(
        seed=seed,
        meta={"kind": "c1alpha_model", "alpha": float(alpha),
              "spacing": float(spacing), "half": float(half),
              "model_point": [0.0, 0.0]},
        tangent=P, curvature=h,
        has_tangent=np.ones(len(x), dtype=bool),
    )
    return V, gt


_SPECIAL = {
    "sphere": _gen_sphere,
    "cylinder": _gen_cylinder,
    "crossing_planes": _gen_crossing_planes,
    "tangent_touch": _gen_tangent_touch,
    "c1alpha_model": _gen_c1alpha_model,
}


def gen_special(kind, **params):
    """Named corpora with exact ground truth; see SPECIAL_KINDS."""
    if kind not in _SPECIAL:
        raise ValueError(
            f"unknown kind {kind!r}; choose from {', '.join(SPECIAL_KINDS)}"
        )
    return _SPECIAL[kind](**params)


_FIELD_EXAMPLES = ("trig_quartic", "harmonic", "quadratic")


def field_example(name, spacing=2.0 ** -5, half=1.0):
    """Closed-form scalar fields on [-half, half]^2 with exact 2-jets.

    Returns (SampledField, GroundTruth) where the ground truth ``jet``
    dict holds per-node value, gradient, and hessian arrays.
    """
    dom = cube_domain(2, radius=half, spacing=spacing)
    pts = dom.nodes().reshape(-1, 2)
    x0, x1 = pts[:, 0], pts[:, 1]
    if name == "trig_quartic":
        r2 = x0 ** 2 + x1 ** 2
        val = np.sin(x0) * np.cos(x1) + 0.1 * r2 ** 2
        g = np.stack([np.cos(x0) * np.cos(x1) + 0.4 * r2 * x0,
                      -np.sin(x0) * np.sin(x1) + 0.4 * r2 * x1], axis=1)
        hess = np.empty((len(pts), 2, 2))
        hess[:, 0, 0] = -np.sin(x0) * np.cos(x1) + 0.4 * (r2 + 2 * x0 ** 2)
        hess[:, 1, 1] = -np.sin(x0) * np.cos(x1) + 0.4 * (r2 + 2 * x1 ** 2)
        hess[:, 0, 1] = hess[:, 1, 0] = (
            -np.cos(x0) * np.sin(x1) + 0.8 * x0 * x1
        )
    elif name == "harmonic":
        val = x0 ** 3 - 3.0 * x0 * x1 ** 2
        g = np.stack([3.0 * (x0 ** 2 - x1 ** 2), -6.0 * x0 * x1], axis=1)
        hess = np.empty((len(pts), 2, 2))
        hess[:, 0, 0] = 6.0 * x0
        hess[:, 1, 1] = -6.0 * x0
        hess[:, 0, 1] = hess[:, 1, 0] = -6.0 * x1
    elif name == "quadratic":
        val = 0.5 * (x0 ** 2 + x1 ** 2)
        g = pts.copy()
        hess = np.broadcast_to(np.eye(2), (len(pts), 2, 2)).copy()
    else:
        raise ValueError(
            f"unknown field example {name!r}; "
            f"choose from {', '.join(_FIELD_EXAMPLES)}"
        )
    f = SampledField(dom, val.reshape(dom.shape + (1,)))
    gt = GroundTruth(
        seed=0,
        meta={"kind": "field", "name": name, "spacing": float(spacing),
              "half": float(half)},
        jet={"value": val, "gradient": g, "hessian": hess},
    )
    return f, gt


def write_corpus(particle_path, truth_path, V, gt):
    """Particle JSON-lines plus the parallel ground-truth file.

    The truth file opens with a header record carrying the seed and
    generator metadata, then one record per particle with the exact
    plane, curvature vector, tangent flag, and (when present) piece
    label.
    """
    save_varifold(particle_path, V)
    with open(truth_path, "w") as fh:
        fh.write(json.dumps({"seed": int(gt.seed), "meta": gt.meta}) + "\n")
        for k in range(len(V)):
            rec = {
                "P": [float(v) for v in gt.tangent[k].reshape(-1)],
                "h": [float(v) for v in gt.curvature[k]],
                "ok": bool(gt.has_tangent[k]),
            }
            if gt.piece is not None:
                rec["piece"] = int(gt.piece[k])
            fh.write(json.dumps(rec) + "\n")


def read_ground_truth(path):
    with open(path) as fh:
        lines = [json.loads(s) for s in fh if s.strip()]
    if not lines or "meta" not in lines[0]:
        raise ValueError("ground-truth file missing header record")
    head, rows = lines[0], lines[1:]
    n = int(round(math.sqrt(len(rows[0]["P"])))) if rows else 0
    piece = None
    if rows and "piece" in rows[0]:
        piece = np.array([r["piece"] for r in rows], dtype=int)
    return GroundTruth(
        seed=head["seed"], meta=head["meta"],
        tangent=np.array([r["P"] for r in rows]).reshape(-1, n, n),
        curvature=np.array([r["h"] for r in rows]),
        has_tangent=np.array([r["ok"] for r in rows], dtype=bool),
        piece=piece,
    )
