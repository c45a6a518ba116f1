"""Discrete m-dimensional varifolds in R^n as weighted plane-particles.

A varifold is a list of (position, tangent-plane projection, weight)
triples.  Mass, first variation (tangential divergence), mean-curvature
least squares, tilt-excess, the good/bad point filter, and the graph
extraction (sheet clustering over a base frame, Lipschitz gating, small-
Lip extension, nonparametric-area flux distribution) operate on it.

Region containment for measures uses closed conditions, matching the
closed balls and cylinders the estimates are stated with; the boundary
is sampling-measure zero for the corpora here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial import cKDTree

from .fields import (
    Ball,
    DistributionRep,
    GridDomain,
    SampledField,
    _eroded_mask,
    lp_seminorm,
    unit_ball_measure,
    weak_gradient,
)
from .elliptic import apply_EL, area_integrand

__all__ = [
    "DiscreteVarifold",
    "Cylinder",
    "GraphFrame",
    "GraphExtraction",
    "BumpVectorField",
    "RadialBumpField",
    "mass",
    "first_variation",
    "mean_curvature_estimate",
    "tilt_excess",
    "tilt_minimizing_matrix",
    "GoodPointReport",
    "good_point_filter",
    "check_lemma31_hypotheses",
    "graph_extract",
    "tilt_vs_graph_check",
    "save_varifold",
    "load_varifold",
]


def _bump(t):
    t = np.asarray(t, dtype=float)
    t2 = np.clip(t * t, 0.0, 1.0)
    return np.where(
        np.abs(t) < 1.0,
        np.exp(1.0 - 1.0 / np.maximum(1.0 - t2, 1e-300)),
        0.0,
    )


def _bump_radial_slope(t):
    """phi'(t)/t, finite at 0: -2 phi(t) / (1-t^2)^2."""
    t = np.asarray(t, dtype=float)
    t2 = np.clip(t * t, 0.0, 1.0)
    denom = np.maximum((1.0 - t2) ** 2, 1e-300)
    return np.where(np.abs(t) < 1.0, -2.0 * _bump(t) / denom, 0.0)


class DiscreteVarifold:
    """Weighted plane-particle measure: sum w_i delta_(z_i, im P_i)."""

    def __init__(self, n, m, z, P, w, validate=True):
        self.n = int(n)
        self.m = int(m)
        self.z = np.atleast_2d(np.asarray(z, dtype=float))
        self.P = np.asarray(P, dtype=float)
        if self.P.ndim == 2:
            self.P = self.P[None]
        self.w = np.atleast_1d(np.asarray(w, dtype=float))
        if validate and len(self.z):
            sym = np.max(np.abs(self.P - np.swapaxes(self.P, -1, -2)))
            idem = np.max(np.abs(
                np.einsum("pij,pjk->pik", self.P, self.P) - self.P
            ))
            tr = np.max(np.abs(np.einsum("pii->p", self.P) - self.m))
            if sym > 1e-10 or idem > 1e-10:
                raise ValueError("particle planes are not projections")
            if tr > 1e-8:
                raise ValueError("particle plane dimension mismatch")
            if np.any(self.w <= 0):
                raise ValueError("nonpositive particle weight")
        self._tree = None

    def __len__(self):
        return len(self.z)

    @property
    def tree(self):
        if self._tree is None:
            self._tree = cKDTree(self.z)
        return self._tree

    def select(self, region):
        """Boolean particle mask for a region (None selects everything)."""
        if region is None:
            return np.ones(len(self), dtype=bool)
        return _region_contains(region, self.z)

    def total_mass(self):
        return float(np.sum(self.w))

    def subset(self, mask):
        return DiscreteVarifold(
            self.n, self.m, self.z[mask], self.P[mask], self.w[mask],
            validate=False,
        )


@dataclass(frozen=True)
class Cylinder:
    """C(S, a, r, h): axis-plane slab, closed on both projections."""

    center: tuple
    axis_projection: tuple
    radius: float
    height: float

    @classmethod
    def over(cls, center, projection, radius, height):
        proj = np.asarray(projection, dtype=float)
        return cls(
            tuple(float(c) for c in np.asarray(center, dtype=float)),
            tuple(map(tuple, proj)),
            float(radius),
            float(height),
        )

    def contains(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        a = np.asarray(self.center)
        P = np.asarray(self.axis_projection)
        d = pts - a
        tang = d @ P.T
        perp = d - tang
        return (
            np.linalg.norm(tang, axis=1) <= self.radius + 1e-12
        ) & (np.linalg.norm(perp, axis=1) <= self.height + 1e-12)


def _region_contains(region, points):
    if isinstance(region, Ball):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d = pts - np.asarray(region.center)
        return np.sum(d * d, axis=1) <= region.radius ** 2 + 1e-12
    return region.contains(points)


def mass(V, region=None):
    """Total particle weight inside the region."""
    sel = V.select(region)
    return float(np.sum(V.w[sel]))


@dataclass
class GraphFrame:
    """Split of R^n into an m-dim base and an (n-m)-dim height space.

    p1 (m, n) and p2 (n-m, n) have orthonormal rows and orthogonal
    images; the graph map is G(x) = p1^T x + p2^T g(x).
    """

    p1: np.ndarray
    p2: np.ndarray

    def __post_init__(self):
        self.p1 = np.atleast_2d(np.asarray(self.p1, dtype=float))
        self.p2 = np.atleast_2d(np.asarray(self.p2, dtype=float))
        m = self.p1.shape[0]
        c = self.p2.shape[0]
        if (
            np.max(np.abs(self.p1 @ self.p1.T - np.eye(m))) > 1e-10
            or np.max(np.abs(self.p2 @ self.p2.T - np.eye(c))) > 1e-10
            or np.max(np.abs(self.p2 @ self.p1.T)) > 1e-10
        ):
            raise ValueError("frame projections are not orthonormal-split")

    @classmethod
    def standard(cls, n, m):
        eye = np.eye(n)
        return cls(eye[:m], eye[m:])

    @classmethod
    def from_projection(cls, P):
        P = np.asarray(P, dtype=float)
        vals, vecs = np.linalg.eigh(P)
        m = int(round(float(np.sum(vals))))
        order = np.argsort(vals)[::-1]
        vecs = vecs[:, order]
        return cls(vecs[:, :m].T, vecs[:, m:].T)

    @property
    def n(self):
        return self.p1.shape[1]

    @property
    def m(self):
        return self.p1.shape[0]

    @property
    def codim(self):
        return self.p2.shape[0]

    def base(self, z):
        return np.atleast_2d(z) @ self.p1.T

    def height(self, z):
        return np.atleast_2d(z) @ self.p2.T

    def embed(self, x, y):
        return np.atleast_2d(x) @ self.p1 + np.atleast_2d(y) @ self.p2

    def base_projection(self):
        return self.p1.T @ self.p1

    def tangent_projection(self, dg):
        """Projection onto im(p1^T + p2^T Dg) for a gradient (c, m)."""
        dg = np.atleast_2d(np.asarray(dg, dtype=float))
        cols = self.p1.T + self.p2.T @ dg
        q, _ = np.linalg.qr(cols)
        return q @ q.T


class BumpVectorField:
    """Constant direction times a radial bump; analytic jacobian."""

    def __init__(self, center, radius, direction):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        d = np.asarray(direction, dtype=float)
        self.direction = d

    def _t(self, pts):
        d = np.atleast_2d(pts) - self.center
        return d, np.linalg.norm(d, axis=1) / self.radius

    def value(self, pts):
        _, t = self._t(pts)
        return _bump(t)[:, None] * self.direction

    def jacobian(self, pts):
        """J[p, c, d] = d g_c / d x_d."""
        d, t = self._t(pts)
        slope = _bump_radial_slope(t) / self.radius ** 2
        grad = slope[:, None] * d
        return self.direction[None, :, None] * grad[:, None, :]


class RadialBumpField:
    """g(z) = (z - c) * bump(|z - c| / R); analytic jacobian."""

    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)

    def value(self, pts):
        d = np.atleast_2d(pts) - self.center
        t = np.linalg.norm(d, axis=1) / self.radius
        return d * _bump(t)[:, None]

    def jacobian(self, pts):
        d = np.atleast_2d(pts) - self.center
        t = np.linalg.norm(d, axis=1) / self.radius
        n = d.shape[1]
        slope = _bump_radial_slope(t) / self.radius ** 2
        jac = _bump(t)[:, None, None] * np.eye(n)
        jac += d[:, :, None] * (slope[:, None] * d)[:, None, :]
        return jac


def first_variation(V, g):
    """delta V (g) = sum_i w_i trace(P_i Dg(z_i)): tangential divergence."""
    if len(V) == 0:
        return 0.0
    jac = g.jacobian(V.z)
    div = np.einsum("pcd,pcd->p", V.P, jac)
    return float(np.sum(V.w * div))


def mean_curvature_estimate(V, z, r, scales=(1.0, 0.6)):
    """Constant mean-curvature vector fitted on a localized test dictionary.

    Minimizes sum_k |delta V(g_k) + h . int g_k d||V|| |^2 over test fields
    supported in B(z, r): all coordinate directions of radial bumps at the
    given scale fractions, plus the radial field itself.  Returns (h,
    normalized residual).
    """
    z = np.asarray(z, dtype=float)
    rows = []
    targets = []
    idx = V.tree.query_ball_point(z, r)
    if len(idx) == 0:
        raise ValueError("insufficient test coverage")
    sub = V.subset(np.asarray(idx, dtype=int))
    n = V.n
    for s in scales:
        rad = r * s
        d = sub.z - z
        t = np.linalg.norm(d, axis=1) / rad
        phi = _bump(t)
        slope = _bump_radial_slope(t) / rad ** 2
        grad = slope[:, None] * d
        # delta V(e_j phi) = sum w (P grad phi)_j
        b = np.einsum("p,pcd,pd->c", sub.w, sub.P, grad)
        s_mass = float(np.sum(sub.w * phi))
        for j in range(n):
            row = np.zeros(n)
            row[j] = s_mass
            rows.append(row)
            targets.append(-b[j])
        fld = RadialBumpField(z, rad)
        rows.append(np.einsum("p,pc->c", sub.w, fld.value(sub.z)))
        targets.append(-first_variation(sub, fld))
    A = np.asarray(rows)
    b = np.asarray(targets)
    G = A.T @ A
    if np.linalg.matrix_rank(G, tol=1e-12 * max(np.max(np.abs(G)), 1e-300)) < n:
        raise ValueError("insufficient test coverage")
    h = np.linalg.solve(G, A.T @ b)
    resid = float(
        np.linalg.norm(A @ h - b) / max(np.linalg.norm(b), 1e-300)
    )
    return h, resid


def tilt_excess(V, a, r, T):
    """(r^-m sum_{|z-a|<=r} w |P - T|_F^2)^(1/2)."""
    a = np.asarray(a, dtype=float)
    idx = V.tree.query_ball_point(a, r) if len(V) else []
    if len(idx) == 0:
        return 0.0
    idx = np.asarray(idx, dtype=int)
    T = np.asarray(T, dtype=float)
    diff = V.P[idx] - T
    val = np.sum(V.w[idx] * np.sum(diff * diff, axis=(1, 2)))
    return math.sqrt(max(val, 0.0) / r ** V.m)


def tilt_minimizing_matrix(V, a, r):
    """Weighted mean of particle planes in the ball: the Frobenius
    least-squares minimizer of the tilt over all matrices."""
    a = np.asarray(a, dtype=float)
    idx = np.asarray(V.tree.query_ball_point(a, r), dtype=int)
    if len(idx) == 0:
        raise ValueError("empty ball")
    w = V.w[idx]
    return np.einsum("p,pij->ij", w, V.P[idx]) / np.sum(w)


_PROFILES = ("bump", "sharp", "wide")


def _profile_slope(kind, tt, rad):
    """Radial derivative over r of the named unit-sup profile."""
    if kind == "bump":
        return _bump_radial_slope(tt) / rad ** 2
    if kind == "sharp":
        # bump at 0.6 of the scale: steeper, more localized
        return _bump_radial_slope(tt / 0.6) / (0.6 * rad) ** 2
    # squared bump: flatter top
    return 2.0 * _bump(tt) * _bump_radial_slope(tt) / rad ** 2


def _dictionary_sup(z, P, w, center, t, extra_centers=False):
    """Dictionary lower bound for ||delta V||(B(center, t)).

    Unit-sup-norm radial profiles on precomputed ball data; per profile
    the direction maximizing |delta V(g)| is closed-form.  With
    ``extra_centers`` the trial set also contains center-shifted and
    shrunk copies (all still supported inside the ball), a mollified
    refinement of the plain dictionary value.
    """
    center = np.asarray(center, dtype=float)
    trials = [(center, t)]
    if extra_centers:
        for ax in range(z.shape[1]):
            for sgn in (-1.0, 1.0):
                c = center.copy()
                c[ax] += sgn * 0.2 * t
                trials.append((c, 0.8 * t))
        trials.append((center, 0.7 * t))
    best = 0.0
    for c, rad in trials:
        d = z - c
        tt = np.linalg.norm(d, axis=1) / rad
        for kind in _PROFILES:
            grad = _profile_slope(kind, tt, rad)[:, None] * d
            v = np.einsum("p,pcd,pd->c", w, P, grad)
            best = max(best, float(np.linalg.norm(v)))
    return best


@dataclass
class GoodPointReport:
    """Good/bad split with the per-particle worst-scale statistics.

    ``variation_stat`` is the dictionary lower bound for
    ||delta V||(B)/||V||(B)^(1-1/m), maximized over scanned scales;
    ``variation_refined`` the center-mollified refinement of the same
    quantity (always >= the plain value); ``tilt_stat`` the analogous
    tilt-mass ratio.  The filter fires on the plain dictionary value.
    """

    indices: np.ndarray
    bad: np.ndarray
    variation_fired: np.ndarray
    tilt_fired: np.ndarray
    variation_stat: np.ndarray
    variation_refined: np.ndarray
    tilt_stat: np.ndarray
    reference: np.ndarray

    @property
    def good(self):
        return ~self.bad


def good_point_filter(V, region, delta, t_max, reference=None, scales=4,
                      refine=True):
    """Flag particles violating first-variation or tilt smallness.

    A particle is bad when at any dyadic scale t = t_max 2^-j,
    j = 1..scales, either ||delta V||(B(z,t)) > delta ||V||(B(z,t))^(1-1/m)
    (first variation, dictionary lower bound) or
    sum_ball w |P - reference|_F > delta ||V||(B(z,t)) (tilt mass).
    ``reference`` defaults to the weighted mean plane over the region.
    """
    sel_mask = V.select(region)
    indices = np.flatnonzero(sel_mask)
    if len(indices) == 0:
        raise ValueError("region selects no particles")
    if reference is None:
        w = V.w[sel_mask]
        reference = np.einsum("p,pij->ij", w, V.P[sel_mask]) / np.sum(w)
    reference = np.asarray(reference, dtype=float)
    tilt_dev = np.sqrt(
        np.sum((V.P - reference) ** 2, axis=(1, 2))
    )
    var_stat = np.zeros(len(indices))
    var_refined = np.zeros(len(indices))
    tilt_stat = np.zeros(len(indices))
    exponent = 1.0 - 1.0 / V.m
    for j in range(1, scales + 1):
        t = t_max * 2.0 ** (-j)
        lists = V.tree.query_ball_point(V.z[indices], t)
        for k, li in enumerate(lists):
            if not li:
                continue
            li = np.asarray(li, dtype=int)
            mass_ball = float(np.sum(V.w[li]))
            if mass_ball <= 0:
                continue
            zb, Pb, wb = V.z[li], V.P[li], V.w[li]
            norm_mass = mass_ball ** exponent
            dv = _dictionary_sup(zb, Pb, wb, V.z[indices[k]], t)
            var_stat[k] = max(var_stat[k], dv / norm_mass)
            if refine:
                dvr = _dictionary_sup(
                    zb, Pb, wb, V.z[indices[k]], t, extra_centers=True
                )
                var_refined[k] = max(var_refined[k], dvr / norm_mass)
            tsum = float(np.sum(wb * tilt_dev[li]))
            tilt_stat[k] = max(tilt_stat[k], tsum / mass_ball)
    if not refine:
        var_refined = var_stat.copy()
    var_fired = var_stat > delta
    tilt_fired = tilt_stat > delta
    return GoodPointReport(
        indices=indices,
        bad=var_fired | tilt_fired,
        variation_fired=var_fired,
        tilt_fired=tilt_fired,
        variation_stat=var_stat,
        variation_refined=var_refined,
        tilt_stat=tilt_stat,
        reference=reference,
    )


def check_lemma31_hypotheses(V, S, s, Q, deltas, M):
    """Mass-ratio hypothesis checks over the cylinder C(S, 0, s, s).

    deltas = (d1, d2): lower bound (Q-1+d1) alpha_m s^m <= mass(cyl),
    upper bound mass(cyl) <= (Q+1-d2) alpha_m s^m, and the total-mass cap
    mass(all) <= M alpha_m s^m.  Returns per-inequality pass, bound and
    measured ratio.
    """
    if isinstance(S, GraphFrame):
        P_S = S.base_projection()
    else:
        P_S = np.asarray(S, dtype=float)
    d1, d2 = float(deltas[0]), float(deltas[1])
    am = unit_ball_measure(V.m) * s ** V.m
    cyl = Cylinder.over(np.zeros(V.n), P_S, s, s)
    m_cyl = mass(V, cyl)
    m_tot = V.total_mass()
    out = {
        "lower": {
            "pass": bool((Q - 1 + d1) * am <= m_cyl),
            "bound": (Q - 1 + d1),
            "ratio": m_cyl / am,
        },
        "upper": {
            "pass": bool(m_cyl <= (Q + 1 - d2) * am),
            "bound": (Q + 1 - d2),
            "ratio": m_cyl / am,
        },
        "total": {
            "pass": bool(m_tot <= M * am),
            "bound": M,
            "ratio": m_tot / am,
        },
    }
    out["all_pass"] = bool(
        out["lower"]["pass"] and out["upper"]["pass"] and out["total"]["pass"]
    )
    return out


@dataclass
class GraphExtraction:
    """Multigraph read off a varifold over a base frame."""

    frame: GraphFrame
    g: SampledField
    K: np.ndarray
    Q: int
    T: object
    diagnostics: dict = field(default_factory=dict)

    def graph_points(self):
        dom = self.g.domain
        x = dom.nodes().reshape(-1, dom.m)
        y = self.g.values.reshape(len(x), -1)
        return self.frame.embed(x, y)


def _single_linkage_sheets(y, w, gap):
    """Cluster height vectors; returns a label array starting at 0."""
    if len(y) == 1:
        return np.zeros(1, dtype=int)
    Z = linkage(y, method="single")
    labels = fcluster(Z, t=gap, criterion="distance")
    return labels - 1


def graph_extract(V, frame, region, L, Q_hint, spacing=None,
                  ambiguity_threshold=0.5, margin_cells=2.0):
    """Extract a Q-sheeted Lipschitz graph over the frame's base plane.

    Per base node, nearby particle heights are clustered by weighted
    single linkage with gap 4 x (median inter-particle spacing); the node
    carries the mean of the sheet centers.  Nodes keep membership in K
    when the sheet count matches Q_hint, the weighted multiplicity is
    within 0.2 of it, and finite differences to neighbors stay below the
    per-coordinate budget L / sqrt(n - m).  Off K the graph is extended
    by coordinatewise inf-convolution at that same slope, which preserves
    K values and keeps the vector Lipschitz constant at most L.  The flux
    distribution of the nonparametric area integrand rides along.
    """
    sel = V.select(region)
    if not np.any(sel):
        raise ValueError("region selects no particles")
    z = V.z[sel]
    w = V.w[sel]
    m = frame.m
    codim = frame.codim
    x = frame.base(z)
    y = frame.height(z)
    tree_amb = cKDTree(z)
    nn = tree_amb.query(z, k=min(2, len(z)))[0]
    med_spacing = float(np.median(nn[:, -1])) if len(z) > 1 else 1.0
    gap = 4.0 * med_spacing
    if spacing is None:
        spacing = 2.0 * med_spacing
    lo = np.min(x, axis=0)
    hi = np.max(x, axis=0)
    shape_spacing = float(spacing)
    cells = np.maximum(
        np.ceil((hi - lo) / shape_spacing - 1e-9), 4
    )
    domain = GridDomain(
        m, tuple(lo), tuple(cells * shape_spacing), shape_spacing
    )
    nodes = domain.nodes().reshape(-1, m)
    base_tree = cKDTree(x)
    half = 0.75 * shape_spacing
    lists = base_tree.query_ball_point(nodes, half, p=np.inf)
    g_vals = np.zeros((len(nodes), codim))
    mult = np.full(len(nodes), np.nan)
    counts = np.zeros(len(nodes), dtype=int)
    has_data = np.zeros(len(nodes), dtype=bool)
    ok = np.zeros(len(nodes), dtype=bool)
    cell_volume = (2.0 * half) ** m
    for ni, li in enumerate(lists):
        if not li:
            continue
        li = np.asarray(li, dtype=int)
        has_data[ni] = True
        labels = _single_linkage_sheets(y[li], w[li], gap)
        nsheets = int(labels.max()) + 1
        counts[ni] = nsheets
        centers = np.zeros((nsheets, codim))
        for s in range(nsheets):
            in_s = labels == s
            ws = w[li][in_s]
            centers[s] = np.sum(ws[:, None] * y[li][in_s], axis=0) / np.sum(ws)
        g_vals[ni] = np.mean(centers, axis=0)
        mult[ni] = float(np.sum(w[li])) / cell_volume
        ok[ni] = (
            nsheets == Q_hint
            and abs(mult[ni] - round(mult[ni])) <= 0.2
            and int(round(mult[ni])) == Q_hint
        )
    ambiguous = has_data & ~ok
    frac_ambiguous = (
        float(np.sum(ambiguous)) / max(int(np.sum(has_data)), 1)
    )
    if frac_ambiguous > ambiguity_threshold:
        raise ValueError(
            f"clustering ambiguity {frac_ambiguous:.2f} exceeds "
            f"{ambiguity_threshold:.2f}: sheet counts "
            f"{np.bincount(counts[has_data]).tolist()}"
        )
    per_coord_L = float(L) / math.sqrt(codim)
    ok_grid = ok.reshape(domain.shape)
    g_grid = g_vals.reshape(domain.shape + (codim,))
    lip_ok = np.ones(domain.shape, dtype=bool)
    measured_lip = 0.0
    for axis in range(m):
        fwd = [slice(None)] * m
        bwd = [slice(None)] * m
        fwd[axis] = slice(1, None)
        bwd[axis] = slice(None, -1)
        both = ok_grid[tuple(fwd)] & ok_grid[tuple(bwd)]
        diff = np.abs(
            g_grid[tuple(fwd)] - g_grid[tuple(bwd)]
        ).max(axis=-1) / shape_spacing
        viol = both & (diff > per_coord_L)
        if np.any(both):
            measured_lip = max(
                measured_lip, float(np.max(diff[both]))
            )
        lip_ok[tuple(fwd)] &= ~viol
        lip_ok[tuple(bwd)] &= ~viol
    K = ok_grid & lip_ok
    # interior margin: the contract speaks about nodes away from the
    # data boundary, where boxes are complete
    data_lo = lo + margin_cells * shape_spacing
    data_hi = hi - margin_cells * shape_spacing
    inner = np.all(
        (nodes >= data_lo - 1e-12) & (nodes <= data_hi + 1e-12), axis=1
    ).reshape(domain.shape)
    interior = inner & has_data.reshape(domain.shape)
    K &= inner
    if not np.any(K):
        raise ValueError("no unambiguous Lipschitz nodes")
    k_nodes = nodes[K.reshape(-1)]
    k_vals = g_grid[K]
    out_vals = np.empty_like(g_vals)
    free = ~K.reshape(-1)
    out_vals[~free] = k_vals
    if np.any(free):
        # coordinatewise inf-convolution extension at slope L/sqrt(codim)
        fn = nodes[free]
        chunk = max(1, int(2e6 // max(len(k_nodes), 1)))
        for start in range(0, len(fn), chunk):
            blk = fn[start:start + chunk]
            dist = np.linalg.norm(
                blk[:, None, :] - k_nodes[None, :, :], axis=2
            )
            cand = k_vals[None, :, :] + per_coord_L * dist[:, :, None]
            out_vals[np.flatnonzero(free)[start:start + chunk]] = np.min(
                cand, axis=1
            )
    g_field = SampledField(
        domain, out_vals.reshape(domain.shape + (codim,))
    )
    raw = apply_EL(area_integrand(m, codim), g_field)
    restrict = has_data.reshape(domain.shape)
    flux = SampledField(domain, -raw.flux.values, raw.flux.mask & restrict)
    alt = None
    if raw.alt_density is not None:
        alt = SampledField(
            domain, -raw.alt_density.values,
            raw.alt_density.mask & restrict,
        )
    T = DistributionRep(flux=flux, alt_density=alt)
    coverage = float(np.sum(K)) / max(int(np.sum(interior)), 1)
    return GraphExtraction(
        frame=frame,
        g=g_field,
        K=K,
        Q=int(Q_hint),
        T=T,
        diagnostics={
            "coverage": coverage,
            "ambiguous_fraction": frac_ambiguous,
            "median_spacing": med_spacing,
            "gap": gap,
            "spacing": shape_spacing,
            "measured_lip": measured_lip,
            "multiplicity": mult.reshape(domain.shape),
            "sheet_counts": counts.reshape(domain.shape),
        },
    )


def tilt_vs_graph_check(V, extraction, points, radii, beta=0.5, r_exp=2.0):
    """Gradient-oscillation vs tilt-excess transfer at K-points.

    At each sampled base point x, compares the graph side
    s^(-beta-m/r) ||Dg - Dg(x)||_{r; x, s} with 2 sqrt(m) times the
    varifold side s^(-beta-m/r) (sum_{B(G(x),s)} w |P - R(x)|^2)^(1/2),
    R(x) the tangent plane of the graph map at x.  Reports tables and the
    max ratio.
    """
    dom = extraction.g.domain
    m = dom.m
    dg = weak_gradient(extraction.g, 1)
    # stencils touching non-K nodes see the Lipschitz extension, not the
    # graph; erode K by the stencil radius
    k_safe = _eroded_mask(extraction.K, 1) & extraction.K
    dg_masked = SampledField(dom, dg.values, dg.mask & k_safe)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    radii = np.asarray(sorted(radii, reverse=True), dtype=float)
    lhs = np.full((len(pts), len(radii)), np.nan)
    rhs = np.full((len(pts), len(radii)), np.nan)
    expo = -beta - m / r_exp
    for pi, x in enumerate(pts):
        dg_vals, dg_ok = dg.interpolate(x[None])
        g_vals, g_ok = extraction.g.interpolate(x[None])
        if not (dg_ok[0] and g_ok[0]):
            continue
        dg_x = dg_vals[0]
        R = extraction.frame.tangent_projection(dg_x)
        Gx = extraction.frame.embed(x[None], g_vals[0][None])[0]
        shift = SampledField(
            dom,
            np.where(
                dg_masked.mask[..., None, None], dg.values - dg_x, 0.0
            ),
            dg_masked.mask,
        )
        for ri, s in enumerate(radii):
            try:
                lhs[pi, ri] = s ** expo * lp_seminorm(
                    shift, r_exp, Ball(tuple(x), s)
                )
            except ValueError:
                continue
            idx = V.tree.query_ball_point(Gx, s)
            if idx:
                idx = np.asarray(idx, dtype=int)
                diff = V.P[idx] - R
                tilt2 = float(
                    np.sum(V.w[idx] * np.sum(diff * diff, axis=(1, 2)))
                )
                rhs[pi, ri] = s ** expo * math.sqrt(max(tilt2, 0.0))
            else:
                rhs[pi, ri] = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = lhs / (2.0 * math.sqrt(m) * rhs)
    ratio[(lhs < 1e-12) & ~(rhs > 1e-12)] = 0.0
    finite = ratio[np.isfinite(ratio)]
    return {
        "points": pts,
        "radii": radii,
        "graph_side": lhs,
        "tilt_side": rhs,
        "ratio": ratio,
        "max_ratio": float(np.max(finite)) if len(finite) else 0.0,
    }


# -- particle file format ---------------------------------------------------


def save_varifold(path, V):
    """JSON-lines: one particle per line with flat row-major P."""
    with open(path, "w") as fh:
        for i in range(len(V)):
            fh.write(json.dumps({
                "z": V.z[i].tolist(),
                "P": V.P[i].reshape(-1).tolist(),
                "w": float(V.w[i]),
            }) + "\n")


def _projection_from_basis(basis, n):
    B = np.asarray(basis, dtype=float)
    if B.ndim == 1:
        B = B.reshape(-1, n)
    q, _ = np.linalg.qr(B.T)
    return q @ q.T


def load_varifold(path, m=None):
    """Read a JSON-lines particle file; validates plane invariants.

    Accepts "P" (flat row-major or nested n x n) or "basis" (rows
    spanning the plane, orthonormalized on load).
    """
    zs, Ps, ws = [], [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            z = np.asarray(rec["z"], dtype=float)
            n = len(z)
            if "P" in rec:
                P = np.asarray(rec["P"], dtype=float).reshape(n, n)
            elif "basis" in rec:
                P = _projection_from_basis(rec["basis"], n)
            else:
                raise ValueError("particle record missing P or basis")
            zs.append(z)
            Ps.append(P)
            ws.append(float(rec["w"]))
    if not zs:
        raise ValueError("empty particle file")
    P = np.asarray(Ps)
    if m is None:
        m = int(round(float(np.einsum("ii->", P[0]))))
    return DiscreteVarifold(len(zs[0]), m, np.asarray(zs), P, np.asarray(ws))
