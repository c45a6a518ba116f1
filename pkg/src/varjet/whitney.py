"""Whitney-type covers, smooth partitions of unity, gluing, mollify-split.

The cover scale function is evaluated in closed form: with delta the
working scale and d(x) the distance to the closed node set A,

    h(x) = (1/20) min(1, max(d(x), (delta - d(x))_+))

which is (1/20)-Lipschitz and bounded below by delta/40.  Centers are
chosen greedily in lexicographic node order as an 8h-net: a node is
accepted iff it lies farther than 8 h(s) from every accepted center s.
The Lipschitz bound then makes the closed 2h-balls pairwise disjoint
(4h(s) + |s-t|/10 < 0.9 |s-t| whenever |s-t| > 8h(s)), every node lies
within 8h(s) < 10h(s) of some center, and interacting centers have
comparable scales.  The 2h margin absorbs off-node evaluation points
once the grid spacing is below about delta / (10 sqrt(m)).
"""

from __future__ import annotations

import json
import math

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .fields import (
    Ball,
    DistributionRep,
    SampledField,
    dual_norm,
    unit_ball_measure,
)

__all__ = [
    "WhitneyCover",
    "build_cover",
    "glue",
    "MollifierKernel",
    "mollify_split",
    "check_flatness",
]


def _bump_profile(t):
    """exp(1 - 1/(1-t^2)) on t < 1, zero beyond; smooth, equals 1 at 0."""
    t = np.asarray(t, dtype=float)
    t2 = np.clip(t * t, 0.0, 1.0)
    return np.where(
        np.abs(t) < 1.0,
        np.exp(1.0 - 1.0 / np.maximum(1.0 - t2, 1e-300)),
        0.0,
    )


class WhitneyCover:
    """Greedy cover of the grid box adapted to a closed node set A."""

    def __init__(self, domain, a_mask, delta, centers, scales):
        self.domain = domain
        self.a_mask = np.asarray(a_mask, dtype=bool)
        self.delta = float(delta)
        self.centers = np.asarray(centers, dtype=float)
        self.scales = np.asarray(scales, dtype=float)
        a_pts = domain.nodes()[self.a_mask]
        self._a_tree = cKDTree(a_pts)
        self._a_pts = a_pts
        self._center_tree = cKDTree(self.centers)
        self.max_scale = float(np.max(self.scales))

    # -- scale function ------------------------------------------------

    def dist_to_a(self, points):
        d, _ = self._a_tree.query(np.atleast_2d(points))
        return d

    def h(self, points):
        d = self.dist_to_a(points)
        inner = np.maximum(d, np.maximum(self.delta - d, 0.0))
        return np.minimum(1.0, inner) / 20.0

    def nearest_in_a(self, points):
        """Nearest A-node per point; KDTree ties resolve to the smallest
        index, and A-nodes are stored in lexicographic (C) node order."""
        _, idx = self._a_tree.query(np.atleast_2d(points))
        return self._a_pts[idx]

    # -- bumps ----------------------------------------------------------

    def _active_pairs(self, points):
        """Flat (point index, center index, raw bump value) triple arrays."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        lists = self._center_tree.query_ball_point(
            pts, 10.0 * self.max_scale + 1e-12
        )
        lens = np.fromiter((len(l) for l in lists), dtype=int, count=len(pts))
        if int(lens.sum()) == 0:
            return (np.zeros(0, int), np.zeros(0, int), np.zeros(0), len(pts))
        cidx = np.concatenate([np.asarray(l, dtype=int) for l in lists])
        pidx = np.repeat(np.arange(len(pts)), lens)
        d = np.linalg.norm(self.centers[cidx] - pts[pidx], axis=1)
        vals = _bump_profile(d / (10.0 * self.scales[cidx]))
        keep = vals > 0.0
        return pidx[keep], cidx[keep], vals[keep], len(pts)

    def partition_sum(self, points):
        """Sum of normalized bumps: 1 where covered, 0 where not."""
        pidx, cidx, vals, n = self._active_pairs(points)
        raw = np.bincount(pidx, weights=vals, minlength=n)
        safe = np.where(raw > 0.0, raw, 1.0)
        return np.bincount(pidx, weights=vals / safe[pidx], minlength=n)

    def phi_values(self, points):
        """Normalized bump table: (point idx, center idx, weight, npts)."""
        pidx, cidx, vals, n = self._active_pairs(points)
        raw = np.bincount(pidx, weights=vals, minlength=n)
        safe = np.where(raw > 0.0, raw, 1.0)
        return pidx, cidx, vals / safe[pidx], n

    def overlap_counts(self, points):
        """Number of centers whose 10h-ball meets the point's own 10h-ball."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        hx = self.h(pts)
        lists = self._center_tree.query_ball_point(
            pts, 10.0 * hx + 10.0 * self.max_scale + 1e-12
        )
        lens = np.fromiter((len(l) for l in lists), dtype=int, count=len(pts))
        if int(lens.sum()) == 0:
            return np.zeros(len(pts), dtype=int)
        cidx = np.concatenate([np.asarray(l, dtype=int) for l in lists])
        pidx = np.repeat(np.arange(len(pts)), lens)
        d = np.linalg.norm(self.centers[cidx] - pts[pidx], axis=1)
        hit = d <= 10.0 * hx[pidx] + 10.0 * self.scales[cidx] + 1e-12
        return np.bincount(
            pidx[hit], minlength=len(pts)
        ).astype(int)

    def interacting_scale_ratios(self, points):
        """h(x)/h(s) over interacting (x, s) pairs, flattened."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        hx = self.h(pts)
        lists = self._center_tree.query_ball_point(
            pts, 10.0 * hx + 10.0 * self.max_scale + 1e-12
        )
        lens = np.fromiter((len(l) for l in lists), dtype=int, count=len(pts))
        if int(lens.sum()) == 0:
            return np.zeros(0)
        cidx = np.concatenate([np.asarray(l, dtype=int) for l in lists])
        pidx = np.repeat(np.arange(len(pts)), lens)
        d = np.linalg.norm(self.centers[cidx] - pts[pidx], axis=1)
        hit = d <= 10.0 * hx[pidx] + 10.0 * self.scales[cidx] + 1e-12
        return hx[pidx[hit]] / self.scales[cidx[hit]]

    def bump_derivative_constant(self, order=1, samples=100, seed=11):
        """Measured sup of |D^i phi_s| h(s)^i over random sample points."""
        rng = np.random.default_rng(seed)
        ks = rng.integers(0, len(self.centers), size=samples)
        offs = rng.normal(size=(samples, self.domain.m))
        offs /= np.linalg.norm(offs, axis=1)[:, None]
        radii = rng.uniform(0.0, 9.0, size=samples)
        pts = (
            self.centers[ks]
            + radii[:, None] * self.scales[ks][:, None] * offs
        )
        best = 0.0
        for x, k in zip(pts, ks):
            hs = self.scales[k]
            step = 1e-4 * hs
            for dax in range(self.domain.m):
                e = np.zeros(self.domain.m)
                e[dax] = step
                if order == 1:
                    val = abs(
                        self._phi_single(k, x + e) - self._phi_single(k, x - e)
                    ) / (2 * step) * hs
                else:
                    val = abs(
                        self._phi_single(k, x + e)
                        - 2 * self._phi_single(k, x)
                        + self._phi_single(k, x - e)
                    ) / step ** 2 * hs ** 2
                best = max(best, float(val))
        return best

    def _phi_single(self, k, x):
        pidx, cidx, w, _ = self.phi_values(x[None, :])
        pos = np.flatnonzero(cidx == k)
        return float(w[pos[0]]) if len(pos) else 0.0

    def to_json(self):
        return json.dumps(
            {
                "m": self.domain.m,
                "delta": self.delta,
                "centers": self.centers.tolist(),
                "scales": self.scales.tolist(),
            },
            sort_keys=True,
        )


def build_cover(domain, a_mask, delta):
    """Greedy net cover adapted to the closed node set ``a_mask``.

    Candidates are the grid nodes in lexicographic order; a node becomes a
    center iff its distance to every accepted center s exceeds 8 h(s).
    Every node then lies within 8h(s) of a center, two scale units inside
    the 10h bump support, and the closed 2h-balls stay pairwise disjoint.
    Partition sums at off-node points are covered by the same margin when
    the grid spacing is below about delta / (10 sqrt(m)).
    """
    a_mask = np.asarray(a_mask, dtype=bool)
    if not np.any(a_mask):
        raise ValueError("closed set is empty")
    if not delta > 2.0 * domain.spacing:
        raise ValueError("delta too small for grid")
    nodes = domain.nodes().reshape(-1, domain.m)
    a_pts = nodes[a_mask.reshape(-1)]
    tree = cKDTree(a_pts)
    d, _ = tree.query(nodes)
    h_all = np.minimum(
        1.0, np.maximum(d, np.maximum(delta - d, 0.0))
    ) / 20.0
    acc_pts = np.empty((len(nodes), domain.m))
    acc_h = np.empty(len(nodes))
    count = 0
    for x, hx in zip(nodes, h_all):
        if count:
            lim = 8.0 * acc_h[:count]
            if np.any(
                np.sum((acc_pts[:count] - x) ** 2, axis=1) <= lim * lim
            ):
                continue
        acc_pts[count] = x
        acc_h[count] = hx
        count += 1
    return WhitneyCover(
        domain, a_mask, delta, acc_pts[:count].copy(), acc_h[:count].copy()
    )


def glue(cover, locals_map):
    """phi-weighted sum of local fields on the cover's grid.

    ``locals_map`` maps center index -> SampledField on the same grid,
    valid at least on the closed 10h-ball of that center.  Raises if a
    center active somewhere has no local field.  Output is valid where
    some bump is active and every active local is valid there.
    """
    dom = cover.domain
    nodes = dom.nodes().reshape(-1, dom.m)
    pidx, cidx, w, n = cover.phi_values(nodes)
    any_field = next(iter(locals_map.values()))
    vshape = any_field.value_shape
    vlen = int(np.prod(vshape)) if vshape else 1
    out = np.zeros((n, vlen))
    ok = np.bincount(pidx, minlength=n) > 0
    for k in np.unique(cidx):
        if k not in locals_map:
            raise ValueError(f"no local field for active center {int(k)}")
        sel = cidx == k
        rows = pidx[sel]
        f = locals_map[k]
        vals = f.values.reshape(n, vlen)
        mask = f.mask.reshape(n)
        out[rows] += w[sel, None] * vals[rows]
        ok[rows] &= mask[rows]
    return SampledField(
        dom, out.reshape(dom.shape + vshape), ok.reshape(dom.shape)
    )


# -- mollification split ---------------------------------------------------


def _zero_pad(arr, width=1):
    out = np.zeros(tuple(s + 2 * width for s in arr.shape))
    out[(slice(width, -width),) * arr.ndim] = arr
    return out


class MollifierKernel:
    """Discrete mollifier at scale eps on a grid: bump profile, unit mass.

    The per-axis derivative kernels are exact centered differences of the
    zero-extended kernel, so discrete summation by parts holds exactly and
    the split below represents the mollified distribution to rounding
    error.  ``dphi_sup`` records the sup gradient at unit scale.
    """

    def __init__(self, domain, eps):
        if not eps > domain.spacing:
            raise ValueError("mollifier scale under grid resolution")
        self.eps = float(eps)
        self.domain = domain
        h = domain.spacing
        n = int(math.floor(eps / h + 1e-9))
        ax = np.arange(-n, n + 1) * h
        grids = np.meshgrid(*([ax] * domain.m), indexing="ij")
        r = np.sqrt(sum(g * g for g in grids)) / eps
        vals = _bump_profile(r)
        total = float(np.sum(vals) * h ** domain.m)
        self.kernel = vals / total
        padded = _zero_pad(self.kernel)
        self.grad_kernels = []
        for axis in range(domain.m):
            gp = np.roll(padded, -1, axis=axis)
            gm = np.roll(padded, +1, axis=axis)
            self.grad_kernels.append((gp - gm) / (2.0 * h))
        gmag = np.sqrt(sum(g * g for g in self.grad_kernels))
        self.dphi_sup = float(np.max(gmag)) * eps ** (domain.m + 1)

    def smooth(self, values):
        """Convolve node values (grid shape + value shape) with the kernel."""
        vals = np.asarray(values, dtype=float)
        gdim = self.domain.m
        flat = vals.reshape(vals.shape[:gdim] + (-1,))
        out = np.empty_like(flat)
        for c in range(flat.shape[-1]):
            out[..., c] = ndimage.convolve(
                flat[..., c], self.kernel, mode="constant", cval=0.0
            )
        return (out * self.domain.spacing ** gdim).reshape(vals.shape)

    def smooth_gradient(self, values):
        """Convolve with the kernel gradient: output (grid + value + m)."""
        vals = np.asarray(values, dtype=float)
        gdim = self.domain.m
        flat = vals.reshape(vals.shape[:gdim] + (-1,))
        out = np.empty(flat.shape + (gdim,))
        for c in range(flat.shape[-1]):
            for dax in range(gdim):
                out[..., c, dax] = ndimage.convolve(
                    flat[..., c], self.grad_kernels[dax],
                    mode="constant", cval=0.0,
                )
        return (out * self.domain.spacing ** gdim).reshape(
            vals.shape + (gdim,)
        )


def _neighborhood_mask(domain, a_mask, eps):
    nodes = domain.nodes().reshape(-1, domain.m)
    a_pts = nodes[np.asarray(a_mask, dtype=bool).reshape(-1)]
    d, _ = cKDTree(a_pts).query(nodes)
    return (d <= eps).reshape(domain.shape)


def check_flatness(T, a_mask, bound, radii, sample_cap=12, seed=13):
    """Spot-check |T|_{1;a,r} <= bound * r^(m+1) on sampled centers.

    The q = 1 dual norm is evaluated by the profile dictionary, a lower
    bound, so reported violations are genuine.  Returns the violation list.
    """
    dom = T.domain
    m = dom.m
    nodes = dom.nodes().reshape(-1, m)
    a_pts = nodes[np.asarray(a_mask, dtype=bool).reshape(-1)]
    rng = np.random.default_rng(seed)
    if len(a_pts) > sample_cap:
        a_pts = a_pts[rng.choice(len(a_pts), sample_cap, replace=False)]
    lo = np.asarray(dom.origin)
    hi = lo + np.asarray(dom.extent)
    bad = []
    for a in a_pts:
        for r in radii:
            if np.any(a - r < lo) or np.any(a + r > hi):
                continue
            try:
                val = dual_norm(T, 1, Ball(tuple(a), r))
            except ValueError:
                continue
            if val > bound * r ** (m + 1) * (1 + 1e-9):
                bad.append((tuple(float(x) for x in a), float(r), float(val)))
    return bad


def mollify_split(T, a_mask, eps, defect_bound, check=True):
    """Split the mollification of T into a near part and a far remainder.

    Returns (S_eps, R_eps): both density distributions; S_eps is supported
    on the closed eps-neighborhood of the node set, R_eps vanishes there,
    and S_eps + R_eps represents theta -> T(mollify(theta)) exactly at the
    discrete level.
    """
    dom = T.domain
    if check:
        radii = [2.0 * eps, 4.0 * eps, 8.0 * eps]
        radii = [r for r in radii if r < 10.0 / defect_bound]
        bad = check_flatness(T, a_mask, defect_bound, radii)
        if bad:
            raise ValueError(f"flatness precondition fails at {bad[:4]}")
    kern = MollifierKernel(dom, eps)
    codim = T.codim
    dens = np.zeros(dom.shape + (codim,))
    if T.density is not None:
        f = np.where(T.density.mask[..., None], T.density.values, 0.0)
        dens += kern.smooth(f)
    if T.flux is not None:
        g = np.where(T.flux.mask[..., None, None], T.flux.values, 0.0)
        # density of the mollified flux part: flux convolved against the
        # kernel gradient, contracted over the gradient slot
        gk = kern.smooth_gradient(g)
        dens += np.einsum("...jii->...j", gk)
    near = _neighborhood_mask(dom, a_mask, eps)
    s_vals = np.where(near[..., None], dens, 0.0)
    r_vals = np.where(near[..., None], 0.0, dens)
    gamma = (
        2.0 ** (dom.m + 1)
        * defect_bound
        * (1.0 + kern.dphi_sup * unit_ball_measure(dom.m))
    )
    S = DistributionRep(density=SampledField(dom, s_vals))
    R = DistributionRep(density=SampledField(dom, r_vals))
    S.mollifier = kern
    R.mollifier = kern
    R.gamma = gamma
    S.near_mask = near
    return S, R
