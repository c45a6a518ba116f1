"""Uniform-grid sampled fields, ball-localized seminorms, and dual norms.

Conventions used throughout the package:

* a field takes values in R^c (vectors) or Hom(R^m, R^c) (matrices stored
  as (c, m) arrays); the pointwise magnitude |f(x)| is always the Euclidean
  (Frobenius) norm of the value array,
* integrals are node-indicator quadrature: a node contributes iff it lies
  in the open ball, with weight spacing**m and no partial-cell correction,
* the ball-localized seminorm of exponent p is
  ``(sum |f|^p * h^m) ** (1/p)``, and for p = inf the exact max over
  contributing nodes.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "GridDomain",
    "SampledField",
    "Ball",
    "DistributionRep",
    "unit_ball_measure",
    "lp_seminorm",
    "weak_gradient",
    "dual_norm",
    "scale_translate",
    "save_field",
    "load_field",
]


def unit_ball_measure(m):
    """Lebesgue measure of the unit ball in R^m (2, pi, 4*pi/3, ...)."""
    return math.pi ** (m / 2.0) / math.gamma(m / 2.0 + 1.0)


@dataclass(frozen=True)
class GridDomain:
    """Uniform node lattice covering a box ``origin + [0, extent]``.

    Node coordinates are ``origin[i] + k * spacing`` exactly; the per-axis
    node count is derived from ``extent`` by rounding and must be >= 3 so
    centered differences exist.
    """

    m: int
    origin: tuple
    extent: tuple
    spacing: float

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("dimension must be positive")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        origin = tuple(float(x) for x in np.atleast_1d(self.origin))
        extent = tuple(float(x) for x in np.atleast_1d(self.extent))
        if len(origin) != self.m or len(extent) != self.m:
            raise ValueError("origin/extent length must equal m")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "extent", extent)
        if min(self.shape) < 3:
            raise ValueError("per-axis node count must be >= 3")

    @property
    def shape(self):
        return tuple(
            int(round(e / self.spacing)) + 1 for e in self.extent
        )

    def axes(self):
        return [
            np.asarray(o) + self.spacing * np.arange(n)
            for o, n in zip(self.origin, self.shape)
        ]

    def nodes(self):
        """All node coordinates, shape (*grid_shape, m)."""
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(grids, axis=-1)

    @property
    def node_count(self):
        return int(np.prod(self.shape))

    def to_header(self, value_shape=(), extra=None):
        head = {
            "m": self.m,
            "origin": list(self.origin),
            "extent": list(self.extent),
            "spacing": self.spacing,
            "shape": list(self.shape),
            "value_shape": list(value_shape),
        }
        if extra:
            head.update(extra)
        return head


def cube_domain(m, radius=1.0, spacing=2.0 ** -5, center=None):
    """Convenience: grid covering the cube [-radius, radius]^m (plus center)."""
    if center is None:
        center = np.zeros(m)
    center = np.asarray(center, dtype=float)
    n_half = int(math.ceil(radius / spacing))
    origin = center - n_half * spacing
    extent = 2 * n_half * spacing * np.ones(m)
    return GridDomain(m, tuple(origin), tuple(extent), spacing)


class SampledField:
    """Values on a GridDomain with a per-node validity mask.

    ``values`` has shape ``(*domain.shape, *value_shape)``; vector fields
    use value_shape (codim,), flux fields (codim, m), hessian-like fields
    (codim, m, m).
    """

    def __init__(self, domain, values, mask=None, codim=None):
        self.domain = domain
        values = np.asarray(values, dtype=float)
        gdim = len(domain.shape)
        if values.shape[:gdim] != domain.shape:
            raise ValueError("values do not match grid shape")
        self.values = values
        self.value_shape = values.shape[gdim:]
        if codim is None:
            codim = self.value_shape[0] if self.value_shape else 1
        self.codim = codim
        if mask is None:
            mask = np.ones(domain.shape, dtype=bool)
        self.mask = np.asarray(mask, dtype=bool)
        if self.mask.shape != domain.shape:
            raise ValueError("mask does not match grid shape")
        flat = self.values.reshape(domain.shape + (-1,))
        if not np.all(np.isfinite(flat[self.mask])):
            raise ValueError("non-finite values at valid nodes")

    # -- basic helpers -------------------------------------------------

    @property
    def spacing(self):
        return self.domain.spacing

    def magnitude(self):
        """Pointwise Euclidean norm of the value array, shape grid_shape."""
        flat = self.values.reshape(self.domain.shape + (-1,))
        return np.sqrt(np.sum(flat * flat, axis=-1))

    def copy(self, values=None, mask=None):
        return SampledField(
            self.domain,
            self.values.copy() if values is None else values,
            self.mask.copy() if mask is None else mask,
        )

    def interpolate(self, points):
        """Multilinear interpolation at ``points`` (N, m).

        Returns (values, valid) where valid marks points whose full corner
        stencil lies in the valid mask and inside the grid box.
        """
        dom = self.domain
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = (pts - np.asarray(dom.origin)) / dom.spacing
        shape = np.asarray(dom.shape)
        inside = np.all((rel >= -1e-12) & (rel <= shape - 1 + 1e-12), axis=1)
        base = np.clip(np.floor(rel).astype(int), 0, shape - 2)
        frac = rel - base
        vflat = self.values.reshape((dom.node_count, -1))
        mflat = self.mask.reshape(-1)
        out = np.zeros((len(pts), vflat.shape[1]))
        ok = inside.copy()
        for corner in range(2 ** dom.m):
            offs = np.array(
                [(corner >> k) & 1 for k in range(dom.m)], dtype=int
            )
            idx = np.ravel_multi_index(tuple((base + offs).T), dom.shape)
            w = np.prod(
                np.where(offs[None, :] == 1, frac, 1.0 - frac), axis=1
            )
            out += w[:, None] * vflat[idx]
            ok &= mflat[idx]
        return out.reshape((len(pts),) + self.value_shape), ok

    def __add__(self, other):
        self._check_compatible(other)
        return SampledField(
            self.domain, self.values + other.values, self.mask & other.mask
        )

    def __sub__(self, other):
        self._check_compatible(other)
        return SampledField(
            self.domain, self.values - other.values, self.mask & other.mask
        )

    def __mul__(self, scalar):
        return SampledField(self.domain, self.values * float(scalar), self.mask)

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def _check_compatible(self, other):
        if self.domain != other.domain or self.value_shape != other.value_shape:
            raise ValueError("fields live on different grids or value shapes")


@dataclass(frozen=True)
class Ball:
    """Open ball U(a, r); quadrature is node-indicator with weight h^m."""

    center: tuple
    radius: float

    def __post_init__(self):
        center = tuple(float(x) for x in np.atleast_1d(self.center))
        object.__setattr__(self, "center", center)
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    def measure(self):
        return unit_ball_measure(len(self.center)) * self.radius ** len(
            self.center
        )

    def contains(self, points, closed=False):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d2 = np.sum((pts - np.asarray(self.center)) ** 2, axis=1)
        if closed:
            return d2 <= self.radius ** 2
        return d2 < self.radius ** 2


def ball_node_mask(field_or_domain, ball, mask=None):
    """Boolean grid mask of valid nodes in the open ball."""
    if isinstance(field_or_domain, SampledField):
        dom = field_or_domain.domain
        valid = field_or_domain.mask if mask is None else mask
    else:
        dom = field_or_domain
        valid = np.ones(dom.shape, dtype=bool) if mask is None else mask
    nodes = dom.nodes()
    d2 = np.sum((nodes - np.asarray(ball.center)) ** 2, axis=-1)
    return (d2 < ball.radius ** 2) & valid


def lp_seminorm(f, p, ball):
    """Ball-localized Lp seminorm of a SampledField.

    Node-indicator quadrature with weight spacing**m; p = inf is the exact
    max over contributing nodes.  Raises if no valid node lies in the ball.
    """
    sel = ball_node_mask(f, ball)
    if not np.any(sel):
        raise ValueError("ball outside domain")
    mag = f.magnitude()[sel]
    if math.isinf(p):
        return float(np.max(mag))
    if p < 1:
        raise ValueError("p must be in [1, inf]")
    w = f.spacing ** f.domain.m
    return float((np.sum(mag ** p) * w) ** (1.0 / p))


def ball_coverage(f, ball):
    """Fraction of in-ball nodes that are valid (degradation diagnostic)."""
    dom = f.domain
    nodes = dom.nodes()
    d2 = np.sum((nodes - np.asarray(ball.center)) ** 2, axis=-1)
    inside = d2 < ball.radius ** 2
    total = int(np.sum(inside))
    if total == 0:
        return 0.0
    return float(np.sum(inside & f.mask)) / total


# -- weak derivatives ---------------------------------------------------


def _shift(arr, axis, step):
    """Shifted copy along a grid axis; vacated slots are zero."""
    out = np.zeros_like(arr)
    src = [slice(None)] * arr.ndim
    dst = [slice(None)] * arr.ndim
    if step > 0:
        src[axis] = slice(step, None)
        dst[axis] = slice(None, -step)
    else:
        src[axis] = slice(None, step)
        dst[axis] = slice(-step, None)
    out[tuple(dst)] = arr[tuple(src)]
    return out


def _eroded_mask(mask, radius=1, box=False):
    """Nodes whose +-radius neighborhood is valid.

    box=False uses the plus-shaped (axis neighbors) stencil, box=True the
    full box (needed when cross-derivatives read diagonal neighbors).
    Erosion along successive axes of the running result is separable box
    erosion; erosion of the original mask per axis is the plus stencil.
    """
    ok = mask.copy()
    base = mask
    for axis in range(mask.ndim):
        if box:
            base = ok.copy()
        for step in range(1, radius + 1):
            shifted_p = np.zeros_like(base)
            shifted_m = np.zeros_like(base)
            sl_all = [slice(None)] * base.ndim
            sl_p = list(sl_all)
            sl_p[axis] = slice(step, None)
            sl_q = list(sl_all)
            sl_q[axis] = slice(None, -step)
            shifted_p[tuple(sl_q)] = base[tuple(sl_p)]
            shifted_m[tuple(sl_p)] = base[tuple(sl_q)]
            ok &= shifted_p & shifted_m
    return ok


def weak_gradient(f, order=1):
    """Centered second-order finite differences of a SampledField.

    order 1 appends an axis of length m (... , codim, m); order 2 returns
    the symmetric per-node bilinear form (..., codim, m, m).  The valid
    mask shrinks by the stencil radius; exact on polynomials of degree 2.
    """
    dom = f.domain
    h = dom.spacing
    gdim = dom.m
    vals = f.values
    if order == 1:
        parts = []
        for axis in range(gdim):
            dplus = _shift(vals, axis, +1)
            dminus = _shift(vals, axis, -1)
            parts.append((dplus - dminus) / (2.0 * h))
        out = np.stack(parts, axis=-1)
        mask = _eroded_mask(f.mask, 1)
        if not np.any(mask):
            raise ValueError("domain too small for gradient stencil")
        return SampledField(dom, out, mask)
    if order == 2:
        vshape = f.value_shape
        out = np.zeros(dom.shape + vshape + (gdim, gdim))
        for i in range(gdim):
            ip = _shift(vals, i, +1)
            im = _shift(vals, i, -1)
            out[..., i, i] = ip - 2.0 * vals + im
            for j in range(i + 1, gdim):
                pp = _shift(_shift(vals, i, +1), j, +1)
                pm = _shift(_shift(vals, i, +1), j, -1)
                mp = _shift(_shift(vals, i, -1), j, +1)
                mm = _shift(_shift(vals, i, -1), j, -1)
                cross = (pp - pm - mp + mm) / 4.0
                out[..., i, j] = cross
                out[..., j, i] = cross
        out /= h * h
        mask = _eroded_mask(f.mask, 1, box=True)
        if not np.any(mask):
            raise ValueError("domain too small for hessian stencil")
        return SampledField(dom, out, mask)
    raise ValueError("order must be 1 or 2")


# -- distributions ------------------------------------------------------


class DistributionRep:
    """T(theta) = int f . theta dL^m  -  int g . Dtheta dL^m.

    Either part may be absent; both live on the same GridDomain.  ``flux``
    stores g with value_shape (codim, m).  ``alt_density`` optionally
    carries an equivalent density representation of the same distribution
    (it does not enter the action).
    """

    def __init__(self, density=None, flux=None, alt_density=None):
        if density is None and flux is None:
            raise ValueError("need a density or a flux part")
        if density is not None and flux is not None:
            if density.domain != flux.domain:
                raise ValueError("density and flux on different grids")
        self.density = density
        self.flux = flux
        self.alt_density = alt_density

    @property
    def domain(self):
        part = self.density if self.density is not None else self.flux
        return part.domain

    @property
    def codim(self):
        if self.density is not None:
            return self.density.value_shape[0]
        return self.flux.value_shape[0]

    def action(self, theta):
        """Apply to a vector test field sampled on the same grid."""
        total = 0.0
        w = self.domain.spacing ** self.domain.m
        if self.density is not None:
            m = self.density.mask & theta.mask
            prod = np.sum(self.density.values * theta.values, axis=-1)
            total += float(np.sum(prod[m]) * w)
        if self.flux is not None:
            dtheta = weak_gradient(theta, 1)
            m = self.flux.mask & dtheta.mask
            prod = np.sum(self.flux.values * dtheta.values, axis=(-2, -1))
            total -= float(np.sum(prod[m]) * w)
        return total

    def shifted_by_constant(self, y):
        """The distribution T - T_y where T_y has constant density y."""
        y = np.asarray(y, dtype=float)
        dom = self.domain
        const = np.broadcast_to(y, dom.shape + y.shape).copy()
        base_mask = (
            self.density.mask if self.density is not None else self.flux.mask
        )
        if self.density is not None:
            dens = SampledField(
                dom, self.density.values - const, self.density.mask
            )
        else:
            dens = SampledField(dom, -const, base_mask)
        return DistributionRep(density=dens, flux=self.flux)

    def scaled(self, factor):
        dens = None if self.density is None else self.density * factor
        flux = None if self.flux is None else self.flux * factor
        return DistributionRep(density=dens, flux=flux)

    def __neg__(self):
        return self.scaled(-1.0)


class ConstantDistribution(DistributionRep):
    """T_y(theta) = int y . theta over a grid region."""

    def __init__(self, domain, y, mask=None):
        y = np.asarray(y, dtype=float)
        vals = np.broadcast_to(y, domain.shape + y.shape).copy()
        super().__init__(density=SampledField(domain, vals, mask))
        self.y = y


# -- dual (negative first order) norm -----------------------------------


def _interior_ball_indices(domain, ball, valid):
    """Interior node flat-indices for the zero-boundary discrete test space.

    A node is interior iff it is valid, in the open ball, and all 2m stencil
    neighbors are valid in-ball nodes (spec's discrete Dirichlet boundary).
    """
    nodes = domain.nodes()
    d2 = np.sum((nodes - np.asarray(ball.center)) ** 2, axis=-1)
    inball = (d2 < ball.radius ** 2) & valid
    interior = _eroded_mask(inball, 1) & inball
    return inball, interior


class DualNormSolver:
    """Exact discrete |T|_{-1,2;a,r} via a sparse Poisson solve.

    The test space is grid functions vanishing off the interior node set,
    with edge-based forward differences as gradient (edge weight h^m).
    Factorizes once per ball; reusable across distributions on the grid.
    """

    def __init__(self, domain, ball, valid=None):
        self.domain = domain
        self.ball = ball
        if valid is None:
            valid = np.ones(domain.shape, dtype=bool)
        inball, interior = _interior_ball_indices(domain, ball, valid)
        if not np.any(inball):
            raise ValueError("ball outside domain")
        if not np.any(interior):
            raise ValueError("ball under-resolved for the dual norm solve")
        self.inball = inball
        self.interior = interior
        flat_int = np.flatnonzero(interior.reshape(-1))
        self.flat_int = flat_int
        self.renum = -np.ones(domain.node_count, dtype=int)
        self.renum[flat_int] = np.arange(len(flat_int))
        h = domain.spacing
        m = domain.m
        n = len(flat_int)
        # all forward grid edges with at least one interior endpoint;
        # a non-interior endpoint is pinned to theta = 0
        shape = domain.shape
        idx_grid = np.arange(domain.node_count).reshape(shape)
        edges = []
        for axis in range(m):
            sl_src = [slice(None)] * m
            sl_src[axis] = slice(None, -1)
            sl_nb = [slice(None)] * m
            sl_nb[axis] = slice(1, None)
            src = idx_grid[tuple(sl_src)].reshape(-1)
            nb = idx_grid[tuple(sl_nb)].reshape(-1)
            src_in = self.renum[src]
            nb_in = self.renum[nb]
            keep = (src_in >= 0) | (nb_in >= 0)
            edges.append(
                (axis, src[keep], nb[keep], src_in[keep], nb_in[keep])
            )
        self._edges = edges
        w = h ** (m - 2)
        rows, cols, vals = [], [], []
        diag = np.zeros(n)
        for axis, src, nb, src_in, nb_in in edges:
            si = src_in >= 0
            ni = nb_in >= 0
            np.add.at(diag, src_in[si], w)
            np.add.at(diag, nb_in[ni], w)
            both = si & ni
            rows.extend(src_in[both])
            cols.extend(nb_in[both])
            vals.extend(-w * np.ones(int(np.sum(both))))
        K = sp.coo_matrix(
            (
                np.concatenate([vals, vals, diag]),
                (
                    np.concatenate([rows, cols, np.arange(n)]),
                    np.concatenate([cols, rows, np.arange(n)]),
                ),
            ),
            shape=(n, n),
        ).tocsc()
        self._solve = spla.factorized(K)

    def load_vector(self, T):
        """Assemble c with T(theta) = c . theta over interior nodes."""
        dom = self.domain
        h = dom.spacing
        m = dom.m
        codim = T.codim
        n = len(self.flat_int)
        c = np.zeros((n, codim))
        if T.density is not None:
            dens = T.density.values.reshape((dom.node_count, -1))
            dmask = T.density.mask.reshape(-1)
            sel = self.flat_int
            c += np.where(
                dmask[sel, None], dens[sel], 0.0
            ) * h ** m
        if T.flux is not None:
            g = T.flux.values.reshape((dom.node_count, codim, m))
            gmask = T.flux.mask.reshape(-1)
            for axis, src, nb, src_in, nb_in in self._edges:
                ms = gmask[src]
                mn = gmask[nb]
                # edge value of g: average of valid endpoints
                num = np.where(ms[:, None], g[src, :, axis], 0.0) + np.where(
                    mn[:, None], g[nb, :, axis], 0.0
                )
                cnt = ms.astype(float) + mn.astype(float)
                gbar = num / np.maximum(cnt, 1.0)[:, None]
                # -int g . Dtheta with edge gradient (theta_nb - theta_src)/h
                contrib = gbar * h ** (m - 1)
                si = src_in >= 0
                ni = nb_in >= 0
                np.add.at(c, src_in[si], contrib[si])
                np.subtract.at(c, nb_in[ni], contrib[ni])
        return c

    def norm(self, T):
        c = self.load_vector(T)
        total = 0.0
        for k in range(c.shape[1]):
            total += float(c[:, k] @ self._solve(c[:, k]))
        return math.sqrt(max(total, 0.0))

    def best_constant(self, T):
        """Constant density y minimizing |T - T_y| in this ball."""
        codim = T.codim
        c0 = self.load_vector(T)
        basis = []
        for k in range(codim):
            e = np.zeros(codim)
            e[k] = 1.0
            ck = self.load_vector(
                ConstantDistribution(self.domain, e)
            )
            basis.append(ck)
        # minimize |c0 - sum y_k ck|_{K^-1}; normal equations in y
        G = np.zeros((codim, codim))
        b = np.zeros(codim)
        sol_basis = [
            np.stack([self._solve(ck[:, j]) for j in range(codim)], axis=1)
            for ck in basis
        ]
        for i in range(codim):
            b[i] = float(np.sum(c0 * sol_basis[i]))
            for j in range(codim):
                G[i, j] = float(np.sum(basis[j] * sol_basis[i]))
        y = np.linalg.solve(G, b)
        return y


_PROFILE_KINDS = ("bump", "cone", "mollind", "tensor")


def _smooth_transition(t):
    """C-infinity step: 1 for t <= 0, 0 for t >= 1."""
    t = np.asarray(t, dtype=float)
    a = np.where(t < 1.0, np.exp(-1.0 / np.maximum(1.0 - t, 1e-300)), 0.0)
    b = np.where(t > 0.0, np.exp(-1.0 / np.maximum(t, 1e-300)), 0.0)
    return a / (a + b)


def _profile_values(kind, nodes, center, rho):
    x = (nodes - center) / rho
    if kind == "tensor":
        # cube of half-side rho/sqrt(m) sits inside the ball of radius rho
        half = 1.0 / math.sqrt(nodes.shape[-1])
        t = np.abs(x) / half
        t2 = np.clip(t * t, 0.0, 1.0)
        per = np.where(t < 1.0, np.exp(1.0 - 1.0 / np.maximum(1.0 - t2, 1e-300)), 0.0)
        return np.prod(per, axis=-1)
    r = np.sqrt(np.sum(x * x, axis=-1))
    if kind == "bump":
        r2 = np.clip(r * r, 0.0, 1.0)
        return np.where(r < 1.0, np.exp(1.0 - 1.0 / np.maximum(1.0 - r2, 1e-300)), 0.0)
    if kind == "cone":
        return np.maximum(1.0 - r, 0.0)
    if kind == "mollind":
        # smooth indicator: 1 up to 0.6*rho, 0 from rho on
        return _smooth_transition((r - 0.6) / 0.4)
    raise ValueError(f"unknown profile kind {kind!r}")


def dual_norm_dictionary(T, q, ball, scales=(1.0, 0.5, 0.25)):
    """Dictionary lower bound for |T|_{-1,q;a,r}.

    Maximizes T(s * e)/||Ds||_p over radial/tensor profiles s at the given
    scale fractions and unit directions e (optimal direction closed-form).
    Returns (value, per-profile table).
    """
    p = math.inf if q == 1.0 else q / (q - 1.0)
    dom = T.domain
    nodes = dom.nodes()
    center = np.asarray(ball.center)
    codim = T.codim
    best = 0.0
    table = []
    for kind in _PROFILE_KINDS:
        for s in scales:
            rho = ball.radius * s
            if rho < 2 * dom.spacing:
                continue
            prof = _profile_values(kind, nodes, center, rho)
            sf = SampledField(dom, prof[..., None])
            v = np.zeros(codim)
            for k in range(codim):
                vals = np.zeros(dom.shape + (codim,))
                vals[..., k] = prof
                v[k] = T.action(SampledField(dom, vals))
            try:
                denom = lp_seminorm(weak_gradient(sf, 1), p, ball)
            except ValueError:
                continue
            if denom <= 0:
                continue
            val = float(np.linalg.norm(v)) / denom
            table.append({"kind": kind, "scale": s, "value": val})
            best = max(best, val)
    return best, table


def dual_norm(T, q, ball, valid=None, return_details=False):
    """|T|_{-1,q;a,r}: sup of T(theta) over tests with ||Dtheta||_p <= 1.

    q = 2 solves the discrete constrained maximization exactly (sparse SPD
    solve); other q report the maximum over a fixed profile dictionary,
    which is a lower bound for the discrete supremum.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    if valid is None:
        valid = np.ones(T.domain.shape, dtype=bool)
        if T.density is not None:
            valid &= T.density.mask
        if T.flux is not None:
            valid &= T.flux.mask
    if q == 2:
        solver = DualNormSolver(T.domain, ball, valid)
        val = solver.norm(T)
        if return_details:
            return val, {"method": "poisson"}
        return val
    val, table = dual_norm_dictionary(T, q, ball)
    if return_details:
        return val, {"method": "dictionary", "table": table}
    return val


# -- rescaling -----------------------------------------------------------


def scale_translate(f, a, r, out_spacing=None, max_nodes_per_axis=513):
    """The rescaled field x -> u(a + r x)/r on a unit-ball grid.

    Resampled by multilinear interpolation; raises if the image of the
    closed unit ball leaves the source grid box.
    """
    a = np.asarray(a, dtype=float)
    dom = f.domain
    lo = np.asarray(dom.origin)
    hi = lo + np.asarray(dom.extent)
    if np.any(a - r < lo - 1e-12) or np.any(a + r > hi + 1e-12):
        raise ValueError("rescaled ball leaves the domain")
    if out_spacing is None:
        out_spacing = dom.spacing / r
        min_allowed = 2.0 / (max_nodes_per_axis - 1)
        out_spacing = max(out_spacing, min_allowed)
        out_spacing = min(out_spacing, 0.25)
    out_dom = cube_domain(dom.m, 1.0, out_spacing)
    pts = out_dom.nodes().reshape(-1, dom.m)
    vals, ok = f.interpolate(a + r * pts)
    vals = vals / r
    vals[~ok] = 0.0
    return SampledField(
        out_dom,
        vals.reshape(out_dom.shape + f.value_shape),
        ok.reshape(out_dom.shape),
    )


# -- field file format ---------------------------------------------------


def save_field(path, f, fmt="binary"):
    """Write a field as JSON header + node values.

    binary: little-endian float64, C (row-major) order, mask as packed bits;
    csv: one row per node with indices, validity, and value columns.
    """
    import pathlib

    path = pathlib.Path(path)
    header = f.domain.to_header(
        value_shape=f.value_shape,
        extra={
            "codim": f.codim,
            "format": fmt,
            "dtype": "float64",
            "byte_order": "little-endian",
            "layout": "C",
        },
    )
    if fmt == "binary":
        header["values_file"] = path.stem + ".bin"
        header["mask"] = base64.b64encode(
            np.packbits(f.mask.reshape(-1))
        ).decode("ascii")
        path.with_suffix(".json").write_text(
            json.dumps(header, sort_keys=True, indent=1)
        )
        f.values.astype("<f8").tofile(path.with_suffix(".bin"))
    elif fmt == "csv":
        header["values_file"] = path.stem + ".csv"
        path.with_suffix(".json").write_text(
            json.dumps(header, sort_keys=True, indent=1)
        )
        flat = f.values.reshape((f.domain.node_count, -1))
        mflat = f.mask.reshape(-1).astype(int)
        cols = flat.shape[1]
        with open(path.with_suffix(".csv"), "w") as fh:
            names = ",".join(f"v{k}" for k in range(cols))
            fh.write(f"node,valid,{names}\n")
            for i in range(flat.shape[0]):
                row = ",".join(repr(float(x)) for x in flat[i])
                fh.write(f"{i},{mflat[i]},{row}\n")
    else:
        raise ValueError("fmt must be 'binary' or 'csv'")
    return path.with_suffix(".json")


def load_field(path):
    import pathlib

    path = pathlib.Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    dom = GridDomain(
        header["m"],
        tuple(header["origin"]),
        tuple(header["extent"]),
        header["spacing"],
    )
    vshape = tuple(header["value_shape"])
    n = dom.node_count
    if header["format"] == "binary":
        vals = np.fromfile(
            path.with_suffix(".bin"), dtype="<f8"
        ).reshape(dom.shape + vshape)
        bits = np.unpackbits(
            np.frombuffer(base64.b64decode(header["mask"]), dtype=np.uint8)
        )[:n]
        mask = bits.astype(bool).reshape(dom.shape)
    else:
        raw = np.loadtxt(
            path.with_suffix(".csv"), delimiter=",", skiprows=1
        ).reshape((n, -1))
        mask = raw[:, 1].astype(bool).reshape(dom.shape)
        vals = raw[:, 2:].reshape(dom.shape + vshape)
    return SampledField(dom, vals, mask)
