"""Tilt-excess decay: quarter-scale scans, induction bookkeeping, and
the L2 differentiability quotient of tangent-plane fields.

The central objects are phi(a, r, T), the ball tilt-excess of a particle
varifold against a fixed plane, and its cylinder variant
f(r) = r^(-m/2) (sum_{C(T,a,r,r)} w |P - T|^2)^(1/2).  decay_scan fits
the power law phi ~ r^tau over well-resolved quarter scales;
quarter_induction measures the one-step inequality

    f(r/4) <= 2^m (delta f(r) + Gamma (height + curvature))

at every scanned scale together with the mass-ratio hypotheses it needs,
and reports whether the resulting chain f(r) <= Delta3 r closes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .fields import Ball, unit_ball_measure
from .varifold import Cylinder, _dictionary_sup, mass, mean_curvature_estimate, tilt_excess

__all__ = [
    "DecayReport",
    "theoretical_exponent",
    "default_delta",
    "psi_measure",
    "decay_scan",
    "quarter_induction",
    "l2_diff_check",
]


def default_delta(m):
    """Quarter-step absorption constant 2^(-m-3)."""
    return 2.0 ** (-m - 3)


def theoretical_exponent(m, p):
    """Decay exponent of the tilt excess for dimension m, integrability p.

    Linear decay for m <= 2 (p > 1 when m = 2) and for
    p >= 2m/(m+2) when m > 2; otherwise m p / (2 (m - p)), capped at 1.
    """
    if m <= 2:
        return 1.0
    if p >= m:
        return 1.0
    return min(1.0, m * p / (2.0 * (m - p)))


@dataclass
class DecayReport:
    """Per-point tilt-decay record: scan values, fit, induction state."""

    point: np.ndarray
    plane: np.ndarray
    radii: np.ndarray
    phi: np.ndarray
    resolved: np.ndarray
    tau_hat: float = math.nan
    tau_band: tuple = (math.nan, math.nan)
    tau_theory: float = math.nan
    tau_undefined: bool = False
    steps: list = field(default_factory=list)
    step_pass: np.ndarray = None
    hypothesis_failures: list = field(default_factory=list)
    delta: float = math.nan
    delta2_hat: float = math.nan
    delta3_hat: float = math.nan
    gamma_hat: float = math.nan
    chain_closes: bool = None
    Q: int = None

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        self.plane = np.asarray(self.plane, dtype=float)
        self.radii = np.asarray(self.radii, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        if len(self.radii) > 1:
            ratios = self.radii[1:] / self.radii[:-1]
            if np.any(np.abs(ratios - 0.25) > 1e-9):
                raise ValueError("radii must decrease by factor 4")
        if np.any(self.phi < 0):
            raise ValueError("negative tilt excess")
        if self.resolved is None:
            self.resolved = np.ones(len(self.radii), dtype=bool)
        self.resolved = np.asarray(self.resolved, dtype=bool)

    def to_csv(self):
        cols = ["r", "phi", "resolved", "tau_hat", "tau_theory",
                "step_pass"]
        pt_cols = [f"x{i}" for i in range(len(self.point))]
        lines = [",".join(pt_cols + cols)]
        for k, r in enumerate(self.radii):
            sp = ""
            if self.step_pass is not None and k < len(self.step_pass):
                sp = str(bool(self.step_pass[k]))
            row = [repr(float(c)) for c in self.point] + [
                repr(float(r)),
                repr(float(self.phi[k])),
                str(bool(self.resolved[k])),
                repr(float(self.tau_hat)),
                repr(float(self.tau_theory)),
                sp,
            ]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def _median_nn_spacing(V, a, r):
    idx = V.tree.query_ball_point(np.asarray(a, dtype=float), r)
    if len(idx) < 2:
        return math.inf
    pts = V.z[np.asarray(idx, dtype=int)]
    d = cKDTree(pts).query(pts, k=2)[0][:, 1]
    return float(np.median(d))


def psi_measure(V, ball, p, probe_radius=None, probe_count=12):
    """Curvature measure of a ball: total variation of the first
    variation for p = 1, else the |h|^p-weighted mass.

    For p > 1 the mean curvature is estimated at a deterministic probe
    subset of the ball's particles and averaged; exact for corpora with
    constant |h|.
    """
    center = np.asarray(ball.center, dtype=float)
    idx = V.tree.query_ball_point(center, ball.radius)
    if len(idx) == 0:
        return 0.0
    idx = np.asarray(sorted(idx), dtype=int)
    if p == 1:
        return _dictionary_sup(
            V.z[idx], V.P[idx], V.w[idx], center, ball.radius,
            extra_centers=True,
        )
    if probe_radius is None:
        probe_radius = ball.radius / 3.0
    stride = max(1, len(idx) // probe_count)
    probes = idx[::stride][:probe_count]
    mags = []
    for pi in probes:
        try:
            h, _ = mean_curvature_estimate(V, V.z[pi], probe_radius)
        except ValueError:
            continue
        mags.append(np.linalg.norm(h) ** p)
    if not mags:
        raise ValueError("no curvature probe succeeded")
    return float(np.mean(mags)) * float(np.sum(V.w[idx]))


def decay_scan(V, a, T, r0, K, min_particles=50, p=2.0):
    """phi(a, r0 4^-k, T) for k = 0..K with a log-log exponent fit.

    Scales are resolved when the ball holds at least ``min_particles``
    particles and the radius is at least 8 local median spacings.  The
    fitted exponent carries a two-standard-error band; when every
    resolved value vanishes the exponent is flagged undefined.  ``p``
    only selects the theoretical exponent recorded for comparison.
    """
    a = np.asarray(a, dtype=float)
    T = np.asarray(T, dtype=float)
    radii = r0 * 4.0 ** (-np.arange(K + 1, dtype=float))
    spacing = _median_nn_spacing(V, a, r0)
    phi = np.array([tilt_excess(V, a, r, T) for r in radii])
    counts = np.array([
        len(V.tree.query_ball_point(a, r)) for r in radii
    ])
    resolved = (radii >= 8.0 * spacing) & (counts >= min_particles)
    if not resolved.any():
        raise ValueError("under-resolved at every scale")
    rep = DecayReport(
        point=a, plane=T, radii=radii, phi=phi, resolved=resolved,
        tau_theory=theoretical_exponent(V.m, p),
    )
    use = resolved & (phi > 0)
    if int(np.sum(use)) >= 2:
        x = np.log(radii[use])
        y = np.log(phi[use])
        k = len(x)
        xb = x - x.mean()
        slope = float(np.sum(xb * y) / np.sum(xb * xb))
        rep.tau_hat = slope
        if k > 2:
            resid = y - (y.mean() + slope * xb)
            se = math.sqrt(
                float(np.sum(resid ** 2)) / (k - 2) / float(np.sum(xb * xb))
            )
            rep.tau_band = (slope - 2.0 * se, slope + 2.0 * se)
        else:
            rep.tau_band = (slope, slope)
    else:
        rep.tau_undefined = True
    return rep


def _cyl_tilt2(V, cyl, T):
    sel = cyl.contains(V.z)
    if not np.any(sel):
        return 0.0
    diff = V.P[sel] - T
    return float(np.sum(V.w[sel] * np.sum(diff * diff, axis=(1, 2))))


def quarter_induction(V, a, T, r_range, delta=None, gamma=None,
                      Z_mask=None, p=1.5, psi_probe_count=12,
                      epsilon=None):
    """Measure the quarter-scale tilt inequality at each scanned scale.

    Per scale r the report records f(r), the quarter value
    q(r) = 2^-m f(r/4), the height term over the Z particles of
    C(T, a, r, 3r), the curvature term r^(1-m/p) psi(B(a,6r))^(1/p), the
    per-scale constant needed to satisfy
    q <= delta f + Gamma (height + curvature), and the mass-ratio
    hypotheses (multiplicity band, annulus, total mass against 7^m Q,
    half-scale lower bound).  A step passes when its needed constant is
    at most twice the median over scales; the chain closes when every
    step passes and no hypothesis fails.  ``gamma``, when given, also
    gates the drift term by gamma r per scale.
    """
    a = np.asarray(a, dtype=float)
    T = np.asarray(T, dtype=float)
    m = V.m
    if delta is None:
        delta = default_delta(m)
    radii = np.asarray(sorted(r_range, reverse=True), dtype=float)
    if len(radii) > 1:
        ratios = radii[1:] / radii[:-1]
        if np.any(np.abs(ratios - 0.25) > 1e-9):
            raise ValueError("radii must decrease by factor 4")
    am = unit_ball_measure(m)
    if Z_mask is None:
        Z_mask = np.ones(len(V), dtype=bool)
    Z_mask = np.asarray(Z_mask, dtype=bool)
    r0 = radii[0]
    c_r3_0 = mass(V, Cylinder.over(a, T, r0, 3 * r0))
    Q = max(1, int(round(c_r3_0 / (am * r0 ** m))))
    M = 7 ** m * Q
    perp = np.eye(V.n) - T

    steps = []
    failures = []
    phi = []
    for r in radii:
        c_r3 = mass(V, Cylinder.over(a, T, r, 3 * r))
        c_rr = mass(V, Cylinder.over(a, T, r, r))
        c_r4 = mass(V, Cylinder.over(a, T, r, 4 * r))
        c_half = mass(V, Cylinder.over(a, T, r / 2, r / 2))
        b6 = mass(V, Ball(tuple(a), 6 * r))
        fails = []
        if not (Q - 0.5) * am * r ** m <= c_r3:
            fails.append("lower")
        if not c_r3 <= (Q + 0.5) * am * r ** m:
            fails.append("upper")
        if not c_r4 - c_rr <= 0.5 * am * r ** m:
            fails.append("annulus")
        if not b6 <= M * am * r ** m:
            fails.append("total")
        if not c_half >= (Q - 0.25) * am * (r / 2) ** m:
            fails.append("halfscale")
        zc = Cylinder.over(a, T, r, 3 * r)
        in_c3 = zc.contains(V.z)
        z_complement = float(np.sum(V.w[in_c3 & ~Z_mask]))
        tilt6 = tilt_excess(V, a, 6 * r, T) * (6 * r) ** (m / 2.0)
        if epsilon is not None:
            if not z_complement <= epsilon * am * r ** m:
                fails.append("z_mass")
            if not tilt6 <= epsilon * r ** (m / 2.0):
                fails.append("tilt_smallness")
        failures.append(fails)

        f_r = math.sqrt(_cyl_tilt2(V, Cylinder.over(a, T, r, r), T)
                        / r ** m)
        q_r = math.sqrt(
            _cyl_tilt2(V, Cylinder.over(a, T, r / 4, r / 4), T) / r ** m
        )
        in_z3 = in_c3 & Z_mask
        height = float(
            np.sum(V.w[in_z3]
                   * np.linalg.norm((V.z[in_z3] - a) @ perp.T, axis=1))
        ) / r ** (m + 1)
        curv = r ** (1.0 - m / p) * psi_measure(
            V, Ball(tuple(a), 6 * r), p, probe_count=psi_probe_count
        ) ** (1.0 / p)
        drift = height + curv
        gap = q_r - delta * f_r
        if drift > 0:
            needed = max(0.0, gap) / drift
        else:
            needed = 0.0 if gap <= 1e-14 else math.inf
        steps.append({
            "r": float(r), "f": f_r, "quarter": q_r, "height": height,
            "curvature": curv, "drift": drift, "needed": needed,
            "z_complement_ratio": z_complement / (am * r ** m),
            "tilt6_ratio": tilt6 / r ** (m / 2.0),
            "drift_bounded": bool(drift <= gamma * r)
            if gamma is not None else None,
        })
        phi.append(tilt_excess(V, a, r, T))

    finite = [s["needed"] for s in steps if math.isfinite(s["needed"])]
    gamma_const = float(np.median(finite)) if finite else 0.0
    for s in steps:
        s["passes"] = bool(
            s["quarter"]
            <= delta * s["f"] + 2.0 * gamma_const * s["drift"] + 1e-12
        )
    f_ratios = [s["f"] / s["r"] for s in steps]
    delta2 = max(finite) if finite else 0.0
    rep = DecayReport(
        point=a, plane=T, radii=radii, phi=np.asarray(phi),
        resolved=np.ones(len(radii), dtype=bool),
        tau_theory=theoretical_exponent(m, p),
        steps=steps,
        step_pass=np.array([s["passes"] for s in steps]),
        hypothesis_failures=failures,
        delta=float(delta),
        delta2_hat=float(delta2),
        delta3_hat=float(max(f_ratios)) if f_ratios else 0.0,
        gamma_hat=float(max(s["drift"] / s["r"] for s in steps))
        if steps else 0.0,
        chain_closes=bool(
            all(s["passes"] for s in steps)
            and all(not f for f in failures)
        ),
        Q=Q,
    )
    return rep


def l2_diff_check(V, points, radii, fit_min_particles=16):
    """Mean-value quotient of the tangent-plane field against its
    fitted first-order model, per point and radius.

    The approximate derivative of z -> P(z) at a is a weighted linear
    regression of the particle planes on tangential coordinates inside
    the smallest scanned ball (the most local well-posed fit); the
    quotient at radius r is the ||V||-mean of
    (|P(z) - P(a) - <coords, slope>| / |z - a|)^2 over B(a, r).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    radii = np.asarray(sorted(radii, reverse=True), dtype=float)
    out = []
    for a in pts:
        dist, nearest = V.tree.query(a)
        P_a = V.P[nearest]
        vals, vecs = np.linalg.eigh(P_a)
        basis = vecs[:, np.argsort(vals)[::-1][:V.m]].T
        slope = None
        for r in radii[::-1]:
            idx = np.asarray(V.tree.query_ball_point(a, r), dtype=int)
            idx = idx[np.linalg.norm(V.z[idx] - a, axis=1) > 1e-12]
            if len(idx) < fit_min_particles:
                continue
            t = (V.z[idx] - a) @ basis.T
            w = V.w[idx]
            G = (t * w[:, None]).T @ t
            if np.linalg.matrix_rank(
                G, tol=1e-10 * max(float(np.max(np.abs(G))), 1e-300)
            ) < V.m:
                continue
            dP = (V.P[idx] - P_a).reshape(len(idx), -1)
            slope = np.linalg.solve(G, (t * w[:, None]).T @ dP)
            break
        if slope is None:
            raise ValueError("regression rank-deficient")
        quotients = []
        for r in radii:
            idx = np.asarray(V.tree.query_ball_point(a, r), dtype=int)
            d = V.z[idx] - a
            dn = np.linalg.norm(d, axis=1)
            keep = dn > 1e-12
            idx, d, dn = idx[keep], d[keep], dn[keep]
            if len(idx) == 0:
                quotients.append(math.nan)
                continue
            t = d @ basis.T
            model = (t @ slope).reshape(len(idx), V.n, V.n)
            resid = V.P[idx] - P_a - model
            num = np.sum(
                V.w[idx]
                * (np.linalg.norm(resid.reshape(len(idx), -1), axis=1)
                   / dn) ** 2
            )
            quotients.append(float(num / np.sum(V.w[idx])))
        q = np.asarray(quotients)
        finite = q[np.isfinite(q)]
        dec = bool(
            len(finite) >= 3
            and np.all(finite[1:] <= finite[:-1] * 1.05 + 1e-15)
        )
        out.append({
            "point": a,
            "radii": radii,
            "quotient": q,
            "slope": slope,
            "trending_to_floor": dec,
        })
    return out
