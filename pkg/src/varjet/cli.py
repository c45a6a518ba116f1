"""Command-line front end wiring generators, analyses, and reports.

Each subcommand consumes one JSON config file (all defaults are
materialized into the report header so outputs are self-describing),
honors --out/--seed/--threads overrides, and writes delimited CSV
reports with JSON sidecars plus rendered PNG figures alongside them.
Exit status: 0 on success, 2 when an analysis quality gate fails, 1 on
usage or config errors.  Equal config + seed produce byte-identical
reports; --threads only parallelizes independent per-point work and
never changes output bytes.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .crit import classify_criterion, lebesgue_scan, quarter_radii, taylor_fit
from .decay import decay_scan, quarter_induction
from .elliptic import (
    apriori_suite,
    area_integrand,
    cutoff_integrand,
    dirichlet_integrand,
)
from .fields import Ball, DistributionRep
from .synth import (
    SPECIAL_KINDS,
    field_example,
    gen_graph_varifold,
    gen_special,
    read_ground_truth,
    write_corpus,
)
from .varifold import (
    GraphFrame,
    graph_extract,
    load_varifold,
    mean_curvature_estimate,
    tilt_minimizing_matrix,
)

__all__ = ["main", "report_merge", "UsageError"]

THREADS_ENV = "VARJET_THREADS"
PROVENANCE_COLS = ("version", "config_hash", "thresholds_from")


class UsageError(Exception):
    """Invalid flags, config, or inputs; mapped to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


DEFAULTS = {
    "synth": {
        "seed": 0,
        "kind": "sphere",
        "params": {},
        "particles_name": "particles.jsonl",
        "truth_name": "truth.jsonl",
    },
    "crit": {
        "seed": 0,
        "field": "trig_quartic",
        "spacing": 2.0 ** -7,
        "half": 1.0,
        "integrand": "area_cutoff",
        "delta": 0.25,
        "n_points": 8,
        "margin": 0.3,
        "r0": 0.25,
        "k_max": 5,
        "p": 2.0,
        "min_class_fraction": 0.99,
        "hess_tol_factor": 5.0,
    },
    "lebesgue": {
        "seed": 0,
        "field": "quadratic",
        "spacing": 2.0 ** -7,
        "half": 1.0,
        "qs": [1.0, 2.0],
        "n_points": 6,
        "margin": 0.3,
        "r0": 0.25,
        "density_tol": 1e-3,
    },
    "varifold": {
        "seed": 0,
        "particles": None,
        "truth": None,
        "sample_count": 48,
        "curvature_radius": 0.25,
        "rel_tol": 0.05,
        "flat_tol": 0.02,
        "exclusion_factor": 0.2,
        "extract": None,
        "min_coverage": 0.95,
    },
    "decay": {
        "seed": 0,
        "particles": None,
        "truth": None,
        "points": None,
        "r0": 0.5,
        "K": 2,
        "p": 2.0,
        "min_particles": 50,
        "induction": False,
        "induction_radii": None,
        "require_chain": True,
    },
    "apriori": {
        "seed": 20,
        "integrand": "dirichlet",
        "m": 2,
        "codim": 1,
        "radius": 0.5,
        "delta": 0.5,
        "spacings": [2.0 ** -4, 2.0 ** -5],
        "trials": 2,
        "p": 2.0,
        "stability_factor": 1.5,
    },
}

THRESHOLD_KEYS = {
    "synth": set(),
    "crit": {"min_class_fraction", "hess_tol_factor"},
    "lebesgue": {"density_tol"},
    "varifold": {"rel_tol", "flat_tol", "min_coverage"},
    "decay": {"require_chain", "min_particles"},
    "apriori": {"stability_factor"},
}


def _require(cond, msg):
    if not cond:
        raise UsageError(msg)


def _positive(cfg, keys):
    for k in keys:
        _require(cfg[k] is not None and float(cfg[k]) > 0,
                 f"config {k!r} must be positive")


def _pmap(fn, items, threads):
    """Order-preserving map, optionally on a thread pool."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _jsonable(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (float, np.floating)):
        return float(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    return v


def _config_hash(command, cfg):
    blob = json.dumps(
        {"command": command, "version": __version__, "config": cfg},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _load_config(command, path):
    cfg = copy.deepcopy(DEFAULTS[command])
    user_keys = set()
    if path is not None:
        try:
            raw = Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}")
        try:
            user = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}")
        _require(isinstance(user, dict), "config must be a JSON object")
        unknown = sorted(set(user) - set(cfg))
        _require(not unknown, f"unknown config keys: {', '.join(unknown)}")
        cfg.update(user)
        user_keys = set(user)
    return cfg, user_keys


def _write_report(out, name, columns, rows, header):
    """CSV plus JSON sidecar; every row carries provenance columns."""
    cols = list(columns) + list(PROVENANCE_COLS)
    prov = [header["version"], header["config_hash"],
            header["thresholds_from"]]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in rows:
        writer.writerow([_cell(row[c]) for c in columns] + prov)
    (out / f"{name}.csv").write_text(buf.getvalue())
    blob = {
        **header,
        "columns": cols,
        "rows": [
            {**{c: _jsonable(row[c]) for c in columns},
             "version": prov[0], "config_hash": prov[1],
             "thresholds_from": prov[2]}
            for row in rows
        ],
    }
    (out / f"{name}.json").write_text(
        json.dumps(blob, sort_keys=True, indent=1) + "\n")


def _render_figures(out, figures):
    if not figures:
        return
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    for name, draw in figures:
        fig = plt.figure(figsize=(6.0, 4.5))
        try:
            draw(fig)
            fig.tight_layout()
            fig.savefig(out / f"{name}.png", dpi=110)
        finally:
            plt.close(fig)


def _interior_node_sample(f, margin, n_points, seed):
    dom = f.domain
    nodes = dom.nodes().reshape(-1, dom.m)
    lo = np.asarray(dom.origin) + margin
    hi = np.asarray(dom.origin) + np.asarray(dom.extent) - margin
    pool = np.flatnonzero(
        np.all((nodes >= lo - 1e-12) & (nodes <= hi + 1e-12), axis=1))
    _require(len(pool) >= n_points,
             "margin leaves fewer interior nodes than n_points")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(pool, size=n_points, replace=False))
    return nodes[chosen], chosen


# ---------------------------------------------------------------- synth

def _graph_jet(name, eps):
    if name == "flat":
        return (
            lambda x: np.zeros(len(x)),
            lambda x: np.zeros_like(x),
            lambda x: np.zeros((len(x), x.shape[1], x.shape[1])),
        )
    if name == "sine":
        def hess(x):
            out = np.zeros((len(x), x.shape[1], x.shape[1]))
            out[:, 0, 0] = -eps * np.sin(x[:, 0])
            return out

        return (
            lambda x: eps * np.sin(x[:, 0]),
            lambda x: np.concatenate(
                [eps * np.cos(x[:, [0]]),
                 np.zeros((len(x), x.shape[1] - 1))], axis=1),
            hess,
        )
    if name == "sine_product":
        def hess2(x):
            out = np.empty((len(x), 2, 2))
            s0, c0 = np.sin(x[:, 0]), np.cos(x[:, 0])
            s1, c1 = np.sin(x[:, 1]), np.cos(x[:, 1])
            out[:, 0, 0] = -eps * s0 * c1
            out[:, 1, 1] = -eps * s0 * c1
            out[:, 0, 1] = out[:, 1, 0] = -eps * c0 * s1
            return out

        return (
            lambda x: eps * np.sin(x[:, 0]) * np.cos(x[:, 1]),
            lambda x: np.stack(
                [eps * np.cos(x[:, 0]) * np.cos(x[:, 1]),
                 -eps * np.sin(x[:, 0]) * np.sin(x[:, 1])], axis=1),
            hess2,
        )
    raise UsageError(f"unknown graph profile {name!r}")


def run_synth(cfg, out, threads):
    kind = cfg["kind"]
    _require(isinstance(cfg["params"], dict), "params must be an object")
    params = dict(cfg["params"])
    params["seed"] = cfg["seed"]
    if kind == "graph":
        jet = _graph_jet(params.pop("u", "sine"), params.pop("eps", 0.1))
        region = params.pop("region", [[-1.0, 1.0], [-1.0, 1.0]])
        density = params.pop("density", 2500.0)
        try:
            V, gt = gen_graph_varifold(jet, region, density, **params)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad graph params: {exc}")
    elif kind in SPECIAL_KINDS:
        try:
            V, gt = gen_special(kind, **params)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad params for {kind!r}: {exc}")
    else:
        raise UsageError(
            f"unknown kind {kind!r}; choose graph or one of "
            + ", ".join(SPECIAL_KINDS))
    write_corpus(out / cfg["particles_name"], out / cfg["truth_name"],
                 V, gt)
    rows = [{
        "kind": kind,
        "particles": len(V),
        "ambient_dim": V.n,
        "surface_dim": V.m,
        "total_mass": V.total_mass(),
        "seed": cfg["seed"],
        "particles_file": cfg["particles_name"],
        "truth_file": cfg["truth_name"],
    }]
    mags = np.linalg.norm(gt.curvature, axis=1)

    def draw(fig):
        ax = fig.add_subplot(111)
        sc = ax.scatter(V.z[:, 0], V.z[:, -1], c=mags, s=3.0,
                        cmap="viridis")
        fig.colorbar(sc, ax=ax, label="curvature magnitude")
        ax.set_xlabel("x0")
        ax.set_ylabel(f"x{V.n - 1}")
        ax.set_title(f"{kind}: {len(V)} particles")
        ax.set_aspect("equal", adjustable="datalim")

    cols = ["kind", "particles", "ambient_dim", "surface_dim",
            "total_mass", "seed", "particles_file", "truth_file"]
    return [("synth_report", cols, rows)], [("synth_corpus", draw)], []


# ----------------------------------------------------------------- crit

def _field_and_truth(cfg):
    try:
        return field_example(cfg["field"], cfg["spacing"], cfg["half"])
    except ValueError as exc:
        raise UsageError(str(exc))


def run_crit(cfg, out, threads):
    _positive(cfg, ("spacing", "half", "delta", "r0", "margin"))
    _require(cfg["p"] >= 1.0, "p must be at least 1")
    u, gt = _field_and_truth(cfg)
    m = u.domain.m
    if cfg["integrand"] == "area_cutoff":
        F = cutoff_integrand(area_integrand(m, 1), np.zeros((1, m)),
                             cfg["delta"])
    elif cfg["integrand"] == "dirichlet":
        F = dirichlet_integrand(m, 1)
    else:
        raise UsageError("integrand must be area_cutoff or dirichlet")
    pts, node_idx = _interior_node_sample(
        u, cfg["margin"], cfg["n_points"], cfg["seed"])
    radii = quarter_radii(cfg["r0"], cfg["spacing"])
    # jet fit wants a tighter ball than the classification scan: the
    # quadratic-fit bias scales with the fit radius squared
    fit_radii = [cfg["r0"], 4.0 * cfg["spacing"]]

    def one(i):
        rep = classify_criterion(u, F, pts[i:i + 1], radii,
                                 cfg["k_max"], p=cfg["p"])
        jet, _ = taylor_fit(u, pts[i], fit_radii, p=cfg["p"])
        err = float(np.max(np.abs(
            jet.hessian[0] - gt.jet["hessian"][node_idx[i]])))
        return rep, err

    results = _pmap(one, range(len(pts)), threads)
    hess_tol = cfg["hess_tol_factor"] * cfg["spacing"] ** 2
    rows = []
    for i, (rep, err) in enumerate(results):
        k = rep.k_values[0]
        h_vals = rep.tables["h"][0]
        h_vals = h_vals[np.isfinite(h_vals)]
        rows.append({
            **{f"x{j}": pts[i][j] for j in range(m)},
            "in_A": bool(rep.flags["A"][0]),
            "k": ("inf" if not np.isfinite(k) else int(k)),
            "deficit_max": (float(np.max(h_vals)) if len(h_vals)
                            else math.inf),
            "hess_err": err,
            "hess_tol": hess_tol,
        })
    cols = [f"x{j}" for j in range(m)] + [
        "in_A", "k", "deficit_max", "hess_err", "hess_tol"]
    failures = []
    frac = float(np.mean([r["in_A"] for r in rows]))
    if frac < cfg["min_class_fraction"]:
        failures.append(
            f"classified fraction {frac:.3f} below "
            f"{cfg['min_class_fraction']}")
    worst = max(r["hess_err"] for r in rows)
    if worst > hess_tol:
        failures.append(
            f"max jet hessian error {worst:.3e} above {hess_tol:.3e}")

    def draw(fig):
        ax = fig.add_subplot(111)
        errs = sorted(r["hess_err"] for r in rows)
        ax.plot(errs, marker="o")
        ax.axhline(hess_tol, color="red", linestyle="--",
                   label="tolerance")
        ax.set_xlabel("point (sorted)")
        ax.set_ylabel("jet hessian error")
        ax.set_yscale("log")
        ax.legend()
        ax.set_title(f"classification: {frac:.1%} in A")

    return ([("crit_report", cols, rows)], [("crit_hessian_error", draw)],
            failures)


# ------------------------------------------------------------- lebesgue

def run_lebesgue(cfg, out, threads):
    _positive(cfg, ("spacing", "half", "r0", "margin"))
    for q in cfg["qs"]:
        _require(q >= 1.0 and math.isfinite(q),
                 "each q must be finite and at least 1")
    u, gt = _field_and_truth(cfg)
    m = u.domain.m
    T = DistributionRep(density=u)
    pts, node_idx = _interior_node_sample(
        u, cfg["margin"], cfg["n_points"], cfg["seed"])
    radii = quarter_radii(cfg["r0"], cfg["spacing"])

    def one(args):
        q, i = args
        rec = lebesgue_scan(T, q, pts[i:i + 1], radii)[0]
        return q, i, rec

    jobs = [(q, i) for q in cfg["qs"] for i in range(len(pts))]
    results = _pmap(one, jobs, threads)
    rows = []
    failures = []
    worst = 0.0
    for q, i, rec in results:
        truth = float(gt.jet["value"][node_idx[i]])
        got = float(rec.density[0]) if rec.density is not None else math.nan
        err = abs(got - truth) if rec.finite else math.inf
        worst = max(worst, err)
        rows.append({
            "q": q,
            **{f"x{j}": pts[i][j] for j in range(m)},
            "finite": bool(rec.finite),
            "density": got,
            "density_true": truth,
            "err": err,
            "ratio_last": float(rec.ratios[-1]),
            "decay_last": (float(rec.decay[-1])
                           if rec.decay is not None else math.nan),
        })
    if worst > cfg["density_tol"]:
        failures.append(
            f"max density error {worst:.3e} above {cfg['density_tol']:.1e}")
    cols = ["q"] + [f"x{j}" for j in range(m)] + [
        "finite", "density", "density_true", "err", "ratio_last",
        "decay_last"]

    def draw(fig):
        ax = fig.add_subplot(111)
        errs = [r["err"] for r in rows]
        ax.semilogy(range(len(errs)), np.maximum(errs, 1e-18), "o")
        ax.axhline(cfg["density_tol"], color="red", linestyle="--",
                   label="tolerance")
        ax.set_xlabel("scan (q, point)")
        ax.set_ylabel("|fitted - true| density")
        ax.legend()
        ax.set_title("constant-density fits")

    return ([("lebesgue_report", cols, rows)],
            [("lebesgue_density_error", draw)], failures)


# ------------------------------------------------------------- varifold

def _load_corpus(cfg):
    _require(cfg["particles"], "config 'particles' path is required")
    path = Path(cfg["particles"])
    _require(path.exists(), f"particles file not found: {path}")
    try:
        V = load_varifold(path)
    except ValueError as exc:
        raise UsageError(f"bad particle file: {exc}")
    truth = None
    if cfg["truth"]:
        tpath = Path(cfg["truth"])
        _require(tpath.exists(), f"truth file not found: {tpath}")
        truth = read_ground_truth(tpath)
        _require(len(truth.curvature) == len(V),
                 "truth and particle files disagree on particle count")
    return V, truth


def run_varifold(cfg, out, threads):
    _positive(cfg, ("curvature_radius",))
    V, truth = _load_corpus(cfg)
    idx = np.unique(np.linspace(0, len(V) - 1,
                                int(cfg["sample_count"])).astype(int))
    near_touch = np.zeros(len(idx), dtype=bool)
    href = 0.0
    if truth is not None:
        href = float(np.max(np.linalg.norm(truth.curvature, axis=1)))
        meta = truth.meta
        if meta.get("kind") == "tangent_touch":
            touch = np.asarray(meta["touch_point"], dtype=float)
            cut = cfg["exclusion_factor"] * meta["rho"]
            near_touch = (
                np.linalg.norm(V.z[idx] - touch, axis=1) < cut)

    def one(i):
        try:
            h, resid = mean_curvature_estimate(
                V, V.z[i], cfg["curvature_radius"])
            return h, resid
        except ValueError:
            return None, math.nan

    results = _pmap(one, idx, threads)
    rows = []
    bad_rel = bad_flat = 0
    checked_rel = checked_flat = 0
    for k, i in enumerate(idx):
        h, resid = results[k]
        est = float(np.linalg.norm(h)) if h is not None else math.nan
        row = {
            "index": int(i),
            **{f"x{j}": V.z[i][j] for j in range(V.n)},
            "h_est": est,
            "residual": resid,
            "h_true": math.nan,
            "piece": -1,
            "near_touch": bool(near_touch[k]),
            "gated": False,
        }
        if truth is not None:
            tru = float(np.linalg.norm(truth.curvature[i]))
            row["h_true"] = tru
            if truth.piece is not None:
                row["piece"] = int(truth.piece[i])
            if h is not None and not near_touch[k]:
                row["gated"] = True
                if tru > 1e-12:
                    checked_rel += 1
                    if abs(est - tru) > cfg["rel_tol"] * tru:
                        bad_rel += 1
                else:
                    checked_flat += 1
                    if est > cfg["flat_tol"] * max(href, 1.0):
                        bad_flat += 1
        rows.append(row)
    failures = []
    if bad_rel:
        failures.append(
            f"{bad_rel}/{checked_rel} curved samples off truth by more "
            f"than {cfg['rel_tol']:.0%}")
    if bad_flat:
        failures.append(
            f"{bad_flat}/{checked_flat} flat samples above "
            f"{cfg['flat_tol']} x reference curvature")
    cols = (["index"] + [f"x{j}" for j in range(V.n)]
            + ["h_est", "residual", "h_true", "piece", "near_touch",
               "gated"])
    reports = [("varifold_report", cols, rows)]

    if cfg["extract"] is not None:
        ex_cfg = dict(cfg["extract"])
        center = np.asarray(ex_cfg.pop("center", np.zeros(V.n)),
                            dtype=float)
        radius = ex_cfg.pop("radius", None)
        L = float(ex_cfg.pop("L", 1.0))
        q_hint = int(ex_cfg.pop("Q_hint", 1))
        spacing = ex_cfg.pop("spacing", None)
        _require(not ex_cfg,
                 f"unknown extract keys: {sorted(ex_cfg)}")
        if radius is None:
            # whole corpus: complete columns, no partially cut cells
            region = None
            r_fit = float(np.max(np.linalg.norm(V.z - center, axis=1)))
        else:
            region = Ball(tuple(center), float(radius))
            r_fit = float(radius)
        P_hat = tilt_minimizing_matrix(V, center, r_fit)
        frame = GraphFrame.from_projection(P_hat)
        try:
            ex = graph_extract(V, frame, region, L, q_hint,
                               spacing=spacing)
        except ValueError as exc:
            failures.append(f"extraction failed: {exc}")
            ex = None
        if ex is not None:
            d = ex.diagnostics
            reports.append((
                "varifold_extract",
                ["Q", "coverage", "ambiguous_fraction", "nodes",
                 "min_coverage"],
                [{
                    "Q": int(ex.Q),
                    "coverage": float(d["coverage"]),
                    "ambiguous_fraction": float(d["ambiguous_fraction"]),
                    "nodes": int(ex.K.size),
                    "min_coverage": cfg["min_coverage"],
                }],
            ))
            if d["coverage"] < cfg["min_coverage"]:
                failures.append(
                    f"extraction coverage {d['coverage']:.3f} below "
                    f"{cfg['min_coverage']}")

    def draw(fig):
        ax = fig.add_subplot(111)
        est = np.array([r["h_est"] for r in rows])
        tru = np.array([r["h_true"] for r in rows])
        ok = np.isfinite(est)
        ax.plot(np.flatnonzero(ok), est[ok], "o", label="estimate")
        if truth is not None:
            ax.plot(range(len(tru)), tru, "x", label="ground truth")
        ax.set_xlabel("sample")
        ax.set_ylabel("curvature magnitude")
        ax.legend()
        ax.set_title("mean curvature at sampled particles")

    return reports, [("varifold_curvature", draw)], failures


# ---------------------------------------------------------------- decay

def run_decay(cfg, out, threads):
    _positive(cfg, ("r0",))
    _require(cfg["p"] >= 1.0, "p must be at least 1")
    _require(cfg["points"], "config 'points' (list of points) is required")
    V, truth = _load_corpus(cfg)
    pts = np.atleast_2d(np.asarray(cfg["points"], dtype=float))
    _require(pts.shape[1] == V.n,
             f"points must have {V.n} coordinates")

    def plane_at(a):
        _, i = V.tree.query(a)
        P = truth.tangent[i] if truth is not None else V.P[i]
        return np.asarray(P, dtype=float)

    def one(a):
        T = plane_at(a)
        try:
            rep = decay_scan(V, a, T, cfg["r0"], int(cfg["K"]),
                             min_particles=int(cfg["min_particles"]),
                             p=cfg["p"])
            return rep, None
        except ValueError as exc:
            return None, str(exc)

    results = _pmap(one, pts, threads)
    rows = []
    failures = []
    reps = []
    for pi, (rep, err) in enumerate(results):
        if rep is None:
            failures.append(f"point {pts[pi].tolist()}: {err}")
            continue
        reps.append(rep)
        for k, r in enumerate(rep.radii):
            rows.append({
                "point_index": pi,
                **{f"x{j}": pts[pi][j] for j in range(V.n)},
                "r": float(r),
                "phi": float(rep.phi[k]),
                "resolved": bool(rep.resolved[k]),
                "tau_hat": float(rep.tau_hat),
                "tau_lo": float(rep.tau_band[0]),
                "tau_hi": float(rep.tau_band[1]),
                "tau_theory": float(rep.tau_theory),
                "tau_undefined": bool(rep.tau_undefined),
            })
    cols = (["point_index"] + [f"x{j}" for j in range(V.n)]
            + ["r", "phi", "resolved", "tau_hat", "tau_lo", "tau_hi",
               "tau_theory", "tau_undefined"])
    reports = [("decay_report", cols, rows)]

    if cfg["induction"]:
        radii = cfg["induction_radii"] or [cfg["r0"], cfg["r0"] / 4.0]
        irows = []
        for pi, (rep, err) in enumerate(results):
            if rep is None:
                continue
            irep = quarter_induction(V, pts[pi], plane_at(pts[pi]),
                                     radii, p=cfg["p"])
            for s in irep.steps:
                irows.append({
                    "point_index": pi,
                    "r": s["r"],
                    "f": s["f"],
                    "quarter": s["quarter"],
                    "drift": s["drift"],
                    "needed": s["needed"],
                    "passes": bool(s["passes"]),
                    "chain_closes": bool(irep.chain_closes),
                    "delta3_hat": float(irep.delta3_hat),
                    "gamma_hat": float(irep.gamma_hat),
                    "Q": int(irep.Q),
                })
            if cfg["require_chain"] and not irep.chain_closes:
                failures.append(
                    f"quarter-scale chain does not close at point "
                    f"{pts[pi].tolist()}")
        reports.append((
            "decay_induction",
            ["point_index", "r", "f", "quarter", "drift", "needed",
             "passes", "chain_closes", "delta3_hat", "gamma_hat", "Q"],
            irows,
        ))

    def draw(fig):
        ax = fig.add_subplot(111)
        drawn = 0
        for pi, rep in enumerate(reps):
            ok = rep.phi > 0
            if not ok.any():
                continue
            label = f"point {pi} (tau {rep.tau_hat:.2f})"
            ax.loglog(rep.radii[ok], rep.phi[ok], marker="o",
                      label=label)
            drawn += 1
        ax.set_xlabel("radius")
        ax.set_ylabel("tilt excess")
        if drawn:
            ax.legend()
        ax.set_title("tilt-excess decay")

    return reports, [("decay_scan", draw)], failures


# -------------------------------------------------------------- apriori

def run_apriori(cfg, out, threads):
    _positive(cfg, ("radius", "delta"))
    _require(cfg["p"] >= 1.0, "p must be at least 1")
    _require(int(cfg["trials"]) >= 1, "trials must be at least 1")
    m, codim = int(cfg["m"]), int(cfg["codim"])
    if cfg["integrand"] == "dirichlet":
        F = dirichlet_integrand(m, codim)
    elif cfg["integrand"] == "area_cutoff":
        F = cutoff_integrand(area_integrand(m, codim),
                             np.zeros((codim, m)), cfg["delta"])
    else:
        raise UsageError("integrand must be dirichlet or area_cutoff")
    ball = Ball((0.0,) * m, cfg["radius"])
    spacings = [float(h) for h in cfg["spacings"]]
    _require(spacings and all(h > 0 for h in spacings),
             "spacings must be positive")

    def one(h):
        return apriori_suite(F, ball, trials=int(cfg["trials"]),
                             p=cfg["p"], seed=cfg["seed"], spacing=h)

    results = _pmap(one, spacings, threads)
    rows = [row for batch in results for row in batch]
    by_name = {}
    for row in rows:
        by_name.setdefault(row["estimate"], []).append(row["gamma_hat"])
    failures = []
    for name, gammas in sorted(by_name.items()):
        lo, hi = min(gammas), max(gammas)
        if lo > 0 and hi / lo > cfg["stability_factor"]:
            failures.append(
                f"estimate {name}: gamma varies {hi / lo:.2f}x across "
                f"grids (limit {cfg['stability_factor']}x)")
    cols = ["estimate", "p", "h", "lhs", "rhs", "gamma_hat"]

    def draw(fig):
        ax = fig.add_subplot(111)
        for name in sorted(by_name):
            hs = [r["h"] for r in rows if r["estimate"] == name]
            gs = [r["gamma_hat"] for r in rows if r["estimate"] == name]
            ax.plot(hs, gs, marker="o", label=name)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("grid spacing")
        ax.set_ylabel("empirical constant")
        ax.legend(fontsize=8)
        ax.set_title("a priori estimate stability")

    return ([("apriori_report", cols, rows)],
            [("apriori_stability", draw)], failures)


# ---------------------------------------------------------------- merge

def report_merge(paths):
    """Concatenate same-schema CSV reports, tagging rows with their source.

    All inputs must share the exact header and, when a version column is
    present, a single version value; otherwise raises ValueError.
    """
    header = None
    version = None
    out_rows = []
    for p in paths:
        text = Path(p).read_text()
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise ValueError(f"empty report: {p}")
        if header is None:
            header = rows[0]
        elif rows[0] != header:
            raise ValueError(f"schema mismatch: {p}")
        vi = header.index("version") if "version" in header else None
        for cells in rows[1:]:
            if vi is not None:
                if version is None:
                    version = cells[vi]
                elif cells[vi] != version:
                    raise ValueError(
                        f"schema mismatch: conflicting versions in {p}")
            out_rows.append(cells + [str(p)])
    return header + ["source"], out_rows


def run_merge(paths, out):
    try:
        header, rows = report_merge(paths)
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    (out / "merged.csv").write_text(buf.getvalue())
    (out / "merged.json").write_text(json.dumps(
        {"columns": header,
         "rows": [dict(zip(header, r)) for r in rows]},
        sort_keys=True, indent=1) + "\n")
    print(f"merged {len(paths)} reports, {len(rows)} rows -> "
          f"{out / 'merged.csv'}")
    return 0


RUNNERS = {
    "synth": run_synth,
    "crit": run_crit,
    "lebesgue": run_lebesgue,
    "varifold": run_varifold,
    "decay": run_decay,
    "apriori": run_apriori,
}

_HELP = {
    "synth": "generate a corpus with exact ground truth",
    "crit": "classify sampled field points and fit 2-jets",
    "lebesgue": "scan constant-density limits of a distribution",
    "varifold": "curvature estimates, locality table, graph extraction",
    "decay": "tilt-excess decay scans and quarter-scale induction",
    "apriori": "empirical stability of the elliptic estimates",
}


def _build_parser():
    parser = _Parser(prog="varjet",
                     description="analysis toolbench for particle "
                                 "varifolds and sampled fields")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)
    for name in RUNNERS:
        sp = sub.add_parser(name, help=_HELP[name])
        sp.add_argument("--config", default=None,
                        help="JSON config file (defaults used if absent)")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default ${THREADS_ENV} "
                             "or 1)")
    mp = sub.add_parser("merge", help="combine same-schema CSV reports")
    mp.add_argument("paths", nargs="+", help="input report CSVs")
    mp.add_argument("--out", default=".", help="output directory")
    return parser


def _resolve_threads(flag):
    if flag is None:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            flag = int(raw)
        except ValueError:
            raise UsageError(
                f"{THREADS_ENV} must be an integer, got {raw!r}")
    _require(flag >= 1, "threads must be at least 1")
    return flag


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "merge":
            return run_merge(args.paths, out)
        threads = _resolve_threads(args.threads)
        cfg, user_keys = _load_config(args.command, args.config)
        if args.seed is not None:
            _require(args.seed >= 0, "seed must be nonnegative")
            cfg["seed"] = args.seed
        header = {
            "command": args.command,
            "version": __version__,
            "config": cfg,
            "config_hash": _config_hash(args.command, cfg),
            "thresholds_from": (
                "config" if user_keys & THRESHOLD_KEYS[args.command]
                else "default"),
        }
        reports, figures, failures = RUNNERS[args.command](
            cfg, out, threads)
        for name, cols, rows in reports:
            _write_report(out, name, cols, rows, header)
        _render_figures(out, figures)
        for msg in failures:
            print(f"QUALITY FAILURE: {msg}", file=sys.stderr)
        names = ", ".join(name for name, _, _ in reports)
        print(f"{args.command}: wrote {names} in {out} "
              f"(config {header['config_hash']})")
        return 2 if failures else 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
