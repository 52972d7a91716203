"""Artifact-producing pipelines behind the command-line interface.

Every pipeline writes into a staging directory that is renamed to the
requested output directory only after all files and the manifest exist, so
a crash never leaves a half-written output tree.  The manifest records the
command, the SHA-256 of the config bytes exactly as read from disk, the
seed, and a digest per artifact; nothing in the outputs depends on wall
time or thread count (BLAS pools are pinned to one thread for the run).
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil

import numpy as np
from threadpoolctl import threadpool_limits

from wavehjb import __version__, figures
from wavehjb.bsde import (RegressionBasis, TruncationRadius, exp_moment_report,
                          fit_truncation_radius, solve_bsde, z_growth_report)
from wavehjb.control import (assemble_wave_problem, closed_loop_simulate,
                             displacement_field, fundamental_relation_report)
from wavehjb.hamiltonian import optimal_control
from wavehjb.kolmogorov import identification_report, picard_mild_solve
from wavehjb.semigroup import QuadratureScheme, smoothing_audit
from wavehjb.spectral import build_mode_basis, h_norm, simulate_paths

MANIFEST_SCHEMA_VERSION = 1

# probe margin for the exponential-moment certificate: the theory asks for
# finiteness at some eta > 0, the report checks this fixed one
EXP_MOMENT_ETA = 0.1


class PipelineError(RuntimeError):
    """A pipeline could not produce its artifacts."""


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def _write_csv(path: str, header: list, rows: list) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _jsonable(doc):
    if isinstance(doc, dict):
        return {str(k): _jsonable(v) for k, v in doc.items()}
    if isinstance(doc, (list, tuple)):
        return [_jsonable(v) for v in doc]
    if isinstance(doc, np.ndarray):
        return _jsonable(doc.tolist())
    if isinstance(doc, (np.bool_, bool)):
        return bool(doc)
    if isinstance(doc, np.integer):
        return int(doc)
    if isinstance(doc, (np.floating, float)):
        return float(doc)
    return doc


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _build_problem(cfg: dict):
    return assemble_wave_problem(cfg, seed=cfg["seed"])


def _quad_scheme(cfg: dict) -> QuadratureScheme:
    q = cfg["solver"]["quadrature"]
    if q["kind"] == "gauss-hermite":
        return QuadratureScheme(kind="gauss-hermite",
                                nodes_per_dim=q["nodes_per_dim"],
                                active_modes=tuple(q["active_modes"]))
    return QuadratureScheme(kind="monte-carlo", sample_count=q["sample_count"],
                            seed=cfg["seed"])


def _regression_basis(cfg: dict, modes) -> RegressionBasis:
    b = cfg["solver"]["basis"]
    kwargs = {"product_modes": tuple(b["product_modes"]),
              "norm_degree": b["norm_degree"], "ridge": b["ridge"]}
    if b["linear_modes"] is not None:
        kwargs["linear_modes"] = tuple(b["linear_modes"])
    return RegressionBasis(modes, **kwargs)


def _solve_field(cfg: dict, prob):
    pc = cfg["solver"]["picard"]
    return picard_mild_solve(
        prob.phi, prob.hjb_driver(seed=cfg["seed"]), prob.grid(0.0),
        _quad_scheme(cfg), tol=pc["tol"], max_iter=pc["max_iter"],
        modes=prob.modes, basis=_regression_basis(cfg, prob.modes),
        x0=prob.x0, seed=cfg["seed"], growth_r=cfg["growth"]["r"],
        cloud_size=cfg["solver"]["cloud_size"],
        anchor_count=cfg["solver"]["anchor_count"])


def _solve_backward(cfg: dict, prob):
    """OU bundle plus the regression solution, honoring the truncation policy."""
    grid = prob.grid(0.0)
    paths = simulate_paths(prob.x0, grid, prob.modes, cfg["solver"]["paths"],
                           cfg["seed"])
    driver = prob.hjb_driver(seed=cfg["seed"])
    basis = _regression_basis(cfg, prob.modes)
    inner = cfg["solver"]["picard"]["inner_iters"]
    policy = cfg["solver"]["truncation"]["policy"]
    if policy == "none":
        trunc, trunc_info = None, {"policy": "none"}
    elif policy == "fixed":
        trunc = TruncationRadius(cfg["solver"]["truncation"]["radius"])
        trunc_info = {"policy": "fixed", "radius": trunc.m_radius}
    else:
        pilot = solve_bsde(paths, driver, prob.phi, basis, None,
                           picard_iters=inner)
        trunc, fit_info = fit_truncation_radius(pilot, paths, prob.growth)
        trunc_info = {"policy": "fitted", **fit_info}
    sol = solve_bsde(paths, driver, prob.phi, basis, trunc, picard_iters=inner)
    return paths, sol, trunc_info


def _step_z_rms(sol) -> np.ndarray:
    return np.sqrt(np.mean(np.sum(sol.z_values**2, axis=-1), axis=0))


def run_simulate(cfg: dict, outdir: str) -> int:
    prob = _build_problem(cfg)
    grid = prob.grid(0.0)
    drift = None if prob.forcing.name == "zero" else (
        lambda t, states: prob.drift_g(states))
    paths = simulate_paths(prob.x0, grid, prob.modes, cfg["solver"]["paths"],
                           cfg["seed"], drift=drift)
    energy = h_norm(paths.states, prob.modes)
    y1 = paths.states[:, :, 0, 0]
    v1 = paths.states[:, :, 1, 0]
    rows = [(grid[i], y1[:, i].mean(), y1[:, i].std(ddof=1),
             v1[:, i].mean(), v1[:, i].std(ddof=1),
             energy[:, i].mean(), energy[:, i].std(ddof=1))
            for i in range(len(grid))]
    _write_csv(os.path.join(outdir, "trajectory_summary.csv"),
               ["time", "y1_mean", "y1_sd", "v1_mean", "v1_sd",
                "energy_mean", "energy_sd"], rows)

    field = displacement_field(paths.states[:, -1], prob.modes)
    from wavehjb.control import _XI
    lo, hi = np.quantile(field, [0.1, 0.9], axis=0)
    snap = [(_XI[j], field[:, j].mean(), lo[j], hi[j])
            for j in range(field.shape[1])]
    _write_csv(os.path.join(outdir, "field_snapshot.csv"),
               ["xi", "mean", "q10", "q90"], snap)

    figures.trajectories_figure(grid, paths.states, prob.modes,
                                os.path.join(outdir, "trajectories.png"))
    return 0


def run_solve_bsde(cfg: dict, outdir: str) -> int:
    prob = _build_problem(cfg)
    paths, sol, trunc_info = _solve_backward(cfg, prob)
    grid = sol.grid
    m = len(grid) - 1
    y_mean = sol.y_values.mean(axis=0)
    y_sd = sol.y_values.std(axis=0, ddof=1)
    y_se = y_sd / np.sqrt(sol.y_values.shape[0])
    z_rms = _step_z_rms(sol)
    conditions = sol.diagnostics["condition_numbers"]
    rows = [(grid[i], y_mean[i], y_sd[i],
             z_rms[i] if i < m else float("nan"),
             conditions[i] if i < m else float("nan"))
            for i in range(len(grid))]
    _write_csv(os.path.join(outdir, "bsde_steps.csv"),
               ["time", "y_mean", "y_sd", "z_rms", "condition"], rows)

    growth = prob.growth
    report = {
        "y0_mean": sol.y0_mean,
        "y0_se": sol.y0_se,
        "n_paths": int(sol.y_values.shape[0]),
        "steps": m,
        "max_condition": float(np.max(conditions)) if m else float("nan"),
        "truncation": trunc_info,
        "z_growth": z_growth_report(sol, paths, growth.r),
        "exp_moment": exp_moment_report(sol, growth.l, EXP_MOMENT_ETA,
                                        growth.gamma_z),
        "diagnostics": sol.diagnostics,
    }
    _write_json(os.path.join(outdir, "bsde_report.json"), report)
    figures.bsde_value_figure(grid, y_mean, y_se, z_rms,
                              os.path.join(outdir, "bsde_value.png"))
    return 0


def run_solve_hjb(cfg: dict, outdir: str) -> int:
    prob = _build_problem(cfg)
    vf = _solve_field(cfg, prob)
    _write_json(os.path.join(outdir, "value_field.json"), vf.to_json_dict())
    report = {
        "value_at_origin": vf.value_at_origin,
        "origin_se": vf.origin_se,
        "bgrad_at_origin": vf.bgrad_at_origin,
        "origin_bgrad_se": vf.origin_bgrad_se,
        "growth_certificate": vf.growth_certificate,
        "diagnostics": vf.diagnostics,
    }
    _write_json(os.path.join(outdir, "hjb_report.json"), report)
    diffs = np.asarray(vf.diagnostics["anchor_diffs"], dtype=float)
    _write_csv(os.path.join(outdir, "hjb_convergence.csv"),
               ["sweep", "anchor_change"],
               [(i + 1, d) for i, d in enumerate(diffs)])
    figures.convergence_figure(diffs, vf.diagnostics["tolerance"],
                               os.path.join(outdir, "hjb_convergence.png"))
    return 0


def run_synthesize(cfg: dict, outdir: str) -> int:
    prob = _build_problem(cfg)
    vf = _solve_field(cfg, prob)
    paths, cost = closed_loop_simulate(prob, vf, n_paths=cfg["solver"]["paths"],
                                       seed=cfg["seed"])
    grid = prob.grid(0.0)
    controls = np.stack([
        np.linalg.norm(optimal_control(prob.spec,
                                       vf.bgrad_at(float(grid[i]),
                                                   paths.states[:, i])), axis=-1)
        for i in range(len(grid) - 1)], axis=1)
    energy = h_norm(paths.states, prob.modes)
    y1 = paths.states[:, :, 0, 0]
    rows = [(grid[i], y1[:, i].mean(), y1[:, i].std(ddof=1),
             energy[:, i].mean(),
             controls[:, i].mean() if i < len(grid) - 1 else float("nan"))
            for i in range(len(grid))]
    _write_csv(os.path.join(outdir, "closed_loop_summary.csv"),
               ["time", "y1_mean", "y1_sd", "energy_mean", "control_norm_mean"],
               rows)
    report = {
        "value_at_origin": vf.value_at_origin,
        "origin_se": vf.origin_se,
        "cost": {"mean": cost.mean, "se": cost.se, "n_paths": cost.n_paths,
                 "state_cost": cost.state_cost, "control_cost": cost.control_cost,
                 "terminal_cost": cost.terminal_cost, "q_moment": cost.q_moment,
                 "q_moment_se": cost.q_moment_se},
        "margin_over_value": cost.mean - vf.value_at_origin,
        "margin_se": float(np.hypot(cost.se, vf.origin_se)),
    }
    _write_json(os.path.join(outdir, "cost_report.json"), report)
    figures.closed_loop_figure(grid, paths.states, controls,
                               os.path.join(outdir, "closed_loop.png"))
    return 0


def run_verify(cfg: dict, outdir: str) -> int:
    prob = _build_problem(cfg)
    wanted = cfg["verification"]["reports"]
    th = cfg["verification"]["thresholds"]
    needs_backward = {"identification", "z_growth", "exp_moment"} & set(wanted)
    needs_field = {"identification", "fundamental_relation"} & set(wanted)

    paths = sol = vf = None
    if needs_backward:
        paths, sol, _ = _solve_backward(cfg, prob)
    if needs_field:
        vf = _solve_field(cfg, prob)

    docs = {}
    assertions = []

    def add(report, name, margin, margin_se, ok):
        assertions.append({"report": report, "name": name,
                           "margin": float(margin),
                           "margin_se": float(margin_se), "ok": bool(ok)})

    if "identification" in wanted:
        doc = identification_report(vf, sol, paths,
                                    value_se_multiple=th["value_se_multiple"],
                                    z_threshold=th["z_rel"])
        docs["identification"] = doc
        value_tol = (th["value_se_multiple"] * doc["value_gap_se"]
                     + doc["thresholds"]["value_rel_floor"]
                     * (1.0 + abs(doc["value_field"])))
        add("identification", "value_gap", value_tol - doc["value_gap"], 0.0,
            doc["value_ok"])
        add("identification", "z_rel", th["z_rel"] - doc["z_rel_discrepancy"],
            0.0, doc["z_ok"])

    if "z_growth" in wanted:
        doc = z_growth_report(sol, paths, prob.growth.r)
        docs["z_growth"] = doc
        spread = max(doc["stability_ratio"], 1.0 / doc["stability_ratio"])
        ok = np.isfinite(doc["max_ratio"]) and spread <= th["stability_factor"]
        add("z_growth", "stability", th["stability_factor"] - spread, 0.0, ok)

    if "exp_moment" in wanted:
        doc = exp_moment_report(sol, prob.growth.l, EXP_MOMENT_ETA,
                                prob.growth.gamma_z)
        docs["exp_moment"] = doc
        spread = max(doc["stability_ratio"], 1.0 / doc["stability_ratio"])
        ok = (np.isfinite(doc["value"]) and not doc["heavy_tail"]
              and spread <= th["stability_factor"])
        add("exp_moment", "stability", th["stability_factor"] - spread, 0.0, ok)

    if "fundamental_relation" in wanted:
        doc = fundamental_relation_report(prob, vf,
                                          n_paths=cfg["solver"]["paths"],
                                          seed=cfg["seed"])
        docs["fundamental_relation"] = doc
        for row in doc["candidates"]:
            add("fundamental_relation", row["name"],
                row["margin"] + 3.0 * row["margin_se"], row["margin_se"],
                row["ok"])
        fb = {r["name"]: r for r in doc["candidates"]}
        if "feedback" in fb:
            others = min(r["cost"] for r in doc["candidates"])
            add("fundamental_relation", "feedback_smallest",
                others - fb["feedback"]["cost"] + 1e-12, 0.0,
                doc["assertions"]["feedback_smallest"])
        if "feedback_x2" in fb and "feedback" in fb:
            gap = fb["feedback_x2"]["cost"] - fb["feedback"]["cost"]
            gap_se = float(np.hypot(fb["feedback_x2"]["se"], fb["feedback"]["se"]))
            add("fundamental_relation", "feedback_beats_scaled",
                gap - 3.0 * gap_se, gap_se,
                doc["assertions"]["feedback_beats_scaled"])

    passed = all(a["ok"] for a in assertions)
    _write_json(os.path.join(outdir, "verify_report.json"),
                {"reports": docs, "assertions": assertions, "passed": passed,
                 "thresholds": th})
    _write_csv(os.path.join(outdir, "margins.csv"),
               ["report", "name", "margin", "margin_se", "ok"],
               [(a["report"], a["name"], a["margin"], a["margin_se"], a["ok"])
                for a in assertions])
    figures.margins_figure([f"{a['report']}:{a['name']}" for a in assertions],
                           np.array([a["margin"] for a in assertions]),
                           np.array([a["margin_se"] for a in assertions]),
                           os.path.join(outdir, "verify_margins.png"))
    return 0 if passed else 1


def run_audit_smoothing(cfg: dict, outdir: str) -> int:
    modes = build_mode_basis(cfg["problem"]["modes"])
    doc = smoothing_audit(modes)
    slope_ok = abs(doc["slope"] + 0.5) <= 0.05
    small_rel = abs(doc["small_sigma_value"] / doc["small_sigma_reference"] - 1.0)
    small_ok = small_rel <= 0.05
    passed = bool(slope_ok and small_ok)
    _write_csv(os.path.join(outdir, "smoothing.csv"), ["sigma", "constant"],
               list(zip(doc["sigmas"], doc["constants"])))
    _write_json(os.path.join(outdir, "smoothing_report.json"), {
        "slope": doc["slope"],
        "intercept": doc["intercept"],
        "max_prefactor": doc["max_prefactor"],
        "small_sigma_value": doc["small_sigma_value"],
        "small_sigma_reference": doc["small_sigma_reference"],
        "small_sigma_rel_error": small_rel,
        "slope_ok": slope_ok,
        "small_sigma_ok": small_ok,
        "passed": passed,
    })
    figures.smoothing_figure(doc["sigmas"], doc["constants"], doc["slope"],
                             doc["intercept"],
                             os.path.join(outdir, "smoothing.png"))
    return 0 if passed else 1


PIPELINES = {
    "simulate": run_simulate,
    "solve-bsde": run_solve_bsde,
    "solve-hjb": run_solve_hjb,
    "synthesize": run_synthesize,
    "verify": run_verify,
    "audit-smoothing": run_audit_smoothing,
}


def run_pipeline(command: str, cfg: dict, config_bytes: bytes,
                 outdir: str) -> int:
    """Run one pipeline into a fresh output directory, atomically.

    The staging directory lives next to the target and is renamed into
    place after the manifest is written; a non-empty existing target is
    refused up front.
    """
    if command not in PIPELINES:
        raise PipelineError(f"unknown command '{command}' "
                            f"(available: {sorted(PIPELINES)})")
    outdir = os.path.abspath(outdir)
    if os.path.exists(outdir):
        if not os.path.isdir(outdir) or os.listdir(outdir):
            raise PipelineError(f"output directory {outdir} exists and is not "
                                "an empty directory")
        os.rmdir(outdir)
    parent = os.path.dirname(outdir) or "."
    os.makedirs(parent, exist_ok=True)
    staging = f"{outdir}.staging-{os.getpid()}"
    if os.path.exists(staging):
        shutil.rmtree(staging)
    os.makedirs(staging)
    try:
        with threadpool_limits(limits=1):
            code = PIPELINES[command](cfg, staging)
        files = sorted(f for f in os.listdir(staging)
                       if os.path.isfile(os.path.join(staging, f)))
        manifest = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "command": command,
            "package_version": __version__,
            "seed": cfg["seed"],
            "config_sha256": hashlib.sha256(config_bytes).hexdigest(),
            "exit_code": code,
            "files": {name: _sha256(os.path.join(staging, name))
                      for name in files},
        }
        _write_json(os.path.join(staging, "manifest.json"), manifest)
        os.rename(staging, outdir)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return code
