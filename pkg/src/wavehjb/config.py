"""Configuration loading and validation for the command-line pipelines.

A config is a single JSON document.  Validation is strict: unknown keys are
rejected with their full path, every numeric field has an explicit range,
and cross-field constraints (mode indices against the mode count, radius
presence for constrained control sets) are checked here so the pipelines
can assume a well-formed document.  ``validate_config`` returns a new dict
with every default filled in; the raw on-disk bytes are what the output
manifest hashes, so normalization never touches the source file.
"""

from __future__ import annotations

import json
from typing import Any, Optional

FUNCTIONAL_KINDS = ("forcing", "state_cost", "terminal")
VERIFICATION_REPORTS = ("identification", "z_growth", "exp_moment",
                        "fundamental_relation")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` locates the offending key."""

    def __init__(self, path: str, message: str):
        self.path = path or "<root>"
        super().__init__(f"{self.path}: {message}")


def _mapping(doc: Any, path: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(path, f"expected a mapping, got {type(doc).__name__}")
    return doc


def _reject_unknown(doc: dict, allowed: set, path: str) -> None:
    extra = sorted(set(doc) - allowed)
    if extra:
        raise ConfigError(path, f"unknown keys {extra} (allowed: {sorted(allowed)})")


def _number(sec: dict, key: str, path: str, default=None, minimum=None,
            maximum=None, exclusive_min=False) -> float:
    if key not in sec:
        if default is None:
            raise ConfigError(f"{path}.{key}", "required")
        return float(default)
    v = sec[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {v!r}")
    v = float(v)
    if v != v or v in (float("inf"), float("-inf")):
        raise ConfigError(f"{path}.{key}", "must be finite")
    if minimum is not None and (v <= minimum if exclusive_min else v < minimum):
        op = ">" if exclusive_min else ">="
        raise ConfigError(f"{path}.{key}", f"must be {op} {minimum}, got {v}")
    if maximum is not None and v > maximum:
        raise ConfigError(f"{path}.{key}", f"must be <= {maximum}, got {v}")
    return v


def _integer(sec: dict, key: str, path: str, default=None, minimum=None,
             maximum=None) -> int:
    if key not in sec:
        if default is None:
            raise ConfigError(f"{path}.{key}", "required")
        return int(default)
    v = sec[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path}.{key}", f"expected an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{path}.{key}", f"must be >= {minimum}, got {v}")
    if maximum is not None and v > maximum:
        raise ConfigError(f"{path}.{key}", f"must be <= {maximum}, got {v}")
    return v


def _choice(sec: dict, key: str, path: str, options: tuple, default=None) -> str:
    v = sec.get(key, default)
    if v not in options:
        raise ConfigError(f"{path}.{key}", f"must be one of {list(options)}, got {v!r}")
    return v


def _mode_list(sec: dict, key: str, path: str, modes: int,
               default: Optional[list] = None) -> Optional[list]:
    if key not in sec:
        return default
    raw = sec[key]
    if raw is None:
        return None
    if not isinstance(raw, list) or not all(
            isinstance(k, int) and not isinstance(k, bool) for k in raw):
        raise ConfigError(f"{path}.{key}", "expected a list of mode indices")
    for k in raw:
        if not 1 <= k <= modes:
            raise ConfigError(f"{path}.{key}", f"mode index {k} outside 1..{modes}")
    if len(set(raw)) != len(raw):
        raise ConfigError(f"{path}.{key}", "mode indices must be distinct")
    return list(raw)


def _initial_section(sec: dict, path: str, modes: int) -> dict:
    sec = _mapping(sec, path)
    _reject_unknown(sec, {"position", "velocity"}, path)
    out = {}
    for part in ("position", "velocity"):
        raw = _mapping(sec.get(part, {}) or {}, f"{path}.{part}")
        clean = {}
        for key, val in raw.items():
            try:
                k = int(key)
            except (TypeError, ValueError):
                raise ConfigError(f"{path}.{part}", f"mode index {key!r} is not an integer")
            if not 1 <= k <= modes:
                raise ConfigError(f"{path}.{part}", f"mode index {k} outside 1..{modes}")
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{path}.{part}.{key}", f"expected a number, got {val!r}")
            clean[str(k)] = float(val)
        out[part] = clean
    return out


def _functional_section(sec, path: str) -> dict:
    if isinstance(sec, str):
        sec = {"name": sec}
    sec = _mapping(sec if sec is not None else {}, path)
    _reject_unknown(sec, {"name", "params"}, path)
    name = sec.get("name", "zero")
    if not isinstance(name, str):
        raise ConfigError(f"{path}.name", f"expected a string, got {name!r}")
    params = _mapping(sec.get("params", {}) or {}, f"{path}.params")
    for key, val in params.items():
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"{path}.params.{key}", f"expected a number, got {val!r}")
    return {"name": name, "params": {k: float(v) for k, v in params.items()}}


def _problem_section(doc: dict) -> dict:
    sec = _mapping(doc.get("problem"), "problem")
    allowed = {"modes", "steps", "horizon", "initial", "control_cost"} | set(FUNCTIONAL_KINDS)
    _reject_unknown(sec, allowed, "problem")
    modes = _integer(sec, "modes", "problem", minimum=1, maximum=256)
    out = {
        "modes": modes,
        "steps": _integer(sec, "steps", "problem", minimum=1, maximum=100_000),
        "horizon": _number(sec, "horizon", "problem", minimum=0.0, exclusive_min=True),
        "initial": _initial_section(sec.get("initial", {}) or {}, "problem.initial", modes),
    }
    cc = _mapping(sec.get("control_cost", {}) or {}, "problem.control_cost")
    _reject_unknown(cc, {"scale"}, "problem.control_cost")
    out["control_cost"] = {"scale": _number(cc, "scale", "problem.control_cost",
                                            default=1.0, minimum=0.0, exclusive_min=True)}
    for kind in FUNCTIONAL_KINDS:
        out[kind] = _functional_section(sec.get(kind, "zero"), f"problem.{kind}")
    return out


def _hamiltonian_section(doc: dict) -> dict:
    sec = _mapping(doc.get("hamiltonian", {}) or {}, "hamiltonian")
    _reject_unknown(sec, {"q", "control_set", "radius", "r_scale"}, "hamiltonian")
    out = {
        "q": _number(sec, "q", "hamiltonian", default=2.0, minimum=1.0,
                     maximum=2.0, exclusive_min=True),
        "control_set": _choice(sec, "control_set", "hamiltonian",
                               ("full", "box", "ball"), default="full"),
        "r_scale": _number(sec, "r_scale", "hamiltonian", default=1.0),
    }
    if out["control_set"] == "full":
        if sec.get("radius") is not None:
            raise ConfigError("hamiltonian.radius",
                              "only constrained control sets take a radius")
        out["radius"] = None
    else:
        out["radius"] = _number(sec, "radius", "hamiltonian", minimum=0.0,
                                exclusive_min=True)
    return out


def _growth_section(doc: dict) -> dict:
    sec = _mapping(doc.get("growth", {}) or {}, "growth")
    _reject_unknown(sec, {"r", "alpha", "beta"}, "growth")
    return {
        "r": _number(sec, "r", "growth", default=0.0, minimum=0.0),
        "alpha": _number(sec, "alpha", "growth", default=1.0, minimum=0.0,
                         exclusive_min=True),
        "beta": _number(sec, "beta", "growth", default=1.0, minimum=0.0,
                        exclusive_min=True),
    }


def _solver_section(doc: dict, modes: int) -> dict:
    sec = _mapping(doc.get("solver", {}) or {}, "solver")
    _reject_unknown(sec, {"paths", "basis", "truncation", "picard",
                          "quadrature", "cloud_size", "anchor_count"}, "solver")

    basis = _mapping(sec.get("basis", {}) or {}, "solver.basis")
    _reject_unknown(basis, {"linear_modes", "product_modes", "norm_degree",
                            "ridge"}, "solver.basis")
    basis_out = {
        "linear_modes": _mode_list(basis, "linear_modes", "solver.basis", modes),
        "product_modes": _mode_list(basis, "product_modes", "solver.basis",
                                    modes, default=[]),
        "norm_degree": _integer(basis, "norm_degree", "solver.basis",
                                default=2, minimum=0, maximum=8),
        "ridge": _number(basis, "ridge", "solver.basis", default=1e-8, minimum=0.0),
    }

    trunc = _mapping(sec.get("truncation", {}) or {}, "solver.truncation")
    _reject_unknown(trunc, {"policy", "radius"}, "solver.truncation")
    policy = _choice(trunc, "policy", "solver.truncation",
                     ("fitted", "fixed", "none"), default="fitted")
    if policy == "fixed":
        radius = _number(trunc, "radius", "solver.truncation", minimum=0.0,
                         exclusive_min=True)
    else:
        if trunc.get("radius") is not None:
            raise ConfigError("solver.truncation.radius",
                              f"policy '{policy}' does not take a radius")
        radius = None

    picard = _mapping(sec.get("picard", {}) or {}, "solver.picard")
    _reject_unknown(picard, {"tol", "max_iter", "inner_iters"}, "solver.picard")
    picard_out = {
        "tol": _number(picard, "tol", "solver.picard", default=1e-3,
                       minimum=0.0, exclusive_min=True),
        "max_iter": _integer(picard, "max_iter", "solver.picard", default=25,
                             minimum=1),
        "inner_iters": _integer(picard, "inner_iters", "solver.picard",
                                default=8, minimum=1),
    }

    quad = _mapping(sec.get("quadrature", {}) or {}, "solver.quadrature")
    _reject_unknown(quad, {"kind", "sample_count", "nodes_per_dim",
                           "active_modes"}, "solver.quadrature")
    kind = _choice(quad, "kind", "solver.quadrature",
                   ("monte-carlo", "gauss-hermite"), default="monte-carlo")
    active = _mode_list(quad, "active_modes", "solver.quadrature", modes)
    if kind == "gauss-hermite":
        if not active:
            raise ConfigError("solver.quadrature.active_modes",
                              "tensor quadrature requires explicit active modes")
        if len(active) > 3:
            raise ConfigError("solver.quadrature.active_modes",
                              f"tensor quadrature supports at most 3 modes, got {len(active)}")
    nodes = _integer(quad, "nodes_per_dim", "solver.quadrature", default=7,
                     minimum=3, maximum=101)
    quad_out = {
        "kind": kind,
        "sample_count": _integer(quad, "sample_count", "solver.quadrature",
                                 default=4096, minimum=16),
        "nodes_per_dim": nodes,
        "active_modes": active,
    }

    return {
        "paths": _integer(sec, "paths", "solver", default=10_000, minimum=2),
        "basis": basis_out,
        "truncation": {"policy": policy, "radius": radius},
        "picard": picard_out,
        "quadrature": quad_out,
        "cloud_size": _integer(sec, "cloud_size", "solver", default=192, minimum=16),
        "anchor_count": _integer(sec, "anchor_count", "solver", default=64,
                                 minimum=4),
    }


def _verification_section(doc: dict) -> dict:
    sec = _mapping(doc.get("verification", {}) or {}, "verification")
    _reject_unknown(sec, {"reports", "thresholds"}, "verification")
    reports = sec.get("reports", list(VERIFICATION_REPORTS))
    if not isinstance(reports, list) or not reports:
        raise ConfigError("verification.reports", "expected a non-empty list")
    for name in reports:
        if name not in VERIFICATION_REPORTS:
            raise ConfigError("verification.reports",
                              f"unknown report {name!r} "
                              f"(available: {list(VERIFICATION_REPORTS)})")
    if len(set(reports)) != len(reports):
        raise ConfigError("verification.reports", "reports must be distinct")

    th = _mapping(sec.get("thresholds", {}) or {}, "verification.thresholds")
    _reject_unknown(th, {"z_rel", "value_se_multiple", "stability_factor"},
                    "verification.thresholds")
    thresholds = {
        "z_rel": _number(th, "z_rel", "verification.thresholds", default=0.1,
                         minimum=0.0, exclusive_min=True),
        "value_se_multiple": _number(th, "value_se_multiple",
                                     "verification.thresholds", default=3.0,
                                     minimum=0.0, exclusive_min=True),
        "stability_factor": _number(th, "stability_factor",
                                    "verification.thresholds", default=2.0,
                                    minimum=1.0),
    }
    return {"reports": list(reports), "thresholds": thresholds}


def validate_config(doc: Any) -> dict:
    """Validate a parsed document and return it with defaults filled in."""
    doc = _mapping(doc, "")
    _reject_unknown(doc, {"seed", "problem", "hamiltonian", "growth", "solver",
                          "verification"}, "<root>")
    problem = _problem_section(doc)
    return {
        "seed": _integer(doc, "seed", "<root>", default=0, minimum=0),
        "problem": problem,
        "hamiltonian": _hamiltonian_section(doc),
        "growth": _growth_section(doc),
        "solver": _solver_section(doc, problem["modes"]),
        "verification": _verification_section(doc),
    }


def load_config(path: str) -> tuple[dict, bytes]:
    """Read, parse, and validate a config file.

    Returns the normalized config and the raw bytes (the manifest hashes the
    bytes exactly as they were on disk).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError("<root>", f"not valid JSON: {exc}") from exc
    return validate_config(doc), raw
