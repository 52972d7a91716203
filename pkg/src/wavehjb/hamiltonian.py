"""Control Hamiltonian, minimizing selection, driver assembly, and the
growth-parameter regime checks.

The Hamiltonian is h(z) = inf_{u in K} { g(u) + z . R(u) } with running
control cost g(u) = cost_scale * sum_k |u_k|^q, q in (1, 2].  The cost is
coefficient-separable, so for the full space and for box constraints the
infimum splits across coordinates and the scalar problem has a closed form:

    u*(z) = -sign(z) (|z| / (q s))^{1/(q-1)},    h(z) = s|u*|^q + z u*,

equivalently h(z) = -(1/p)(1/q)^{p-1} |z|^p at s = 1, with p = q/(q-1) the
conjugate exponent.  h is negative away from 0; a published variant of the
coefficient with positive sign disagrees with direct minimization and is not
used here.  Ball constraints couple the coordinates and are implemented for
q = 2 only, where the minimizer is the radial clip of -z/2.

A grid minimizer (coarse sweep plus golden-section polish) provides the
reference route for specs without the closed-form flag.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

GRID_POINTS = 257
GOLDEN_ITERS = 80
_INV_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class HamiltonianSpec:
    """Control set, running control cost, and actuation map.

    control_set: "full", "box" (|u_k| <= radius per coordinate), or "ball"
                 (|u|_2 <= radius, q = 2 only)
    q:           cost exponent in (1, 2]
    cost_scale:  multiplier on sum_k |u_k|^q
    r_scale:     linear actuation R(u) = r_scale * u
    closed_form: use the power-cost identity; otherwise grid minimization
    """

    q: float = 2.0
    control_set: str = "full"
    radius: Optional[float] = None
    cost_scale: float = 1.0
    r_scale: float = 1.0
    closed_form: bool = True

    def __post_init__(self):
        if not 1.0 < self.q <= 2.0:
            raise ValueError(f"cost exponent must lie in (1, 2], got {self.q}")
        if self.control_set not in ("full", "box", "ball"):
            raise ValueError(f"unknown control set {self.control_set!r}")
        if self.control_set in ("box", "ball"):
            if self.radius is None or self.radius <= 0:
                raise ValueError(f"{self.control_set} constraint needs a positive radius")
        if self.cost_scale <= 0:
            raise ValueError("cost_scale must be positive")

    @property
    def p(self) -> float:
        """Conjugate exponent q/(q-1) >= 2; the z-growth of h is |z|^p."""
        return self.q / (self.q - 1.0)

    def control_cost(self, u: np.ndarray) -> np.ndarray:
        """g(u) = cost_scale * sum over the last axis of |u_k|^q."""
        u = np.asarray(u, dtype=float)
        if u.ndim == 0:
            return self.cost_scale * np.abs(u) ** self.q
        return self.cost_scale * np.sum(np.abs(u) ** self.q, axis=-1)

    def coercivity_report(self, samples: int = 4096, seed: int = 0) -> dict:
        """Spot-check g(u) >= C|u|^q outside a radius by sampling.

        For the power cost the bound holds with C = cost_scale and radius 0;
        the report records the worst sampled ratio as evidence.
        """
        gen = np.random.default_rng(seed)
        u = gen.uniform(-10.0, 10.0, size=samples)
        u = u[np.abs(u) > 1e-6]
        ratios = (self.cost_scale * np.abs(u) ** self.q) / np.abs(u) ** self.q
        return {"constant": self.cost_scale, "radius": 0.0,
                "worst_ratio": float(np.min(ratios)),
                "passed": bool(np.min(ratios) >= self.cost_scale * (1 - 1e-12))}


@dataclass(frozen=True)
class DriverGrowthParams:
    """Growth and modulus constants declared for a BSDE driver.

    l:        z-growth index (p - 1 for the power Hamiltonian)
    r:        x-growth index
    alpha:    x-growth coefficient of the terminal functional
    beta:     x-growth coefficient of the driver
    gamma_z:  z-Lipschitz-modulus coefficient
    k_psi_y:  Lipschitz constant in y
    """

    l: float
    r: float
    alpha: float = 1.0
    beta: float = 1.0
    gamma_z: float = 1.0
    k_psi_y: float = 0.0


@dataclass(frozen=True)
class Driver:
    """A BSDE driver psi(t, x, y, z) with its declared growth regime.

    fn maps (t, states (..., 2, n), y (...), z (..., n)) to values (...).
    active_modes, when set, declares that fn depends on those 1-based modes
    only; quadrature uses the declaration to enable tensor rules.
    """

    fn: Callable
    growth: DriverGrowthParams
    active_modes: Optional[tuple[int, ...]] = None
    description: str = ""

    def __call__(self, t, x, y, z):
        return self.fn(t, x, y, z)


def _scalar_closed_form(spec: HamiltonianSpec, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate minimizer and value for the separable power cost."""
    zr = spec.r_scale * z
    s = spec.cost_scale
    u = -np.sign(zr) * (np.abs(zr) / (spec.q * s)) ** (1.0 / (spec.q - 1.0))
    if spec.control_set == "box":
        u = np.clip(u, -spec.radius, spec.radius)
    val = s * np.abs(u) ** spec.q + zr * u
    return u, val


def _golden_polish(cost: Callable[[float], float], a: float, b: float) -> tuple[float, float]:
    c = b - _INV_GOLDEN * (b - a)
    d = a + _INV_GOLDEN * (b - a)
    fc, fd = cost(c), cost(d)
    for _ in range(GOLDEN_ITERS):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INV_GOLDEN * (b - a)
            fc = cost(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_GOLDEN * (b - a)
            fd = cost(d)
    u = (a + b) / 2.0
    return u, cost(u)


def _scalar_grid(spec: HamiltonianSpec, z: float) -> tuple[float, float]:
    """Coarse grid plus golden-section polish for one coordinate.

    The sweep box is auto-sized from the closed-form minimizer scale; if the
    control set is the full space and the minimum keeps landing on the box
    edge after expansion, the problem is flagged unbounded below.
    """
    zr = spec.r_scale * float(z)
    s = spec.cost_scale
    cost = lambda u: s * np.abs(u) ** spec.q + zr * u
    half = 1.0 + 2.0 * (1.0 + np.abs(zr)) ** (spec.p - 1.0)
    if spec.control_set == "box":
        lo, hi = -spec.radius, spec.radius
    else:
        lo, hi = -half, half
    for _ in range(4):
        grid = np.linspace(lo, hi, GRID_POINTS)
        vals = cost(grid)
        j = int(np.argmin(vals))
        on_edge = j in (0, GRID_POINTS - 1)
        if spec.control_set == "box" or not on_edge:
            a = grid[max(j - 1, 0)]
            b = grid[min(j + 1, GRID_POINTS - 1)]
            return _golden_polish(cost, float(a), float(b))
        lo, hi = 4.0 * lo, 4.0 * hi
    raise ValueError("hamiltonian appears unbounded below on the sampled sweep")


def _ball_minimizer(spec: HamiltonianSpec, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Radial clip of the unconstrained q=2 minimizer onto |u|_2 <= radius."""
    if abs(spec.q - 2.0) > 1e-12:
        raise NotImplementedError("ball-constrained Hamiltonian is implemented for q = 2 only")
    zr = spec.r_scale * np.asarray(z, dtype=float)
    norm = np.linalg.norm(zr, axis=-1, keepdims=True)
    u = -zr / (2.0 * spec.cost_scale)
    unorm = norm / (2.0 * spec.cost_scale)
    scale = np.where(unorm > spec.radius, spec.radius / np.maximum(unorm, 1e-300), 1.0)
    u = u * scale
    val = spec.cost_scale * np.sum(u**2, axis=-1) + np.sum(zr * u, axis=-1)
    return u, val


def hamiltonian_value(spec: HamiltonianSpec, z) -> np.ndarray:
    """h(z) = inf_u { g(u) + z . R(u) }.

    Scalar z gives the scalar per-coordinate value; an array's last axis is
    treated as the control-space coordinate and the separable values are
    summed (ball constraints couple the coordinates instead).
    """
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    if spec.control_set == "ball":
        if z.ndim == 0:
            z = z[None]
            return float(_ball_minimizer(spec, z)[1])
        return _ball_minimizer(spec, z)[1]
    if spec.closed_form:
        _, val = _scalar_closed_form(spec, z)
    else:
        flat = np.ravel(z)
        val = np.array([_scalar_grid(spec, zk)[1] for zk in flat]).reshape(z.shape)
    if z.ndim == 0:
        return float(val)
    return np.sum(val, axis=-1)


def optimal_control(spec: HamiltonianSpec, z) -> np.ndarray:
    """A minimizing selection gamma(z), same shape as z.

    The power cost is strictly convex so the minimizer is unique; the
    smallest-norm-then-lexicographic tie rule is vacuous here but documents
    the determinism contract for future control sets.
    """
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    if spec.control_set == "ball":
        if z.ndim == 0:
            return float(_ball_minimizer(spec, z[None])[0][0])
        return _ball_minimizer(spec, z)[0]
    if spec.closed_form:
        u, _ = _scalar_closed_form(spec, z)
    else:
        flat = np.ravel(z)
        u = np.array([_scalar_grid(spec, zk)[0] for zk in flat]).reshape(z.shape)
    if z.ndim == 0:
        return float(u)
    return u


def driver_psi(gbar: Callable, spec: HamiltonianSpec, t: float, x: np.ndarray, z) -> np.ndarray:
    """HJB driver value psi(t, x, z) = gbar(t, x) + h(z).

    gbar maps (t, states (..., 2, n)) to running state cost (...); z has
    shape (..., n).  Non-finite gbar values propagate as errors.
    """
    g = np.asarray(gbar(t, x), dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("running state cost returned non-finite values")
    return g + hamiltonian_value(spec, z)


def power_modulus_coefficient(spec: HamiltonianSpec) -> float:
    """Coefficient gamma with |h(z)-h(z')| <= gamma/2 (|z|^l + |z'|^l)|z-z'| + C.

    By the envelope theorem h'(z) = u*(z), so per coordinate
    |h'(z)| = (|z|/(q s))^{p-1} with s = cost_scale; the factor 2 absorbs
    max(|z|, |z'|)^l <= |z|^l + |z'|^l.
    """
    return 2.0 * (1.0 / (spec.q * spec.cost_scale)) ** (spec.p - 1.0)


def validate_growth_hypotheses(params: DriverGrowthParams, spec: HamiltonianSpec) -> dict:
    """Check the declared parameter regime; the report lists every check.

    Accepts iff l >= 1, 0 <= r < 1/l, q in (1, 2], r < q - 1, and l matches
    the conjugate-exponent relation l = p - 1.
    """
    checks = []

    def add(name, passed, detail):
        checks.append({"name": name, "passed": bool(passed), "detail": detail})

    add("l >= 1", params.l >= 1.0, f"l = {params.l}")
    add("0 <= r < 1/l", 0.0 <= params.r < 1.0 / params.l,
        f"r = {params.r}, 1/l = {1.0 / params.l}")
    add("q in (1, 2]", 1.0 < spec.q <= 2.0, f"q = {spec.q}")
    add("r < q - 1", params.r < spec.q - 1.0, f"r = {params.r}, q - 1 = {spec.q - 1.0}")
    add("l = p - 1", abs(params.l - (spec.p - 1.0)) <= 1e-12,
        f"l = {params.l}, p - 1 = {spec.p - 1.0}")
    add("coefficients >= 0",
        min(params.alpha, params.beta, params.gamma_z, params.k_psi_y) >= 0.0,
        f"alpha = {params.alpha}, beta = {params.beta}, "
        f"gamma_z = {params.gamma_z}, k_psi_y = {params.k_psi_y}")
    return {"checks": checks, "accepted": all(c["passed"] for c in checks)}


def make_hjb_driver(gbar: Callable, spec: HamiltonianSpec, growth: DriverGrowthParams,
                    active_modes: Optional[tuple[int, ...]] = None,
                    description: str = "") -> Driver:
    """Package gbar + h(z) as a Driver; the y slot is unused (k_psi_y = 0)."""

    def fn(t, x, y, z):
        return driver_psi(gbar, spec, t, x, z)

    return Driver(fn=fn, growth=growth, active_modes=active_modes,
                  description=description or "hjb driver: gbar + h(z)")
