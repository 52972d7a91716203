"""Spectral truncation of the stochastic wave equation and its OU dynamics.

The state space is the energy space of the 1-d wave equation on (0, 1) with
Dirichlet boundary: positions in L^2, velocities in H^-1.  In the sine
eigenbasis e_k(xi) = sqrt(2) sin(k pi xi) the generator decouples into 2x2
mode blocks

    A_k = [[0, 1], [-lambda_k, 0]],   lambda_k = (k pi)^2,

with actuation/noise entering through the velocity component only.  All
routines below work on the truncated coefficient space of the first n modes;
state batches are ndarrays of shape (..., 2, n) where axis -2 indexes
(position, velocity) and axis -1 the mode.

The driving noise is a cylindrical Wiener process in L^2, so each mode sees
an independent scalar Brownian motion.  One-step transitions are exact in
law: the propagator is the closed-form rotation block and the step noise is
drawn from the closed-form covariance of the stochastic convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from wavehjb import rng

# numerical floor for covariance factorizations, relative to the block trace
EIGENVALUE_FLOOR = 1e-14


@dataclass(frozen=True)
class ModeSpec:
    """Retained sine modes of the Dirichlet Laplacian on (0, 1)."""

    count: int
    frequencies: np.ndarray   # omega_k = k pi
    eigenvalues: np.ndarray   # lambda_k = (k pi)^2

    def basis_matrix(self, xi: np.ndarray) -> np.ndarray:
        """Values of e_k(xi) = sqrt(2) sin(k pi xi), shape (count, len(xi))."""
        k = np.arange(1, self.count + 1)
        return np.sqrt(2.0) * np.sin(np.pi * np.outer(k, np.asarray(xi, dtype=float)))


def build_mode_basis(count: int) -> ModeSpec:
    """Construct the spectral data for the first ``count`` modes."""
    if count < 1:
        raise ValueError(f"mode count must be >= 1, got {count}")
    k = np.arange(1, count + 1, dtype=float)
    omega = np.pi * k
    return ModeSpec(count=int(count), frequencies=omega, eigenvalues=omega**2)


@dataclass(frozen=True)
class StateVector:
    """A single state: position and velocity coefficients, shape (n,) each."""

    position: np.ndarray
    velocity: np.ndarray

    @property
    def array(self) -> np.ndarray:
        return np.stack([np.asarray(self.position, dtype=float),
                         np.asarray(self.velocity, dtype=float)])

    @staticmethod
    def zero(modes: ModeSpec) -> "StateVector":
        return StateVector(np.zeros(modes.count), np.zeros(modes.count))

    @staticmethod
    def from_modes(modes: ModeSpec, position: dict[int, float] | None = None,
                   velocity: dict[int, float] | None = None) -> "StateVector":
        """Build a state from sparse {mode index (1-based): coefficient} maps."""
        y = np.zeros(modes.count)
        z = np.zeros(modes.count)
        for k, v in (position or {}).items():
            y[k - 1] = v
        for k, v in (velocity or {}).items():
            z[k - 1] = v
        return StateVector(y, z)


def h_norm(states: np.ndarray, modes: ModeSpec) -> np.ndarray:
    """Energy norm |x|^2 = sum_k y_k^2 + z_k^2 / lambda_k.

    ``states`` has shape (..., 2, n); the result drops the last two axes.
    This is the L^2 (+) H^-1 norm in which every propagator is an isometry.
    """
    states = np.asarray(states, dtype=float)
    y = states[..., 0, :]
    z = states[..., 1, :]
    return np.sqrt(np.sum(y**2, axis=-1) + np.sum(z**2 / modes.eigenvalues, axis=-1))


def mode_semigroup(modes: ModeSpec, t: float) -> np.ndarray:
    """Per-mode propagators e^{t A_k}, shape (n, 2, 2).

    Closed form: [[cos wt, sin(wt)/w], [-w sin wt, cos wt]], determinant 1.
    """
    w = modes.frequencies
    c = np.cos(w * t)
    s = np.sin(w * t)
    out = np.empty((modes.count, 2, 2))
    out[:, 0, 0] = c
    out[:, 0, 1] = s / w
    out[:, 1, 0] = -w * s
    out[:, 1, 1] = c
    return out


def propagate(states: np.ndarray, modes: ModeSpec, t: float) -> np.ndarray:
    """Apply e^{tA} to a state batch (..., 2, n) without materializing matrices."""
    w = modes.frequencies
    c = np.cos(w * t)
    s = np.sin(w * t)
    y = states[..., 0, :]
    z = states[..., 1, :]
    return np.stack([c * y + (s / w) * z, (-w * s) * y + c * z], axis=-2)


@dataclass(frozen=True)
class SemigroupBounds:
    """Growth envelope |e^{tA}| <= N e^{omega t} in the energy norm.

    The wave rotation gives the sharp values N = 1, omega = 0.
    """

    n_constant: float = 1.0
    growth_rate: float = 0.0

    def validate(self, modes: ModeSpec, times: tuple[float, ...] = (0.1, 1.0, 10.0),
                 tol: float = 1e-12) -> dict:
        """Check the weighted operator norm of every per-mode propagator.

        In coordinates (y, z/omega) the propagator is an exact rotation, so
        its norm must equal 1 to floating-point accuracy.
        """
        worst = 0.0
        for t in times:
            mats = mode_semigroup(modes, t)
            # conjugate by diag(1, 1/omega): weighted-norm representation
            w = modes.frequencies
            weighted = mats.copy()
            weighted[:, 0, 1] *= w
            weighted[:, 1, 0] /= w
            norms = np.linalg.norm(weighted, ord=2, axis=(1, 2))
            worst = max(worst, float(np.max(np.abs(norms - self.n_constant))))
        ok = worst <= tol and self.growth_rate == 0.0
        return {"max_norm_defect": worst, "tolerance": tol, "valid": bool(ok)}


def _covariance_blocks(omega: np.ndarray, sigma: float) -> np.ndarray:
    """Closed-form per-mode covariance of int_0^sigma e^{sA} B dW_s.

    Q11 = (sigma/2 - sin(2 w sigma)/(4w)) / w^2
    Q12 = sin^2(w sigma) / (2 w^2)
    Q22 = sigma/2 + sin(2 w sigma)/(4w)
    """
    u = omega * sigma
    q11 = (sigma / 2.0 - np.sin(2.0 * u) / (4.0 * omega)) / omega**2
    q12 = np.sin(u) ** 2 / (2.0 * omega**2)
    q22 = sigma / 2.0 + np.sin(2.0 * u) / (4.0 * omega)
    out = np.empty((omega.size, 2, 2))
    out[:, 0, 0] = q11
    out[:, 0, 1] = q12
    out[:, 1, 0] = q12
    out[:, 1, 1] = q22
    return out


def _cholesky_with_floor(blocks: np.ndarray) -> np.ndarray:
    """Lower Cholesky factors of 2x2 blocks, floored for near-degeneracy."""
    out = np.zeros_like(blocks)
    for i, q in enumerate(blocks):
        trace = q[0, 0] + q[1, 1]
        floor = EIGENVALUE_FLOOR * max(trace, 0.0)
        try:
            out[i] = np.linalg.cholesky(q)
        except np.linalg.LinAlgError:
            out[i] = np.linalg.cholesky(q + floor * np.eye(2)) if trace > 0 else 0.0
    return out


@dataclass(frozen=True)
class OUCovariance:
    """Covariance data of the OU transition over a horizon sigma.

    blocks:             per-mode 2x2 covariance matrices, (n, 2, 2)
    cholesky:           lower factors L with Q = L L^T, (n, 2, 2)
    actuation:          per-mode int_0^sigma e^{sA_k} B_k ds, (n, 2)
    whitened_actuation: per-mode L^{-1} e^{sigma A_k} B_k, (n, 2); its
                        Euclidean norm is the mode's smoothing constant
    """

    sigma: float
    modes: ModeSpec
    blocks: np.ndarray
    cholesky: np.ndarray
    actuation: np.ndarray
    whitened_actuation: np.ndarray

    @property
    def trace_h(self) -> float:
        """Trace in the energy norm; per mode exactly sigma / lambda_k."""
        return float(np.sum(self.blocks[:, 0, 0] + self.blocks[:, 1, 1] / self.modes.eigenvalues))

    def tail_bound(self, k: int) -> float:
        """Energy-norm trace bound 2 sigma / (k pi)^2 for mode k (1-based)."""
        return 2.0 * self.sigma / (k * np.pi) ** 2


def covariance(modes: ModeSpec, sigma: float) -> OUCovariance:
    """Closed-form OU covariance over [0, sigma] with factorizations."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    w = modes.frequencies
    n = modes.count
    if sigma == 0.0:
        zero2 = np.zeros((n, 2))
        return OUCovariance(sigma=0.0, modes=modes, blocks=np.zeros((n, 2, 2)),
                            cholesky=np.zeros((n, 2, 2)), actuation=zero2,
                            whitened_actuation=zero2)
    blocks = _covariance_blocks(w, sigma)
    chol = _cholesky_with_floor(blocks)
    u = w * sigma
    actuation = np.stack([(1.0 - np.cos(u)) / w**2, np.sin(u) / w], axis=1)
    # e^{sigma A} B = (sin(w sigma)/w, cos(w sigma)); whiten with L^{-1}
    prop_b = np.stack([np.sin(u) / w, np.cos(u)], axis=1)
    wa = np.empty((n, 2))
    wa[:, 0] = prop_b[:, 0] / chol[:, 0, 0]
    wa[:, 1] = (prop_b[:, 1] - chol[:, 1, 0] * wa[:, 0]) / chol[:, 1, 1]
    return OUCovariance(sigma=float(sigma), modes=modes, blocks=blocks,
                        cholesky=chol, actuation=actuation, whitened_actuation=wa)


def sample_ou_step(state: np.ndarray, cov: OUCovariance,
                   generator: np.random.Generator) -> np.ndarray:
    """One exact transition X' ~ N(e^{sigma A} x, Q_sigma).

    ``state`` may be a single state (2, n) or a batch (..., 2, n); one draw is
    made per leading-batch element.  Two calls with identical generator state
    return identical outputs.
    """
    state = np.asarray(state, dtype=float)
    mean = propagate(state, cov.modes, cov.sigma)
    u = generator.standard_normal(state.shape[:-2] + (cov.modes.count, 2))
    noise_y = cov.cholesky[:, 0, 0] * u[..., 0]
    noise_z = cov.cholesky[:, 1, 0] * u[..., 0] + cov.cholesky[:, 1, 1] * u[..., 1]
    return mean + np.stack([noise_y, noise_z], axis=-2)


@dataclass
class PathBundle:
    """Simulated trajectories on a fixed time grid.

    states: (n_paths, m+1, 2, n) trajectory coefficients
    noise:  (n_paths, m, n, 2) standard-normal draws behind each step's
            stochastic increment (xi_i = L u_i), retained for downstream
            regression; None on restricted bundles
    times:  (m+1,) grid
    seed_record: what produced the draws; re-simulating with it is bit-identical
    drift_free: True when no drift entered the dynamics, in which case step
            increments can be reconstructed from consecutive states
    """

    times: np.ndarray
    states: np.ndarray
    noise: Optional[np.ndarray]
    modes: ModeSpec
    seed_record: dict = field(default_factory=dict)
    drift_free: bool = True

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def restrict(self, stride: int) -> "PathBundle":
        """Keep every ``stride``-th grid time (drift-free bundles only).

        The restriction is again an exact-in-law OU sample on the coarse grid
        because drift-free marginals are exact under any step size.
        """
        if not self.drift_free:
            raise ValueError("restriction is only valid for drift-free bundles")
        if (len(self.times) - 1) % stride != 0:
            raise ValueError(f"stride {stride} does not divide {len(self.times) - 1} steps")
        return PathBundle(times=self.times[::stride], states=self.states[:, ::stride],
                          noise=None, modes=self.modes,
                          seed_record={**self.seed_record, "restricted_stride": stride},
                          drift_free=True)


def simulate_paths(x0: np.ndarray | StateVector, times: np.ndarray, modes: ModeSpec,
                   n_paths: int, seed: int,
                   drift: Optional[Callable[[float, np.ndarray], np.ndarray]] = None,
                   stream_label: int = 0) -> PathBundle:
    """Simulate OU (or drift-perturbed) paths with exact one-step transitions.

    The step map is the exponential Euler scheme with the linear part exact
    and the drift frozen at the left endpoint but convolved exactly:

        X_{i+1} = e^{dA} X_i + (int_0^d e^{sA} B ds) g(t_i, X_i) + xi_i,
        xi_i ~ N(0, Q_d) drawn as L_d u_i.

    With ``drift=None`` the scheme is exact in law at every grid time; with a
    constant drift the mean shift is exact as well, because the per-step
    actuation integrals telescope to int_0^{t} e^{sA} B ds.

    ``drift(t, states)`` maps a (N, 2, n) batch to control-space coefficients
    (N, n).  Draws come from the counter-based stream (seed, PATHS,
    stream_label, step), one block per step, so outputs are independent of
    scheduling.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be a strictly increasing grid with >= 2 points")
    x0 = x0.array if isinstance(x0, StateVector) else np.asarray(x0, dtype=float)
    if x0.shape != (2, modes.count):
        raise ValueError(f"x0 must have shape (2, {modes.count}), got {x0.shape}")

    m = len(times) - 1
    n = modes.count
    states = np.empty((n_paths, m + 1, 2, n))
    noise = np.empty((n_paths, m, n, 2))
    states[:, 0] = x0

    cov_cache: dict[float, OUCovariance] = {}
    for i in range(m):
        dt = float(times[i + 1] - times[i])
        cov = cov_cache.get(dt)
        if cov is None:
            cov = cov_cache[dt] = covariance(modes, dt)
        u = rng.standard_normal(seed, (rng.PATHS, stream_label, i), (n_paths, n, 2))
        noise[:, i] = u
        x = states[:, i]
        nxt = propagate(x, modes, dt)
        if drift is not None:
            g = np.asarray(drift(float(times[i]), x), dtype=float)
            nxt = nxt + np.stack([cov.actuation[:, 0] * g, cov.actuation[:, 1] * g], axis=-2)
        noise_y = cov.cholesky[:, 0, 0] * u[..., 0]
        noise_z = cov.cholesky[:, 1, 0] * u[..., 0] + cov.cholesky[:, 1, 1] * u[..., 1]
        states[:, i + 1] = nxt + np.stack([noise_y, noise_z], axis=-2)

    record = {"seed": int(seed), "stream": (rng.PATHS, stream_label), "n_paths": int(n_paths)}
    return PathBundle(times=times, states=states, noise=noise, modes=modes,
                      seed_record=record, drift_free=drift is None)
