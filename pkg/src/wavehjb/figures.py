"""Matplotlib renderings for the pipeline reports.

All figures go through the Agg backend with a fixed dpi and stripped PNG
metadata so reruns of a pipeline produce byte-identical artifacts.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 120


def _save(fig, path: str) -> None:
    try:
        fig.savefig(path, dpi=DPI, metadata={"Software": None})
    except (TypeError, ValueError):
        fig.savefig(path, dpi=DPI)
    plt.close(fig)


def trajectories_figure(times: np.ndarray, states: np.ndarray, modes,
                        path: str, sample_count: int = 12) -> None:
    """Mode-1 displacement: a few sample paths over the cross-path band."""
    from wavehjb.spectral import h_norm

    y1 = states[:, :, 0, 0]
    lo, hi = np.quantile(y1, [0.1, 0.9], axis=0)
    energy = h_norm(states, modes)

    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax.fill_between(times, lo, hi, alpha=0.25, color="tab:blue",
                    label="10-90% band")
    for k in range(min(sample_count, states.shape[0])):
        ax.plot(times, y1[k], lw=0.7, alpha=0.7)
    ax.plot(times, y1.mean(axis=0), color="black", lw=1.6, label="mean")
    ax.set_xlabel("t")
    ax.set_ylabel("mode-1 displacement")
    ax.legend(loc="upper right", fontsize=8)

    ax2.plot(times, energy.mean(axis=0), color="tab:red", lw=1.4)
    ax2.fill_between(times, *np.quantile(energy, [0.1, 0.9], axis=0),
                     alpha=0.25, color="tab:red")
    ax2.set_xlabel("t")
    ax2.set_ylabel("energy norm")
    fig.tight_layout()
    _save(fig, path)


def bsde_value_figure(grid: np.ndarray, y_mean: np.ndarray, y_se: np.ndarray,
                      z_rms: np.ndarray, path: str) -> None:
    """Mean value process with a 2-SE band; step RMS of Z on a twin axis."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(grid, y_mean, color="tab:blue", lw=1.6, label="mean Y")
    ax.fill_between(grid, y_mean - 2 * y_se, y_mean + 2 * y_se, alpha=0.3,
                    color="tab:blue")
    ax.set_xlabel("t")
    ax.set_ylabel("Y")
    ax2 = ax.twinx()
    ax2.plot(grid[:-1], z_rms, color="tab:orange", lw=1.2, ls="--",
             label="RMS |Z|")
    ax2.set_ylabel("RMS |Z|")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [l.get_label() for l in lines], loc="best", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def convergence_figure(diffs: np.ndarray, tol: float, path: str) -> None:
    """Per-sweep anchor change of the fixed-point iteration, log scale."""
    diffs = np.asarray(diffs, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    sweeps = np.arange(1, len(diffs) + 1)
    if len(diffs):
        ax.semilogy(sweeps, np.maximum(diffs, 1e-300), "o-", color="tab:blue")
    ax.axhline(tol, color="tab:red", ls="--", lw=1.0, label=f"tol = {tol:g}")
    ax.set_xlabel("sweep")
    ax.set_ylabel("weighted anchor change")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def closed_loop_figure(times: np.ndarray, states: np.ndarray,
                       control_norms: np.ndarray, path: str) -> None:
    """Closed-loop mode-1 displacement band and the mean control effort."""
    y1 = states[:, :, 0, 0]
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax.fill_between(times, *np.quantile(y1, [0.1, 0.9], axis=0), alpha=0.25,
                    color="tab:green")
    ax.plot(times, y1.mean(axis=0), color="black", lw=1.6)
    ax.set_xlabel("t")
    ax.set_ylabel("mode-1 displacement")

    ax2.plot(times[:-1], control_norms.mean(axis=0), color="tab:purple", lw=1.4)
    ax2.fill_between(times[:-1],
                     *np.quantile(control_norms, [0.1, 0.9], axis=0),
                     alpha=0.25, color="tab:purple")
    ax2.set_xlabel("t")
    ax2.set_ylabel("|u|")
    fig.tight_layout()
    _save(fig, path)


def margins_figure(names: list, margins: np.ndarray, margin_ses: np.ndarray,
                   path: str) -> None:
    """Cost margins over the solved value with 3-SE whiskers."""
    y = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(6, 0.45 * max(len(names), 4) + 1.2))
    colors = ["tab:green" if m >= 0 else "tab:red" for m in margins]
    ax.barh(y, margins, xerr=3.0 * np.asarray(margin_ses), color=colors,
            alpha=0.8, error_kw={"lw": 0.9})
    ax.axvline(0.0, color="black", lw=1.0)
    ax.set_yticks(y)
    ax.set_yticklabels(names, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("cost - value (3-SE whiskers)")
    fig.tight_layout()
    _save(fig, path)


def smoothing_figure(sigmas: np.ndarray, constants: np.ndarray, slope: float,
                     intercept: float, path: str) -> None:
    """Gradient-bound constant against sigma with the fitted power law."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.loglog(sigmas, constants, "o", ms=4, color="tab:blue", label="measured")
    fit = np.exp(intercept) * np.asarray(sigmas) ** slope
    ax.loglog(sigmas, fit, "-", color="tab:orange",
              label=f"fit slope {slope:.3f}")
    ax.loglog(sigmas, np.sqrt(2.0 / np.asarray(sigmas)), ":", color="gray",
              label="reference -1/2 law")
    ax.set_xlabel("sigma")
    ax.set_ylabel("gradient bound constant")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
