"""Figure rendering for the study reports (matplotlib, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .stability import membership, spectral_radius  # noqa: E402

# fixed metadata keeps PNG output byte-identical across runs
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120, metadata=_PNG_META)
    plt.close(fig)


def plot_landscape(result, path):
    """``V_N`` for every ``N`` and the limit ``Vbar`` over the gain grid, unstable region shaded."""
    fig, ax = plt.subplots(figsize=(6, 4))
    L = result.L
    for N, V in result.curves.items():
        ax.plot(L, np.where(np.isfinite(V), V, np.nan), lw=1, label=f"$V_N$, N = {N}")
    ax.plot(L, result.V_bar, "k--", lw=1.5, label=r"$\bar V$")
    edges = np.flatnonzero(np.diff(result.unstable.astype(int)))
    lo = L[edges[0] + 1] if result.unstable[0] else None
    hi = L[edges[-1]] if result.unstable[-1] else None
    if lo is not None:
        ax.axvspan(L[0], lo, color="0.85", zorder=0)
    if hi is not None:
        ax.axvspan(hi, L[-1], color="0.85", zorder=0)
    finite = result.V_bar[np.isfinite(result.V_bar)]
    ax.set_ylim(0, 4 * finite.min() if finite.size else None)
    ax.set_xlim(L[0], L[-1])
    ax.set_xlabel("L")
    ax.set_ylabel("objective")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_multistart(plant, ms, alpha, path, L_star=None, resolution: int = 121):
    """Iterate paths of a multi-start run in the plane of the first two gain entries."""
    if plant.n * plant.q != 2:
        raise ValueError("multi-start plot needs a two-parameter gain")
    pts = [p for s in ms.solutions if s is not None for p in s.trace_path]
    pts = np.array(pts).reshape(-1, 2)
    pad = 0.2 * (pts.max(axis=0) - pts.min(axis=0)) + 0.1
    a = np.linspace(pts[:, 0].min() - pad[0], pts[:, 0].max() + pad[0], resolution)
    b = np.linspace(pts[:, 1].min() - pad[1], pts[:, 1].max() + pad[1], resolution)
    rho = np.empty((resolution, resolution))
    g = np.empty_like(rho)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            L = np.array([x, y]).reshape(plant.n, plant.q)
            rho[j, i] = spectral_radius(plant.closed_loop(L))
            g[j, i] = membership(L, plant, alpha).constraint if rho[j, i] < 1 else np.inf
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    ax.contour(a, b, rho, levels=[1.0], colors="0.3", linestyles="--")
    ax.contour(a, b, np.where(np.isfinite(g), g, 1e3), levels=[0.0], colors="C3")
    for s in ms.solutions:
        if s is None:
            continue
        path_ = np.array(s.trace_path).reshape(-1, 2)
        ax.plot(path_[:, 0], path_[:, 1], "-", color="C0", lw=0.6, alpha=0.6)
        ax.plot(path_[0, 0], path_[0, 1], "o", color="C0", ms=2)
    for c in ms.clusters:
        ax.plot(*c.representative.ravel()[:2], "k*", ms=10)
    if L_star is not None:
        ax.plot(*np.ravel(L_star)[:2], "x", color="C2", ms=9, mew=2)
    ax.set_xlabel("$L_{11}$")
    ax.set_ylabel("$L_{21}$")
    ax.set_title("dashed: spectral radius 1, red: feasible-set boundary", fontsize=8)
    _save(fig, path)


def plot_consistency(result, path):
    """Per-seed and median estimation error against ``N`` on log-log axes."""
    fig, ax = plt.subplots(figsize=(5, 4))
    Ns = sorted(result.medians)
    for row in result.rows:
        ax.plot(row["N"], row["error"], ".", color="0.6")
    med = [result.medians[N] for N in Ns]
    ax.plot(Ns, med, "o-", color="C0", label=f"median, slope {result.slope:.2f}")
    ref = med[0] * (np.asarray(Ns, dtype=float) / Ns[0]) ** -0.5
    ax.plot(Ns, ref, "k:", label=r"$N^{-1/2}$")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel(r"$\|\hat L_N - L^\star\|_F$")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_uniform_convergence(table, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    Ns = [row["N"] for row in table]
    ax.loglog(Ns, [row["sup_value_gap"] for row in table], "o-", label=r"sup $|V_N - \bar V|$")
    ax.loglog(Ns, [row["sup_grad_gap"] for row in table], "s-", label=r"sup $\|\nabla V_N - \nabla \bar V\|$")
    ax.set_xlabel("N")
    ax.legend(fontsize=8)
    _save(fig, path)
