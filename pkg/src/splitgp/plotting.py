"""Figures written next to the CSV outputs of a run."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.figsize": (4.0, 3.0),
    "savefig.dpi": 120,
}

MODE_LABELS = {
    "personalized": "Personalized FL",
    "fedavg": "Generalized FL",
    "splitfed": "SplitFed",
    "splitgp": "SplitGP",
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # no timestamp metadata, so reruns give the same bytes
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def accuracy_vs_rho(rows, path) -> Path:
    """rows: dicts with mode, lam, rho, acc_overall (already seed-averaged)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        curves = defaultdict(list)
        for r in rows:
            label = MODE_LABELS.get(r["mode"], r["mode"])
            if r["mode"] == "splitgp" and r.get("lam_tagged"):
                label = f"{label} (λ={r['lam']:g})"
            curves[label].append((r["rho"], 100 * r["acc_overall"]))
        for label, pts in curves.items():
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
        ax.set_xlabel("ρ (OOD / main test samples)")
        ax.set_ylabel("test accuracy [%]")
        ax.legend()
        return _save(fig, Path(path))


def accuracy_vs_threshold(rows, path) -> Path:
    """rows: dicts with rho, e_th, acc_overall (seed-averaged)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        by_rho = defaultdict(list)
        for r in rows:
            by_rho[r["rho"]].append((r["e_th"], 100 * r["acc_overall"]))
        for rho in sorted(by_rho):
            pts = sorted(by_rho[rho])
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", label=f"ρ={rho:g}")
        ax.set_xlabel("entropy threshold")
        ax.set_ylabel("test accuracy [%]")
        ax.legend()
        return _save(fig, Path(path))


def latency_sweep(rows, field: str, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = [r.value for r in rows]
        ax.plot(xs, [r.tau_client_full for r in rows], marker="s", label="Full model at client")
        ax.plot(xs, [r.tau_server_full for r in rows], marker="^", label="Full model at server")
        ax.plot(xs, [r.tau_splitgp for r in rows], marker="o", label="SplitGP")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel({"P_C": "client compute rate $P_C$", "R": "uplink rate $R$"}.get(field, field))
        ax.set_ylabel("inference time")
        ax.legend()
        return _save(fig, Path(path))


def convergence(trace, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(trace.rounds, trace.grad_norm, label="gradient-norm proxy")
        running, best = [], float("inf")
        for g in trace.grad_norm:
            best = min(best, g)
            running.append(best)
        ax.plot(trace.rounds, running, linestyle="--", label="running minimum")
        ax.set_yscale("log")
        ax.set_xlabel("round")
        ax.set_ylabel("mean ‖∇F‖²")
        ax.legend()
        return _save(fig, Path(path))
