"""Convergence instrumentation: ε(λ), the bound right-hand side, gradient-norm tracking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, NamedTuple, Sequence

import numpy as np

from .nn import backward_multi_exit, backward_single_exit, grad_norm_sq

if TYPE_CHECKING:
    from .fedsim import FederationState, History


def epsilon_lambda(lam: float, c: float, G: float, L: float) -> float:
    """16(c+4) G² L² λ² (2−λ²) / (c (1−λ²)²)."""
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"epsilon(lambda) needs 0 <= lambda < 1, got {lam}")
    if not (c > 0 and G > 0 and L > 0):
        raise ValueError("c, G and L must be positive")
    l2 = lam * lam
    return 16.0 * (c + 4.0) * G * G * L * L * l2 * (2.0 - l2) / (c * (1.0 - l2) ** 2)


@dataclass
class BoundConstants:
    L: float
    G: float
    sigma: Sequence[float]
    c: float
    eta0: float
    F0: float
    F_star: float = 0.0

    def __post_init__(self):
        if not (self.L > 0 and self.G > 0 and self.c > 0):
            raise ValueError("L, G and c must be positive")
        if any(s < 0 for s in self.sigma):
            raise ValueError("sigma_k must be non-negative")
        if not self.eta0 > 0:
            raise ValueError("eta0 must be positive")


def schedule_array(T: int, eta0: float, c: float, lam: float) -> np.ndarray:
    """η_t for t = 0..T-1, vectorised form of :func:`fedsim.lr_schedule`."""
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"the decaying schedule needs 0 <= lambda < 1, got {lam}")
    a = (c + 4.0) / (1.0 - lam * lam)
    return eta0 / (a + np.arange(T, dtype=np.float64))


def bound_rhs(T: int, bc: BoundConstants, lam: float, K: int | None = None) -> float:
    """Right-hand side of the SplitGP convergence bound after T rounds."""
    if T < 1:
        raise ValueError("T must be >= 1")
    K = len(bc.sigma) if K is None else K
    if len(bc.sigma) != K:
        raise ValueError(f"got {len(bc.sigma)} sigma values for K={K} clients")
    eta = schedule_array(T, bc.eta0, bc.c, lam)
    if eta[0] > 1.0 / (2.0 * bc.L) * (1 + 1e-12):
        raise ValueError(
            f"step-size condition violated: eta_0/a = {eta[0]:.6g} > 1/(2L) = {1.0 / (2.0 * bc.L):.6g}"
        )
    gamma_T = math.fsum(eta)
    sigma_term = bc.L * math.fsum(s * s for s in bc.sigma) / K
    return (
        (bc.F0 - bc.F_star) / gamma_T
        + sigma_term * math.fsum(eta**2) / gamma_T
        + epsilon_lambda(lam, bc.c, bc.G, bc.L) * math.fsum(eta**3) / gamma_T
    )


# -- empirical side -----------------------------------------------------

class FullBatchStats(NamedTuple):
    loss_client: float
    loss_server: float
    objective: float
    grad_norm: float


def full_batch_stats(state: "FederationState", gamma: float, with_grad: bool = True) -> FullBatchStats:
    """Full-batch losses at each client's own model and the gradient-norm proxy.

    Losses are (1/K) Σ_k ℓ_{·,k}(v_k). The proxy is (1/K) Σ_k ‖∇F(v_k)‖²
    with F = (1/K) Σ_j F_j, i.e. every client's model is differentiated
    against all K local datasets.
    """
    clients = state.clients
    K = len(clients)
    x_all = np.concatenate([c.data.x for c in clients])
    y_all = np.concatenate([c.data.y for c in clients])
    w_all = np.concatenate([np.full(len(c.data), 1.0 / (K * len(c.data))) for c in clients])
    split = state.theta is not None

    lc = ls = obj = 0.0
    gn = 0.0
    for c in clients:
        if split:
            own = backward_multi_exit(c.phi, c.h, state.theta, c.data.x, c.data.y, gamma)
            lc += own.loss_client
            ls += own.loss_server
            obj += own.objective
            if with_grad:
                g = backward_multi_exit(c.phi, c.h, state.theta, x_all, y_all, gamma, weights=w_all)
                gn += grad_norm_sq(g.phi, g.h, g.theta)
        else:
            _, loss = backward_single_exit(c.full, c.data.x, c.data.y)
            ls += loss
            obj += loss
            if with_grad:
                g, _ = backward_single_exit(c.full, x_all, y_all, weights=w_all)
                gn += grad_norm_sq(g)
    return FullBatchStats(
        lc / K if split else math.nan,
        ls / K,
        obj / K,
        gn / K if with_grad else math.nan,
    )


def grad_norm_proxy(state: "FederationState", gamma: float) -> float:
    """(1/K) Σ_k ‖∇F(v_k)‖² at the current state, full batch."""
    return full_batch_stats(state, gamma, with_grad=True).grad_norm


@dataclass
class ConvergenceTrace:
    rounds: list[int] = field(default_factory=list)
    eta: list[float] = field(default_factory=list)
    gamma_cum: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    bound: list[float] = field(default_factory=list)

    def csv_text(self) -> str:
        lines = ["round,eta,Gamma,grad_norm,bound_rhs"]
        for row in zip(self.rounds, self.eta, self.gamma_cum, self.grad_norm, self.bound):
            lines.append(",".join(str(v) if isinstance(v, int) else repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.csv_text())


def build_trace(history: "History", bc: BoundConstants | None, lam: float) -> ConvergenceTrace:
    """Line up per-round step sizes, Γ_t and the recorded proxy.

    Row t covers the state after t rounds, so Γ_t sums the t step sizes
    used so far (row 0 has Γ_0 = 0 and no bound).
    """
    trace = ConvergenceTrace()
    total = 0.0
    for rec in history.records:
        t = rec.round
        eta = 0.0 if t == 0 else rec.lr
        total += eta
        trace.rounds.append(t)
        trace.eta.append(eta)
        trace.gamma_cum.append(total)
        trace.grad_norm.append(rec.grad_norm)
        if bc is None or t == 0:
            trace.bound.append(math.nan)
        else:
            trace.bound.append(bound_rhs(t, bc, lam))
    return trace
