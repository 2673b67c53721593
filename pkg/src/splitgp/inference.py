"""Entropy-routed two-exit inference and ρ-mixed evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .data import EvalSet
from .nn import forward, softmax

# entropy thresholds swept when picking the best one
E_TH_GRID = (0.05, 0.1, 0.2, 0.4, 0.8, 1.2, 1.6, 2.3)


def entropy(probs) -> np.ndarray | float:
    """Natural-log Shannon entropy; rows of a 2-D input are separate distributions."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("not a probability distribution")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = terms.sum(axis=-1)
    return float(h) if p.ndim == 1 else h


class RoutingOutcome(NamedTuple):
    prediction: int
    exit: str  # "client" | "server"
    entropy: float


class RoutedBatch(NamedTuple):
    prediction: np.ndarray
    at_client: np.ndarray
    entropy: np.ndarray
    client_prediction: np.ndarray
    server_prediction: np.ndarray


def route_batch(phi, h, theta, x, e_th: float) -> RoutedBatch:
    """Route every row of ``x``; both exits are evaluated so per-exit accuracy is available.

    ``np.argmax`` returns the first maximum, i.e. ties go to the lowest class.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    feat = forward(phi, x)
    p_client = softmax(forward(h, feat))
    ent = entropy(p_client)
    pred_c = np.argmax(p_client, axis=1)
    pred_s = np.argmax(forward(theta, feat), axis=1)
    at_client = ent <= e_th
    return RoutedBatch(np.where(at_client, pred_c, pred_s), at_client, ent, pred_c, pred_s)


def route_and_predict(client, theta, z, e_th: float) -> RoutingOutcome:
    """Single-sample routing: client exit if its entropy is at most ``e_th``, else the server."""
    feat = forward(client.phi, z)
    p = softmax(forward(client.h, feat))
    e = entropy(p)
    if e <= e_th:
        return RoutingOutcome(int(np.argmax(p)), "client", e)
    return RoutingOutcome(int(np.argmax(forward(theta, feat))), "server", e)


@dataclass
class EvalReport:
    client: int
    rho: float
    e_th: float
    n_main: int
    n_ood: int
    correct_main: int
    correct_ood: int
    n_at_client: int
    correct_client_exit: int  # client-exit accuracy over all samples
    correct_server_exit: int

    @property
    def n(self) -> int:
        return self.n_main + self.n_ood

    @property
    def acc_main(self) -> float:
        return self.correct_main / self.n_main if self.n_main else math.nan

    @property
    def acc_ood(self) -> float:
        return self.correct_ood / self.n_ood if self.n_ood else math.nan

    @property
    def acc_overall(self) -> float:
        return (self.correct_main + self.correct_ood) / self.n

    @property
    def beta_hat(self) -> float:
        return self.n_at_client / self.n

    @property
    def acc_client_exit(self) -> float:
        return self.correct_client_exit / self.n

    @property
    def acc_server_exit(self) -> float:
        return self.correct_server_exit / self.n


@dataclass
class EvalSummary:
    reports: list[EvalReport]

    @property
    def acc_overall(self) -> float:
        return float(np.mean([r.acc_overall for r in self.reports]))

    @property
    def acc_main(self) -> float:
        return float(np.mean([r.acc_main for r in self.reports]))

    @property
    def acc_ood(self) -> float:
        vals = [r.acc_ood for r in self.reports if r.n_ood]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def beta_hat(self) -> float:
        return sum(r.n_at_client for r in self.reports) / sum(r.n for r in self.reports)

    @property
    def acc_client_exit(self) -> float:
        return float(np.mean([r.acc_client_exit for r in self.reports]))

    @property
    def acc_server_exit(self) -> float:
        return float(np.mean([r.acc_server_exit for r in self.reports]))


def _tally(cid, es: EvalSet, e_th, pred, at_client, pred_c, pred_s) -> EvalReport:
    ds = es.combined()
    n_main = len(es.main)
    ok = pred == ds.y
    return EvalReport(
        client=cid,
        rho=es.rho,
        e_th=e_th,
        n_main=n_main,
        n_ood=len(es.ood),
        correct_main=int(ok[:n_main].sum()),
        correct_ood=int(ok[n_main:].sum()),
        n_at_client=int(at_client.sum()),
        correct_client_exit=int((pred_c == ds.y).sum()),
        correct_server_exit=int((pred_s == ds.y).sum()),
    )


def evaluate(state, eval_sets: Sequence[EvalSet], e_th: float | None = None) -> EvalSummary:
    """Per-client reports and their unweighted macro-average.

    Split-mode states are routed with ``e_th``; full-model states predict
    with each client's full model (every sample counts as a client exit).
    """
    if len(eval_sets) != len(state.clients):
        raise ValueError(f"{len(state.clients)} clients but {len(eval_sets)} eval sets")
    reports = []
    for c, es in zip(state.clients, eval_sets):
        if len(es.main) + len(es.ood) == 0:
            raise ValueError(f"client {c.cid} has an empty eval set")
        x = es.combined().x
        if state.theta is not None:
            if e_th is None:
                raise ValueError("split-mode evaluation needs an entropy threshold")
            rb = route_batch(c.phi, c.h, state.theta, x, e_th)
            reports.append(_tally(c.cid, es, e_th, rb.prediction, rb.at_client, rb.client_prediction, rb.server_prediction))
        else:
            pred = np.argmax(forward(c.full, x), axis=1)
            reports.append(_tally(c.cid, es, math.nan, pred, np.ones(len(pred), bool), pred, pred))
    return EvalSummary(reports)


def sweep_thresholds(state, eval_sets, grid: Sequence[float] = E_TH_GRID) -> dict[float, EvalSummary]:
    return {float(e): evaluate(state, eval_sets, e) for e in grid}


def best_threshold(sweep: dict[float, EvalSummary]) -> tuple[float, EvalSummary]:
    """Grid value with the highest macro accuracy; ties go to the smaller threshold."""
    best = max(sweep.items(), key=lambda kv: (kv[1].acc_overall, -kv[0]))
    return best
