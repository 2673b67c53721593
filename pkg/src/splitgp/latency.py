"""Inference-time accounting for full-at-client, full-at-server and split deployment.

Latency is modelled as proportional to parameter count: running ``n``
parameters over ``|D|`` samples at compute rate ``P`` costs ``n|D|/P``.
Shipping a vector of dimension ``d`` costs ``d/R`` per sample.

``beta`` is the fraction of samples that leave the device (cut-layer feature
is uploaded and the server part runs). It multiplies the uplink and
server-compute terms. An evaluation that reports the client-exit share
``beta_hat`` maps onto ``beta = 1 - beta_hat``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence


@dataclass(frozen=True)
class LatencyParams:
    P_C: float
    P_S: float
    R: float
    q: float
    q_c: float
    beta: float
    phi: float
    h: float
    theta: float
    D: float = 1.0
    tau_budget: float | None = None  # per-sample latency target

    def __post_init__(self):
        for name in ("P_C", "P_S", "R"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        for name in ("q", "q_c", "phi", "h", "theta", "D"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def w(self) -> float:
        return self.phi + self.theta

    def with_(self, **changes) -> "LatencyParams":
        return replace(self, **changes)


# Parameter counts of the FMNIST CNN split used for the published latency curves.
REFERENCE_CNN = dict(phi=387_840, h=23_050, theta=3_480_330)
# q and q_c are fixture choices (28x28 input); only the sizes and rates are published.
REFERENCE_LATENCY = LatencyParams(P_C=20, P_S=100, R=1, q=784, q_c=784, beta=0.1, D=1, **REFERENCE_CNN)


def tau_client_full(p: LatencyParams) -> float:
    """Whole model on the device."""
    return (p.phi + p.theta) * p.D / p.P_C


def tau_server_full(p: LatencyParams) -> float:
    """Raw input uploaded, whole model on the server."""
    return p.q * p.D / p.R + (p.phi + p.theta) * p.D / p.P_S


def tau_splitgp(p: LatencyParams) -> float:
    return (p.phi + p.h) * p.D / p.P_C + p.beta * p.q_c * p.D / p.R + p.beta * p.theta * p.D / p.P_S


class ResourceRow(NamedTuple):
    method: str
    storage: float
    computation: float
    communication: float
    inference_time: float


def resource_table(p: LatencyParams) -> list[ResourceRow]:
    """Per-client storage, compute, uplink load and time for the three deployments."""
    return [
        ResourceRow("server_full", 0.0, 0.0, p.q * p.D, tau_server_full(p)),
        ResourceRow("client_full", p.phi + p.theta, (p.phi + p.theta) * p.D, 0.0, tau_client_full(p)),
        ResourceRow("splitgp", p.phi + p.h, (p.phi + p.h) * p.D, p.beta * p.q_c * p.D, tau_splitgp(p)),
    ]


def _fixed_cost(p: LatencyParams) -> float:
    return p.beta * p.q_c / p.R + p.h / p.P_C + p.beta * p.w / p.P_S


def feasible_phi_range(p: LatencyParams, phi_min: float) -> tuple[float, float] | None:
    """Client-part sizes meeting both the per-sample budget and ``|phi| >= phi_min``.

    The full-model size ``p.w`` is held fixed while ``|phi|`` moves, so the
    server part shrinks as the client part grows. Returns ``None`` when the
    range is empty.
    """
    if p.tau_budget is None:
        raise ValueError("feasible_phi_range needs tau_budget")
    denom = p.P_S - p.beta * p.P_C
    if denom <= 0:
        raise ValueError("P_S - beta*P_C must be positive for the feasible range to be an upper bound")
    upper = p.P_C * p.P_S * (p.tau_budget - _fixed_cost(p)) / denom
    if upper < phi_min:
        return None
    return (float(phi_min), upper)


def pc_threshold(p: LatencyParams) -> float:
    """Largest client compute rate at which split inference is no slower than full-on-device.

    ``tau <= tau_1`` iff ``P_C <= pc_threshold(p)``. With ``beta = 0`` the
    answer does not depend on ``P_C``: ``inf`` if ``|h| <= |theta|``, else ``-inf``.
    """
    if p.beta == 0:
        return math.inf if p.h <= p.theta else -math.inf
    denom = p.beta * (p.q_c / p.R + p.theta / p.P_S)
    if denom == 0:
        return math.inf if p.h <= p.theta else -math.inf
    return (p.theta - p.h) / denom


@dataclass(frozen=True)
class RateThreshold:
    """Verdict on ``tau <= tau_2`` as a condition on the uplink rate R.

    kind is one of ``always``, ``never``, ``upper`` (holds iff R <= value)
    or ``lower`` (holds iff R >= value).
    """

    kind: str
    value: float = math.nan

    def holds(self, R: float) -> bool:
        if self.kind == "always":
            return True
        if self.kind == "never":
            return False
        if self.kind == "upper":
            return R <= self.value
        return R >= self.value


def rate_threshold(p: LatencyParams, formula: str = "exact") -> RateThreshold | float:
    """Uplink-rate condition under which split inference beats full-on-server.

    ``formula="closed_form"`` returns the published closed form as a bare number,
    whose denominator uses ``(1-beta)(|phi|+|theta|)/P_S``. ``"exact"``
    rearranges the two latency expressions directly:

        tau <= tau_2  iff  (q - beta q_c) / R >= (|phi|+|h|)/P_C - (|phi| + (1-beta)|theta|)/P_S
    """
    num = p.q - p.beta * p.q_c
    if formula == "closed_form":
        return num / ((p.phi + p.h) / p.P_C - (1.0 - p.beta) * (p.phi + p.theta) / p.P_S)
    if formula != "exact":
        raise ValueError(f"unknown formula {formula!r}")
    side = (p.phi + p.h) / p.P_C - (p.phi + (1.0 - p.beta) * p.theta) / p.P_S
    if side > 0:
        return RateThreshold("upper", num / side) if num > 0 else RateThreshold("never")
    if num >= 0:
        return RateThreshold("always")
    if side == 0:
        return RateThreshold("never")
    # both negative: num/R >= side  <=>  R >= num/side
    return RateThreshold("lower", num / side)


class SweepRow(NamedTuple):
    value: float
    tau_client_full: float
    tau_server_full: float
    tau_splitgp: float


def sweep(p: LatencyParams, field: str, values: Sequence[float]) -> list[SweepRow]:
    """Evaluate the three inference times while varying one parameter."""
    rows = []
    for v in values:
        pv = p.with_(**{field: v})
        rows.append(SweepRow(float(v), tau_client_full(pv), tau_server_full(pv), tau_splitgp(pv)))
    return rows


def sweep_csv_text(field: str, rows: Sequence[SweepRow]) -> str:
    lines = [f"{field},tau_client_full,tau_server_full,tau_splitgp"]
    lines += [",".join(repr(float(v)) for v in r) for r in rows]
    return "\n".join(lines) + "\n"


def write_sweep_csv(path, field: str, rows: Sequence[SweepRow]) -> None:
    with open(path, "w") as fh:
        fh.write(sweep_csv_text(field, rows))
