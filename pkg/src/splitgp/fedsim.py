"""SplitGP training loop and the three baselines over K simulated clients.

Modes
-----
``splitgp``       two-exit training, λ-mixed client aggregation, shared server part.
``splitfed``      same loop with γ = 0 and λ = 0.
``fedavg``        one full model trained on the server-exit loss, plain weighted averaging.
``personalized``  ``fedavg`` followed by local-only fine-tuning epochs on every client.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import seeding
from .data import LabeledDataset
from .nn import (
    LayeredModel,
    NumericalError,
    ShapeError,
    backward_multi_exit,
    backward_single_exit,
    sgd_step,
)
from .partition import ModelSpec, init_partition

MODES = ("splitgp", "fedavg", "splitfed", "personalized")
SPLIT_MODES = ("splitgp", "splitfed")


def lr_schedule(t: int, eta0: float, c: float, lam: float) -> float:
    """η_t = η₀ / (a + t) with a = (c + 4) / (1 − λ²)."""
    if not c > 0:
        raise ValueError(f"schedule constant c must be positive, got {c}")
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"the decaying schedule needs 0 <= lambda < 1, got {lam}")
    a = (c + 4.0) / (1.0 - lam * lam)
    return eta0 / (a + t)


@dataclass
class TrainConfig:
    mode: str = "splitgp"
    gamma: float = 0.5
    lam: float = 0.2
    lr: float = 0.01
    # (eta0, c) switches to the decaying schedule
    schedule: tuple[float, float] | None = None
    rounds: int = 100
    batch_size: int = 50
    local_steps: int | None = None  # None: one local epoch per round
    finetune_epochs: int = 5
    seed: int = 0
    workers: int = 1
    track_grad_norm: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for name in ("gamma", "lam"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.local_steps is not None and self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")
        if self.schedule is not None:
            self.schedule = tuple(float(v) for v in self.schedule)
            lr_schedule(0, self.schedule[0], self.schedule[1], self.effective_lam)
        elif not self.lr > 0:
            raise ValueError("lr must be positive")

    @property
    def effective_gamma(self) -> float:
        return 0.0 if self.mode != "splitgp" else self.gamma

    @property
    def effective_lam(self) -> float:
        return self.lam if self.mode == "splitgp" else 0.0

    def lr_at(self, t: int) -> float:
        if self.schedule is None:
            return self.lr
        eta0, c = self.schedule
        return lr_schedule(t, eta0, c, self.effective_lam)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["schedule"] is not None:
            d["schedule"] = list(d["schedule"])
        return d


@dataclass
class ClientState:
    cid: int
    data: LabeledDataset
    alpha: float
    phi: LayeredModel | None = None
    h: LayeredModel | None = None
    full: LayeredModel | None = None  # full-model modes only


@dataclass
class FederationState:
    mode: str
    clients: list[ClientState]
    theta: LayeredModel | None
    t: int = 0

    @property
    def alphas(self) -> np.ndarray:
        return np.array([c.alpha for c in self.clients])

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "t": self.t,
            "theta": None if self.theta is None else self.theta.to_dict(),
            "clients": [
                {
                    "cid": c.cid,
                    "alpha": c.alpha,
                    "phi": None if c.phi is None else c.phi.to_dict(),
                    "h": None if c.h is None else c.h.to_dict(),
                    "full": None if c.full is None else c.full.to_dict(),
                }
                for c in self.clients
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict, datasets: Sequence[LabeledDataset]) -> "FederationState":
        def load(d):
            return None if d is None else LayeredModel.from_dict(d)

        clients = [
            ClientState(c["cid"], datasets[i], c["alpha"], load(c["phi"]), load(c["h"]), load(c["full"]))
            for i, c in enumerate(doc["clients"])
        ]
        return cls(doc["mode"], clients, load(doc["theta"]), doc["t"])


class RoundRecord(NamedTuple):
    round: int
    mode: str
    lr: float
    loss_client: float
    loss_server: float
    objective: float
    grad_norm: float
    grad_norm_min: float


@dataclass
class History:
    records: list[RoundRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(RoundRecord._fields) + "\n")
            for r in self.records:
                fh.write(",".join(_fmt(v) for v in r) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- local work -------------------------------------------------------------

def minibatches(n: int, batch_size: int, steps: int | None, seed: int, stream: int, cid: int, rnd: int):
    """Yield index arrays; each epoch reshuffles with a key of (seed, stream, client, round, epoch)."""
    per_epoch = math.ceil(n / batch_size)
    steps = per_epoch if steps is None else steps
    epoch = 0
    done = 0
    while done < steps:
        perm = seeding.derive_rng(seed, stream, cid, rnd, epoch).permutation(n)
        for start in range(0, n, batch_size):
            if done == steps:
                return
            yield perm[start:start + batch_size]
            done += 1
        epoch += 1


class LocalResult(NamedTuple):
    phi: LayeredModel
    h: LayeredModel
    theta: LayeredModel
    loss_client: float
    loss_server: float
    objective: float


def local_round(client: ClientState, theta: LayeredModel, cfg: TrainConfig, lr: float, rnd: int = 0) -> LocalResult:
    """Mini-batch SGD on (phi_k, h_k, working copy of theta) for one round."""
    if len(client.data) == 0:
        raise ValueError(f"client {client.cid} has no data")
    gamma = cfg.effective_gamma
    phi, h, th = client.phi, client.h, theta
    lc = ls = obj = 0.0
    steps = 0
    batches = minibatches(len(client.data), cfg.batch_size, cfg.local_steps, cfg.seed, seeding.SHUFFLE, client.cid, rnd)
    for step, idx in enumerate(batches):
        g = backward_multi_exit(
            phi, h, th, client.data.x[idx], client.data.y[idx], gamma,
            context={"round": rnd, "client": client.cid, "step": step},
        )
        phi = sgd_step(phi, g.phi, lr)
        h = sgd_step(h, g.h, lr)
        th = sgd_step(th, g.theta, lr)
        lc += g.loss_client
        ls += g.loss_server
        obj += g.objective
        steps += 1
    return LocalResult(phi, h, th, lc / steps, ls / steps, obj / steps)


def local_round_full(
    model: LayeredModel,
    data: LabeledDataset,
    cfg: TrainConfig,
    lr: float,
    cid: int,
    rnd: int,
    stream: int = seeding.SHUFFLE,
    steps: int | None = None,
) -> tuple[LayeredModel, float]:
    steps = cfg.local_steps if steps is None else steps
    total = 0.0
    count = 0
    for step, idx in enumerate(minibatches(len(data), cfg.batch_size, steps, cfg.seed, stream, cid, rnd)):
        grads, loss = backward_single_exit(
            model, data.x[idx], data.y[idx], context={"round": rnd, "client": cid, "step": step}
        )
        model = sgd_step(model, grads, lr)
        total += loss
        count += 1
    return model, total / count


# -- aggregation ------------------------------------------------------------

def _check_alpha(alpha, k: int) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (k,):
        raise ShapeError(f"{k} models but {alpha.size} weights")
    if abs(alpha.sum() - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights sum to {alpha.sum()}, not 1")
    return alpha


def weighted_average(models: Sequence[LayeredModel], alpha) -> LayeredModel:
    """Entrywise Σ α_i m_i, accumulated in ascending index order."""
    alpha = _check_alpha(alpha, len(models))
    blocks = [m.params() for m in models]
    ref = [p.shape for p in blocks[0]]
    for i, bl in enumerate(blocks[1:], start=1):
        if [p.shape for p in bl] != ref:
            raise ShapeError(f"model {i} has a different shape from model 0")
    acc = [alpha[0] * p for p in blocks[0]]
    for a, bl in zip(alpha[1:], blocks[1:]):
        acc = [s + a * p for s, p in zip(acc, bl)]
    return models[0].with_params(acc)


def aggregate_server(theta_list: Sequence[LayeredModel], alpha) -> LayeredModel:
    return weighted_average(theta_list, alpha)


def _mix(model: LayeredModel, mean: LayeredModel, lam: float) -> LayeredModel:
    return model.with_params([lam * p + (1.0 - lam) * m for p, m in zip(model.params(), mean.params())])


def aggregate_clients(phi_list, h_list, alpha, lam: float):
    """phi_k <- λ phi_k + (1-λ) Σ α_i phi_i, and the same for h_k.

    The weighted means are computed once and shared by every client.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    phi_mean = weighted_average(phi_list, alpha)
    h_mean = weighted_average(h_list, alpha)
    return (
        [_mix(p, phi_mean, lam) for p in phi_list],
        [_mix(h, h_mean, lam) for h in h_list],
    )


# -- driver -----------------------------------------------------------------

def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def init_state(cfg: TrainConfig, clients_data: Sequence[LabeledDataset], spec: ModelSpec) -> FederationState:
    sizes = np.array([len(d) for d in clients_data], dtype=np.float64)
    if np.any(sizes == 0):
        raise ValueError("every client needs at least one training sample")
    alpha = sizes / sizes.sum()
    part = init_partition(spec, seeding.derive_rng(cfg.seed, seeding.INIT))
    if cfg.mode in SPLIT_MODES:
        clients = [
            ClientState(k, d, float(alpha[k]), phi=part.phi.copy(), h=part.h.copy())
            for k, d in enumerate(clients_data)
        ]
        return FederationState(cfg.mode, clients, part.theta.copy())
    full = part.full_model()
    clients = [ClientState(k, d, float(alpha[k]), full=full.copy()) for k, d in enumerate(clients_data)]
    return FederationState(cfg.mode, clients, None)


def train_round(state: FederationState, cfg: TrainConfig) -> None:
    """One global round: local updates on every client, then aggregation."""
    t = state.t
    lr = cfg.lr_at(t)
    if state.mode in SPLIT_MODES:
        results = _map(lambda c: local_round(c, state.theta, cfg, lr, t), state.clients, cfg.workers)
        state.theta = aggregate_server([r.theta for r in results], state.alphas)
        phis, hs = aggregate_clients(
            [r.phi for r in results], [r.h for r in results], state.alphas, cfg.effective_lam
        )
        for c, p, h in zip(state.clients, phis, hs):
            c.phi, c.h = p, h
    else:
        results = _map(
            lambda c: local_round_full(c.full, c.data, cfg, lr, c.cid, t)[0], state.clients, cfg.workers
        )
        mean = weighted_average(results, state.alphas)
        for c in state.clients:
            c.full = mean.copy()
    state.t += 1


def finetune(state: FederationState, cfg: TrainConfig) -> None:
    """Local-only fine-tuning of each client's full model; no aggregation."""
    lr = cfg.lr_at(state.t)

    def tune(c: ClientState) -> LayeredModel:
        steps = cfg.finetune_epochs * math.ceil(len(c.data) / cfg.batch_size)
        return local_round_full(c.full, c.data, cfg, lr, c.cid, 0, stream=seeding.FINETUNE, steps=steps)[0]

    for c, m in zip(state.clients, _map(tune, state.clients, cfg.workers)):
        c.full = m


def run_training(
    cfg: TrainConfig,
    clients_data: Sequence[LabeledDataset],
    spec: ModelSpec,
    on_round: Callable[[int, FederationState], None] | None = None,
) -> tuple[FederationState, History]:
    from .diagnostics import full_batch_stats

    state = init_state(cfg, clients_data, spec)
    history = History()
    running_min = math.inf

    def record(lr: float):
        nonlocal running_min
        stats = full_batch_stats(state, cfg.effective_gamma, with_grad=cfg.track_grad_norm)
        if cfg.track_grad_norm:
            running_min = min(running_min, stats.grad_norm)
        history.records.append(
            RoundRecord(
                state.t, cfg.mode, lr, stats.loss_client, stats.loss_server, stats.objective,
                stats.grad_norm, running_min if cfg.track_grad_norm else math.nan,
            )
        )

    record(math.nan)
    for t in range(cfg.rounds):
        lr = cfg.lr_at(t)
        try:
            train_round(state, cfg)
        except NumericalError as err:
            raise NumericalError(f"training aborted in round {t}: {err}") from err
        record(lr)
        if on_round is not None:
            on_round(t, state)
    if cfg.mode == "personalized" and cfg.finetune_epochs > 0:
        finetune(state, cfg)
    return state, history
