"""Experiment configuration: JSON schema, validation and presets.

Schema (all blocks optional except where noted; units in brackets)::

    seed            int     master seed; every random stream derives from it
    name            str     label copied into reports
    output_dir      str     where artifacts go (CLI --out overrides)
    dataset:
      num_classes     int   Q, default 10
      per_class       int   train samples per class, default 600
      test_per_class  int   test samples per class, default 200
      dim             int   feature dimension q, default 10
      spread          float per-class standard deviation, default 1.0
      center_scale    float standard deviation of the class means, default 1.0
    partition:
      num_shards        int  default 20
      clients           int  K, default 10
      shards_per_client int  default 2
      hidden            [int] hidden widths of the full model, default [32, 32]
      cut_index         int  layer index of the cut (activations count), default 2
      h_hidden          [int] hidden widths of the auxiliary head, default [] (one affine layer)
    train:
      modes           [str] any of splitgp, fedavg, splitfed, personalized
      gamma           float client-exit loss weight, default 0.5
      lam             float personalization weight, default 0.2
      lam_sweep       [float] optional; trains splitgp once per value
      lr              float fixed step size, default 0.1
      schedule        [eta0, c] or null; switches to eta0/(a+t)
      rounds          int   T, default 100
      batch_size      int   default 50
      local_steps     int or null (one epoch), default null
      finetune_epochs int   personalized baseline only, default 5
      workers         int   client threads per round, default 1
      track_grad_norm bool  record the full-batch gradient-norm proxy, default false
    eval:
      rhos            [float] OOD-to-main ratios, default [0, 0.4, 0.8]
      e_th_grid       [float] thresholds swept for splitgp, default the 8-point grid
      e_th            float or null; a fixed threshold instead of the grid
      seeds           [int] repetitions; default [seed]
    latency:          LatencyParams fields (P_C, P_S, R, q, q_c, beta, phi, h, theta, D,
                      tau_budget) plus pc_values / r_values sweep lists and phi_min
    bound:
      L, G, c, eta0, F0, F_star  floats; sigma [float] (one per client)
      lam             float, T_values [int]
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .fedsim import MODES, TrainConfig
from .inference import E_TH_GRID
from .latency import REFERENCE_LATENCY, LatencyParams


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    num_classes: int = 10
    per_class: int = 600
    test_per_class: int = 200
    dim: int = 10
    spread: float = 1.0
    center_scale: float = 1.0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("dataset.num_classes: must be >= 2")
        if self.per_class < 1 or self.test_per_class < 1:
            raise ConfigError("dataset.per_class: must be >= 1")
        if self.dim < 1:
            raise ConfigError("dataset.dim: must be >= 1")
        if self.spread < 0:
            raise ConfigError("dataset.spread: must be >= 0")


@dataclass
class PartitionConfig:
    num_shards: int = 20
    clients: int = 10
    shards_per_client: int = 2
    hidden: list = field(default_factory=lambda: [32, 32])
    cut_index: int = 2
    h_hidden: list = field(default_factory=list)

    def validate(self, ds: DatasetConfig):
        if self.num_shards != self.clients * self.shards_per_client:
            raise ConfigError("partition.num_shards: must equal clients * shards_per_client")
        n = ds.num_classes * ds.per_class
        if n % self.num_shards:
            raise ConfigError(f"partition.num_shards: {self.num_shards} does not divide {n} training samples")
        n_layers = 2 * len(self.hidden) + 1
        if not 0 < self.cut_index < n_layers:
            raise ConfigError(f"partition.cut_index: must lie strictly between 0 and {n_layers}")


@dataclass
class TrainBlock:
    modes: list = field(default_factory=lambda: ["splitgp"])
    gamma: float = 0.5
    lam: float = 0.2
    lam_sweep: list | None = None
    lr: float = 0.1
    schedule: list | None = None
    rounds: int = 100
    batch_size: int = 50
    local_steps: int | None = None
    finetune_epochs: int = 5
    workers: int = 1
    track_grad_norm: bool = False

    def validate(self):
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"train.modes: unknown mode {m!r}")
        for lam in self.lams():
            try:
                self.train_config("splitgp", 0, lam)
            except ValueError as err:
                raise ConfigError(f"train: {err}") from err

    def lams(self) -> list[float]:
        return list(self.lam_sweep) if self.lam_sweep else [self.lam]

    def train_config(self, mode: str, seed: int, lam: float | None = None) -> TrainConfig:
        return TrainConfig(
            mode=mode,
            gamma=self.gamma,
            lam=self.lam if lam is None else lam,
            lr=self.lr,
            schedule=None if self.schedule is None else tuple(self.schedule),
            rounds=self.rounds,
            batch_size=self.batch_size,
            local_steps=self.local_steps,
            finetune_epochs=self.finetune_epochs,
            seed=seed,
            workers=self.workers,
            track_grad_norm=self.track_grad_norm,
        )


@dataclass
class EvalConfig:
    rhos: list = field(default_factory=lambda: [0.0, 0.4, 0.8])
    e_th_grid: list = field(default_factory=lambda: list(E_TH_GRID))
    e_th: float | None = None
    seeds: list | None = None

    def validate(self):
        if any(r < 0 for r in self.rhos):
            raise ConfigError("eval.rhos: values must be >= 0")
        if self.e_th is None and not self.e_th_grid:
            raise ConfigError("eval.e_th_grid: empty grid and no fixed e_th")

    def thresholds(self) -> list[float]:
        return [float(self.e_th)] if self.e_th is not None else [float(e) for e in self.e_th_grid]


@dataclass
class LatencyConfig:
    params: LatencyParams
    pc_values: list = field(default_factory=list)
    r_values: list = field(default_factory=list)
    phi_min: float | None = None


@dataclass
class BoundConfig:
    L: float = 1.0
    G: float = 1.0
    sigma: list = field(default_factory=lambda: [1.0] * 10)
    c: float = 1.0
    eta0: float = 1.0
    F0: float = 2.302585092994046
    F_star: float = 0.0
    lam: float = 0.2
    T_values: list = field(default_factory=lambda: [10, 100, 1000, 10_000, 100_000, 1_000_000])


@dataclass
class ExperimentConfig:
    seed: int = 0
    name: str = "experiment"
    output_dir: str = "runs/experiment"
    dataset: DatasetConfig | None = None
    partition: PartitionConfig | None = None
    train: TrainBlock | None = None
    eval: EvalConfig | None = None
    latency: LatencyConfig | None = None
    bound: BoundConfig | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def seeds(self) -> list[int]:
        if self.eval is not None and self.eval.seeds:
            return [int(s) for s in self.eval.seeds]
        return [self.seed]

    @property
    def has_training(self) -> bool:
        return self.train is not None

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.raw).encode()).hexdigest()


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _build(cls, block: str, doc: dict):
    if not isinstance(doc, dict):
        raise ConfigError(f"{block}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{block}.{unknown[0]}: unknown field")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{block}: {err}") from err


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate every block before any work starts."""
    doc = copy.deepcopy(doc)
    top = {"seed", "name", "output_dir", "dataset", "partition", "train", "eval", "latency", "bound"}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown top-level field")
    cfg = ExperimentConfig(
        seed=int(doc.get("seed", 0)),
        name=str(doc.get("name", "experiment")),
        output_dir=str(doc.get("output_dir", "runs/experiment")),
        raw=doc,
    )
    if "train" in doc:
        cfg.dataset = _build(DatasetConfig, "dataset", doc.get("dataset", {}))
        cfg.partition = _build(PartitionConfig, "partition", doc.get("partition", {}))
        cfg.train = _build(TrainBlock, "train", doc["train"])
        cfg.eval = _build(EvalConfig, "eval", doc.get("eval", {}))
        cfg.dataset.validate()
        cfg.partition.validate(cfg.dataset)
        cfg.train.validate()
        cfg.eval.validate()
    if "latency" in doc:
        lat = dict(doc["latency"])
        sweeps = {k: lat.pop(k) for k in ("pc_values", "r_values", "phi_min") if k in lat}
        params = _build(LatencyParams, "latency", lat)
        cfg.latency = LatencyConfig(params, **sweeps)
    if "bound" in doc:
        cfg.bound = _build(BoundConfig, "bound", doc["bound"])
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not valid JSON ({err})") from err
    return parse_config(doc)


# -- presets ----------------------------------------------------------------

_REFERENCE_LATENCY = {
    "P_C": REFERENCE_LATENCY.P_C, "P_S": REFERENCE_LATENCY.P_S, "R": REFERENCE_LATENCY.R,
    "q": REFERENCE_LATENCY.q, "q_c": REFERENCE_LATENCY.q_c, "beta": REFERENCE_LATENCY.beta,
    "phi": REFERENCE_LATENCY.phi, "h": REFERENCE_LATENCY.h, "theta": REFERENCE_LATENCY.theta, "D": REFERENCE_LATENCY.D,
    "pc_values": [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000],
    "r_values": [0.1, 0.2, 0.5, 1, 2, 5, 10, 20, 50, 100],
}

_DESK_DATA = {"num_classes": 10, "per_class": 600, "test_per_class": 200, "dim": 10, "spread": 1.0, "center_scale": 1.0}
_DESK_PARTITION = {"num_shards": 20, "clients": 10, "shards_per_client": 2, "hidden": [32, 32], "cut_index": 2, "h_hidden": []}
_DESK_TRAIN = {"gamma": 0.5, "lam": 0.2, "lr": 0.1, "rounds": 100, "batch_size": 50, "finetune_epochs": 5}
_RHO_GRID = [0.0, 0.2, 0.4, 0.6, 0.8]

PRESETS: dict[str, dict] = {
    "table2": {
        "name": "table2", "seed": 0, "output_dir": "runs/table2",
        "dataset": _DESK_DATA, "partition": _DESK_PARTITION,
        "train": {**_DESK_TRAIN, "modes": ["personalized", "fedavg", "splitgp"]},
        "eval": {"rhos": _RHO_GRID, "seeds": [0, 1, 2]},
        "latency": _REFERENCE_LATENCY,
    },
    "lambda": {
        "name": "lambda", "seed": 0, "output_dir": "runs/lambda",
        "dataset": _DESK_DATA, "partition": _DESK_PARTITION,
        "train": {**_DESK_TRAIN, "modes": ["splitgp"], "lam_sweep": [0.2, 0.3, 0.5, 0.9]},
        "eval": {"rhos": _RHO_GRID, "seeds": [0, 1, 2]},
    },
    "eth": {
        "name": "eth", "seed": 0, "output_dir": "runs/eth",
        "dataset": _DESK_DATA, "partition": _DESK_PARTITION,
        "train": {**_DESK_TRAIN, "modes": ["splitgp"]},
        "eval": {"rhos": _RHO_GRID, "seeds": [0, 1, 2]},
    },
    "fig3": {"name": "fig3", "seed": 0, "output_dir": "runs/fig3", "latency": _REFERENCE_LATENCY},
    "convergence": {
        "name": "convergence", "seed": 0, "output_dir": "runs/convergence",
        "dataset": {**_DESK_DATA, "per_class": 100},
        "partition": _DESK_PARTITION,
        "train": {**_DESK_TRAIN, "modes": ["splitgp"], "schedule": [2.0, 1.0], "rounds": 200, "track_grad_norm": True},
        "eval": {"rhos": [0.0, 0.8]},
        "bound": {"L": 1.0, "G": 1.0, "sigma": [1.0] * 10, "c": 1.0, "eta0": 1.0, "lam": 0.2},
    },
    "smoke": {
        "name": "smoke", "seed": 0, "output_dir": "runs/smoke",
        "dataset": {"num_classes": 4, "per_class": 40, "test_per_class": 20, "dim": 5, "spread": 0.5},
        "partition": {"num_shards": 8, "clients": 4, "shards_per_client": 2, "hidden": [8], "cut_index": 2},
        "train": {"modes": ["personalized", "fedavg", "splitgp"], "lr": 0.1, "rounds": 5, "batch_size": 20,
                  "finetune_epochs": 1, "track_grad_norm": True},
        "eval": {"rhos": [0.0, 0.5], "e_th_grid": [0.1, 0.8, 1.4]},
        "latency": {**_REFERENCE_LATENCY, "pc_values": [10, 20, 40], "r_values": [0.5, 1, 2], "tau_budget": 30000, "phi_min": 100000},
        "bound": {"sigma": [1.0] * 4, "T_values": [10, 1000]},
    },
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return copy.deepcopy(PRESETS[name])
