"""Experiment orchestration: generate -> partition -> train -> evaluate -> latency/bound -> report.

Every metric file is a pure function of the config; wall-clock times only
appear in ``manifest.json``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .config import ExperimentConfig
from .data import build_eval_set, generate_synthetic, shard_partition
from .diagnostics import BoundConstants, bound_rhs, build_trace, epsilon_lambda, schedule_array
from .fedsim import FederationState, History, TrainConfig, run_training
from .inference import evaluate
from .latency import (
    feasible_phi_range,
    pc_threshold,
    rate_threshold,
    resource_table,
    sweep,
    tau_client_full,
    tau_server_full,
    tau_splitgp,
    sweep_csv_text,
)
from .partition import ModelSpec

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {cause}")


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    version: str = __version__
    stage_seconds: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    failed_stage: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


class RunDir:
    """Writes files atomically and remembers each one for the manifest."""

    def __init__(self, root, manifest: RunManifest):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = manifest

    def _register(self, rel: str):
        if rel not in self.manifest.outputs:
            self.manifest.outputs.append(rel)

    def write_text(self, rel: str, text: str) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, path)
        self._register(rel)
        return path

    def write_csv(self, rel: str, header, rows) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
        return self.write_text(rel, buf.getvalue())

    def figure(self, rel: str, draw, *args) -> Path:
        path = self.root / rel
        draw(*args, path)
        self._register(rel)
        return path

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        log.info("stage %s", name)
        try:
            yield
        except StageError:
            raise
        except Exception as err:
            raise StageError(name, err) from err
        finally:
            self.manifest.stage_seconds[name] = round(time.perf_counter() - start, 3)

    def finish(self) -> Path:
        self.manifest.outputs.sort()
        self._register("manifest.json")
        self.manifest.outputs.sort()
        return self.write_text("manifest.json", self.manifest.to_json())


def _cell(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if math.isnan(v) else repr(v)
    return v


# -- data & training ------------------------------------------------------

@dataclass
class SeedData:
    train: object
    test: object
    clients: list


def prepare_data(cfg: ExperimentConfig, seed: int) -> SeedData:
    ds, pt = cfg.dataset, cfg.partition
    train, test = generate_synthetic(
        ds.num_classes, ds.per_class, ds.dim, ds.spread, seed,
        center_scale=ds.center_scale, test_per_class=ds.test_per_class,
    )
    clients = shard_partition(train, pt.num_shards, pt.clients, pt.shards_per_client, seed)
    return SeedData(train, test, clients)


def model_spec(cfg: ExperimentConfig) -> ModelSpec:
    return ModelSpec(
        cfg.dataset.dim, cfg.dataset.num_classes, tuple(cfg.partition.hidden),
        cfg.partition.cut_index, tuple(cfg.partition.h_hidden),
    )


@dataclass
class TrainedRun:
    key: str
    mode: str
    lam: float
    seed: int
    cfg: TrainConfig
    state: FederationState
    history: History


def run_keys(cfg: ExperimentConfig, seeds, modes=None):
    """(key, mode, lam, seed) for every training run the config asks for."""
    modes = modes or cfg.train.modes
    tag_lam = bool(cfg.train.lam_sweep)
    out = []
    for seed in seeds:
        for mode in modes:
            lams = cfg.train.lams() if mode == "splitgp" else [cfg.train.lam]
            for lam in lams:
                key = f"{mode}-seed{seed}" + (f"-lam{lam:g}" if tag_lam and mode == "splitgp" else "")
                out.append((key, mode, float(lam), int(seed)))
    return out


def train_all(cfg: ExperimentConfig, run: RunDir, data: dict, modes=None, workers=None) -> list[TrainedRun]:
    spec = model_spec(cfg)
    trained = []
    for key, mode, lam, seed in run_keys(cfg, sorted(data), modes):
        tcfg = cfg.train.train_config(mode, seed, lam)
        if workers is not None:
            tcfg.workers = workers
        log.info("training %s", key)
        state, history = run_training(tcfg, data[seed].clients, spec)
        run.write_text(f"history/{key}.csv", _history_csv(history, lam))
        run.write_text(f"checkpoints/{key}.json", state.to_json())
        trained.append(TrainedRun(key, mode, lam, seed, tcfg, state, history))
    return trained


def _history_csv(history: History, lam: float) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "mode", "lam", "lr", "loss_client", "loss_server", "objective", "grad_norm", "grad_norm_min"])
    for r in history.records:
        w.writerow([r.round, r.mode, _cell(lam), _cell(r.lr), _cell(r.loss_client), _cell(r.loss_server),
                    _cell(r.objective), _cell(r.grad_norm), _cell(r.grad_norm_min)])
    return buf.getvalue()


def load_trained(cfg: ExperimentConfig, run_dir, data: dict, modes=None) -> list[TrainedRun]:
    root = Path(run_dir)
    out = []
    for key, mode, lam, seed in run_keys(cfg, sorted(data), modes):
        ckpt = root / "checkpoints" / f"{key}.json"
        if not ckpt.exists():
            raise FileNotFoundError(f"missing checkpoint {ckpt}; run 'train' first")
        state = FederationState.from_dict(json.loads(ckpt.read_text()), data[seed].clients)
        out.append(TrainedRun(key, mode, lam, seed, cfg.train.train_config(mode, seed, lam), state, History()))
    return out


# -- evaluation -----------------------------------------------------------

EVAL_CLIENT_HEADER = ["mode", "lam", "seed", "rho", "e_th", "client", "n_main", "n_ood",
                      "acc_main", "acc_ood", "acc_overall", "beta_hat"]
EVAL_MACRO_HEADER = ["mode", "lam", "seed", "rho", "e_th", "acc_overall", "acc_main", "acc_ood",
                     "beta_hat", "acc_client_exit", "acc_server_exit"]


def evaluate_all(cfg: ExperimentConfig, run: RunDir, trained: list[TrainedRun], data: dict) -> None:
    client_rows, macro_rows, best_rows = [], [], []
    thresholds = cfg.eval.thresholds()
    for tr in trained:
        test = data[tr.seed].test
        for rho in cfg.eval.rhos:
            rho = float(rho)
            sets = [build_eval_set(c.data.classes, test, rho, tr.seed, c.cid) for c in tr.state.clients]
            grid = thresholds if tr.state.theta is not None else [math.nan]
            results = []
            for e in grid:
                summ = evaluate(tr.state, sets, None if math.isnan(e) else e)
                results.append((e, summ))
                for r in summ.reports:
                    client_rows.append([tr.mode, tr.lam, tr.seed, rho, e, r.client, r.n_main, r.n_ood,
                                        r.acc_main, r.acc_ood, r.acc_overall, r.beta_hat])
                macro_rows.append([tr.mode, tr.lam, tr.seed, rho, e, summ.acc_overall, summ.acc_main,
                                   summ.acc_ood, summ.beta_hat, summ.acc_client_exit, summ.acc_server_exit])
            # oracle grid: best macro accuracy, ties to the smaller threshold
            e_best, s_best = max(results, key=lambda es: (es[1].acc_overall, -(0 if math.isnan(es[0]) else es[0])))
            best_rows.append([tr.mode, tr.lam, tr.seed, rho, e_best, s_best.acc_overall, s_best.beta_hat])
    run.write_csv("eval/clients.csv", EVAL_CLIENT_HEADER, client_rows)
    run.write_csv("eval/accuracy.csv", EVAL_MACRO_HEADER, macro_rows)
    run.write_csv("eval/best.csv", ["mode", "lam", "seed", "rho", "best_e_th", "acc_overall", "beta_hat"], best_rows)


# -- analytic stages ------------------------------------------------------

def run_latency(cfg: ExperimentConfig, run: RunDir) -> dict:
    lc = cfg.latency
    p = lc.params
    run.write_csv(
        "latency/resources.csv", ["method", "storage", "computation", "communication", "inference_time"],
        resource_table(p),
    )
    exact = rate_threshold(p, "exact")
    summary = {
        "params": asdict(p),
        "tau_client_full": tau_client_full(p),
        "tau_server_full": tau_server_full(p),
        "tau_splitgp": tau_splitgp(p),
        "pc_threshold": _json_float(pc_threshold(p)),
        "splitgp_beats_client_full": tau_splitgp(p) <= tau_client_full(p),
        "splitgp_beats_server_full": tau_splitgp(p) <= tau_server_full(p),
        "rate_threshold_exact": {"kind": exact.kind, "value": _json_float(exact.value)},
        "rate_threshold_closed_form": _json_float(rate_threshold(p, "closed_form")),
    }
    if lc.phi_min is not None and p.tau_budget is not None:
        rng = feasible_phi_range(p, lc.phi_min)
        summary["feasible_phi_range"] = None if rng is None else list(rng)
    if lc.pc_values:
        rows = sweep(p, "P_C", lc.pc_values)
        run.write_text("latency/sweep_pc.csv", sweep_csv_text("P_C", rows))
        run.figure("figures/latency_vs_pc.png", plotting.latency_sweep, rows, "P_C")
    if lc.r_values:
        rows = sweep(p, "R", lc.r_values)
        run.write_text("latency/sweep_r.csv", sweep_csv_text("R", rows))
        run.figure("figures/latency_vs_r.png", plotting.latency_sweep, rows, "R")
    run.write_text("latency/summary.json", json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _json_float(v: float):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def _json_clean(obj):
    """Recursively replace non-finite floats so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: _json_clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_clean(v) for v in obj]
    return _json_float(obj)


def bound_constants(b, K: int | None = None) -> BoundConstants:
    return BoundConstants(L=b.L, G=b.G, sigma=list(b.sigma), c=b.c, eta0=b.eta0, F0=b.F0, F_star=b.F_star)


def bound_table(bc: BoundConstants, lam: float, T_values) -> list[list]:
    rows = []
    for T in T_values:
        eta = schedule_array(int(T), bc.eta0, bc.c, lam)
        rows.append([int(T), float(eta.sum()), bound_rhs(int(T), bc, lam)])
    return rows


def run_bound(cfg: ExperimentConfig, run: RunDir, trained: list[TrainedRun] | None = None) -> None:
    b = cfg.bound
    bc = bound_constants(b)
    eps = epsilon_lambda(b.lam, b.c, b.G, b.L)
    run.write_csv("bound/bound.csv", ["T", "Gamma_T", "bound_rhs"], bound_table(bc, b.lam, b.T_values))
    run.write_text("bound/summary.json", json.dumps({"lam": b.lam, "epsilon": eps, "constants": asdict(bc)},
                                                   indent=2, sort_keys=True))
    for tr in trained or []:
        if tr.cfg.track_grad_norm and tr.mode == "splitgp":
            trace = build_trace(tr.history, bc if len(bc.sigma) == len(tr.state.clients) else None, b.lam)
            run.write_text(f"convergence/{tr.key}.csv", trace.csv_text())
            run.figure(f"figures/convergence_{tr.key}.png", plotting.convergence, trace)


# -- driver ---------------------------------------------------------------

def run_experiment(
    cfg: ExperimentConfig,
    out_dir=None,
    seed: int | None = None,
    modes=None,
    workers: int | None = None,
    train: bool = True,
    evaluate_stage: bool = True,
) -> RunManifest:
    """Run every stage the config enables and write artifacts under ``out_dir``."""
    out_dir = Path(out_dir or cfg.output_dir)
    seeds = [seed] if seed is not None else cfg.seeds
    manifest = RunManifest(cfg.digest(), seeds[0])
    run = RunDir(out_dir, manifest)
    run.write_text("config.json", json.dumps(cfg.raw, indent=2, sort_keys=True))
    try:
        trained: list[TrainedRun] = []
        if cfg.has_training:
            with run.stage("generate"):
                data = {s: prepare_data(cfg, s) for s in seeds}
            if train:
                with run.stage("train"):
                    trained = train_all(cfg, run, data, modes, workers)
            else:
                with run.stage("load"):
                    trained = load_trained(cfg, out_dir, data, modes)
            if evaluate_stage and cfg.eval.rhos:
                with run.stage("evaluate"):
                    evaluate_all(cfg, run, trained, data)
        if cfg.latency is not None:
            with run.stage("latency"):
                run_latency(cfg, run)
        if cfg.bound is not None:
            with run.stage("bound"):
                run_bound(cfg, run, trained)
        if evaluate_stage:
            with run.stage("report"):
                emit_report(out_dir, run)
    except StageError as err:
        # keep what earlier stages wrote, listed in a manifest that names the failure
        manifest.failed_stage = err.stage
        run.finish()
        raise
    run.finish()
    return manifest


# -- reporting ------------------------------------------------------------

def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _f(s: str) -> float:
    return math.nan if s == "" else float(s)


def emit_report(run_dir, run: RunDir | None = None) -> dict:
    """Summarise a completed run into ``summary.json`` and ``summary.txt``.

    Raises ``FileNotFoundError`` listing every file the manifest mentions
    that is no longer on disk.
    """
    root = Path(run_dir)
    if run is None:
        mpath = root / "manifest.json"
        if not mpath.exists():
            raise FileNotFoundError(f"missing files: {mpath}")
        doc = json.loads(mpath.read_text())
        missing = [o for o in doc["outputs"] if not (root / o).exists() and o not in ("summary.json", "summary.txt")]
        if missing:
            raise FileNotFoundError("missing files: " + ", ".join(missing))
        manifest = RunManifest(doc["config_hash"], doc["seed"], doc["version"], doc["stage_seconds"], doc["outputs"])
        run = RunDir(root, manifest)
        standalone = True
    else:
        standalone = False

    summary: dict = {"training": {}, "accuracy": [], "best_threshold": [], "latency": None}
    lines: list[str] = []

    hist_dir = root / "history"
    if hist_dir.exists():
        for path in sorted(hist_dir.glob("*.csv")):
            rows = _read_csv(path)
            last = rows[-1]
            summary["training"][path.stem] = {
                "rounds": int(last["round"]),
                "objective": _f(last["objective"]),
                "loss_client": _f(last["loss_client"]),
                "loss_server": _f(last["loss_server"]),
                "grad_norm_min": _f(last["grad_norm_min"]),
            }
        lines.append("Training (final full-batch objective)")
        for key, t in summary["training"].items():
            lines.append(f"  {key:<32s} F={t['objective']:.4f}")

    best_path = root / "eval" / "best.csv"
    acc_path = root / "eval" / "accuracy.csv"
    if best_path.exists():
        best = _read_csv(best_path)
        tagged = len({r["lam"] for r in best if r["mode"] == "splitgp"}) > 1
        groups: dict = defaultdict(list)
        for r in best:
            groups[(r["mode"], _f(r["lam"]), _f(r["rho"]))].append(r)
        for (mode, lam, rho), rs in sorted(groups.items()):
            summary["accuracy"].append({
                "mode": mode, "lam": lam, "rho": rho, "lam_tagged": tagged and mode == "splitgp",
                "acc_overall": float(np.mean([_f(r["acc_overall"]) for r in rs])),
                "beta_hat": float(np.mean([_f(r["beta_hat"]) for r in rs])),
                "seeds": len(rs),
            })
        rhos = sorted({a["rho"] for a in summary["accuracy"]})
        lines.append("")
        lines.append("Accuracy [%] by rho (mean over seeds)")
        lines.append("  " + f"{'method':<22s}" + "".join(f"{'rho=' + format(r, 'g'):>10s}" for r in rhos))
        rowsets: dict = defaultdict(dict)
        for a in summary["accuracy"]:
            label = a["mode"] + (f" lam={a['lam']:g}" if a["lam_tagged"] else "")
            rowsets[label][a["rho"]] = a["acc_overall"]
        for label, vals in rowsets.items():
            lines.append("  " + f"{label:<22s}" + "".join(f"{100 * vals.get(r, math.nan):>10.2f}" for r in rhos))
        run.figure("figures/accuracy_vs_rho.png", plotting.accuracy_vs_rho, summary["accuracy"])

    if acc_path.exists():
        acc = [r for r in _read_csv(acc_path) if r["e_th"] != ""]
        curves: dict = defaultdict(list)
        for r in acc:
            curves[(r["mode"], _f(r["lam"]), _f(r["rho"]), _f(r["e_th"]))].append(r)
        per_rho: dict = defaultdict(list)
        for (mode, lam, rho, e), rs in sorted(curves.items()):
            per_rho[(mode, lam, rho)].append({
                "rho": rho, "e_th": e,
                "acc_overall": float(np.mean([_f(r["acc_overall"]) for r in rs])),
                "beta_hat": float(np.mean([_f(r["beta_hat"]) for r in rs])),
            })
        for (mode, lam, rho), pts in sorted(per_rho.items()):
            top = max(pts, key=lambda p: (p["acc_overall"], -p["e_th"]))
            summary["best_threshold"].append({"mode": mode, "lam": lam, "rho": rho, **{k: top[k] for k in ("e_th", "acc_overall", "beta_hat")}})
        if summary["best_threshold"]:
            lines.append("")
            lines.append("Best entropy threshold (seed-averaged curve)")
            for b in summary["best_threshold"]:
                lines.append(f"  {b['mode']} lam={b['lam']:g} rho={b['rho']:g}: E_th={b['e_th']:g} "
                             f"acc={100 * b['acc_overall']:.2f}% client-exit share={b['beta_hat']:.3f}")
            first = sorted(per_rho)[0]
            run.figure("figures/accuracy_vs_threshold.png", plotting.accuracy_vs_threshold,
                       [p for k, pts in per_rho.items() if k[:2] == first[:2] for p in pts])

    lat_path = root / "latency" / "summary.json"
    if lat_path.exists():
        lat = json.loads(lat_path.read_text())
        summary["latency"] = lat
        lines.append("")
        lines.append("Latency (analytic)")
        lines.append(f"  full at client {lat['tau_client_full']:.6g}, full at server {lat['tau_server_full']:.6g}, "
                     f"split {lat['tau_splitgp']:.6g}")
        lines.append(f"  split <= client-full: {lat['splitgp_beats_client_full']} (P_C threshold {lat['pc_threshold']})")
        rt = lat["rate_threshold_exact"]
        lines.append(f"  split <= server-full: {lat['splitgp_beats_server_full']} (rate condition: {rt['kind']}"
                     + ("" if rt["value"] is None else f" {rt['value']:.6g}") + ")")

    summary = _json_clean(summary)
    run.write_text("summary.json", json.dumps(summary, indent=2, sort_keys=True, allow_nan=False))
    run.write_text("summary.txt", "\n".join(lines) + "\n")
    if standalone:
        run.finish()
    return summary
