"""Stage runner: every stage reads its predecessors' artifacts from the stage cache.

Each stage writes ``<cache>/<stage>/manifest.json`` carrying the stage name,
a hash of the configuration sections it depends on, its outputs and its
wall-clock time. A stage refuses to read an upstream artifact that is
missing or whose hash disagrees with the current configuration.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .allocator import (Budget, budget_from_fixed, evaluate_assignment,
                        instance_from_scores, solve_exact, assignment_csv)
from .config import RunConfig, pin_map
from .crl import ClipPolicy, fold_pair
from .data import Dataset, accuracy, make_synthetic, train_model
from .io import load_model, load_tensors, save_model, save_tensors
from .lrp import ImportanceTable, contribution_scores, importance_scores
from .ptq import QuantizedModel, SiteStats, build_quantized, collect_stats
from .qsa import SensitivityTable, SweepContext, mean_loss, run_sweep
from .quant import CalibrationStats
from .tensor import DTYPES
from .vit import LayerId, QuantPlan, ToyViT, layer_registry, predict_logits

REPORT_FORMAT = "mixq-run-report"
REPORT_VERSION = 1

STAGES = ("synth-data", "calibrate", "importance", "sensitivity", "allocate",
          "quantize", "eval", "report")

_BASE = ("model", "dataset", "train")
STAGE_SECTIONS = {
    "synth-data": _BASE,
    "calibrate": _BASE + ("calibration", "precision"),
    "importance": _BASE + ("lrp", "precision"),
    "sensitivity": _BASE + ("calibration", "precision", "quant", "crl", "qsa"),
    "allocate": _BASE + ("calibration", "precision", "quant", "crl", "qsa", "lrp", "allocator"),
}
for _s in ("quantize", "eval", "report"):
    STAGE_SECTIONS[_s] = STAGE_SECTIONS["allocate"]

# subset tags for seeded index draws
_CALIB, _LRP, _QSA = 1, 2, 3


class PipelineError(Exception):
    code = "E_PIPELINE"
    exit_code = 1


class MissingArtifactError(PipelineError):
    code = "E_MISSING_ARTIFACT"
    exit_code = 3


class StaleArtifactError(PipelineError):
    code = "E_HASH_MISMATCH"
    exit_code = 3


@dataclass
class Workspace:
    config: RunConfig
    cache: Path

    def stage_dir(self, stage: str) -> Path:
        return self.cache / stage

    def expected_hash(self, stage: str) -> str:
        return self.config.section_hash(*STAGE_SECTIONS[stage])

    def require(self, stage: str) -> Path:
        d = self.stage_dir(stage)
        man = d / "manifest.json"
        if not man.exists():
            raise MissingArtifactError(
                f"missing artifacts of stage '{stage}' in {self.cache}; run `mixq {stage}` first")
        meta = json.loads(man.read_text())
        if meta.get("hash") != self.expected_hash(stage):
            raise StaleArtifactError(
                f"artifacts of stage '{stage}' were built from a different configuration "
                f"(hash {meta.get('hash')} != {self.expected_hash(stage)}); rerun `mixq {stage}`")
        return d

    def manifest(self, stage: str) -> dict:
        return json.loads((self.require(stage) / "manifest.json").read_text())

    def finish(self, stage: str, seconds: float, extra: dict | None = None) -> dict:
        d = self.stage_dir(stage)
        files = sorted(p.name for p in d.iterdir() if p.name != "manifest.json")
        meta = {"stage": stage, "hash": self.expected_hash(stage), "version": __version__,
                "files": files, "seconds": seconds, **(extra or {})}
        write_json(d / "manifest.json", meta)
        return meta

    def open(self, stage: str) -> Path:
        d = self.stage_dir(stage)
        d.mkdir(parents=True, exist_ok=True)
        stale = d / "manifest.json"
        if stale.exists():
            stale.unlink()
        return d

    @property
    def dtype(self):
        return DTYPES[self.config.precision]


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: Path):
    return json.loads(path.read_text())


def _subset(n: int, size: int, seed: int, tag: int) -> np.ndarray:
    if size > n:
        raise PipelineError(f"cannot draw {size} distinct samples from {n}")
    rng = np.random.default_rng([seed, tag])
    return np.sort(rng.choice(n, size=size, replace=False))


def _load_split(ws: Workspace, name: str) -> Dataset:
    return Dataset.load(ws.require("synth-data") / name)


def _load_model(ws: Workspace) -> ToyViT:
    return load_model(ws.require("synth-data") / "model").astype(ws.dtype)


def _indices(ws: Workspace) -> dict[str, np.ndarray]:
    t, _ = load_tensors(ws.require("synth-data") / "subsets")
    return t


# -- stages -------------------------------------------------------------

def stage_synth_data(ws: Workspace, log=None) -> dict:
    t0 = time.perf_counter()
    cfg = ws.config
    d = ws.open("synth-data")
    if cfg.dataset.source == "synthetic":
        train, evals = make_synthetic(cfg.synth())
    else:
        root = Path(cfg.dataset.path)
        try:
            train, evals = Dataset.load(root / "train"), Dataset.load(root / "eval")
        except FileNotFoundError as exc:
            raise MissingArtifactError(f"dataset directory {root} lacks train/eval containers") from exc
    shape = (cfg.model.image_height, cfg.model.image_width, cfg.model.channels)
    if train.images.shape[1:] != shape or evals.images.shape[1:] != shape:
        raise PipelineError(f"dataset images do not match the model input shape {shape}")
    train.save(d / "train", {"split": "train"})
    evals.save(d / "eval", {"split": "eval"})
    n = len(train)
    subsets = {"calibration": _subset(n, cfg.calibration_samples, cfg.seed, _CALIB),
               "lrp": _subset(n, cfg.lrp_samples, cfg.seed, _LRP),
               "qsa": _subset(n, cfg.qsa.samples, cfg.seed, _QSA)}
    save_tensors(d / "subsets", subsets)
    model = train_model(cfg.model, train, cfg.train, log=log)
    save_model(d / "model", model)
    fp = model.astype(np.float32)
    metrics = {"train_accuracy": accuracy(predict_logits(fp, train.images), train.labels),
               "eval_accuracy": accuracy(predict_logits(fp, evals.images), evals.labels)}
    write_json(d / "model_metrics.json", metrics)
    return ws.finish("synth-data", time.perf_counter() - t0, metrics)


def save_stats(stem: Path, stats: SiteStats) -> None:
    save_tensors(stem, {k: v._sorted for k, v in stats.stats.items()}, {"samples": stats.samples})


def load_stats(stem: Path) -> SiteStats:
    tensors, meta = load_tensors(stem)
    return SiteStats({k: CalibrationStats.from_sorted(v) for k, v in tensors.items()},
                     int(meta["samples"]))


def stage_calibrate(ws: Workspace, log=None) -> dict:
    t0 = time.perf_counter()
    cfg = ws.config
    model = _load_model(ws)
    train = _load_split(ws, "train")
    idx = _indices(ws)["calibration"]
    d = ws.open("calibrate")
    stats = collect_stats(model, train.images[idx])
    save_stats(d / "stats", stats)
    # CRL diagnostics at the reference width
    records = []
    policy = ClipPolicy(cfg.quant.clip_k)
    for layer, st in stats.ln_stats(cfg.model.num_blocks).items():
        _, rec = fold_pair(model, layer, st, cfg.allocator.b_fixed, policy, cfg.quant.percentile)
        records.append(rec.summary())
    records.sort(key=lambda r: LayerId.parse(r["layer"]))
    write_json(d / "reparam.json", records)
    return ws.finish("calibrate", time.perf_counter() - t0)


def stage_importance(ws: Workspace, log=None) -> dict:
    t0 = time.perf_counter()
    cfg = ws.config
    model = _load_model(ws)
    train = _load_split(ws, "train")
    idx = _indices(ws)["lrp"]
    d = ws.open("importance")
    contrib = contribution_scores(model, train.images[idx], batch_size=cfg.lrp_batch_size)
    omega = importance_scores(contrib)
    write_json(d / "importance.json", {"omega": omega.to_dict(),
                                       "contribution": {str(k): v for k, v in contrib.scores.items()},
                                       "samples": contrib.samples})
    (d / "importance.txt").write_text(omega.to_text())
    (d / "importance_heatmap.csv").write_text(omega.heatmap_csv(cfg.model.num_blocks))
    return ws.finish("importance", time.perf_counter() - t0)


def stage_sensitivity(ws: Workspace, log=None) -> dict:
    t0 = time.perf_counter()
    cfg = ws.config
    model = _load_model(ws)
    stats = load_stats(ws.require("calibrate") / "stats")
    train = _load_split(ws, "train")
    idx = _indices(ws)["qsa"]
    d = ws.open("sensitivity")
    ctx = SweepContext(model, stats, train.images[idx], train.labels[idx], cfg.quant)
    table = run_sweep(ctx, cfg.qsa)
    write_json(d / "sensitivity.json", table.to_dict())
    (d / "sensitivity.csv").write_text(table.to_csv())
    if table.diagnostic and log:
        log(table.diagnostic)
    return ws.finish("sensitivity", time.perf_counter() - t0)


def load_importance(ws: Workspace) -> ImportanceTable:
    return ImportanceTable.from_dict(read_json(ws.require("importance") / "importance.json")["omega"])


def load_sensitivity(ws: Workspace) -> SensitivityTable:
    return SensitivityTable.from_dict(read_json(ws.require("sensitivity") / "sensitivity.json"))


def build_instance(cfg: RunConfig, omega: ImportanceTable, lam: SensitivityTable | None):
    sens = None if lam is None else lam.scores
    return instance_from_scores(layer_registry(cfg.model), omega.scores, sens,
                                cfg.allocator.bits, {str(k): v for k, v in pin_map(cfg).items()},
                                cfg.allocator.lambda_mode)


def fixed_assignment(cfg: RunConfig) -> dict[LayerId, int]:
    pins = pin_map(cfg)
    return {info.layer: pins.get(info.layer, cfg.allocator.b_fixed)
            for info in layer_registry(cfg.model)}


def stage_allocate(ws: Workspace, log=None) -> dict:
    t0 = time.perf_counter()
    cfg = ws.config
    omega = load_importance(ws)
    lam = load_sensitivity(ws) if cfg.allocator.ablation == "omega-lambda" else None
    d = ws.open("allocate")
    inst = build_instance(cfg, omega, lam)
    budget = budget_from_fixed(inst, cfg.allocator.b_fixed)
    if cfg.allocator.budget is not None:
        budget = Budget(*cfg.allocator.budget)
    mixed = solve_exact(inst, budget)
    ref_bits = [fixed_assignment(cfg)[LayerId.parse(l.name)] for l in inst.layers]
    phi, size, bitops = evaluate_assignment(inst, ref_bits)
    write_json(d / "allocation.json", {
        "ablation": cfg.allocator.ablation,
        "instance": inst.to_dict(),
        "budget": budget.to_dict(),
        "mixed": mixed.to_dict(),
        "fixed": {"bits": dict(zip((l.name for l in inst.layers), ref_bits)),
                  "objective": phi, "size": size, "bitops": bitops},
    })
    (d / "allocation.csv").write_text(assignment_csv(mixed, cfg.model.num_blocks))
    return ws.finish("allocate", time.perf_counter() - t0)


def load_allocation(ws: Workspace) -> dict:
    return read_json(ws.require("allocate") / "allocation.json")


def _save_quantized(d: Path, name: str, q: QuantizedModel) -> None:
    save_model(d / f"{name}_model", q.model)
    write_json(d / f"{name}_plan.json", {
        "plan": q.plan.to_dict(),
        "bits": {str(k): v for k, v in q.bits.items()},
        "reparam": [r.summary() for _, r in sorted(q.records.items())],
    })


def _load_quantized(d: Path, name: str, dtype) -> tuple[ToyViT, QuantPlan, dict]:
    model = load_model(d / f"{name}_model").astype(dtype)
    doc = read_json(d / f"{name}_plan.json")
    return model, QuantPlan.from_dict(doc["plan"]), doc


def stage_quantize(ws: Workspace, log=None) -> dict:
    t0 = time.perf_counter()
    cfg = ws.config
    model = _load_model(ws)
    stats = load_stats(ws.require("calibrate") / "stats")
    alloc = load_allocation(ws)
    d = ws.open("quantize")
    mixed = {LayerId.parse(k): int(v) for k, v in alloc["mixed"]["bits"].items()}
    for name, bits in (("fixed", fixed_assignment(cfg)), ("mixed", mixed)):
        q = build_quantized(model, stats, bits, cfg.quant)
        # stored in double so the artifact does not depend on run precision
        q.model = q.model.astype(np.float64)
        _save_quantized(d, name, q)
    return ws.finish("quantize", time.perf_counter() - t0)


def stage_eval(ws: Workspace, log=None) -> dict:
    t0 = time.perf_counter()
    cfg = ws.config
    evals = _load_split(ws, "eval")
    alloc = load_allocation(ws)
    qdir = ws.require("quantize")
    d = ws.open("eval")
    fp = _load_model(ws)
    registry = layer_registry(cfg.model)
    fp_size = sum(info.params for info in registry) * 32
    fp_ops = sum(info.macs for info in registry) * 32 * 32
    variants = {"fp": (fp, None, {"size": fp_size, "bitops": fp_ops})}
    for name in ("fixed", "mixed"):
        model, plan, _ = _load_quantized(qdir, name, ws.dtype)
        variants[name] = (model, plan, alloc[name])
    metrics = {}
    for name, (model, plan, cost) in variants.items():
        logits = predict_logits(model, evals.images, plan)
        metrics[name] = {"accuracy": accuracy(logits, evals.labels),
                         "loss": mean_loss(logits, evals.labels),
                         "size_bits": cost["size"], "bitops": cost["bitops"]}
    fixed, mixed = metrics["fixed"], metrics["mixed"]
    metrics["budget_ratio"] = {"size": mixed["size_bits"] / fixed["size_bits"],
                               "bitops": mixed["bitops"] / fixed["bitops"]}
    metrics["ablation"] = alloc["ablation"]
    write_json(d / "metrics.json", metrics)
    return ws.finish("eval", time.perf_counter() - t0)


def assemble_report(ws: Workspace) -> dict:
    cfg = ws.config
    alloc = load_allocation(ws)
    # the importance-only ablation never reads the sensitivity stage
    lam_needed = alloc["ablation"] == "omega-lambda"
    have_lam = lam_needed or (ws.stage_dir("sensitivity") / "manifest.json").exists()
    timings = {s: ws.manifest(s)["seconds"] for s in STAGES[:-1]
               if s != "sensitivity" or have_lam}
    qdir = ws.require("quantize")
    return {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "package_version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_hash": ws.expected_hash("report"),
        "model": read_json(ws.require("synth-data") / "model_metrics.json"),
        "importance": read_json(ws.require("importance") / "importance.json"),
        "sensitivity": load_sensitivity(ws).to_dict() if have_lam else None,
        "reparameterization": {
            "reference": read_json(ws.require("calibrate") / "reparam.json"),
            "mixed": read_json(qdir / "mixed_plan.json")["reparam"],
        },
        "allocation": alloc,
        "evaluation": read_json(ws.require("eval") / "metrics.json"),
        "timings": timings,
    }


def stage_report(ws: Workspace, out: Path, log=None) -> dict:
    t0 = time.perf_counter()
    report = assemble_report(ws)
    out.mkdir(parents=True, exist_ok=True)
    report["timings"]["report"] = time.perf_counter() - t0
    write_json(out / "report.json", report)
    copies = [("importance", "importance_heatmap.csv"), ("allocate", "allocation.csv")]
    if report["sensitivity"] is not None:
        copies.append(("sensitivity", "sensitivity.csv"))
    for stage, name in copies:
        (out / name).write_text((ws.require(stage) / name).read_text())
    (out / "importance.txt").write_text((ws.require("importance") / "importance.txt").read_text())
    return report


STAGE_FUNCS: dict[str, Callable] = {
    "synth-data": stage_synth_data,
    "calibrate": stage_calibrate,
    "importance": stage_importance,
    "sensitivity": stage_sensitivity,
    "allocate": stage_allocate,
    "quantize": stage_quantize,
    "eval": stage_eval,
}


def run_stage(ws: Workspace, stage: str, out: Path | None = None, log=None):
    if stage == "report":
        return stage_report(ws, out or ws.cache.parent, log)
    return STAGE_FUNCS[stage](ws, log)


def run_all(config: RunConfig, out: Path, cache: Path | None = None, log=None) -> dict:
    ws = Workspace(config, Path(cache) if cache else Path(out) / "stages")
    for stage in STAGES[:-1]:
        run_stage(ws, stage, log=log)
        if log:
            log(f"stage {stage} done")
    return stage_report(ws, Path(out), log)


def strip_timings(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timings"}
