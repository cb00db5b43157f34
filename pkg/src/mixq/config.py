"""Run configuration: a JSON document with one object per section.

Every key is optional; omitted keys take the defaults below. Schema::

    {
      "seed": 0,
      "precision": "single",            # arithmetic for quantized stages: single | double
      "model":       {"num_blocks": 4, "embed_dim": 64, "heads": 4, "mlp_dim": 128,
                      "classes": 10, "patch_size": 4, "image_height": 32,
                      "image_width": 32, "channels": 3},
      "dataset":     {"source": "synthetic", "train": 2048, "eval": 512, "noise": 0.6,
                      "blob_radius": 3.0, "jitter": 1.5}
                     or {"source": "directory", "path": "<dir with train/eval containers>"},
      "train":       {"epochs": 3, "batch_size": 64, "lr": 0.003},
      "calibration": {"samples": 32},
      "quant":       {"percentile": 1.0, "softmax_base": 1.4142135623730951,
                      "gelu_base": "adaptive", "log_gelu": true},
      "crl":         {"enabled": true, "k": 2.0},
      "lrp":         {"samples": 256, "batch_size": 64},
      "qsa":         {"baseline_bits": 4, "candidate_bits": [2, 3, 4, 5, 6],
                      "loss": "cross_entropy", "samples": 256},
      "allocator":   {"bits": [2, 3, 4, 5, 6], "b_fixed": 4, "pins": {},
                      "lambda_mode": "verbatim", "ablation": "omega-lambda",
                      "budget": null}
    }

``seed`` drives data generation, weight init, training order and every
sample subset. ``pins`` maps layer names (``"PatchEmbed"``,
``"blocks.0.QKV"``, ...) to fixed bit-widths. ``budget`` is either null (match
the ``b_fixed`` reference model) or ``{"size": <weight-bits>, "bitops": <n>}``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .allocator import LambdaMode
from .data import SynthConfig, TrainConfig
from .ptq import PTQOptions
from .qsa import LossKind, SweepConfig
from .vit import LayerId, ModelConfig, registry_ids

ABLATIONS = ("omega-lambda", "omega-only")


class ConfigError(ValueError):
    pass


def _only(section: str, d: Mapping, allowed) -> None:
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in '{section}': {sorted(extra)}")


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"
    path: str | None = None
    train: int = 2048
    eval: int = 512
    noise: float = 0.6
    blob_radius: float = 3.0
    jitter: float = 1.5


@dataclass(frozen=True)
class AllocatorConfig:
    bits: tuple[int, ...] = (2, 3, 4, 5, 6)
    b_fixed: int = 4
    pins: tuple[tuple[str, int], ...] = ()
    lambda_mode: LambdaMode = LambdaMode.VERBATIM
    ablation: str = "omega-lambda"
    budget: tuple[float, float] | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    precision: str = "single"
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = DatasetConfig()
    train: TrainConfig = TrainConfig()
    calibration_samples: int = 32
    quant: PTQOptions = PTQOptions()
    lrp_samples: int = 256
    lrp_batch_size: int = 64
    qsa: SweepConfig = SweepConfig()
    allocator: AllocatorConfig = AllocatorConfig()

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=int(seed), model=replace(self.model, seed=int(seed)),
                       train=replace(self.train, seed=int(seed)))

    def with_ablation(self, ablation: str) -> "RunConfig":
        if ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {ablation!r}")
        return replace(self, allocator=replace(self.allocator, ablation=ablation))

    def synth(self) -> SynthConfig:
        m, d = self.model, self.dataset
        return SynthConfig(seed=self.seed, classes=m.classes, train=d.train, eval=d.eval,
                           height=m.image_height, width=m.image_width, channels=m.channels,
                           noise=d.noise, blob_radius=d.blob_radius, jitter=d.jitter)

    def to_dict(self) -> dict:
        q = self.quant
        a = self.allocator
        model = {f.name: getattr(self.model, f.name) for f in fields(self.model)
                 if f.name not in ("seed", "eps")}
        return {
            "seed": self.seed,
            "precision": self.precision,
            "model": model,
            "dataset": {f.name: getattr(self.dataset, f.name) for f in fields(self.dataset)},
            "train": {"epochs": self.train.epochs, "batch_size": self.train.batch_size,
                      "lr": self.train.lr},
            "calibration": {"samples": self.calibration_samples},
            "quant": {"percentile": q.percentile, "softmax_base": q.softmax_base,
                      "gelu_base": q.gelu_base, "log_gelu": q.log_gelu},
            "crl": {"enabled": q.crl, "k": q.clip_k},
            "lrp": {"samples": self.lrp_samples, "batch_size": self.lrp_batch_size},
            "qsa": {"baseline_bits": self.qsa.baseline_bits,
                    "candidate_bits": list(self.qsa.candidate_bits),
                    "loss": self.qsa.loss.value, "samples": self.qsa.samples},
            "allocator": {"bits": list(a.bits), "b_fixed": a.b_fixed, "pins": dict(a.pins),
                          "lambda_mode": a.lambda_mode.value, "ablation": a.ablation,
                          "budget": None if a.budget is None else
                          {"size": a.budget[0], "bitops": a.budget[1]}},
        }

    def section_hash(self, *sections: str) -> str:
        """Hash of the named sections (canonical JSON); ``seed`` is always included."""
        d = self.to_dict()
        picked = {"seed": d["seed"], **{s: d[s] for s in sections}}
        text = json.dumps(picked, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _section(d: Mapping, name: str) -> dict:
    sec = d.get(name, {})
    if not isinstance(sec, Mapping):
        raise ConfigError(f"section '{name}' must be an object")
    return dict(sec)


def from_dict(d: Mapping[str, Any]) -> RunConfig:
    _only("<root>", d, ("seed", "precision", "model", "dataset", "train", "calibration",
                        "quant", "crl", "lrp", "qsa", "allocator"))
    try:
        seed = int(d.get("seed", 0))
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        precision = d.get("precision", "single")
        if precision not in ("single", "double"):
            raise ConfigError(f"precision must be 'single' or 'double', got {precision!r}")

        m = _section(d, "model")
        _only("model", m, [f.name for f in fields(ModelConfig) if f.name not in ("seed", "eps")])
        model = ModelConfig(**m, seed=seed)

        ds = _section(d, "dataset")
        _only("dataset", ds, [f.name for f in fields(DatasetConfig)])
        dataset = DatasetConfig(**ds)
        if dataset.source not in ("synthetic", "directory"):
            raise ConfigError("dataset.source must be 'synthetic' or 'directory'")
        if dataset.source == "directory" and not dataset.path:
            raise ConfigError("dataset.path is required for a directory source")

        tr = _section(d, "train")
        _only("train", tr, ("epochs", "batch_size", "lr"))
        train = TrainConfig(seed=seed, dtype="single", **tr)

        cal = _section(d, "calibration")
        _only("calibration", cal, ("samples",))
        calibration_samples = int(cal.get("samples", 32))

        q = _section(d, "quant")
        _only("quant", q, ("percentile", "softmax_base", "gelu_base", "log_gelu"))
        crl = _section(d, "crl")
        _only("crl", crl, ("enabled", "k"))
        quant = PTQOptions(percentile=float(q.get("percentile", 1.0)),
                           crl=bool(crl.get("enabled", True)),
                           clip_k=float(crl.get("k", 2.0)),
                           softmax_base=q.get("softmax_base", math.sqrt(2.0)),
                           gelu_base=q.get("gelu_base", "adaptive"),
                           log_gelu=bool(q.get("log_gelu", True)))
        for key in ("softmax_base", "gelu_base"):
            v = getattr(quant, key)
            if v != "adaptive" and not (isinstance(v, (int, float)) and v > 1):
                raise ConfigError(f"quant.{key} must be 'adaptive' or a number > 1")
        if not 0.5 < quant.percentile <= 1.0:
            raise ConfigError("quant.percentile must lie in (0.5, 1]")

        lrp = _section(d, "lrp")
        _only("lrp", lrp, ("samples", "batch_size"))

        s = _section(d, "qsa")
        _only("qsa", s, ("baseline_bits", "candidate_bits", "loss", "samples"))
        qsa = SweepConfig(int(s.get("baseline_bits", 4)),
                          tuple(s.get("candidate_bits", (2, 3, 4, 5, 6))),
                          LossKind(s.get("loss", "cross_entropy")),
                          int(s.get("samples", 256)))

        a = _section(d, "allocator")
        _only("allocator", a, ("bits", "b_fixed", "pins", "lambda_mode", "ablation", "budget"))
        bits = tuple(sorted(int(b) for b in a.get("bits", (2, 3, 4, 5, 6))))
        pins = a.get("pins", {})
        if not isinstance(pins, Mapping):
            raise ConfigError("allocator.pins must map layer names to bit-widths")
        budget = a.get("budget")
        if budget is not None:
            if not isinstance(budget, Mapping) or set(budget) != {"size", "bitops"}:
                raise ConfigError("allocator.budget must be null or {\"size\": .., \"bitops\": ..}")
            budget = (float(budget["size"]), float(budget["bitops"]))
            if not (budget[0] > 0 and budget[1] > 0):
                raise ConfigError("allocator.budget entries must be positive")
        alloc = AllocatorConfig(bits, int(a.get("b_fixed", 4)),
                                tuple(sorted((str(k), int(v)) for k, v in pins.items())),
                                LambdaMode(a.get("lambda_mode", "verbatim")),
                                a.get("ablation", "omega-lambda"), budget)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc

    cfg = RunConfig(seed, precision, model, dataset, train, calibration_samples, quant,
                    int(lrp.get("samples", 256)), int(lrp.get("batch_size", 64)), qsa, alloc)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    a = cfg.allocator
    if a.b_fixed not in a.bits:
        raise ConfigError(f"allocator.b_fixed {a.b_fixed} not in allocator.bits {list(a.bits)}")
    if any(not 1 <= b <= 8 for b in a.bits):
        raise ConfigError("allocator.bits must lie in [1, 8]")
    if a.ablation not in ABLATIONS:
        raise ConfigError(f"allocator.ablation must be one of {ABLATIONS}")
    known = {str(l) for l in registry_ids(cfg.model)}
    for name, b in a.pins:
        if name not in known:
            raise ConfigError(f"pinned layer {name!r} does not exist")
        if not 1 <= b <= 8:
            raise ConfigError(f"pinned width for {name} must lie in [1, 8]")
    if set(cfg.qsa.candidate_bits) - set(a.bits):
        raise ConfigError("qsa.candidate_bits must be a subset of allocator.bits")
    if cfg.calibration_samples < 1 or cfg.lrp_samples < 1:
        raise ConfigError("sample counts must be positive")
    if cfg.dataset.source == "synthetic":
        need = max(cfg.calibration_samples, cfg.lrp_samples, cfg.qsa.samples)
        if need > cfg.dataset.train:
            raise ConfigError(f"dataset.train ({cfg.dataset.train}) smaller than a "
                              f"requested sample set ({need})")
        margin = cfg.dataset.blob_radius + cfg.dataset.jitter
        if cfg.dataset.blob_radius <= 0 or cfg.dataset.jitter < 0 or cfg.dataset.noise < 0:
            raise ConfigError("dataset.blob_radius must be positive, jitter and noise >= 0")
        if 2 * margin > min(cfg.model.image_height, cfg.model.image_width):
            raise ConfigError(f"blob margin {margin} does not fit a "
                              f"{cfg.model.image_height}x{cfg.model.image_width} image")


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, Mapping):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(d)


def pin_map(cfg: RunConfig) -> dict[LayerId, int]:
    return {LayerId.parse(k): v for k, v in cfg.allocator.pins}
