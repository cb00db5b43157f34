"""Post-training quantization: calibration statistics and quant-plan assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .crl import ClipPolicy, ReparamRecord, fold_pair
from .quant import (CalibrationStats, Granularity, calibrate_log, calibrate_uniform,
                    search_adaptive_base)
from .vit import (ACT_TAPS, LOG_KINDS, WEIGHTLESS, LayerId, LayerKind, QuantPlan, SiteQuant,
                  ToyViT, forward, layer_registry, param_names, tap_name)

DEFAULT_BASE_GRID = tuple(sorted({1.0 + k / 20 for k in range(1, 21)} | {math.sqrt(2.0)}))
PER_CHANNEL_SITES = frozenset({LayerKind.QKV, LayerKind.FC1})


@dataclass(frozen=True)
class PTQOptions:
    """How each quantization site is calibrated.

    ``softmax_base``/``gelu_base`` are either a base > 1 or ``"adaptive"``
    (MSE grid search over ``base_grid``). ``log_gelu=False`` uses a uniform
    quantizer after GELU instead.
    """

    percentile: float = 1.0
    crl: bool = True
    clip_k: float = 2.0
    softmax_base: float | str = math.sqrt(2.0)
    gelu_base: float | str = "adaptive"
    log_gelu: bool = True
    base_grid: tuple[float, ...] = DEFAULT_BASE_GRID

    def to_dict(self) -> dict:
        return {"percentile": self.percentile, "crl": self.crl, "clip_k": self.clip_k,
                "softmax_base": self.softmax_base, "gelu_base": self.gelu_base,
                "log_gelu": self.log_gelu, "base_grid": list(self.base_grid)}


@dataclass
class SiteStats:
    """Calibration statistics per capture tap."""

    stats: dict[str, CalibrationStats]
    samples: int
    _bases: dict = field(default_factory=dict, repr=False)

    def __getitem__(self, tap: str) -> CalibrationStats:
        return self.stats[tap]

    def ln_stats(self, num_blocks: int) -> dict[LayerId, CalibrationStats]:
        return {LayerId(l, k): self.stats[tap_name(LayerId(l, k), "in")]
                for l in range(num_blocks) for k in PER_CHANNEL_SITES}

    def adaptive_base(self, tap: str, bits: int, grid) -> float:
        key = (tap, bits, tuple(grid))
        if key not in self._bases:
            self._bases[key] = search_adaptive_base(self.stats[tap].samples(), bits, grid)
        return self._bases[key]


def _act_taps(model: ToyViT) -> list[str]:
    out = []
    for info in layer_registry(model):
        out.extend(tap_name(info.layer, sfx) for sfx in ACT_TAPS[info.layer.kind])
    return out


def collect_stats(model: ToyViT, images, batch_size: int = 64) -> SiteStats:
    """Run the full-precision model and gather per-tap order statistics.

    Inputs of QKV and FC1 (the LayerNorm outputs) keep per-channel columns;
    every other tap is pooled into a single column.
    """
    images = np.asarray(images)
    taps = _act_taps(model)
    chunks: dict[str, list[np.ndarray]] = {t: [] for t in taps}
    for start in range(0, len(images), batch_size):
        cache = forward(model, images[start:start + batch_size], capture=True).cache
        for t in taps:
            chunks[t].append(cache[t].data)
    per_channel = {tap_name(LayerId(l, k), "in") for l in range(model.config.num_blocks)
                   for k in PER_CHANNEL_SITES}
    stats = {}
    for t, parts in chunks.items():
        arr = np.concatenate(parts, axis=0)
        if t in per_channel:
            stats[t] = CalibrationStats(arr.reshape(-1, arr.shape[-1]))
        else:
            stats[t] = CalibrationStats(arr.reshape(-1, 1))
    return SiteStats(stats, len(images))


def _log_params(stats: SiteStats, tap: str, bits: int, base, grid):
    if base == "adaptive":
        base = stats.adaptive_base(tap, bits, grid)
    return calibrate_log(stats[tap], bits, float(base))


def weight_params(model: ToyViT, layer: LayerId, bits: int):
    names = param_names(layer)
    if names is None:
        return None
    W = model.weights[names[0]]
    return calibrate_uniform(CalibrationStats(W), bits, Granularity.PER_CHANNEL)


@dataclass
class QuantizedModel:
    model: ToyViT
    plan: QuantPlan
    bits: dict[LayerId, int]
    records: dict[LayerId, ReparamRecord]


def build_quantized(model: ToyViT, stats: SiteStats, bits: Mapping[LayerId, int],
                    options: PTQOptions = PTQOptions()) -> QuantizedModel:
    """Bind one bit-width per layer (weights and activations) into a quant plan.

    Layers missing from ``bits`` stay in full precision. With CRL enabled
    the LayerNorm/linear pairs of every block are refolded first, and the
    QKV/FC1 input quantizers become the clipped channel-wise ones.
    """
    bits = {LayerId(l.block, l.kind): int(b) for l, b in bits.items()}
    records: dict[LayerId, ReparamRecord] = {}
    qmodel = model
    if options.crl:
        ln_stats = stats.ln_stats(model.config.num_blocks)
        policy = ClipPolicy(options.clip_k)
        for layer in sorted(l for l in bits if l.kind in PER_CHANNEL_SITES):
            qmodel, records[layer] = fold_pair(qmodel, layer, ln_stats[layer], bits[layer],
                                               policy, options.percentile)
    plan = QuantPlan(crl_blocks=frozenset(l.block for l in records))
    for layer, b in bits.items():
        kind = layer.kind
        site = SiteQuant()
        if kind not in WEIGHTLESS:
            site.weight = weight_params(qmodel, layer, b)
        if kind in LOG_KINDS:
            tap = tap_name(layer)
            if kind is LayerKind.POST_SOFTMAX:
                site.act = _log_params(stats, tap, b, options.softmax_base, options.base_grid)
            elif options.log_gelu:
                site.act = _log_params(stats, tap, b, options.gelu_base, options.base_grid)
            else:
                site.act = calibrate_uniform(stats[tap], b, percentile=options.percentile)
        elif layer in records:
            site.act = records[layer].act_params
        else:
            taps = [tap_name(layer, s) for s in ACT_TAPS[kind]]
            acts = [calibrate_uniform(stats[t], b, percentile=options.percentile) for t in taps]
            if acts:
                site.act = acts[0]
            if len(acts) > 1:
                site.act_b = acts[1]
        plan.entries[layer] = site
    plan.validate(model.config)
    return QuantizedModel(qmodel, plan, bits, records)


def uniform_bits(model_or_config, b: int) -> dict[LayerId, int]:
    return {info.layer: b for info in layer_registry(model_or_config)}
