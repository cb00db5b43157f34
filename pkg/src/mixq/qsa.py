"""Quantization sensitivity sweeps and the shifted, normalized score table."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import log_softmax

from .ptq import PTQOptions, SiteStats, build_quantized
from .vit import QUANT_KINDS, LayerKind, ToyViT, layer_registry, predict_logits


class LossKind(str, enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    KL = "kl_vs_full_precision"


@dataclass(frozen=True)
class SweepConfig:
    baseline_bits: int = 4
    candidate_bits: tuple[int, ...] = (2, 3, 4, 5, 6)
    loss: LossKind = LossKind.CROSS_ENTROPY
    samples: int = 256

    def __post_init__(self):
        bits = tuple(sorted(int(b) for b in self.candidate_bits))
        if not bits or len(set(bits)) != len(bits):
            raise ValueError(f"candidate bits must be distinct and non-empty, got {self.candidate_bits}")
        if any(not 1 <= b <= 8 for b in bits):
            raise ValueError(f"candidate bits must lie in [1, 8], got {bits}")
        if self.baseline_bits not in bits:
            raise ValueError(f"baseline bits {self.baseline_bits} not among candidates {bits}")
        if self.samples < 1:
            raise ValueError("sweep needs at least one sample")
        object.__setattr__(self, "candidate_bits", bits)
        object.__setattr__(self, "loss", LossKind(self.loss))

    def to_dict(self) -> dict:
        return {"baseline_bits": self.baseline_bits, "candidate_bits": list(self.candidate_bits),
                "loss": self.loss.value, "samples": self.samples}


def mean_loss(logits, labels=None, reference_logits=None,
              kind: LossKind = LossKind.CROSS_ENTROPY) -> float:
    logp = log_softmax(np.asarray(logits, dtype=np.float64), axis=-1)
    if LossKind(kind) is LossKind.CROSS_ENTROPY:
        labels = np.asarray(labels)
        return math.fsum(-logp[np.arange(len(labels)), labels]) / len(labels)
    ref = log_softmax(np.asarray(reference_logits, dtype=np.float64), axis=-1)
    per = np.sum(np.exp(ref) * (ref - logp), axis=-1)
    return math.fsum(per) / len(per)


@dataclass
class SweepContext:
    """Everything a sweep evaluation reads; nothing here is mutated."""

    model: ToyViT
    stats: SiteStats
    images: np.ndarray
    labels: np.ndarray | None = None
    options: PTQOptions = PTQOptions()
    _reference: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if len(self.images) == 0:
            raise ValueError("calibration set is empty")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise ValueError("labels and images differ in length")

    def reference_logits(self) -> np.ndarray:
        if self._reference is None:
            self._reference = predict_logits(self.model, self.images)
        return self._reference

    def evaluate(self, bits: Mapping, kind: LossKind) -> tuple[float, float]:
        """(mean loss, accuracy) of the model quantized with ``bits``."""
        q = build_quantized(self.model, self.stats, bits, self.options)
        logits = predict_logits(q.model, self.images, q.plan)
        return self.score_logits(logits, kind)

    def score_logits(self, logits, kind: LossKind) -> tuple[float, float]:
        kind = LossKind(kind)
        target = self.labels
        if target is None:
            if kind is LossKind.CROSS_ENTROPY:
                raise ValueError("cross-entropy sweep needs labels")
            target = np.argmax(self.reference_logits(), axis=-1)
        ref = self.reference_logits() if kind is LossKind.KL else None
        loss = mean_loss(logits, target, ref, kind)
        acc = float(np.mean(np.argmax(logits, axis=-1) == target))
        return loss, acc


def sweep_bits(model_or_config, config: SweepConfig, kind: LayerKind | None = None,
               bit: int | None = None) -> dict:
    """Every layer at the baseline width, except layers of ``kind`` at ``bit``."""
    out = {}
    for info in layer_registry(model_or_config):
        b = config.baseline_bits
        if kind is not None and info.layer.kind is LayerKind(kind):
            b = bit
        out[info.layer] = b
    return out


def baseline_loss(ctx: SweepContext, config: SweepConfig) -> float:
    return ctx.evaluate(sweep_bits(ctx.model, config), config.loss)[0]


def perturbed_loss(ctx: SweepContext, config: SweepConfig, kind: LayerKind, bit: int) -> float:
    kind = LayerKind(kind)
    if kind not in QUANT_KINDS:
        raise ValueError(f"{kind} is not a quantized layer kind")
    if bit not in config.candidate_bits:
        raise ValueError(f"bit {bit} not among candidates {config.candidate_bits}")
    return ctx.evaluate(sweep_bits(ctx.model, config, kind, bit), config.loss)[0]


@dataclass
class SensitivityTable:
    """Shift-adjusted, normalized loss deltas keyed by ``(kind, bit)``."""

    scores: dict[tuple[LayerKind, int], float]
    deltas: dict[tuple[LayerKind, int], float]
    accuracy_deltas: dict[tuple[LayerKind, int], float] = field(default_factory=dict)
    baseline: float | None = None
    diagnostic: str | None = None

    def __getitem__(self, key: tuple[LayerKind, int]) -> float:
        kind, bit = key
        return self.scores[(LayerKind(kind), int(bit))]

    @property
    def kinds(self) -> list[LayerKind]:
        return sorted({k for k, _ in self.scores}, key=QUANT_KINDS.index)

    @property
    def bits(self) -> list[int]:
        return sorted({b for _, b in self.scores})

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        bits = self.bits
        wr.writerow(["kind"] + [f"lambda_{b}" for b in bits] + [f"delta_{b}" for b in bits])
        for k in self.kinds:
            lam = [repr(self.scores[(k, b)]) if (k, b) in self.scores else "" for b in bits]
            dl = [repr(self.deltas[(k, b)]) if (k, b) in self.deltas else "" for b in bits]
            wr.writerow([k.value] + lam + dl)
        return buf.getvalue()

    def to_dict(self) -> dict:
        def enc(d):
            return [{"kind": k.value, "bit": b, "value": v} for (k, b), v in d.items()]

        return {"scores": enc(self.scores), "deltas": enc(self.deltas),
                "accuracy_deltas": enc(self.accuracy_deltas),
                "baseline": self.baseline, "diagnostic": self.diagnostic}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SensitivityTable":
        def dec(rows):
            return {(LayerKind(r["kind"]), int(r["bit"])): float(r["value"]) for r in rows}

        return cls(dec(d["scores"]), dec(d["deltas"]), dec(d.get("accuracy_deltas", [])),
                   d.get("baseline"), d.get("diagnostic"))


def sensitivity_scores(deltas: Mapping[tuple[LayerKind, int], float],
                       accuracy_deltas: Mapping | None = None,
                       baseline: float | None = None) -> SensitivityTable:
    """Shift deltas so the smallest is zero, then normalize to unit sum."""
    if not deltas:
        raise ValueError("need at least one (kind, bit) delta")
    items = [((LayerKind(k), int(b)), float(v)) for (k, b), v in deltas.items()]
    items.sort(key=lambda kv: (QUANT_KINDS.index(kv[0][0]), kv[0][1]))
    raw = dict(items)
    keys = list(raw)
    lo = min(raw.values())
    shifted = {k: v - lo for k, v in raw.items()}
    total = math.fsum(shifted.values())
    diagnostic = None
    if total > 0:
        scores = {k: v / total for k, v in shifted.items()}
    else:
        diagnostic = "all sensitivity deltas are equal; using uniform scores"
        scores = {k: 1.0 / len(keys) for k in keys}
    acc = {(LayerKind(k), int(b)): float(v) for (k, b), v in (accuracy_deltas or {}).items()}
    return SensitivityTable(scores, raw, acc, baseline, diagnostic)


def run_sweep(ctx: SweepContext, config: SweepConfig,
              kinds=QUANT_KINDS) -> SensitivityTable:
    """Evaluate every (kind, bit) perturbation against the all-baseline model.

    Pairs are visited in (kind, bit) order. The pair at the baseline width is
    the baseline itself, so its delta is exactly zero.
    """
    base_loss, base_acc = ctx.evaluate(sweep_bits(ctx.model, config), config.loss)
    deltas, acc_deltas = {}, {}
    for kind in kinds:
        kind = LayerKind(kind)
        for b in config.candidate_bits:
            if b == config.baseline_bits:
                loss, acc = base_loss, base_acc
            else:
                loss, acc = ctx.evaluate(sweep_bits(ctx.model, config, kind, b), config.loss)
            deltas[(kind, b)] = loss - base_loss
            acc_deltas[(kind, b)] = acc - base_acc
    return sensitivity_scores(deltas, acc_deltas, base_loss)
