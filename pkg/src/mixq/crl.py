"""Clipped channel-wise reparameterization of post-LayerNorm activations.

Per-channel scales and zero-points of a LayerNorm output are clipped into a
``mean +/- k*std`` band. The ratio ``v1 = s / s_hat`` and shift
``v2 = z - z_hat`` are then folded into the LayerNorm affine parameters and
the following linear layer, so the full-precision network computes exactly
the same function while the activation quantizer sees a narrower spread of
channel parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .quant import (CalibrationStats, Granularity, Kind, QuantParams, QuantScheme,
                    calibrate_uniform, round_half_away)
from .vit import LayerId, LayerKind, ToyViT

# (layernorm prefix, next linear prefix, quantized site)
FOLD_PAIRS = (
    ("ln1", "qkv", LayerKind.QKV),
    ("ln2", "fc1", LayerKind.FC1),
)


@dataclass(frozen=True)
class ClipPolicy:
    k: float = 2.0

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"clip multiplier must be positive, got {self.k}")


@dataclass
class ClipResult:
    s_hat: np.ndarray
    z_hat: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    mu_s: float
    sigma_s: float
    mu_z: float
    sigma_z: float
    s_bounds: tuple[float, float]
    z_bounds: tuple[float, float]


def _band(values: np.ndarray, k: float) -> tuple[float, float, float, float]:
    mu = float(np.mean(values))
    sigma = float(np.std(values))  # population std
    if math.isinf(k):
        return mu, sigma, -math.inf, math.inf
    return mu, sigma, mu - k * sigma, mu + k * sigma


def clip_channel_params(s, z, policy: ClipPolicy = ClipPolicy()) -> ClipResult:
    s = np.asarray(s, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("channel scales must be positive")
    mu_s, sig_s, s_lo, s_hi = _band(s, policy.k)
    if s_lo <= 0:
        s_lo = float(s.min())
    mu_z, sig_z, z_lo, z_hi = _band(z, policy.k)
    s_hat = np.clip(s, s_lo, s_hi)
    z_hat = np.clip(z, z_lo, z_hi)
    return ClipResult(s_hat, z_hat, s / s_hat, z - z_hat,
                      mu_s, sig_s, mu_z, sig_z, (s_lo, s_hi), (z_lo, z_hi))


def fold_into_layernorm(gamma, beta, s, v1, v2):
    gamma, beta = np.asarray(gamma), np.asarray(beta)
    return gamma / v1, (beta + s * v2) / v1


def fold_into_next_linear(W, b, s, v1, v2):
    W, b = np.asarray(W), np.asarray(b)
    if W.shape[0] != np.shape(v1)[0]:
        raise ValueError(f"weight rows {W.shape[0]} != channel count {np.shape(v1)[0]}")
    return np.asarray(v1)[:, None] * W, b - (s * v2) @ W


@dataclass
class ReparamRecord:
    layer: LayerId
    scale: np.ndarray
    zero_point: np.ndarray
    clip: ClipResult
    act_params: QuantParams
    gamma_hat: np.ndarray
    beta_hat: np.ndarray
    weight_hat: np.ndarray
    bias_hat: np.ndarray

    def summary(self) -> dict:
        c = self.clip
        return {
            "layer": str(self.layer),
            "mu_s": c.mu_s, "sigma_s": c.sigma_s,
            "mu_z": c.mu_z, "sigma_z": c.sigma_z,
            "s_clipped_low": int(np.sum(self.scale < c.s_bounds[0])),
            "s_clipped_high": int(np.sum(self.scale > c.s_bounds[1])),
            "z_clipped_low": int(np.sum(self.zero_point < c.z_bounds[0])),
            "z_clipped_high": int(np.sum(self.zero_point > c.z_bounds[1])),
            "spread_before": float(self.scale.max() / self.scale.min()),
            "spread_after": float(c.s_hat.max() / c.s_hat.min()),
        }


def fold_pair(model: ToyViT, site: LayerId, stats: CalibrationStats, bits: int,
              policy: ClipPolicy = ClipPolicy(),
              percentile: float = 1.0) -> tuple[ToyViT, ReparamRecord]:
    """Reparameterize the LayerNorm feeding ``site`` (a block's QKV or FC1)."""
    pairs = {kind: (ln, lin) for ln, lin, kind in FOLD_PAIRS}
    if site.kind not in pairs:
        raise ValueError(f"{site} does not follow a LayerNorm")
    ln, lin = pairs[site.kind]
    base = calibrate_uniform(stats, bits, Granularity.PER_CHANNEL, percentile)
    s = base.scale.astype(np.float64)
    z = base.zero_point.astype(np.float64)
    clip = clip_channel_params(s, z, policy)
    pre = f"blocks.{site.block}."
    w, dtype = model.weights, model.dtype
    g_hat, b_hat = fold_into_layernorm(w[pre + ln + ".gamma"].astype(np.float64),
                                       w[pre + ln + ".beta"].astype(np.float64),
                                       s, clip.v1, clip.v2)
    W_hat, bias_hat = fold_into_next_linear(w[pre + lin + ".W"].astype(np.float64),
                                            w[pre + lin + ".b"].astype(np.float64),
                                            s, clip.v1, clip.v2)
    zp = np.clip(round_half_away(clip.z_hat), 0, (1 << bits) - 1).astype(np.int64)
    act = QuantParams(QuantScheme(Kind.UNIFORM, Granularity.PER_CHANNEL), bits,
                      clip.s_hat, zp, degenerate=base.degenerate)
    updated = model.with_weights({
        pre + ln + ".gamma": g_hat.astype(dtype),
        pre + ln + ".beta": b_hat.astype(dtype),
        pre + lin + ".W": W_hat.astype(dtype),
        pre + lin + ".b": bias_hat.astype(dtype),
    })
    return updated, ReparamRecord(site, s, z, clip, act, g_hat, b_hat, W_hat, bias_hat)


def apply_crl(model: ToyViT, stats: Mapping[LayerId, CalibrationStats],
              bits: Mapping[LayerId, int], policy: ClipPolicy = ClipPolicy(),
              percentile: float = 1.0) -> tuple[ToyViT, dict[LayerId, ReparamRecord]]:
    """Reparameterize every LN1->QKV and LN2->FC1 pair of every block.

    ``stats`` holds per-channel statistics of each LayerNorm output, keyed by
    the consuming site (``QKV`` or ``FC1`` of a block); ``bits`` gives those
    sites' activation bit-widths (8 when absent). Returns a new model and
    leaves ``model`` untouched.
    """
    records: dict[LayerId, ReparamRecord] = {}
    for l in range(model.config.num_blocks):
        for _, _, kind in FOLD_PAIRS:
            site = LayerId(l, kind)
            if site not in stats:
                raise KeyError(f"missing calibration stats for {site}")
            model, records[site] = fold_pair(model, site, stats[site],
                                             int(bits.get(site, 8)), policy, percentile)
    return model, records
