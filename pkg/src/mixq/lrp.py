"""Relevance propagation, relevance maps and layer importance scores.

Relevance starts as the one-hot vector of the target class at the logits and
flows back to the patch embedding:

* linear layers and the two attention matmuls use the positive-subset rule:
  only input/weight products ``x_j * w_ji >= 0`` take part, each receiving
  its share of the output unit's relevance. Output units whose subset sums to
  zero forward nothing. For a product of two activations the share of each
  term is split evenly between both operands.
* residual sums split relevance in proportion to ``|branch|``.
* LayerNorm and GELU are transparent.
* softmax uses the generic input-times-gradient rule ``x_j dM_i/dx_j R_i / M_i``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

from .tensor import Tape
from .vit import BLOCK_KINDS, LayerId, LayerKind, ToyViT, forward, layer_registry

HEAD_AXIS_KINDS = frozenset({LayerKind.MATMUL1, LayerKind.POST_SOFTMAX, LayerKind.MATMUL2})


@dataclass
class StepCheck:
    """Per-sample relevance bookkeeping for one positive-subset step."""

    name: str
    redistributed: np.ndarray
    received: np.ndarray


@dataclass
class RelevanceState:
    classes: np.ndarray
    relevance: dict[LayerId, np.ndarray]
    input_relevance: np.ndarray
    steps: list[StepCheck] = field(default_factory=list)


def _split(x):
    return np.maximum(x, 0), np.minimum(x, 0)


def _active(den):
    # units whose positive subset sums to a subnormal value are treated as empty
    return den >= np.finfo(np.asarray(den).dtype).tiny


def _normalized(R, den):
    on = _active(den)
    return np.where(on, R / np.where(on, den, 1.0), 0.0)


def _received(R, den):
    axes = tuple(range(1, R.ndim))
    return np.where(_active(den), R, 0.0).sum(axis=axes)


def positive_linear(x, W, R, name="linear", steps=None):
    """Positive-subset rule for ``x @ W`` with a constant weight matrix."""
    xp, xn = _split(x)
    Wp, Wn = _split(W)
    den = xp @ Wp + xn @ Wn
    Rn = _normalized(R, den)
    R_in = xp * (Rn @ Wp.T) + xn * (Rn @ Wn.T)
    if steps is not None:
        steps.append(StepCheck(name, R_in.reshape(len(R_in), -1).sum(axis=1), _received(R, den)))
    return R_in


def positive_bilinear(a, b, R, name="matmul", steps=None):
    """Positive-subset rule for ``a @ b`` with both operands activations.

    Returns relevance for ``a`` and ``b``; each contributing term gives half
    of its share to either factor.
    """
    ap, an = _split(a)
    bp, bn = _split(b)
    den = ap @ bp + an @ bn
    Rn = _normalized(R, den)
    swap = lambda m: np.swapaxes(m, -1, -2)  # noqa: E731
    R_a = 0.5 * (ap * (Rn @ swap(bp)) + an * (Rn @ swap(bn)))
    R_b = 0.5 * (bp * (swap(ap) @ Rn) + bn * (swap(an) @ Rn))
    if steps is not None:
        n = len(R)
        total = R_a.reshape(n, -1).sum(axis=1) + R_b.reshape(n, -1).sum(axis=1)
        steps.append(StepCheck(name, total, _received(R, den)))
    return R_a, R_b


def residual_split(a, b, R):
    """Split ``R`` over the summands of ``a + b`` proportionally to magnitude."""
    wa, wb = np.abs(a), np.abs(b)
    tot = wa + wb
    with np.errstate(divide="ignore", invalid="ignore"):
        fa = np.where(tot > 0, wa / np.where(tot > 0, tot, 1.0), 0.5)
    return fa * R, (1.0 - fa) * R


def softmax_generic(x, y, R):
    """Input-times-gradient rule through a row softmax ``y = softmax(x)``."""
    return x * (R - y * R.sum(axis=-1, keepdims=True))


def propagate_relevance(model: ToyViT, images, classes=None, cache=None) -> RelevanceState:
    """Push one-hot class relevance from the logits down to the input patches.

    ``classes`` defaults to the model's own predictions. A precomputed
    full-precision capture ``cache`` may be passed to skip the forward pass.
    """
    cfg = model.config
    if cache is None:
        cache = forward(model, images, capture=True).cache
    logits = cache["Head"].data
    B = logits.shape[0]
    if classes is None:
        classes = logits.argmax(axis=1)
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    if classes.shape != (B,):
        raise ValueError(f"expected {B} class indices, got shape {classes.shape}")
    if np.any(classes < 0) or np.any(classes >= cfg.classes):
        raise IndexError(f"class index out of range [0, {cfg.classes})")

    w = model.weights
    a = lambda name: cache[name].data  # noqa: E731
    steps: list[StepCheck] = []
    rel: dict[LayerId, np.ndarray] = {}
    head = LayerId(0, LayerKind.HEAD)

    R = np.zeros_like(logits)
    R[np.arange(B), classes] = 1.0
    rel[head] = R
    R_pooled = positive_linear(a("Head.in"), w["head.W"], R, "Head", steps)
    # mean pooling as a linear map with weights 1/N over tokens
    tokens = a(f"blocks.{cfg.num_blocks - 1}.residual2")
    contrib = tokens / tokens.shape[1]
    # pooling weights are positive, so only nonnegative tokens are in the subset
    zp = np.maximum(contrib, 0.0)
    den = zp.sum(axis=1)
    Rn = _normalized(R_pooled, den)
    R_x = zp * Rn[:, None, :]
    steps.append(StepCheck("Pool", R_x.reshape(B, -1).sum(axis=1), _received(R_pooled, den)))

    h, dh = cfg.heads, cfg.head_dim
    N, D = cfg.tokens, cfg.embed_dim
    for l in reversed(range(cfg.num_blocks)):
        pre = f"blocks.{l}."
        lid = lambda kind: LayerId(l, kind)  # noqa: E731
        y = a(pre + "residual1")
        f2 = a(str(lid(LayerKind.FC2)))
        R_y, R_f2 = residual_split(y, f2, R_x)
        rel[lid(LayerKind.FC2)] = R_f2
        R_g = positive_linear(a(str(lid(LayerKind.POST_GELU))), w[pre + "fc2.W"], R_f2,
                              f"{pre}FC2", steps)
        rel[lid(LayerKind.POST_GELU)] = R_g
        rel[lid(LayerKind.FC1)] = R_g
        R_ln2 = positive_linear(a(pre + "LN2"), w[pre + "fc1.W"], R_g, f"{pre}FC1", steps)
        R_y = R_y + R_ln2

        x_in = a(f"blocks.{l - 1}.residual2") if l > 0 else a("PatchEmbed")
        proj = a(str(lid(LayerKind.PROJECTION)))
        R_xin, R_proj = residual_split(x_in, proj, R_y)
        rel[lid(LayerKind.PROJECTION)] = R_proj
        R_ctx = positive_linear(a(str(lid(LayerKind.PROJECTION)) + ".in"), w[pre + "proj.W"],
                                R_proj, f"{pre}Projection", steps)
        R_ctx = R_ctx.reshape(B, N, h, dh).transpose(0, 2, 1, 3)
        rel[lid(LayerKind.MATMUL2)] = R_ctx
        probs = a(str(lid(LayerKind.POST_SOFTMAX)))
        v = a(str(lid(LayerKind.MATMUL2)) + ".b")
        R_p, R_v = positive_bilinear(probs, v, R_ctx, f"{pre}MatMul2", steps)
        rel[lid(LayerKind.POST_SOFTMAX)] = R_p
        scores = a(str(lid(LayerKind.MATMUL1)))
        R_s = softmax_generic(scores / math.sqrt(dh), probs, R_p)
        rel[lid(LayerKind.MATMUL1)] = R_s
        q = a(str(lid(LayerKind.MATMUL1)) + ".a")
        k = a(str(lid(LayerKind.MATMUL1)) + ".b")
        R_q, R_kt = positive_bilinear(q, np.swapaxes(k, -1, -2), R_s, f"{pre}MatMul1", steps)
        R_k = np.swapaxes(R_kt, -1, -2)
        R_qkv = np.stack([R_q, R_k, R_v]).transpose(1, 3, 0, 2, 4).reshape(B, N, 3 * D)
        rel[lid(LayerKind.QKV)] = R_qkv
        R_ln1 = positive_linear(a(pre + "LN1"), w[pre + "qkv.W"], R_qkv, f"{pre}QKV", steps)
        R_x = R_xin + R_ln1

    embed = LayerId(0, LayerKind.PATCH_EMBED)
    rel[embed] = R_x
    R_in = positive_linear(a("PatchEmbed.in"), w["patch_embed.W"], R_x, "PatchEmbed", steps)
    return RelevanceState(classes, rel, R_in, steps)


def relevance_map(grad, relevance, head_axis: int | None = None) -> np.ndarray:
    """Positive part of ``grad * relevance``, averaged over the head axis if given."""
    grad, relevance = np.asarray(grad), np.asarray(relevance)
    if grad.shape != relevance.shape:
        raise ValueError(f"gradient shape {grad.shape} != relevance shape {relevance.shape}")
    S = np.maximum(grad * relevance, 0.0)
    if head_axis is not None:
        S = S.mean(axis=head_axis)
    return S


def site_gradients(model: ToyViT, images, classes=None):
    """Forward capture plus gradients of the chosen class logit at every site output."""
    with Tape() as tape:
        result = forward(model, images, capture=True, track=True)
        logits = result.logits
        if classes is None:
            classes = logits.data.argmax(axis=1)
        seed = np.zeros_like(logits.data)
        seed[np.arange(len(seed)), np.asarray(classes)] = 1.0
        grads = tape.backward(logits, seed)
    out = {}
    for info in layer_registry(model):
        t = result.cache[str(info.layer)]
        out[info.layer] = grads[t]
    return result.cache, out, np.asarray(classes)


@dataclass
class ContributionTable:
    scores: dict[LayerId, float]
    samples: int


@dataclass
class ImportanceTable:
    scores: dict[LayerId, float]

    def __getitem__(self, layer: LayerId) -> float:
        return self.scores[layer]

    def rows(self) -> list[tuple[str, float]]:
        return [(str(k), v) for k, v in self.scores.items()]

    def to_text(self) -> str:
        width = max(len(str(k)) for k in self.scores)
        return "\n".join(f"{str(k):<{width}}  {v:.6f}" for k, v in self.scores.items()) + "\n"

    def heatmap_csv(self, num_blocks: int) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["block"] + [k.value for k in BLOCK_KINDS])
        for l in range(num_blocks):
            wr.writerow([l] + [repr(self.scores.get(LayerId(l, k), 0.0)) for k in BLOCK_KINDS])
        for kind in (LayerKind.PATCH_EMBED, LayerKind.HEAD):
            lid = LayerId(0, kind)
            if lid in self.scores:
                wr.writerow([kind.value, repr(self.scores[lid])] + [""] * (len(BLOCK_KINDS) - 1))
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {str(k): v for k, v in self.scores.items()}

    @classmethod
    def from_dict(cls, d: Mapping[str, float]) -> "ImportanceTable":
        return cls({LayerId.parse(k): float(v) for k, v in d.items()})


def sample_contributions(model: ToyViT, images, classes=None) -> dict[LayerId, np.ndarray]:
    """Per-sample mean relevance map value for every registered layer."""
    cache, grads, classes = site_gradients(model, images, classes)
    state = propagate_relevance(model, images, classes, cache=cache)
    out = {}
    for layer, g in grads.items():
        axis = 1 if layer.kind in HEAD_AXIS_KINDS else None
        S = relevance_map(g, state.relevance[layer], axis)
        out[layer] = S.reshape(len(S), -1).mean(axis=1)
    return out


def contribution_scores(model: ToyViT, images, classes=None,
                        batch_size: int = 64) -> ContributionTable:
    images = np.asarray(images)
    T = len(images)
    if T < 1:
        raise ValueError("need at least one sample")
    per_layer: dict[LayerId, list[np.ndarray]] = {}
    for start in range(0, T, batch_size):
        cls = None if classes is None else np.asarray(classes)[start:start + batch_size]
        part = sample_contributions(model, images[start:start + batch_size], cls)
        for layer, vals in part.items():
            per_layer.setdefault(layer, []).append(vals)
    scores = {layer: math.fsum(np.concatenate(v).astype(np.float64).tolist()) / T
              for layer, v in per_layer.items()}
    return ContributionTable(scores, T)


def importance_scores(table: ContributionTable | Mapping[LayerId, float]) -> ImportanceTable:
    scores = table.scores if isinstance(table, ContributionTable) else dict(table)
    values = np.array(list(scores.values()), dtype=np.float64)
    if np.any(values < 0):
        raise ValueError("contribution scores must be nonnegative")
    total = math.fsum(values)
    if not total > 0:
        raise ValueError("all contribution scores are zero; cannot normalize")
    return ImportanceTable({k: v / total for k, v in scores.items()})


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    return float(spearmanr(a, b).statistic)
