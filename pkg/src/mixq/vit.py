"""Desk-scale vision transformer with quantization and capture hooks."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Mapping

import numpy as np

from . import tensor as T
from .quant import QuantParams, fake_quant
from .tensor import Tensor


class LayerKind(str, enum.Enum):
    PATCH_EMBED = "PatchEmbed"
    QKV = "QKV"
    MATMUL1 = "MatMul1"
    POST_SOFTMAX = "PostSoftmax"
    MATMUL2 = "MatMul2"
    PROJECTION = "Projection"
    FC1 = "FC1"
    POST_GELU = "PostGELU"
    FC2 = "FC2"
    HEAD = "Head"
    LN1 = "LN1"
    LN2 = "LN2"


BLOCK_KINDS = (
    LayerKind.QKV, LayerKind.MATMUL1, LayerKind.POST_SOFTMAX, LayerKind.MATMUL2,
    LayerKind.PROJECTION, LayerKind.FC1, LayerKind.POST_GELU, LayerKind.FC2,
)
OUTER_KINDS = (LayerKind.PATCH_EMBED, LayerKind.HEAD)
QUANT_KINDS = (LayerKind.PATCH_EMBED,) + BLOCK_KINDS + (LayerKind.HEAD,)
WEIGHTLESS = frozenset({LayerKind.MATMUL1, LayerKind.MATMUL2,
                        LayerKind.POST_SOFTMAX, LayerKind.POST_GELU})
LOG_KINDS = frozenset({LayerKind.POST_SOFTMAX, LayerKind.POST_GELU})


@dataclass(frozen=True, order=True)
class LayerId:
    block: int
    kind: LayerKind

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.kind in OUTER_KINDS and self.block != 0:
            raise ValueError(f"{self.kind.value} only exists with block 0")
        if self.block < 0:
            raise ValueError("block index must be non-negative")

    def __str__(self) -> str:
        if self.kind in OUTER_KINDS:
            return self.kind.value
        return f"blocks.{self.block}.{self.kind.value}"

    @classmethod
    def parse(cls, text: str) -> "LayerId":
        parts = text.split(".")
        if len(parts) == 1:
            return cls(0, LayerKind(parts[0]))
        if len(parts) == 3 and parts[0] == "blocks":
            return cls(int(parts[1]), LayerKind(parts[2]))
        raise ValueError(f"cannot parse layer id {text!r}")


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 4
    embed_dim: int = 64
    heads: int = 4
    mlp_dim: int = 128
    classes: int = 10
    patch_size: int = 4
    image_height: int = 32
    image_width: int = 32
    channels: int = 3
    seed: int = 0
    eps: float = 1e-6

    def __post_init__(self):
        for name in ("num_blocks", "embed_dim", "heads", "mlp_dim", "patch_size",
                     "image_height", "image_width", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError("image size must be divisible by patch_size")
        if self.tokens < 2:
            raise ValueError("need at least two tokens")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def tokens(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F = config.embed_dim, config.mlp_dim
    shapes = {
        "patch_embed.W": (config.patch_dim, D),
        "patch_embed.b": (D,),
        "pos_embed": (config.tokens, D),
    }
    for l in range(config.num_blocks):
        p = f"blocks.{l}."
        shapes.update({
            p + "ln1.gamma": (D,), p + "ln1.beta": (D,),
            p + "qkv.W": (D, 3 * D), p + "qkv.b": (3 * D,),
            p + "proj.W": (D, D), p + "proj.b": (D,),
            p + "ln2.gamma": (D,), p + "ln2.beta": (D,),
            p + "fc1.W": (D, F), p + "fc1.b": (F,),
            p + "fc2.W": (F, D), p + "fc2.b": (D,),
        })
    shapes["head.W"] = (D, config.classes)
    shapes["head.b"] = (config.classes,)
    return shapes


# weight/bias names per quantizable layer
PARAM_NAMES = {
    LayerKind.PATCH_EMBED: ("patch_embed.W", "patch_embed.b"),
    LayerKind.QKV: ("qkv.W", "qkv.b"),
    LayerKind.PROJECTION: ("proj.W", "proj.b"),
    LayerKind.FC1: ("fc1.W", "fc1.b"),
    LayerKind.FC2: ("fc2.W", "fc2.b"),
    LayerKind.HEAD: ("head.W", "head.b"),
}


def param_names(layer: LayerId) -> tuple[str, str] | None:
    names = PARAM_NAMES.get(layer.kind)
    if names is None:
        return None
    if layer.kind in OUTER_KINDS:
        return names
    return tuple(f"blocks.{layer.block}.{n}" for n in names)


@dataclass(frozen=True)
class ToyViT:
    config: ModelConfig
    weights: Mapping[str, np.ndarray]

    def __post_init__(self):
        expected = weight_shapes(self.config)
        if set(expected) != set(self.weights):
            missing = sorted(set(expected) - set(self.weights))
            extra = sorted(set(self.weights) - set(expected))
            raise ValueError(f"weight table mismatch; missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.weights[name].shape != shape:
                raise T.ShapeError(
                    f"{name}: expected shape {shape}, got {self.weights[name].shape}")

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def with_weights(self, updates: Mapping[str, np.ndarray]) -> "ToyViT":
        merged = dict(self.weights)
        merged.update(updates)
        return replace(self, weights=merged)

    def astype(self, dtype) -> "ToyViT":
        return replace(self, weights={k: v.astype(dtype) for k, v in self.weights.items()})


def init_weights(config: ModelConfig, dtype=np.float64) -> ToyViT:
    rng = np.random.default_rng(config.seed)
    std = 1.0 / math.sqrt(config.embed_dim)
    weights = {}
    for name, shape in weight_shapes(config).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith((".b", ".beta")):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, std, size=shape)
        weights[name] = arr.astype(dtype)
    return ToyViT(config, weights)


@dataclass
class SiteQuant:
    """Quantizers bound to one layer: weight, first and second activation operand.

    For MatMul1 ``act`` quantizes queries and ``act_b`` keys. For MatMul2 the
    attention operand is the PostSoftmax site, so only ``act`` (values) is used.
    """

    weight: QuantParams | None = None
    act: QuantParams | None = None
    act_b: QuantParams | None = None


@dataclass
class QuantPlan:
    entries: dict[LayerId, SiteQuant] = field(default_factory=dict)
    crl_blocks: frozenset[int] = frozenset()

    def get(self, layer: LayerId) -> SiteQuant | None:
        return self.entries.get(layer)

    def validate(self, config: ModelConfig) -> None:
        known = set(registry_ids(config))
        for layer in self.entries:
            if layer not in known:
                raise KeyError(f"quant plan references unknown layer {layer}")

    def to_dict(self) -> dict:
        def enc(p):
            return None if p is None else p.to_dict()

        return {"crl_blocks": sorted(self.crl_blocks),
                "sites": {str(k): {"weight": enc(v.weight), "act": enc(v.act),
                                   "act_b": enc(v.act_b)} for k, v in self.entries.items()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "QuantPlan":
        def dec(p):
            return None if p is None else QuantParams.from_dict(p)

        entries = {LayerId.parse(k): SiteQuant(dec(v["weight"]), dec(v["act"]), dec(v["act_b"]))
                   for k, v in d["sites"].items()}
        return cls(entries, frozenset(d["crl_blocks"]))


def registry_ids(config: ModelConfig) -> list[LayerId]:
    ids = [LayerId(0, LayerKind.PATCH_EMBED)]
    for l in range(config.num_blocks):
        ids.extend(LayerId(l, k) for k in BLOCK_KINDS)
    ids.append(LayerId(0, LayerKind.HEAD))
    return ids


@dataclass(frozen=True)
class LayerInfo:
    layer: LayerId
    params: int
    macs: int


def layer_registry(model_or_config) -> list[LayerInfo]:
    """Quantizable layers in execution order with parameter and MAC counts."""
    cfg = model_or_config.config if isinstance(model_or_config, ToyViT) else model_or_config
    N, D, F, P, C = cfg.tokens, cfg.embed_dim, cfg.mlp_dim, cfg.patch_dim, cfg.classes
    costs = {
        LayerKind.PATCH_EMBED: (P * D + D, N * P * D),
        LayerKind.QKV: (D * 3 * D + 3 * D, N * D * 3 * D),
        LayerKind.MATMUL1: (0, N * N * D),
        LayerKind.POST_SOFTMAX: (0, 0),
        LayerKind.MATMUL2: (0, N * N * D),
        LayerKind.PROJECTION: (D * D + D, N * D * D),
        LayerKind.FC1: (D * F + F, N * D * F),
        LayerKind.POST_GELU: (0, 0),
        LayerKind.FC2: (F * D + D, N * F * D),
        LayerKind.HEAD: (D * C + C, D * C),
    }
    return [LayerInfo(lid, *costs[lid.kind]) for lid in registry_ids(cfg)]


def tap_name(layer: LayerId, suffix: str = "") -> str:
    return str(layer) + (f".{suffix}" if suffix else "")


# site -> capture taps holding the pre-quantization activation operands
ACT_TAPS = {
    LayerKind.PATCH_EMBED: ("in",),
    LayerKind.QKV: ("in",),
    LayerKind.MATMUL1: ("a", "b"),
    LayerKind.POST_SOFTMAX: ("",),
    LayerKind.MATMUL2: ("b",),
    LayerKind.PROJECTION: ("in",),
    LayerKind.FC1: ("in",),
    LayerKind.POST_GELU: ("",),
    LayerKind.FC2: (),
    LayerKind.HEAD: ("in",),
}


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, ch) -> (B, tokens, patch*patch*ch), row-major over patches."""
    B, H, W, ch = images.shape
    if H % patch or W % patch:
        raise T.ShapeError(f"image size {H}x{W} not divisible by patch {patch}")
    x = images.reshape(B, H // patch, patch, W // patch, patch, ch)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // patch) * (W // patch), patch * patch * ch)


@dataclass
class ForwardResult:
    logits: Tensor
    cache: dict[str, Tensor]
    params: dict[str, Tensor] = field(default_factory=dict)


Edit = Callable[[Tensor], Tensor]


class _Runner:
    def __init__(self, model: ToyViT, plan: QuantPlan | None, capture: bool,
                 edits: Mapping[str, Edit] | None, track: bool):
        self.model = model
        self.plan = plan or QuantPlan()
        self.capture = capture
        self.edits = edits or {}
        self.cache: dict[str, Tensor] = {}
        self.params = {k: Tensor(v, requires_grad=track) for k, v in model.weights.items()}

    def tap(self, name: str, t: Tensor) -> Tensor:
        edit = self.edits.get(name)
        if edit is not None:
            t = edit(t)
        if self.capture:
            self.cache[name] = t
        return t

    @staticmethod
    def q(t: Tensor, params: QuantParams | None) -> Tensor:
        if params is None:
            return t
        return T.straight_through(t, lambda a: fake_quant(a, params))

    def site(self, layer: LayerId) -> SiteQuant:
        return self.plan.get(layer) or SiteQuant()

    def linear(self, layer: LayerId, x: Tensor) -> Tensor:
        w_name, b_name = param_names(layer)
        site = self.site(layer)
        x = self.q(x, site.act)
        W = self.q(self.params[w_name], site.weight)
        return x @ W + self.params[b_name]

    def block(self, l: int, x: Tensor) -> Tensor:
        cfg = self.model.config
        B, N, D = x.shape
        h, dh = cfg.heads, cfg.head_dim
        p = self.params
        pre = f"blocks.{l}."
        lid = lambda kind: LayerId(l, kind)  # noqa: E731

        a = T.layernorm(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], cfg.eps)
        a = self.tap(pre + "LN1", a)
        a = self.tap(tap_name(lid(LayerKind.QKV), "in"), a)
        qkv = self.tap(str(lid(LayerKind.QKV)), self.linear(lid(LayerKind.QKV), a))
        qkv = qkv.reshape(B, N, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        m1, m2 = self.site(lid(LayerKind.MATMUL1)), self.site(lid(LayerKind.MATMUL2))
        q = self.q(self.tap(tap_name(lid(LayerKind.MATMUL1), "a"), q), m1.act)
        k = self.q(self.tap(tap_name(lid(LayerKind.MATMUL1), "b"), k), m1.act_b)
        v = self.q(self.tap(tap_name(lid(LayerKind.MATMUL2), "b"), v), m2.act)
        scores = self.tap(str(lid(LayerKind.MATMUL1)), q @ k.transpose(0, 1, 3, 2))
        attn = T.softmax_rows(scores * (1.0 / math.sqrt(dh)))
        attn = self.tap(str(lid(LayerKind.POST_SOFTMAX)), attn)
        attn = self.q(attn, self.site(lid(LayerKind.POST_SOFTMAX)).act)
        ctx = self.tap(str(lid(LayerKind.MATMUL2)), attn @ v)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, N, D)
        ctx = self.tap(tap_name(lid(LayerKind.PROJECTION), "in"), ctx)
        proj = self.tap(str(lid(LayerKind.PROJECTION)), self.linear(lid(LayerKind.PROJECTION), ctx))
        y = self.tap(pre + "residual1", x + proj)

        b = T.layernorm(y, p[pre + "ln2.gamma"], p[pre + "ln2.beta"], cfg.eps)
        b = self.tap(pre + "LN2", b)
        b = self.tap(tap_name(lid(LayerKind.FC1), "in"), b)
        f1 = self.tap(str(lid(LayerKind.FC1)), self.linear(lid(LayerKind.FC1), b))
        g = self.tap(str(lid(LayerKind.POST_GELU)), T.gelu(f1))
        g = self.q(g, self.site(lid(LayerKind.POST_GELU)).act)
        f2 = self.tap(str(lid(LayerKind.FC2)), self.linear(lid(LayerKind.FC2), g))
        return self.tap(pre + "residual2", y + f2)

    def run(self, images: Tensor) -> Tensor:
        cfg = self.model.config
        embed = LayerId(0, LayerKind.PATCH_EMBED)
        head = LayerId(0, LayerKind.HEAD)
        x = self.tap(tap_name(embed, "in"), images)
        x = self.linear(embed, x) + self.params["pos_embed"]
        x = self.tap(str(embed), x)
        for l in range(cfg.num_blocks):
            x = self.block(l, x)
        pooled = self.tap(tap_name(head, "in"), x.mean(axis=1))
        return self.tap(str(head), self.linear(head, pooled))


def _check_images(model: ToyViT, images) -> np.ndarray:
    arr = np.asarray(images)
    cfg = model.config
    if arr.ndim != 4 or arr.shape[1:] != (cfg.image_height, cfg.image_width, cfg.channels):
        raise T.ShapeError(
            f"expected images of shape (B, {cfg.image_height}, {cfg.image_width}, "
            f"{cfg.channels}), got {arr.shape}")
    return arr.astype(model.dtype, copy=False)


def forward(model: ToyViT, images, plan: QuantPlan | None = None, capture: bool = False,
            *, edits: Mapping[str, Edit] | None = None, track: bool = False) -> ForwardResult:
    """Run the network.

    ``edits`` maps capture-tap names to tensor transforms applied in place of
    the tapped value (used by finite-difference checks). With ``track`` the
    input and weights are marked as requiring gradients so that an enclosing
    :class:`~mixq.tensor.Tape` records the whole graph.
    """
    if plan is not None:
        plan.validate(model.config)
    arr = _check_images(model, images)
    patches = Tensor(patchify(arr, model.config.patch_size), requires_grad=track)
    runner = _Runner(model, plan, capture, edits, track)
    logits = runner.run(patches)
    return ForwardResult(logits, runner.cache, runner.params)


def predict_logits(model: ToyViT, images, plan: QuantPlan | None = None,
                   batch_size: int = 256) -> np.ndarray:
    arr = np.asarray(images)
    out = [forward(model, arr[i:i + batch_size], plan).logits.data
           for i in range(0, len(arr), batch_size)]
    return np.concatenate(out, axis=0)


def iter_batches(n: int, batch_size: int) -> Iterable[slice]:
    for i in range(0, n, batch_size):
        yield slice(i, min(i + batch_size, n))
