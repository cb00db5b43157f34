"""Exact mixed-precision bit allocation under model-size and BitOps budgets.

Each layer picks one bit-width ``b`` from the candidate set. A choice earns
``omega * b`` minus a sensitivity penalty and costs ``params * b`` weight-bits
and ``macs * b**2`` bit operations. :func:`solve_exact` finds the global
optimum by depth-first branch-and-bound; :func:`brute_force` enumerates.
Both rank candidates by the same canonical objective (a left-to-right float
sum in layer order) and break exact ties toward the lexicographically
smallest bit vector, so they agree bit for bit.
"""

from __future__ import annotations

import csv
import enum
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linprog

from .vit import BLOCK_KINDS, LayerId

BRUTE_FORCE_LIMIT = 10 ** 7


class LambdaMode(str, enum.Enum):
    """How the sensitivity score enters a layer's objective.

    ``verbatim``: ``(omega - lam[b]) * b``.
    ``flat``: ``omega * b - lam[b] * mean(bits)``, a penalty that does not
    grow with the chosen width.
    """

    VERBATIM = "verbatim"
    FLAT = "flat"


class InfeasibleError(ValueError):
    def __init__(self, constraint: str, required: float, available: float):
        self.constraint = constraint
        self.required = required
        self.available = available
        super().__init__(f"{constraint} budget infeasible: minimum {required} exceeds {available}")


@dataclass(frozen=True)
class AllocLayer:
    name: str
    kind: str
    params: int
    macs: int
    omega: float
    pinned: int | None = None

    def __post_init__(self):
        if self.params < 0 or self.macs < 0:
            raise ValueError(f"{self.name}: negative cost")
        if not self.omega >= 0:
            raise ValueError(f"{self.name}: importance must be nonnegative")


@dataclass
class AllocationInstance:
    layers: list[AllocLayer]
    bits: tuple[int, ...]
    lam: dict[tuple[str, int], float] = field(default_factory=dict)
    mode: LambdaMode = LambdaMode.VERBATIM

    def __post_init__(self):
        self.bits = tuple(sorted(int(b) for b in self.bits))
        self.mode = LambdaMode(self.mode)
        self.lam = {(str(k), int(b)): float(v) for (k, b), v in self.lam.items()}
        if not self.layers:
            raise ValueError("allocation instance has no layers")
        if not self.bits or len(set(self.bits)) != len(self.bits):
            raise ValueError(f"bad candidate bits {self.bits}")
        if any(v < 0 for v in self.lam.values()):
            raise ValueError("sensitivity scores must be nonnegative")

    def choices(self, i: int) -> tuple[int, ...]:
        p = self.layers[i].pinned
        return self.bits if p is None else (int(p),)

    def value(self, i: int, b: int) -> float:
        layer = self.layers[i]
        lam = self.lam.get((layer.kind, b), 0.0)
        if self.mode is LambdaMode.VERBATIM:
            return (layer.omega - lam) * b
        return layer.omega * b - lam * (sum(self.bits) / len(self.bits))

    def to_dict(self) -> dict:
        return {
            "bits": list(self.bits),
            "mode": self.mode.value,
            "layers": [{"name": l.name, "kind": l.kind, "params": l.params, "macs": l.macs,
                        "omega": l.omega, "pinned": l.pinned} for l in self.layers],
            "lambda": [{"kind": k, "bit": b, "value": v} for (k, b), v in self.lam.items()],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AllocationInstance":
        layers = [AllocLayer(r["name"], r["kind"], int(r["params"]), int(r["macs"]),
                             float(r["omega"]), r.get("pinned")) for r in d["layers"]]
        lam = {(r["kind"], int(r["bit"])): float(r["value"]) for r in d.get("lambda", [])}
        return cls(layers, tuple(d["bits"]), lam, LambdaMode(d.get("mode", "verbatim")))


@dataclass(frozen=True)
class Budget:
    size: float
    bitops: float

    def __post_init__(self):
        if not (self.size > 0 and self.bitops > 0):
            raise ValueError(f"budgets must be positive, got {self.size}, {self.bitops}")

    def to_dict(self) -> dict:
        return {"size": self.size, "bitops": self.bitops}


@dataclass(frozen=True)
class BitAssignment:
    names: tuple[str, ...]
    bits: tuple[int, ...]
    objective: float
    size: int
    bitops: int

    def as_dict(self) -> dict[str, int]:
        return dict(zip(self.names, self.bits))

    def to_dict(self) -> dict:
        return {"bits": self.as_dict(), "objective": self.objective,
                "size": self.size, "bitops": self.bitops}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BitAssignment":
        names = tuple(d["bits"])
        return cls(names, tuple(int(d["bits"][n]) for n in names), float(d["objective"]),
                   int(d["size"]), int(d["bitops"]))


def budget_from_fixed(instance: AllocationInstance, b_fixed: int) -> Budget:
    """Budget of the reference model with every free layer at ``b_fixed``.

    Pinned layers are charged at their pinned width.
    """
    if b_fixed not in instance.bits:
        raise ValueError(f"fixed width {b_fixed} not among candidates {instance.bits}")
    ref = [b_fixed if l.pinned is None else int(l.pinned) for l in instance.layers]
    size = sum(l.params * b for l, b in zip(instance.layers, ref))
    bitops = sum(l.macs * b * b for l, b in zip(instance.layers, ref))
    return Budget(size, bitops)


def evaluate_assignment(instance: AllocationInstance,
                        assignment: BitAssignment | Sequence[int]) -> tuple[float, int, int]:
    """Recompute (objective, size, bitops) from scratch."""
    bits = assignment.bits if isinstance(assignment, BitAssignment) else tuple(assignment)
    if len(bits) != len(instance.layers):
        raise ValueError(f"assignment covers {len(bits)} of {len(instance.layers)} layers")
    phi, size, bitops = 0.0, 0, 0
    for i, (layer, b) in enumerate(zip(instance.layers, bits)):
        if b not in instance.choices(i):
            raise ValueError(f"{layer.name}: bit {b} not allowed (choices {instance.choices(i)})")
        phi = phi + instance.value(i, b)
        size += layer.params * b
        bitops += layer.macs * b * b
    return phi, size, bitops


def _assignment(instance: AllocationInstance, bits) -> BitAssignment:
    bits = tuple(int(b) for b in bits)
    phi, size, bitops = evaluate_assignment(instance, bits)
    return BitAssignment(tuple(l.name for l in instance.layers), bits, phi, size, bitops)


def _check_feasible(instance: AllocationInstance, budget: Budget) -> None:
    lowest = [min(instance.choices(i)) for i in range(len(instance.layers))]
    _, size, bitops = evaluate_assignment(instance, lowest)
    if size > budget.size:
        raise InfeasibleError("size", size, budget.size)
    if bitops > budget.bitops:
        raise InfeasibleError("bitops", bitops, budget.bitops)


def brute_force(instance: AllocationInstance, budget: Budget) -> BitAssignment:
    """Exhaustive enumeration in lexicographic order (oracle for ``solve_exact``)."""
    n = len(instance.layers)
    options = [instance.choices(i) for i in range(n)]
    total = math.prod(len(o) for o in options)
    if total > BRUTE_FORCE_LIMIT:
        raise ValueError(f"{total} assignments exceed the enumeration limit {BRUTE_FORCE_LIMIT}")
    _check_feasible(instance, budget)
    # mixed-radix decoding; the first layer is the most significant digit
    radix = [len(o) for o in options]
    stride = [math.prod(radix[i + 1:]) for i in range(n)]
    best_phi, best_idx = -math.inf, -1
    chunk = 1 << 20
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        phi = np.zeros(len(idx))
        size = np.zeros(len(idx), dtype=np.int64)
        ops = np.zeros(len(idx), dtype=np.int64)
        for i, layer in enumerate(instance.layers):
            digit = (idx // stride[i]) % radix[i]
            opts = np.asarray(options[i], dtype=np.int64)
            vals = np.array([instance.value(i, int(b)) for b in opts])
            phi += vals[digit]
            size += layer.params * opts[digit]
            ops += layer.macs * opts[digit] ** 2
        ok = (size <= budget.size) & (ops <= budget.bitops)
        if not ok.any():
            continue
        masked = np.where(ok, phi, -np.inf)
        j = int(np.argmax(masked))
        if masked[j] > best_phi:
            best_phi, best_idx = float(masked[j]), start + j
    bits = [options[i][(best_idx // stride[i]) % radix[i]] for i in range(n)]
    return _assignment(instance, bits)


def _dual_multipliers(values, sizes, ops, cap_size, cap_ops) -> list[tuple[float, float]]:
    """Multipliers of the two budget rows from the LP relaxation."""
    n, k = values.shape
    c = -values.ravel()
    A_ub = np.vstack([sizes.ravel(), ops.ravel()]).astype(np.float64)
    A_eq = np.zeros((n, n * k))
    for i in range(n):
        A_eq[i, i * k:(i + 1) * k] = 1.0
    res = linprog(c, A_ub=A_ub, b_ub=[cap_size, cap_ops], A_eq=A_eq, b_eq=np.ones(n),
                  bounds=(0, 1), method="highs")
    mults = [(0.0, 0.0)]
    if res.status == 0:
        l1, l2 = (max(0.0, -float(m)) for m in res.ineqlin.marginals)
        mults += [(l1, l2), (l1 * 0.5, l2 * 0.5), (l1 * 2.0, l2 * 2.0), (l1, 0.0), (0.0, l2)]
    return mults


def solve_exact(instance: AllocationInstance, budget: Budget) -> BitAssignment:
    """Global optimum by depth-first branch-and-bound.

    Layers are branched in descending ``params * span(bits)`` order. A node
    is pruned when a Lagrangian bound (valid for any nonnegative multipliers;
    the LP duals and a few rescalings are tried) falls below the incumbent by
    more than a rounding margin, or when even the cheapest completion breaks
    a budget. Leaves are scored with :func:`evaluate_assignment`.
    """
    _check_feasible(instance, budget)
    options = [instance.choices(i) for i in range(len(instance.layers))]
    chosen = [o[0] for o in options]
    # pinned layers leave the search; their costs come off the budgets
    free = [i for i, l in enumerate(instance.layers) if l.pinned is None]
    fixed = [i for i, l in enumerate(instance.layers) if l.pinned is not None]
    cap_size = float(budget.size) - sum(instance.layers[i].params * chosen[i] for i in fixed)
    cap_ops = float(budget.bitops) - sum(instance.layers[i].macs * chosen[i] ** 2 for i in fixed)
    acc0 = math.fsum(instance.value(i, chosen[i]) for i in fixed)
    span = max(instance.bits) - min(instance.bits)
    order = sorted(free, key=lambda i: (-instance.layers[i].params * span, i))
    n, k = len(order), len(instance.bits)
    vals = np.zeros((n, k))
    sz = np.zeros((n, k))
    op = np.zeros((n, k))
    for d, i in enumerate(order):
        layer = instance.layers[i]
        for j, b in enumerate(instance.bits):
            vals[d, j] = instance.value(i, b)
            sz[d, j] = layer.params * b
            op[d, j] = layer.macs * b * b
    mults = _dual_multipliers(vals, sz, op, cap_size, cap_ops) if n else [(0.0, 0.0)]
    # suffix[m][d]: sum over depths >= d of the best multiplier-adjusted value
    suffix = []
    for l1, l2 in mults:
        adj = np.max(vals - l1 * sz - l2 * op, axis=1)
        suffix.append(np.concatenate([np.cumsum(adj[::-1])[::-1], [0.0]]))
    min_size = np.concatenate([np.cumsum(sz.min(axis=1)[::-1])[::-1], [0.0]])
    min_ops = np.concatenate([np.cumsum(op.min(axis=1)[::-1])[::-1], [0.0]])
    margin = 1e-9 * (1.0 + float(np.sum(np.abs(vals))) + abs(acc0))

    # try the most promising choice first at each depth
    l1, l2 = mults[1] if len(mults) > 1 else mults[0]
    tries = [sorted(range(k), key=lambda j, d=d: -(vals[d, j] - l1 * sz[d, j] - l2 * op[d, j]))
             for d in range(n)]

    best: dict = {"phi": -math.inf, "bits": None}

    def bound(d: int, acc: float, rem_size: float, rem_ops: float) -> float:
        ub = math.inf
        for m, (a, b) in enumerate(mults):
            ub = min(ub, acc + suffix[m][d] + a * rem_size + b * rem_ops)
        return ub

    def visit(d: int, acc: float, rem_size: float, rem_ops: float) -> None:
        if d == n:
            bits = tuple(chosen)
            phi = evaluate_assignment(instance, bits)[0]
            if phi > best["phi"] or (phi == best["phi"] and bits < best["bits"]):
                best["phi"], best["bits"] = phi, bits
            return
        if min_size[d] > rem_size or min_ops[d] > rem_ops:
            return
        if bound(d, acc, rem_size, rem_ops) < best["phi"] - margin:
            return
        i = order[d]
        for j in tries[d]:
            s, o = sz[d, j], op[d, j]
            if s > rem_size or o > rem_ops:
                continue
            chosen[i] = instance.bits[j]
            visit(d + 1, acc + vals[d, j], rem_size - s, rem_ops - o)

    visit(0, acc0, cap_size, cap_ops)
    return _assignment(instance, best["bits"])


def instance_from_scores(registry, importance: Mapping, sensitivity: Mapping | None,
                         bits: Sequence[int], pins: Mapping | None = None,
                         mode: LambdaMode = LambdaMode.VERBATIM) -> AllocationInstance:
    """Build an instance from a layer registry and score tables.

    ``importance`` maps layer ids to omega; ``sensitivity`` maps
    ``(kind, bit)`` to lambda and may be ``None`` (importance-only ablation).
    ``pins`` maps layer ids to fixed widths.
    """
    pins = {str(k): int(v) for k, v in (pins or {}).items()}
    layers = []
    for info in registry:
        name = str(info.layer)
        layers.append(AllocLayer(name, info.layer.kind.value, info.params, info.macs,
                                 float(importance[info.layer]), pins.get(name)))
    unknown = set(pins) - {l.name for l in layers}
    if unknown:
        raise KeyError(f"pinned layers not in registry: {sorted(unknown)}")
    lam = {}
    for (kind, b), v in (sensitivity or {}).items():
        lam[(getattr(kind, "value", kind), int(b))] = float(v)
    return AllocationInstance(layers, tuple(bits), lam, mode)


def assignment_csv(assignment: BitAssignment, num_blocks: int) -> str:
    """Block x kind matrix of chosen widths; outer layers get their own rows."""
    chosen = assignment.as_dict()
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["block"] + [k.value for k in BLOCK_KINDS])
    for l in range(num_blocks):
        wr.writerow([l] + [chosen.get(str(LayerId(l, k)), "") for k in BLOCK_KINDS])
    for name in ("PatchEmbed", "Head"):
        if name in chosen:
            wr.writerow([name, chosen[name]] + [""] * (len(BLOCK_KINDS) - 1))
    return buf.getvalue()


def all_assignments(instance: AllocationInstance):
    """Every bit vector in lexicographic order (small instances only)."""
    return itertools.product(*(instance.choices(i) for i in range(len(instance.layers))))
