"""Shared generators for allocator tests."""

import numpy as np

from mixq.allocator import AllocationInstance, AllocLayer, LambdaMode

KIND_NAMES = ("QKV", "FC1", "FC2", "MatMul1", "PostGELU")


def random_instance(rng: np.random.Generator, n_layers: int, bits=(2, 3, 4, 5, 6),
                    lam: bool = True, pin_prob: float = 0.0,
                    mode=LambdaMode.VERBATIM) -> AllocationInstance:
    layers = []
    for i in range(n_layers):
        # the first layer always carries weights so both budgets are positive
        kind = KIND_NAMES[int(rng.integers(3 if i == 0 else len(KIND_NAMES)))]
        weightless = kind in ("MatMul1", "PostGELU")
        pinned = int(rng.choice(bits)) if i and rng.random() < pin_prob else None
        layers.append(AllocLayer(
            f"L{i}", kind,
            0 if weightless else int(rng.integers(1, 500)),
            0 if kind == "PostGELU" else int(rng.integers(1, 2000)),
            float(rng.dirichlet(np.ones(n_layers))[i]),
            pinned,
        ))
    table = {}
    if lam:
        raw = rng.random(len(KIND_NAMES) * len(bits))
        raw /= raw.sum()
        table = {(k, b): float(raw[j * len(bits) + m])
                 for j, k in enumerate(KIND_NAMES) for m, b in enumerate(bits)}
    return AllocationInstance(layers, tuple(bits), table, mode)
