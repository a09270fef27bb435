#!/usr/bin/env python3
"""
Compare analytic and finite-difference gradients of every layer kind and loss
"""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

try:
    import numpy as np
except ImportError as e:
    print(f"ERROR: {e}")
    sys.exit(1)

from orewatch_nn import (BatchNorm, Conv1d, Dense, ReLU, check_layer_gradients,
                         cosine_sa_loss, numeric_gradient, relative_error,
                         softmax_cross_entropy)

TOLERANCE = 1e-4
INSTANCES = int(sys.argv[1]) if len(sys.argv) > 1 else 20


def layer_cases(rng):
    yield "dense", Dense(6, 4, rng=rng, dtype=np.float64), rng.standard_normal((5, 6))
    yield "conv1d", Conv1d(3, 2, 3, rng=rng, dtype=np.float64), rng.standard_normal((4, 2, 9))
    yield "conv1d stride 2", Conv1d(3, 2, 2, stride=2, rng=rng, dtype=np.float64), rng.standard_normal((3, 2, 10))
    bn = BatchNorm(3, dtype=np.float64)
    bn.gamma[...] = rng.uniform(0.5, 1.5, 3)
    bn.beta[...] = rng.standard_normal(3)
    yield "batchnorm", bn, rng.standard_normal((6, 3, 4))
    # keep inputs away from the kink at zero
    x = rng.standard_normal((4, 7))
    yield "relu", ReLU(), np.where(np.abs(x) < 0.05, 0.5, x)


def loss_errors(rng):
    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, 5)
    _, grad = softmax_cross_entropy(logits, labels)
    numeric = numeric_gradient(lambda: softmax_cross_entropy(logits, labels)[0], logits)
    yield "softmax-ce", relative_error(grad, numeric)

    output = rng.standard_normal((5, 8))
    target = rng.standard_normal((5, 8))
    _, grad = cosine_sa_loss(output, target)
    numeric = numeric_gradient(lambda: cosine_sa_loss(output, target)[0], output)
    yield "cosine-sa", relative_error(grad, numeric)


worst = {}
for seed in range(INSTANCES):
    rng = np.random.default_rng(seed)
    for name, layer, x in layer_cases(rng):
        errors = check_layer_gradients(layer, x, rng)
        worst[name] = max(worst.get(name, 0.0), max(errors.values()))
    for name, error in loss_errors(rng):
        worst[name] = max(worst.get(name, 0.0), error)

print(f"Gradient check over {INSTANCES} seeded instances (tolerance {TOLERANCE:g})")
print("=" * 70)
failed = False
for name, error in worst.items():
    mark = "✓" if error < TOLERANCE else "✗"
    failed |= error >= TOLERANCE
    print(f"{mark} {name:<18} max relative error {error:.2e}")

sys.exit(1 if failed else 0)
