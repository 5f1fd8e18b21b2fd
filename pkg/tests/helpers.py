# tests/helpers.py

import numpy as np


def with_random_biases(params, rng):
    """Same weights, biases drawn from U[-0.5, 0.5] so bias gradients are exercised."""
    return params.rebuild(
        rng.uniform(-0.5, 0.5, size=a.shape) if name.startswith("b") else a
        for _, name, a in params.named_arrays()
    )


def onehot(labels, num_classes):
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out
