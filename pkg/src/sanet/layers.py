"""Small shared helpers for dense layers and MLP stacks."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore


def init_dense(store: ParamStore, name: str, rng: np.random.Generator,
               fan_in: int, fan_out: int) -> None:
    store.add(f"{name}/w", rng.normal(0.0, 1.0 / np.sqrt(fan_in),
                                      (fan_in, fan_out)))
    # small nonzero biases keep all-zero input rows (duplicate-padded
    # groups) off the relu kink, where gradients are undefined
    store.add(f"{name}/b", rng.normal(0.0, 0.01, fan_out))


def dense(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return ad.linear(x, store[f"{name}/w"], store[f"{name}/b"])


def init_mlp(store: ParamStore, prefix: str, rng: np.random.Generator,
             fan_in: int, widths) -> None:
    for i, w in enumerate(widths):
        init_dense(store, f"{prefix}/l{i}", rng, fan_in, w)
        fan_in = w


def apply_mlp(x: Tensor, store: ParamStore, prefix: str, n_layers: int,
              relu_last=True) -> Tensor:
    """Shared per-row MLP: dense + relu stack over the rows of a 2-D tensor."""
    for i in range(n_layers):
        x = dense(x, store, f"{prefix}/l{i}")
        if relu_last or i + 1 < n_layers:
            # the dense output has no other consumer, so relu may reuse it
            x = ad.relu(x, consume=True)
    return x
