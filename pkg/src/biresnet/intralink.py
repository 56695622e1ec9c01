"""Intra-linked ReLU activation.

Units along the neuron axis are split into consecutive groups of ``n + 1``.
Inside a group the highest-index unit is a plain ReLU unit; every lower unit
adds the activated pre-activation of its successor before activating:

    g'[n] = g[n]
    g'[j] = g[j] + relu(g'[j + 1])      for j = n-1 .. 0
    x[j]  = relu(g'[j])

Channels left over when the axis length is not a multiple of ``n + 1`` stay
plain. For conv activations ``[B, C, T]`` the neuron axis is the channel axis
and the chain runs independently at every (batch, time) position.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nncore import Module, UsageError


@dataclass(frozen=True)
class IntraLinkConfig:
    n: int = 1
    axis: int = 1

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("intra-link n must be non-negative")

    @property
    def group_size(self) -> int:
        return self.n + 1


def _grouped_view(a: np.ndarray, cfg: IntraLinkConfig):
    """View of the linked prefix as ``[pre, groups, n+1, post]``."""
    m = a.shape[cfg.axis]
    gs = cfg.group_size
    linked = (m // gs) * gs
    pre = int(np.prod(a.shape[:cfg.axis]))
    post = int(np.prod(a.shape[cfg.axis + 1:]))
    flat = a.reshape(pre, m, post)
    return flat, flat[:, :linked].reshape(pre, linked // gs, gs, post), linked


def intralink_forward(g: np.ndarray, cfg: IntraLinkConfig):
    """Return ``(x, cache)``; ``cache`` holds the chained pre-activations."""
    axis = cfg.axis if cfg.axis >= 0 else g.ndim + cfg.axis
    cfg = IntraLinkConfig(cfg.n, axis)
    if cfg.n == 0:
        return np.maximum(g, 0), (g, cfg)
    if cfg.group_size > g.shape[axis]:
        raise ValueError(
            f"intra-link group of {cfg.group_size} units exceeds axis length {g.shape[axis]}"
        )
    gp = np.array(g, copy=True)
    _, groups, _ = _grouped_view(gp, cfg)
    for j in range(cfg.n - 1, -1, -1):
        groups[:, :, j] += np.maximum(groups[:, :, j + 1], 0)
    return np.maximum(gp, 0), (gp, cfg)


def intralink_backward(cache, dx: np.ndarray) -> np.ndarray:
    if cache is None:
        raise UsageError("intralink_backward called before intralink_forward")
    gp, cfg = cache
    active = gp > 0
    dg = dx * active
    if cfg.n == 0:
        return dg
    _, groups, _ = _grouped_view(dg, cfg)
    _, act, _ = _grouped_view(active, cfg)
    # dL/dg'[j+1] also flows through relu(g'[j+1]) into g'[j]
    for j in range(cfg.n):
        groups[:, :, j + 1] += groups[:, :, j] * act[:, :, j + 1]
    return dg


def param_count_delta(cfg: IntraLinkConfig) -> int:
    """Trainable parameters added by intra-linking: always zero."""
    return 0


class IntraLinkReLU(Module):
    def __init__(self, n: int = 1, axis: int = 1, name: str = "intralink"):
        self.name = name
        self.cfg = IntraLinkConfig(n, axis)
        self._cache = None

    def forward(self, x, training=False):
        y, self._cache = intralink_forward(x, self.cfg)
        return y

    def backward(self, dy):
        return intralink_backward(self._cache, dy)
