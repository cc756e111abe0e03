"""Central finite-difference checks of autograd parameter gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


# Gradients below this are treated as zero when forming relative errors, e.g.
# conv biases that feed a batch-statistics batch norm have exactly zero gradient.
ZERO_GRAD = 1e-8


@dataclass
class Probe:
    name: str
    index: int
    analytic: float
    numeric: float
    crosses_kink: bool

    @property
    def rel_error(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric), ZERO_GRAD)
        return abs(self.analytic - self.numeric) / denom


class _ReluSigns:
    """Records the sign pattern of every ReLU input during a forward pass."""

    def __init__(self, module):
        self.signs = []
        self.handles = [m.register_forward_hook(self._hook) for m in module.modules()
                        if isinstance(m, nn.ReLU)]

    def _hook(self, _module, inputs, _output):
        self.signs.append(inputs[0].detach() > 0)

    def take(self):
        out, self.signs = self.signs, []
        return out

    def remove(self):
        for h in self.handles:
            h.remove()


def _differs(a, b):
    return len(a) != len(b) or any(bool((x != y).any()) for x, y in zip(a, b))


def check_parameter_gradients(net: nn.Module, loss_fn, num_probes=50, eps=1e-4, seed=0,
                              skip_kinks=True, max_draws=None):
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    Parameters are drawn uniformly at random (without replacement) over all
    scalar entries. A probe whose two perturbed evaluations put some ReLU input
    on different sides of zero straddles a kink, where a central difference
    does not estimate the derivative; with ``skip_kinks`` such probes are
    returned separately and further draws are made until ``num_probes``
    kink-free probes exist.

    Returns ``(clean_probes, kink_probes)``.
    """
    named = [(n, p) for n, p in net.named_parameters()]
    sizes = np.array([p.numel() for _, p in named])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    order = rng.permutation(total)[: max_draws or total]

    net.zero_grad(set_to_none=True)
    loss_fn().backward()
    grads = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for n, p in named}

    recorder = _ReluSigns(net)
    clean, kinked = [], []
    try:
        with torch.no_grad():
            for flat in order:
                if len(clean) >= num_probes:
                    break
                j = int(np.searchsorted(offsets, flat, side="right") - 1)
                name, p = named[j]
                i = int(flat - offsets[j])
                view = p.view(-1)
                old = view[i].item()
                view[i] = old + eps
                lp = float(loss_fn())
                sp = recorder.take()
                view[i] = old - eps
                lm = float(loss_fn())
                sm = recorder.take()
                view[i] = old
                probe = Probe(name, i, float(grads[name].view(-1)[i]), (lp - lm) / (2 * eps), _differs(sp, sm))
                (kinked if probe.crosses_kink and skip_kinks else clean).append(probe)
    finally:
        recorder.remove()
    return clean, kinked
