"""Final-plus-deep-supervision training loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    alpha: float = 0.1
    beta: list | None = None    # per stage, defaults to 1
    gamma: list | None = None   # per scale, defaults to 1

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        for name in ("beta", "gamma"):
            vals = getattr(self, name)
            if vals is not None and any(v < 0 for v in vals):
                raise ValueError(f"{name} weights must be >= 0")

    def stage_weight(self, m: int) -> float:
        return 1.0 if self.beta is None else float(self.beta[m - 1])

    def scale_weight(self, s: int) -> float:
        return 1.0 if self.gamma is None else float(self.gamma[s - 1])


@dataclass
class LossBreakdown:
    total: torch.Tensor
    final_term: torch.Tensor
    ds_terms: dict = field(default_factory=dict)  # (s, m) -> scalar tensor

    def as_floats(self):
        return {
            "total_loss": float(self.total.detach()),
            "final_term": float(self.final_term.detach()),
            "ds_terms": {f"{s},{m}": float(v.detach()) for (s, m), v in sorted(self.ds_terms.items())},
        }


def _mse(pred, label, what):
    if pred.shape != label.shape:
        raise ValueError(f"{what}: prediction {tuple(pred.shape)} vs label {tuple(label.shape)}")
    return F.mse_loss(pred, label, reduction="mean")


def composite_loss(final_pred, final_label, ds_preds, ds_labels, weights: LossWeights | None = None) -> LossBreakdown:
    """MSE(final) + alpha * sum_m beta_m * sum_s gamma_s * MSE(ds[s, m]).

    ``ds_preds`` maps (scale, stage) to predictions, ``ds_labels`` maps scale
    to the label resized for that scale.
    """
    w = weights or LossWeights()
    final = _mse(final_pred, final_label, "final heatmap")
    terms = {}
    for (s, m), pred in ds_preds.items():
        if s not in ds_labels:
            raise KeyError(f"no deep-supervision label for scale {s}")
        terms[(s, m)] = _mse(pred, ds_labels[s], f"deep supervision (s={s}, m={m})")

    stages = sorted({m for _, m in terms})
    ds_sum = final.new_zeros(())
    for m in stages:
        inner = sum(w.scale_weight(s) * terms[(s, mm)] for (s, mm) in sorted(terms) if mm == m)
        ds_sum = ds_sum + w.stage_weight(m) * inner
    total = final + w.alpha * ds_sum if terms and w.alpha != 0 else final
    return LossBreakdown(total=total, final_term=final, ds_terms=terms)
