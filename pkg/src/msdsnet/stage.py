"""One deeply supervised stage with a channel-sum spatial attention gate.

    Q = conv_X(X)
    Z = conv_ds([conv_Q(Q), X0])
    X_next = sigmoid(sum_c Z) * Q
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_bn_relu(in_channels, out_channels, kernel_size=3, stride=1):
    if kernel_size % 2 == 0:
        raise ValueError("kernel size must be odd to keep 'same' padding")
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2),
        nn.BatchNorm2d(out_channels, eps=BN_EPS, momentum=BN_MOMENTUM),
        nn.ReLU(inplace=False),
    )


class ConvBlock(nn.Sequential):
    """``num_layers`` x (3x3 conv, batch norm, ReLU), stride 1."""

    def __init__(self, in_channels, out_channels, num_layers=3):
        layers = [conv_bn_relu(in_channels, out_channels)]
        layers += [conv_bn_relu(out_channels, out_channels) for _ in range(num_layers - 1)]
        super().__init__(*layers)


def spatial_attention(z: torch.Tensor) -> torch.Tensor:
    """(B, K, H, W) supervised features -> (B, H, W) gate in (0, 1)."""
    return torch.sigmoid(z.sum(dim=1))


def gate(attention: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    return attention.unsqueeze(1) * q


@dataclass
class StageOutput:
    q: torch.Tensor
    z: torch.Tensor | None
    attention: torch.Tensor | None
    x_next: torch.Tensor


class MSDSStage(nn.Module):
    """Transform, supervise, attend and gate at a single scale.

    With ``attention=False`` the stage reduces to ``X_next = conv_X(X)`` and
    owns no supervision branch (used by the no-deep-supervision ablation and
    by unsupervised scales).
    """

    def __init__(self, channels, skip_channels, num_keypoints, attention=True):
        super().__init__()
        self.channels = channels
        self.skip_channels = skip_channels
        self.num_keypoints = num_keypoints
        self.has_attention = attention
        self.conv_x = ConvBlock(channels, channels, num_layers=3)
        if attention:
            self.conv_q = conv_bn_relu(channels, channels)
            self.conv_ds = nn.Sequential(
                conv_bn_relu(channels + skip_channels, channels),
                nn.Conv2d(channels, num_keypoints, kernel_size=1),
            )

    def transform(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"stage expects {self.channels} channels, got {x.shape[1]}")
        return self.conv_x(x)

    def supervise(self, q, x0_skip):
        if q.shape[0] != x0_skip.shape[0] or q.shape[-2:] != x0_skip.shape[-2:]:
            raise ValueError(
                f"feature map {tuple(q.shape)} and skip map {tuple(x0_skip.shape)} "
                "must share batch size and spatial dims"
            )
        if x0_skip.shape[1] != self.skip_channels:
            raise ValueError(f"skip map must have {self.skip_channels} channels, got {x0_skip.shape[1]}")
        return self.conv_ds(torch.cat([self.conv_q(q), x0_skip], dim=1))

    def attend(self, q, x0_skip) -> StageOutput:
        if not self.has_attention:
            return StageOutput(q=q, z=None, attention=None, x_next=q)
        z = self.supervise(q, x0_skip)
        a = spatial_attention(z)
        return StageOutput(q=q, z=z, attention=a, x_next=gate(a, q))

    def forward(self, x, x0_skip) -> StageOutput:
        return self.attend(self.transform(x), x0_skip)


def stage_forward(stage: MSDSStage, x, x0_skip, train_mode=True) -> StageOutput:
    """Run ``stage`` with batch-norm in batch-statistics (train) or running-statistics mode."""
    stage.train(train_mode)
    return stage(x, x0_skip)


def stage_backward(stage: MSDSStage, x, x0_skip, out: StageOutput, grad_x_next, grad_z=None):
    """Reverse-mode gradients of ``<grad_x_next, x_next> + <grad_z, z>``.

    Returns ``(grad_x, grad_x0_skip, {param_name: grad})``. ``x`` and
    ``x0_skip`` must have been created with ``requires_grad=True`` before the
    forward pass whose outputs are in ``out``.
    """
    if out.x_next.grad_fn is None:
        raise RuntimeError("no cached forward graph; run stage_forward with grad enabled")
    outputs, grads = [out.x_next], [grad_x_next]
    if grad_z is not None:
        if out.z is None:
            raise ValueError("stage has no supervised output to receive a gradient")
        outputs.append(out.z)
        grads.append(grad_z)
    names, params = zip(*stage.named_parameters())
    inputs = [x, x0_skip, *params]
    result = torch.autograd.grad(outputs, inputs, grads, retain_graph=True, allow_unused=True)
    filled = [torch.zeros_like(t) if g is None else g for t, g in zip(inputs, result)]
    return filled[0], filled[1], dict(zip(names, filled[2:]))
