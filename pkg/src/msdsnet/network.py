"""Multi-scale deeply supervised network with downscale-upscale fusion."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .stage import ConvBlock, MSDSStage, conv_bn_relu

VARIANTS = ("full", "upscale_only", "downscale_only", "no_deep_supervision")
VARIANT_ALIASES = {"no_ds": "no_deep_supervision"}
HEAD_INIT_STD = 1e-3

DEFAULT_STRIDES = ((1, 1), (2, 2), (4, 4), (8, 8), (16, 16))
DEFAULT_CHANNELS = (16, 32, 32, 64, 64)


@dataclass
class NetworkConfig:
    num_stages: int = 3
    num_scales: int = 5
    strides: tuple = DEFAULT_STRIDES
    channels_per_scale: tuple = DEFAULT_CHANNELS
    num_keypoints: int = 21
    supervised_scales: tuple = (1, 2, 3)
    variant: str = "full"
    deep_supervision: bool = True
    input_h: int = 64
    input_w: int = 64
    in_channels: int = 3

    def __post_init__(self):
        self.variant = VARIANT_ALIASES.get(self.variant, self.variant)
        self.strides = tuple(tuple(int(v) for v in s) for s in self.strides)
        self.channels_per_scale = tuple(int(c) for c in self.channels_per_scale)
        self.supervised_scales = tuple(sorted(int(s) for s in self.supervised_scales))
        self.validate()

    @classmethod
    def small(cls, num_scales=3, **overrides):
        """First ``num_scales`` entries of the default stride and width tables."""
        kw = dict(
            num_scales=num_scales,
            strides=DEFAULT_STRIDES[:num_scales],
            channels_per_scale=DEFAULT_CHANNELS[:num_scales],
            supervised_scales=tuple(s for s in (1, 2, 3) if s <= num_scales),
        )
        kw.update(overrides)
        return cls(**kw)

    def validate(self):
        if self.num_stages < 1 or self.num_scales < 1:
            raise ValueError(f"need at least one stage and one scale, got M={self.num_stages}, S={self.num_scales}")
        if self.num_keypoints < 1:
            raise ValueError("num_keypoints must be >= 1")
        if len(self.strides) != self.num_scales or len(self.channels_per_scale) != self.num_scales:
            raise ValueError("strides and channels_per_scale need one entry per scale")
        if any(c < 1 for c in self.channels_per_scale):
            raise ValueError("channel widths must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not set(self.supervised_scales) <= set(range(1, self.num_scales + 1)):
            raise ValueError(f"supervised_scales {self.supervised_scales} outside 1..{self.num_scales}")
        if self.strides[0] != (1, 1):
            raise ValueError("scale 1 must have stride (1, 1); the final head reads it at full resolution")
        for (py, px), (sy, sx) in zip(self.strides, self.strides[1:]):
            if sy % py or sx % px or sy < py or sx < px:
                raise ValueError(f"stride {(sy, sx)} is not an integer multiple of {(py, px)}")
        sy, sx = self.strides[-1]
        if self.input_h % sy or self.input_w % sx:
            raise ValueError(
                f"input {self.input_h}x{self.input_w} not divisible by largest stride {(sy, sx)}"
            )

    @property
    def supervised(self) -> bool:
        return self.deep_supervision and self.variant != "no_deep_supervision"

    @property
    def fuse_down(self) -> bool:
        return self.variant != "upscale_only"

    @property
    def fuse_up(self) -> bool:
        return self.variant != "downscale_only"

    def scale_shape(self, s: int):
        sy, sx = self.strides[s - 1]
        return self.input_h // sy, self.input_w // sx

    def to_dict(self):
        d = asdict(self)
        d["strides"] = [list(s) for s in self.strides]
        d["channels_per_scale"] = list(self.channels_per_scale)
        d["supervised_scales"] = list(self.supervised_scales)
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class NetworkOutput:
    final_heatmap: torch.Tensor
    ds_outputs: dict = field(default_factory=dict)   # (s, m) -> (B, K, h, w)
    attentions: dict = field(default_factory=dict)   # (s, m) -> (B, h, w)
    trace: dict | None = None


class DownFusion(nn.Module):
    """X_s <- fuse([X_s, conv_down(X_{s-1})])."""

    def __init__(self, c_prev, c, ratio):
        super().__init__()
        kernel = tuple(3 if r > 1 else 1 for r in ratio)
        self.conv_down = nn.Sequential(
            nn.Conv2d(c_prev, c, kernel, stride=ratio, padding=tuple(k // 2 for k in kernel)),
            nn.BatchNorm2d(c),
            nn.ReLU(),
        )
        self.fuse = nn.Conv2d(2 * c, c, kernel_size=1)

    def forward(self, x, x_prev):
        return self.fuse(torch.cat([x, self.conv_down(x_prev)], dim=1))


class UpFusion(nn.Module):
    """Q_s <- fuse([Q_s, conv_up(Q_{s+1})]), conv_up = bilinear resize + 1x1 conv."""

    def __init__(self, c_next, c):
        super().__init__()
        self.conv_up = nn.Conv2d(c_next, c, kernel_size=1)
        self.fuse = nn.Conv2d(2 * c, c, kernel_size=1)

    def forward(self, q, q_next):
        up = q_next
        if up.shape[-2:] != q.shape[-2:]:
            up = F.interpolate(up, size=q.shape[-2:], mode="bilinear", align_corners=True)
        return self.fuse(torch.cat([q, self.conv_up(up)], dim=1))


class MSDSNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        S, M, K = cfg.num_scales, cfg.num_stages, cfg.num_keypoints
        ch = cfg.channels_per_scale
        self.stems = nn.ModuleList(
            conv_bn_relu(cfg.in_channels, ch[s], 3, stride=cfg.strides[s]) for s in range(S)
        )
        self.entry = nn.ModuleList(ConvBlock(ch[s], ch[s], num_layers=3) for s in range(S))
        self.stages = nn.ModuleList(
            nn.ModuleList(
                MSDSStage(ch[s], ch[s], K, attention=cfg.supervised and (s + 1) in cfg.supervised_scales)
                for s in range(S)
            )
            for _ in range(M)
        )
        ratios = [
            (b[0] // a[0], b[1] // a[1]) for a, b in zip(cfg.strides, cfg.strides[1:])
        ]
        if cfg.fuse_down and S > 1:
            self.down = nn.ModuleList(
                nn.ModuleList(DownFusion(ch[s - 1], ch[s], ratios[s - 1]) for s in range(1, S))
                for _ in range(M)
            )
        if cfg.fuse_up and S > 1:
            self.up = nn.ModuleList(
                nn.ModuleList(UpFusion(ch[s + 1], ch[s]) for s in range(S - 1))
                for _ in range(M)
            )
        self.head = nn.Conv2d(ch[0], K, kernel_size=1)
        self.reset_output_heads()

    def reset_output_heads(self, std=HEAD_INIT_STD):
        """Near-zero init of every heatmap-producing 1x1 conv.

        Predictions then start close to the empty heatmap instead of O(1)
        noise, which at small learning rates otherwise takes most of
        training to shrink away.
        """
        heads = [self.head] + [st.conv_ds[-1] for row in self.stages for st in row if st.has_attention]
        for conv in heads:
            nn.init.normal_(conv.weight, std=std)
            nn.init.zeros_(conv.bias)

    def pyramid(self, image):
        cfg = self.cfg
        if image.dim() != 4 or image.shape[1] != cfg.in_channels:
            raise ValueError(f"expected (B, {cfg.in_channels}, H, W) image, got {tuple(image.shape)}")
        if tuple(image.shape[-2:]) != (cfg.input_h, cfg.input_w):
            raise ValueError(
                f"image is {image.shape[-2]}x{image.shape[-1]}, network expects {cfg.input_h}x{cfg.input_w}"
            )
        return [stem(image) for stem in self.stems]

    def forward(self, image, trace=False) -> NetworkOutput:
        cfg = self.cfg
        S = cfg.num_scales
        x0 = self.pyramid(image)
        x = [blk(f) for blk, f in zip(self.entry, x0)]
        out = NetworkOutput(final_heatmap=None, trace={"x0": x0, "x1": list(x)} if trace else None)

        for m in range(cfg.num_stages):
            if cfg.fuse_down:
                for s in range(1, S):
                    x[s] = self.down[m][s - 1](x[s], x[s - 1])
            if trace:
                out.trace[("x", m + 1)] = list(x)
            q = [None] * S
            for s in reversed(range(S)):
                q[s] = self.stages[m][s].transform(x[s])
                if cfg.fuse_up and s < S - 1:
                    q[s] = self.up[m][s](q[s], q[s + 1])
            for s in range(S):
                res = self.stages[m][s].attend(q[s], x0[s])
                x[s] = res.x_next
                if res.z is not None:
                    out.ds_outputs[(s + 1, m + 1)] = res.z
                    out.attentions[(s + 1, m + 1)] = res.attention
            if trace:
                out.trace[("q", m + 1)] = list(q)
                out.trace[("x_next", m + 1)] = list(x)

        out.final_heatmap = self.head(x[0])
        return out


def build_pyramid(net: MSDSNet, image):
    """Initial feature maps X^(s,0), one per scale."""
    return net.pyramid(image)


def network_forward(net: MSDSNet, image, train_mode=False, trace=False) -> NetworkOutput:
    net.train(train_mode)
    return net(image, trace=trace)


def network_backward(net: MSDSNet, loss: torch.Tensor):
    """Gradients of scalar ``loss`` w.r.t. every named parameter (zeros where unreachable)."""
    if loss.grad_fn is None:
        raise RuntimeError("no cached forward graph; compute the loss with grad enabled")
    names, params = zip(*net.named_parameters())
    grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)}


def count_parameters(cfg_or_net) -> int:
    net = cfg_or_net if isinstance(cfg_or_net, nn.Module) else MSDSNet(cfg_or_net)
    return sum(p.numel() for p in net.parameters())
