import numpy as np
import pytest
import torch

from msdsnet.codec import resize_array
from msdsnet.network import NetworkConfig


def tiny_config(**overrides):
    kw = dict(num_stages=2, num_scales=2, strides=((1, 1), (2, 2)), channels_per_scale=(4, 4),
              num_keypoints=2, supervised_scales=(1, 2), input_h=8, input_w=8)
    kw.update(overrides)
    return NetworkConfig(**kw)


def random_inputs(cfg, batch=2, seed=0, dtype=torch.float64):
    """Random image, full-resolution label and per-scale labels for ``cfg``."""
    g = torch.Generator().manual_seed(seed)
    image = torch.rand(batch, cfg.in_channels, cfg.input_h, cfg.input_w, generator=g, dtype=dtype)
    label = torch.rand(batch, cfg.num_keypoints, cfg.input_h, cfg.input_w, generator=g, dtype=dtype)
    scaled = {s: torch.from_numpy(resize_array(label.numpy(), *cfg.scale_shape(s))).to(dtype)
              for s in cfg.supervised_scales}
    return image, label, scaled


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


_ACCEPTANCE = {}


def record_acceptance(number, title, ok, detail):
    _ACCEPTANCE[number] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail}")
