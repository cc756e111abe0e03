"""Adam training loop, validation and evaluation."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import DEFAULT_SIGMA_SQ, decode_batch
from .data import SPLITS, encode_records, load_dataset, scale_shapes, split_dataset
from .losses import LossWeights, composite_loss
from .metrics import MetricsReport, pck, pck_curve
from .network import MSDSNet, NetworkConfig

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    split_seed: int = 0
    checkpoint_every: int = 0
    val_threshold: float = 5.0
    sigma_sq: float = DEFAULT_SIGMA_SQ
    grad_clip: float | None = None
    divergence_limit: float = 1e6
    num_threads: int = 1

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update of the tensors in ``params``."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name!r} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))
    return params, state


# ------------------------------------------------------------------ helpers

def attention_stats(attentions: dict) -> dict:
    """Mean gate value and mean binary entropy (nats) per (scale, stage)."""
    stats = {}
    for (s, m), a in sorted(attentions.items()):
        a = a.detach().double().clamp(1e-12, 1 - 1e-12)
        ent = -(a * a.log() + (1 - a) * (1 - a).log())
        stats[f"{s},{m}"] = (float(a.mean()), float(ent.mean()))
    return stats


@torch.no_grad()
def predict(net: MSDSNet, images: torch.Tensor, batch_size: int = 32) -> np.ndarray:
    """Argmax keypoints (N, K, 2) from final heatmaps, batch-norm in eval mode."""
    net.eval()
    dtype = next(net.parameters()).dtype
    coords = []
    for start in range(0, len(images), batch_size):
        out = net(images[start:start + batch_size].to(dtype))
        coords.append(decode_batch(out.final_heatmap.cpu().numpy()))
    return np.concatenate(coords) if coords else np.zeros((0, net.cfg.num_keypoints, 2))


def _forward_attention(net, images, batch_size=32):
    net.eval()
    acc = {}
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out = net(images[start:start + batch_size])
            for key, a in out.attentions.items():
                acc.setdefault(key, []).append(a)
    return {k: torch.cat(v) for k, v in acc.items()}


def default_loss_fn(out, batch, weights):
    return composite_loss(out.final_heatmap, batch.labels, out.ds_outputs, batch.scale_labels, weights)


@dataclass
class TrainResult:
    net: MSDSNet
    log: list
    best_val_pck: float
    best_epoch: int
    checkpoint_path: Path | None = None
    checkpoint_sha256: str | None = None


def _check_k(net_cfg, records):
    k = records[0].keypoints.num_keypoints
    if k != net_cfg.num_keypoints:
        raise ValueError(f"dataset has {k} keypoints, network config expects {net_cfg.num_keypoints}")


def _subset(batch, idx):
    from .data import Batch

    return Batch(
        images=batch.images[idx],
        labels=batch.labels[idx],
        scale_labels={s: v[idx] for s, v in batch.scale_labels.items()},
        keypoints=batch.keypoints[idx.numpy()],
        visible=batch.visible[idx.numpy()],
        ids=[batch.ids[i] for i in idx.tolist()],
    )


def train(cfg: TrainConfig, net_cfg: NetworkConfig, dataset_root, out_dir=None, loss_fn=None) -> TrainResult:
    """Train on the train split, keep the best-validation-PCK weights.

    With ``out_dir`` set, writes ``train_log.jsonl`` and ``best.ckpt``
    (plus ``last.ckpt`` every ``checkpoint_every`` epochs).
    """
    loss_fn = loss_fn or default_loss_fn
    torch.set_num_threads(cfg.num_threads)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)

    records = load_dataset(dataset_root)
    _check_k(net_cfg, records)
    parts = split_dataset(records, (8, 1, 1), cfg.split_seed)
    size = (net_cfg.input_h, net_cfg.input_w)
    shapes = scale_shapes(net_cfg) if net_cfg.supervised else {}
    train_data = encode_records(parts["train"], size, cfg.sigma_sq, shapes)
    val_data = encode_records(parts["val"], size, cfg.sigma_sq)

    net = MSDSNet(net_cfg)
    params = dict(net.named_parameters())
    state = AdamState()
    meta = {"train_config": cfg.to_dict(), "split_ratios": [8, 1, 1]}

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")

    entries, best = [], (-1.0, 0, None)
    n = len(train_data.images)
    try:
        for epoch in range(1, cfg.epochs + 1):
            net.train()
            perm = torch.randperm(n, generator=gen)
            sums, count = None, 0
            for start in range(0, n, cfg.batch_size):
                batch = _subset(train_data, perm[start:start + cfg.batch_size])
                out = net(batch.images)
                loss = loss_fn(out, batch, cfg.loss_weights)
                total = float(loss.total.detach())
                if not math.isfinite(total) or total > cfg.divergence_limit:
                    raise TrainingDiverged(f"epoch {epoch}: loss {total:.4g} exceeds {cfg.divergence_limit:g}")
                net.zero_grad(set_to_none=True)
                loss.total.backward()
                grads = {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in params.items()}
                if cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(list(grads.values()), cfg.grad_clip)
                adam_step(params, grads, state, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

                b = len(batch.images)
                vals = loss.as_floats()
                if sums is None:
                    sums = {"total_loss": 0.0, "final_term": 0.0, "ds_terms": {k: 0.0 for k in vals["ds_terms"]}}
                sums["total_loss"] += vals["total_loss"] * b
                sums["final_term"] += vals["final_term"] * b
                for k, v in vals["ds_terms"].items():
                    sums["ds_terms"][k] += v * b
                count += b

            val_coords = predict(net, val_data.images)
            val_pck = pck(val_coords, _labels(val_data), cfg.val_threshold)
            attn = attention_stats(_forward_attention(net, val_data.images))
            entry = {
                "epoch": epoch,
                "total_loss": sums["total_loss"] / count,
                "final_term": sums["final_term"] / count,
                "ds_terms": {k: v / count for k, v in sums["ds_terms"].items()},
                "val_pck": val_pck,
                "attention_mean": {k: v[0] for k, v in attn.items()},
                "attention_entropy": {k: v[1] for k, v in attn.items()},
            }
            entries.append(entry)
            log.info("epoch %d loss %.6g final %.6g val_pck@%g %.4f",
                     epoch, entry["total_loss"], entry["final_term"], cfg.val_threshold, val_pck)
            if log_fh is not None:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
            if val_pck > best[0]:
                best = (val_pck, epoch, copy.deepcopy(net.state_dict()))
            if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / "last.ckpt", net, {**meta, "epoch": epoch})
    finally:
        if log_fh is not None:
            log_fh.close()

    net.load_state_dict(best[2])
    net.eval()
    result = TrainResult(net, entries, best[0], best[1])
    if out_dir is not None:
        result.checkpoint_path = out_dir / "best.ckpt"
        result.checkpoint_sha256 = save_checkpoint(
            result.checkpoint_path, net, {**meta, "epoch": best[1], "val_pck": best[0]}
        )
    return result


def _labels(batch):
    from .metrics import as_keypoint_sets

    h, w = batch.images.shape[-2:]
    return as_keypoint_sets(batch.keypoints, w, h, batch.visible)


def evaluate(checkpoint, dataset_root, thresholds=(5, 10, 20), split="test", split_seed=None,
             sigma_sq=DEFAULT_SIGMA_SQ) -> MetricsReport:
    """PCK/MPJPE curve of a checkpoint (path or ``(net, meta)``) on one split.

    ``split`` is one of train/val/test or ``"all"``. The split seed defaults
    to the one recorded at training time.
    """
    net, meta = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    records = load_dataset(dataset_root)
    _check_k(net.cfg, records)
    if split != "all":
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        if split_seed is None:
            split_seed = meta.get("train_config", {}).get("split_seed", 0)
        records = split_dataset(records, (8, 1, 1), split_seed)[split]
    if not records:
        raise ValueError(f"split {split!r} is empty")
    data = encode_records(records, (net.cfg.input_h, net.cfg.input_w), sigma_sq)
    coords = predict(net, data.images)
    return pck_curve(coords, _labels(data), thresholds)
