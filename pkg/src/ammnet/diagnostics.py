"""Frozen-encoder probing, train/val divergence summaries and the
discriminator learnability check."""
from __future__ import annotations

import dataclasses
from typing import Dict, List, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import CheckpointError, load_checkpoint, load_into
from .data import Sample, build_dataset, substream, substream_seed
from .discriminator import DiscConfig, Discriminator, labels_to_simplex
from .generator import Generator
from .perturbation import PerturbConfig, perturb_geometric, perturb_semantic
from .training import CurvePoint, TrainConfig, configure_threads, evaluate_samples, train
from .voxel_data import DESK_GRID

MODALITIES = ("rgb", "tsdf")


def probe_config(cfg: TrainConfig, modality: str) -> TrainConfig:
    """Single-modality, non-adversarial variant of ``cfg`` (3D loss only)."""
    if modality not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}")
    return dataclasses.replace(cfg, modalities=(modality,), fusion_mode="addition", sites=(),
                               adversarial_enabled=False, lambda_2d=0.0)


def frozen_probe_generator(tensors: Dict[str, torch.Tensor], modality: str, cfg: TrainConfig) -> Generator:
    """Single-modality generator whose encoder is copied from ``tensors``
    (``gen/<modality>.*`` entries) and frozen; the decoder is fresh."""
    pcfg = probe_config(cfg, modality)
    gen = Generator(pcfg.generator_config(seed=substream_seed(cfg.seed, "probe-init")))
    encoder = gen.rgb if modality == "rgb" else gen.tsdf
    head = f"gen/{modality}."
    sub = {"enc/" + k[len(head):]: v for k, v in tensors.items() if k.startswith(head)}
    if not sub:
        raise CheckpointError(f"checkpoint has no {modality} encoder")
    load_into(encoder, sub, "enc")
    encoder.requires_grad_(False)
    return gen


def probe_encoder(tensors, modality: str, dataset, cfg: TrainConfig):
    """Train a fresh decoder on a frozen encoder; returns (test SSC-mIoU, generator).

    ``tensors`` is a checkpoint path or an already loaded tensor dict.
    """
    if not isinstance(tensors, dict):
        tensors, _ = load_checkpoint(tensors)
    gen = frozen_probe_generator(tensors, modality, cfg)
    pcfg = probe_config(cfg, modality)
    train(pcfg, dataset, eval_splits=(), generator=gen)
    report, *_ = evaluate_samples(gen, [Sample.from_scene(s) for s in dataset["test"]], pcfg)
    return report.ssc_miou, gen


def overfit_report(curves: Sequence[CurvePoint]) -> dict:
    """Per-epoch train - val SSC-mIoU gap, its final value and the epoch of
    the validation peak (earliest on ties)."""
    train_pts = {c.epoch: c.ssc_miou for c in curves if c.split == "train"}
    val_pts = {c.epoch: c.ssc_miou for c in curves if c.split == "val"}
    if not train_pts or not val_pts:
        raise ValueError("curves need both train and val splits")
    epochs = sorted(set(train_pts) & set(val_pts))
    gaps = [train_pts[e] - val_pts[e] for e in epochs]
    peak = max(epochs, key=lambda e: (val_pts[e], -e))
    return {
        "epochs": epochs,
        "gaps": gaps,
        "final_gap": gaps[-1],
        "val_peak_epoch": peak,
        "val_peak": val_pts[peak],
    }


def curves_svg(curves: Sequence[CurvePoint], metric: str = "ssc_miou", width=480, height=300) -> str:
    """Minimal SVG line chart of one metric per split."""
    colors = {"train": "#2b8a3e", "val": "#1864ab", "test": "#c92a2a"}
    pad = 40
    series: Dict[str, List] = {}
    for c in curves:
        series.setdefault(c.split, []).append((c.epoch, getattr(c, metric)))
    xs = [e for pts in series.values() for e, _ in pts] or [0, 1]
    ys = [v for pts in series.values() for _, v in pts] or [0, 1]
    x0, x1 = min(xs), max(max(xs), min(xs) + 1)
    y0, y1 = min(0.0, min(ys)), max(max(ys), 1e-9)

    def sx(e):
        return pad + (e - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">epoch</text>',
             f'<text x="8" y="{pad - 10}" font-size="12">{metric} (max {y1:.3f})</text>']
    for i, (split, pts) in enumerate(sorted(series.items())):
        path = " ".join(f"{sx(e):.1f},{sy(v):.1f}" for e, v in pts)
        color = colors.get(split, "#555")
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{path}"/>')
        parts.append(f'<text x="{width - pad - 40}" y="{pad + 14 * i}" font-size="12" fill="{color}">{split}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def perturbed_pairs(scenes, num_classes: int, rng):
    """(real one-hot, fake one-hot) stacks; fakes alternate geometric and
    semantic perturbation with probabilities from the default ranges."""
    pcfg = PerturbConfig()
    real, fake = [], []
    for i, s in enumerate(scenes):
        gt = np.asarray(s.gt)
        real.append(gt)
        if i % 2 == 0:
            fake.append(perturb_geometric(gt, float(rng.uniform(*pcfg.pg_range)), rng)[0])
        else:
            fake.append(perturb_semantic(gt, num_classes, rng, pcfg.ps_range)[0])
    return labels_to_simplex(np.stack(real), num_classes), labels_to_simplex(np.stack(fake), num_classes)


def disc_learnability(seed: int = 0, steps: int = 200, n_train: int = 64, n_test: int = 16,
                      batch_size: int = 16, lr: float = 1e-3, grid=None, num_classes: int = 11):
    """Train a fresh discriminator alone to tell ground truth from perturbed
    ground truth; returns (held-out accuracy, per-step losses)."""
    configure_threads()
    grid = grid or DESK_GRID
    ds = build_dataset(seed, {"train": n_train, "test": n_test}, grid, num_classes)
    rng = substream(seed, "perturb")
    tr_real, tr_fake = perturbed_pairs(ds["train"], num_classes, rng)
    te_real, te_fake = perturbed_pairs(ds["test"], num_classes, rng)
    x = torch.cat([tr_real, tr_fake])
    y = torch.cat([torch.ones(n_train), torch.zeros(n_train)])

    disc = Discriminator(DiscConfig(num_classes=num_classes, dims=grid.dims,
                                    seed=substream_seed(seed, "init-disc")))
    opt = torch.optim.AdamW(disc.parameters(), lr=lr, weight_decay=0.05)
    order_rng = substream(seed, "shuffle")
    losses, order, at = [], np.empty(0, dtype=np.int64), 0
    for _ in range(steps):
        if at + batch_size > len(order):
            order, at = order_rng.permutation(len(x)), 0
        idx = torch.from_numpy(order[at:at + batch_size])
        at += batch_size
        loss = F.binary_cross_entropy_with_logits(disc(x[idx]), y[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    with torch.no_grad():
        correct = int((disc(te_real) > 0).sum()) + int((disc(te_fake) <= 0).sum())
    return correct / (2 * n_test), losses
