"""Minimax training of the voxel predictor against the voxel discriminator."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import collect_state, load_checkpoint, load_into, save_checkpoint
from .data import SPLITS, Batch, Sample, augment, build_dataset, collate, substream, substream_seed
from .discriminator import DiscConfig, Discriminator, labels_to_simplex
from .generator import Generator, GeneratorConfig
from .losses import adv_losses, ssc_loss
from .metrics import Counts, MetricsReport, count, logits_to_labels
from .perturbation import PerturbConfig, sample_fakes
from .voxel_data import GridSpec, MaskState

log = logging.getLogger(__name__)

# "scored" restricts the 3D loss to VISIBLE and OCCLUDED voxels; labels
# outside the view frustum cannot be inferred from the input.
LOSS_REGIONS = ("scored", "all")
CURVE_FIELDS = ("epoch", "split", "sc_iou", "ssc_miou", "loss_ssc", "loss_g_adv", "loss_d")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr_init: float = 1e-3
    lr_min: float = 1e-7
    weight_decay: float = 0.05
    lambda_2d: float = 0.25
    beta: float = 0.005
    smoothing: float = 0.1
    loss_region: str = "scored"
    fusion_mode: str = "modulation"
    sites: Tuple[str, ...] = ("m1", "m2", "m3")
    m1_variant: str = "full"
    modalities: Tuple[str, ...] = ("rgb", "tsdf")
    adversarial_enabled: bool = True
    literal_gan_loss: bool = False
    perturb_kinds: Tuple[str, ...] = ("geo", "sem")
    pg_range: Tuple[float, float] = (0.1, 0.9)
    ps_range: Tuple[float, float] = (0.1, 0.9)
    augment: bool = True
    seed: int = 0
    n_train: int = 64
    n_val: int = 16
    n_test: int = 16
    channels: int = 16
    dims: Tuple[int, int, int] = (20, 12, 20)
    voxel_size: float = 0.24
    num_classes: int = 11
    ckpt_every: int = 10

    def __post_init__(self):
        for name in ("sites", "modalities", "perturb_kinds", "pg_range", "ps_range", "dims"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.lambda_2d < 0 or self.beta < 0:
            raise ValueError("lambda_2d and beta must be non-negative")
        if self.loss_region not in LOSS_REGIONS:
            raise ValueError(f"loss_region must be one of {LOSS_REGIONS}")
        if not 0 <= self.smoothing < 1:
            raise ValueError("smoothing must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.n_train < 1:
            raise ValueError("need at least one training scene")
        self.perturb_config()
        self.generator_config()

    # -- derived configs --
    def grid(self) -> GridSpec:
        return GridSpec.centered(self.dims, self.voxel_size)

    def perturb_config(self) -> PerturbConfig:
        return PerturbConfig(self.pg_range, self.ps_range, self.perturb_kinds)

    def generator_config(self, seed: int = 0) -> GeneratorConfig:
        return GeneratorConfig(
            channels=self.channels, dims=self.dims, num_classes=self.num_classes,
            fusion_mode=self.fusion_mode, sites=self.sites, m1_variant=self.m1_variant,
            modalities=self.modalities, seed=seed,
        )

    def disc_config(self, seed: int = 0) -> DiscConfig:
        return DiscConfig(num_classes=self.num_classes, dims=self.dims, seed=seed)

    def sizes(self) -> Dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}

    # -- JSON --
    def to_dict(self):
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class CurvePoint:
    epoch: int
    split: str
    sc_iou: float
    ssc_miou: float
    loss_ssc: float
    loss_g_adv: float
    loss_d: float


@dataclass
class StepRecord:
    epoch: int
    step: int
    loss_ssc: float
    loss_g_adv: float
    loss_all: float
    loss_d: float


class TrainingDiverged(RuntimeError):
    def __init__(self, record: StepRecord):
        super().__init__(f"non-finite loss at epoch {record.epoch}, step {record.step}: {record}")
        self.record = record


@dataclass
class TrainResult:
    config: TrainConfig
    generator: Generator
    discriminator: Optional[Discriminator]
    curves: List[CurvePoint] = field(default_factory=list)
    steps: List[StepRecord] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)


def configure_threads():
    n = os.environ.get("AMM_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def cosine_lr(epoch: int, epochs: int, lr_init: float, lr_min: float) -> float:
    """Cosine decay from ``lr_init`` at epoch 0 to ``lr_min`` at the last epoch."""
    if epochs <= 1:
        return lr_init
    return lr_min + (lr_init - lr_min) * 0.5 * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _onehot_stack(grids, num_classes):
    return labels_to_simplex(np.stack(grids), num_classes)


def discriminator_inputs(batch: Batch, num_classes: int, pcfg: PerturbConfig, rng):
    """One-hot real grids and freshly perturbed fakes keyed by kind."""
    real = labels_to_simplex(batch.gt, num_classes)
    fakes = [sample_fakes(g, num_classes, pcfg, rng) for g in batch.gt_np]
    out = {}
    for kind in pcfg.kinds:
        out[kind] = _onehot_stack([f[kind][0] for f in fakes], num_classes)
    return real, out


def loss_mask(batch: Batch, cfg: TrainConfig):
    return batch.mask != MaskState.OUTSIDE if cfg.loss_region == "scored" else None


def train_step(gen, disc, opt_g, opt_d, batch: Batch, cfg: TrainConfig, rng,
               epoch=0, step=0) -> StepRecord:
    """One D update (if adversarial) followed by one G update."""
    gen.train()
    logits3d, logits2d = gen(batch.rgb, batch.tsdf, batch.pix2vox)
    loss_d_val = 0.0
    if disc is not None:
        probs = F.softmax(logits3d, dim=1)
        real, fakes = discriminator_inputs(batch, cfg.num_classes, cfg.perturb_config(), rng)
        disc.requires_grad_(True)
        opt_d.zero_grad(set_to_none=True)
        loss_d, _ = adv_losses(disc.score(real), disc.score(probs.detach()),
                               disc.score(fakes["geo"]) if "geo" in fakes else None,
                               disc.score(fakes["sem"]) if "sem" in fakes else None)
        loss_d.backward()
        opt_d.step()
        loss_d_val = loss_d.item()
        disc.requires_grad_(False)

    opt_g.zero_grad(set_to_none=True)
    loss_ssc = ssc_loss(logits3d, batch.gt, logits2d, batch.labels_2d, cfg.lambda_2d, cfg.smoothing,
                        loss_mask(batch, cfg))
    if disc is not None:
        d_gen = disc.score(probs)
        _, loss_g = adv_losses(d_gen, d_gen, literal=cfg.literal_gan_loss)
        loss_all = loss_ssc + cfg.beta * loss_g
    else:
        loss_g = torch.zeros(())
        loss_all = loss_ssc
    rec = StepRecord(epoch, step, loss_ssc.item(), loss_g.item(), loss_all.item(), loss_d_val)
    if not all(math.isfinite(v) for v in (rec.loss_ssc, rec.loss_g_adv, rec.loss_all, rec.loss_d)):
        raise TrainingDiverged(rec)
    loss_all.backward()
    opt_g.step()
    return rec


@torch.no_grad()
def evaluate_samples(gen, samples: Sequence[Sample], cfg: TrainConfig, disc=None, rng=None,
                     batch_size=8):
    """Dataset-level metrics (counts summed over scenes) and mean losses."""
    gen.eval()
    total = Counts(cfg.num_classes)
    loss_ssc = loss_g = loss_d = 0.0
    n = 0
    for i in range(0, len(samples), batch_size):
        batch = collate(samples[i:i + batch_size])
        logits3d, logits2d = gen(batch.rgb, batch.tsdf, batch.pix2vox)
        preds = logits_to_labels(logits3d)
        for p, g, m in zip(preds, batch.gt_np, batch.mask.numpy()):
            total = total + count(p, g, m, cfg.num_classes)
        b = len(batch)
        loss_ssc += b * float(ssc_loss(logits3d, batch.gt, logits2d, batch.labels_2d,
                                       cfg.lambda_2d, cfg.smoothing, loss_mask(batch, cfg)))
        if disc is not None:
            disc.eval()
            real, fakes = discriminator_inputs(batch, cfg.num_classes, cfg.perturb_config(), rng)
            d_gen = disc.score(F.softmax(logits3d, dim=1))
            ld, lg = adv_losses(disc.score(real), d_gen,
                                disc.score(fakes["geo"]) if "geo" in fakes else None,
                                disc.score(fakes["sem"]) if "sem" in fakes else None,
                                literal=cfg.literal_gan_loss)
            loss_d += b * float(ld)
            loss_g += b * float(lg)
        n += b
    return MetricsReport.from_counts(total), loss_ssc / n, loss_g / n, loss_d / n


def build_models(cfg: TrainConfig):
    gen = Generator(cfg.generator_config(seed=substream_seed(cfg.seed, "init")))
    disc = None
    if cfg.adversarial_enabled:
        disc = Discriminator(cfg.disc_config(seed=substream_seed(cfg.seed, "init-disc")))
    return gen, disc


def checkpoint_meta(cfg: TrainConfig, gen, disc, epoch):
    return {
        "epoch": epoch,
        "train_config": cfg.to_dict(),
        "generator": gen.cfg.to_dict(),
        "discriminator": disc.manifest() if disc is not None else None,
    }


def train(cfg: TrainConfig, dataset=None, out_dir=None, eval_splits=SPLITS, generator=None) -> TrainResult:
    """Run the full schedule. ``dataset`` maps split names to scene lists and
    defaults to the synthetic desk dataset derived from ``cfg.seed``.

    A prebuilt ``generator`` may be passed; only its parameters with
    ``requires_grad`` are optimized.
    """
    configure_threads()
    if dataset is None:
        dataset = build_dataset(cfg.seed, cfg.sizes(), cfg.grid(), cfg.num_classes)
    if not dataset.get("train"):
        raise ValueError("training split is empty")
    samples = {k: [Sample.from_scene(s) for s in v] for k, v in dataset.items()}

    gen, disc = build_models(cfg)
    if generator is not None:
        gen = generator
    trainable = [p for p in gen.parameters() if p.requires_grad]
    opt_g = torch.optim.AdamW(trainable, lr=cfg.lr_init, weight_decay=cfg.weight_decay)
    opt_d = None
    if disc is not None:
        opt_d = torch.optim.AdamW(disc.parameters(), lr=cfg.lr_init, weight_decay=cfg.weight_decay)

    rng_order = substream(cfg.seed, "shuffle")
    rng_aug = substream(cfg.seed, "augment")
    rng_pert = substream(cfg.seed, "perturb")
    result = TrainResult(cfg, gen, disc)
    out = Path(out_dir) if out_dir is not None else None

    train_set = samples["train"]
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min)
        result.lrs.append(lr)
        _set_lr(opt_g, lr)
        if opt_d is not None:
            _set_lr(opt_d, lr)

        order = rng_order.permutation(len(train_set))
        epoch_steps = []
        for step, at in enumerate(range(0, len(order), cfg.batch_size)):
            chosen = [train_set[i] for i in order[at:at + cfg.batch_size]]
            if cfg.augment:
                chosen = [augment(s, rng_aug) for s in chosen]
            rec = train_step(gen, disc, opt_g, opt_d, collate(chosen), cfg, rng_pert, epoch, step)
            epoch_steps.append(rec)
        result.steps.extend(epoch_steps)

        for split in eval_splits:
            if not samples.get(split):
                continue
            rng_eval = substream(cfg.seed, f"eval/{split}/{epoch}")
            report, l_ssc, l_g, l_d = evaluate_samples(gen, samples[split], cfg, disc, rng_eval)
            if split == "train":
                # losses actually optimized during the epoch
                l_ssc = float(np.mean([r.loss_ssc for r in epoch_steps]))
                l_g = float(np.mean([r.loss_g_adv for r in epoch_steps]))
                l_d = float(np.mean([r.loss_d for r in epoch_steps]))
            result.curves.append(CurvePoint(epoch + 1, split, report.sc_iou, report.ssc_miou, l_ssc, l_g, l_d))
        log.info("epoch %d lr %.3g %s", epoch + 1, lr,
                 " ".join(f"{c.split}:miou={c.ssc_miou:.3f}" for c in result.curves if c.epoch == epoch + 1))

        last = epoch + 1 == cfg.epochs
        if out is not None and (last or (cfg.ckpt_every and (epoch + 1) % cfg.ckpt_every == 0)):
            path = out / f"ckpt_epoch{epoch + 1:03d}.ammc"
            modules = {"gen": gen} if disc is None else {"gen": gen, "disc": disc}
            save_checkpoint(path, collect_state(modules), checkpoint_meta(cfg, gen, disc, epoch + 1))
            result.checkpoints.append(path)

    if out is not None:
        write_curves_csv(out / "curves.csv", result.curves)
    return result


# -- curves ------------------------------------------------------------------

def curves_to_csv(curves: Sequence[CurvePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_FIELDS)
    for c in curves:
        w.writerow([c.epoch, c.split] + [repr(float(getattr(c, k))) for k in CURVE_FIELDS[2:]])
    return buf.getvalue()


def write_curves_csv(path, curves: Sequence[CurvePoint]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(curves_to_csv(curves))


def read_curves_csv(path) -> List[CurvePoint]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [CurvePoint(int(r["epoch"]), r["split"], *(float(r[k]) for k in CURVE_FIELDS[2:])) for r in rows]


def load_generator(path) -> Tuple[Generator, dict]:
    """Rebuild the generator stored in an AMMC checkpoint."""
    tensors, meta = load_checkpoint(path)
    gen = Generator(GeneratorConfig.from_dict(meta["generator"]))
    load_into(gen, tensors, "gen")
    return gen, meta
