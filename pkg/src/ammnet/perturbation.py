"""Fake ground truths for the discriminator.

Two families: geometry-erased grids (occupied voxels dropped to empty) and
semantics-shuffled grids (whole categories partially relabeled to another
category). Both operate on uint8 label grids and an explicit numpy Generator.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .voxel_data import IGNORE

GEOMETRIC = "geometric"
SEMANTIC = "semantic"


@dataclass(frozen=True)
class PerturbConfig:
    pg_range: Tuple[float, float] = (0.1, 0.9)
    ps_range: Tuple[float, float] = (0.1, 0.9)
    kinds: Tuple[str, ...] = ("geo", "sem")
    seed_stream: str = "perturb"

    def __post_init__(self):
        for name in ("pg_range", "ps_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi <= 1:
                raise ValueError(f"{name} must satisfy 0 < low <= high <= 1, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        bad = set(self.kinds) - {"geo", "sem"}
        if bad:
            raise ValueError(f"unknown perturbation kinds {sorted(bad)}")
        object.__setattr__(self, "kinds", tuple(self.kinds))


@dataclass
class PerturbRecord:
    kind: str
    probabilities: List[float] = field(default_factory=list)
    n_selected: int = 0
    n_present: int = 0
    mapping: List[Tuple[int, int]] = field(default_factory=list)
    changed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["mapping"] = [list(p) for p in self.mapping]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def perturb_geometric(labels: np.ndarray, p_geo: float, rng: np.random.Generator):
    """Erase each occupied voxel to empty with probability ``p_geo``.

    Empty and ignored voxels are left alone. One uniform draw per voxel of
    the grid is consumed regardless of its label.
    """
    if not 0.0 <= p_geo <= 1.0:
        raise ValueError(f"p_geo must lie in [0, 1], got {p_geo}")
    labels = np.asarray(labels)
    r = rng.random(labels.shape)
    # strict comparison so p_geo = 0 can never erase (r may be exactly 0.0)
    erase = (labels > 0) & (labels != IGNORE) & (r < p_geo)
    out = np.where(erase, 0, labels).astype(labels.dtype)
    return out, PerturbRecord(GEOMETRIC, [float(p_geo)], changed=int(erase.sum()))


def perturb_semantic(
    labels: np.ndarray,
    num_classes: int,
    rng: np.random.Generator,
    ps_range: Sequence[float] = (0.1, 0.9),
    n_select: Optional[int] = None,
    p_sem: Optional[float] = None,
):
    """Relabel a random subset of the present categories.

    ``n`` categories (uniform in 1..m unless ``n_select`` is given) are picked
    among the m non-empty classes present. Each picked class c_j gets its own
    probability (uniform in ``ps_range`` unless ``p_sem`` fixes it) and a single
    target class c_k != c_j drawn from 1..C; every voxel of c_j moves to c_k
    with that probability. Membership is decided on the input grid, so a
    relabeled voxel is never relabeled twice.
    """
    labels = np.asarray(labels)
    occupied = (labels > 0) & (labels != IGNORE)
    present = np.unique(labels[occupied])
    m = len(present)
    if m < 2:
        return labels.copy(), PerturbRecord(SEMANTIC, n_present=m)
    if num_classes < 2:
        raise ValueError("need at least two classes to remap")
    if present.max() > num_classes:
        raise ValueError(f"label {present.max()} exceeds class count {num_classes}")

    n = int(rng.integers(1, m + 1)) if n_select is None else int(n_select)
    if not 1 <= n <= m:
        raise ValueError(f"n_select must lie in 1..{m}")
    chosen = rng.choice(present, size=n, replace=False)
    lo, hi = ps_range
    r = rng.random(labels.shape)

    out = labels.copy()
    record = PerturbRecord(SEMANTIC, n_selected=n, n_present=m)
    for c in chosen:
        c = int(c)
        p = float(rng.uniform(lo, hi)) if p_sem is None else float(p_sem)
        targets = [k for k in range(1, num_classes + 1) if k != c]
        k = int(targets[int(rng.integers(len(targets)))])
        flip = (labels == c) & (r < p)
        out[flip] = k
        record.probabilities.append(p)
        record.mapping.append((c, k))
        record.changed += int(flip.sum())
    return out, record


def sample_fakes(labels: np.ndarray, num_classes: int, cfg: PerturbConfig, rng: np.random.Generator):
    """Draw fresh probabilities and build the configured fake grids.

    Returns ``{"geo": (grid, record), "sem": (grid, record)}`` restricted to
    ``cfg.kinds``.
    """
    fakes = {}
    if "geo" in cfg.kinds:
        p = float(rng.uniform(*cfg.pg_range))
        fakes["geo"] = perturb_geometric(labels, p, rng)
    if "sem" in cfg.kinds:
        fakes["sem"] = perturb_semantic(labels, num_classes, rng, cfg.ps_range)
    return fakes
