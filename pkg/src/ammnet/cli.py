"""Command-line entry point: ``python3 -m ammnet <command> [flags]``.

Every command writes its artifacts under ``--out`` together with a
``manifest.json`` holding the command, the full config and the seed. Passing
that manifest back through ``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .voxel_data import gen_synthetic_scene

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

TRAIN_PRESETS = {
    "baseline": dict(fusion_mode="addition", sites=(), adversarial_enabled=False),
    "ammnet": dict(),
    "ammnet-noadv": dict(adversarial_enabled=False),
    "ammnet-nomod": dict(fusion_mode="addition", sites=(), adversarial_enabled=True),
}

_NOMOD = dict(fusion_mode="addition", sites=())

# One entry per table row / sweep point; values are TrainConfig overrides.
ABLATION_ROWS = {
    # components
    "t3-baseline": dict(_NOMOD, adversarial_enabled=False),
    "t3-mod": dict(adversarial_enabled=False),
    "t3-adv": dict(_NOMOD, adversarial_enabled=True),
    "t3-full": dict(),
    # progressive modulation sites, without and with adversarial training
    "t4-m1-noadv": dict(sites=("m1",), adversarial_enabled=False),
    "t4-m1m3-noadv": dict(sites=("m1", "m3"), adversarial_enabled=False),
    "t4-m1m2m3-noadv": dict(adversarial_enabled=False),
    "t4-m1-adv": dict(sites=("m1",)),
    "t4-m1m3-adv": dict(sites=("m1", "m3")),
    "t4-m1m2m3-adv": dict(),
    # the two effects of the first modulation, single site, no adversarial
    "t5-fusion-only": dict(sites=("m1",), m1_variant="forward_only", adversarial_enabled=False),
    "t5-grad-only": dict(sites=("m1",), m1_variant="grad_only", adversarial_enabled=False),
    "t5-both": dict(sites=("m1",), m1_variant="full", adversarial_enabled=False),
    # which fakes the discriminator sees, no modulation
    "t6-none": dict(_NOMOD, perturb_kinds=()),
    "t6-geo": dict(_NOMOD, perturb_kinds=("geo",)),
    "t6-sem": dict(_NOMOD, perturb_kinds=("sem",)),
    "t6-both": dict(_NOMOD),
}
for _b in (0.0005, 0.001, 0.005, 0.01, 0.05):
    ABLATION_ROWS[f"sweep-beta-{_b:g}"] = dict(beta=_b)
for _p in (0.1, 0.3, 0.5, 0.7, 0.9):
    ABLATION_ROWS[f"sweep-pg-{_p:g}"] = dict(_NOMOD, pg_range=(_p, _p))
    ABLATION_ROWS[f"sweep-ps-{_p:g}"] = dict(_NOMOD, ps_range=(_p, _p))

ABLATION_GROUPS = {
    "table3": [k for k in ABLATION_ROWS if k.startswith("t3-")],
    "table4": [k for k in ABLATION_ROWS if k.startswith("t4-")],
    "table5": [k for k in ABLATION_ROWS if k.startswith("t5-")],
    "table6": [k for k in ABLATION_ROWS if k.startswith("t6-")],
    "sweep-beta": [k for k in ABLATION_ROWS if k.startswith("sweep-beta-")],
    "sweep-pg": [k for k in ABLATION_ROWS if k.startswith("sweep-pg-")],
    "sweep-ps": [k for k in ABLATION_ROWS if k.startswith("sweep-ps-")],
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ammnet", description="Desk-scale semantic scene completion.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--seed", type=int, default=None)
        c.add_argument("--out", type=Path, default=None)
        c.add_argument("--config", type=Path, default=None, help="TrainConfig JSON or a manifest.json")
        return c

    cmd("version", "print the package version")
    cmd("gen-data", "write the synthetic train/val/test scenes")
    c = cmd("train", "train a model and write curves and checkpoints")
    c.add_argument("--preset", choices=sorted(TRAIN_PRESETS), default="ammnet")
    c.add_argument("--svg", action="store_true", help="also render curves.svg")
    c = cmd("eval", "score a checkpoint on a scene directory")
    c.add_argument("--ckpt", type=Path, required=True)
    c.add_argument("--data", type=Path, required=True)
    c = cmd("gradcheck", "finite-difference gradient verification")
    c.add_argument("--cases", type=int, default=20)
    c = cmd("perturb", "write one perturbed ground-truth grid")
    c.add_argument("--kind", choices=("geo", "sem"), required=True)
    c.add_argument("--p", type=float, default=0.5)
    c.add_argument("--data", type=Path, default=None, help="scene directory (default: synthetic scene)")
    c = cmd("probe", "train a fresh decoder on a frozen encoder")
    c.add_argument("--ckpt", type=Path, required=True)
    c.add_argument("--modality", choices=("rgb", "tsdf"), required=True)
    c = cmd("ablate", "run ablation rows or whole tables")
    c.add_argument("--preset", required=True,
                   choices=sorted(ABLATION_GROUPS) + sorted(ABLATION_ROWS))
    c.add_argument("--svg", action="store_true")
    return p


# -- helpers ------------------------------------------------------------------

def _load_config_dict(path):
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    if not isinstance(d, dict):
        raise UsageError("config must be a JSON object")
    return d.get("config", d)


def _train_config(args, overrides=None):
    from .training import TrainConfig

    d = {}
    d.update(overrides or {})
    d.update(_load_config_dict(args.config))
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from e


def _seed(args, cfg=None):
    if args.seed is not None:
        return args.seed
    return cfg.seed if cfg is not None else 0


def _out_dir(args, default):
    out = args.out if args.out is not None else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, args, seed, config=None, extra=None):
    args_d = {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items()}
    m = {"command": args.command, "version": __version__, "seed": seed, "args": args_d,
         "config": config}
    m.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")


def _dump(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands -----------------------------------------------------------------

def cmd_version(args):
    print(__version__)


def cmd_gen_data(args):
    from .data import build_dataset
    from .gridio import save_scene

    cfg = _train_config(args)
    out = _out_dir(args, "data")
    ds = build_dataset(cfg.seed, cfg.sizes(), cfg.grid(), cfg.num_classes)
    for split, scenes in ds.items():
        for i, s in enumerate(scenes):
            save_scene(s, out / split / f"{i:04d}")
    _write_manifest(out, args, cfg.seed, cfg.to_dict(),
                    {"scenes": {k: [s.seed for s in v] for k, v in ds.items()}})
    print(out)


def _train_and_write(cfg, out: Path, svg: bool):
    from .diagnostics import curves_svg, overfit_report
    from .training import train

    result = train(cfg, out_dir=out)
    summary = {"final": [dataclasses.asdict(c) for c in result.curves if c.epoch == cfg.epochs],
               "checkpoints": [p.name for p in result.checkpoints]}
    try:
        summary["overfit"] = overfit_report(result.curves)
    except ValueError:
        pass
    _dump(summary, out / "summary.json")
    if svg:
        (out / "curves.svg").write_text(curves_svg(result.curves))
    return result, summary


def cmd_train(args):
    cfg = _train_config(args, TRAIN_PRESETS[args.preset])
    out = _out_dir(args, f"runs/{args.preset}")
    _write_manifest(out, args, cfg.seed, cfg.to_dict())
    _, summary = _train_and_write(cfg, out, args.svg)
    for row in summary["final"]:
        print(f"{row['split']}: sc_iou={row['sc_iou']:.4f} ssc_miou={row['ssc_miou']:.4f}")


def cmd_eval(args):
    from .data import Sample
    from .gridio import list_scene_dirs, load_scene
    from .training import TrainConfig, evaluate_samples, load_generator

    gen, meta = load_generator(args.ckpt)
    cfg = TrainConfig.from_dict(meta["train_config"])
    dirs = list_scene_dirs(args.data)
    if not dirs:
        raise RuntimeError(f"no scenes under {args.data}")
    samples = [Sample.from_scene(load_scene(d)) for d in dirs]
    report, loss_ssc, _, _ = evaluate_samples(gen, samples, cfg)
    d = report.to_dict()
    d["loss_ssc"] = loss_ssc
    d["num_scenes"] = len(samples)
    out = _out_dir(args, "eval")
    _write_manifest(out, args, _seed(args, cfg), cfg.to_dict())
    _dump(d, out / "metrics.json")
    print(json.dumps(d, sort_keys=True))


def cmd_gradcheck(args):
    from .gradcheck import report_passes, run_gradcheck

    if args.cases < 1:
        raise UsageError("--cases must be positive")
    seed = _seed(args)
    report = run_gradcheck(seed, args.cases)
    if args.out is not None:
        out = _out_dir(args, "gradcheck")
        _write_manifest(out, args, seed)
        _dump(report, out / "gradcheck.json")
    print(json.dumps(report, sort_keys=True))
    if not report_passes(report):
        raise RuntimeError("gradient check exceeded 1e-4")


def cmd_perturb(args):
    from .data import substream
    from .gridio import load_scene, write_grid
    from .perturbation import perturb_geometric, perturb_semantic

    if not 0.0 <= args.p <= 1.0:
        raise UsageError("--p must lie in [0, 1]")
    seed = _seed(args)
    scene = load_scene(args.data) if args.data is not None else gen_synthetic_scene(seed)
    rng = substream(seed, "perturb")
    if args.kind == "geo":
        fake, rec = perturb_geometric(np.asarray(scene.gt), args.p, rng)
    else:
        fake, rec = perturb_semantic(np.asarray(scene.gt), scene.num_classes, rng, p_sem=args.p)
    out = _out_dir(args, "perturb")
    write_grid(out / "gt.ammv", np.asarray(scene.gt))
    write_grid(out / "perturbed.ammv", fake)
    _dump(rec.to_dict(), out / "record.json")
    _write_manifest(out, args, seed, extra={"scene_seed": scene.seed})
    print(rec.to_json())


def cmd_probe(args):
    from .checkpoint import load_checkpoint
    from .data import build_dataset
    from .diagnostics import probe_encoder
    from .training import TrainConfig

    tensors, meta = load_checkpoint(args.ckpt)
    base = dict(meta.get("train_config") or {})
    base.update(_load_config_dict(args.config))
    if args.seed is not None:
        base["seed"] = args.seed
    cfg = TrainConfig.from_dict(base)
    ds = build_dataset(cfg.seed, cfg.sizes(), cfg.grid(), cfg.num_classes)
    miou, _ = probe_encoder(tensors, args.modality, ds, cfg)
    out = _out_dir(args, "probe")
    _write_manifest(out, args, cfg.seed, cfg.to_dict())
    res = {"modality": args.modality, "test_ssc_miou": miou}
    _dump(res, out / "probe.json")
    print(json.dumps(res, sort_keys=True))


def cmd_ablate(args):
    import csv

    rows = ABLATION_GROUPS.get(args.preset, [args.preset])
    out = _out_dir(args, f"ablate/{args.preset}")
    configs = {r: _train_config(args, ABLATION_ROWS[r]) for r in rows}
    _write_manifest(out, args, _seed(args, next(iter(configs.values()))),
                    extra={"rows": {r: c.to_dict() for r, c in configs.items()}})
    table = []
    for r, cfg in configs.items():
        _, summary = _train_and_write(cfg, out / r, args.svg)
        for row in summary["final"]:
            table.append({"row": r, **row})
        logging.getLogger(__name__).info("finished %s", r)
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["row", "epoch", "split", "sc_iou", "ssc_miou",
                                          "loss_ssc", "loss_g_adv", "loss_d"], lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    for t in table:
        if t["split"] == "val":
            print(f"{t['row']}: val sc_iou={t['sc_iou']:.4f} ssc_miou={t['ssc_miou']:.4f}")


COMMANDS = {
    "version": cmd_version,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "perturb": cmd_perturb,
    "probe": cmd_probe,
    "ablate": cmd_ablate,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        print(f"ammnet {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - one-line diagnostic, no traceback
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"ammnet {args.command}: {type(e).__name__}: {msg}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def main():
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    sys.exit(run())
