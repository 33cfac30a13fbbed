"""Command-line surface: corpus generation, training, sampling, evaluation.

Subcommands:
  phantom   write a corpus of synthetic volumes, masks, manifest, and split
  train     fit the denoiser on a corpus directory
  sample    render a volume from a checkpoint and a mask file
  eval      score a generated volume against reference masks and volumes
  ablate    run the conditioning arms (full / markovian / unconditional)

Every command takes --config (key=value file), --seed, --deterministic,
and --out. With --seed the run uses that seed; with --deterministic it
uses the config seed; with neither, a fresh seed is drawn from OS entropy
and printed, so reruns differ unless a seed is pinned.

Run directories are self-describing: config.txt snapshot plus
checkpoints/, samples/, eval/, and logs/ as the command needs them.

Exit codes: 0 success; 2 configuration or precondition error; 3 data or
file-format error; 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import secrets
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, config_snapshot, load_config, schedule_for
from .denoiser import load_weights
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    NumericalError,
)
from .metrics import (
    dice,
    feature_summary,
    flicker,
    frechet_distance,
    hd95,
    jaccard,
    t_coherence,
)
from .ofg import OFGConfig, generate_volume
from .pairing import enumerate_pairs
from .phantom import class_bands, generate_phantom, resegment, split
from .trainer import train, write_history_csv
from .volio import Volume, read_mask, read_volume, write_mask, write_volume

MANIFEST_NAME = "manifest.tsv"
SPLIT_NAME = "split.tsv"
TRAIN_FRACTION = 0.8


def _resolve_seed(args, cfg: RunConfig) -> tuple[RunConfig, int]:
    """Apply the seed policy: --seed wins, --deterministic pins to config."""
    if args.seed is not None:
        seed = args.seed
    elif args.deterministic:
        seed = cfg.seed
    else:
        seed = secrets.randbelow(2**31)
        print(f"seed: {seed} (pass --seed {seed} to reproduce)")
    return cfg.with_seed(seed), seed


def _prepare_run_dir(out_dir: Path, cfg: RunConfig) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_snapshot(cfg))
    return out_dir


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------


def _volume_id(index: int) -> str:
    return f"{index:04d}"


def cmd_phantom(args, cfg: RunConfig) -> int:
    out = _prepare_run_dir(Path(args.out), cfg)
    if args.count < 0:
        raise ConfigError(f"--count must be >= 0, got {args.count}")
    manifest_lines = []
    for index in range(args.count):
        vol, msk, report = generate_phantom(cfg.phantom, index)
        vid = _volume_id(index)
        if "\t" in report or "\n" in report:
            raise ContractError(f"report for {vid} contains tab or newline")
        write_volume(out / f"{vid}.vol", vol)
        write_mask(out / f"{vid}.msk", msk)
        manifest_lines.append(f"{vid}\t{report}\n")
    (out / MANIFEST_NAME).write_text("".join(manifest_lines))
    train_ids, val_ids = split(args.count, TRAIN_FRACTION, cfg.seed)
    split_lines = [f"{_volume_id(i)}\ttrain\n" for i in train_ids]
    split_lines += [f"{_volume_id(i)}\tval\n" for i in val_ids]
    (out / SPLIT_NAME).write_text("".join(split_lines))
    print(f"wrote {args.count} volumes to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def read_manifest(data_dir: Path) -> list[tuple[str, str]]:
    path = data_dir / MANIFEST_NAME
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read manifest ({exc})") from None
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise FormatError(f"{path}:{lineno}: expected id<TAB>report")
        vid, _, report = line.partition("\t")
        entries.append((vid, report))
    return entries


def read_split(data_dir: Path) -> dict[str, str]:
    path = data_dir / SPLIT_NAME
    if not path.exists():
        return {}
    assignment = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        vid, _, group = line.partition("\t")
        if group not in ("train", "val"):
            raise FormatError(f"{path}: bad split group {group!r} for id {vid}")
        assignment[vid] = group
    return assignment


def load_corpus(data_dir: Path, group: str | None = None):
    """Read (volume, mask, report) triples, optionally filtered by split group."""
    entries = read_manifest(data_dir)
    assignment = read_split(data_dir)
    dataset = []
    for vid, report in entries:
        if group is not None and assignment and assignment.get(vid) != group:
            continue
        vol = read_volume(data_dir / f"{vid}.vol")
        msk = read_mask(data_dir / f"{vid}.msk")
        dataset.append((vol, msk, report))
    return dataset


def cmd_train(args, cfg: RunConfig) -> int:
    out = _prepare_run_dir(Path(args.out), cfg)
    dataset = load_corpus(Path(args.data), group="train")
    if not dataset:
        raise ContractError(f"{args.data}: no training volumes in manifest")
    sched = schedule_for(cfg)
    result = train(
        dataset,
        cfg.train,
        cfg.denoiser,
        sched,
        out_dir=out / "checkpoints",
        resume_path=args.resume,
    )
    (out / "logs").mkdir(exist_ok=True)
    write_history_csv(out / "logs" / "history.csv", result.history)
    final_loss = result.history[-1][2] if result.history else float("nan")
    print(f"trained {len(result.history)} steps; final loss {final_loss:.4f}; "
          f"checkpoint {out / 'checkpoints' / 'final.ckpt'}")
    return 0


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def cmd_sample(args, cfg: RunConfig) -> int:
    msk = read_mask(args.masks)
    length = args.length if args.length is not None else msk.depth
    if length < 2:
        raise ContractError(f"--length must be >= 2, got {length}")
    if length > msk.depth:
        raise ContractError(f"--length {length} exceeds mask depth {msk.depth}")
    weights = load_weights(args.checkpoint, cfg.denoiser)
    sched = schedule_for(cfg)
    masks = [msk.labels[z] for z in range(length)]
    vol = generate_volume(weights, cfg.denoiser, masks, args.report, cfg.ofg, sched,
                          n_classes=msk.n_classes, spacing=msk.spacing)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_volume(out_path, vol)
    print(f"wrote depth-{vol.depth} volume to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _worst_case_distance(vol: Volume) -> float:
    extent = np.array(vol.voxels.shape, dtype=np.float64) * np.array(vol.spacing)
    return float(np.linalg.norm(extent))


def evaluate_volume(gen: Volume, ref_masks, reference_vols) -> dict[str, float]:
    """Score a generated volume: segmentation overlap per class, surface
    distance, temporal smoothness, and feature-distribution distance.

    A class empty in both segmentations counts as perfect agreement; a
    class empty on exactly one side has no surface to measure, so its
    distance is reported as the volume diagonal (the worst case).
    """
    if gen.voxels.shape != ref_masks.labels.shape:
        raise DimensionError(
            f"generated {gen.voxels.shape} vs reference masks {ref_masks.labels.shape}"
        )
    bands = class_bands(ref_masks.n_classes)
    seg = resegment(gen, bands)
    out: dict[str, float] = {}
    dices, jacs, hds = [], [], []
    for c in range(1, ref_masks.n_classes):
        a = seg.labels == c
        b = ref_masks.labels == c
        dc = dice(a, b)
        ji = jaccard(a, b)
        if not a.any() and not b.any():
            hd = 0.0
        elif not a.any() or not b.any():
            hd = _worst_case_distance(gen)
        else:
            hd = hd95(a, b, spacing=gen.spacing)
        out[f"dice_{c}"] = dc
        out[f"jaccard_{c}"] = ji
        out[f"hd95_{c}"] = hd
        dices.append(dc)
        jacs.append(ji)
        hds.append(hd)
    out["dice_macro"] = float(np.mean(dices))
    out["jaccard_macro"] = float(np.mean(jacs))
    out["hd95_macro"] = float(np.mean(hds))
    frames = list(gen.voxels)
    out["flicker"] = flicker(frames)
    out["t_coherence"] = t_coherence(frames, enumerate_pairs(gen.depth, (1,)))
    ref_slices = np.concatenate([v.voxels for v in reference_vols], axis=0)
    ref_pool = Volume(voxels=ref_slices, spacing=reference_vols[0].spacing)
    out["frechet"] = frechet_distance(feature_summary(gen), feature_summary(ref_pool))
    return out


def _metric_rows(metrics: dict[str, float]) -> list[tuple[str, str, float]]:
    rows = []
    for key, value in metrics.items():
        name, _, suffix = key.rpartition("_")
        if name and (suffix.isdigit() or suffix == "macro"):
            rows.append((name, suffix, value))
        else:
            rows.append((key, "all", value))
    return rows


def write_eval_report(out_dir: Path, metrics: dict[str, float]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "class", "value"])
        for name, cls, value in _metric_rows(metrics):
            writer.writerow([name, cls, f"{value:.10g}"])
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _prepare_run_dir(Path(args.out), cfg)
    gen = read_volume(args.generated)
    ref_masks = read_mask(args.masks)
    reference_vols = [read_volume(p) for p in args.reference]
    metrics = evaluate_volume(gen, ref_masks, reference_vols)
    write_eval_report(out / "eval", metrics)
    print(f"dice_macro {metrics['dice_macro']:.4f}  jaccard_macro "
          f"{metrics['jaccard_macro']:.4f}  hd95_macro {metrics['hd95_macro']:.4f}  "
          f"frechet {metrics['frechet']:.4g}")
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

ARM_NAMES = ("full", "markovian", "unconditional")


def arm_config(base: OFGConfig, arm: str) -> OFGConfig:
    if arm == "full":
        return base
    if arm in ("markovian", "unconditional"):
        return dataclasses.replace(base, markovian_baseline=True)
    raise ConfigError(f"unknown ablation arm {arm!r}; choose from {ARM_NAMES}")


def generate_arm(weights, dcfg, msk, report, arm: str, ocfg: OFGConfig, sched) -> Volume:
    """Render one volume under a named conditioning arm.

    full: guided generation from the anatomy masks.
    markovian: independent pairs from the anatomy masks, no feedback.
    unconditional: independent pairs with zeroed mask channels and empty
    text, the denoiser's conditioning-dropout mode.
    """
    cfg = arm_config(ocfg, arm)
    masks = [msk.labels[z] for z in range(msk.depth)]
    if arm == "unconditional":
        masks = [np.zeros_like(m) for m in masks]
        report = ""
    return generate_volume(weights, dcfg, masks, report, cfg, sched,
                           n_classes=msk.n_classes, spacing=msk.spacing)


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = _prepare_run_dir(Path(args.out), cfg)
    dataset = load_corpus(Path(args.data), group="val")
    if not dataset:
        raise ContractError(f"{args.data}: no held-out (val) volumes in manifest")
    weights = load_weights(args.checkpoint, cfg.denoiser)
    sched = schedule_for(cfg)
    reference_vols = [vol for vol, _, _ in dataset]

    rows = []
    for arm in ARM_NAMES:
        for k, (vol, msk, report) in enumerate(dataset):
            gen = generate_arm(weights, cfg.denoiser, msk, report, arm, cfg.ofg, sched)
            metrics = evaluate_volume(gen, msk, reference_vols)
            rows.append((arm, _volume_id(k), metrics))

    (out / "eval").mkdir(exist_ok=True)
    keys = sorted(rows[0][2])
    with open(out / "eval" / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "volume"] + keys)
        for arm, vid, metrics in rows:
            writer.writerow([arm, vid] + [f"{metrics[k]:.10g}" for k in keys])
    for arm in ARM_NAMES:
        arm_rows = [m for a, _, m in rows if a == arm]
        mean_dice = float(np.mean([m["dice_macro"] for m in arm_rows]))
        mean_flicker = float(np.mean([m["flicker"] for m in arm_rows]))
        print(f"{arm}: dice_macro {mean_dice:.4f}  flicker {mean_flicker:.5f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairvol",
        description="Paired-frame diffusion for volumetric sequences on synthetic phantoms.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--deterministic", action="store_true",
                        help="use the config seed instead of a fresh one")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--count", type=int, default=8, help="number of volumes")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", parents=[common], help="train the denoiser")
    p.add_argument("--data", required=True, help="corpus directory with a manifest")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="generate a volume")
    p.add_argument("--checkpoint", required=True, help="trained weights")
    p.add_argument("--masks", required=True, help="MSK1 file of per-frame anatomy masks")
    p.add_argument("--report", default="", help="conditioning text")
    p.add_argument("--length", type=int, help="output depth (default: all mask frames)")
    p.add_argument("--out", required=True, help="output VOL1 file path")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", parents=[common], help="score a generated volume")
    p.add_argument("--generated", required=True, help="VOL1 file to score")
    p.add_argument("--masks", required=True, help="reference MSK1 file")
    p.add_argument("--reference", required=True, nargs="+",
                   help="reference VOL1 files for the feature-distribution distance")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common],
                       help="compare conditioning arms on the held-out split")
    p.add_argument("--checkpoint", required=True, help="trained weights")
    p.add_argument("--data", required=True, help="corpus directory with a manifest")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg, _ = _resolve_seed(args, cfg)
        return args.func(args, cfg)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
