"""Command line entry point: ``segguided train | evaluate | report``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .config import RunConfig
from .data import (
    apply_split_manifest,
    load_subject,
    read_split_manifest,
    scan_dataset,
    split_dataset,
    write_split_manifest,
    write_synthetic_dataset,
)
from .metrics import evaluate_cohort, read_case_csv, summary_rows, write_case_csv, write_summary_csv
from .network import build_network, load_checkpoint
from .trainer import PatchDataset, fit, read_epoch_records

log = logging.getLogger("segguided")

PANELS = ("curves", "qualitative", "attention", "failures")
RUN_INFO = "run_info.json"
EVAL_INFO = "eval_info.json"


# ------------------------------------------------------------------ train


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    train_cfg = cfg.train
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    if args.no_amp:
        train_cfg = dataclasses.replace(train_cfg, amp_enabled=False)
    aug = dataclasses.replace(cfg.augmentation, seed=train_cfg.seed)
    cfg = dataclasses.replace(cfg, train=train_cfg, augmentation=aug)

    root = Path(args.data_root)
    if args.synthetic:
        write_synthetic_dataset(root, args.synthetic, cfg.synthetic_grid, train_cfg.seed,
                                cfg.synthetic_noise)
    index = scan_dataset(root, cfg.naming)
    split = split_dataset(index, cfg.split_fractions, train_cfg.seed)
    train_set, val_set = split.split("train"), split.split("val")
    if not train_set or not val_set:
        raise SystemExit(
            f"split of {len(index)} subjects leaves {len(train_set)} train / {len(val_set)} val; "
            "add subjects or change split_fractions"
        )

    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    write_split_manifest(split, run_dir / "split_manifest.txt", train_cfg.seed)
    (run_dir / RUN_INFO).write_text(json.dumps(
        {"data_root": str(root.resolve()), "device": args.device}, indent=2) + "\n")

    t = train_cfg
    train_ds = PatchDataset(train_set, t.patch, True, t.fg_prob, cfg.augmentation, t.seed,
                            t.crops_per_subject)
    val_ds = PatchDataset(val_set, t.patch, train=False)
    net = build_network(cfg.network, t.seed)
    result = fit(net, train_ds, val_ds, t, cfg.loss, run_dir, args.device)
    log.info("best epoch %d, val loss %.4f; checkpoint %s", result.best_epoch,
             result.best_val_loss, result.best_checkpoint)
    return 0


# ------------------------------------------------------------------ evaluate


def _run_dir_of(checkpoint: Path) -> Path:
    return checkpoint.resolve().parent


def cmd_evaluate(args) -> int:
    from .inference import predict

    ckpt = Path(args.checkpoint)
    run_dir = _run_dir_of(ckpt)
    cfg = RunConfig.load(run_dir / "config.json") if (run_dir / "config.json").exists() else RunConfig()
    net, meta = load_checkpoint(ckpt)
    net.to(args.device)

    index = scan_dataset(args.data_root, cfg.naming)
    manifest = Path(args.manifest) if args.manifest else run_dir / "split_manifest.txt"
    if args.split == "all":
        ids = index.subject_ids
    else:
        if not manifest.exists():
            raise SystemExit(f"no split manifest at {manifest}; pass --manifest or --split all")
        split = apply_split_manifest(index, read_split_manifest(manifest))
        ids = [e.subject_id for e in split.split(args.split)]
    if not ids:
        raise SystemExit(f"split {args.split!r} is empty")

    out = Path(args.out)
    pred_dir = out / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    preds: Dict[str, np.ndarray] = {}
    refs: Dict[str, np.ndarray] = {}
    spacings = {}
    for sid in ids:
        volume, labels = load_subject(index.entry(sid))
        pred, attn = predict(net, volume, cfg.train.patch, args.device)
        np.savez_compressed(pred_dir / f"{sid}.npz", labels=pred.labels,
                            attention=attn.astype(np.float16))
        preds[sid], refs[sid] = pred.labels, labels.labels
        spacings[sid] = volume.voxel_spacing_mm
        log.info("predicted %s", sid)
    cases, summary = evaluate_cohort(preds, refs, spacings)
    write_case_csv(cases, out / "metrics_per_case.csv")
    write_summary_csv(summary, out / "summary.csv")
    (out / EVAL_INFO).write_text(json.dumps({
        "checkpoint": str(ckpt.resolve()),
        "epoch": meta.get("epoch"),
        "data_root": str(Path(args.data_root).resolve()),
        "split": args.split,
        "subjects": ids,
    }, indent=2) + "\n")
    for row in summary_rows(summary):
        log.info("%-16s dice %.4f", row["region"], row["mean_dice"])
    return 0


# ------------------------------------------------------------------ report


def _load_case(index, eval_dir: Path, sid: str):
    from .preprocess import zscore_normalize
    from .reporting import CaseData

    volume, labels = load_subject(index.entry(sid))
    saved = np.load(eval_dir / "predictions" / f"{sid}.npz")
    image = zscore_normalize(volume).channels
    return CaseData(image, labels.labels, saved["labels"], saved["attention"].astype(np.float32))


def cmd_report(args) -> int:
    from . import reporting

    run_dir = Path(args.run_dir)
    panels = [p.strip() for p in args.panels.split(",") if p.strip()]
    unknown = sorted(set(panels) - set(PANELS))
    if unknown:
        raise SystemExit(f"unknown panels {unknown}; choose from {list(PANELS)}")
    out = run_dir / "report"
    figures: Dict[str, List[Path]] = {}

    if "curves" in panels:
        records = read_epoch_records(run_dir / "epochs.csv")
        figures["curves"] = [reporting.plot_training_curves(records, out / "training_curves.png")]

    case_panels = [p for p in panels if p != "curves"]
    rows = None
    if case_panels:
        eval_dir = Path(args.eval_dir) if args.eval_dir else run_dir / "eval"
        info = json.loads((eval_dir / EVAL_INFO).read_text())
        cfg = RunConfig.load(run_dir / "config.json")
        index = scan_dataset(info["data_root"], cfg.naming)
        cases = read_case_csv(eval_dir / "metrics_per_case.csv")
        by_id = {c.subject_id: c for c in cases}
        if args.subjects:
            wanted = [s.strip() for s in args.subjects.split(",") if s.strip()]
            missing = [s for s in wanted if s not in by_id]
            if missing:
                raise SystemExit(f"subjects not in evaluation: {missing}")
            cases = [by_id[s] for s in wanted]
        rows = summary_rows_from(eval_dir)

        if "qualitative" in panels:
            if args.subjects:
                picks = [(c.subject_id, c.subject_id) for c in cases]
            else:
                ex = reporting.select_exemplars(cases)
                picks = [(ex[k][0], k) for k in ("best", "median", "worst")]
            data = [(reporting.PanelSpec(sid),
                     dataclasses.replace(_load_case(index, eval_dir, sid),
                                         label=f"{tag}\n{sid}\nDice {by_id[sid].mean_dice():.3f}"))
                    for sid, tag in picks]
            figures["qualitative"] = [reporting.render_case_panels(data, out / "qualitative.png")]

        if "attention" in panels:
            sids = [c.subject_id for c in cases] if args.subjects else \
                [reporting.select_exemplars(cases)["median"][0]]
            figures["attention"] = []
            for sid in sids:
                case = _load_case(index, eval_dir, sid)
                figures["attention"].append(reporting.render_attention_panel(
                    sid, case.gt, case.attn, out / f"attention_{sid}.png"))

        if "failures" in panels:
            fails = reporting.select_exemplars(cases, k_worst=2)["failures"]
            data = [(reporting.PanelSpec(sid, columns=reporting.COLUMNS),
                     dataclasses.replace(_load_case(index, eval_dir, sid),
                                         label=f"{sid}\nDice {by_id[sid].mean_dice():.3f}"))
                    for sid in fails]
            figures["failures"] = [reporting.render_case_panels(data, out / "failures.png")]

    index_path = reporting.write_index(out, figures, rows)
    log.info("report written to %s", index_path)
    return 0


def summary_rows_from(eval_dir: Path) -> Optional[List[dict]]:
    import csv

    path = eval_dir / "summary.csv"
    if not path.exists():
        return None
    with open(path, newline="") as fh:
        fh.readline()
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segguided", description=__doc__)
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network and write a run directory")
    t.add_argument("--config", help="run config JSON (defaults used when omitted)")
    t.add_argument("--data-root", required=True)
    t.add_argument("--synthetic", type=int, default=0, metavar="N",
                   help="generate N phantom subjects under --data-root first")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--no-amp", action="store_true")
    t.add_argument("--run-dir", default="runs/train")
    t.add_argument("--device", default="cuda" if torch.cuda.is_available() else "cpu")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="predict a split and write metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-root", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    e.add_argument("--manifest", help="split manifest (default: next to the checkpoint)")
    e.add_argument("--out", required=True)
    e.add_argument("--device", default="cuda" if torch.cuda.is_available() else "cpu")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="render figures for a run")
    r.add_argument("--run-dir", required=True)
    r.add_argument("--eval-dir", help="evaluate output (default: <run-dir>/eval)")
    r.add_argument("--subjects", help="comma-separated subject ids")
    r.add_argument("--panels", default=",".join(PANELS))
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
