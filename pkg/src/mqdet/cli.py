"""Command-line surface.

Every command writes its artifacts under --out, including a
resolved-config.json snapshot of the effective settings (the only place a
timestamp appears; reports themselves are byte-reproducible under a seed).
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import bank as bank_mod
from . import evaluation, modulation, synth
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (GATE_VARIANTS, FREEZE_MODES, ModelConfig, PretrainConfig,
                     TrainConfig, VocabEntry, dump_json, load_json)
from .detector import build_model
from .errors import ConfigurationError
from .synth import DEFAULT_SPLIT_SIZES, SceneDataset


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mqdet",
                                description="Multi-modal-queried toy detection pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, data=False, model=False, bank=False):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", default=None, help="JSON config file")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        if model:
            sp.add_argument("--model", required=True, help="checkpoint directory")
        if bank is True:
            sp.add_argument("--bank", required=True, help="query bank directory")
        elif bank == "optional":
            sp.add_argument("--bank", default=None, help="query bank directory")

    sp = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    common(sp)

    sp = sub.add_parser("pretrain-baseline", help="train the frozen text-queried detector")
    common(sp, data=True)

    sp = sub.add_parser("build-bank", help="extract vision queries from one or more splits")
    common(sp, data=True, model=True)
    sp.add_argument("--split", default="pretrain,fewshot",
                    help="comma-separated split names (default: pretrain,fewshot)")

    sp = sub.add_parser("modulate", help="train GCP modules on a frozen detector")
    common(sp, data=True, model=True, bank=True)
    sp.add_argument("--split", default="pretrain", choices=("pretrain", "fewshot"))
    sp.add_argument("--mask-rate", type=float, default=None)
    sp.add_argument("--k", type=int, default=None)
    sp.add_argument("--gate-variant", choices=GATE_VARIANTS, default=None)
    sp.add_argument("--freeze", choices=FREEZE_MODES, default=None)

    sp = sub.add_parser("eval", help="finetuning-free evaluation of a checkpoint")
    common(sp, data=True, model=True, bank="optional")
    sp.add_argument("--split", default="eval", choices=synth.SPLITS)
    sp.add_argument("--query-mode", default="text", choices=evaluation.QUERY_MODES)
    sp.add_argument("--k", type=int, default=5)

    sp = sub.add_parser("infer", help="detect on a single image")
    common(sp, model=True, bank="optional")
    sp.add_argument("--image", required=True, help="PPM image path")
    sp.add_argument("--query-mode", default="text", choices=evaluation.QUERY_MODES)
    sp.add_argument("--k", type=int, default=5)

    sp = sub.add_parser("ablate", help="modulate+eval sweep along one axis")
    common(sp, data=True, model=True, bank=True)
    sp.add_argument("--axis", required=True,
                    choices=("mask_rate", "gate_variant", "freeze", "k", "gcp_layers"))
    sp.add_argument("--values", required=True,
                    help="comma-separated; gcp_layers values join indices with '+'")
    return p


def _write_resolved_config(args: argparse.Namespace, extra: dict | None = None) -> None:
    os.makedirs(args.out, exist_ok=True)
    options = {k: v for k, v in vars(args).items() if k != "command"}
    doc = {
        "command": args.command,
        "options": options,
        "effective": extra or {},
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    with open(os.path.join(args.out, "resolved-config.json"), "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _config_doc(args) -> dict:
    return load_json(args.config) if args.config else {}


def cmd_gen_data(args) -> None:
    doc = _config_doc(args)
    vocab = tuple(VocabEntry.from_dict(e) for e in doc["vocab"]) if "vocab" in doc \
        else ModelConfig().vocab
    sizes = dict(DEFAULT_SPLIT_SIZES)
    sizes.update(doc.get("sizes", {}))
    workers = int(os.environ.get("MQDET_NUM_WORKERS", "1"))
    if workers < 1:
        raise ConfigurationError("MQDET_NUM_WORKERS must be >= 1")
    _write_resolved_config(args, {"sizes": sizes, "workers": workers,
                                  "vocab": [e.to_dict() for e in vocab]})
    hist = synth.generate_dataset(args.seed, vocab, sizes, args.out, workers=workers)
    for split in synth.SPLITS:
        total = sum(hist[split].values())
        print(f"{split}: {sizes.get(split, 0)} scenes, {total} instances")


def cmd_pretrain_baseline(args) -> None:
    doc = _config_doc(args)
    dataset = SceneDataset(args.data)
    pcfg = PretrainConfig(**{**doc.get("pretrain", {}), "seed": args.seed})
    mcfg = ModelConfig(**{**doc.get("model", {}), "vocab": dataset.vocab})
    _write_resolved_config(args, {"pretrain": pcfg.to_dict(), "model": mcfg.to_dict()})
    model = build_model(mcfg, seed=pcfg.seed)
    log = modulation.pretrain_baseline(model, dataset, pcfg)
    modulation.write_ndjson(log, os.path.join(args.out, "train_log.ndjson"))
    save_checkpoint(model, os.path.join(args.out, "checkpoint"))
    print(f"pretrained {len(log)} steps; final grounding loss "
          f"{log[-1]['loss_grounding']:.4f}")


def cmd_build_bank(args) -> None:
    _write_resolved_config(args)
    splits = [s.strip() for s in args.split.split(",") if s.strip()]
    bad = [s for s in splits if s not in synth.SPLITS]
    if not splits or bad:
        raise ConfigurationError(f"--split must name splits from {synth.SPLITS}, got {args.split!r}")
    model = load_checkpoint(args.model)
    dataset = SceneDataset(args.data)
    bank = bank_mod.build_bank(model, dataset, splits)
    bank_mod.serialize_bank(bank, os.path.join(args.out, "bank"))
    counts = bank.counts()
    print(f"bank built from {args.split}: " +
          ", ".join(f"{c}={n}" for c, n in counts.items()))


def _train_config(args, doc: dict) -> TrainConfig:
    base = {**doc.get("train", {}), "seed": args.seed}
    if getattr(args, "mask_rate", None) is not None:
        base["mask_rate"] = args.mask_rate
    if getattr(args, "freeze", None) is not None:
        base["freeze"] = args.freeze
    return TrainConfig(**base)


def cmd_modulate(args) -> None:
    doc = _config_doc(args)
    tcfg = _train_config(args, doc)
    model = load_checkpoint(args.model)
    if model.gcp is not None:
        raise ConfigurationError("modulate expects a baseline checkpoint")
    if args.k is not None:
        model.config = dataclasses.replace(model.config, k=args.k)
    model.attach_gcp(seed=tcfg.seed, gate_variant=args.gate_variant)
    _write_resolved_config(args, {"train": tcfg.to_dict(), "model": model.config.to_dict()})
    dataset = SceneDataset(args.data)
    bank = bank_mod.deserialize_bank(args.bank)
    log = modulation.modulate(model, dataset, bank, tcfg, split=args.split)
    modulation.write_ndjson(log, os.path.join(args.out, "train_log.ndjson"))
    save_checkpoint(model, os.path.join(args.out, "checkpoint"))
    print(f"modulated {len(log)} steps; gate_scalar_l2 {log[-1]['gate_scalar_l2']:.4f}")


def cmd_eval(args) -> None:
    doc = _config_doc(args)
    _write_resolved_config(args)
    model = load_checkpoint(args.model)
    dataset = SceneDataset(args.data)
    bank = bank_mod.deserialize_bank(args.bank) if args.bank else None
    report = evaluation.finetuning_free_eval(
        model, dataset, args.split, bank, args.query_mode, k=args.k, seed=args.seed,
        score_threshold=float(doc.get("score_threshold", 0.05)),
        nms_iou=float(doc.get("nms_iou", 0.5)))
    dump_json(report, os.path.join(args.out, "report.json"))
    mean = report.get("mean_ap")
    print(f"{args.split}/{args.query_mode}: mean AP "
          f"{'n/a' if mean is None else f'{mean:.4f}'}")


def cmd_infer(args) -> None:
    doc = _config_doc(args)
    _write_resolved_config(args)
    model = load_checkpoint(args.model)
    bank = bank_mod.deserialize_bank(args.bank) if args.bank else None
    if args.query_mode != "text" and bank is None:
        raise ConfigurationError(f"{args.query_mode} inference needs --bank")
    labels = [e.label for e in model.config.vocab]
    rng = np.random.default_rng([args.seed, 99])
    queries, _ = evaluation._queries_for_mode(labels, args.query_mode, bank, args.k, rng)
    image = synth.read_ppm(args.image)
    dets = model.detect(image, queries,
                        score_threshold=float(doc.get("score_threshold", 0.05)),
                        nms_iou=float(doc.get("nms_iou", 0.5)))
    dump_json([{"label": d.label, "box": [float(v) for v in d.box], "score": d.score}
               for d in dets], os.path.join(args.out, "detections.json"))
    print(f"{len(dets)} detections")


def _parse_axis_value(axis: str, token: str):
    if axis == "mask_rate":
        return float(token)
    if axis == "k":
        return int(token)
    if axis == "gcp_layers":
        return tuple(int(t) for t in token.split("+"))
    if axis == "gate_variant" and token not in GATE_VARIANTS:
        raise ConfigurationError(f"unknown gate variant {token!r}")
    if axis == "freeze" and token not in FREEZE_MODES:
        raise ConfigurationError(f"unknown freeze mode {token!r}")
    return token


def cmd_ablate(args) -> None:
    doc = _config_doc(args)
    tokens = [t for t in args.values.split(",") if t]
    if not tokens:
        raise ConfigurationError("--values is empty")
    _write_resolved_config(args, {"axis": args.axis, "values": tokens})
    dataset = SceneDataset(args.data)
    bank = bank_mod.deserialize_bank(args.bank)
    csv_rows = ["axis,value,query_mode,mean_ap"]
    for token in tokens:
        value = _parse_axis_value(args.axis, token)
        tcfg = TrainConfig(**{**doc.get("train", {}), "seed": args.seed})
        model = load_checkpoint(args.model)
        gate_variant = None
        if args.axis == "mask_rate":
            tcfg = dataclasses.replace(tcfg, mask_rate=value)
        elif args.axis == "freeze":
            tcfg = dataclasses.replace(tcfg, freeze=value)
        elif args.axis == "k":
            model.config = dataclasses.replace(model.config, k=value)
        elif args.axis == "gcp_layers":
            model.config = dataclasses.replace(model.config, gcp_layers=value)
        elif args.axis == "gate_variant":
            gate_variant = value
        model.attach_gcp(seed=tcfg.seed, gate_variant=gate_variant)
        run_dir = os.path.join(args.out, f"{args.axis}={token.replace('+', '-')}")
        os.makedirs(run_dir, exist_ok=True)
        log = modulation.modulate(model, dataset, bank, tcfg, split="pretrain")
        modulation.write_ndjson(log, os.path.join(run_dir, "train_log.ndjson"))
        save_checkpoint(model, os.path.join(run_dir, "checkpoint"))
        for mode in evaluation.QUERY_MODES:
            report = evaluation.finetuning_free_eval(model, dataset, "eval", bank, mode,
                                                     k=model.config.k, seed=args.seed)
            dump_json(report, os.path.join(run_dir, f"report_{mode}.json"))
            mean = report.get("mean_ap")
            csv_rows.append(f"{args.axis},{token},{mode},"
                            f"{'' if mean is None else f'{mean:.6f}'}")
            print(f"{args.axis}={token} {mode}: mean AP "
                  f"{'n/a' if mean is None else f'{mean:.4f}'}")
    with open(os.path.join(args.out, "ablation.csv"), "w", encoding="utf-8") as f:
        f.write("\n".join(csv_rows) + "\n")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain-baseline": cmd_pretrain_baseline,
    "build-bank": cmd_build_bank,
    "modulate": cmd_modulate,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        HANDLERS[args.command](args)
        return 0
    except Exception as e:  # noqa: BLE001 — CLI boundary: report and exit 2
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
