"""Batch command-line front end.

Exit codes: 0 success, 1 operational failure (I/O, divergence,
incompatible files), 2 usage error (bad flags, malformed config).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .blocks import load_checkpoint, save_checkpoint
from .data import (MODALITIES, ModalitySubset, VALID_SIZES, VolumeCase,
                   assign_splits, generate_case, load_split, read_volume,
                   write_manifest, write_volume)
from .errors import ConfigurationError, CorrsegError
from .gradcheck import run_suite
from .train import (TrainConfig, evaluate, fit, predict_labels,
                    robustness_sweep)

# overlay colors for predicted structures (RGB)
LABEL_COLORS = {1: (255, 0, 0),      # necrotic / non-enhancing core: red
                2: (255, 165, 0),    # edema: orange
                3: (255, 255, 255)}  # enhancing tumor: white


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corrseg",
        description="Multi-modal 3D segmentation experiments on synthetic "
                    "phantoms, robust to missing modalities.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--size", type=int, required=True,
                   help=f"cubic volume extent, one of {VALID_SIZES}")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a network from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on one subset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subset", default="1111",
                   help="4 bits (FLAIR,T1,T1c,T2) or 'all'")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", help="directory for CSV/table files")

    p = sub.add_parser("robustness",
                       help="sweep all 15 modality combinations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", help="directory for CSV/table files")

    p = sub.add_parser("predict", help="segment one case file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case", required=True, help="MMSV case file")
    p.add_argument("--subset", default="1111")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of every operation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=5,
                   help="number of random repetitions")
    p.add_argument("--perturb", help=argparse.SUPPRESS)
    return parser


def _parse_subset(parser, bits: str) -> ModalitySubset:
    try:
        return ModalitySubset.from_bits(bits)
    except CorrsegError as exc:
        parser.error(str(exc))


def cmd_gen_data(parser, args) -> int:
    if args.size not in VALID_SIZES:
        parser.error(f"--size must be one of {VALID_SIZES}, got {args.size}")
    if args.cases < 1:
        parser.error("--cases must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cases").mkdir(exist_ok=True)
    splits = assign_splits(args.cases, args.seed)
    entries = []
    for i in range(args.cases):
        case = generate_case(args.seed + i, args.size)
        rel = f"cases/{case.case_id}.mmsv"
        write_volume(out / rel, case)
        entries.append((splits[i], rel))
    write_manifest(out / "manifest.txt", entries)
    counts = {s: sum(1 for e in entries if e[0] == s)
              for s in ("train", "val", "test")}
    print(f"wrote {args.cases} cases to {out} "
          f"(train/val/test = {counts['train']}/{counts['val']}"
          f"/{counts['test']})")
    return 0


def cmd_train(parser, args) -> int:
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        parser.error(f"cannot read config: {exc}")
    try:
        config = TrainConfig.from_text(text)
    except ConfigurationError as exc:
        parser.error(str(exc))
    if not Path(args.data).is_file():
        parser.error(f"manifest not found: {args.data}")

    train_cases = load_split(args.data, "train")
    val_cases = load_split(args.data, "val")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = fit(config, train_cases, val_cases)

    extras = {"modality_dropout":
              "true" if config.modality_dropout else "false"}
    save_checkpoint(out / "final.ckpt", result.net, extras)
    result.restore_best()
    save_checkpoint(out / "best.ckpt", result.net, extras)
    (out / "trainlog.csv").write_text(result.log.to_csv(), encoding="utf-8")
    (out / "config.txt").write_text(config.to_text(), encoding="utf-8")
    last = result.log.records[-1]
    print(f"trained {len(result.log.records)} epochs; best epoch "
          f"{result.log.best_epoch}; final val loss {last.val_loss:.4f}")
    if result.log.diverged:
        print("training diverged; last good checkpoint kept",
              file=sys.stderr)
        return 1
    return 0


def _load_net(args):
    net, extras = load_checkpoint(args.checkpoint)
    return net, extras


def _report_meta(extras, subset_note: str) -> dict[str, str]:
    regime = ("modality_dropout"
              if extras.get("modality_dropout") == "true"
              else "full_modality")
    return {"training_regime": regime, "evaluated": subset_note}


def _write_report(report, out_dir, stem: str) -> None:
    print(report.to_table(), end="")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.csv").write_text(report.to_csv(), encoding="utf-8")
        (out / f"{stem}.txt").write_text(report.to_table(), encoding="utf-8")


def cmd_eval(parser, args) -> int:
    from .metrics import MetricsReport
    net, extras = _load_net(args)
    cases = load_split(args.data, args.split)
    if args.subset == "all":
        report = robustness_sweep(net, cases,
                                  _report_meta(extras, "all subsets"))
    else:
        subset = _parse_subset(parser, args.subset)
        row = evaluate(net, cases, subset)
        report = MetricsReport(rows=[row],
                               meta=_report_meta(extras, subset.bits))
    _write_report(report, args.out, "eval")
    return 0


def cmd_robustness(parser, args) -> int:
    net, extras = _load_net(args)
    cases = load_split(args.data, args.split)
    report = robustness_sweep(net, cases,
                              _report_meta(extras, "all subsets"))
    _write_report(report, args.out, "robustness")
    return 0


def _overlay_ppm(background: np.ndarray, labels2d: np.ndarray) -> bytes:
    lo, hi = background.min(), background.max()
    span = (hi - lo) if hi > lo else 1.0
    gray = ((background - lo) / span * 255).astype(np.uint8)
    rgb = np.stack([gray] * 3, axis=-1)
    for value, color in LABEL_COLORS.items():
        rgb[labels2d == value] = color
    h, w = labels2d.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def cmd_predict(parser, args) -> int:
    net, _ = _load_net(args)
    subset = _parse_subset(parser, args.subset)
    case = read_volume(args.case)
    if not isinstance(case, VolumeCase):
        raise ConfigurationError(
            f"{args.case} is not a full 4-modality case file")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred = predict_labels(net, case, subset)
    write_volume(out / "prediction.mmsv", pred,
                 case_id=f"{case.case_id}_pred")
    mid = case.shape[0] // 2
    for m, name in enumerate(MODALITIES):
        background = case.modalities[m][mid] if m in subset else \
            np.zeros(case.shape[1:], dtype=np.float32)
        ppm = _overlay_ppm(background, pred[mid])
        (out / f"overlay_{name.lower()}.ppm").write_bytes(ppm)
    print(f"wrote prediction and {len(MODALITIES)} overlays to {out}")
    return 0


def cmd_gradcheck(parser, args) -> int:
    from . import autograd
    if args.perturb:
        autograd.set_backward_fault(args.perturb)
    try:
        reports = run_suite(
            seeds=range(args.seed, args.seed + args.seeds),
            progress=lambda msg: print(msg, file=sys.stderr))
    finally:
        autograd.set_backward_fault(None)
    width = max(len(r.name) for r in reports)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max rel err {r.max_error:.3e}  {status}")
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} operations pass")
    return 1 if failed else 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "robustness": cmd_robustness,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](parser, args)
    except (CorrsegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
