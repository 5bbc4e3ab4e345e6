"""Command-line surface: datagen, train, eval, ablate, robustness, and
the exact discrete-distribution checks (theory-check)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import datagen, pipeline, theory
from .config import parse_config


def _default_run_dir(base: str = "runs") -> Path:
    return Path(base) / time.strftime("%Y%m%d-%H%M%S")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forgeloc",
        description="Forgery localization: synthetic data, training with "
                    "information-constrained objectives, evaluation, and "
                    "exact information-identity checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic forgery dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--val", type=int, default=40)
    p.add_argument("--test", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kinds", default="splice,copy_move",
                   help="comma-separated forgery kinds")
    p.add_argument("--min-frac", type=float, default=datagen.DEFAULT_MIN_FRAC)
    p.add_argument("--max-frac", type=float, default=datagen.DEFAULT_MAX_FRAC)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    _add_config_args(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--pooled", action="store_true",
                   help="pool all pixels instead of averaging per image")
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("ablate", help="run the four-loss ablation table")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--split", default="test")
    _add_config_args(p)

    p = sub.add_parser("robustness", help="AUC curves under distortion")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--jpeg", type=_int_list, default=[90, 70, 50],
                   metavar="Q1,Q2,...")
    p.add_argument("--blur", type=_int_list, default=[3, 5, 7],
                   metavar="K1,K2,...")

    p = sub.add_parser("theory-check",
                       help="exact information-identity checks")
    p.add_argument("--joints", type=int, default=1000)
    p.add_argument("--ceb", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None,
                   help="write the JSON report here as well as stdout")

    return parser


def cmd_datagen(args) -> int:
    kinds = tuple(k.strip() for k in args.kinds.split(",") if k.strip())
    records = datagen.write_dataset(args.out, args.train, args.val, args.test,
                                    size=args.size, seed=args.seed,
                                    kinds=kinds, min_frac=args.min_frac,
                                    max_frac=args.max_frac)
    datagen.check_split_hygiene(records)
    print(f"wrote {len(records)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = parse_config(args.config, args.set)
    out_dir = args.out or _default_run_dir()
    ckpt = pipeline.train(cfg, args.dataset, out_dir)
    print(f"final checkpoint: {ckpt}")
    splits = {r["split"] for r in datagen.read_manifest(args.dataset)}
    eval_split = next((s for s in ("val", "test") if s in splits), None)
    if eval_split is not None:
        rep = pipeline.evaluate(ckpt, args.dataset, split=eval_split,
                                out_dir=Path(out_dir) / "eval")
        print(f"{eval_split} f1={rep.f1:.4f} auc={rep.auc:.4f}")
    return 0


def cmd_eval(args) -> int:
    out_dir = args.out or _default_run_dir()
    rep = pipeline.evaluate(args.checkpoint, args.dataset, split=args.split,
                            threshold=args.threshold, out_dir=out_dir,
                            pooled=args.pooled)
    print(f"split={args.split} f1={rep.f1:.4f} auc={rep.auc:.4f} "
          f"({len(rep.per_image)} images) -> {out_dir}")
    return 0


def cmd_ablate(args) -> int:
    cfg = parse_config(args.config, args.set)
    out_dir = args.out or _default_run_dir()
    rows = pipeline.ablate(cfg, args.dataset, out_dir, split=args.split)
    fmt = "{:>2}  {:^4} {:^4} {:^4}  {:>7} {:>7}"
    print(fmt.format("ID", "SU", "MI", "AUX", "F1", "AUC"))
    for r in rows:
        print(fmt.format(r["id"],
                         "x" if r["su"] else "-",
                         "x" if r["mi"] else "-",
                         "x" if r["aux"] else "-",
                         f"{r['f1']:.4f}", f"{r['auc']:.4f}"))
    return 0


def cmd_robustness(args) -> int:
    out_dir = args.out or _default_run_dir()
    curves = pipeline.robustness(args.checkpoint, args.dataset, out_dir,
                                 jpeg_qualities=args.jpeg,
                                 blur_kernels=args.blur, split=args.split)
    for family, rows in curves.items():
        levels = " ".join(f"{r['level']}:{r['auc']:.3f}" for r in rows)
        print(f"{family}: {levels}")
    return 0


def cmd_theory_check(args) -> int:
    report = theory.run_theory_checks(n_joints=args.joints, n_ceb=args.ceb,
                                      seed=args.seed)
    text = json.dumps(report, indent=2)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    print(text)
    ok = (report["chain_rule"]["pass"] and report["loo_identity"]["pass"]
          and report["ceb_bound"]["pass"])
    print(f"theory-check: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


_COMMANDS = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "robustness": cmd_robustness,
    "theory-check": cmd_theory_check,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
