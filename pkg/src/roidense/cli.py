"""Command-line surface: dataset generation, training, evaluation, gradient
verification, and the roi extraction demo.

Exit codes are a stable contract: 0 success, 1 verification failure,
2 usage or input error, 3 numeric failure.

RDNS_THREADS caps worker parallelism (default 1 for reproducibility); it is
also propagated to the BLAS thread knobs before numpy loads, so linear
algebra reductions keep a fixed order.
"""

from __future__ import annotations

import os

_THREADS = os.environ.get("RDNS_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import gradcheck as gradcheck_mod  # noqa: E402
from . import report  # noqa: E402
from .densenet import load_network, micro_config, save_network  # noqa: E402
from .errors import (DomainError, NumericError, ParseError,  # noqa: E402
                     RoidenseError, TrainingError, UndefinedMetricError)
from .metrics import (ScoredSample, metrics_to_csv, roc_points,  # noqa: E402
                      roc_to_csv)
from .pipeline import (DetectorConfig, TrainConfig,  # noqa: E402
                       evaluate_classifier, evaluate_detector, load_detector,
                       save_detector, train_classifier, train_detector)
from .roi import RoIBox, RoiSpec, roi_align, roi_pool  # noqa: E402
from .rng import RandomSource  # noqa: E402
from .synth import (Dataset, DatasetSpec, export_dataset,  # noqa: E402
                    generate_dataset, import_dataset)
from .tensor import Tensor  # noqa: E402

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _parse_pair(text: str, what: str) -> tuple[int, int]:
    parts = text.lower().replace("x", ",").split(",")
    try:
        if len(parts) == 1:
            v = int(parts[0])
            return v, v
        if len(parts) == 2:
            return int(parts[0]), int(parts[1])
    except ValueError:
        pass
    raise DomainError(f"cannot parse {what} from {text!r}")


def _parse_blocks(text: str) -> tuple[int, ...]:
    try:
        blocks = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise DomainError(f"cannot parse --blocks from {text!r}")
    if not blocks:
        raise DomainError("--blocks needs at least one entry")
    return blocks


def _parse_roi(text: str) -> tuple[float, float, float, float]:
    parts = text.split(",")
    if len(parts) != 4:
        raise DomainError(f"--roi needs x1,y1,x2,y2, got {text!r}")
    try:
        x1, y1, x2, y2 = (float(p) for p in parts)
    except ValueError:
        raise DomainError(f"--roi needs numbers, got {text!r}")
    return x1, y1, x2, y2


def _load_dataset(path: str) -> Dataset:
    root = Path(path)
    if not (root / "manifest.json").is_file():
        raise ParseError(f"no dataset at {root} (missing manifest.json)")
    return import_dataset(root)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise DomainError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not args.force:
        raise DomainError(
            f"output directory {out} is not empty (use --force to overwrite)")
    image_size = _parse_pair(args.image_size, "--image-size")
    spec = DatasetSpec(count=args.count, benign_count=args.benign,
                       malignant_count=args.malignant,
                       split_fraction=args.split_fraction,
                       image_size=image_size, master_seed=args.seed)
    dataset = generate_dataset(spec)
    export_dataset(dataset, out)
    preview = [*dataset.train[:6], *dataset.validation[:2]]
    if preview:
        report.save_dataset_preview(
            [ph.image.data[0, 0] for ph in preview],
            [[(l.box.x1, l.box.y1, l.box.x2, l.box.y2) for l in ph.lesions]
             for ph in preview],
            [f"case {ph.seed_id}: {ph.label}" for ph in preview],
            out / "preview.png")
    print(f"wrote {spec.count} cases ({spec.benign_count} benign / "
          f"{spec.malignant_count} malignant) to {out}")
    print(f"split: {len(dataset.train)} train / "
          f"{len(dataset.validation)} validation")
    return EXIT_OK


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, batch_size=args.batch,
                       epochs=args.epochs, seed=args.seed)


def cmd_train(args: argparse.Namespace) -> int:
    dataset = _load_dataset(args.dataset)
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def echo(row: dict) -> None:
        cells = ", ".join(f"{k}={row[k]:.6g}" for k in row if k != "epoch")
        print(f"epoch {row['epoch']}: {cells}")

    if args.kind == "classifier":
        net_cfg = micro_config(input_size=dataset.spec.image_size,
                               growth_rate=args.k,
                               block_layers=_parse_blocks(args.blocks),
                               compression=args.theta)
        result = train_classifier(dataset, cfg, net_cfg)
        for row in result.log_rows:
            echo(row)
        ckpt = out / "classifier.ckpt"
        save_network(ckpt, result.model)
        columns = ["epoch", "train_loss", "val_accuracy", "val_auc"]
    else:
        det_cfg = DetectorConfig(image_size=dataset.spec.image_size,
                                 growth_rate=args.k,
                                 compression=args.theta)
        result = train_detector(dataset, cfg, det_cfg)
        for row in result.log_rows:
            echo(row)
        ckpt = out / "detector.ckpt"
        save_detector(ckpt, result.model)
        columns = ["epoch", "train_loss", "class_loss", "box_loss",
                   "mask_loss", "val_map"]
    report.write_text(out / "training_log.csv",
                      report.rows_to_csv(result.log_rows, columns))
    if result.log_rows:
        report.save_training_curves(result.log_rows, out / "loss_curve.png")
    print(f"checkpoint: {ckpt}")
    print(f"log: {out / 'training_log.csv'}")
    if result.best_metrics:
        best = ", ".join(f"{k}={v:.6g}" for k, v in result.best_metrics.items())
        print(f"best epoch {result.best_epoch}: {best}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    dataset = _load_dataset(args.dataset)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ParseError(f"no checkpoint at {ckpt}")
    phantoms = dataset.validation if args.split == "validation" else dataset.train
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "classifier":
        net = load_network(ckpt)
        rep = evaluate_classifier(net, phantoms)
        report.write_text(out / "metrics.csv", metrics_to_csv(rep.values))
        samples = [{"seed_id": i, "label": l, "score": s}
                   for i, l, s in zip(rep.seed_ids, rep.labels, rep.scores)]
        report.write_text(out / "predictions.csv",
                          report.rows_to_csv(samples,
                                             ["seed_id", "label", "score"]))
        pts = roc_points([ScoredSample(s, l)
                          for s, l in zip(rep.scores, rep.labels)])
        report.write_text(out / "roc.csv", roc_to_csv(pts))
        report.save_roc_figure(pts, rep.values["auc"], out / "roc.png")
        line = ", ".join(f"{k}={v:.4f}" for k, v in rep.values.items())
        print(f"{args.split}: {line}")
    else:
        det = load_detector(ckpt)
        rep = evaluate_detector(det, phantoms)
        report.write_text(out / "metrics.csv",
                          metrics_to_csv({"map": rep.map_value}))
        cases = [{"seed_id": i, "detection_ratio": r}
                 for i, r in zip(rep.seed_ids, rep.ratios)]
        report.write_text(out / "map_cases.csv",
                          report.rows_to_csv(cases,
                                             ["seed_id", "detection_ratio"]))
        report.save_ratio_histogram(rep.ratios, rep.map_value,
                                    out / "detection_ratios.png")
        print(f"{args.split}: map={rep.map_value:.4f} over "
              f"{len(rep.ratios)} cases")
    print(f"reports under {out}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = gradcheck_mod.run_suite(eps=args.eps,
                                      seeds=range(args.seed, args.seed + 5),
                                      break_op=args.break_op)
    width = max(len(r.name) for r in results)
    print(f"{'op'.ljust(width)}  {'max rel err':>12}  {'tol':>8}  status")
    failed = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name.ljust(width)}  {r.max_error:>12.3e}  "
              f"{r.tolerance:>8.0e}  {status}")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}",
              file=sys.stderr)
        return EXIT_VERIFICATION
    return EXIT_OK


def cmd_roi_demo(args: argparse.Namespace) -> int:
    h, w = _parse_pair(args.map_size, "--map-size")
    x1, y1, x2, y2 = _parse_roi(args.roi)
    roi_box = RoIBox(batch_index=0, x1=x1, y1=y1, x2=x2, y2=y2)
    if x2 >= w or y2 >= h or x1 < 0 or y1 < 0:
        raise DomainError(f"roi {args.roi} falls outside the {h}x{w} map")
    oh, ow = _parse_pair(args.out_size, "--out-size")
    spec = RoiSpec(oh, ow, args.sampling_ratio)
    if args.fill == "constant":
        fmap = np.full((h, w), args.value)
    elif args.fill == "ramp":
        fmap = np.arange(h * w, dtype=np.float64).reshape(h, w)
    else:
        fmap = RandomSource(args.seed).uniforms(h * w).reshape(h, w)
    features = Tensor(fmap[None, None])
    aligned = roi_align(features, [roi_box], spec).data[0, 0]
    pooled, _ = roi_pool(features, [roi_box], spec)
    pooled = pooled.data[0, 0]
    rows = [{"bin_row": r, "bin_col": c,
             "roi_align": aligned[r, c], "roi_pool": pooled[r, c]}
            for r in range(oh) for c in range(ow)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_text(out / "roi_demo.csv",
                      report.rows_to_csv(rows, ["bin_row", "bin_col",
                                                "roi_align", "roi_pool"]))
    report.save_roi_demo_figure(fmap, aligned, pooled, (x1, y1, x2, y2),
                                out / "roi_demo.png")
    print(f"roi demo written under {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roidense",
        description="Synthetic-phantom detection, segmentation and "
                    "classification pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=344)
    p.add_argument("--benign", type=int, default=178)
    p.add_argument("--malignant", type=int, default=166)
    p.add_argument("--split-fraction", type=float, default=0.8)
    p.add_argument("--image-size", default="64x64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the classifier or the detector")
    p.add_argument("kind", choices=("classifier", "detector"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=8, help="growth rate")
    p.add_argument("--blocks", default="2,2",
                   help="per-block layer counts (classifier)")
    p.add_argument("--theta", type=float, default=0.5,
                   help="transition compression")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("kind", choices=("classifier", "detector"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("validation", "train"),
                   default="validation")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="verify every backward pass against finite "
                            "differences")
    p.add_argument("--eps", type=float, default=gradcheck_mod.DEFAULT_EPS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--break-op", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("roi-demo",
                       help="contrast bilinear alignment with quantized "
                            "pooling on one roi")
    p.add_argument("--out", required=True)
    p.add_argument("--map-size", default="8x8")
    p.add_argument("--roi", required=True, help="x1,y1,x2,y2")
    p.add_argument("--out-size", default="2x2")
    p.add_argument("--sampling-ratio", type=int, default=2)
    p.add_argument("--fill", choices=("random", "ramp", "constant"),
                   default="random")
    p.add_argument("--value", type=float, default=1.0,
                   help="fill value for --fill constant")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_roi_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TrainingError, NumericError, UndefinedMetricError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RoidenseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
