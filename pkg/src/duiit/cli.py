"""Operator surface: dataset synthesis, training, translation, evaluation, and
method comparison.

Exit codes: 0 success, 2 configuration or validation error, 3 training aborted.
``DUIIT_RUNS_DIR`` overrides the run-output root.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, load_config_file, resolve_config
from .data import (
    DatasetError,
    LabeledImage,
    ModalityDataset,
    SyntheticTaskSpec,
    generate_synthetic_task,
    load_dataset,
    save_dataset,
)
from .engine import METHODS, RunReport, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORTED = 3


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    try:
        spec = SyntheticTaskSpec(
            n_source=args.n_source,
            n_target=args.n_target,
            resolution=(args.resolution, args.resolution) if isinstance(args.resolution, int) else tuple(args.resolution),
            label_rule=args.label_rule,
            modality_transform=args.transform,
            noise_std=args.noise_std,
            seed=args.seed,
        )
    except DatasetError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    out = Path(args.out)
    if args.no_clobber and out.exists() and any(out.iterdir()):
        return _fail(f"output directory {out} is not empty (--no-clobber)", EXIT_CONFIG)
    source, target = generate_synthetic_task(spec)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(source, out, bits=args.bits)
    save_dataset(target, out, bits=args.bits)
    for ds in (source, target):
        labels = ds.labels()
        print(
            f"{ds.modality}: {len(ds)} images at {ds.resolution[0]}x{ds.resolution[1]}, "
            f"labels in [{labels.min():.2f}, {labels.max():.2f}]"
        )
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _collect_overrides(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    train: dict = {}
    for flag, key in (
        ("seed", "seed"), ("epochs", "total_epochs"), ("n_runs", "n_runs"),
        ("batch_size", "batch_size"), ("lambda_pred", "lambda_pred"),
    ):
        value = getattr(args, flag)
        if value is not None:
            train[key] = value
    if train:
        overrides["train"] = train
    if args.method is not None:
        overrides["method"] = args.method
    if args.out is not None:
        overrides["output"] = {"dir": args.out}
    return overrides


def cmd_train(args: argparse.Namespace) -> int:
    try:
        raw = load_config_file(args.config)
        exp = resolve_config(raw, _collect_overrides(args))
        source, target = exp.load_datasets()
    except (ConfigError, DatasetError) as exc:
        return _fail(str(exc), EXIT_CONFIG)

    out_root = Path(os.environ.get("DUIIT_RUNS_DIR", exp.output_dir))
    report = run_experiment(
        exp.train, source, target, exp.split,
        method=exp.method, out_root=out_root, jobs=args.jobs,
    )
    print(f"method={report.method} config={report.config_hash} protocol={report.protocol_hash}")
    for run in report.runs:
        mse = run.get("test_mse")
        shown = f"{mse:.4f}" if mse is not None else "-"
        print(f"  seed {run['seed']}: status={run['status']} test_mse={shown}")
    print(f"mean={report.mean:.4f} std={report.std:.4f} over {len(report.runs)} runs")
    print(f"report: {out_root / report.config_hash / 'report.json'}")
    if report.flags.get("excluded_runs"):
        return _fail(f"{report.flags['excluded_runs']} run(s) aborted on non-finite loss", EXIT_ABORTED)
    return EXIT_OK


# ---------------------------------------------------------------------------
# translate
# ---------------------------------------------------------------------------


def _grid_png(pairs: list[tuple[np.ndarray, np.ndarray]], path: Path) -> None:
    from PIL import Image

    def to8(p: np.ndarray) -> np.ndarray:
        return np.clip(np.round((p[..., 0] + 1.0) * 127.5), 0, 255).astype(np.uint8)

    rows = [np.concatenate([to8(a), to8(b)], axis=1) for a, b in pairs]
    Image.fromarray(np.concatenate(rows, axis=0), mode="L").save(path)


def cmd_translate(args: argparse.Namespace) -> int:
    from .baselines import translate_dataset

    try:
        payload = ckpt.load_checkpoint(args.checkpoint)
        state = ckpt.restore_translator(payload)
        source = load_dataset(args.source_root, args.source_modality)
    except (ckpt.CheckpointError, DatasetError, OSError) as exc:
        return _fail(str(exc), EXIT_CONFIG)
    meta = payload["meta"]
    expected = tuple(meta.get("resolution", source.resolution))
    if source.resolution != expected:
        return _fail(
            f"dataset resolution {source.resolution} does not match checkpoint {expected}", EXIT_CONFIG
        )
    out = Path(args.out)
    if args.no_clobber and out.exists() and any(out.iterdir()):
        return _fail(f"output directory {out} is not empty (--no-clobber)", EXIT_CONFIG)
    translated = translate_dataset(state.gen_s2t, source, meta.get("target_modality", "translated"))
    save_dataset(translated, out, bits=args.bits)
    print(f"translated {len(translated)} images -> {out / translated.modality}")
    if args.grid is not None:
        k = min(8, len(source))
        pairs = [(source[i].pixels, translated[i].pixels) for i in range(k)]
        _grid_png(pairs, Path(args.grid))
        print(f"grid: {args.grid}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _build_extractor(name: str, channels: int):
    from .metrics import TinyFeatureExtractor, TorchvisionExtractor

    if name == "tiny":
        return TinyFeatureExtractor(channels=channels)
    if name.startswith("torchvision:"):
        return TorchvisionExtractor(name.split(":", 1)[1])
    raise ConfigError(f"unknown extractor {name!r} (use 'tiny' or 'torchvision:<model>')")


def cmd_evaluate(args: argparse.Namespace) -> int:
    from .metrics import fid as fid_fn
    from .metrics import inception_score, mse
    from .predictor import dataset_to_tensors, predict

    try:
        payload = ckpt.load_checkpoint(args.checkpoint)
        target = load_dataset(args.data, args.target_modality)
        extractor = _build_extractor(args.extractor, target.channels)
    except (ckpt.CheckpointError, DatasetError, ConfigError, OSError) as exc:
        return _fail(str(exc), EXIT_CONFIG)

    import torch

    result: dict = {"checkpoint": str(args.checkpoint), "extractor": extractor.name}
    tgt_imgs, tgt_labels = dataset_to_tensors(target)
    if "predictor" in payload:
        net = ckpt.restore_predictor(payload)
        net.eval()
        with torch.no_grad():
            preds = torch.cat([
                predict(net, tgt_imgs[i:i + 256]) for i in range(0, tgt_imgs.shape[0], 256)
            ])
        result["mse"] = mse(preds.numpy(), tgt_labels.numpy())
        result["mse_n"] = len(target)

    if args.source_modality is not None:
        from .baselines import translate_dataset

        try:
            source = load_dataset(args.data, args.source_modality)
            state = ckpt.restore_translator(payload)
        except (ckpt.CheckpointError, DatasetError) as exc:
            return _fail(str(exc), EXIT_CONFIG)
        translated = translate_dataset(state.gen_s2t, source, target.modality + "_translated")
        tr_imgs, _ = dataset_to_tensors(translated)
        if args.inception_score:
            is_mean, is_std = inception_score(tr_imgs, extractor, n_splits=args.splits)
            result.update({"is_mean": is_mean, "is_std": is_std, "is_n": len(translated)})
        if args.fid:
            result["fid"] = fid_fn(tr_imgs, tgt_imgs, extractor)
            result["fid_n"] = [len(translated), len(target)]

    text = json.dumps(result, indent=2)
    print(text)
    if args.out is not None:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def cmd_compare(args: argparse.Namespace) -> int:
    reports: list[RunReport] = []
    for path in args.reports:
        try:
            with open(path, encoding="utf-8") as fh:
                reports.append(RunReport.from_dict(json.load(fh)))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            return _fail(f"cannot read report {path}: {exc}", EXIT_CONFIG)
    versions = {r.schema_version for r in reports}
    if len(versions) > 1:
        return _fail(f"mixed report schema versions: {sorted(versions)}", EXIT_CONFIG)

    rows = sorted(
        (
            {
                "method": r.method,
                "mean": r.mean,
                "std": r.std,
                "n_runs": len(r.runs),
                "config_hash": r.config_hash,
                "protocol_hash": r.protocol_hash,
            }
            for r in reports
        ),
        key=lambda row: row["mean"],
    )
    header = ["method", "mean", "std", "n_runs", "config_hash", "protocol_hash"]
    widths = [max(len(h), 14) for h in header]
    line = "  ".join(h.ljust(w) for h, w in zip(header, widths))
    print(line)
    print("-" * len(line))
    for row in rows:
        cells = [
            row["method"], f"{row['mean']:.4f}", f"{row['std']:.4f}",
            str(row["n_runs"]), row["config_hash"], row["protocol_hash"],
        ]
        print("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    if len({row["protocol_hash"] for row in rows}) > 1:
        print("note: reports use different data/split protocols; comparison is not like-for-like")
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        print(f"csv: {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="duiit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic two-modality dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-source", type=int, default=2000)
    p.add_argument("--n-target", type=int, default=700)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label-rule", default="disk-intensity")
    p.add_argument("--transform", default="invert")
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)
    p.add_argument("--no-clobber", action="store_true")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="run a multi-seed training experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-runs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda-pred", type=float)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("translate", help="translate a source dataset through a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source-root", required=True)
    p.add_argument("--source-modality", default="source")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", help="write a side-by-side PNG of the first pairs")
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)
    p.add_argument("--no-clobber", action="store_true")
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("evaluate", help="score a checkpoint: test MSE and image metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target-modality", default="target")
    p.add_argument("--source-modality")
    p.add_argument("--fid", action="store_true")
    p.add_argument("--inception-score", action="store_true")
    p.add_argument("--splits", type=int, default=10)
    p.add_argument("--extractor", default="tiny")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("compare", help="tabulate run reports side by side")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", help="also write the table as CSV")
    p.set_defaults(fn=cmd_compare)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "compare" and len(args.reports) < 2:
        return _fail("compare needs at least two reports", EXIT_CONFIG)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
