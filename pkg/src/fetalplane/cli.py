"""Command-line interface: synth, split, train, eval, explain, export-embeddings.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from pathlib import Path

from .archive import load_model, save_model
from .backbone import ConfigError
from .config import coerce, load_config, split_configs
from .data import PLANE_LABELS, DataError, load_image, load_manifest, synth_dataset
from .metrics import compute_report, roc_csv_rows
from .model import build_model, extract_embedding, predict_proba
from .tensor import set_dtype
from .training import TrainingError, patient_split_indices, stratified_split_indices, train_loop

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=default(None), help="master seed (overrides config)")
    parser.add_argument("--config", default=default(None), help="key = value file or preset name")
    parser.add_argument("--dtype", choices=("f32", "f64"), default=default("f32"))
    parser.add_argument("--quiet", action="store_true", default=default(False))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fetalplane", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--resolution", type=int, default=64)

    p = sub.add_parser("split", parents=[common], help="stratified train/test split of a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--train-out", required=True)
    p.add_argument("--test-out", required=True)
    p.add_argument("--train-fraction", type=float, default=None)
    p.add_argument("--mode", choices=("image", "patient"), default=None)

    p = sub.add_parser("train", parents=[common], help="train a model on a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output archive")
    p.add_argument("--history", help="write per-epoch history JSON here")
    p.add_argument("--backbone")
    p.add_argument("--attention", choices=("none", "sda", "mha", "ssa"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")

    p = sub.add_parser("eval", parents=[common], help="evaluate an archive on a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="MetricsReport JSON")
    p.add_argument("--text", help="plain-text table")
    p.add_argument("--roc", help="ROC curve points CSV")

    p = sub.add_parser("explain", parents=[common], help="GradCAM heatmaps")
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--data")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--limit", type=int, default=None, help="first N manifest rows only")
    p.add_argument("--target", type=int, default=None, help="class index (default: predicted)")
    p.add_argument("--layer", choices=("features", "attention"), default="features")
    p.add_argument("--score", choices=("logit", "prob"), default="logit")
    p.add_argument("--alpha", type=float, default=0.4)

    p = sub.add_parser("export-embeddings", parents=[common], help="penultimate activations as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    return parser


def _log(args, msg: str) -> None:
    if not args.quiet:
        print(msg, file=sys.stderr)


def _atomic_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _run_values(args) -> dict:
    """Config file values, then explicit flags on top."""
    values = load_config(args.config) if args.config else {}
    for flag in ("backbone", "attention", "epochs", "batch_size", "learning_rate", "train_fraction"):
        v = getattr(args, flag, None)
        if v is not None:
            values[flag] = v
    if getattr(args, "mode", None) is not None:
        values["split_mode"] = args.mode
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        values[key] = coerce(key, raw)
    if args.seed is not None:
        values["seed"] = args.seed
    return values


def _class_names(num_classes: int) -> list[str]:
    return list(PLANE_LABELS[:num_classes])


def cmd_synth(args) -> int:
    seed = 0 if args.seed is None else args.seed
    manifest = synth_dataset(args.out, args.classes, args.per_class, args.resolution, seed)
    _log(args, f"wrote {len(manifest)} images and {Path(args.out) / 'manifest.csv'}")
    return EXIT_OK


def cmd_split(args) -> int:
    _, train_cfg = split_configs(_run_values(args))
    manifest = load_manifest(args.data)
    if train_cfg.split_mode == "patient":
        tr, te = patient_split_indices(manifest.patients, train_cfg.train_fraction, train_cfg.seed)
    else:
        tr, te = stratified_split_indices(manifest.labels, train_cfg.train_fraction, train_cfg.seed)
    manifest.subset(tr).write(args.train_out)
    manifest.subset(te).write(args.test_out)
    _log(args, f"train {len(tr)}  test {len(te)}")
    return EXIT_OK


def cmd_train(args) -> int:
    model_cfg, train_cfg = split_configs(_run_values(args))
    names = _class_names(model_cfg.num_classes)
    manifest = load_manifest(args.data, names)
    model = build_model(model_cfg, train_cfg.seed)
    c, res, _ = model.input_shape
    images = manifest.load_images(res, c)
    callbacks = [] if args.quiet else [
        lambda r: print(f"epoch {r['epoch']:3d}  loss {r['loss']:.4f}  acc {r['accuracy']:.4f}  "
                        f"{r['seconds']:.1f}s", file=sys.stderr)
    ]
    model, history = train_loop(model, images, manifest.labels, train_cfg, callbacks)
    save_model(model, args.out, names, {"train_config": train_cfg.to_dict()})
    if args.history:
        _atomic_text(args.history, json.dumps(history, indent=2) + "\n")
    _log(args, f"saved {args.out}")
    return EXIT_OK


def _load(args):
    model, ext = load_model(args.model)
    names = ext.get("class_names") or _class_names(model.config.num_classes)
    return model, names


def cmd_eval(args) -> int:
    model, names = _load(args)
    manifest = load_manifest(args.data, names)
    c, res, _ = model.input_shape
    probs = predict_proba(model, manifest.load_images(res, c).astype(model.parameters()[0].dtype))
    rep = compute_report(probs, manifest.labels, names)
    _atomic_text(args.report, rep.to_json() + "\n")
    if args.text:
        _atomic_text(args.text, rep.to_text() + "\n")
    if args.roc:
        rows = ["class,fpr,tpr,threshold"] + [f"{n},{f:.6g},{t:.6g},{h:.6g}"
                                              for n, f, t, h in roc_csv_rows(probs, manifest.labels, names)]
        _atomic_text(args.roc, "\n".join(rows) + "\n")
    if not args.quiet:
        print(rep.to_text())
    return EXIT_OK


def cmd_explain(args) -> int:
    from .explain import gradcam, save_heatmap

    model, names = _load(args)
    c, res, _ = model.input_shape
    if args.image:
        items = [(Path(args.image), None)]
    else:
        manifest = load_manifest(args.data, names)
        records = manifest.records[: args.limit] if args.limit else manifest.records
        items = [(manifest.resolve(r), r.plane_label) for r in records]
    out = Path(args.out)
    rows = []
    for path, label in items:
        image = load_image(path, res, c).astype(model.parameters()[0].dtype)
        hm = gradcam(model, image, args.target, layer=args.layer, score=args.score)
        save_heatmap(hm, image, out / path.stem, args.alpha)
        rows.append((path.as_posix(), label or "", names[hm.predicted_class], names[hm.target_class],
                     *hm.argmax))
    lines = ["image_path,label,predicted,target,peak_y,peak_x"] + [",".join(map(str, r)) for r in rows]
    _atomic_text(out / "index.csv", "\n".join(lines) + "\n")
    _log(args, f"wrote {len(rows)} heatmaps to {out}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    model, names = _load(args)
    manifest = load_manifest(args.data, names)
    c, res, _ = model.input_shape
    emb = extract_embedding(model, manifest.load_images(res, c).astype(model.parameters()[0].dtype))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out.parent, prefix=f".{out.name}.", suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"] + [f"e{i}" for i in range(emb.shape[1])])
        for rec, row in zip(manifest.records, emb):
            writer.writerow([rec.image_path, rec.plane_label] + [repr(float(v)) for v in row])
    os.replace(tmp, out)
    _log(args, f"wrote {emb.shape[0]} x {emb.shape[1]} embeddings to {out}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "export-embeddings": cmd_export_embeddings,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    set_dtype("float64" if args.dtype == "f64" else "float32")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"fetalplane: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"fetalplane: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError) as exc:
        print(f"fetalplane: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"fetalplane: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
