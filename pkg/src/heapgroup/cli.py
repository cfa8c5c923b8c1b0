"""Command-line entry point: gen-synthetic, train, infer, eval, retrieve.

Exit codes: 0 success, 1 usage or input error, 2 numerical abort,
3 empty result (feature bank without entries).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import evalkit as ek
from .head import forward
from .ingest import (
    ConsistencyError,
    FormatError,
    SyntheticSpec,
    generate_synthetic,
    load_annotations,
    load_feature_set,
    read_pgm,
    write_feature_set,
    write_ground_truth,
    write_pgm,
)
from .trainer import NonFiniteLossError, TrainConfig, load_checkpoint, train

log = logging.getLogger("heapgroup")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_EMPTY = 0, 1, 2, 3
METRIC_KEYS = ("corloc", "acc", "iou", "max_fbeta")


class InputError(Exception):
    """Bad user input; reported with exit code 1."""


class EmptyResult(Exception):
    """Nothing to report; exit code 3."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _thread_limit():
    n = os.environ.get("HEAP_THREADS")
    if not n:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=int(n))


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _load_json(path, what: str) -> dict:
    try:
        return json.loads(_existing(path, what).read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"{what} {path} is not valid JSON: {e}") from e


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _check_dims(state, features) -> None:
    if state.params.D != features.embed_dim:
        raise InputError(f"checkpoint has D={state.params.D} but features have D={features.embed_dim}")


# ----------------------------------------------------------- subcommands


def cmd_gen_synthetic(args) -> int:
    raw = _load_json(args.spec, "spec file") if args.spec else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = SyntheticSpec(**raw)
        spec.validate()
    except TypeError as e:
        raise InputError(f"bad spec: {e}") from e
    except ValueError as e:
        raise InputError(str(e)) from e
    data = generate_synthetic(spec)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_feature_set(data.features, args.out)
    manifest = write_ground_truth(data.truth, args.gt_dir, os.path.relpath(Path(args.out).resolve(),
                                                                          Path(args.gt_dir).resolve()))
    print(json.dumps({"features": str(args.out), "manifest": str(manifest), "images": len(data.features)}))
    return EXIT_OK


def cmd_train(args) -> int:
    raw = _load_json(args.config, "config file") if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.steps is not None:
        raw["steps"] = args.steps
    out = Path(args.out)
    raw.setdefault("log_path", str(out) + ".log.jsonl")
    try:
        config = TrainConfig.from_dict(raw)
        config.validate()
    except (TypeError, ValueError) as e:
        raise InputError(f"bad config: {e}") from e
    features = load_feature_set(_existing(args.features, "features file"))
    state = None
    if args.resume:
        state = load_checkpoint(_existing(args.resume, "checkpoint"))
        _check_dims(state, features)
    else:
        Path(config.log_path).unlink(missing_ok=True)
    echo = {"config": config.to_dict(), "features": str(args.features), "checkpoint": str(out)}
    print(json.dumps(echo, sort_keys=True))
    _write_json(str(out) + ".config.json", echo)
    out.parent.mkdir(parents=True, exist_ok=True)
    state = train(config, features, state, checkpoint_path=out)
    if args.figures:
        from .plotting import plot_loss_curves

        plot_loss_curves(state.log, Path(args.figures) / "loss_curves.png")
    last = state.log[-1] if state.log else {}
    print(json.dumps({"step": state.step, "total": last.get("total")}))
    return EXIT_OK


def _pgm8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def cmd_infer(args) -> int:
    state = load_checkpoint(_existing(args.ckpt, "checkpoint"))
    features = load_feature_set(_existing(args.features, "features file"))
    _check_dims(state, features)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = forward(features.images, state.params, state.head, mode="infer")
    h_values = {}
    for image, o in zip(features.images, outputs):
        smap = ek.saliency_map(o, image)
        mask = ek.binarize(smap, args.threshold)
        groups = ek.group_map(o, image)
        write_pgm(out_dir / f"{image.image_id}_saliency.pgm", _pgm8(smap))
        write_pgm(out_dir / f"{image.image_id}_mask.pgm", mask.astype(np.uint8) * 255)
        write_pgm(out_dir / f"{image.image_id}_groups.pgm", groups.astype(np.uint8))
        h_values[image.image_id] = {"H": o.h_values.tolist(), "occupancy": o.occupancy.tolist()}
        if args.figures:
            from .plotting import plot_image_panel

            plot_image_panel(image.image_id, smap, mask, groups, out_dir / "figures" / f"{image.image_id}.png")
    _write_json(out_dir / "h_values.json", h_values)
    print(json.dumps({"images": len(outputs), "out_dir": str(out_dir)}))
    return EXIT_OK


def _load_predictions(pred_dir: Path, ids):
    missing = [i for i in ids if not (pred_dir / f"{i}_mask.pgm").exists()
               or not (pred_dir / f"{i}_saliency.pgm").exists()]
    if missing:
        raise InputError(f"missing predictions for: {', '.join(missing)}")
    saliency = {i: read_pgm(pred_dir / f"{i}_saliency.pgm") / 255.0 for i in ids}
    masks = {i: read_pgm(pred_dir / f"{i}_mask.pgm") > 127 for i in ids}
    return saliency, masks


def cmd_eval(args) -> int:
    keys = [k.strip() for k in args.metrics.split(",") if k.strip()]
    unknown = [k for k in keys if k not in METRIC_KEYS]
    if unknown:
        raise InputError(f"unknown metrics {unknown}; choose from {list(METRIC_KEYS)}")
    truth = load_annotations(_existing(args.gt_manifest, "manifest"))
    pred_dir = _existing(args.pred_dir, "prediction directory")
    ids = truth.ids()
    saliency, masks = _load_predictions(pred_dir, ids)
    for i in ids:
        sal = truth[i].saliency
        if sal is not None and sal.shape != masks[i].shape:
            raise InputError(f"{i}: prediction is {masks[i].shape}, ground truth is {sal.shape}")
    report = ek.evaluate(ids, saliency, masks, truth, single_box=args.single_box)
    result = report.as_dict(keys)
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    out = Path(args.out) if args.out else pred_dir / "metrics.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text + "\n")
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", *keys])
        for m in report.per_image:
            row = asdict(m)
            writer.writerow([m.image_id, *["" if row.get(_per_image_key(k)) is None else row[_per_image_key(k)]
                                           for k in keys]])
    if args.figures:
        from .plotting import plot_metrics

        plot_metrics({k: result[k] for k in keys if result.get(k) is not None}, Path(args.figures) / "metrics.png")
    return EXIT_OK


def _per_image_key(k: str) -> str:
    return "corloc_hit" if k == "corloc" else k


def _label_maps(features, truth, state, oracle: bool):
    if oracle:
        maps = []
        for image in features.images:
            sem = truth[image.image_id].semantic
            if sem is None:
                raise InputError(f"{image.image_id}: no semantic mask for oracle objects")
            maps.append(sem)
        return maps
    outputs = forward(features.images, state.params, state.head, mode="infer")
    return [ek.predicted_label_map(o, image) for o, image in zip(outputs, features.images)]


def _semantics(features, truth):
    out = []
    for image in features.images:
        if image.image_id not in truth.images or truth[image.image_id].semantic is None:
            raise InputError(f"{image.image_id}: semantic ground truth missing")
        out.append(truth[image.image_id].semantic)
    return out


def cmd_retrieve(args) -> int:
    if len(args.gt) > 2:
        raise InputError("--gt takes at most two manifests (train, then val)")
    gts = [load_annotations(_existing(p, "manifest")) for p in args.gt]
    train_truth, val_truth = gts[0], gts[-1]
    train_fs = load_feature_set(_existing(args.train_features, "train features"))
    val_fs = load_feature_set(_existing(args.val_features, "val features"))
    state = None
    if not args.oracle_masks:
        if not args.ckpt:
            raise InputError("--ckpt is required unless --oracle-masks is given")
        state = load_checkpoint(_existing(args.ckpt, "checkpoint"))
        _check_dims(state, train_fs)
        _check_dims(state, val_fs)
    train_sem, val_sem = _semantics(train_fs, train_truth), _semantics(val_fs, val_truth)
    bank = ek.build_bank(train_fs.images, _label_maps(train_fs, train_truth, state, args.oracle_masks),
                         train_sem, args.mode)
    if len(bank) == 0:
        raise EmptyResult("feature bank is empty: no predicted object overlaps a labelled region")
    val_maps = _label_maps(val_fs, val_truth, state, args.oracle_masks)
    miou, per_class = ek.retrieval_miou(bank, val_fs.images, val_maps, val_sem, args.mode)
    result = {
        "retrieval_miou": miou,
        "per_class": {str(k): v for k, v in per_class.items()},
        "mode": args.mode,
        "bank_size": len(bank),
        "objects_per_image": {im.image_id: len(ek.extract_objects(im, m, args.mode))
                              for im, m in zip(val_fs.images, val_maps)},
    }
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="heapgroup", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synthetic", help="write a planted-region feature set and its ground truth")
    g.add_argument("--spec", help="JSON file with SyntheticSpec fields")
    g.add_argument("--out", required=True, help="features file to write")
    g.add_argument("--gt-dir", required=True, help="directory for masks and manifest.json")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_synthetic)

    t = sub.add_parser("train", help="train the grouping head")
    t.add_argument("--config", help="flat JSON file with TrainConfig fields")
    t.add_argument("--features", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--figures", help="directory for the loss-curve figure")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="write saliency maps, masks and group maps")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--features", required=True)
    i.add_argument("--out-dir", required=True)
    i.add_argument("--threshold", type=float, default=ek.FG_THRESHOLD)
    i.add_argument("--figures", action="store_true", help="also render per-image panels")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against a manifest")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--gt-manifest", required=True)
    e.add_argument("--metrics", default=",".join(METRIC_KEYS), help="comma-separated subset of " + ",".join(METRIC_KEYS))
    e.add_argument("--out", help="metrics JSON path (default PRED_DIR/metrics.json); a CSV is written next to it")
    e.add_argument("--single-box", action="store_true", help="CorLoc with the largest component only")
    e.add_argument("--figures", help="directory for the metrics figure")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("retrieve", help="segmentation retrieval mIoU")
    r.add_argument("--ckpt")
    r.add_argument("--train-features", required=True)
    r.add_argument("--val-features", required=True)
    r.add_argument("--gt", action="append", required=True,
                   help="manifest with semantic masks; give twice for separate train and val manifests")
    r.add_argument("--mode", choices=("single", "multi"), default="multi")
    r.add_argument("--oracle-masks", action="store_true", help="use ground-truth semantic regions as objects")
    r.add_argument("--out")
    r.set_defaults(func=cmd_retrieve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except NonFiniteLossError as e:
        print(f"heapgroup: numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except EmptyResult as e:
        print(f"heapgroup: {e}", file=sys.stderr)
        return EXIT_EMPTY
    except (InputError, FormatError, ConsistencyError, OSError) as e:
        print(f"heapgroup: error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
