"""Command-line entry point: preprocess, synth, split, train, eval, evolve, infer.

JSON is the single serialization surface for configs and reports; text tables
are presentation only. Every source of randomness takes a --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import dataset as ds
from . import evolve as ev
from . import metrics as mt
from . import model as md
from . import phantom as ph
from . import preprocess as pp
from . import training as tr
from .imaging import BBox, GrayImage, Label, LabeledBox, iou, load_png, save_png
from .losses import LossWeights

GT_COLOR = (0, 200, 0)        # ground truth: green
MULTITASK_COLOR = (220, 40, 40)   # multi-task predictions: red
DETECTION_COLOR = (50, 90, 230)   # detection-approach predictions: blue

_MODEL_KEYS = {
    "mode", "input_size", "backbone_channels", "grid_size", "anchors_per_cell",
    "anchor_priors", "classifier_hidden", "dropout_rate", "pooled_size",
}
_TRAIN_KEYS = {
    "learning_rate", "momentum", "loss_weights", "max_epochs", "batch_size",
    "weight_decay", "patience", "seed", "w_pos",
}


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Effective model + training configuration for one run."""

    model: md.ModelConfig
    train: tr.TrainConfig

    def to_json_dict(self) -> dict:
        return {"model": self.model.to_json_dict(), "train": self.train.to_json_dict()}


def default_run_config(mode: md.Mode) -> RunConfig:
    genome = ev.HyperParams.defaults(mode).as_dict()
    weights = LossWeights(
        alpha=genome["alpha"],
        beta=genome["beta"],
        gamma=genome.get("gamma", 0.0),
        delta=genome.get("delta", 0.0),
    )
    model = md.ModelConfig(mode=mode, dropout_rate=genome.get("dropout", 0.0))
    train = tr.TrainConfig(
        learning_rate=genome["learning_rate"],
        momentum=genome["sgd_momentum"],
        loss_weights=weights,
    )
    return RunConfig(model=model, train=train)


def load_run_config(mode: md.Mode, config_path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults for the mode, overlaid with a JSON config file and CLI overrides."""
    base = default_run_config(mode)
    model_dict = base.model.to_json_dict()
    train_dict = base.train.to_json_dict()

    if config_path is not None:
        with open(config_path, "r", encoding="utf-8") as fh:
            try:
                payload = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{config_path}: invalid JSON ({e.msg})") from None
        unknown = payload.keys() - {"model", "train"}
        if unknown:
            raise ConfigError(f"{config_path}: unknown top-level keys {sorted(unknown)}")
        for section, allowed, target in (
            ("model", _MODEL_KEYS, model_dict),
            ("train", _TRAIN_KEYS, train_dict),
        ):
            body = payload.get(section, {})
            bad = body.keys() - allowed
            if bad:
                raise ConfigError(f"{config_path}: unknown {section} keys {sorted(bad)}")
            target.update(body)

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in _TRAIN_KEYS:
            train_dict[key] = value
        elif key in _MODEL_KEYS:
            model_dict[key] = value
        else:
            raise ConfigError(f"unknown override {key!r}")

    model_dict["mode"] = mode.value
    try:
        return RunConfig(
            model=md.ModelConfig.from_json_dict(model_dict),
            train=tr.TrainConfig.from_json_dict(train_dict),
        )
    except (ValueError, KeyError) as e:
        raise ConfigError(f"invalid configuration: {e}") from None


def render_overlay(
    image: GrayImage,
    pred: LabeledBox | None,
    gt: BBox | None,
    pred_color=MULTITASK_COLOR,
    pred_label: Label | None = None,
) -> Image.Image:
    """Ground truth in green, prediction in the approach's color, text burned in."""
    arr = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    im = Image.fromarray(arr, mode="L").convert("RGB")
    draw = ImageDraw.Draw(im)
    if gt is not None:
        draw.rectangle([gt.x_min, gt.y_min, gt.x_max - 1, gt.y_max - 1], outline=GT_COLOR, width=2)
    lines = []
    if pred is not None:
        b = pred.box
        draw.rectangle(
            [
                max(b.x_min, 0), max(b.y_min, 0),
                min(b.x_max, image.width) - 1, min(b.y_max, image.height) - 1,
            ],
            outline=pred_color,
            width=2,
        )
        shown = pred_label if pred_label is not None else pred.label
        lines.append(f"{shown.value} {pred.confidence:.2f}")
        if gt is not None:
            lines.append(f"IoU {iou(b, gt):.2f}")
    else:
        lines.append("no detection")
    draw.text((4, 4), "\n".join(lines), fill=(255, 255, 60))
    return im


def _phantom_params(args) -> ph.PhantomParams:
    kwargs = dict(seed=args.seed)
    if args.p_distended is not None:
        kwargs["p_distended"] = args.p_distended
    if args.clutter is not None:
        kwargs["clutter_level"] = args.clutter
    if args.sigma is not None:
        kwargs["speckle_noise_sigma"] = args.sigma
    if args.image_size is not None:
        kwargs["image_size"] = args.image_size
    if args.borderline:
        kwargs.update(
            borderline=True,
            recess_thickness_nondistended=(4.0, 14.0),
            recess_thickness_distended=(10.0, 40.0),
        )
    return ph.PhantomParams(**kwargs)


def _cmd_synth(args) -> int:
    params = _phantom_params(args)
    out = Path(args.out)
    if args.raw:
        (out / "raw").mkdir(parents=True, exist_ok=True)
        records = []
        for i in range(args.n):
            raw, truth, ann = ph.generate_raw_canvas(params, i)
            save_png(raw, out / "raw" / f"{ann.image_id}.png")
            records.append(
                {
                    "image": f"raw/{ann.image_id}.png",
                    "crop_box": truth.box.to_list(),
                    "label": ann.label.value,
                    "sqr_box_raw": ann.sqr_box.to_list(),
                }
            )
        with open(out / "truth.json", "w", encoding="utf-8") as fh:
            json.dump(records, fh, indent=1)
            fh.write("\n")
        print(f"wrote {args.n} raw canvases to {out}")
    else:
        manifest = ph.generate_dataset(params, args.n, out)
        print(f"wrote {manifest.counts['n_total']} phantoms "
              f"({manifest.counts['n_distended']} Distended) to {out}")
    return 0


def _cmd_preprocess(args) -> int:
    in_dir = Path(args.in_dir)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = pp.PreprocessConfig(
        threshold=args.threshold,
        min_size=args.min_size,
        dilate_kernel=pp.MorphKernel(pp.KernelShape.RECT, args.dilate, args.dilate),
        open_kernel=pp.MorphKernel(pp.KernelShape.RECT, args.open_size, args.open_size),
    )
    report = {}
    files = sorted(p for p in in_dir.rglob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG files under {in_dir}")
    for path in files:
        name = path.relative_to(in_dir).as_posix()
        raw = load_png(path)
        try:
            cropped, region = pp.extract_scan_frame(raw, cfg, resize_to=(args.size, args.size))
        except pp.NoFrameFound:
            report[name] = {"status": "no_frame"}
            continue
        save_png(cropped, out_dir / Path(name).name)
        report[name] = {"status": "ok", "crop_box": region.box.to_list()}
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
        fh.write("\n")
    n_ok = sum(1 for r in report.values() if r["status"] == "ok")
    print(f"cropped {n_ok}/{len(report)} images into {out_dir}")
    return 0


def _cmd_split(args) -> int:
    manifest = ds.load_manifest(args.manifest)
    splits = ds.grouped_kfold(manifest, k=args.k, seed=args.seed)
    splits = [
        ds.train_val_split(s, manifest, ratio=args.val_ratio, seed=args.seed + s.fold_index)
        for s in splits
    ]
    ds.save_folds(splits, args.out)
    sizes = ", ".join(
        f"fold{s.fold_index}: {len(s.train_ids)}/{len(s.val_ids)}/{len(s.test_ids)}"
        for s in splits
    )
    print(f"wrote {len(splits)} folds ({sizes}) to {args.out}")
    return 0


def _train_overrides(args) -> dict:
    return {
        "learning_rate": args.lr,
        "momentum": args.momentum,
        "max_epochs": args.epochs,
        "batch_size": args.batch_size,
        "patience": args.patience,
        "seed": args.seed,
    }


def _resolve_images_root(args, manifest_path) -> Path:
    if args.images_root is not None:
        return Path(args.images_root)
    return Path(manifest_path).parent


def _cmd_train(args) -> int:
    mode = md.Mode(args.mode)
    run = load_run_config(mode, args.config, _train_overrides(args))
    if args.dump_config:
        print(json.dumps(run.to_json_dict(), indent=1))
        return 0
    manifest = ds.load_manifest(args.manifest)
    folds = ds.load_folds(args.folds)
    if not (0 <= args.fold < len(folds)):
        raise ConfigError(f"fold {args.fold} out of range (have {len(folds)})")
    split = folds[args.fold]
    if not split.val_ids:
        split = ds.train_val_split(split, manifest, seed=run.train.seed + split.fold_index)

    train_cfg = run.train
    if mode is md.Mode.MULTI_TASK:
        train_cfg = replace(train_cfg, w_pos=ds.class_weight(split.train_ids, manifest))

    images_root = _resolve_images_root(args, args.manifest)
    model = md.build_model(run.model, seed=train_cfg.seed + split.fold_index)
    train_data = tr.load_training_set(manifest, split.train_ids, images_root, run.model)
    val_data = tr.load_training_set(manifest, split.val_ids, images_root, run.model)
    best_state, history = tr.train(model, train_data, val_data, train_cfg)
    model.load_state_dict(best_state)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    md.save_checkpoint(
        out / "checkpoint.rcad", model,
        extra={"fold": split.fold_index, "train_config": train_cfg.to_json_dict()},
    )
    tr.save_history(history, out / "history.jsonl")
    test_data = tr.load_training_set(manifest, split.test_ids, images_root, run.model)
    report = tr.evaluate(model, test_data)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=1)
        fh.write("\n")
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(run.to_json_dict(), fh, indent=1)
        fh.write("\n")
    best_epoch = int(np.argmax([h.val_fitness for h in history]))
    print(
        f"trained {len(history)} epochs (best epoch {best_epoch}, "
        f"val fitness {history[best_epoch].val_fitness:.3f}); "
        f"test BA {report.balanced_accuracy:.3f}, mean IoU {report.mean_iou:.3f}"
    )
    return 0


def _cmd_eval(args) -> int:
    model, config, _extra = md.load_checkpoint(args.checkpoint)
    manifest = ds.load_manifest(args.manifest)
    if args.split == "all":
        ids = [a.image_id for a in manifest.entries]
    else:
        if args.folds is None:
            raise ConfigError("--folds is required when --split is not 'all'")
        folds = ds.load_folds(args.folds)
        split = folds[args.fold]
        ids = {"train": split.train_ids, "val": split.val_ids, "test": split.test_ids}[args.split]
        if not ids:
            raise ConfigError(f"split {args.split!r} of fold {args.fold} is empty")
    images_root = _resolve_images_root(args, args.manifest)
    data = tr.load_training_set(manifest, ids, images_root, config)
    report = tr.evaluate(model, data)
    payload = report.to_json_dict()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")
    summary = tr.summarize_folds([report])
    print(tr.format_cv_table(summary))
    cm = report.confusion
    print(f"confusion: tp={cm.tp} fn={cm.fn} fp={cm.fp} tn={cm.tn}")
    return 0


def _cmd_infer(args) -> int:
    model, config, _extra = md.load_checkpoint(args.checkpoint)
    image = load_png(args.image)
    if image.width != config.input_size or image.height != config.input_size:
        raise md.ShapeError(
            f"image is {image.width}x{image.height}, model expects "
            f"{config.input_size}x{config.input_size}"
        )
    x = md.images_to_tensor([image])
    import torch

    with torch.no_grad():
        raw, cls_probs = model(x, training=False)
    dets = md.decode_predictions(raw, config, conf_threshold=args.conf_threshold)[0]
    try:
        top = md.select_top(dets)
    except md.NoDetection:
        top = None
    pred_label = None
    if config.mode is md.Mode.MULTI_TASK:
        color = MULTITASK_COLOR
        if cls_probs is not None:
            p = cls_probs[0].numpy()
            pred_label = Label.DISTENDED if p[1] > p[0] else Label.NON_DISTENDED
    else:
        color = DETECTION_COLOR
    gt = BBox.from_list([float(v) for v in args.gt.split(",")]) if args.gt else None
    overlay = render_overlay(image, top, gt, pred_color=color, pred_label=pred_label)
    out = args.out or (Path(args.image).stem + "_overlay.png")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    overlay.save(out, format="PNG")
    if top is None:
        print(f"no recess found; wrote {out}")
    else:
        shown = pred_label or top.label
        msg = f"{shown.value} (confidence {top.confidence:.3f})"
        if gt is not None:
            msg += f", IoU {iou(top.box, gt):.3f}"
        print(msg + f"; wrote {out}")
    return 0


def _cmd_evolve(args) -> int:
    mode = md.Mode(args.mode)
    manifest = ds.load_manifest(args.manifest)
    if args.folds:
        folds = ds.load_folds(args.folds)
    else:
        folds = [
            ds.train_val_split(s, manifest, seed=args.seed + s.fold_index)
            for s in ds.grouped_kfold(manifest, k=5, seed=args.seed)
        ]
    split = folds[args.fold]
    if not split.val_ids:
        split = ds.train_val_split(split, manifest, seed=args.seed + split.fold_index)
    images_root = _resolve_images_root(args, args.manifest)

    base = load_run_config(mode, args.config, {"seed": args.seed})
    budget = args.budget_epochs or base.train.max_epochs
    w_pos = (
        ds.class_weight(split.train_ids, manifest) if mode is md.Mode.MULTI_TASK else 1.0
    )
    train_data_cache: dict = {}

    def fitness_fn(genome: ev.HyperParams) -> float:
        g = genome.as_dict()
        model_cfg = replace(base.model, dropout_rate=g.get("dropout", base.model.dropout_rate))
        train_cfg = replace(
            base.train,
            learning_rate=g["learning_rate"],
            momentum=g["sgd_momentum"],
            loss_weights=LossWeights(
                alpha=g["alpha"], beta=g["beta"],
                gamma=g.get("gamma", 0.0), delta=g.get("delta", 0.0),
            ),
            max_epochs=budget,
            patience=min(base.train.patience, budget),
            w_pos=w_pos,
        )
        if "data" not in train_data_cache:
            train_data_cache["data"] = (
                tr.load_training_set(manifest, split.train_ids, images_root, model_cfg),
                tr.load_training_set(manifest, split.val_ids, images_root, model_cfg),
            )
        train_data, val_data = train_data_cache["data"]
        model = md.build_model(model_cfg, seed=train_cfg.seed)
        _state, history = tr.train(model, train_data, val_data, train_cfg)
        return max(h.val_fitness for h in history)

    history = None
    if args.resume and Path(args.out).exists():
        history = ev.load_generations(args.out)

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    written = len(history or [])
    fh = open(out_path, "a" if written else "w", encoding="utf-8")

    def on_generation(record: ev.GenerationRecord) -> None:
        fh.write(json.dumps(record.to_json_dict()) + "\n")
        fh.flush()

    try:
        best, full = ev.evolve(
            fitness_fn,
            ev.HyperParams.defaults(mode),
            generations=args.generations,
            seed=args.seed,
            history=history,
            on_generation=on_generation,
        )
    finally:
        fh.close()
    best_record = max(full, key=lambda r: r.fitness)
    print(
        f"best fitness {best_record.fitness:.4f} at generation "
        f"{best_record.generation}: {json.dumps(best.as_dict())}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recess-cad",
        description="Knee recess ultrasound CAD: preprocessing, synthetic data, "
        "training, evaluation, and hyperparameter evolution.",
    )
    parser.add_argument("--json-errors", action="store_true",
                        help="emit a machine-readable JSON error trailer on stderr")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--raw", action="store_true", help="generate raw device canvases instead")
    p.add_argument("--borderline", action="store_true",
                   help="overlapping thickness ranges (hard-to-classify cases)")
    p.add_argument("--p-distended", type=float, default=None)
    p.add_argument("--clutter", type=float, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("preprocess", help="crop raw frames to the scan region")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--threshold", type=float, default=0.04)
    p.add_argument("--min-size", type=int, default=1000)
    p.add_argument("--dilate", type=int, default=15)
    p.add_argument("--open", dest="open_size", type=int, default=31)
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("split", help="patient-grouped k-fold splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-ratio", type=float, default=0.8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train one fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--mode", choices=[m.value for m in md.Mode], required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--images-root", default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dump-config", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="all")
    p.add_argument("--folds", default=None)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--images-root", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="run one image and write an overlay")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--gt", default=None, help="ground-truth box as x0,y0,x1,y1")
    p.add_argument("--out", default=None)
    p.add_argument("--conf-threshold", type=float, default=0.001)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("evolve", help="evolutionary hyperparameter search on one fold")
    p.add_argument("--mode", choices=[m.value for m in md.Mode], required=True)
    p.add_argument("--generations", type=int, default=300)
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", default=None)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--images-root", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget-epochs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=_cmd_evolve)

    return parser


_USER_ERRORS = (
    ConfigError,
    ds.ParseError,
    ds.ValidationError,
    ds.TooFewPatients,
    ds.NoPositiveSamples,
    md.ShapeError,
    md.ModeError,
    FileNotFoundError,
    ValueError,
)


def dispatch(argv) -> int:
    """Route to a subcommand. Exit codes: 0 ok, 1 user error, 2 runtime failure."""
    threads = os.environ.get("RECESS_CAD_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 0 for --help, 2 for usage errors
        return 0 if e.code == 0 else 1
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return 1

    json_errors = getattr(args, "json_errors", False)
    try:
        return args.func(args)
    except _USER_ERRORS as e:
        _report_error(e, json_errors)
        return 1
    except (tr.NonFiniteLoss, pp.NoFrameFound, OSError) as e:
        _report_error(e, json_errors)
        return 2


def _report_error(e: Exception, json_errors: bool) -> None:
    print(f"error: {e}", file=sys.stderr)
    if json_errors:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
