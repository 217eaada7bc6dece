"""Command-line pipeline: generate phantoms, train, predict, explain, aggregate.

Exit codes: 0 success, 1 usage error, 2 data/parse error, 3 numerical failure.
Every subcommand that takes --seed is end-to-end deterministic: running it
twice with the same flags produces byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import layers, lrp, modelstore, trainer, volume
from .errors import (
    ConfigError,
    ManifestError,
    ModelFileError,
    NiftiError,
    PreprocessError,
    ShapeError,
    StateError,
    TrainingDiverged,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with the package's exit-code contract (usage errors exit 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(s) for s in text.split(","))
    except ValueError:
        raise _UsageError(f"bad dims {text!r}, expected D,H,W") from None
    if len(dims) != 3 or min(dims) < 1:
        raise _UsageError(f"bad dims {text!r}, expected three positive extents")
    return dims


def _parse_channels(text: str) -> tuple[int, ...]:
    try:
        channels = tuple(int(s) for s in text.split(","))
    except ValueError:
        raise _UsageError(f"bad channels {text!r}") from None
    if not channels or min(channels) < 1:
        raise _UsageError(f"bad channels {text!r}")
    return channels


# ---------------------------------------------------------------------------
# phantom


def cmd_phantom(args) -> int:
    if args.n < 1:
        raise _UsageError("--n must be >= 1")
    dims = _parse_dims(args.dims)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    specs = volume.default_class_specs(
        dims,
        rim_term=args.rim_term,
        rim_preterm=args.rim_preterm,
        rim_intensity=args.rim_intensity,
        interior_intensity=args.interior_intensity,
        noise_sigma=args.noise_sigma,
    )
    volumes, gt_masks = volume.phantom_volumes(args.n, dims, args.seed, specs)
    entries = []
    for vol, label in volumes:
        vol_path = out / f"{vol.subject_id}.nii"
        mask_path = out / f"{vol.subject_id}_mask.nii"
        volume.write_nifti(vol, vol_path)
        volume.write_nifti(volume.Volume(vol.mask.astype(np.float64)), mask_path, dtype="uint8")
        entries.append(volume.ManifestEntry(vol.subject_id, label, vol_path, mask_path))
    for name, mask in gt_masks.items():
        volume.write_nifti(
            volume.Volume(mask.astype(np.float64)), out / f"gt_mask_{name}.nii", dtype="uint8"
        )
    volume.write_manifest(
        entries,
        out / "manifest.tsv",
        class_names=tuple(specs),
        comments=[
            f"dims: {dims[0]},{dims[1]},{dims[2]}",
            f"n_per_class: {args.n}",
            f"seed: {args.seed}",
            f"noise_sigma: {args.noise_sigma!r}",
            f"rim_thickness: term={args.rim_term} preterm={args.rim_preterm}",
        ],
    )
    print(f"wrote {len(entries)} phantom volumes under {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _model_config_for(args, data_dims, class_names) -> layers.ModelConfig:
    if args.config:
        return layers.parse_model_config(Path(args.config).read_text())
    return layers.default_model_config(
        (1,) + data_dims,
        class_names,
        channels=_parse_channels(args.channels),
        hidden=args.hidden,
        normalize=args.normalize,
    )


def _train_config(args, kfold_seed_shift: int = 0) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        base_lr=args.base_lr,
        max_lr=args.max_lr,
        cycle_step_size=args.step_size,
        lr_policy=args.policy,
        class_weight_mode=args.class_weights,
        seed=args.seed + kfold_seed_shift,
    )


def _first_volume_dims(manifest_path: str) -> tuple[int, int, int]:
    entries, _ = volume.read_manifest(manifest_path)
    return volume.load_entry_volume(entries[0]).data.shape


def cmd_train(args) -> int:
    if args.config:
        config = layers.parse_model_config(Path(args.config).read_text())
        target_dims = config.input_shape[1:]
        data = volume.load_dataset(args.data, target_dims, config.class_names, config.normalize)
    else:
        target_dims = _first_volume_dims(args.data)
        data = volume.load_dataset(args.data, target_dims, normalize=args.normalize)
        config = _model_config_for(args, target_dims, data.class_names)
    labels = data.labels()
    train_idx, test_idx = trainer.stratified_split(labels, args.test_fraction, args.seed)
    train_set, test_set = data.subset(train_idx), data.subset(test_idx)

    metrics_path = args.metrics or f"{args.out}.metrics"
    if args.kfold:
        folds = trainer.kfold(train_set.labels(), args.kfold, args.seed)
        for k, fold_idx in enumerate(folds):
            in_fold = np.zeros(len(train_set), dtype=bool)
            in_fold[fold_idx] = True
            tc = _train_config(args)
            fold_params, fold_hist = trainer.train(
                config, train_set.subset(np.flatnonzero(~in_fold)), tc,
                val_data=train_set.subset(fold_idx),
            )
            fold_metrics = trainer.evaluate(
                config, fold_params, train_set.subset(fold_idx), args.positive_class
            )
            trainer.write_metrics_report(
                fold_metrics, config.class_names, f"{metrics_path}.fold{k:02d}"
            )
        print(f"wrote {args.kfold} fold reports to {metrics_path}.foldNN")

    tc = _train_config(args)
    params, history = trainer.train(config, train_set, tc)
    modelstore.save_model(config, params, args.out)
    steps_per_epoch = -(-len(train_set) // tc.batch_size)
    trainer.write_history_csv(history, args.history or f"{args.out}.history.csv", steps_per_epoch)
    metrics = trainer.evaluate(config, params, test_set, args.positive_class)
    trainer.write_metrics_report(metrics, config.class_names, metrics_path)
    print(
        f"model saved to {args.out}; held-out accuracy {metrics.accuracy:.3f} "
        f"({len(train_set)} train / {len(test_set)} test)"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict


def _load_for_model(manifest_path, config) -> tuple[list, list]:
    """Preprocessed inputs + manifest entries, in manifest order."""
    entries, _ = volume.read_manifest(manifest_path)
    target_dims = config.input_shape[1:]
    xs = [
        volume.preprocess(volume.load_entry_volume(e), target_dims, config.normalize)
        for e in entries
    ]
    return xs, entries


def cmd_predict(args) -> int:
    config, params, _ = modelstore.load_model(args.model)
    xs, entries = _load_for_model(args.data, config)
    probs = trainer.predict_probs(config, params, xs)
    preds = probs.argmax(axis=1)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["subject_id", "label", "predicted"] + [f"prob_{c}" for c in config.class_names]
        )
        for i, e in enumerate(entries):
            writer.writerow(
                [e.subject_id, e.label or "-", config.class_names[preds[i]]]
                + [repr(p) for p in probs[i]]
            )
    labeled = all(e.label is not None for e in entries)
    if labeled:
        samples = [
            trainer.Sample(xs[i], config.class_names.index(e.label), e.subject_id)
            for i, e in enumerate(entries)
        ]
        data = trainer.Dataset(samples, config.class_names)
        metrics = trainer.evaluate(config, params, data, args.positive_class)
        trainer.write_metrics_report(metrics, config.class_names, args.metrics or f"{out}.metrics")
    print(f"wrote predictions for {len(entries)} subjects to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# explain


def _lrp_config(args) -> lrp.LrpConfig:
    input_rule, bounds = "alphabeta", None
    if args.input_rule != "alphabeta":
        if not args.input_rule.startswith("zb:"):
            raise _UsageError("--input-rule must be 'alphabeta' or 'zb:LOW,HIGH'")
        try:
            low, high = (float(s) for s in args.input_rule[3:].split(","))
        except ValueError:
            raise _UsageError("--input-rule zb needs numeric bounds 'zb:LOW,HIGH'") from None
        input_rule, bounds = "zb", (low, high)
    try:
        return lrp.LrpConfig(
            alpha=args.alpha,
            beta=args.beta,
            epsilon_stabilizer=args.epsilon,
            input_rule=input_rule,
            input_bounds=bounds,
            bias_policy=args.bias_policy,
        )
    except ConfigError as exc:
        raise _UsageError(str(exc)) from None


def _write_sidecar(path: Path, items: list[tuple[str, object]]) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in items))


def cmd_explain(args) -> int:
    cfg = _lrp_config(args)
    config, params, _ = modelstore.load_model(args.model)
    if args.target != "predicted" and args.target not in config.class_names:
        raise _UsageError(
            f"--target must be 'predicted' or one of {','.join(config.class_names)}"
        )
    xs, entries = _load_for_model(args.data, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    audit_rows = []
    for x, e in zip(xs, entries):
        if args.target == "predicted":
            probs = trainer.predict_probs(config, params, [x])
            target = int(probs[0].argmax())
        else:
            target = config.class_names.index(args.target)
        rmap = lrp.explain(config, params, x, target, cfg, subject_id=e.subject_id)
        audit = lrp.conservation_audit(rmap)
        volume.write_nifti(volume.Volume(rmap.relevance[0]), out / f"{e.subject_id}_relevance.nii")
        _write_sidecar(
            out / f"{e.subject_id}_relevance.meta",
            [
                ("subject_id", e.subject_id),
                ("target_class", config.class_names[target]),
                ("target_index", target),
                ("alpha", repr(cfg.alpha)),
                ("beta", repr(cfg.beta)),
                ("epsilon_stabilizer", repr(cfg.epsilon_stabilizer)),
                ("bias_policy", cfg.bias_policy),
                ("input_rule", cfg.input_rule),
                ("normalize", config.normalize),
                ("target_logit", repr(rmap.target_logit)),
                ("total_leak", repr(audit.total_leak)),
                ("total_leak_relative", repr(audit.total_leak_relative)),
            ],
        )
        audit_rows.append((e.subject_id, target, rmap.target_logit, audit))
    with open(out / "audit.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["subject_id", "target_class", "target_logit", "total_leak", "total_leak_relative"]
        )
        for sid, target, logit, audit in audit_rows:
            writer.writerow(
                [sid, config.class_names[target], repr(logit), repr(audit.total_leak),
                 repr(audit.total_leak_relative)]
            )
    print(f"wrote {len(entries)} relevance maps to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# aggregate


def _read_sidecar(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def _write_pgm(image: np.ndarray, path: Path) -> None:
    """8-bit binary portable graymap; image is (rows, cols) uint8."""
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode()
    path.write_bytes(header + np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def _mid_slices(vol3d: np.ndarray) -> dict[str, np.ndarray]:
    d, h, w = vol3d.shape
    return {
        "axial": vol3d[d // 2],
        "coronal": vol3d[:, h // 2],
        "sagittal": vol3d[:, :, w // 2],
    }


def _relevance_to_u8(slice2d: np.ndarray, p99: float) -> np.ndarray:
    scaled = np.clip(slice2d / p99, -1.0, 1.0) if p99 > 0 else np.zeros_like(slice2d)
    return np.round(scaled * 127.5 + 127.5).astype(np.uint8)


def _image_to_u8(slice2d: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi <= lo:
        return np.zeros(slice2d.shape, dtype=np.uint8)
    return np.round(np.clip((slice2d - lo) / (hi - lo), 0.0, 1.0) * 255).astype(np.uint8)


def cmd_aggregate(args) -> int:
    entries, _ = volume.read_manifest(args.groups)
    maps_dir = Path(args.maps)
    keep = {e.subject_id for e in entries}
    if args.correct_only:
        if not args.predictions:
            raise _UsageError("--correct-only needs --predictions REPORT")
        correct = set()
        with open(args.predictions, newline="") as f:
            for row in csv.DictReader(f):
                if row["label"] == row["predicted"]:
                    correct.add(row["subject_id"])
        keep &= correct
    rmaps, group_labels = [], []
    inputs_by_group: dict[str, list[np.ndarray]] = {}
    for e in entries:
        if e.subject_id not in keep:
            continue
        if e.label is None:
            raise ManifestError(f"{e.subject_id}: aggregate needs labeled records")
        map_path = maps_dir / f"{e.subject_id}_relevance.nii"
        if not map_path.is_file():
            raise ManifestError(f"no relevance map for {e.subject_id} under {maps_dir}")
        rel = volume.read_nifti(map_path).data
        meta = _read_sidecar(maps_dir / f"{e.subject_id}_relevance.meta")
        cfg = lrp.LrpConfig(
            alpha=float(meta["alpha"]),
            beta=float(meta["beta"]),
            bias_policy=meta.get("bias_policy", "exclude"),
        )
        rmaps.append(
            lrp.RelevanceMap(rel[None], 0, cfg, e.subject_id, (("output", 0.0),), 0.0)
        )
        group_labels.append(e.label)
        inputs_by_group.setdefault(e.label, []).append(
            volume.preprocess(
                volume.load_entry_volume(e), rel.shape, meta.get("normalize", "zscore")
            )[0]
        )
    if not rmaps:
        raise ManifestError("no subjects left to aggregate")
    means = lrp.aggregate_group(rmaps, group_labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scaling_notes: list[tuple[str, object]] = []
    for group in sorted(means):
        rel3d = means[group][0]
        img3d = np.mean(inputs_by_group[group], axis=0)
        volume.write_nifti(volume.Volume(rel3d), out / f"{group}_mean_relevance.nii")
        volume.write_nifti(volume.Volume(img3d), out / f"{group}_mean_image.nii")
        p99 = float(np.percentile(np.abs(rel3d), 99))
        lo, hi = float(img3d.min()), float(img3d.max())
        scaling_notes += [
            (f"{group}.relevance_p99", repr(p99)),
            (f"{group}.image_range", f"{lo!r},{hi!r}"),
        ]
        for plane, rel_slice in _mid_slices(rel3d).items():
            _write_pgm(_relevance_to_u8(rel_slice, p99), out / f"{group}_relevance_{plane}.pgm")
        for plane, img_slice in _mid_slices(img3d).items():
            _write_pgm(_image_to_u8(img_slice, lo, hi), out / f"{group}_image_{plane}.pgm")
    scaling_notes.append(("relevance_montage", "grey 128 = zero, range = +-p99(|R|)"))
    scaling_notes.append(("image_montage", "linear min-max over the group mean"))
    _write_sidecar(out / "montage_scaling.meta", scaling_notes)
    print(f"aggregated {len(rmaps)} maps into {len(means)} group means under {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> _Parser:
    parser = _Parser(prog="voxlrp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=60, help="subjects per class")
    p.add_argument("--dims", default="32,24,24")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--rim-term", type=int, default=1)
    p.add_argument("--rim-preterm", type=int, default=3)
    p.add_argument("--rim-intensity", type=float, default=2.5)
    p.add_argument("--interior-intensity", type=float, default=1.0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train a classifier on a manifest")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--config", default=None, help="model config file (default: built-in)")
    p.add_argument("--channels", default="16,32,64,128", help="conv channels per block")
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--normalize", choices=["zscore", "none"], default="zscore",
                   help="preprocessing normalization; use 'none' for phantom data")
    p.add_argument("--epochs", type=int, default=24)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--base-lr", type=float, default=1e-5)
    p.add_argument("--max-lr", type=float, default=1e-3)
    p.add_argument("--step-size", type=int, default=None, help="cycle half-period in iterations")
    p.add_argument("--policy", choices=["triangular", "triangular2"], default="triangular2")
    p.add_argument("--class-weights", choices=["none", "inverse_frequency"],
                   default="inverse_frequency")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--kfold", type=int, default=0)
    p.add_argument("--history", default=None, help="history CSV path")
    p.add_argument("--metrics", default=None, help="metrics report path")
    p.add_argument("--positive-class", default="preterm")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="per-subject class probabilities")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="predictions CSV")
    p.add_argument("--metrics", default=None)
    p.add_argument("--positive-class", default="preterm")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explain", help="relevance maps for every subject")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=1e-9)
    p.add_argument("--bias-policy", choices=["exclude", "include"], default="exclude")
    p.add_argument("--input-rule", default="alphabeta", help="'alphabeta' or 'zb:LOW,HIGH'")
    p.add_argument("--target", default="predicted", help="'predicted' or a class name")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("aggregate", help="group-mean relevance maps and montages")
    p.add_argument("--maps", required=True, help="directory written by explain")
    p.add_argument("--groups", required=True, help="manifest with group labels")
    p.add_argument("--out", required=True)
    p.add_argument("--correct-only", action="store_true")
    p.add_argument("--predictions", default=None, help="predictions CSV for --correct-only")
    p.set_defaults(func=cmd_aggregate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"voxlrp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NiftiError, ManifestError, ModelFileError, PreprocessError, ConfigError,
            ShapeError, OSError) as exc:
        print(f"voxlrp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, StateError) as exc:
        print(f"voxlrp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
