"""Command-line interface.

Verbs: synth, import, preprocess, train, eval, inspect, params. Every verb
that writes files also writes a manifest.json capturing the command, its
arguments, and library versions, so outputs are reproducible from the
manifest alone. Exit codes: 0 success, 1 usage or configuration error,
2 data or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (CLASS_NAMES, compute_norm_stats, import_csv, make_split,
                     normalize, read_dataset, scale, segment_sliding,
                     synth_generate, write_dataset)
from .errors import (CapabilityError, ConfigError, DataFormatError, DomainError,
                     InsufficientDataError, NumericError, ShapeError)
from .meshing import assemble_streams
from .models import (ARCHITECTURES, ATTENTION_MODES, ModelConfig, build_model,
                     format_param_table, load_checkpoint, save_checkpoint)
from .training import (TrainConfig, evaluate_cross_subject,
                       export_attention_weights, export_feature_maps,
                       save_history_csv, train)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_manifest(out_dir, command, args):
    payload = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {"command": command, "arguments": payload,
           "versions": {"megdecode": __version__, "numpy": np.__version__,
                        "python": sys.version.split()[0]}}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _parse_label(text):
    if text in CLASS_NAMES:
        return CLASS_NAMES.index(text)
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"label must be an integer or one of {CLASS_NAMES}, got {text!r}") from None


def _model_config(args):
    kwargs = dict(architecture=args.arch, attention_mode=args.attention, seed=args.seed,
                  dtype=args.dtype)
    for flag, field in [("depth", "depth"), ("streams", "streams"), ("window", "window"),
                        ("overlap", "window_overlap"), ("stream_overlap", "stream_overlap"),
                        ("kernel_length", "kernel_length"), ("separable_length", "separable_length"),
                        ("pool1", "pool1"), ("pool2", "pool2"), ("scale_factor", "scale_factor")]:
        value = getattr(args, flag, None)
        if value is not None:
            kwargs[field] = value
    return ModelConfig(**kwargs)


def _add_model_flags(p):
    p.add_argument("--arch", required=True, choices=ARCHITECTURES)
    p.add_argument("--attention", default="self_global", choices=ATTENTION_MODES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    p.add_argument("--depth", type=int, help="samples per mesh tensor (mesh architectures)")
    p.add_argument("--streams", type=int, help="mesh tensors per training sample")
    p.add_argument("--window", type=int, help="segment length in samples (eegnet)")
    p.add_argument("--overlap", type=float, help="segment overlap fraction (eegnet)")
    p.add_argument("--stream-overlap", dest="stream_overlap", type=float)
    p.add_argument("--kernel-length", dest="kernel_length", type=int)
    p.add_argument("--separable-length", dest="separable_length", type=int)
    p.add_argument("--pool1", type=int)
    p.add_argument("--pool2", type=int)
    p.add_argument("--scale-factor", dest="scale_factor", type=float)


def _cmd_synth(args):
    recs = synth_generate(subjects=args.subjects, duration=args.duration,
                          sampling_rate=args.rate, seed=args.seed, snr=args.snr,
                          amplitude=args.amplitude)
    paths = write_dataset(recs, args.out)
    _write_manifest(args.out, "synth", args)
    print(f"wrote {len(paths)} recordings to {args.out}")
    return 0


def _cmd_import(args):
    rec = import_csv(args.csv, subject_id=args.subject, label=_parse_label(args.label),
                     sampling_rate=args.rate)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{rec.subject_id}_{CLASS_NAMES[rec.label]}_000.megr"
    from .dataio import write_recording
    write_recording(rec, path)
    _write_manifest(args.out, "import", args)
    print(f"wrote {path}")
    return 0


def _cmd_preprocess(args):
    recs = read_dataset(args.data)
    if not recs:
        raise DataFormatError(f"no recordings found in {args.data}")
    cfg = _model_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels, subjects = [], []
    if cfg.architecture == "eegnet":
        xs = []
        for rec in recs:
            for seg in segment_sliding(rec.samples, cfg.window, cfg.window_overlap):
                xs.append(scale(seg.astype(np.float32), cfg.scale_factor))
                labels.append(rec.label)
                subjects.append(rec.subject_id)
        np.savez(out_dir / "segments.npz", x=np.stack(xs)[..., None],
                 y=np.array(labels), subjects=np.array(subjects))
        n = len(xs)
    else:
        stats = compute_norm_stats(recs)
        spatial, temporal = [], []
        for rec in recs:
            normed = normalize(rec.samples, stats).astype(np.float32)
            for b in assemble_streams(normed, cfg.streams, cfg.depth,
                                      stream_overlap=cfg.stream_overlap,
                                      label=rec.label, subject_id=rec.subject_id):
                spatial.append(np.stack(b.spatial))
                temporal.append(np.stack(b.temporal))
                labels.append(rec.label)
                subjects.append(rec.subject_id)
        np.savez(out_dir / "streams.npz", spatial=np.stack(spatial), temporal=np.stack(temporal),
                 y=np.array(labels), subjects=np.array(subjects),
                 norm_mean=stats.mean, norm_std=stats.std)
        n = len(spatial)
    _write_manifest(args.out, "preprocess", args)
    print(f"wrote {n} samples to {args.out}")
    return 0


def _cmd_train(args):
    recs = read_dataset(args.data)
    if not recs:
        raise DataFormatError(f"no recordings found in {args.data}")
    cfg = _model_config(args)
    model = build_model(cfg)
    split = make_split({r.subject_id for r in recs}, args.setup)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       learning_rate=args.lr, patience=args.patience, seed=args.seed)
    model, metrics = train(model, recs, split, tcfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_dir / "model.megc")
    (out_dir / "train_metrics.json").write_text(metrics.to_json() + "\n")
    save_history_csv(metrics, out_dir / "history.csv")
    (out_dir / "split.json").write_text(json.dumps(
        {"train_subjects": list(split.train_subjects),
         "test_subjects": list(split.test_subjects), "setup": args.setup}, indent=2) + "\n")
    _write_manifest(args.out, "train", args)
    print(f"trained {cfg.architecture}/{cfg.attention_mode}: "
          f"train accuracy {metrics.mean:.4f} over {len(metrics.per_subject)} subjects")
    return 0


def _resolve_test_subjects(args, model, recs):
    if args.subjects:
        return tuple(s.strip() for s in args.subjects.split(",") if s.strip())
    trained = set(model.train_subjects or ())
    return tuple(sorted({r.subject_id for r in recs} - trained))


def _cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    recs = read_dataset(args.data)
    if not recs:
        raise DataFormatError(f"no recordings found in {args.data}")
    subjects = _resolve_test_subjects(args, model, recs)
    if not subjects:
        raise ConfigError("no held-out subjects to evaluate; pass --subjects")
    metrics = evaluate_cross_subject(model, recs, subjects)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval_metrics.json").write_text(metrics.to_json() + "\n")
    _write_manifest(args.out, "eval", args)
    print(f"accuracy {metrics.mean:.4f} +/- {metrics.std:.4f} over {len(subjects)} subjects")
    return 0


def _cmd_inspect(args):
    model = load_checkpoint(args.checkpoint)
    recs = read_dataset(args.data)
    if not recs:
        raise DataFormatError(f"no recordings found in {args.data}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "param_table.txt").write_text(format_param_table(model) + "\n")
    wrote = ["param_table.txt"]
    if getattr(model, "ga", None) is not None:
        export_attention_weights(model, recs, out_dir=out_dir, max_samples=args.samples)
        wrote += ["attention_weights.csv", "attention_weights.svg"]
    maps = export_feature_maps(model, recs, stream=args.stream, out_dir=out_dir)
    wrote += ["feature_maps.csv"] + [f"feature_maps_layer{i}.svg" for i in maps]
    _write_manifest(args.out, "inspect", args)
    print(f"wrote {', '.join(wrote)} to {args.out}")
    return 0


def _cmd_params(args):
    cfg = _model_config(args)
    model = build_model(cfg)
    print(format_param_table(model))
    return 0


def build_parser():
    parser = _Parser(prog="megdecode",
                     description="attention-augmented decoding of multichannel recordings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=18)
    p.add_argument("--duration", type=float, default=4.0, help="seconds per recording")
    p.add_argument("--rate", type=float, default=256.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snr", type=float, default=10.0)
    p.add_argument("--amplitude", type=float, default=2e-8)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("import", help="convert a headerless 248-column csv")
    p.add_argument("--csv", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--label", required=True, help=f"integer or one of {', '.join(CLASS_NAMES)}")
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_import)

    p = sub.add_parser("preprocess", help="materialize segments or stream batches")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train", help="fit a model on a cross-subject split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--setup", type=int, default=2, choices=(1, 2),
                   help="1: train on 3 subjects, 2: train on 12")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--patience", type=int, default=10)
    _add_model_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out subjects")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", help="comma-separated; default: all subjects not trained on")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("inspect", help="export attention weights and feature maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--stream", type=int, default=0)
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("params", help="print the trainable-parameter table")
    _add_model_flags(p)
    p.set_defaults(func=_cmd_params)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ConfigError, CapabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, InsufficientDataError, ShapeError, DomainError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
