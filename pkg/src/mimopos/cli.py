"""Command line front end.

Exit codes: 0 success, 1 usage or input error, 2 verification failure
(theory checks or gradient checks out of tolerance), 3 numerical failure
during training or evaluation.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import pipeline
from .fingerprint import KIND_ANGLE_DELAY, KIND_SPACE_FREQ
from .network import CNNLocalizer
from .nn import run_gradient_suite
from .wknn import WKNNLocalizer, load_database, save_database
from .channel import save_scene

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _load_config(path):
    if not os.path.exists(path):
        print(f"config file not found: {path}", file=sys.stderr)
        sys.exit(EXIT_USAGE)
    try:
        return pipeline.ExperimentConfig.load(path)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"bad config {path}: {exc}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _outdir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _split_list(text, cast=str):
    return tuple(cast(part) for part in text.split(",") if part)


def cmd_scene(args):
    config = _load_config(args.config)
    out = _outdir(args)
    scene = pipeline.build_scene(config)
    path = os.path.join(out, "scene.json")
    save_scene(scene, path)
    print(f"wrote {path} ({len(scene.scatterers)} scatterers)")
    return EXIT_OK


def cmd_dataset(args):
    config = _load_config(args.config)
    out = _outdir(args)
    scene = pipeline.build_scene(config)
    save_scene(scene, os.path.join(out, "scene.json"))
    train = pipeline.training_dataset(config, scene)
    test = pipeline.test_dataset(config, scene)
    pipeline.save_dataset(train, os.path.join(out, "train.fpdb"))
    pipeline.save_dataset(test, os.path.join(out, "test.fpdb"))
    config.save(os.path.join(out, "config.json"))
    print(f"wrote {len(train)} reference / {len(test)} test fingerprints "
          f"to {out}")
    return EXIT_OK


def cmd_train(args):
    config = _load_config(args.config)
    method = args.method or config.method
    out = _outdir(args)
    scene = pipeline.build_scene(config)
    train = pipeline.training_dataset(config, scene)
    model = pipeline.fit_localizer(config, train, method)
    if isinstance(model, WKNNLocalizer):
        path = os.path.join(out, "wknn_db.fpdb")
        rows, cols = train.tensors.shape[1:3]
        save_database(model.db_, path, rows, cols, train.kind)
    else:
        path = os.path.join(out, f"{method}_model.json")
        model.save(path)
        with open(os.path.join(out, "training_log.json"), "w") as fh:
            json.dump({"epoch_loss": model.history_}, fh, indent=2)
    config.save(os.path.join(out, "config.json"))
    print(f"trained {method}, wrote {path}")
    return EXIT_OK


def _load_model(path, config):
    if path.endswith(".fpdb"):
        db, _ = load_database(path)
        model = WKNNLocalizer(n_neighbors=config.k_neighbors)
        model.db_ = db
        return model, "wknn"
    model = CNNLocalizer.load(path)
    return model, model.kind


def cmd_eval(args):
    config = _load_config(args.config)
    out = _outdir(args)
    model, method = _load_model(args.model, config)
    scene = pipeline.build_scene(config)
    test = pipeline.test_dataset(config, scene)
    result = pipeline.evaluate(model, method, test, workdir=out)
    pipeline.write_cdf_csv(result.errors, os.path.join(out, "cdf.csv"))
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump({"config_digest": pipeline.config_digest(config),
                   "results": {method: result.summary()}},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    s = result.summary()
    print(f"{method}: mean {s['mean_error_m']:.3f} m, "
          f"median {s['median_error_m']:.3f} m over {s['n_test']} points")
    return EXIT_OK


def cmd_compare(args):
    config = _load_config(args.config)
    out = _outdir(args)
    methods = _split_list(args.methods)
    pipeline.compare_methods(config, methods=methods, workdir=out)
    print(f"wrote {out}/report.json")
    return EXIT_OK


def cmd_sweep(args):
    config = _load_config(args.config)
    out = _outdir(args)
    snrs = _split_list(args.snrs, float)
    methods = _split_list(args.methods)
    kinds = _split_list(args.kinds)
    for kind in kinds:
        if kind not in (KIND_ANGLE_DELAY, KIND_SPACE_FREQ):
            print(f"unknown fingerprint kind {kind!r}", file=sys.stderr)
            return EXIT_USAGE
    pipeline.snr_sweep(config, snrs=snrs, methods=methods, kinds=kinds,
                       workdir=out)
    print(f"wrote {out}/sweep.csv")
    return EXIT_OK


def cmd_verify(args):
    checks = pipeline.verify_theory()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        payload = {k: v for k, v in checks.items()
                   if isinstance(v, (bool, int, float, str, list, tuple))}
        with open(os.path.join(args.out, "theory_checks.json"), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK if checks["all_ok"] else EXIT_VERIFY


def cmd_gradcheck(args):
    results = run_gradient_suite(n_seeds=args.seeds)
    ok = True
    for name in sorted(results):
        entry = results[name]
        status = "PASS" if entry["ok"] else "FAIL"
        ok = ok and entry["ok"]
        print(f"[{status}] {name}: worst rel err {entry['worst']:.3e} "
              f"(tol {entry['tol']:.0e})")
    return EXIT_OK if ok else EXIT_VERIFY


def build_parser():
    parser = _Parser(prog="mimopos",
                     description="Massive MIMO fingerprint positioning "
                                 "toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scene", parents=[], help="generate a scatterer scene")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="runs/scene")
    p.set_defaults(func=cmd_scene)

    p = sub.add_parser("dataset", help="generate fingerprint datasets")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="runs/dataset")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train a localisation model")
    p.add_argument("--config", required=True)
    p.add_argument("--method", choices=["wknn", "cnn3d", "cnn2d"])
    p.add_argument("--out", default="runs/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True,
                   help=".fpdb database or model .json manifest")
    p.add_argument("--out", default="runs/eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train and evaluate several methods")
    p.add_argument("--config", required=True)
    p.add_argument("--methods", default="wknn,cnn3d")
    p.add_argument("--out", default="runs/compare")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep-snr", help="mean error versus measurement SNR")
    p.add_argument("--config", required=True)
    p.add_argument("--snrs", default="4,10,20")
    p.add_argument("--methods", default="wknn,cnn3d")
    p.add_argument("--kinds",
                   default=f"{KIND_ANGLE_DELAY},{KIND_SPACE_FREQ}")
    p.add_argument("--out", default="runs/sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-theory",
                       help="numeric checks of the fingerprint theory")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of layer gradients")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
