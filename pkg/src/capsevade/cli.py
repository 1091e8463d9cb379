"""Command-line front end: synthesize data, train, attack, report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from capsevade import attack as atk
from capsevade import classifier as clf
from capsevade import encoder as enc
from capsevade import harness

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"

ENCODER_FILE = "encoder.cenc"
CLASSIFIER_FILES = {"prior": "classifier_prior.ccls", "posterior": "classifier_posterior.ccls"}


class UsageError(Exception):
    """Invalid arguments or configuration, detected before any compute."""


def _require_file(path: Path) -> Path:
    if not path.is_file():
        raise UsageError(f"file not found: {path}")
    return path


def _load_split(data_dir: Path, split: str) -> harness.Dataset:
    if not data_dir.is_dir():
        raise UsageError(f"data directory not found: {data_dir}")
    if split == "train":
        images, labels = data_dir / TRAIN_IMAGES, data_dir / TRAIN_LABELS
    else:
        images, labels = data_dir / TEST_IMAGES, data_dir / TEST_LABELS
    return harness.load_idx(_require_file(images), _require_file(labels))


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = harness.toy_dataset(
        n_train=args.n_train, n_test=args.n_test, seed=args.seed
    )
    harness.save_idx(train_set, out / TRAIN_IMAGES, out / TRAIN_LABELS)
    harness.save_idx(test_set, out / TEST_IMAGES, out / TEST_LABELS)
    print(f"wrote {args.n_train} train / {args.n_test} test images to {out}")
    return 0


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    train_set = _load_split(data_dir, "train")
    test_set = _load_split(data_dir, "test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    config = enc.TrainConfig(epochs=args.epochs, seed=args.seed)
    n_classes = int(train_set.labels.max()) + 1
    params = enc.train(config, train_set.images, train_set.labels, n_classes)
    enc.save_encoder(params, out / ENCODER_FILE)
    print(f"encoder written to {out / ENCODER_FILE}")

    for mode in (enc.PRIOR, enc.POSTERIOR):
        presences = np.stack(
            [enc.presence_for(params, x, mode) for x in train_set.images]
        )
        kmeans = clf.kmeans_fit(presences, n_classes, args.seed)
        clusters = clf.assign_many(kmeans, presences)
        permutation = clf.fit_permutation(clusters, train_set.labels, n_classes)
        model = clf.ClassifierModel(kmeans=kmeans, permutation=permutation, mode=mode)
        clf.save_classifier(model, out / CLASSIFIER_FILES[mode])

        test_presences = np.stack(
            [enc.presence_for(params, x, mode) for x in test_set.images]
        )
        predicted = clf.classify_many(model, test_presences)
        accuracy = float((predicted == test_set.labels).mean())
        print(f"{mode} k-means classifier accuracy: {accuracy:.4f}")
    return 0


def _effective_attack_config(args) -> atk.AttackConfig:
    base: dict = {}
    if args.config is not None:
        path = _require_file(Path(args.config))
        try:
            base = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed JSON config {path}: {exc}") from exc
        if not isinstance(base, dict):
            raise UsageError(f"config {path} must hold a JSON object")
    overrides = {
        "algorithm": args.algorithm,
        "alpha": args.alpha,
        "n_iter": args.iters,
        "n_outer": args.outer_iters,
        "n_inner": args.inner_iters,
        "mask": {"on": True, "off": False}.get(args.mask),
        "seed": args.seed,
    }
    merged = {**base, **{k: v for k, v in overrides.items() if v is not None}}
    merged.pop("n", None)
    try:
        return harness.config_from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid attack configuration: {exc}") from exc


def cmd_attack(args) -> int:
    model_path = _require_file(Path(args.model))
    if args.classifier is not None:
        classifier_path = _require_file(Path(args.classifier))
    else:
        classifier_path = _require_file(
            model_path.parent / CLASSIFIER_FILES[args.mode or enc.PRIOR]
        )
    config = _effective_attack_config(args)

    params = enc.load_encoder(model_path)
    classifier = clf.load_classifier(classifier_path)
    if args.mode is not None and args.mode != classifier.mode:
        raise UsageError(
            f"--mode {args.mode} does not match classifier mode {classifier.mode}"
        )
    test_set = _load_split(Path(args.data), "test")

    echo = harness.config_to_dict(config)
    print("effective config:")
    for key, value in echo.items():
        print(f"  {key}: {value}")

    report = harness.run_experiment(
        test_set, params, classifier, config, n=args.n, seed=args.seed
    )
    report.config.update(
        {
            "mode": classifier.mode,
            "data": str(args.data),
            "model": str(model_path),
            "classifier": str(classifier_path),
            "n": args.n,
        }
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"report_{config.algorithm}_{classifier.mode}.json"
    report_path.write_text(report.to_json())
    mean = "n/a" if report.mean_l2 is None else f"{report.mean_l2:.4f}"
    std = "n/a" if report.std_l2 is None else f"{report.std_l2:.4f}"
    print(
        f"success rate {report.success_rate:.4f}  mean L2 {mean}  std L2 {std}"
    )
    print(f"report written to {report_path}")

    if args.dump_images:
        for record, result in zip(report.per_sample, report.results):
            idx = record["sample_index"]
            original = test_set.images[idx]
            harness.export_image(original, out / f"original_{idx:05d}.pgm")
            harness.export_image(
                np.clip(original + result.perturbation, 0.0, 1.0),
                out / f"adversarial_{idx:05d}.pgm",
            )
            harness.export_image(
                np.abs(result.perturbation), out / f"perturbation_{idx:05d}.pgm"
            )
    return 0


def cmd_report(args) -> int:
    if not args.reports:
        raise UsageError("at least one report file is required")
    rows = []
    for path in args.reports:
        path = _require_file(Path(path))
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed JSON report {path}: {exc}") from exc
        config = doc.get("config", {})
        rows.append(
            (
                config.get("mode", "?"),
                config.get("algorithm", "?"),
                doc.get("success_rate"),
                doc.get("mean_l2"),
                doc.get("std_l2"),
            )
        )
    header = f"{'classifier':<12} {'algorithm':<10} {'success':>8} {'mean L2':>9} {'std L2':>9}"
    print(header)
    print("-" * len(header))
    for mode, algorithm, rate, mean, std in rows:
        fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
        print(
            f"{mode:<12} {algorithm:<10} {fmt(rate):>8} {fmt(mean):>9} {fmt(std):>9}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capsevade",
        description="Evasion attacks against a capsule-presence pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="write the deterministic toy dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--n-train", type=int, default=1000)
    p_synth.add_argument("--n-test", type=int, default=200)
    p_synth.add_argument("--seed", type=int, default=42)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train the encoder and classifiers")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--epochs", type=int, default=1500)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.set_defaults(func=cmd_train)

    p_attack = sub.add_parser("attack", help="run an attack experiment")
    p_attack.add_argument("--data", required=True)
    p_attack.add_argument("--model", required=True)
    p_attack.add_argument("--classifier")
    p_attack.add_argument("--out", required=True)
    p_attack.add_argument("--algorithm", choices=atk.ALGORITHMS, default="opt")
    p_attack.add_argument("--mode", choices=(enc.PRIOR, enc.POSTERIOR))
    p_attack.add_argument("--mask", choices=("on", "off"), default="on")
    p_attack.add_argument("--alpha", type=float)
    p_attack.add_argument("--iters", type=int)
    p_attack.add_argument("--outer-iters", type=int)
    p_attack.add_argument("--inner-iters", type=int)
    p_attack.add_argument("--n", type=int, default=100)
    p_attack.add_argument("--seed", type=int, default=0)
    p_attack.add_argument("--config")
    p_attack.add_argument("--dump-images", action="store_true")
    p_attack.set_defaults(func=cmd_attack)

    p_report = sub.add_parser("report", help="tabulate attack reports")
    p_report.add_argument("reports", nargs="*")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (harness.IdxError, enc.ModelFormatError, clf.ClassifierFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
