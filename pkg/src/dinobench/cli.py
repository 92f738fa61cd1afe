"""Command-line entry point: ``dinobench <command> ...``.

Exit codes: 0 ok, 2 config/usage error, 3 data error, 4 numeric failure.
Failures print one line ``error: <category>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import classifiers as clf
from .config import RunConfig, from_dict, load_config, write_echo
from .data_io import (Checkpoint, SynthConfig, generate_synthetic, load_checkpoint, load_dataset, load_features,
                      read_labels, save_checkpoint, save_features, write_labels)
from .errors import ConfigError, DataError, DinoBenchError, UsageError
from .features import extract_features, fit_pipeline
from .harness import SweepReport, default_workers, format_table, run_sweep
from .metrics import balanced_accuracy, confusion_matrix, sample_n_per_class, stratified_split
from .trainer import pretrain, state_from_checkpoint, teacher_params

log = logging.getLogger("dinobench")

OUT_ENV = "DINOBENCH_OUT"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_path(p) -> Path:
    """Relative output paths resolve under ``$DINOBENCH_OUT`` when it is set."""
    path = Path(p)
    root = os.environ.get(OUT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _config(args, **overrides) -> RunConfig:
    return load_config(getattr(args, "config", None), overrides)


def _checkpoint_config(ckpt: Checkpoint) -> RunConfig:
    try:
        return from_dict(ckpt.config)
    except ConfigError as exc:
        raise ConfigError(f"checkpoint config echo unusable: {exc}") from None


# -- commands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = SynthConfig(classes=args.classes, per_class=args.per_class,
                      unlabeled_per_class=args.unlabeled_per_class, size=args.size)
    if cfg.per_class < 1:
        raise ConfigError("per-class must be positive")
    out = _out_path(args.out)
    manifest = generate_synthetic(out, cfg, args.seed)
    echo = {"classes": cfg.classes, "per_class": cfg.per_class, "unlabeled_per_class": cfg.unlabeled_per_class,
            "size": cfg.size, "seed": args.seed}
    _write_json(out / "synth_config.json", echo)
    print(manifest)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args, **{"data.manifest": args.data, "trainer.steps": args.steps, "run.seed": args.seed})
    if cfg.data.manifest is None:
        raise ConfigError("data.manifest: no dataset given (use --data or the config file)")
    ds = load_dataset(cfg.data.manifest, cfg.data.resolution, cfg.data.channels)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_echo(cfg, out)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        state_from_checkpoint(resume, cfg.backbone, cfg.trainer)  # structure check up front
    every = max(1, cfg.trainer.steps // 20)

    def progress(m):
        if m["step"] % every == 0 or m["step"] == cfg.trainer.steps:
            print(f"step {m['step']}/{cfg.trainer.steps} loss {m['loss']:.4f} entropy {m['entropy']:.3f}",
                  file=sys.stderr)

    pretrain(ds.all_images(), cfg.backbone, cfg.trainer, cfg.augment, cfg.run.seed, out_dir=out,
             resume=resume, config_echo=cfg.to_dict(), progress=progress)
    print(out / "checkpoint.ckpt")
    return 0


def _labeled_split(ds, cfg: RunConfig, split: str):
    if split == "all":
        return np.arange(len(ds.labels))
    train, test = stratified_split(ds.labels, cfg.sweep.test_fraction, cfg.run.seed)
    return train if split == "train" else test


def cmd_extract(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(ckpt)
    if args.config:
        cfg = _config(args)
    manifest = args.data or cfg.data.manifest
    if manifest is None:
        raise ConfigError("data.manifest: no dataset given (use --data)")
    ds = load_dataset(manifest, cfg.data.resolution, cfg.data.channels)
    idx = _labeled_split(ds, cfg, args.split)
    fm = extract_features(teacher_params(ckpt), ds.labeled_images[idx], [ds.labeled_ids[i] for i in idx],
                          cfg.backbone, cfg.data.resolution)
    out = _out_path(args.out)
    save_features(out, fm)
    labels_path = out.with_suffix(".labels.csv")
    write_labels(labels_path, fm.ids, ds.labels[idx], ds.classes)
    print(out)
    return 0


def _aligned_labels(fm, labels_path) -> np.ndarray:
    mapping = read_labels(labels_path)
    missing = [i for i in fm.ids if i not in mapping]
    if missing:
        raise DataError(f"{labels_path}: no label for {len(missing)} feature id(s), e.g. {missing[0]}")
    return np.array([mapping[i] for i in fm.ids], dtype=np.int64)


def _model_tensors(name: str, model, pipe) -> dict[str, np.ndarray]:
    t = {}
    if pipe is not None:
        t.update({"pca/mean": pipe.pca.mean, "pca/components": pipe.pca.components,
                  "power/lambdas": pipe.power.lambdas, "power/means": pipe.power.means,
                  "power/stds": pipe.power.stds})
    if name == "svm":
        t.update({"svm/support_vectors": model.support_vectors, "svm/dual_coef": model.dual_coef,
                  "svm/intercepts": model.intercepts})
    elif name == "lr":
        t.update({"lr/W": model.W, "lr/b": model.b})
    elif name == "knn":
        t.update({"knn/X": model.X, "knn/y": model.y.astype(np.float64)})
    else:
        t.update({"probe/weight": model.weight, "probe/bias": model.bias})
        t.update({f"backbone/{k}": v for k, v in model.backbone.items()})
    return {k: np.asarray(v, dtype=np.float32) for k, v in t.items()}


def cmd_fit(args) -> int:
    cfg = _config(args, **{"run.seed": args.seed})
    seed = cfg.run.seed
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_echo(cfg, out)
    metrics: dict = {"classifier": args.classifier, "n_per_class": args.n_per_class, "seed": seed}
    meta: dict = {}

    if args.classifier in ("probe", "baseline"):
        if not args.checkpoint or not args.data:
            raise UsageError("probe and baseline need --checkpoint and --data (they train on images)")
        ckpt = load_checkpoint(args.checkpoint)
        ccfg = _checkpoint_config(ckpt)
        ds = load_dataset(args.data, ccfg.data.resolution, ccfg.data.channels)
        train, test = stratified_split(ds.labels, cfg.sweep.test_fraction, seed)
        sub = sample_n_per_class(train, ds.labels, args.n_per_class, seed) if args.n_per_class else train
        pcfg = cfg.classifiers.probe(ccfg.data.resolution)
        fit = clf.fit_linear_probe if args.classifier == "probe" else clf.fit_dl_baseline
        model = fit(teacher_params(ckpt), ds.labeled_images[sub], ds.labels[sub], ccfg.backbone, pcfg,
                    seed=seed, policy=ccfg.augment, n_classes=ds.num_classes)
        pred = model.predict(ds.labeled_images[test])
        y_test = ds.labels[test]
        metrics.update(epochs_run=model.epochs_run, val_history=model.val_history)
        tensors = _model_tensors(args.classifier, model, None)
        n_classes = ds.num_classes
    else:
        fm = load_features(args.features)
        y = _aligned_labels(fm, args.labels)
        n_classes = int(y.max()) + 1
        idx = np.arange(len(y))
        sub = sample_n_per_class(idx, y, args.n_per_class, seed) if args.n_per_class else idx
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            pipe, Xtr = fit_pipeline(fm.values[sub])
        c = cfg.classifiers
        if args.classifier == "svm":
            model = clf.fit_svm_rbf(Xtr, y[sub], C=c.svm_C, tol=c.svm_tol, n_classes=n_classes)
            meta.update(gamma=model.gamma, C=model.C)
            predict = model.predict
        elif args.classifier == "lr":
            model = clf.fit_logreg(Xtr, y[sub], l2=c.lr_l2, n_classes=n_classes)
            predict = model.predict
        else:
            model = clf.fit_knn(Xtr, y[sub], k=c.knn_k, n_classes=n_classes)
            predict = lambda X: clf.knn_predict(model, X)
        metrics["train_balanced_accuracy"] = balanced_accuracy(y[sub], predict(Xtr))
        tensors = _model_tensors(args.classifier, model, pipe)
        pred = y_test = None
        if args.test_features:
            if not args.test_labels:
                raise UsageError("--test-features needs --test-labels")
            tfm = load_features(args.test_features)
            y_test = _aligned_labels(tfm, args.test_labels)
            pred = predict(pipe.transform(tfm.values))

    if y_test is not None:
        metrics["test_balanced_accuracy"] = balanced_accuracy(y_test, pred)
        metrics["confusion"] = confusion_matrix(y_test, pred, n_classes).tolist()
    metrics["train_size"] = int(len(sub))
    save_checkpoint(out / "model.ckpt", Checkpoint(config=cfg.to_dict(), seed=seed, step=0, tensors=tensors,
                                                   meta={"classifier": args.classifier, **meta}))
    _write_json(out / "metrics.json", metrics)
    print(json.dumps({k: v for k, v in metrics.items() if k.endswith("accuracy")}, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    workers = args.workers or default_workers()
    if args.features:
        if not args.labels:
            raise UsageError("--features needs --labels")
        cfg = _config(args, **{"run.seed": args.seed})
        fm = load_features(args.features)
        X, y = fm.values, _aligned_labels(fm, args.labels)
    else:
        if not args.checkpoint:
            raise UsageError("sweep needs --checkpoint (with --data or data.manifest) or --features/--labels")
        ckpt = load_checkpoint(args.checkpoint)
        cfg = _config(args, **{"run.seed": args.seed}) if args.config else _checkpoint_config(ckpt)
        manifest = args.data or cfg.data.manifest
        if manifest is None:
            raise ConfigError("data.manifest: no dataset given (use --data)")
        ds = load_dataset(manifest, cfg.data.resolution, cfg.data.channels)
        X = extract_features(teacher_params(ckpt), ds.labeled_images, ds.labeled_ids, cfg.backbone,
                             cfg.data.resolution).values
        y = ds.labels
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_echo(cfg, out)
    scfg = cfg.sweep_config(workers)
    report = run_sweep(X, y, scfg, config_echo=cfg.to_dict())
    (out / "sweep.json").write_text(report.to_json())
    (out / "sweep.csv").write_text(report.to_csv())
    failed = sum(len(c.errors) for c in report.cells)
    if failed:
        print(f"{failed} repeat(s) failed; see sweep.json", file=sys.stderr)
    print(out / "sweep.json")
    return 0


def cmd_report(args) -> int:
    path = Path(args.sweep_json)
    if not path.is_file():
        raise DataError(f"sweep report not found: {path}")
    report = SweepReport.from_json(path.read_text())
    sys.stdout.write(format_table(report) if args.format == "table" else report.to_csv())
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dinobench", description="Self-distilled features and label-efficiency sweeps.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic texture dataset")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--unlabeled-per-class", type=int, default=0)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="self-distillation pretraining")
    s.add_argument("--config")
    s.add_argument("--data", help="manifest CSV (overrides data.manifest)")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("extract", help="teacher features for a labeled split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--config", help="override the config stored in the checkpoint")
    s.add_argument("--split", choices=("train", "test", "all"), default="all")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("fit", help="fit one classifier")
    s.add_argument("--classifier", choices=("svm", "lr", "knn", "probe", "baseline"), required=True)
    s.add_argument("--features")
    s.add_argument("--labels")
    s.add_argument("--test-features")
    s.add_argument("--test-labels")
    s.add_argument("--checkpoint", help="probe/baseline: pretrained checkpoint")
    s.add_argument("--data", help="probe/baseline: manifest CSV")
    s.add_argument("--n-per-class", type=int, default=0, help="0 uses every training sample")
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("sweep", help="repeated n-per-class sweep")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--features")
    s.add_argument("--labels")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int, help="parallel processes (default: available cores)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="print a sweep as a table or CSV")
    s.add_argument("--sweep-json", required=True)
    s.add_argument("--format", choices=("table", "csv"), default="table")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        if getattr(args, "classifier", None) in ("svm", "lr", "knn") and not (args.features and args.labels):
            raise UsageError(f"{args.classifier} needs --features and --labels")
        return args.func(args)
    except DinoBenchError as exc:
        print(f"error: {exc.category}: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}",
              file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return DataError.exit_code
    except Exception as exc:  # keep the one-line contract for anything unforeseen
        log.debug("unhandled exception", exc_info=True)
        print(f"error: {DinoBenchError.category}: {type(exc).__name__}: {exc}".splitlines()[0], file=sys.stderr)
        return DinoBenchError.exit_code


if __name__ == "__main__":
    sys.exit(main())
