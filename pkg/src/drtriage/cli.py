"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import coral, metrics, modelio, train
from .config import ConfigError, RunConfig, load_run_config, write_resolved
from .dataset import ManifestError, Source, SynthParams, load_pixels, synth_manifest, write_manifest, write_png
from .preproc import PreprocessError, Stages, preprocess
from .train import TrainingError

log = logging.getLogger("drtriage")

RUNTIME_ERRORS = (
    OSError,
    ManifestError,
    PreprocessError,
    TrainingError,
    modelio.ModelFormatError,
    metrics.UndefinedMetricError,
    ValueError,
    RuntimeError,
)


class UsageError(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _workers(args) -> int:
    return 1 if args.single_thread else max(1, os.cpu_count() or 1)


@contextlib.contextmanager
def _thread_mode(single: bool):
    if not single:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    out = Path(args.out if getattr(args, "out", None) else (cfg.output_dir if cfg else "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cfg(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if getattr(args, "out", None):
        cfg.output_dir = str(args.out)
    return cfg


def cmd_synth(args) -> int:
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    params = SynthParams(args.side, args.lesions_per_grade, args.vessel_walks, args.seed)
    man = synth_manifest(args.per_grade, params)
    for s in man.samples:
        write_png(out / "images" / f"{s.id}.png", s.pixels)
    write_manifest(man, out / "manifest.csv")
    resolved = {
        "seed": args.seed,
        "dataset": {
            "kind": "manifest",
            "manifests": [
                {
                    "csv": str(out / "manifest.csv"),
                    "image_dir": str(out / "images"),
                    "source": Source.SYNTH.value,
                    "id_column": "id_code",
                    "grade_column": "diagnosis",
                    "extension": ".png",
                }
            ],
        },
        "synth": {
            "per_grade": args.per_grade,
            "image_side": args.side,
            "lesions_per_grade": args.lesions_per_grade,
            "vessel_walks": args.vessel_walks,
            "seed": args.seed,
        },
    }
    (out / "resolved-config.json").write_text(_dump(resolved))
    print(f"wrote {len(man)} images and manifest.csv to {out}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    write_resolved(cfg, out / "resolved-config.json")
    man = cfg.load_dataset()
    if args.debug:
        (out / "debug").mkdir(exist_ok=True)
    for s in man.samples:
        stages = Stages() if args.debug else None
        t = preprocess(load_pixels(s), cfg.preproc, stages)
        np.save(out / f"{s.id}.npy", t)
        if stages is not None:
            for name, img in stages.images.items():
                write_png(out / "debug" / f"{s.id}_{name}.png", img)
    print(f"preprocessed {len(man)} images into {out}")
    return 0


def _trace_writer(out: Path, header: str = ""):
    jsonl = open(out / "trace.jsonl", "w", encoding="utf-8")
    text = open(out / "trace.log", "w", encoding="utf-8")
    text.write(header)
    rows: list[dict] = []

    def on_epoch(r: dict) -> None:
        rows.append(r)
        jsonl.write(json.dumps(r, sort_keys=True) + "\n")
        jsonl.flush()
        qwk = "n/a" if r["val_qwk"] is None else f"{r['val_qwk']:.4f}"
        text.write(
            f"fold {r['fold']} epoch {r['epoch']:3d}  train_loss {r['train_loss']:.4f}  "
            f"val_qwk {qwk}  val_acc {r['val_accuracy']:.4f}  val_mae {r['val_mae']:.4f}\n"
        )
        text.flush()

    def close() -> None:
        jsonl.close()
        text.close()
        with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fold", "epoch", "train_loss", "val_qwk", "val_accuracy", "val_mae"])
            for r in rows:
                w.writerow([r["fold"], r["epoch"], r["train_loss"], r["val_qwk"], r["val_accuracy"], r["val_mae"]])

    return on_epoch, close


def _assumption_note(cfg: RunConfig) -> str:
    t = cfg.train
    return (
        f"assumed hyperparameters (unstated for the original model): learning_rate={t.learning_rate} "
        f"batch_size={t.batch_size} patience={t.patience} smoothing_epsilon={t.smoothing_epsilon}\n"
    )


def write_report(report: metrics.MetricsReport, out: Path, stem: str = "report") -> str:
    text = metrics.render_text(report)
    (out / f"{stem}.txt").write_text(text, encoding="utf-8")
    (out / f"{stem}.json").write_text(_dump(report.to_dict()), encoding="utf-8")
    with open(out / f"{stem}-confusion.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        names = list(metrics.GRADE_NAMES[: len(report.confusion)])
        w.writerow(["true\\pred"] + names)
        for name, row in zip(names, report.confusion):
            w.writerow([name] + row)
    return text


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    write_resolved(cfg, out / "resolved-config.json")
    on_epoch, close = _trace_writer(out, _assumption_note(cfg))
    try:
        man = cfg.load_dataset()
        data = train.prepare(man, cfg.preproc, _workers(args))
        res = train.cross_validate(data, cfg.backbone, cfg.train, cfg.preproc, cfg.augment, on_epoch)
    finally:
        close()
    for f, model in enumerate(res.models):
        if model.kind == "coral":
            (out / f"fold{f}.rtm").write_bytes(modelio.save_model(model))
    summary = res.summary()
    summary["best_fold"] = res.best_fold()
    summary["head"] = cfg.train.head
    if cfg.train.head == "coral":
        summary["biases_sorted"] = [bool(m.head.biases_sorted()) for m in res.models]
    (out / "summary.json").write_text(_dump(summary), encoding="utf-8")
    report = metrics.build_report(res.out_of_fold().records(), K=5)
    write_report(report, out, "oof-report")
    q, a = summary["qwk"], summary["accuracy"]
    print(f"qwk {q['mean']:.4f} ± {q['std']:.4f}   accuracy {a['mean']:.4f} ± {a['std']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    write_resolved(cfg, out / "resolved-config.json")
    seeds = args.seeds if args.seeds else cfg.ablation_seeds
    data = train.prepare(cfg.load_dataset(), cfg.preproc, _workers(args))
    report = train.ablate(data, cfg.backbone, cfg.train, seeds, cfg.preproc, cfg.augment)
    (out / "ablation.json").write_text(_dump(report), encoding="utf-8")
    lines = ["head     seed   qwk (mean ± std)     accuracy (mean ± std)   mean abs error"]
    for head in ("coral", "softmax"):
        for s in report[head]:
            lines.append(
                f"{head:8s} {s['seed']:4d}   {s['qwk']['mean']:.4f} ± {s['qwk']['std']:.4f}      "
                f"{s['accuracy']['mean']:.4f} ± {s['accuracy']['std']:.4f}         {s['mae']['mean']:.4f}"
            )
    for head in ("coral", "softmax"):
        m = report[f"{head}_mean"]
        lines.append(f"{head} over seeds: qwk {m['qwk']:.4f}  accuracy {m['accuracy']:.4f}  mae {m['mae']:.4f}")
    text = "\n".join(lines) + "\n"
    (out / "ablation.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def _model_predictions(model, cfg: RunConfig, args) -> train.Predictions:
    data = train.prepare(cfg.load_dataset(), model.preproc, _workers(args))
    return train.predict(model, data)


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    model = modelio.load_model(Path(args.model).read_bytes())
    out = _out_dir(args, cfg)
    write_resolved(cfg, out / "resolved-config.json")
    pred = _model_predictions(model, cfg, args)
    calibrated = replace(pred, logits=coral.apply_temperature(pred.logits, model.temperature))
    report = metrics.build_report(calibrated.records(), K=model.K, worst=args.worst)
    text = write_report(report, out, "report")
    print(text, end="")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _load_cfg(args)
    src = Path(args.model)
    model = modelio.load_model(src.read_bytes())
    pred = _model_predictions(model, cfg, args)
    targets = coral.cumulative_targets(pred.labels, model.K)
    T = coral.fit_temperature(pred.logits, targets)
    before = metrics.ece_cumulative(coral._sigmoid(pred.logits), targets)
    after = metrics.ece_cumulative(coral._sigmoid(coral.apply_temperature(pred.logits, T)), targets)
    model.temperature = T
    dest = Path(args.output) if args.output else src
    dest.write_bytes(modelio.save_model(model))
    resolved = cfg.resolved()
    resolved["calibration"] = {"model": str(src), "output": str(dest), "temperature": T}
    Path(str(dest) + ".resolved-config.json").write_text(_dump(resolved))
    print(json.dumps({"temperature": T, "ece_before": before, "ece_after": after}))
    return 0


def cmd_export(args) -> int:
    run = Path(args.run_dir)
    summary = json.loads((run / "summary.json").read_text())
    fold = summary["best_fold"] if args.fold is None else args.fold
    model = modelio.load_model((run / f"fold{fold}.rtm").read_bytes())
    if args.temperature is not None:
        if not args.temperature > 0:
            raise UsageError("--temperature must be positive")
        model.temperature = args.temperature
    blob = modelio.save_model(model)
    Path(args.output).write_bytes(blob)
    resolved = json.loads((run / "resolved-config.json").read_text())
    resolved["export"] = {"run_dir": str(run), "fold": fold, "temperature": model.temperature}
    Path(str(args.output) + ".resolved-config.json").write_text(_dump(resolved))
    print(f"exported fold {fold} to {args.output} ({len(blob)} bytes)")
    return 0


def cmd_infer(args) -> int:
    blob = Path(args.model).read_bytes()
    if args.dump_header:
        print(_dump(modelio.dump_header(blob)), end="")
        return 0
    if not args.image:
        raise UsageError("infer needs at least one --image (or --dump-header)")
    model = modelio.load_model(blob)
    for path in args.image:
        from .dataset import read_png

        grade, probs, calibrated = modelio.infer(model, read_png(path))
        line = {
            "id": Path(path).stem,
            "grade": grade,
            "cumulative_probs": [float(p) for p in probs],
            "calibrated_probs": [float(p) for p in calibrated],
        }
        print(json.dumps(line))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved-config.json").write_text(
            _dump({"model": str(args.model), "header": modelio.dump_header(blob), "images": list(args.image)})
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drtriage", description="Ordinal diabetic-retinopathy triage pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--single-thread", action="store_true", help="force single-threaded, bitwise-reproducible mode")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic graded fundus dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--per-grade", type=int, default=120)
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--lesions-per-grade", type=int, default=3)
    s.add_argument("--vessel-walks", type=int, default=6)
    s.add_argument("--seed", type=int, required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="preprocess the configured dataset into tensors")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--debug", action="store_true", help="also write every intermediate stage as PNG")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="stratified cross-validation training")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("ablate", help="CORAL vs softmax head on identical folds and seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--seeds", type=int, nargs="+")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("evaluate", help="metrics report for a model on the configured dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--worst", type=int, default=10)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("calibrate", help="fit the temperature on the configured dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--output", help="write here instead of rewriting --model")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("export", help="write the chosen fold checkpoint as a model file")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--fold", type=int)
    s.add_argument("--temperature", type=float)
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("infer", help="grade images with a model file (JSON lines on stdout)")
    s.add_argument("--model", required=True)
    s.add_argument("--image", action="append", default=[])
    s.add_argument("--out", help="directory for the resolved-config record")
    s.add_argument("--dump-header", action="store_true", help="print the model file header and exit")
    s.set_defaults(func=cmd_infer)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_mode(args.single_thread):
            return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"drtriage: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"drtriage: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
