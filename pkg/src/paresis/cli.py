"""Command line entry point: ``paresis <command> [flags]``.

Every command writes ``run_manifest.json`` into its ``--out`` directory.
Passing that manifest (or any JSON object with the same keys as the flags)
via ``--config`` replays the run; flags given explicitly still win.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from collections import Counter
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, causal, metrics, synthgen
from .distill import TrainConfig, TrainingDiverged, train
from .models import ModelBundle, load_checkpoint, save_checkpoint
from .ndiff import softmax_t
from .windowing import (SplitSpec, TASK_LABELS, RecordingTooShort, build_dataset, ingest_recording,
                        load_directory, read_sidecar, slide_windows, split_recordings, windows_to_set)

logger = logging.getLogger("paresis")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--out", help="output directory (required)")
    p.add_argument("--config", help="JSON file with flag values (a run_manifest.json works)")
    p.add_argument("--seed", type=int, default=0)


def _add_split(p):
    p.add_argument("--task", choices=sorted(TASK_LABELS), default="paretic")
    p.add_argument("--window", type=int, default=64, help="window length in samples")
    p.add_argument("--skip", type=int, default=None, help="window step; default window // 2")
    p.add_argument("--split", type=float, nargs=3, default=[0.8, 0.1, 0.1],
                   metavar=("TRAIN", "VAL", "TEST"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paresis", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--subjects", type=int, default=30)
    p.add_argument("--recordings-per-subject", type=int, default=9)
    p.add_argument("--length", type=int, default=400)
    p.add_argument("--channels", type=int, default=75)
    p.add_argument("--sample-rate", type=float, default=100.0)
    p.add_argument("--asymmetry", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--format", choices=["csv", "jsonl"], default="csv")

    p = sub.add_parser("preprocess", help="window, normalize and split a dataset")
    _add_common(p)
    p.add_argument("--data", help="directory of recordings + sidecars")
    _add_split(p)

    p = sub.add_parser("train", help="train TCN, LSTM or the fused model")
    _add_common(p)
    p.add_argument("--data")
    _add_split(p)
    p.add_argument("--model", choices=["fused", "tcn", "lstm"], default="fused")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--temperature", type=float, default=4.0)
    p.add_argument("--fusion-input", choices=["features", "logits"], default="features")
    p.add_argument("--soft-ce", action="store_true", help="soften the sub-network CE terms too")
    p.add_argument("--fkd-t2-scaling", action="store_true", help="multiply FKD terms by T^2")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("evaluate", help="metrics and confusion matrices for a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split-name", choices=["train", "val", "test", "all"], default="test")

    p = sub.add_parser("infer-window", help="classify every window of one recording")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--recording", help="recording file (.csv or .jsonl) with its sidecar")

    p = sub.add_parser("reason", help="posterior query on the causal network")
    _add_common(p)
    p.add_argument("--metadata", help="directory of sidecar JSON files to fit CPTs from")
    p.add_argument("--model", help="fitted causal model JSON")
    p.add_argument("--structure", help="structure/bins config; default built-in network")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--evidence", nargs="*", default=[], metavar="NODE=STATE")
    p.add_argument("--evidence-from", help="prediction.json from infer-window, or "
                   "recording_predictions.csv from evaluate (with --recording-id)")
    p.add_argument("--recording-id")
    p.add_argument("--query", default="UE-FMA")
    return parser


REQUIRED = {
    "synth": ["out"], "preprocess": ["out", "data"], "train": ["out", "data"],
    "evaluate": ["out", "checkpoint", "data"], "infer-window": ["out", "checkpoint", "recording"],
    "reason": ["out"],
}


def _load_config(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if "command" in obj and "config" in obj:
        obj = obj["config"]
    return {k.replace("-", "_"): v for k, v in obj.items() if k not in ("config", "command")}


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = _load_config(args.config)
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = set(cfg) - known
        if unknown:
            parser.error(f"unknown keys in --config: {sorted(unknown)}")
        subparser.set_defaults(**cfg)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) is None]
    if missing:
        parser.error(f"{args.command}: missing required option(s) " +
                     ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _resolved(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}


def write_manifest(out: Path, args, started: float, inputs: dict, outputs: list) -> None:
    manifest = {
        "command": args.command,
        "config": _resolved(args),
        "seed": args.seed,
        "inputs": inputs,
        "outputs": sorted(str(o) for o in outputs),
        "tool_version": __version__,
        "duration_s": round(time.time() - started, 3),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _split(args) -> SplitSpec:
    try:
        return SplitSpec(*args.split, seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _load_recordings(path):
    recs = load_directory(path)
    if not recs:
        raise CliError(f"no recordings found in {path}")
    return recs


def _write_csv(path: Path, rows):
    with path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, out: Path):
    spec = synthgen.SynthSpec(
        n_subjects=args.subjects, recordings_per_subject=args.recordings_per_subject,
        length=args.length, channels=args.channels, sample_rate_hz=args.sample_rate,
        asymmetry_factor=args.asymmetry, noise_sigma=args.noise, seed=args.seed)
    recs, _ = synthgen.generate(spec)
    synthgen.export(recs, out, spec, args.format)
    counts = Counter(r.action for r in recs)
    print(f"wrote {len(recs)} recordings to {out} ({len(counts)} actions)")
    return {}, [out / "manifest.json"]


def cmd_preprocess(args, out: Path):
    recs = _load_recordings(args.data)
    sets = build_dataset(recs, args.task, args.window, args.skip, _split(args))
    outputs = []
    for name, ws in zip(("train", "val", "test"), sets):
        path = out / f"{name}.npz"
        np.savez(path, X=ws.X, y=ws.y, source_ids=np.array(ws.source_ids, dtype=str),
                 offsets=ws.offsets, class_names=np.array(ws.class_names, dtype=str))
        outputs.append(path)
        print(f"{name}: {len(ws)} windows from {len(set(ws.source_ids))} recordings")
    return {"data": args.data}, outputs


def cmd_train(args, out: Path):
    recs = _load_recordings(args.data)
    split = _split(args)
    ids = split_recordings([r.id for r in recs], split)
    tr, va, te = build_dataset(recs, args.task, args.window, args.skip, split)
    if len(tr) == 0:
        raise CliError("training split has no windows")
    classes = TASK_LABELS[args.task]
    if args.resume:
        bundle, _ = load_checkpoint(args.resume)
        if bundle.n_classes != len(classes) or (bundle.task and bundle.task != args.task):
            raise CliError(f"checkpoint {args.resume} is for task {bundle.task!r} with "
                           f"{bundle.n_classes} classes, not {args.task!r}")
        if bundle.n_features != tr.X.shape[2]:
            raise CliError(f"checkpoint expects {bundle.n_features} channels, data has {tr.X.shape[2]}")
    else:
        bundle = ModelBundle(n_features=tr.X.shape[2], n_classes=len(classes), window_len=args.window,
                             task=args.task, mode=args.model, fusion_input=args.fusion_input,
                             class_names=classes, seed=args.seed)
    cfg = TrainConfig(temperature=args.temperature, learning_rate=args.lr, batch_size=args.batch_size,
                      epochs=args.epochs, seed=args.seed, soft_ce=args.soft_ce,
                      fkd_t2_scaling=args.fkd_t2_scaling)
    try:
        bundle, history = train(bundle, tr.X, tr.y, va.X, va.y, cfg)
    except TrainingDiverged as exc:
        raise CliError(str(exc)) from None
    extra = {"window": args.window, "skip": args.skip, "split": list(args.split), "split_seed": args.seed,
             "split_ids": dict(zip(("train", "val", "test"), ids)), "train_config": asdict(cfg)}
    ckpt = out / "checkpoint.npz"
    save_checkpoint(bundle, ckpt, extra)
    hist_path = out / "history.csv"
    if history:
        cols = list(history[0])
        _write_csv(hist_path, [cols] + [[repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols]
                                        for r in history])
    else:
        _write_csv(hist_path, [["epoch"]])
    (out / "split.json").write_text(json.dumps(extra["split_ids"], indent=1) + "\n")
    best = max((r["val_accuracy"] for r in history), default=float("nan"))
    print(f"trained {args.model} on {len(tr)} windows; best val accuracy {best:.4f}")
    return {"data": args.data, "resume": args.resume}, [ckpt, hist_path, out / "split.json"]


def _checkpoint_windows(bundle, extra, data, split_name):
    recs = _load_recordings(data)
    if split_name != "all" and extra.get("split_ids"):
        wanted = set(extra["split_ids"][split_name])
        recs = [r for r in recs if r.id in wanted]
    if not recs:
        raise CliError(f"no recordings in split {split_name!r}")
    task = bundle.task or "paretic"
    return windows_to_set(recs, task, bundle.window_len, extra.get("skip"))


def cmd_evaluate(args, out: Path):
    bundle, extra = load_checkpoint(args.checkpoint)
    ws = _checkpoint_windows(bundle, extra, args.data, args.split_name)
    if len(ws) == 0:
        raise CliError("no windows to evaluate")
    pred = bundle.predict_logits(ws.X).argmax(axis=1)
    names = bundle.class_names or ws.class_names
    cm = metrics.confusion(ws.y, pred, bundle.n_classes, names)
    rep = metrics.report(cm)
    summary, per_class = metrics.report_to_csv(rep)
    files = {"metrics.csv": summary, "per_class.csv": per_class,
             "confusion.csv": metrics.render_confusion(cm, "none"),
             "confusion_row.csv": metrics.render_confusion(cm, "row")}
    for name, text in files.items():
        (out / name).write_text(text)
    rows = [["recording_id", "truth", "predicted", "n_windows", "vote_share"]]
    by_rec: dict[str, list[int]] = {}
    truth: dict[str, int] = {}
    for sid, p, t in zip(ws.source_ids, pred, ws.y):
        by_rec.setdefault(sid, []).append(int(p))
        truth[sid] = int(t)
    for sid in sorted(by_rec):
        label, votes = Counter(by_rec[sid]).most_common(1)[0]
        rows.append([sid, names[truth[sid]], names[label], len(by_rec[sid]),
                     f"{votes / len(by_rec[sid]):.4f}"])
    _write_csv(out / "recording_predictions.csv", rows)
    print(metrics.format_report(rep))
    print(metrics.render_confusion(cm, "row", fmt="text"))
    outputs = [out / n for n in files] + [out / "recording_predictions.csv"]
    return {"checkpoint": args.checkpoint, "data": args.data}, outputs


def cmd_infer_window(args, out: Path):
    bundle, extra = load_checkpoint(args.checkpoint)
    rec = ingest_recording(args.recording)
    try:
        wins = slide_windows(rec, bundle.window_len, extra.get("skip"))
    except RecordingTooShort as exc:
        raise CliError(str(exc)) from None
    X = np.stack([w.data for w in wins])
    X = X - X[:, :1]
    probs = softmax_t(bundle.predict_logits(X), 1.0)
    names = bundle.class_names or TASK_LABELS.get(bundle.task, tuple(map(str, range(bundle.n_classes))))
    rows = [["offset", "predicted", *[f"p_{n}" for n in names]]]
    for w, p in zip(wins, probs):
        rows.append([w.offset, names[int(p.argmax())], *[repr(float(v)) for v in p]])
    _write_csv(out / "window_predictions.csv", rows)
    mean = probs.mean(axis=0)
    summary = {"recording_id": rec.id, "task": bundle.task, "prediction": names[int(mean.argmax())],
               "mean_probabilities": dict(zip(names, map(float, mean))), "n_windows": len(wins)}
    (out / "prediction.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"{rec.id}: {summary['prediction']} over {len(wins)} windows")
    return {"checkpoint": args.checkpoint, "recording": args.recording}, \
        [out / "window_predictions.csv", out / "prediction.json"]


TASK_NODE = {"paretic": "Paretic"}


def _evidence(args) -> dict:
    ev = {}
    for item in args.evidence:
        if "=" not in item:
            raise CliError(f"evidence must look like NODE=STATE, got {item!r}")
        k, v = item.split("=", 1)
        ev[k] = v
    if args.evidence_from:
        path = Path(args.evidence_from)
        if path.suffix == ".json":
            obj = json.loads(path.read_text())
            node = TASK_NODE.get(obj.get("task"))
            if node is None:
                raise CliError(f"{path}: only paretic predictions can be used as evidence")
            ev.setdefault(node, obj["prediction"])
        else:
            if not args.recording_id:
                raise CliError("--evidence-from with a CSV needs --recording-id")
            with path.open() as fh:
                rows = {r["recording_id"]: r for r in csv.DictReader(fh)}
            if args.recording_id not in rows:
                raise CliError(f"{args.recording_id} not in {path}")
            ev.setdefault("Paretic", rows[args.recording_id]["predicted"])
    return ev


def cmd_reason(args, out: Path):
    if bool(args.metadata) == bool(args.model):
        raise CliError("give exactly one of --metadata or --model")
    if args.model:
        model = causal.CausalModel.load(args.model)
    else:
        dag = causal.load_structure(args.structure)
        records = [read_sidecar(p) for p in sorted(Path(args.metadata).glob("*.json"))
                   if p.name not in ("manifest.json", "run_manifest.json")]
        if not records:
            raise CliError(f"no sidecar files in {args.metadata}")
        model = causal.fit_cpts(dag, records, args.alpha)
    if args.query not in model.nodes:
        raise CliError(f"unknown query node {args.query!r}; nodes are {list(model.nodes)}")
    ev = _evidence(args)
    try:
        dist = causal.posterior(model, ev, args.query)
    except causal.ImpossibleEvidence as exc:
        raise CliError(f"impossible evidence: {exc}") from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    text = causal.format_posterior(model, dist, args.query, ev)
    print(text)
    node = model.nodes[args.query]
    rows = [["state", "probability"]] + [[s, repr(float(p))] for s, p in zip(node.states, dist)]
    if node.numeric:
        rows.append(["expected_value", repr(float(dist @ np.asarray(node.midpoints)))])
    _write_csv(out / "posterior.csv", rows)
    model.save(out / "causal_model.json")
    return {"metadata": args.metadata, "model": args.model, "structure": args.structure}, \
        [out / "posterior.csv", out / "causal_model.json"]


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train,
            "evaluate": cmd_evaluate, "infer-window": cmd_infer_window, "reason": cmd_reason}


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        inputs, outputs = COMMANDS[args.command](args, out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    write_manifest(out, args, started, inputs, outputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
