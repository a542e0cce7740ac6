"""Command-line entry point: ``neurofuse {synth,label,train,evaluate}``."""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .architecture import CascadeHead, Network, build_cascade_head, build_network, load_checkpoint, save_checkpoint
from .data import (
    MANIFEST_FIELDS,
    SPLITS,
    generate_synthetic_dataset,
    patient_split,
    read_csv,
    read_manifest,
    synthetic_ehr_rows,
    write_csv,
    write_split,
    write_volume,
)
from .labeling import (
    EHR_FIELDS,
    Exclusion,
    label_dataset,
    read_ehr_csv,
    read_labels,
    read_scans,
    write_exclusions,
    write_labels,
)
from .metrics import (
    OVR_KEYS,
    REPORT_KEYS,
    alpha_sweep,
    auc_report,
    best_from_sweep,
    fuse,
    macro_of,
    metric_values,
    precision_recall,
)
from .training import (
    Example,
    TrainConfig,
    encode_examples,
    predict,
    train,
    train_cascade,
    write_log,
)

log = logging.getLogger("neurofuse")

CASCADE_FUSION = {"cascade-add": "additive", "cascade-concat": "concatenated"}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _prepare_out(out: Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise CliError("exists", f"{out} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _write_run_manifest(out: Path, command: str, config: dict) -> None:
    """Resolved config twice: ``config.json`` (reproducible) and ``run_manifest.json`` (timestamped)."""
    _dump_json(out / "config.json", {"command": command, **config})
    _dump_json(
        out / "run_manifest.json",
        {
            "command": command,
            "version": __version__,
            "created": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
            "config": config,
        },
    )


def _jsonable(ns: argparse.Namespace) -> dict:
    out = {}
    for k, v in sorted(vars(ns).items()):
        if k == "func":
            continue
        out[k] = str(v) if isinstance(v, Path) else v
    return out


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> None:
    out = _prepare_out(args.out, args.force)
    vol_dir = out / "volumes"
    vol_dir.mkdir()
    ds = generate_synthetic_dataset(
        args.n_patients, args.sessions, seed=args.seed, extents=tuple(args.extents)
    )
    rows, truth = [], []
    for pair in ds.pairs:
        t1 = Path("volumes") / f"{pair.session_id}_T1.nfvol"
        fl = Path("volumes") / f"{pair.session_id}_FLAIR.nfvol"
        write_volume(out / t1, pair.t1)
        write_volume(out / fl, pair.flair)
        rows.append(
            {
                "patient_id": pair.patient_id,
                "session_id": pair.session_id,
                "scan_date": pair.scan_date.isoformat(),
                "t1_path": t1.as_posix(),
                "flair_path": fl.as_posix(),
            }
        )
        truth.append({"session_id": pair.session_id, "label": ("CN", "MCI", "AD")[ds.labels[pair.session_id]]})
    write_csv(out / "manifest.csv", MANIFEST_FIELDS, rows)
    write_csv(out / "ehr.csv", EHR_FIELDS, synthetic_ehr_rows(ds, args.seed))
    write_csv(out / "truth.csv", ("session_id", "label"), truth)
    _write_run_manifest(out, "synth", _jsonable(args))
    print(f"wrote {len(rows)} sessions to {out}")


# ---------------------------------------------------------------------------
# label


def cmd_label(args) -> None:
    out = _prepare_out(args.out, args.force)
    ehr_path = Path(args.ehr)
    if ehr_path.stat().st_size == 0:
        visits, problems = [], []
    else:
        visits, problems = read_ehr_csv(ehr_path)

    scans, bad_scans = read_scans(read_csv(args.scans, ("patient_id", "session_id", "scan_date")))
    labeled, excluded = label_dataset(visits, scans)
    write_labels(out / "labels.csv", labeled)
    write_exclusions(
        out / "exclusions.csv",
        list(bad_scans) + list(excluded) + [Exclusion("", p) for p in problems],
    )
    _write_run_manifest(out, "label", _jsonable(args))
    print(f"labeled {len(labeled)} scans, excluded {len(bad_scans) + len(excluded)}")


# ---------------------------------------------------------------------------
# shared dataset assembly


def _load_examples(args) -> tuple[dict[str, dict[str, list[Example]]], dict]:
    """Examples per split and per modality, joined from the manifest and labels."""
    manifest = {r.session_id: r for r in read_manifest(args.manifest)}
    labeled = read_labels(args.labels)
    if not labeled:
        raise CliError("data", f"{args.labels} contains no labeled scans")
    missing = [s.session_id for s in labeled if s.session_id not in manifest]
    if missing:
        raise CliError("data", f"labeled sessions absent from the manifest: {missing[:5]}")
    worst: dict[str, int] = {}
    for s in labeled:
        worst[s.patient_id] = max(worst.get(s.patient_id, 0), int(s.label))
    split = patient_split(worst, seed=args.split_seed)
    per_split = {name: {"T1": [], "FLAIR": []} for name in SPLITS}
    for s in sorted(labeled, key=lambda s: s.session_id):
        row = manifest[s.session_id]
        bucket = per_split[split[s.patient_id]]
        bucket["T1"].append(Example(s.session_id, s.patient_id, int(s.label), row.t1_path))
        bucket["FLAIR"].append(Example(s.session_id, s.patient_id, int(s.label), row.flair_path))
    return per_split, split


def _load_network(path, role: str) -> Network:
    if path is None:
        raise CliError("usage", f"{role} checkpoint is required")
    model = load_checkpoint(path)
    if not isinstance(model, Network):
        raise CliError("data", f"{path} is a cascade head, expected a network")
    return model


def _encodings(net: Network, examples) -> dict[str, np.ndarray]:
    enc = encode_examples(net, examples)
    return {ex.session_id: enc[i] for i, ex in enumerate(examples)}


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> None:
    mode = args.mode.replace("-", "_")
    if mode in ("baseline", "fine_tune") and args.checkpoint_in is None:
        raise CliError("usage", f"--mode {args.mode} needs --checkpoint-in (nothing to transfer)")
    if mode == "cascade" and args.fusion not in CASCADE_FUSION:
        raise CliError("usage", "--mode cascade needs --fusion cascade-add or cascade-concat")
    config = TrainConfig(
        transfer_mode=mode,
        learning_rate=args.lr,
        momentum=args.momentum,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        augment=not args.no_augment,
    )
    out = _prepare_out(args.out, args.force)
    per_split, split = _load_examples(args)
    write_split(out / "split.csv", split)
    train_ex = per_split["train"]
    val_ex = per_split["validation"]

    if mode == "cascade":
        t1_net = _load_network(args.t1_checkpoint, "--t1-checkpoint")
        fl_net = _load_network(args.flair_checkpoint, "--flair-checkpoint")
        head = build_cascade_head(CASCADE_FUSION[args.fusion], seed=args.seed)
        labels = {ex.session_id: ex.label for ex in train_ex["T1"]}
        val = None
        if val_ex["T1"]:
            val = (
                _encodings(t1_net, val_ex["T1"]),
                _encodings(fl_net, val_ex["FLAIR"]),
                {ex.session_id: ex.label for ex in val_ex["T1"]},
            )
        result = train_cascade(
            head, _encodings(t1_net, train_ex["T1"]), _encodings(fl_net, train_ex["FLAIR"]), labels, config, val
        )
    else:
        modality = args.modality.upper()
        if args.checkpoint_in is not None:
            net = _load_network(args.checkpoint_in, "--checkpoint-in")
        else:
            net = build_network(args.widening_factor, seed=args.seed, channels=args.channels)
        result = train(net, train_ex[modality], config, validation=val_ex[modality] or None)

    save_checkpoint(out / "checkpoint.nfuse", result.model)
    write_log(out / "train_log.csv", result.log)
    resolved = _jsonable(args)
    resolved.update({"resolved_epochs": config.epochs, "best_epoch": result.best_epoch})
    _write_run_manifest(out, "train", resolved)
    print(f"trained {mode} for {config.epochs} epochs; checkpoint at {out / 'checkpoint.nfuse'}")


# ---------------------------------------------------------------------------
# evaluate


def _row(name: str, split: str, probs, y, curves: dict, alpha=None) -> dict:
    rep = auc_report(probs, y)
    for key, pts in rep.curves.items():
        curves[f"{name}:{key}"] = pts
    row = {"experiment": name, "split": split, "n": int(len(y))}
    row.update(rep.as_row())
    if alpha is not None:
        row["alpha"] = alpha
    row["precision_recall"] = precision_recall(probs, y)
    return row


def _weighted_row(split, p1, p2, y, sweep_val, curves) -> dict:
    """Each column evaluated at the fusion weight that maximizes it on validation."""
    alphas = {}
    for key in REPORT_KEYS:
        defined = [r for r in sweep_val if r[key] is not None]
        # a metric undefined on validation (missing class) gets no weight and no value
        alphas[key] = best_from_sweep(defined, key)["alpha"] if defined else None
    row = {"experiment": "weighted", "split": split, "n": int(len(y))}
    for key in REPORT_KEYS:
        if alphas[key] is None:
            row[key] = None
            continue
        row[key] = metric_values(fuse(p1, p2, alphas[key]), y)[key]
    # macro stays the mean of the reported one-vs-rest columns; the value at
    # macro's own single weight is kept alongside
    row["macro_single_alpha"] = row["macro"]
    row["macro"] = macro_of([row[k] for k in OVR_KEYS])
    fused = fuse(p1, p2, 0.5 if alphas["micro"] is None else alphas["micro"])
    for key, pts in auc_report(fused, y).curves.items():
        curves[f"weighted:{key}"] = pts
    row["alpha"] = alphas
    row["precision_recall"] = precision_recall(fused, y)
    return row


def cmd_evaluate(args) -> None:
    fusions = args.fusion
    out = _prepare_out(args.out, args.force)
    per_split, _ = _load_examples(args)
    target = per_split[args.split]
    y = np.array([ex.label for ex in target["T1"]], dtype=np.int64)
    if len(y) == 0:
        raise CliError("data", f"split {args.split!r} is empty")
    rows, curves = [], {}
    probs: dict[str, np.ndarray] = {}
    nets: dict[str, Network] = {}

    def net_for(modality):
        if modality not in nets:
            path = args.t1_checkpoint if modality == "T1" else args.flair_checkpoint
            if path is None and args.checkpoint is not None and args.modality.upper() == modality:
                path = args.checkpoint
            nets[modality] = _load_network(path, f"--{modality.lower()}-checkpoint")
        return nets[modality]

    def probs_for(modality, split_name=args.split):
        key = f"{modality}:{split_name}"
        if key not in probs:
            probs[key] = predict(net_for(modality), per_split[split_name][modality])
        return probs[key]

    if "none" in fusions:
        wanted = []
        if args.checkpoint is not None:
            wanted.append(args.modality.upper())
        for m, path in (("T1", args.t1_checkpoint), ("FLAIR", args.flair_checkpoint)):
            if path is not None and m not in wanted:
                wanted.append(m)
        if not wanted:
            raise CliError("usage", "--fusion none needs --checkpoint or per-modality checkpoints")
        for m in wanted:
            rows.append(_row(m.lower(), args.split, probs_for(m), y, curves))

    if "weighted" in fusions:
        yv = np.array([ex.label for ex in per_split["validation"]["T1"]], dtype=np.int64)
        if len(yv) == 0:
            raise CliError("data", "weighted fusion selects alpha on the validation split, which is empty")
        sweep = alpha_sweep(probs_for("T1", "validation"), probs_for("FLAIR", "validation"), yv, args.alpha_step)
        write_csv(out / "alpha_sweep.csv", ("alpha",) + REPORT_KEYS, sweep)
        done = {r["experiment"] for r in rows}
        for m in ("T1", "FLAIR"):
            if m.lower() not in done:
                rows.append(_row(m.lower(), args.split, probs_for(m), y, curves))
        rows.append(_weighted_row(args.split, probs_for("T1"), probs_for("FLAIR"), y, sweep, curves))

    for fusion in (f for f in fusions if f in CASCADE_FUSION):
        path = args.cascade_add_checkpoint if fusion == "cascade-add" else args.cascade_concat_checkpoint
        if path is None:
            raise CliError("usage", f"--fusion {fusion} needs --{fusion}-checkpoint")
        head = load_checkpoint(path)
        if not isinstance(head, CascadeHead) or head.mode != CASCADE_FUSION[fusion]:
            raise CliError("data", f"{path} is not a {CASCADE_FUSION[fusion]} cascade head")
        e1 = encode_examples(net_for("T1"), target["T1"])
        e2 = encode_examples(net_for("FLAIR"), target["FLAIR"])
        name = fusion.replace("-", "_")
        rows.append(_row(name, args.split, head.forward(e1, e2), y, curves))

    _dump_json(out / "report.json", {"split": args.split, "columns": list(REPORT_KEYS), "rows": rows})
    roc_rows = [
        {"curve_name": name, "fpr": fpr, "tpr": tpr} for name, pts in curves.items() for fpr, tpr in pts
    ]
    write_csv(out / "roc.csv", ("curve_name", "fpr", "tpr"), roc_rows)
    _write_run_manifest(out, "evaluate", _jsonable(args))
    for r in rows:
        cols = "  ".join(f"{k}={'n/a' if r[k] is None else f'{r[k]:.3f}'}" for k in REPORT_KEYS)
        print(f"{r['experiment']:<15}{cols}")


# ---------------------------------------------------------------------------


def _channels(text: str) -> tuple[int, ...]:
    parts = tuple(int(p) for p in text.split(","))
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("--channels takes four comma-separated ints")
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neurofuse", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired T1/FLAIR dataset")
    p.add_argument("--n-patients", type=int, default=30)
    p.add_argument("--sessions", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extents", type=int, nargs=3, default=[121, 145, 121])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("label", help="derive per-scan labels from EHR visits")
    p.add_argument("--ehr", type=Path, required=True)
    p.add_argument("--scans", type=Path, required=True, help="dataset manifest CSV")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_label)

    def dataset_args(p):
        p.add_argument("--manifest", type=Path, required=True)
        p.add_argument("--labels", type=Path, required=True, help="labeled manifest from `label`")
        p.add_argument("--split-seed", type=int, default=0)

    p = sub.add_parser("train", help="train a network or a cascade head")
    dataset_args(p)
    p.add_argument("--mode", choices=("baseline", "fine-tune", "retrain", "cascade"), default="retrain")
    p.add_argument("--modality", choices=("t1", "flair"), default="t1")
    p.add_argument("--fusion", choices=tuple(CASCADE_FUSION), help="cascade head type for --mode cascade")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--widening-factor", type=int, default=1)
    p.add_argument("--channels", type=_channels, default=None, help="override conv widths, e.g. 2,4,8,8")
    p.add_argument("--checkpoint-in", type=Path)
    p.add_argument("--t1-checkpoint", type=Path)
    p.add_argument("--flair-checkpoint", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="AUC report, ROC points and fusion sweep")
    dataset_args(p)
    p.add_argument("--split", choices=SPLITS, default="validation")
    p.add_argument(
        "--fusion", nargs="+", default=["none"],
        choices=("none", "weighted", "cascade-add", "cascade-concat"),
    )
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--modality", choices=("t1", "flair"), default="t1")
    p.add_argument("--t1-checkpoint", type=Path)
    p.add_argument("--flair-checkpoint", type=Path)
    p.add_argument("--cascade-add-checkpoint", type=Path)
    p.add_argument("--cascade-concat-checkpoint", type=Path)
    p.add_argument("--alpha-step", type=float, default=0.01)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: invalid-input: {str(exc).splitlines()[0]}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
