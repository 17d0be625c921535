"""Deterministic command-line pipeline with manifest-recorded runs.

Every command writes a sidecar manifest (resolved flags, seeds, input hashes,
tool version, duration) and each produced artifact embeds the hash of its
producer's manifest; downstream commands refuse to run on artifacts whose
recorded hashes do not match their inputs.  Identical manifests -- duration
aside -- imply byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import asdict, dataclass

from . import __version__
from . import dataset as dsmod
from .codebook import DEFAULT_RESOLUTION, calibrate, load_codebook, save_codebook
from .errors import (
    NumericalError,
    ProvenanceError,
    RisLabError,
    ValidationError,
)
from .evaluation import (
    evaluate,
    load_baseline,
    load_summary,
    render_table,
    report_csv,
    save_baseline,
    summary_values,
    train_baseline,
    SUMMARY_HEADER,
)
from .neural import TrainConfig, load_checkpoint, save_checkpoint, train
from .provenance import canonical_json, sha256_file, sha256_text
from .scene import default_template, parse_scene, write_scene
from .simulate import EnclosureSolver, resolve_workers


@dataclass
class RunManifest:
    """Everything that determines a command's outputs, plus its duration.

    The manifest hash covers every field except duration_s, so reruns that
    differ only in wall time produce identical hashes and therefore
    byte-identical artifacts.
    """

    command: str
    flags: dict
    seed: int | None
    scene_hash: str
    dataset_hash: str
    checkpoint_hash: str
    tool_version: str
    duration_s: float = 0.0

    def hash(self):
        payload = {k: v for k, v in asdict(self).items() if k != "duration_s"}
        # worker count affects wall time only, never results
        payload["flags"] = {k: v for k, v in payload["flags"].items() if k != "workers"}
        return sha256_text(canonical_json(payload))


def _manifest(command, args, seed=None, scene_hash="", dataset_hash="", checkpoint_hash=""):
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    return RunManifest(
        command=command,
        flags=flags,
        seed=seed,
        scene_hash=scene_hash,
        dataset_hash=dataset_hash,
        checkpoint_hash=checkpoint_hash,
        tool_version=__version__,
    )


def _write_manifest(manifest: RunManifest, out, t0, outputs=()):
    """Sidecar JSON next to the artifact (or inside an output directory)."""
    manifest.duration_s = time.monotonic() - t0
    sidecar = asdict(manifest)
    sidecar["manifest_hash"] = manifest.hash()
    sidecar["outputs"] = {os.path.basename(p): sha256_file(p) for p in outputs}
    path = os.path.join(out, "manifest.json") if os.path.isdir(out) else out + ".manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(sidecar) + "\n")
    return path


def _read_text(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None


def _canonical_scene(path):
    """(template, canonical hash) for a scene file, whatever its formatting."""
    tpl = parse_scene(_read_text(path))
    return tpl, sha256_text(write_scene(tpl))


def _require(match, what, expected, actual):
    if not match:
        raise ProvenanceError(
            f"{what} mismatch: expected {expected[:12]}..., found {actual[:12]}...; "
            "refusing to mix artifacts from different runs"
        )


# ---------------------------------------------------------------------------
# commands

def cmd_scene_init(args):
    if os.path.exists(args.out) and not args.force:
        raise ValidationError(f"{args.out} exists; pass --force to overwrite")
    t0 = time.monotonic()
    text = write_scene(default_template())
    parse_scene(text)  # validate before anything touches the file
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(text)
    parse_scene(_read_text(args.out))  # and the file as written
    manifest = _manifest("scene-init", args, scene_hash=sha256_text(text))
    _write_manifest(manifest, args.out, t0, outputs=[args.out])
    print(f"wrote {args.out}")


def cmd_generate(args):
    t0 = time.monotonic()
    tpl, scene_hash = _canonical_scene(args.scene)
    workers = resolve_workers(args.workers)
    ds = dsmod.generate(tpl, args.configs, args.so_samples, args.seed, workers=workers)
    if args.snr_db is not None:
        ds = dsmod.apply_noise(ds, args.snr_db)
    manifest = _manifest("generate", args, seed=args.seed, scene_hash=scene_hash)
    ds.manifest_hash = manifest.hash()
    dsmod.save(ds, args.out)
    _write_manifest(manifest, args.out, t0, outputs=[args.out])
    print(f"wrote {args.out} ({len(ds.records)} records, K={ds.n_configs})")


def _history_path(checkpoint_path):
    return os.path.splitext(checkpoint_path)[0] + ".history.csv"


def _write_history(path, history):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, train_loss, val_loss in history:
            w.writerow([epoch, repr(train_loss), repr(val_loss)])


def _load_split_features(dataset_path):
    """Dataset plus its fitted features; splits always use the dataset seed."""
    ds = dsmod.load(dataset_path)
    train_recs, val_recs, test_recs = dsmod.split(ds, ds.seed)
    stats = dsmod.fit_norm(train_recs)
    return ds, (train_recs, val_recs, test_recs), stats


def cmd_train(args):
    t0 = time.monotonic()
    dataset_hash = sha256_file(args.dataset)
    ds, (train_recs, val_recs, _), stats = _load_split_features(args.dataset)
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr=args.lr, alpha=args.alpha,
        seed=args.seed,
    )
    workers = resolve_workers(args.workers)
    result = train(
        dsmod.feature_tensor(train_recs, stats),
        dsmod.feature_tensor(val_recs, stats),
        cfg,
        workers=workers,
    )
    manifest = _manifest("train", args, seed=args.seed, dataset_hash=dataset_hash,
                         scene_hash=ds.scene_hash)
    meta = {
        "dataset_hash": dataset_hash,
        "scene_hash": ds.scene_hash,
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch,
        "lr": args.lr,
        "alpha": args.alpha,
        "val_loss": result.val_loss,
        "best_epoch": result.best_epoch,
        "norm": stats.to_jsonable(),
        "manifest_hash": manifest.hash(),
    }
    save_checkpoint(args.out, result.params, meta)
    hist = _history_path(args.out)
    _write_history(hist, result.history)
    _write_manifest(manifest, args.out, t0, outputs=[args.out, hist])
    print(f"wrote {args.out} (val loss {result.val_loss:.6f}, best epoch {result.best_epoch})")


def cmd_train_baseline(args):
    t0 = time.monotonic()
    dataset_hash = sha256_file(args.dataset)
    ds, (train_recs, val_recs, _), stats = _load_split_features(args.dataset)

    def flat(recs):
        x, _, u, _ = dsmod.feature_tensor(recs, stats)
        return x.reshape(x.shape[0], -1), u

    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr=args.lr, alpha=args.alpha,
        seed=args.seed,
    )
    result = train_baseline(flat(train_recs), flat(val_recs), cfg)
    manifest = _manifest("train-baseline", args, seed=args.seed, dataset_hash=dataset_hash,
                         scene_hash=ds.scene_hash)
    meta = {
        "dataset_hash": dataset_hash,
        "scene_hash": ds.scene_hash,
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch,
        "lr": args.lr,
        "alpha": args.alpha,
        "val_loss": result.val_loss,
        "best_epoch": result.best_epoch,
        "norm": stats.to_jsonable(),
        "manifest_hash": manifest.hash(),
    }
    save_baseline(args.out, result.params, meta)
    hist = _history_path(args.out)
    _write_history(hist, result.history)
    _write_manifest(manifest, args.out, t0, outputs=[args.out, hist])
    print(f"wrote {args.out} (val loss {result.val_loss:.6f}, best epoch {result.best_epoch})")


def cmd_calibrate(args):
    t0 = time.monotonic()
    tpl, scene_hash = _canonical_scene(args.scene)
    dataset_hash = sha256_file(args.dataset)
    checkpoint_hash = sha256_file(args.checkpoint)
    ds = dsmod.load(args.dataset)
    _require(scene_hash == ds.scene_hash, "scene hash", ds.scene_hash, scene_hash)
    theta, header = load_checkpoint(args.checkpoint)
    _require(header.get("dataset_hash") == dataset_hash, "dataset hash",
             header.get("dataset_hash", ""), dataset_hash)
    stats = dsmod.NormStats.from_jsonable(header["norm"])
    workers = resolve_workers(args.workers)
    cb = calibrate(theta, stats, tpl, ds.configs, args.resolution, workers=workers)
    manifest = _manifest("calibrate", args, scene_hash=scene_hash,
                         dataset_hash=dataset_hash, checkpoint_hash=checkpoint_hash)
    cb.checkpoint_hash = checkpoint_hash
    cb.manifest_hash = manifest.hash()
    save_codebook(cb, args.out)
    _write_manifest(manifest, args.out, t0, outputs=[args.out])
    print(f"wrote {args.out} ({len(cb.entries)} buckets, resolution {cb.resolution})")


def cmd_evaluate(args):
    t0 = time.monotonic()
    dataset_hash = sha256_file(args.dataset)
    checkpoint_hash = sha256_file(args.checkpoint)
    ds, (_, _, test_recs), _fit = _load_split_features(args.dataset)
    if not ds.scene_text:
        raise ValidationError(f"{args.dataset} has no embedded scene; regenerate it")
    tpl = parse_scene(ds.scene_text)
    theta, header = load_checkpoint(args.checkpoint)
    _require(header.get("dataset_hash") == dataset_hash, "dataset hash",
             header.get("dataset_hash", ""), dataset_hash)
    cb = load_codebook(args.codebook)
    _require(cb.checkpoint_hash == checkpoint_hash, "checkpoint hash",
             cb.checkpoint_hash, checkpoint_hash)
    _require(cb.scene_hash == ds.scene_hash, "scene hash", cb.scene_hash, ds.scene_hash)
    baseline, base_header = load_baseline(args.baseline)
    _require(base_header.get("dataset_hash") == dataset_hash, "dataset hash",
             base_header.get("dataset_hash", ""), dataset_hash)
    stats = dsmod.NormStats.from_jsonable(header["norm"])

    os.makedirs(args.out, exist_ok=True)
    solver = EnclosureSolver(tpl, workers=resolve_workers(args.workers))
    result = evaluate(test_recs, theta, stats, cb, baseline, tpl, solver=solver)
    series = os.path.join(args.out, "series.csv")
    summary = os.path.join(args.out, "summary.csv")
    table = os.path.join(args.out, "table.txt")
    report_csv(result.se_random, result.se_optimized, result.row, series, summary)
    text = render_table([result.row])
    with open(table, "w", encoding="utf-8") as fh:
        fh.write(text)
    manifest = _manifest("evaluate", args, dataset_hash=dataset_hash,
                         checkpoint_hash=checkpoint_hash, scene_hash=ds.scene_hash)
    _write_manifest(manifest, args.out, t0, outputs=[series, summary, table])
    print(text, end="")


def cmd_report(args):
    t0 = time.monotonic()
    rows = [load_summary(os.path.join(d, "summary.csv")) for d in args.eval_dir]
    rows.sort(key=lambda r: (r.n_ris, r.k))
    os.makedirs(args.out, exist_ok=True)
    summary = os.path.join(args.out, "summary.csv")
    table = os.path.join(args.out, "table.txt")
    with open(summary, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow(summary_values(r))
    text = render_table(rows)
    with open(table, "w", encoding="utf-8") as fh:
        fh.write(text)
    manifest = _manifest("report", args)
    _write_manifest(manifest, args.out, t0, outputs=[summary, table])
    print(text, end="")


# ---------------------------------------------------------------------------
# parser and dispatch

def _add_workers(p):
    p.add_argument("--workers", type=int, default=None,
                   help="worker threads (default: RIS_LAB_WORKERS or all cores); "
                        "affects wall time only, never results")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rislab",
        description="Deterministic enclosure-simulation, training, codebook "
                    "calibration, and evaluation pipeline.",
    )
    parser.add_argument("--version", action="version", version=f"rislab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scene-init", help="write the default enclosure template")
    p.add_argument("--out", required=True, help="scene file to create (text format)")
    p.add_argument("--force", action="store_true", help="overwrite an existing file")
    p.set_defaults(func=cmd_scene_init)

    p = sub.add_parser("generate", help="simulate the labelled channel dataset")
    p.add_argument("--scene", required=True, help="scene file from scene-init")
    p.add_argument("--configs", type=int, required=True,
                   help="number K of distinct configurations to sample")
    p.add_argument("--so-samples", type=int, required=True,
                   help="object states per configuration")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--snr-db", type=float, default=None,
                   help="per-record measurement SNR in dB (default: noiseless)")
    p.add_argument("--out", required=True,
                   help="dataset file: JSON header line + one record per line")
    _add_workers(p)
    p.set_defaults(func=cmd_generate)

    for name, fn in (("train", cmd_train), ("train-baseline", cmd_train_baseline)):
        p = sub.add_parser(name, help="fit the recurrent model" if name == "train"
                           else "fit the random-configuration feedforward baseline")
        p.add_argument("--dataset", required=True, help="dataset file from generate")
        p.add_argument("--epochs", type=int, default=200)
        p.add_argument("--batch", type=int, default=32)
        p.add_argument("--lr", type=float, default=1e-4)
        p.add_argument("--alpha", type=float, default=1e-4,
                       help="L2 regularization weight")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True,
                       help="checkpoint file (JSON header + float64 block); "
                            "a loss-history CSV lands next to it")
        _add_workers(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("calibrate", help="build the configuration codebook")
    p.add_argument("--checkpoint", required=True, help="trained model from train")
    p.add_argument("--scene", required=True, help="the scene the dataset came from")
    p.add_argument("--dataset", required=True, help="the dataset the model trained on")
    p.add_argument("--resolution", type=int, default=DEFAULT_RESOLUTION,
                   help="buckets per object-path parameter")
    p.add_argument("--out", required=True, help="codebook file (JSON)")
    _add_workers(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="replay the test split down both paths")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--baseline", required=True, help="checkpoint from train-baseline")
    p.add_argument("--out", required=True,
                   help="output directory: series.csv, summary.csv, table.txt")
    _add_workers(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="combine evaluation summaries into one table")
    p.add_argument("--eval-dir", action="append", required=True,
                   help="evaluate output directory (repeatable)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ProvenanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RisLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        # missing or unwritable files are input mistakes, not crashes
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
