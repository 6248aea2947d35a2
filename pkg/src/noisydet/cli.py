"""Command-line entry point: ``noisydet {inject,train,eval,analyze,rerun}``.

Every command writes a JSON manifest next to its outputs. ``rerun`` replays
a manifest, optionally into a different output location.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import secrets
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from noisydet import __version__
from noisydet.coteach import BatchNoiseParams, CountMode, ScheduleParams, SelectionMode, expected_noisy_remaining
from noisydet.evalkit import (
    DEFAULT_BUCKETS,
    KITTI_MODERATE,
    SchemaMismatch,
    evaluate,
    read_detections_csv,
    size_bucketed_report,
)
from noisydet.label_io import KITTI_CATEGORIES, KITTI_IMAGE_SIZE, LabelError, atomic_write_text, load_dataset, save_dataset
from noisydet.noise_forge import NoiseError, NoiseKind, NoiseSpec, inject
from noisydet.toy_world.scene import SceneConfig
from noisydet.toy_world.training import DivergenceDetected, TrainConfig, train_coteach

log = logging.getLogger("noisydet")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad input from the user; maps to exit code 2."""


# ---- helpers ----------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest(command: str, args: dict, config: dict, seeds: dict, inputs: dict, outputs: dict, t0: float) -> dict:
    return {
        "command": command,
        "args": args,
        "config": config,
        "seeds": seeds,
        "version": __version__,
        "inputs": inputs,
        "outputs": outputs,
        "duration_s": round(time.perf_counter() - t0, 3),
    }


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} not found: {p}")
    return p


def _dataclass_from(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise UsageError(f"config section {name!r} has unknown keys: {sorted(unknown)}")
    return cls(**section)


# ---- inject -----------------------------------------------------------------


def _noise_spec_from_args(a) -> NoiseSpec:
    if a.spec:
        try:
            d = json.loads(Path(a.spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read noise spec {a.spec}: {exc}") from None
    else:
        if a.kind is None or a.p is None:
            raise UsageError("give --spec or both --kind and --p")
        d = {"kind": a.kind, "probability": a.p}
    for key, attr in (("kind", "kind"), ("probability", "p"), ("seed", "seed"), ("jitter_shift_sigma", "shift_sigma"),
                      ("jitter_scale_sigma", "scale_sigma"), ("spurious_count", "spurious_count")):
        v = getattr(a, attr)
        if v is not None:
            d[key] = v
    if d.get("seed") is None:
        d["seed"] = secrets.randbits(63)
    try:
        return NoiseSpec.from_dict(d)
    except (NoiseError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid noise spec: {exc}") from None


def cmd_inject(a) -> int:
    t0 = time.perf_counter()
    labels = _require_dir(a.labels, "labels directory")
    spec = _noise_spec_from_args(a)
    cats = tuple(a.categories) if a.categories else KITTI_CATEGORIES
    size = tuple(a.image_size) if a.image_size else KITTI_IMAGE_SIZE
    try:
        clean = load_dataset(labels, cats, strict=not a.lenient, image_size=size)
    except LabelError as exc:
        raise UsageError(str(exc)) from None
    noisy, ledger = inject(clean, spec)
    out = Path(a.out)
    save_dataset(noisy, out / "labels")
    atomic_write_text(out / "ledger.csv", ledger.to_csv())
    args = {"labels": str(labels), "out": str(out), "categories": list(cats), "image_size": list(size),
            "lenient": bool(a.lenient), "spec": spec.to_dict()}
    _write_json(out / "manifest.json", _manifest(
        "inject", args, {"noise": spec.to_dict()}, {"noise": spec.seed},
        {"labels": str(labels)}, {"labels": str(out / "labels"), "ledger": str(out / "ledger.csv")}, t0))
    print(f"{noisy.n_annotations} annotations in {len(noisy)} frames, {len(ledger)} ledger entries -> {out}")
    return EXIT_OK


# ---- train ------------------------------------------------------------------


def default_config() -> dict:
    scene = SceneConfig().to_dict()
    train = TrainConfig().to_dict()
    noise = NoiseSpec(NoiseKind.COMBINED, 0.5, seed=0).to_dict()
    return {"schema_version": SCHEMA_VERSION, "scene": scene, "noise": noise, "train": train}


def parse_config(cfg: dict) -> tuple[SceneConfig, NoiseSpec | None, TrainConfig]:
    """Validate a train config tree. ``noise`` may be null for clean training."""
    for key in ("schema_version", "scene", "noise", "train"):
        if key not in cfg:
            raise UsageError(f"config is missing required key {key!r}")
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise UsageError(f"unsupported schema_version {cfg['schema_version']!r}; expected {SCHEMA_VERSION}")
    try:
        scene = _dataclass_from(SceneConfig, cfg["scene"], "scene")
        train_d = dict(cfg["train"])
        if isinstance(train_d.get("schedule"), dict):
            train_d["schedule"] = _dataclass_from(ScheduleParams, train_d["schedule"], "train.schedule")
        train = _dataclass_from(TrainConfig, train_d, "train")
        noise = None if cfg["noise"] is None else NoiseSpec.from_dict(cfg["noise"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    return scene, noise, train


def _config_tree(scene: SceneConfig, noise: NoiseSpec | None, train: TrainConfig) -> dict:
    return {"schema_version": SCHEMA_VERSION, "scene": scene.to_dict(),
            "noise": None if noise is None else noise.to_dict(), "train": train.to_dict()}


def _save_models(path: Path, models) -> None:
    arrays = {}
    for k, m in enumerate(models, start=1):
        arrays[f"net{k}_params"] = m.params
        arrays[f"net{k}_m"] = m.m
        arrays[f"net{k}_v"] = m.v
        arrays[f"net{k}_step"] = np.array(m.step)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def cmd_train(a) -> int:
    if a.print_default_config:
        print(json.dumps(default_config(), indent=2, sort_keys=True))
        return EXIT_OK
    if not a.config:
        raise UsageError("--config is required (see --print-default-config)")
    t0 = time.perf_counter()
    try:
        cfg = json.loads(Path(a.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {a.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    train_d = cfg.get("train")
    if isinstance(train_d, dict):
        if a.mode is not None:
            train_d["mode"] = a.mode
        if a.epochs is not None:
            train_d["epochs"] = a.epochs
    scene, noise, train = parse_config(cfg)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        if row["net"] == 1 and not a.quiet:
            ap = "" if row["test_ap"] is None else f" test_ap={row['test_ap']:.4f}"
            print(f"epoch {row['epoch']:>3} loss={row['loss_total']:.4f}{ap}", file=sys.stderr, flush=True)

    tree = _config_tree(scene, noise, train)
    seeds = {"scene": scene.seed, "noise": None if noise is None else noise.seed,
             "nets": list(train.net_seeds), "data": train.data_seed}
    outputs = {"history": str(out / "history.csv"), "models": str(out / "models.npz")}
    status = EXIT_OK
    try:
        hist = train_coteach(scene, noise, train, progress)
    except DivergenceDetected as exc:
        log.error("%s", exc)
        hist = exc.history
        status = EXIT_FAILURE
    atomic_write_text(out / "history.csv", hist.to_csv())
    if hist.models is not None:
        _save_models(out / "models.npz", hist.models)
    args = {"config": tree, "out": str(out)}
    _write_json(out / "manifest.json", _manifest("train", args, tree, seeds, {"config": str(a.config)}, outputs, t0))
    if status == EXIT_OK:
        print(f"final test AP net1={hist.final('test_ap', 1):.4f} net2={hist.final('test_ap', 2):.4f} -> {out}")
    return status


# ---- eval -------------------------------------------------------------------


def cmd_eval(a) -> int:
    t0 = time.perf_counter()
    labels = _require_dir(a.labels, "labels directory")
    det_path = Path(a.detections)
    if not det_path.is_file():
        raise UsageError(f"detections file not found: {det_path}")
    cats = tuple(a.categories) if a.categories else KITTI_CATEGORIES
    size = tuple(a.image_size) if a.image_size else KITTI_IMAGE_SIZE
    try:
        gt_ds = load_dataset(labels, cats, strict=not a.lenient, image_size=size)
        dets = read_detections_csv(det_path.read_text())
    except (LabelError, SchemaMismatch) as exc:
        log.error("%s", exc)
        return EXIT_FAILURE
    gts = {f.frame_id: f.annotations for f in gt_ds.frames}
    present = [c for c in cats if any(an.category == c for f in gt_ds.frames for an in f.annotations)
               or any(d.category == c for d in dets)]
    report = evaluate(dets, gts, present, a.iou, KITTI_MODERATE if a.moderate else None)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"summary": str(out / "summary.json")}
    for cat, curve in report.curves.items():
        p = out / f"pr_{cat}.csv"
        atomic_write_text(p, curve.to_csv())
        outputs[f"pr_{cat}"] = str(p)
    summary = report.summary()
    if a.buckets:
        summary["buckets"] = {}
        for cat in present:
            curves = size_bucketed_report(dets, gts, cat, DEFAULT_BUCKETS, iou_threshold=a.iou)
            summary["buckets"][cat] = {k: None if v is None else v.summary() for k, v in curves.items()}
            for name, v in curves.items():
                if v is not None and name != "All":
                    p = out / f"pr_{cat}_{name}.csv"
                    atomic_write_text(p, v.to_csv())
                    outputs[f"pr_{cat}_{name}"] = str(p)
    _write_json(out / "summary.json", summary)
    args = {"detections": str(det_path), "labels": str(labels), "out": str(out), "categories": list(cats),
            "image_size": list(size), "iou": a.iou, "moderate": bool(a.moderate), "buckets": bool(a.buckets),
            "lenient": bool(a.lenient)}
    _write_json(out / "manifest.json", _manifest("eval", args, {}, {}, {"detections": str(det_path), "labels": str(labels)},
                                                 outputs, t0))
    print(f"mAP={report.mean_ap:.4f} over {len(present)} categories -> {out}")
    return EXIT_OK


# ---- analyze ----------------------------------------------------------------

ANALYZE_COLUMNS = ["N", "p", "phi", "mode", "expected_count", "expected_fraction"]


def analyze_rows(ns, ps, phi: float, mode: CountMode, per_object: bool) -> list[dict]:
    rows = []
    for p in ps:
        for n in ns:
            params = BatchNoiseParams(int(n), float(p), phi, mode, per_object)
            count, frac = expected_noisy_remaining(params)
            rows.append({"N": params.effective_n, "p": float(p), "phi": phi, "mode": params.mode.value,
                         "expected_count": count, "expected_fraction": frac})
    return rows


def analyze_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, ANALYZE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def cmd_analyze(a) -> int:
    t0 = time.perf_counter()
    if a.n_range:
        lo, hi, step = a.n_range
        if lo < 1 or hi < lo or step < 1:
            raise UsageError("--n-range needs 1 <= start <= stop and step >= 1")
        ns = list(range(lo, hi + 1, step))
    else:
        ns = a.n
    if any(n < 1 for n in ns):
        raise UsageError("batch sizes must be >= 1")
    if any(not 0.0 <= p <= 1.0 for p in a.p):
        raise UsageError("probabilities must lie in [0, 1]")
    if not a.phi > 0:
        raise UsageError("--phi must be positive")
    text = analyze_csv(analyze_rows(ns, a.p, a.phi, CountMode(a.mode), a.per_object))
    if a.out is None:
        sys.stdout.write(text)
        return EXIT_OK
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out, text)
    args = {"n": list(ns), "p": list(a.p), "phi": a.phi, "mode": a.mode, "per_object": bool(a.per_object), "out": str(out)}
    _write_json(out.with_suffix(".manifest.json"), _manifest("analyze", args, {}, {}, {}, {"csv": str(out)}, t0))
    return EXIT_OK


# ---- rerun ------------------------------------------------------------------


def _argv_from_manifest(m: dict, out: str | None) -> list[str]:
    cmd, args = m["command"], m["args"]
    if cmd == "inject":
        spec = args["spec"]
        argv = ["inject", "--labels", args["labels"], "--out", out or args["out"], "--kind", spec["kind"],
                "--p", repr(spec["probability"]), "--seed", str(spec["seed"]),
                "--shift-sigma", repr(spec["jitter_shift_sigma"]), "--scale-sigma", repr(spec["jitter_scale_sigma"]),
                "--spurious-count", str(spec["spurious_count"]),
                "--image-size", *(repr(float(v)) for v in args["image_size"]), "--categories", *args["categories"]]
        return argv + (["--lenient"] if args["lenient"] else [])
    if cmd == "eval":
        argv = ["eval", "--detections", args["detections"], "--labels", args["labels"], "--out", out or args["out"],
                "--iou", repr(args["iou"]), "--image-size", *(repr(float(v)) for v in args["image_size"]),
                "--categories", *args["categories"]]
        for flag in ("moderate", "buckets", "lenient"):
            if args[flag]:
                argv.append(f"--{flag}")
        return argv
    if cmd == "analyze":
        return ["analyze", "--n", *map(str, args["n"]), "--p", *map(repr, args["p"]), "--phi", repr(args["phi"]),
                "--mode", args["mode"], "--out", out or args["out"]] + (["--per-object"] if args["per_object"] else [])
    raise UsageError(f"unknown manifest command {cmd!r}")


def cmd_rerun(a) -> int:
    try:
        m = json.loads(Path(a.manifest).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read manifest {a.manifest}: {exc}") from None
    if m.get("command") == "train":
        out = Path(a.out or m["args"]["out"])
        out.mkdir(parents=True, exist_ok=True)
        cfg_path = out / "config.json"
        _write_json(cfg_path, m["args"]["config"])
        return main(["train", "--config", str(cfg_path), "--out", str(out), "--quiet"])
    return main(_argv_from_manifest(m, a.out))


# ---- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="noisydet", description="Noisy-label detection experiments.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inject", help="corrupt a KITTI label directory")
    p.add_argument("--labels", required=True, help="directory of KITTI .txt label files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--spec", help="noise spec JSON file; flags override its values")
    p.add_argument("--kind", choices=[k.value for k in NoiseKind if k not in (NoiseKind.SYMMETRY, NoiseKind.SYSTEMATIC)])
    p.add_argument("--p", type=float, help="noise probability")
    p.add_argument("--seed", type=int, help="generated and recorded when omitted")
    p.add_argument("--shift-sigma", type=float)
    p.add_argument("--scale-sigma", type=float)
    p.add_argument("--spurious-count", type=int)
    p.add_argument("--categories", nargs="+", help=f"category set (default: {' '.join(KITTI_CATEGORIES)})")
    p.add_argument("--image-size", nargs=2, type=float, metavar=("W", "H"))
    p.add_argument("--lenient", action="store_true", help="skip malformed lines and map unknown categories to DontCare")
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("train", help="train a toy network pair")
    p.add_argument("--config", help="JSON config with schema_version, scene, noise and train sections")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--mode", choices=[m.value for m in SelectionMode])
    p.add_argument("--epochs", type=int)
    p.add_argument("--print-default-config", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a detections CSV against KITTI labels")
    p.add_argument("--detections", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--categories", nargs="+")
    p.add_argument("--image-size", nargs=2, type=float, metavar=("W", "H"))
    p.add_argument("--moderate", action="store_true", help="KITTI moderate difficulty filter")
    p.add_argument("--buckets", action="store_true", help="also report Small/Medium/Large by box height")
    p.add_argument("--lenient", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="expected residual noise after selection, swept over batch size")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--n", type=int, nargs="+", default=[2, 4, 8, 16, 32, 64, 128, 256])
    g.add_argument("--n-range", type=int, nargs=3, metavar=("START", "STOP", "STEP"))
    p.add_argument("--p", type=float, nargs="+", default=[0.1, 0.25, 0.4])
    p.add_argument("--phi", type=float, default=1.0)
    p.add_argument("--mode", choices=[m.value for m in CountMode], default=CountMode.CAPACITY.value)
    p.add_argument("--per-object", action="store_true", help="scale N by phi")
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("rerun", help="re-execute a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="write to this location instead of the recorded one")
    p.set_defaults(func=cmd_rerun)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return a.func(a)
    except UsageError as exc:
        print(f"noisydet {a.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - surface any runtime failure as exit 1
        print(f"noisydet {a.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
