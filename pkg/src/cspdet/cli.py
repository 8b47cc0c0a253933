"""``cspdet`` command line: train, detect, eval, inspect-targets, gradcheck, ablate, generate.

Exit codes: 0 success, 1 check failure, 2 configuration or input error,
3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import numerics as nx
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import CodecConfig, encode_targets
from .config import ConfigError, load_config
from .data import (generate_dataset, load_annotations, load_record_image, read_ppm, write_dataset,
                   write_pgm)
from .evaluation import evaluate
from .experiments import AXES, load_datasets, metric_rows, run_ablation, write_rows
from .geometry import BoundBox, Detection
from .gradcheck import SCOPES, run_gradcheck

logger = logging.getLogger("cspdet")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
LOG_FIELDS = ["step", "center", "scale", "offset", "total", "positives"]


class InputError(ValueError):
    """Bad user input other than the run config (exit code 2)."""


# --- train -------------------------------------------------------------------

def _read_log(path: Path, upto: int) -> list[dict]:
    if not path.is_file():
        return []
    with open(path, newline="") as fh:
        return [row for row in csv.DictReader(fh) if int(row["step"]) <= upto]


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    data = load_datasets(cfg)
    log_path = out / "train_log.csv"
    if args.resume:
        try:
            est = load_checkpoint(args.resume)
        except (FileNotFoundError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        free = {"n_iter", "warm_start", "verbose"}
        expected = {k: v for k, v in cfg.make_estimator().get_params().items() if k not in free}
        if {k: v for k, v in est.get_params().items() if k not in free} != expected:
            raise ConfigError(f"checkpoint {args.resume} was trained with a different config")
        est.set_params(warm_start=True, n_iter=cfg.optimizer["iterations"])
        old_rows = _read_log(log_path, est.n_iter_)
        logger.info("resuming from step %d", est.n_iter_)
    else:
        est = cfg.make_estimator()
        old_rows = []
    every = cfg.optimizer["checkpoint_every"]
    log_every = max(1, int(cfg.optimizer.get("log_every", 1)))

    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(old_rows)

        def callback(e, step, report):
            if step % log_every == 0 or step == e.n_iter:
                writer.writerow({"step": step, **{k: repr(v) if isinstance(v, float) else v
                                                  for k, v in report.as_dict().items()}})
                fh.flush()
            if step % every == 0 and step < e.n_iter:
                save_checkpoint(e, out / "checkpoints" / f"step_{step:06d}")
            if step % 100 == 0:
                logger.info("step %d total %.5f", step, report.total)

        est.fit(data.train_images, data.train_annotations, callback=callback)
    save_checkpoint(est, out / "final")
    if data.val_images:
        rows = metric_rows("val", est.predict(data.val_images), data.val_annotations)
        write_rows(rows, out / "val_metrics.csv")
        for r in rows:
            logger.info("val IoU %.2f: AP %.4f MR-2 %.4f", r["iou_thresh"], r["ap"], r["mr2"])
    print(f"trained {est.n_iter_} steps; checkpoint at {out / 'final'}")
    return EXIT_OK


# --- detect --------------------------------------------------------------------

def _input_items(path: Path):
    """(name, loader) pairs from an annotation JSONL, a PPM file or a directory of PPMs."""
    if path.is_dir():
        return [(p.name, (lambda p=p: read_ppm(p))) for p in sorted(path.glob("*.ppm"))]
    if path.suffix == ".jsonl":
        recs = load_annotations(path)
        return [(r.image_path or f"record_{i}", (lambda r=r: load_record_image(r, path.parent)))
                for i, r in enumerate(recs)]
    return [(path.name, lambda: read_ppm(path))]


def detection_to_json(d: Detection) -> dict:
    b = d.box
    return {"x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2, "score": d.score}


def cmd_detect(args) -> int:
    try:
        est = load_checkpoint(args.checkpoint)
    except (FileNotFoundError, ValueError) as exc:
        raise InputError(str(exc)) from None
    src = Path(args.input)
    if not src.exists():
        raise InputError(f"input {src} does not exist")
    try:
        items = _input_items(src)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    n_ok = 0
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as fh:
        for name, loader in items:
            try:
                (dets,) = est.predict([loader()], threshold=args.threshold, nms_threshold=args.nms)
                rec = {"image": name, "detections": [detection_to_json(d) for d in dets]}
                n_ok += 1
            except (OSError, ValueError) as exc:
                rec = {"image": name, "error": str(exc)}
            fh.write(json.dumps(rec) + "\n")
    print(f"wrote detections for {n_ok}/{len(items)} images to {args.out}")
    return EXIT_OK if n_ok or not items else EXIT_FAIL


# --- eval ------------------------------------------------------------------------

def load_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if "error" in rec:
                    out.setdefault(rec["image"], [])
                    continue
                out[rec["image"]] = [Detection(BoundBox(d["x1"], d["y1"], d["x2"], d["y2"]), d["score"])
                                     for d in rec["detections"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: invalid detection record ({exc})") from None
    return out


def _parse_ious(text: str) -> list[float]:
    try:
        ious = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise InputError(f"--iou must be a comma-separated list of numbers, got {text!r}") from None
    if not ious or not all(0 < t <= 1 for t in ious):
        raise InputError(f"IoU thresholds must lie in (0, 1], got {text!r}")
    return ious


def cmd_eval(args) -> int:
    ious = _parse_ious(args.iou)
    try:
        recs = load_annotations(args.gt)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None
    dets_by_image = load_detections(args.dets)
    names = [r.image_path or f"record_{i}" for i, r in enumerate(recs)]
    unknown = sorted(set(dets_by_image) - set(names))
    if unknown:
        logger.warning("%d detection records match no annotated image (e.g. %s)", len(unknown), unknown[0])
    dets = [dets_by_image.get(n, []) for n in names]
    gts = [r.annotations for r in recs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for t in ious:
        try:
            m = evaluate(dets, gts, t)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        rows.append({"setting": args.setting, "iou_thresh": t, "mr2": m["mr2"], "ap": m["ap"],
                     "n_images": m["n_images"], "n_gt": m["n_gt"]})
        tag = f"{t:g}"
        with open(out / f"fppi_{tag}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fppi", "miss_rate"])
            for f, mr in zip(m["curve"].fppi, m["curve"].miss_rate):
                w.writerow([repr(float(f)), repr(float(mr))])
        with open(out / f"pr_{tag}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["recall", "precision"])
            for r, p in zip(m["recall"], m["precision"]):
                w.writerow([repr(float(r)), repr(float(p))])
        print(f"IoU {t:g}: AP {m['ap']:.4f}  MR-2 {m['mr2']:.4f}  ({m['n_gt']} GT, {m['n_images']} images)")
    write_rows(rows, out / "metrics.csv")
    return EXIT_OK


# --- inspect-targets ---------------------------------------------------------

def cmd_inspect_targets(args) -> int:
    try:
        recs = load_annotations(args.gt)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None
    codec = CodecConfig(**load_config(args.config).sections["codec"]) if args.config else CodecConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(recs):
        sub = out / f"{i:05d}"
        sub.mkdir(exist_ok=True)
        try:
            maps = encode_targets(rec.annotations, rec.width, rec.height, codec)
        except ValueError as exc:
            raise InputError(f"record {i}: {exc}") from None
        files = {}
        for plane in maps.planes:
            nx.save_tensor(sub / f"{plane}.cspt", getattr(maps, plane))
            files[plane] = f"{plane}.cspt"
        write_pgm(sub / "gauss.pgm", maps.gauss)
        sidecar = {"image": rec.image_path, "width": rec.width, "height": rec.height,
                   "r": codec.r, "scale_mode": codec.scale_mode,
                   "map_width": int(maps.center.shape[1]), "map_height": int(maps.center.shape[0]),
                   "num_positives": maps.num_positives, "planes": files, "gauss_pgm": "gauss.pgm"}
        (sub / "targets.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    print(f"wrote targets for {len(recs)} records to {out}")
    return EXIT_OK


# --- gradcheck / ablate / generate --------------------------------------------

def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.scope, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r.component for r in results if not r.passed]
    if failed:
        print("gradcheck FAILED: " + ", ".join(failed))
        return EXIT_FAIL
    print(f"gradcheck passed ({len(results)} components)")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    values = args.values.split(",") if args.values else None
    rows = run_ablation(cfg, args.axis, values)
    out = Path(args.out) if args.out else cfg.output_dir / f"ablate_{args.axis}.csv"
    write_rows(rows, out)
    for r in rows:
        print(f"{r['setting']:16s} IoU {r['iou_thresh']:.2f} AP {r['ap']:.4f} MR-2 {r['mr2']:.4f} "
              f"center_err {r['center_error']:.3f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.scene_spec()
    if args.split == "val":
        n, seed = cfg.data["val"]["n"], cfg.data["val"]["seed"]
    else:
        n, seed = cfg.data["n_train"], spec.seed
    n = args.n if args.n is not None else n
    seed = args.seed if args.seed is not None else seed
    path = write_dataset(generate_dataset(spec, n, seed), args.out)
    print(f"wrote {n} scenes to {path}")
    return EXIT_OK


# --- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cspdet", description="Center-and-scale box-free detector")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="run a checkpoint on images")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True, help="annotation JSONL, PPM file or directory of PPMs")
    d.add_argument("--out", required=True)
    d.add_argument("--threshold", type=float, default=0.01)
    d.add_argument("--nms", type=float, default=0.5)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="score detections against annotations")
    e.add_argument("--dets", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--iou", default="0.5,0.75")
    e.add_argument("--out", default=".")
    e.add_argument("--setting", default="default", help="label for the metrics row")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect-targets", help="write encoded target maps for annotations")
    i.add_argument("--gt", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--config", help="take the codec section from this config")
    i.set_defaults(func=cmd_inspect_targets)

    g = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    g.add_argument("--scope", default="all", choices=SCOPES + ("all",))
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train one model per value of an ablation axis")
    a.add_argument("--config", required=True)
    a.add_argument("--axis", required=True, choices=sorted(AXES))
    a.add_argument("--values", help="comma-separated subset of setting labels")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("generate", help="write a synthetic dataset (PPM images + JSONL)")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=("train", "val"), default="val")
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_generate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
