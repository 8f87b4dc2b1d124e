"""Command-line front end: propose, eval, learn, bench, train, synth."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import bing, edge_refine, evaluation, raster, segment_refine
from .errors import BingppError, EmptyDataset, NoGroundTruth
from .geometry import ProposalSet, Source
from .pipeline import STAGES, PipelineConfig, edge_sample, run_bingpp, run_many, seg_sample

log = logging.getLogger("bingpp")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
IMAGE_SUFFIXES = {".ppm", ".pgm", ".pnm", ".png", ".jpg", ".jpeg", ".bmp"}
PROPOSAL_HEADER = ["image_id", "x1", "y1", "x2", "y2", "score"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# inputs


def list_images(path) -> list[tuple[str, Path]]:
    """``(image_id, path)`` pairs for a file or a directory, sorted by id."""
    p = Path(path)
    if p.is_dir():
        files = [f for f in p.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES and f.is_file()]
    elif p.is_file():
        files = [p]
    else:
        raise FileNotFoundError(f"no such file or directory: {p}")
    out = sorted((f.stem, f) for f in files)
    ids = [i for i, _ in out]
    if len(set(ids)) != len(ids):
        raise UsageError(f"duplicate image ids in {p}")
    return out


def load_ground_truth(path) -> list[evaluation.GroundTruth]:
    """VOC annotation directory (or single XML) or a JSONL file."""
    p = Path(path)
    if p.is_dir():
        gts = []
        for f in sorted(p.glob("*.xml")):
            gts += evaluation.parse_voc_xml(f.read_bytes(), image_id=f.stem)
        return gts
    if p.suffix.lower() == ".xml":
        return evaluation.parse_voc_xml(p.read_bytes(), image_id=p.stem)
    with open(p) as fh:
        return evaluation.parse_gt_jsonl(fh)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    gamma = getattr(args, "gamma", None)
    if gamma is not None and len(gamma) == 1:
        gamma = gamma[0]
    return cfg.replace(
        model=getattr(args, "model", None),
        max_proposals=getattr(args, "max_proposals", None),
        eta=getattr(args, "eta", None),
        gamma=gamma,
        iters=getattr(args, "iters", None),
        epsilon=getattr(args, "epsilon", None),
        delta=getattr(args, "delta", None),
        nms_rho=getattr(args, "nms_rho", None),
        seg_k=getattr(args, "seg_k", None),
        min_size=getattr(args, "min_size", None),
        threads=getattr(args, "threads", None),
        seed=getattr(args, "seed", None),
        enable_edge=False if getattr(args, "no_edge", False) else None,
        enable_seg=False if getattr(args, "no_seg", False) else None,
    )


def _model(cfg: PipelineConfig) -> bing.BinarizedModel:
    if not cfg.model:
        raise UsageError("a model is required (--model or 'model' in --config)")
    return bing.load_model(cfg.model)


def _loader(path: Path):
    return lambda: raster.read_image(path)


# ---------------------------------------------------------------------------
# proposals CSV


def _num(v: float, digits: int) -> str:
    # adding 0.0 folds -0.0 into 0.0 so equal boxes print identically
    return f"{float(v) + 0.0:.{digits}f}"


def format_proposals(results: list[tuple[str, ProposalSet]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PROPOSAL_HEADER)
    for image_id, props in results:
        props = props.sorted()
        for (x1, y1, x2, y2), s in zip(props.boxes, props.scores):
            w.writerow([image_id, _num(x1, 2), _num(y1, 2), _num(x2, 2), _num(y2, 2), _num(s, 6)])
    return buf.getvalue()


def read_proposals(path) -> dict[str, ProposalSet]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return {}
        if [h.strip() for h in header] != PROPOSAL_HEADER:
            raise UsageError(f"{path}: unexpected header {header}")
        records = []
        for n, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                records.append((row[0], [float(v) for v in row[1:5]], float(row[5])))
            except (IndexError, ValueError):
                raise UsageError(f"{path}:{n}: malformed row") from None
    return evaluation.props_from_records(records)


# ---------------------------------------------------------------------------
# commands


def cmd_propose(args) -> int:
    cfg = build_config(args)
    model = _model(cfg)
    images = list_images(args.input)
    results = run_many([_loader(p) for _, p in images], cfg, model, threads=cfg.threads)
    text = format_proposals([(i, r) for (i, _), r in zip(images, results)])
    _write(args.out, text)
    log.info("wrote %d proposals for %d images", sum(len(r) for r in results), len(images))
    return EXIT_OK


def cmd_eval(args) -> int:
    gts = load_ground_truth(args.gt)
    if not gts:
        raise NoGroundTruth(f"no ground truth objects in {args.gt}")
    props = read_proposals(args.proposals)
    gt_ids = {g.image_id for g in gts}
    extra = sorted(set(props) - gt_ids)
    missing = sorted(gt_ids - set(props))
    if extra:
        log.warning("MismatchedImageIds: %d proposal images have no ground truth (e.g. %s)", len(extra), extra[0])
    if missing:
        log.warning("MismatchedImageIds: %d annotated images have no proposals (e.g. %s)", len(missing), missing[0])
    report = evaluation.evaluate(
        gts,
        props,
        etas=args.etas,
        budgets=args.budgets,
        budget=args.budget,
        include_difficult=not args.skip_difficult,
    )
    _write(args.out, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    curve = args.curve or str(Path(args.out).with_suffix("")) + "_curve.csv"
    _write(curve, report.curve_csv())
    for eta, row in report.dr.items():
        print("DR@%g " % eta + " ".join(f"{k}:{v:.4f}" for k, v in row.items()))
    print(f"MABO {report.mabo:.4f}")
    return EXIT_OK


def _dataset(args):
    """Images paired with their annotations, in image-id order."""
    gts = load_ground_truth(args.gt)
    by_image: dict[str, list[evaluation.GroundTruth]] = {}
    for g in gts:
        by_image.setdefault(g.image_id, []).append(g)
    images = [(i, p) for i, p in list_images(args.input) if i in by_image]
    if not images:
        raise EmptyDataset("no image has ground truth")
    return images, by_image


def cmd_learn(args) -> int:
    cfg = build_config(args)
    model = _model(cfg)
    images, by_image = _dataset(args)
    eta = cfg.eta
    edge_samples, loaded = [], []
    for image_id, path in images:
        img = raster.read_image(path)
        gts = by_image[image_id]
        gt_boxes = np.array([g.box.as_tuple() for g in gts])
        props = bing.scan(img, model, cfg.per_size_keep, cfg.bing_keep or cfg.max_proposals)
        edge_samples.append(edge_sample(img, props.boxes, gt_boxes, cfg))
        loaded.append((img, props, gt_boxes, [g.class_name for g in gts]))
    gammas, losses, table = edge_refine.learn_gamma(edge_samples, eta, cfg.iters)
    # the delta search sees what the segment stage sees: boxes after the learned edge refinement
    params = edge_refine.EdgeRefineParams(gammas, cfg.iters, cfg.epsilon, cfg.edge_resize)
    seg_samples = []
    for (img, props, gt_boxes, classes), es in zip(loaded, edge_samples):
        h, w = img.shape[:2]
        refined = edge_refine.edge_recursive_box(es.nmap, props.with_boxes(es.boxes), params)
        boxes = edge_refine.from_edge_frame(refined.boxes, w, h, cfg.edge_resize)
        boxes = np.where((refined.sources == Source.EDGE_REFINED)[:, None], boxes, props.boxes)
        seg_samples.append(seg_sample(img, boxes, gt_boxes, cfg, classes))
    deltas, rows = segment_refine.learn_delta(seg_samples, eta)

    _write(args.out, json.dumps({"gamma": gammas, "delta": list(deltas)}, indent=2) + "\n")
    stem = str(Path(args.out).with_suffix(""))
    trace = io.StringIO()
    trace.write("iteration,gamma,loss\n")
    for t in range(table.shape[0]):
        for g, loss in zip(edge_refine.GAMMA_GRID, table[t]):
            trace.write(f"{t + 1},{g:.2f},{loss}\n")
    _write(stem + "_gamma_trace.csv", trace.getvalue())
    dtab = io.StringIO()
    dtab.write("subset_bitmask,deltas,loss,dr_at_eta,mabo\n")
    for r in rows:
        dtab.write(f"{r.mask},{' '.join(f'{d:g}' for d in r.deltas)},{r.loss},{r.dr:.6f},{r.mabo:.6f}\n")
    _write(stem + "_delta_table.csv", dtab.getvalue())
    print("gamma", " ".join(f"{g:g}" for g in gammas), "losses", " ".join(map(str, losses)))
    print("delta", " ".join(f"{d:g}" for d in deltas))
    return EXIT_OK


def _time_images(loaders, cfg, model, threads):
    t0 = time.perf_counter()
    results = run_many(loaders, cfg, model, threads=threads, with_timings=True)
    return [tm for _, tm in results], time.perf_counter() - t0


def cmd_bench(args) -> int:
    cfg = build_config(args)
    model = _model(cfg)
    if args.input:
        images = [(i, raster.read_image(p)) for i, p in list_images(args.input)]
    else:
        images = [
            (f"synth_{s}", evaluation.synth_scene(s, 3 + s % 4)[0]) for s in range(args.seed, args.seed + args.synth)
        ]
    if not images:
        raise EmptyDataset("no images to benchmark")
    arrays = [img for _, img in images]
    # warm-up compiles the kernels outside the measured runs
    run_bingpp(arrays[0], cfg, model)
    single, wall_1 = _time_images(arrays, cfg, model, 1)
    multi_threads = max(2, cfg.threads)
    multi, wall_n = _time_images(arrays, cfg, model, multi_threads)

    buf = io.StringIO()
    cols = [f"{s}_ms" for s in STAGES] + ["total_ms", f"mt{multi_threads}_total_ms"]
    buf.write("image_id," + ",".join(cols) + "\n")
    for (image_id, _), tm, tmm in zip(images, single, multi):
        vals = [tm[s] * 1e3 for s in STAGES] + [tm["total"] * 1e3, tmm["total"] * 1e3]
        buf.write(image_id + "," + ",".join(f"{v:.3f}" for v in vals) + "\n")
    if args.out:
        _write(args.out, buf.getvalue())

    n = len(images)
    total = sum(tm["total"] for tm in single)
    print(f"images {n}")
    for s in STAGES:
        v = [tm[s] * 1e3 for tm in single]
        share = sum(tm[s] for tm in single) / total if total else 0.0
        print(f"{s:5s} mean {statistics.mean(v):8.2f} ms  median {statistics.median(v):8.2f} ms  share {share:6.1%}")
    v = [tm["total"] * 1e3 for tm in single]
    print(f"total mean {statistics.mean(v):8.2f} ms  median {statistics.median(v):8.2f} ms  (1 thread)")
    print(f"throughput 1 thread {wall_1 / n * 1e3:.2f} ms/image, {multi_threads} threads {wall_n / n * 1e3:.2f} ms/image")
    return EXIT_OK


def cmd_train(args) -> int:
    images, by_image = _dataset(args)
    dataset = []
    for image_id, path in images:
        boxes = np.array([g.box.as_tuple() for g in by_image[image_id]])
        dataset.append((raster.read_image(path), boxes))
    reports: list = []
    model = bing.train_simple(
        dataset, args.eta, n_w=args.n_w, n_g=args.n_g, neg_per_image=args.neg_per_image, seed=args.seed, report=reports
    )
    bing.save_model(model, args.out)
    r = reports[0] if reports else None
    if r is not None:
        print(f"positives {r.n_pos} negatives {r.n_neg} training accuracy {r.train_accuracy:.4f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gts = []
    for s in range(args.seed, args.seed + args.count):
        img, g = evaluation.synth_scene(s, args.min_objects + s % (args.max_objects - args.min_objects + 1))
        (out / f"synth_{s}.ppm").write_bytes(raster.encode_ppm(img))
        gts += g
    (out / "gt.jsonl").write_text(evaluation.dump_gt_jsonl(gts))
    print(f"wrote {args.count} scenes and {len(gts)} objects to {out}")
    return EXIT_OK


def _write(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# parser


def _pipeline_flags(p):
    p.add_argument("--config", help="pipeline config JSON; flags override its values")
    p.add_argument("--model", help="objectness model JSON")
    p.add_argument("--max-proposals", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--gamma", type=_floats, help="blend weight, or one per iteration (comma separated)")
    p.add_argument("--iters", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=_floats, help="segment overlap thresholds (comma separated)")
    p.add_argument("--nms-rho", type=float)
    p.add_argument("--no-edge", action="store_true")
    p.add_argument("--no-seg", action="store_true")
    p.add_argument("--seg-k", type=float)
    p.add_argument("--min-size", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bingpp", description="Object proposals with edge and segment refinement.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("propose", help="write proposals CSV for an image or a directory")
    _pipeline_flags(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_propose)

    p = sub.add_parser("eval", help="score a proposals CSV against ground truth")
    p.add_argument("--proposals", "--input", dest="proposals", required=True)
    p.add_argument("--gt", required=True, help="VOC annotation dir/XML or JSONL")
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--curve", help="recall-overlap CSV (default: <out>_curve.csv)")
    p.add_argument("--etas", type=_floats, default=list(evaluation.DEFAULT_ETAS))
    p.add_argument("--budgets", type=lambda s: [int(v) for v in _floats(s)], default=list(evaluation.DEFAULT_BUDGETS))
    p.add_argument("--budget", type=int, default=1000, help="proposal budget for ABO/MABO and the curve")
    p.add_argument("--skip-difficult", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("learn", help="learn the edge blend weights and segment thresholds")
    _pipeline_flags(p)
    p.add_argument("--input", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="learned parameters JSON")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("bench", help="per-stage timing")
    _pipeline_flags(p)
    p.add_argument("--input", help="images (default: synthetic scenes)")
    p.add_argument("--synth", type=int, default=20, help="number of synthetic scenes without --input")
    p.add_argument("--out", help="per-image timing CSV")
    p.set_defaults(func=cmd_bench, seed=0)

    p = sub.add_parser("train", help="fit an objectness model on annotated images")
    p.add_argument("--input", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eta", type=float, default=0.5)
    p.add_argument("--n-w", type=int, default=bing.DEFAULT_NW)
    p.add_argument("--n-g", type=int, default=bing.DEFAULT_NG)
    p.add_argument("--neg-per-image", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="write seeded synthetic scenes plus gt.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-objects", type=int, default=3)
    p.add_argument("--max-objects", type=int, default=6)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"bingpp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BingppError, OSError) as exc:
        print(f"bingpp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
