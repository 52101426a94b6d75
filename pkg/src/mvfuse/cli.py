"""Command line: ``mvfuse simulate | estimate | evaluate | report``.

Every failure prints exactly one line to stderr of the form
``mvfuse-error <Code>: <message>`` and exits with status 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import io_formats as iof
from .errors import MvFuseError, ValidationFailure
from .pipeline import EstimateConfig, estimate, from_synthetic
from .score import Verdict, evaluate_scene, histogram_by_verdict, pr_curve, spearman
from .shapes import BUILTIN_SHAPES
from .simulate import SceneConfig, generate

log = logging.getLogger("mvfuse")

EXIT_ERROR = 2


class UsageError(MvFuseError):
    code = "UsageError"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _conf_weights(text: str) -> tuple[float, float]:
    try:
        a, b = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected wU,wICP, got {text!r}") from None
    if a < 0 or b < 0:
        raise argparse.ArgumentTypeError("weights must be non-negative")
    return a, b


def _quantile(text: str) -> float:
    q = float(text)
    if not 0 < q <= 1:
        raise argparse.ArgumentTypeError("keep quantile must lie in (0, 1]")
    return q


def _positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvfuse", description="Multi-view keypoint fusion pose estimation.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate synthetic scenes on disk")
    s.add_argument("--out", required=True, type=Path, help="output directory (one subdirectory per scene)")
    s.add_argument("--scenes", type=_positive_int, default=1)
    s.add_argument("--seed", type=int, default=0, help="seed of the first scene; later scenes count up")
    s.add_argument("--preset", choices=("benchmark", "noiseless", "default"), default="benchmark")
    s.add_argument("--shape", choices=sorted(BUILTIN_SHAPES), default="l_bracket")
    s.add_argument("--instances", type=_positive_int)
    s.add_argument("--view-count", type=_positive_int)
    s.add_argument("--heatmap-noise", type=float)
    s.add_argument("--depth-noise", type=float)
    s.add_argument("--outlier-fraction", type=float)
    s.add_argument("--dropout", type=float, dest="occlusion_dropout")
    s.add_argument("--decoys", type=int, dest="decoy_count", help="corrupted clusters of a different shape")

    e = sub.add_parser("estimate", help="estimate poses for one scene manifest")
    e.add_argument("manifest", type=Path)
    e.add_argument("--out", required=True, type=Path, help="detections JSON")
    d = EstimateConfig()
    e.add_argument("--seed", type=int, default=d.seed)
    e.add_argument("--views", type=_positive_int, default=d.views, help="use N evenly spaced cameras")
    e.add_argument("--ransac-iters", type=_positive_int, default=d.ransac_iters)
    e.add_argument("--keep-quantile", type=_quantile, default=d.keep_quantile)
    e.add_argument("--conf-weights", type=_conf_weights, default=d.conf_weights, metavar="wU,wICP")
    e.add_argument("--icp-cutoff", type=float, default=d.icp_cutoff, help="meters")
    e.add_argument("--top-n", type=_positive_int, default=d.top_n)

    v = sub.add_parser("evaluate", help="score detections against a scene's ground truth")
    v.add_argument("manifest", type=Path)
    v.add_argument("detections", type=Path)
    v.add_argument("--out", required=True, type=Path, help="evaluation CSV; a .summary.json is written next to it")
    v.add_argument("--visibility-floor", type=float, default=0.6)

    r = sub.add_parser("report", help="precision-recall and verdict histogram over evaluations")
    r.add_argument("evaluations", nargs="+", type=Path, help="evaluation CSVs from `evaluate`")
    r.add_argument("--out-dir", required=True, type=Path)
    r.add_argument("--bins", type=_positive_int, default=20)
    r.add_argument("--no-figures", action="store_true", help="write the CSV tables only")
    return p


def summary_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".summary.json")


def cmd_simulate(args) -> int:
    preset = {"benchmark": SceneConfig.benchmark, "noiseless": SceneConfig.noiseless,
              "default": lambda **kw: SceneConfig(**kw)}[args.preset]
    overrides = {k: getattr(args, k) for k in ("heatmap_noise", "depth_noise", "outlier_fraction",
                                               "occlusion_dropout", "decoy_count")
                 if getattr(args, k) is not None}
    if args.instances is not None:
        overrides["instance_count"] = args.instances
    if args.view_count is not None:
        overrides["view_count"] = args.view_count
    for i in range(args.scenes):
        cfg = preset(shape=args.shape, rng_seed=args.seed + i, **overrides)
        scene_id = f"scene_{args.seed + i:03d}"
        scene = generate(cfg, scene_id=scene_id)
        path = iof.write_scene(args.out / scene_id, from_synthetic(scene))
        print(path)
    return 0


def cmd_estimate(args) -> int:
    scene = iof.read_scene(args.manifest)
    cfg = EstimateConfig(seed=args.seed, views=args.views, ransac_iters=args.ransac_iters,
                         keep_quantile=args.keep_quantile, conf_weights=tuple(args.conf_weights),
                         icp_cutoff=args.icp_cutoff, top_n=args.top_n)
    result = estimate(scene, cfg)
    for c in result.clusters:
        if c.skipped:
            log.warning("cluster %d (views %s) skipped: %s", c.cluster.cluster_id,
                        sorted({det.view.view_id for det in scene.detections if det.detection_id in c.detection_ids}),
                        c.skipped)
    config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()}
    iof.write_detections(args.out, result.detections, scene.scene_id, config)
    print(f"{len(result.detections)} detection(s) -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    scene = iof.read_scene(args.manifest)
    if scene.ground_truth_poses is None:
        raise ValidationFailure(f"{args.manifest}: manifest has no ground_truth block")
    scene_id, dets = iof.read_detections(args.detections)
    records, summary = evaluate_scene(dets, scene.ground_truth_poses, scene.model, scene.visibility,
                                      args.visibility_floor, scene_id or scene.scene_id)
    records = [dataclasses.replace(r, detection=dataclasses.replace(r.detection, scene_id=summary.scene_id))
               for r in records]
    iof.write_eval_csv(args.out, records)
    iof.write_json(summary_path(args.out), {
        "schema_version": iof.SCHEMA_VERSION,
        "scene_id": summary.scene_id,
        "n_ground_truth": summary.n_ground_truth,
        "n_visible": summary.n_visible,
        "n_correct": summary.n_correct,
        "n_false_positive": summary.n_false_positive,
        "detection_rate": summary.detection_rate,
        "records": [{"detection_idx": i, "matched_gt": r.matched_gt, "nearest_add_m": r.nearest_add,
                     "counts_for_recall": r.counts_for_recall} for i, r in enumerate(records)],
    })
    print(f"{summary.scene_id}: {summary.n_correct}/{summary.n_visible} correct, "
          f"{summary.n_false_positive} false positive(s) -> {args.out}")
    return 0


def cmd_report(args) -> int:
    conf, verdicts, hits, nearest = [], [], [], []
    n_visible = n_correct = 0
    for path in args.evaluations:
        rows = iof.read_eval_csv(path)
        side = iof.read_json(summary_path(path))
        iof.check_schema(side, summary_path(path))
        extra = {r["detection_idx"]: r for r in side.get("records", [])}
        n_visible += int(side["n_visible"])
        n_correct += int(side["n_correct"])
        for row in rows:
            conf.append(row["confidence"])
            verdicts.append(row["verdict"])
            e = extra.get(row["detection_idx"], {})
            hits.append(bool(e.get("counts_for_recall", False)))
            nearest.append(e.get("nearest_add_m"))
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    if not conf:
        raise ValidationFailure("no detections in the given evaluations")
    correct = [v == Verdict.CORRECT.value for v in verdicts]
    points = pr_curve(conf, correct, hits, sorted(set(conf)), n_visible)
    iof.write_table(out / "precision_recall.csv", ("threshold", "precision", "recall", "kept"),
                    [(p.threshold, p.precision, p.recall, p.kept) for p in points])
    counts, edges = histogram_by_verdict(conf, verdicts, args.bins)
    iof.write_table(out / "verdict_histogram.csv",
                    ("bin_low", "bin_high", "correct", "intermediate", "incorrect"),
                    [(float(edges[i]), float(edges[i + 1]), int(counts["correct"][i]),
                      int(counts["intermediate"][i]), int(counts["incorrect"][i])) for i in range(len(edges) - 1)])
    pairs = [(c, a) for c, a in zip(conf, nearest) if a is not None]
    rho = spearman(*zip(*pairs)) if len(pairs) >= 3 else float("nan")
    perfect = [p.recall for p in points if p.precision == 1.0]
    iof.write_table(out / "summary.csv", ("metric", "value"), [
        ("scenes", len(args.evaluations)),
        ("detections", len(conf)),
        ("visible_objects", n_visible),
        ("correct_detection_rate", n_correct / n_visible if n_visible else 0.0),
        ("max_recall_at_precision_1", max(perfect) if perfect else 0.0),
        ("spearman_confidence_add", rho),
    ])
    if not args.no_figures:
        from .plotting import plot_precision_recall, plot_verdict_histogram

        plot_precision_recall(points, out / "precision_recall.png")
        plot_verdict_histogram(counts, edges, out / "verdict_histogram.png")
    print(f"report for {len(args.evaluations)} evaluation(s) -> {out}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "evaluate": cmd_evaluate, "report": cmd_report}


def _fail(code: str, msg: str) -> int:
    one_line = " ".join(str(msg).split())
    print(f"mvfuse-error {code}: {one_line}", file=sys.stderr)
    return EXIT_ERROR


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
        return COMMANDS[args.command](args)
    except MvFuseError as exc:
        return _fail(exc.code, exc)
    except FileNotFoundError as exc:
        return _fail("FileNotFound", f"{exc.filename}: {exc.strerror}")
    except (ValueError, KeyError, OSError) as exc:
        return _fail(type(exc).__name__, exc)


if __name__ == "__main__":
    sys.exit(main())
