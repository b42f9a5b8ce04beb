"""Command-line entry point: ``yolopeds <command> [options]``.

Exit codes: 0 on success, 1 when a check fails (gradcheck), 2 on I/O,
format or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from yolopeds import backbone
from yolopeds.autograd import init_weights
from yolopeds.backbone import ConfigError, GraphError, ModelGraph
from yolopeds.data import (
    FormatError, annotate, list_images, make_scenes, read_detections, read_ground_truth, read_ppm,
    save_scenes, to_tensor, write_detections, write_ppm,
)
from yolopeds.loss import LossConfig
from yolopeds.metrics import benchmark, compute_report, match
from yolopeds.train import Detector, ToyConfig, gradcheck_model, head_config_for, train_toy

log = logging.getLogger("yolopeds")

EXIT_OK, EXIT_CHECK, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    """Bad paths or inputs; reported with exit code 2."""


def load_graph(source: str, grid_size: int | None = None, grid_count: int | None = None) -> ModelGraph:
    """``source`` is a config file path or the name of a bundled config."""
    path = Path(source)
    if path.is_file():
        graph = backbone.load_config(path)
    else:
        try:
            graph = backbone.parse_config(backbone.builtin_config(source))
        except FileNotFoundError:
            raise UsageError(f"config not found: {source}") from None
    if grid_size is not None or grid_count is not None:
        graph = backbone.adapt_graph(graph, grid_size, grid_count)
    return graph


def load_params(graph: ModelGraph, weights: str | None, seed: int):
    if weights is None:
        return {k: p.value for k, p in init_weights(graph, seed).items()}
    path = Path(weights)
    if not path.is_file():
        raise UsageError(f"weights file not found: {path}")
    params = backbone.read_weights(path)
    backbone.check_params(graph, params)
    return params


def _existing(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} path not found: {p}")
    return p


def _head_cfg(graph, args):
    overrides = {}
    if args.nms_iou is not None:
        overrides["nms_iou"] = args.nms_iou
    if args.obj_thresh is not None:
        overrides["obj_threshold"] = args.obj_thresh
    return head_config_for(graph, **overrides)


def _write_json(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=False)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def cmd_detect(args) -> int:
    graph = load_graph(args.config, args.grid_size, args.grid_count)
    params = load_params(graph, args.weights, args.seed)
    images = list_images(_existing(args.images, "images"))
    if not images:
        raise UsageError(f"no .ppm images under {args.images}")
    det = Detector(graph, params, _head_cfg(graph, args))
    w, h = graph.input_size
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for path in images:
            rgb = read_ppm(path)
            dets = det.detect(to_tensor(rgb, (w, h)))
            write_detections(out, path.name, dets)
            if args.annotate:
                ann_dir = Path(args.annotate)
                ann_dir.mkdir(parents=True, exist_ok=True)
                write_ppm(ann_dir / path.name, annotate(rgb, [d.bbox for d in dets]))
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_train_toy(args) -> int:
    graph = load_graph(args.config, args.grid_size, args.grid_count)
    cfg = ToyConfig()
    overrides = {k: v for k, v in (("steps", args.steps), ("lr", args.lr), ("n_images", args.n_images))
                 if v is not None}
    cfg = ToyConfig(**{**asdict(cfg), **overrides})
    out_dir = Path(args.out or "toy_run")
    out_dir.mkdir(parents=True, exist_ok=True)
    loss_cfg = LossConfig(iou_term=not args.no_iou_loss)

    def on_log(rec):
        log.info("step %d total %.4f loc %.4f op %.4f cls %.4f",
                 rec["step"], rec["total"], rec["loc"], rec["op"], rec["cls"])

    run = train_toy(graph, cfg, seed=args.seed, loss_cfg=loss_cfg, on_log=on_log)
    save_scenes(run.scenes, out_dir / "scenes")
    backbone.write_weights(out_dir / "weights.pwts", run.params)
    (out_dir / "loss_log.json").write_text(json.dumps(run.history, indent=1) + "\n")
    summary = {
        "steps": cfg.steps,
        "lr": cfg.lr,
        "seed": args.seed,
        "weights": str(out_dir / "weights.pwts"),
        "first_loss": run.history[0]["total"] if run.history else None,
        "final_loss": run.history[-1]["total"] if run.history else None,
        "train_eval": run.report.to_dict(),
    }
    _write_json(summary, str(out_dir / "summary.json"))
    return EXIT_OK


def cmd_eval(args) -> int:
    dets = read_detections(_existing(args.detections, "detections"))
    gts = read_ground_truth(_existing(args.gt, "gt"))
    unknown = sorted(set(dets) - set(gts))
    if unknown:
        raise UsageError(f"detections reference images without ground truth: {unknown[:5]}")
    if not gts:
        raise UsageError(f"{args.gt}: no images")
    report = compute_report(match(dets.get(name, []), boxes) for name, boxes in gts.items())
    _write_json(report.to_dict(), args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    graph = load_graph(args.config, args.grid_size, args.grid_count)
    params = load_params(graph, args.weights, args.seed)
    w, h = graph.input_size
    if args.images:
        images = [to_tensor(read_ppm(p), (w, h)) for p in list_images(_existing(args.images, "images"))]
    else:
        images = [to_tensor(s.rgb, (w, h)) for s in make_scenes(args.n, seed=args.seed, size=w)]
    if not images:
        raise UsageError("no images to benchmark")
    det = Detector(graph, params, _head_cfg(graph, args))
    rep = benchmark(det.detect, images, warmup=args.warmup)
    n_floats = sum(int(np.prod(s)) for s in graph.param_shapes().values())
    result = {
        **rep.to_dict(),
        "param_count": backbone.param_count(graph),
        "weights_mb": (n_floats * 4) / 1e6,
    }
    if args.weights:
        result["weights_file_mb"] = Path(args.weights).stat().st_size / 1e6
    _write_json(result, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    graph = load_graph(args.config, args.grid_size, args.grid_count)
    loss_cfg = LossConfig(iou_term=not args.no_iou_loss)
    res = gradcheck_model(graph, args.seed, n_samples=args.samples, loss_cfg=loss_cfg,
                          corrupt=args.corrupt_grad)
    ok = res.passed(args.tol)
    _write_json({"max_rel_error": res.max_error, "checked": res.checked, "skipped": res.skipped,
                 "tolerance": args.tol, "passed": ok}, args.out)
    return EXIT_OK if ok else EXIT_CHECK


def cmd_synth(args) -> int:
    out = Path(args.out or "scenes")
    gt = save_scenes(make_scenes(args.n, seed=args.seed, size=args.size), out)
    print(json.dumps({"images": args.n, "dir": str(out), "ground_truth": str(gt)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="yolopeds", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config="yolopeds"):
        sp.add_argument("--config", default=config, help="net.cfg path or bundled config name")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")
        sp.add_argument("--out", default=None)
        sp.add_argument("--grid-size", type=int, default=None)
        sp.add_argument("--grid-count", type=int, default=None)

    def head_flags(sp):
        sp.add_argument("--nms-iou", type=float, default=None)
        sp.add_argument("--obj-thresh", type=float, default=None)

    sp = sub.add_parser("detect", help="run the detector on PPM images")
    common(sp)
    head_flags(sp)
    sp.add_argument("--weights", default=None, help="PWTS file (default: fresh seeded weights)")
    sp.add_argument("--images", required=True, help="a .ppm file or a directory of them")
    sp.add_argument("--annotate", default=None, metavar="DIR", help="write boxed copies of the images here")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("train-toy", help="train on generated rectangle scenes")
    common(sp, config="yolopeds-toy")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--n-images", type=int, default=None)
    sp.add_argument("--no-iou-loss", action="store_true")
    sp.set_defaults(func=cmd_train_toy)

    sp = sub.add_parser("eval", help="score detections against ground truth")
    sp.add_argument("--detections", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", default=None)
    sp.add_argument("--threads", type=int, default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="time single-image inference")
    common(sp)
    head_flags(sp)
    sp.add_argument("--weights", default=None)
    sp.add_argument("--images", default=None, help="default: N generated 320x320 scenes")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--warmup", type=int, default=5)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gradcheck", help="compare backprop with finite differences")
    common(sp, config="mini")
    sp.add_argument("--samples", type=int, default=200)
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.add_argument("--no-iou-loss", action="store_true")
    sp.add_argument("--corrupt-grad", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("synth", help="write generated scenes and their ground truth")
    sp.add_argument("--out", default=None)
    sp.add_argument("--n", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=320)
    sp.add_argument("--threads", type=int, default=None)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (UsageError, FormatError, ConfigError, GraphError, OSError) as exc:
        print(f"yolopeds: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:  # e.g. a malformed weights file
        print(f"yolopeds: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
