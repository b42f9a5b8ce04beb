"""Detection metrics (accuracy, mean IoU, FPPI, miss rate) and latency benchmarking."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from yolopeds.head import BBox, Detection, iou, sort_detections


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    ious: tuple[float, ...]  # IoU of every matched pair


def match(preds: Sequence[Detection], gts: Sequence[BBox], iou_threshold: float = 0.5) -> MatchResult:
    """Greedy matching: predictions, most confident first, claim the free ground
    truth they overlap most (IoU >= threshold)."""
    free = list(range(len(gts)))
    ious = []
    fp = 0
    for d in sort_detections(preds):
        best, best_iou = None, iou_threshold
        for g in free:
            v = iou(d.bbox, gts[g])
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = g, v
        if best is None:
            fp += 1
        else:
            free.remove(best)
            ious.append(best_iou)
    return MatchResult(tp=len(ious), fp=fp, fn=len(free), ious=tuple(ious))


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    fn: int
    accuracy: float | None
    mean_iou: float | None
    fppi: float
    miss_rate: float | None
    n_images: int
    n_positives: int

    def to_dict(self) -> dict:
        return asdict(self)


def compute_report(results: Iterable[MatchResult]) -> EvalReport:
    """Aggregate per-image match results; undefined ratios are ``None``."""
    results = list(results)
    if not results:
        raise ValueError("need at least one image to build a report")
    tp = sum(r.tp for r in results)
    fp = sum(r.fp for r in results)
    fn = sum(r.fn for r in results)
    ious = [v for r in results for v in r.ious]
    pos = tp + fn
    return EvalReport(
        tp=tp,
        fp=fp,
        fn=fn,
        accuracy=tp / pos if pos else None,
        mean_iou=sum(ious) / len(ious) if ious else None,
        fppi=fp / len(results),
        miss_rate=fn / pos if pos else None,
        n_images=len(results),
        n_positives=pos,
    )


@dataclass(frozen=True)
class BenchReport:
    latencies: tuple[float, ...]
    fps: float
    latency_mean: float
    latency_p50: float
    latency_p95: float

    @classmethod
    def from_latencies(cls, latencies: Sequence[float]) -> "BenchReport":
        lat = np.asarray(latencies, dtype=np.float64)
        if lat.size == 0:
            raise ValueError("no timings recorded")
        if np.any(lat <= 0):
            raise ValueError("every per-image latency must be positive")
        mean = float(lat.mean())
        return cls(
            latencies=tuple(float(v) for v in lat),
            fps=1.0 / mean,
            latency_mean=mean,
            latency_p50=float(np.percentile(lat, 50)),
            latency_p95=float(np.percentile(lat, 95)),
        )

    def to_dict(self) -> dict:
        return {
            "fps": self.fps,
            "latency_mean": self.latency_mean,
            "latency_p50": self.latency_p50,
            "latency_p95": self.latency_p95,
            "n_images": len(self.latencies),
        }


def benchmark(run: Callable, images: Sequence, warmup: int = 5, iters: int | None = None,
              clock: Callable[[], float] = time.perf_counter) -> BenchReport:
    """Time ``run(image)`` one image at a time, skipping ``warmup`` passes.

    ``iters`` timed passes cycle through ``images`` (default: each image once).
    """
    if not images:
        raise ValueError("benchmark needs at least one image")
    for w in range(warmup):
        run(images[w % len(images)])
    n = len(images) if iters is None else iters
    latencies = []
    for it in range(n):
        img = images[it % len(images)]
        t0 = clock()
        run(img)
        latencies.append(clock() - t0)
    return BenchReport.from_latencies(latencies)
