"""Per-grid breakdown of a finished toy run.

For every ground-truth box: its grid, whether a kept detection covers it at
IoU >= 0.5, the sigmoid objectness and class score at its responsible slot,
the IoU of the decoded box there, and how many cells
of the same grid output a class logit within 0.01 of it (cells whose
receptive fields see the same pixels cannot be told apart by the head).

    yolopeds train-toy --out toy_run
    python scripts/toy_diagnostics.py toy_run
"""

import argparse
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

from yolopeds import backbone
from yolopeds.data import read_ground_truth, read_ppm, to_tensor
from yolopeds.head import BBox, assign_responsibility, decode_boxes, iou, split_head
from yolopeds.tensor import sigmoid
from yolopeds.train import Detector, head_config_for


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("run_dir")
    ap.add_argument("--config", default="yolopeds-toy")
    args = ap.parse_args()
    run = Path(args.run_dir)
    graph = backbone.parse_config(backbone.builtin_config(args.config))
    params = backbone.read_weights(run / "weights.pwts")
    head_cfg = head_config_for(graph)
    det = Detector(graph, params, head_cfg)
    gts = read_ground_truth(run / "scenes" / "ground_truth.jsonl")

    covered = defaultdict(lambda: [0, 0])
    for name, boxes in gts.items():
        x = to_tensor(read_ppm(run / "scenes" / name), graph.input_size)
        raw = split_head(det.raw(x).astype(np.float64), head_cfg)
        dec = decode_boxes(raw, head_cfg.grid_size)
        kept = det.detect(x)
        resp = assign_responsibility(boxes, head_cfg)
        for (i, j, g) in resp.active_slots():
            box = boxes[resp.assigned[i, j, g]]
            hit = any(iou(d.bbox, box) >= 0.5 for d in kept)
            covered[int(g)][0] += hit
            covered[int(g)][1] += 1
            pred = BBox(*np.clip(dec[:, i, j, g], 1e-6, 1.0))
            print(json.dumps({
                "image": name, "grid": int(g), "sqrt_area": round(box.area ** 0.5, 3), "covered": hit,
                "obj": round(float(sigmoid(raw[4, i, j, g])), 3), "cls": round(float(sigmoid(raw[5, i, j, g])), 3),
                "iou": round(iou(pred, box), 3),
                "twin_cells": int(np.sum(np.abs(raw[5, :, :, g] - raw[5, i, j, g]) < 0.01)),
            }))
    print(json.dumps({f"grid{g}": f"{c[0]}/{c[1]} covered" for g, c in sorted(covered.items())}))

if __name__ == "__main__":
    main()
