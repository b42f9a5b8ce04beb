"""Run the inference benchmark several times and report the FPS spread.

    python scripts/bench_repeat.py --runs 3 --n 100 --threads 1
"""

import argparse
import json
import subprocess
import sys


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", type=int, default=2)
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--config", default="yolopeds")
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args()
    cmd = [sys.executable, "-m", "yolopeds.cli", "bench", "--n", str(args.n), "--config", args.config]
    if args.threads:
        cmd += ["--threads", str(args.threads)]
    fps = []
    for r in range(args.runs):
        rep = json.loads(subprocess.run(cmd, check=True, capture_output=True, text=True).stdout)
        fps.append(rep["fps"])
        print(f"run {r}: {rep['fps']:.1f} FPS  p50 {rep['latency_p50'] * 1e3:.1f}ms  "
              f"p95 {rep['latency_p95'] * 1e3:.1f}ms")
    print(f"spread {100 * (max(fps) - min(fps)) / min(fps):.1f}%  params {rep['param_count']:,}  "
          f"weights {rep['weights_mb']:.2f} MB")


if __name__ == "__main__":
    main()
