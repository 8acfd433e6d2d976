"""Timing comparison of the numba and pure-numpy kernel backends.

Runs each hot kernel (TSDF integration, class-probability fusion,
raycasting, ICP normal-equation accumulation) on a realistic mapping
workload under both backends and prints a table of per-call times.

Usage:
    python3 benchmarks/bench_kernels.py [--repeat N]

The numpy backend is selected by re-running this script with
SEMMAP_NO_NUMBA=1; the script does that automatically for the comparison
run, since the backend is chosen at import time.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def build_workload():
    from semmap import mapping as M
    from semmap import synth

    scene = synth.generate_scene(17)
    intr = synth.default_intrinsics(64)
    poses = synth.sample_trajectory(scene, 8)
    frames = [synth.render_frame(scene, p, intr) for p in poses]
    vol = M.TsdfVolume.for_bounds((-0.65, -0.65, -0.02), (0.65, 0.65, 0.7),
                                  0.0125, num_classes=5)
    return vol, frames, poses, intr


def bench(repeat):
    from semmap import kernels
    from semmap import mapping as M
    from semmap import semfuse
    from semmap.pipeline import oracle_predictor

    vol, frames, poses, intr = build_workload()
    predict = oracle_predictor(5)
    times = {}

    def timed(name, fn, *args, **kwargs):
        fn(*args, **kwargs)            # warmup (numba compilation)
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn(*args, **kwargs)
        times[name] = (time.perf_counter() - t0) / repeat

    f0, p0 = frames[0], poses[0]
    timed("integrate", vol.integrate, f0.depth, p0, intr)
    probs, _ = predict(f0, None, None)
    timed("fuse_probs", semfuse.fuse_labels, vol, probs, f0.depth, p0, intr)
    timed("raycast", vol.raycast, p0, intr)
    model = M.render_model_view(vol, p0, intr)
    timed("icp_track", M.icp_track, model, frames[1].depth, intr, init=p0)
    return kernels.BACKEND, times


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true",
                    help="print raw results as JSON (used by the sub-run)")
    args = ap.parse_args()

    backend, times = bench(args.repeat)
    if args.json:
        print(json.dumps({"backend": backend, "times": times}))
        return

    results = {backend: times}
    other_env = dict(os.environ)
    other_env["SEMMAP_NO_NUMBA"] = "0" if backend == "numpy" else "1"
    out = subprocess.run(
        [sys.executable, os.path.abspath(__file__), "--repeat",
         str(args.repeat), "--json"],
        env=other_env, capture_output=True, text=True, check=True)
    sub = json.loads(out.stdout.strip().splitlines()[-1])
    results[sub["backend"]] = sub["times"]

    kernels_order = ["integrate", "fuse_probs", "raycast", "icp_track"]
    print(f"{'kernel':<12} {'numba (ms)':>12} {'numpy (ms)':>12} {'speedup':>9}")
    for k in kernels_order:
        tn = results["numba"][k] * 1000
        tp = results["numpy"][k] * 1000
        print(f"{k:<12} {tn:>12.2f} {tp:>12.2f} {tp / tn:>8.1f}x")


if __name__ == "__main__":
    main()
