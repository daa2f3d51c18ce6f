"""Compare the compiled and NumPy kernel backends on representative inputs.

    python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from volcap import kernels, recon, synth
from volcap.core import project_points


def _inputs(seed=0):
    scene = synth.make_scene("xpose", n_frames=1, scale=0.5)
    rig = scene.rig
    frames = [synth.render_frame(scene, k, 0) for k in rig.reconstruction_ids]
    clouds = [recon.build_cloud(f, rig[k], sensor=k) for k, f in zip(rig.reconstruction_ids, frames)]
    P = np.vstack([c.points for c in clouds])
    N = np.vstack([c.normals for c in clouds])
    W = np.ones(len(P))
    grid = recon.make_grid(P, 6)
    s1, s2 = recon.splat_sigmas(grid.edge)
    res = recon.reconstruct(frames, rig, recon.ReconConfig(r=6))
    cam = rig[0]
    uv, z = project_points(cam.depth, cam.pose, res.mesh.vertices)
    return {
        "splat_weighted": (np.ascontiguousarray(P), np.ascontiguousarray(N), W, grid.origin, grid.edge,
                           grid.shape, s1, s2),
        "marching_cubes": (np.ascontiguousarray(res.volume.data), res.level),
        "rasterize": (np.ascontiguousarray(uv[:, 0]), np.ascontiguousarray(uv[:, 1]), np.ascontiguousarray(z),
                      np.ascontiguousarray(res.mesh.faces, dtype=np.int64), cam.depth.width, cam.depth.height),
    }


def _time(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return 1e3 * best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    inputs = _inputs()
    names = sorted(kernels.BACKENDS)
    print(f"{'kernel':<16}" + "".join(f"{n + ' ms':>14}" for n in names) + f"{'speedup':>10}")
    for kern, a in inputs.items():
        t = {n: _time(getattr(kernels.get_module(n), kern), a, args.repeats) for n in names}
        sp = t["python"] / t["cython"] if "cython" in t else float("nan")
        print(f"{kern:<16}" + "".join(f"{t[n]:14.1f}" for n in names) + f"{sp:10.1f}x")


if __name__ == "__main__":
    main()
