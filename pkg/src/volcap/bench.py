"""Per-stage wall-clock timing of the reconstruction pipeline (machine-dependent)."""

from __future__ import annotations

import time
from typing import Sequence

import numpy as np

from . import appearance, recon, synth
from .core import CameraRig, RgbdFrame

STAGES = ("Raw point-normal reconstruction", "Weights", "Volumetric reconstruction", "Other", "Total")


def time_frame(frames: Sequence[RgbdFrame], rig: CameraRig, r: int, mode: str = "weighted") -> dict[str, float]:
    """Stage times (ms) for one group of frames; ``Other`` covers visibility and texture assignment."""
    res = recon.reconstruct(frames, rig, recon.ReconConfig(r=r, mode=mode))
    t0 = time.perf_counter()
    wmaps = appearance.cloud_weight_maps(res.clouds, rig)
    vis = appearance.vertex_visibility(res.mesh, rig, frames, sensors=rig.reconstruction_ids)
    appearance.assign_texture(res.mesh, rig, frames, vis, wmaps)
    other = 1e3 * (time.perf_counter() - t0)
    t = res.timings
    row = {STAGES[0]: t["raw"], STAGES[1]: t["weights"], STAGES[2]: t["volumetric"], STAGES[3]: other}
    row[STAGES[4]] = sum(row.values())
    return row


def run_bench(rs: Sequence[int] = (5, 6, 7), frames: Sequence[RgbdFrame] | None = None,
              rig: CameraRig | None = None, repeats: int = 1, mode: str = "weighted") -> dict[int, dict[str, float]]:
    """Median stage times per resolution; defaults to frame 0 of the synthetic X-pose scene."""
    if frames is None or rig is None:
        scene = synth.make_scene("xpose", n_frames=1)
        rig = scene.rig
        frames = [synth.render_frame(scene, k, 0) for k in range(len(rig))]
    out = {}
    for r in rs:
        runs = [time_frame(frames, rig, r, mode) for _ in range(max(1, repeats))]
        out[int(r)] = {s: float(np.median([x[s] for x in runs])) for s in STAGES}
    return out


def format_table(table: dict[int, dict[str, float]]) -> str:
    rs = sorted(table)
    w = max(len(s) for s in STAGES)
    lines = ["stage (ms, machine-dependent)".ljust(w) + "".join(f"{f'r={r}':>12}" for r in rs)]
    for s in STAGES:
        lines.append(s.ljust(w) + "".join(f"{table[r][s]:12.1f}" for r in rs))
    return "\n".join(lines)


def table_rows(table: dict[int, dict[str, float]]) -> list[list]:
    return [[s] + [f"{table[r][s]:.3f}" for r in sorted(table)] for s in STAGES]
