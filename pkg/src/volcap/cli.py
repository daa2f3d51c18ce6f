"""Command-line pipeline: synth, calibrate, sync, reconstruct, evaluate, calibrate-user, track, bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from . import appearance, bench, calib, fileio, mocap, recon, sync, synth
from .core import CameraRig
from .evaluation import METRIC_KEYS, MODES, evaluate_sequence

log = logging.getLogger("volcap")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

DEFAULTS: dict[str, Any] = {
    "dataset": "data",
    "output": None,                      # default: <dataset>/out
    "seed": 0,
    "jobs": 1,
    "synth.preset": "xpose",
    "synth.n_frames": 3,
    "synth.scale": 0.5,
    "synth.depth_noise": 0.0,
    "synth.n_recon": 4,
    "synth.n_heldout": 2,
    "synth.n_samples": 20000,
    "synth.audio": True,
    "sensors.reconstruction": None,      # default: from rig.json
    "sync.reference": 0,
    "sync.use_audio": True,
    "recon.r": 6,
    "recon.mode": "weighted",
    "recon.discontinuity_mm": 50.0,
    "recon.save_volume": True,
    "appearance.color_correction": True,
    "appearance.reference": 0,
    "appearance.frames": 3,
    "eval.mode": "uv-blend",
    "eval.metrics": list(METRIC_KEYS),
    "mocap.calibration": None,           # default: <output>/calibration.json
    "mocap.sigma_a": mocap.SIGMA_A,
    "mocap.sigma_z": mocap.SIGMA_Z,
    "mocap.n_cal": mocap.N_CAL,
    "mocap.tau_rep_mm": mocap.TAU_REP_MM,
    "bench.r": [5, 6, 7],
    "bench.repeats": 1,
}

COMMANDS = ("synth", "calibrate", "sync", "reconstruct", "evaluate", "calibrate-user", "track", "bench")


class ConfigError(ValueError):
    """Invalid configuration or command-line usage."""


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass
class PipelineConfig:
    values: dict[str, Any]

    @classmethod
    def build(cls, path: str | None = None, overrides: Sequence[str] = ()) -> "PipelineConfig":
        vals = dict(DEFAULTS)
        if path:
            try:
                data = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError("config file must hold a JSON object of dotted keys")
            vals.update(data)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            vals[k.strip()] = _parse_value(v)
        cfg = cls(vals)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str):
        return self.values[key]

    def validate(self) -> None:
        unknown = sorted(set(self.values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if self["recon.r"] not in (5, 6, 7, 8):
            raise ConfigError(f"recon.r must be one of 5, 6, 7, 8 (got {self['recon.r']!r})")
        if any(r not in (5, 6, 7, 8) for r in self["bench.r"]):
            raise ConfigError("bench.r entries must be in 5..8")
        if self["recon.mode"] not in ("simple", "weighted"):
            raise ConfigError("recon.mode must be 'simple' or 'weighted'")
        if self["eval.mode"] not in MODES:
            raise ConfigError(f"eval.mode must be one of {', '.join(MODES)}")
        bad = [m for m in self["eval.metrics"] if m not in METRIC_KEYS]
        if bad:
            raise ConfigError(f"unknown metrics: {', '.join(bad)}")
        if self["synth.preset"] not in ("xpose", "kick", "hands_on_hips", "walk_in_place"):
            raise ConfigError(f"unknown preset {self['synth.preset']!r}")
        if int(self["jobs"]) < 1:
            raise ConfigError("jobs must be >= 1")

    @property
    def dataset(self) -> Path:
        return Path(self["dataset"])

    @property
    def output(self) -> Path:
        return Path(self["output"]) if self["output"] else self.dataset / "out"

    @property
    def calibration_path(self) -> Path:
        return Path(self["mocap.calibration"]) if self["mocap.calibration"] else self.output / "calibration.json"

    def require_dataset(self) -> None:
        if not (self.dataset / "rig.json").exists():
            raise fileio.DataError(f"dataset {self.dataset} has no rig.json")


# ---------------------------------------------------------------------------
# dataset helpers


def load_rig(cfg: PipelineConfig) -> CameraRig:
    """Calibrated rig when present, else the dataset's nominal rig."""
    cal = cfg.output / "rig_calibrated.json"
    rig = CameraRig.load(cal if cal.exists() else cfg.dataset / "rig.json")
    ids = cfg["sensors.reconstruction"]
    if ids is not None:
        rig = CameraRig(rig.cameras, rig.up, tuple(int(k) for k in ids))
    return rig


def frame_table(cfg: PipelineConfig, rig: CameraRig) -> tuple[list[list[int | None]], list[float]]:
    """Per-GoF dataset frame id for every rig sensor (None when not synchronized) and GoF times (ms)."""
    stamps = {}
    for k in range(len(rig)):
        rows = fileio.read_csv(cfg.dataset / "frames" / f"cam{k}" / "timestamps.csv")
        stamps[k] = {int(r["frame"]): float(r["ms"]) for r in rows}
    gof = cfg.output / "gof.csv"
    ref = int(cfg["sync.reference"])
    if gof.exists():
        sensors, table = sync.read_gof_csv(gof)
        frames = []
        for row in table:
            ids = dict(zip(sensors, row))
            frames.append([ids.get(k) for k in range(len(rig))])
    else:
        common = sorted(set.intersection(*(set(s) for s in stamps.values())))
        frames = [[n] * len(rig) for n in common]
    times = []
    for row in frames:
        k = ref if row[ref] is not None else next(i for i, n in enumerate(row) if n is not None)
        times.append(stamps[k][row[k]])
    return frames, times


def load_gof(cfg: PipelineConfig, rig: CameraRig, row: Sequence[int | None]):
    out = []
    for k, n in enumerate(row):
        if n is None:
            out.append(None)
            continue
        try:
            out.append(fileio.read_frame(cfg.dataset, k, n))
        except fileio.DataError as exc:
            log.warning("cam%d frame %d unreadable: %s", k, n, exc)
            out.append(None)
    return out


def mesh_path(cfg: PipelineConfig, m: int) -> Path:
    return cfg.output / "meshes" / f"{m:04d}.ply"


def volume_path(cfg: PipelineConfig, m: int) -> Path:
    return cfg.output / "volumes" / f"{m:04d}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: PipelineConfig) -> None:
    scene = synth.make_scene(cfg["synth.preset"], n_frames=int(cfg["synth.n_frames"]), seed=int(cfg["seed"]),
                             scale=float(cfg["synth.scale"]), n_recon=int(cfg["synth.n_recon"]),
                             n_heldout=int(cfg["synth.n_heldout"]), depth_noise=float(cfg["synth.depth_noise"]))
    synth.export_dataset(scene, cfg.dataset, n_samples=int(cfg["synth.n_samples"]), with_audio=bool(cfg["synth.audio"]))
    log.info("wrote %s dataset with %d frames to %s", scene.preset, scene.n_frames, cfg.dataset)


def cmd_calibrate(cfg: PipelineConfig) -> None:
    cfg.require_dataset()
    rig = CameraRig.load(cfg.dataset / "rig.json")
    rep = calib.calibrate_dataset(cfg.dataset, rig, seed=int(cfg["seed"]))
    cfg.output.mkdir(parents=True, exist_ok=True)
    rep.rig.save(cfg.output / "rig_calibrated.json")
    fileio.write_json(cfg.output / "calibration_report.json", rep.to_dict())


def cmd_sync(cfg: PipelineConfig) -> None:
    cfg.require_dataset()
    rig = CameraRig.load(cfg.dataset / "rig.json")
    res = sync.run_sync(cfg.dataset, range(len(rig)), int(cfg["sync.reference"]), bool(cfg["sync.use_audio"]))
    cfg.output.mkdir(parents=True, exist_ok=True)
    res.write_csv(cfg.output / "gof.csv")
    fileio.write_json(cfg.output / "offsets.json", {str(k): v for k, v in res.offsets.items()})


def _reconstruct_one(args) -> tuple[int, dict | None]:
    cfg, rig, m, row = args
    frames = load_gof(cfg, rig, row)
    config = recon.ReconConfig(r=int(cfg["recon.r"]), mode=cfg["recon.mode"],
                               discontinuity_mm=float(cfg["recon.discontinuity_mm"]))
    try:
        res = recon.reconstruct(frames, rig, config)
    except recon.EmptySceneError as exc:
        log.warning("GoF %d skipped: %s", m, exc)
        return m, None
    wmaps = appearance.cloud_weight_maps(res.clouds, rig)
    vis = appearance.vertex_visibility(res.mesh, rig, frames, sensors=rig.reconstruction_ids)
    tex = appearance.assign_texture(res.mesh, rig, frames, vis, wmaps)
    fileio.write_mesh(mesh_path(cfg, m), tex.to_trimesh())
    if cfg["recon.save_volume"]:
        fileio.write_volume(volume_path(cfg, m), res.volume, res.level)
    return m, res.timings


def cmd_reconstruct(cfg: PipelineConfig) -> None:
    cfg.require_dataset()
    rig = load_rig(cfg)
    table, _ = frame_table(cfg, rig)
    (cfg.output / "meshes").mkdir(parents=True, exist_ok=True)
    (cfg.output / "volumes").mkdir(parents=True, exist_ok=True)
    cc = None
    if cfg["appearance.color_correction"]:
        gofs = [load_gof(cfg, rig, row) for row in table[: int(cfg["appearance.frames"])]]
        try:
            cc = appearance.estimate_color_correction(gofs, rig, int(cfg["appearance.reference"]),
                                                      seed=int(cfg["seed"]))
        except ValueError as exc:
            log.warning("colour correction unavailable, using identity: %s", exc)
            cc = appearance.ColorCorrection.identity(rig.reconstruction_ids, int(cfg["appearance.reference"]))
        cc.save(cfg.output / "color_correction.json")
    jobs = [(cfg, rig, m, row) for m, row in enumerate(table)]
    if int(cfg["jobs"]) > 1:
        with ProcessPoolExecutor(int(cfg["jobs"])) as ex:
            results = list(ex.map(_reconstruct_one, jobs))
    else:
        results = [_reconstruct_one(j) for j in jobs]
    for m, t in results:
        if t is not None:
            log.info("GoF %d: raw %.0f ms, weights %.0f ms, volumetric %.0f ms",
                     m, t["raw"], t["weights"], t["volumetric"])


def cmd_evaluate(cfg: PipelineConfig) -> None:
    cfg.require_dataset()
    rig = load_rig(cfg)
    table, _ = frame_table(cfg, rig)
    meshes, frames = [], []
    for m, row in enumerate(table):
        p = mesh_path(cfg, m)
        meshes.append(appearance.TexturedMesh.from_trimesh(fileio.read_mesh(p)) if p.exists() else None)
        if meshes[-1] is None:
            log.warning("GoF %d has no mesh; reporting a gap", m)
        frames.append(load_gof(cfg, rig, row))
    ccp = cfg.output / "color_correction.json"
    cc = appearance.ColorCorrection.load(ccp) if ccp.exists() else None
    rep = evaluate_sequence(meshes, frames, rig, cc, cfg["eval.mode"], metrics=tuple(cfg["eval.metrics"]))
    cfg.output.mkdir(parents=True, exist_ok=True)
    rep.write_csv(cfg.output / "metrics.csv")
    rep.write_json(cfg.output / "metrics.json")


def _volumes(cfg: PipelineConfig, n: int):
    for m in range(n):
        p = volume_path(cfg, m)
        if not p.with_suffix(".json").exists():
            yield None
            continue
        yield fileio.read_volume(p)


def cmd_calibrate_user(cfg: PipelineConfig) -> None:
    cfg.require_dataset()
    rig = load_rig(cfg)
    table, _ = frame_table(cfg, rig)
    vols = [v for v in _volumes(cfg, len(table)) if v is not None]
    if not vols:
        raise fileio.DataError(f"no reconstructed volumes under {cfg.output / 'volumes'}; run reconstruct first")
    cal = mocap.calibrate_user(vols, up=rig.up, n_cal=int(cfg["mocap.n_cal"]), tau_rep=float(cfg["mocap.tau_rep_mm"]))
    cfg.calibration_path.parent.mkdir(parents=True, exist_ok=True)
    cal.save(cfg.calibration_path)


def cmd_track(cfg: PipelineConfig) -> None:
    path = cfg.calibration_path
    if not path.exists():
        raise fileio.DataError(f"missing user calibration file {path}; run calibrate-user first")
    cfg.require_dataset()
    cal = mocap.BodyCalibration.load(path)
    rig = load_rig(cfg)
    table, times = frame_table(cfg, rig)
    tracker = mocap.Tracker(cal, up=rig.up, sigma_a=float(cfg["mocap.sigma_a"]), sigma_z=float(cfg["mocap.sigma_z"]))
    poses = []
    for m, vol in enumerate(_volumes(cfg, len(table))):
        A, L = vol if vol is not None else (None, 0.0)
        poses.append(tracker.track_frame(A, L, m, times[m]))
    cfg.output.mkdir(parents=True, exist_ok=True)
    mocap.write_skeleton_jsonl(cfg.output / "skeleton.jsonl", poses)
    mocap.write_angles_csv(cfg.output / "angles.csv", poses)


def cmd_bench(cfg: PipelineConfig) -> None:
    rs = [int(r) for r in cfg["bench.r"]]
    if (cfg.dataset / "rig.json").exists():
        rig = load_rig(cfg)
        table, _ = frame_table(cfg, rig)
        frames = load_gof(cfg, rig, table[0])
        res = bench.run_bench(rs, frames, rig, int(cfg["bench.repeats"]), cfg["recon.mode"])
    else:
        res = bench.run_bench(rs, repeats=int(cfg["bench.repeats"]), mode=cfg["recon.mode"])
    print(bench.format_table(res))
    cfg.output.mkdir(parents=True, exist_ok=True)
    fileio.write_csv(cfg.output / "bench.csv", ["stage"] + [f"r{r}_ms" for r in sorted(res)], bench.table_rows(res))


HANDLERS = {
    "synth": cmd_synth, "calibrate": cmd_calibrate, "sync": cmd_sync, "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate, "calibrate-user": cmd_calibrate_user, "track": cmd_track, "bench": cmd_bench,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="volcap", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("-c", "--config", help="JSON file of dotted keys")
    p.add_argument("-d", "--dataset", help="dataset directory")
    p.add_argument("-o", "--output", help="artifact directory (default <dataset>/out)")
    p.add_argument("-r", help="resolution exponent; comma-separated list for bench")
    p.add_argument("--preset", help="synthetic scene preset")
    p.add_argument("--seed", type=int)
    p.add_argument("-j", "--jobs", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        over = list(args.set)
        for key, val in (("dataset", args.dataset), ("output", args.output), ("synth.preset", args.preset),
                         ("seed", args.seed), ("jobs", args.jobs)):
            if val is not None:
                over.append(f"{key}={json.dumps(val)}")
        if args.r is not None:
            rs = [int(x) for x in str(args.r).split(",") if x.strip()]
            over.append(f"bench.r={json.dumps(rs)}" if args.command == "bench" else f"recon.r={rs[0]}")
        cfg = PipelineConfig.build(args.config, over)
    except (ConfigError, ValueError) as exc:
        print(f"volcap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        HANDLERS[args.command](cfg)
    except (fileio.DataError, FileNotFoundError, calib.InsufficientCorrespondences, calib.DegenerateConfiguration,
            mocap.CalibrationFailed, sync.NoCorrelationPeak) as exc:
        print(f"volcap {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
