import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from volcap import recon, synth

settings.register_profile("volcap", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("volcap")


@functools.lru_cache(maxsize=None)
def scene(preset="xpose", n_frames=1, scale=0.5, depth_noise=0.0, seed=0):
    return synth.make_scene(preset, n_frames=n_frames, scale=scale, depth_noise=depth_noise, seed=seed)


@functools.lru_cache(maxsize=None)
def frames(preset="xpose", n_frames=1, scale=0.5, depth_noise=0.0, seed=0):
    sc = scene(preset, n_frames, scale, depth_noise, seed)
    return tuple(tuple(synth.render_frame(sc, k, n) for k in range(len(sc.rig))) for n in range(sc.n_frames))


@functools.lru_cache(maxsize=None)
def reconstruction(r=6, mode="weighted", scale=0.5, depth_noise=0.0, seed=0):
    sc = scene("xpose", 1, scale, depth_noise, seed)
    return recon.reconstruct(frames("xpose", 1, scale, depth_noise, seed)[0], sc.rig,
                             recon.ReconConfig(r=r, mode=mode))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) != "call":
                continue
            lines += [v for k, v in getattr(rep, "user_properties", ()) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
