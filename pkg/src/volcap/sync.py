"""Audio-based clock alignment and greedy selection of synchronised groups of frames."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import correlate, correlation_lags

from . import fileio

INITIAL_WINDOW = 5
# inconsistencies are compared after rounding so float noise cannot break ties
TIE_DECIMALS = 6


class NoCorrelationPeak(ValueError):
    """A signal has no variance, so its cross-correlation has no peak."""


class EndOfSequence(Exception):
    """No sensor has a next frame."""


@dataclass(eq=False)
class Timeline:
    """Per-sensor increasing timestamps (ms) with the dataset frame id of each entry."""

    times: list[np.ndarray]
    frame_ids: list[np.ndarray] | None = None

    def __post_init__(self):
        self.times = [np.asarray(t, dtype=float).reshape(-1) for t in self.times]
        for k, t in enumerate(self.times):
            if len(t) == 0:
                raise ValueError(f"sensor {k} has an empty timeline")
            if np.any(np.diff(t) <= 0):
                raise ValueError(f"sensor {k} timestamps are not strictly increasing")
        if self.frame_ids is None:
            self.frame_ids = [np.arange(len(t)) for t in self.times]
        else:
            self.frame_ids = [np.asarray(f, dtype=np.int64).reshape(-1) for f in self.frame_ids]

    @property
    def K(self) -> int:
        return len(self.times)

    def lengths(self) -> tuple[int, ...]:
        return tuple(len(t) for t in self.times)

    def stamps(self, idx: Sequence[int]) -> np.ndarray:
        return np.array([self.times[k][i] for k, i in enumerate(idx)])

    def shifted(self, offsets: Sequence[float]) -> "Timeline":
        return Timeline([t - o for t, o in zip(self.times, offsets)], self.frame_ids)


def inconsistency(timeline: Timeline, idx: Sequence[int]) -> float:
    """Largest pairwise timestamp difference within a group of frames."""
    s = timeline.stamps(idx)
    return float(s.max() - s.min())


@dataclass(frozen=True)
class GoF:
    """One timeline position per sensor."""

    index: tuple[int, ...]

    def inconsistency(self, timeline: Timeline) -> float:
        return inconsistency(timeline, self.index)

    def frames(self, timeline: Timeline) -> tuple[int, ...]:
        return tuple(int(timeline.frame_ids[k][i]) for k, i in enumerate(self.index))


# ---------------------------------------------------------------------------
# audio


def audio_offset(signal: np.ndarray, reference: np.ndarray, sample_rate: float) -> float:
    """Delay (ms) of ``signal`` relative to ``reference`` at the zero-mean cross-correlation peak."""
    a = np.asarray(signal, dtype=float)
    b = np.asarray(reference, dtype=float)
    if a.std() == 0 or b.std() == 0:
        raise NoCorrelationPeak("flat signal has no correlation peak")
    a = a - a.mean()
    b = b - b.mean()
    r = correlate(a, b, mode="full", method="fft")
    lags = correlation_lags(len(a), len(b), mode="full")
    return float(lags[int(np.argmax(r))]) * 1000.0 / sample_rate


def align_timelines(timeline: Timeline, offsets: Sequence[float | None]) -> Timeline:
    """Move every local timeline onto the reference clock: ``T_k - offset_k``."""
    if len(offsets) != timeline.K or any(o is None for o in offsets):
        raise ValueError("an audio offset is required for every sensor")
    return timeline.shifted([float(o) for o in offsets])


# ---------------------------------------------------------------------------
# group-of-frames selection


def _step_key(timeline: Timeline, idx: tuple[int, ...], s: tuple[int, ...]):
    # minimal inconsistency, then more sensors advanced, then lexicographically smallest pattern
    return (round(inconsistency(timeline, idx), TIE_DECIMALS), -sum(s), s)


def candidate_steps(timeline: Timeline, current: GoF):
    """All nonzero advance patterns with their resulting indices (exhausted sensors stay put)."""
    n = timeline.lengths()
    movable = [current.index[k] + 1 < n[k] for k in range(timeline.K)]
    for s in itertools.product((0, 1), repeat=timeline.K):
        if not any(s) or any(si and not m for si, m in zip(s, movable)):
            continue
        yield s, tuple(i + si for i, si in zip(current.index, s))


def next_gof(timeline: Timeline, current: GoF) -> GoF:
    """Greedy successor: the advance pattern giving the least inconsistent group."""
    best = None
    for s, idx in candidate_steps(timeline, current):
        key = _step_key(timeline, idx, s)
        if best is None or key < best[0]:
            best = (key, idx)
    if best is None:
        raise EndOfSequence("all sensors exhausted")
    return GoF(best[1])


def initial_gof(timeline: Timeline, window: int = INITIAL_WINDOW) -> GoF:
    """Least inconsistent combination among the first ``window`` frames of each sensor."""
    ranges = [range(min(window, len(t))) for t in timeline.times]
    best = None
    for idx in itertools.product(*ranges):
        key = (round(inconsistency(timeline, idx), TIE_DECIMALS), idx)
        if best is None or key < best:
            best = key
    return GoF(best[1])


def select_gofs(timeline: Timeline, start: GoF | None = None, max_gofs: int | None = None) -> list[GoF]:
    """Greedy GoF sequence from ``start`` (default: :func:`initial_gof`) to the end of the streams."""
    cur = initial_gof(timeline) if start is None else start
    out = [cur]
    while max_gofs is None or len(out) < max_gofs:
        try:
            cur = next_gof(timeline, cur)
        except EndOfSequence:
            break
        out.append(cur)
    return out


# ---------------------------------------------------------------------------
# dataset I/O


def read_timeline(root: str | Path, sensors: Sequence[int]) -> Timeline:
    times, ids = [], []
    for k in sensors:
        rows = fileio.read_csv(Path(root) / "frames" / f"cam{k}" / "timestamps.csv")
        try:
            ids.append([int(r["frame"]) for r in rows])
            times.append([float(r["ms"]) for r in rows])
        except (KeyError, ValueError) as exc:
            raise fileio.DataError(f"malformed timestamps for cam{k}") from exc
    return Timeline(times, ids)


@dataclass(eq=False)
class SyncResult:
    sensors: tuple[int, ...]
    offsets: dict[int, float]
    timeline: Timeline
    gofs: list[GoF]

    def frame_table(self) -> list[tuple[int, ...]]:
        """Dataset frame ids of each GoF, one column per sensor."""
        return [g.frames(self.timeline) for g in self.gofs]

    def write_csv(self, path: str | Path) -> None:
        header = ["m"] + [f"n_{k}" for k in self.sensors] + ["inconsistency_ms"]
        rows = [[m, *g.frames(self.timeline), f"{g.inconsistency(self.timeline):.3f}"]
                for m, g in enumerate(self.gofs)]
        fileio.write_csv(path, header, rows)


def read_gof_csv(path: str | Path) -> tuple[tuple[int, ...], list[tuple[int, ...]]]:
    """Sensor ids and per-GoF frame ids from a ``gof.csv``."""
    rows = fileio.read_csv(path)
    if not rows:
        return (), []
    cols = [c for c in rows[0] if c.startswith("n_")]
    sensors = tuple(int(c[2:]) for c in cols)
    return sensors, [tuple(int(r[c]) for c in cols) for r in rows]


def run_sync(root: str | Path, sensors: Sequence[int], reference: int | None = None,
             use_audio: bool = True) -> SyncResult:
    """Offsets from ``audio/cam<k>.wav`` (if present), aligned timelines and the GoF sequence."""
    sensors = tuple(sensors)
    ref = sensors[0] if reference is None else reference
    tl = read_timeline(root, sensors)
    offsets = {k: 0.0 for k in sensors}
    audio = Path(root) / "audio"
    if use_audio and audio.is_dir():
        ref_sig, sr = fileio.read_wav(audio / f"cam{ref}.wav")
        for k in sensors:
            if k == ref:
                continue
            sig, sr_k = fileio.read_wav(audio / f"cam{k}.wav")
            if sr_k != sr:
                raise fileio.DataError(f"cam{k}.wav sample rate {sr_k} differs from reference {sr}")
            offsets[k] = audio_offset(sig, ref_sig, sr)
    aligned = align_timelines(tl, [offsets[k] for k in sensors])
    return SyncResult(sensors, offsets, aligned, select_gofs(aligned))
