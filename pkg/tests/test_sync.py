
import numpy as np
import pytest
from hypothesis import given, strategies as st

from volcap import fileio, sync, synth
from oracles import exhaustive_sequence, random_timeline


def test_greedy_equals_exhaustive_on_random_instances():
    for seed in range(300):
        tl = random_timeline(seed)
        start = sync.initial_gof(tl)
        assert [g.index for g in sync.select_gofs(tl, start)] == exhaustive_sequence(tl, start), seed


def test_dropped_frame_resynchronises():
    t = np.arange(6) * 33.0
    tl = sync.Timeline([t, t + 1, np.delete(t, 3) + 2])
    seq = [g.index for g in sync.select_gofs(tl)]
    assert seq == exhaustive_sequence(tl, sync.GoF((0, 0, 0)))
    assert (3, 3, 2) in seq or (2, 2, 2) in seq
    steps = {tuple(np.subtract(b, a)) for a, b in zip(seq, seq[1:])}
    assert (1, 1, 0) in steps or (1, 1, 1) in steps


def test_aligned_timelines_advance_together():
    t = np.arange(5) * 33.3
    tl = sync.Timeline([t, t, t])
    g = sync.next_gof(tl, sync.GoF((0, 0, 0)))
    assert g.index == (1, 1, 1) and g.inconsistency(tl) == 0


def test_exhausted_sensor_is_held():
    tl = sync.Timeline([np.arange(3) * 33.0, np.arange(5) * 33.0])
    assert sync.next_gof(tl, sync.GoF((2, 2))).index == (2, 3)
    with pytest.raises(sync.EndOfSequence):
        sync.next_gof(tl, sync.GoF((2, 4)))


@given(st.lists(st.floats(0.0, 16.4), min_size=1, max_size=4), st.integers(5, 20))
def test_offsets_below_half_interval_bound_inconsistency(offsets, n):
    tl = sync.Timeline([np.arange(n) * 33.0 + o for o in [0.0] + offsets])
    gofs = sync.select_gofs(tl)
    assert all(g.inconsistency(tl) <= 16.5 + 1e-9 for g in gofs)
    idx = np.array([g.index for g in gofs])
    assert np.all(np.diff(idx, axis=0) >= 0)
    K = tl.K
    for a in range(len(idx) - 2 ** K):
        assert np.all(idx[a + 2 ** K] > idx[a])


def test_timeline_validation():
    with pytest.raises(ValueError):
        sync.Timeline([np.array([0.0, 0.0])])
    with pytest.raises(ValueError):
        sync.align_timelines(sync.Timeline([np.arange(3.0)]), [None])


def test_align_shifts_by_offset():
    tl = sync.align_timelines(sync.Timeline([np.arange(3.0), np.arange(3.0) + 25]), [0.0, 25.0])
    assert np.allclose(tl.times[1], np.arange(3.0))


@pytest.mark.parametrize("delay", [400, -400, 0, 1, 37])
def test_audio_offset_sign_and_size(delay, rng):
    sr = 16000
    base = rng.normal(size=sr + 2000)
    ref = base[1000:1000 + sr]
    sig = base[1000 - delay:1000 - delay + sr]
    assert sync.audio_offset(sig, ref, sr) == pytest.approx(delay * 1000 / sr)


def test_flat_audio_has_no_peak():
    with pytest.raises(sync.NoCorrelationPeak):
        sync.audio_offset(np.zeros(16000), np.ones(16000), 16000)


def test_clap_alignment_on_dataset(tmp_path):
    sc = synth.make_scene("xpose", n_frames=4, scale=0.25, timestamp_jitter=8.0)
    out = synth.export_dataset(sc, tmp_path / "ds", n_samples=100, box_frames=1)
    res = sync.run_sync(out, range(len(sc.rig)))
    for k in range(len(sc.rig)):
        assert res.offsets[k] == pytest.approx(sc.offset(k), abs=1 / 16 + 1e-9)
    clap = [res.timeline.times[k][1] for k in range(len(sc.rig))]
    assert max(clap) - min(clap) < 17.0
    res.write_csv(tmp_path / "gof.csv")
    sensors, table = sync.read_gof_csv(tmp_path / "gof.csv")
    assert sensors == tuple(range(len(sc.rig))) and table == res.frame_table()
    assert fileio.read_csv(tmp_path / "gof.csv")[0]["inconsistency_ms"]
