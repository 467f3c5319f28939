from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etapkit.errors import InvalidRange, NotUpsampled
from etapkit.events import invert_time
from etapkit.simulator import (
    ContrastConfig,
    FrameSequence,
    log_intensity,
    read_frame_dir,
    sample_threshold,
    simulate_events,
    upsample_factor,
    upsample_linear,
    write_frame_dir,
)

from oracles import dense_integrator
from scenes import edge_sequence, matched_fraction, random_sequence


def test_sample_threshold_ranges():
    rng = np.random.default_rng(0)
    for lo, hi in ((0.16, 0.34), (0.2, 1.5)):
        cs = [sample_threshold(rng, lo, hi) for _ in range(200)]
        assert all(lo <= c.c_pos <= hi and c.c_pos == c.c_neg for c in cs)
    assert sample_threshold(rng, 0.2, 0.2).c_pos == 0.2
    with pytest.raises(InvalidRange):
        sample_threshold(rng, 0.3, 0.2)
    a = sample_threshold(np.random.default_rng(5))
    b = sample_threshold(np.random.default_rng(5))
    assert a == b


def test_log_intensity_values():
    assert log_intensity(0.0) == pytest.approx(np.log(1e-3))
    assert log_intensity(1.0) == pytest.approx(np.log(1.001))
    v = log_intensity(np.linspace(0, 1, 50))
    assert np.all(np.diff(v) > 0)


def test_contrast_config_validates():
    with pytest.raises(ValueError):
        ContrastConfig(0.0, 0.2)


def test_upsample_linear():
    f = np.random.default_rng(0).random((2, 3, 3))
    seq = FrameSequence(f, [0, 1000])
    assert upsample_linear(seq, 1) is seq
    up = upsample_linear(seq, 2)
    assert up.timestamps_us.tolist() == [0, 500, 1000]
    assert np.allclose(up.frames[1], f.mean(axis=0))
    assert upsample_factor(4.0) == 4
    assert upsample_factor(0.3) == 1


def test_constant_sequence_is_silent():
    seq = FrameSequence(np.full((5, 4, 4), 0.5), np.arange(5) * 100)
    assert len(simulate_events(seq, ContrastConfig(0.2, 0.2))) == 0


def test_two_threshold_step_gives_two_events():
    c = 0.2
    eps = 1e-3
    a = 0.3
    b = np.exp(np.log(a + eps) + 2 * c + 1e-9) - eps
    frames = np.full((2, 3, 3), a)
    frames[1, 1, 2] = b
    ev = simulate_events(FrameSequence(frames, [0, 1000]), ContrastConfig(c, c))
    assert len(ev) == 2
    assert ev.p.tolist() == [1, 1]
    assert ev.x.tolist() == [2, 2] and ev.y.tolist() == [1, 1]
    # the crossing times are interpolated inside the interval
    assert 0 < ev.t[0] < ev.t[1] <= 1000


def test_max_log_step_is_enforced():
    seq = FrameSequence(np.array([np.full((2, 2), 0.05), np.full((2, 2), 0.9)]), [0, 100])
    with pytest.raises(NotUpsampled):
        simulate_events(seq, ContrastConfig(0.2, 0.2), max_log_step=1.0)


@pytest.mark.parametrize("seed", range(3))
def test_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    seq = random_sequence(rng, n=8, h=6, w=6)
    c = sample_threshold(rng)
    ev = simulate_events(seq, c)
    ref = dense_integrator(seq.frames, seq.timestamps_us, c.c_pos, c.c_neg)
    assert Counter(ev.as_records()) == Counter((t, float(x), float(y), p) for t, x, y, p in ref)


def test_translating_edge_matches_oracle():
    seq = edge_sequence(width=16, height=4)
    c = ContrastConfig(0.25, 0.25)
    ev = simulate_events(seq, c)
    ref = dense_integrator(seq.frames, seq.timestamps_us, 0.25, 0.25)
    assert Counter(ev.as_records()) == Counter((t, float(x), float(y), p) for t, x, y, p in ref)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 0.5), st.floats(1.05, 3.0))
def test_event_count_monotone_in_threshold(seed, c, factor):
    seq = random_sequence(np.random.default_rng(seed), n=6, h=5, w=5)
    n_small = len(simulate_events(seq, ContrastConfig(c, c)))
    n_big = len(simulate_events(seq, ContrastConfig(c * factor, c * factor)))
    assert n_big <= n_small


def test_deterministic_bytes():
    seq = random_sequence(np.random.default_rng(3))
    c = ContrastConfig(0.2, 0.2)
    a, b = simulate_events(seq, c), simulate_events(seq, c)
    assert a.t.tobytes() == b.t.tobytes() and a.x.tobytes() == b.x.tobytes()


def test_reverse_play_matches_inverted_stream():
    seq = edge_sequence()
    cfg = ContrastConfig(0.25, 0.25)
    fwd = simulate_events(seq, cfg)
    rev = simulate_events(seq.reversed(), cfg)
    ts = seq.timestamps_us
    inv = invert_time(fwd.as_window(t_start_us=ts[0], t_end_us=ts[-1]))
    frac = matched_fraction(inv.as_records(), rev.as_records(), 2, seq.width, seq.height)
    assert frac >= 0.98


def test_frame_dir_roundtrip(tmp_path):
    f = np.round(np.random.default_rng(0).random((3, 4, 5)) * 255) / 255
    seq = FrameSequence(f, [0, 10, 25])
    write_frame_dir(tmp_path / "fr", seq)
    back = read_frame_dir(tmp_path / "fr")
    assert np.allclose(back.frames, f) and back.timestamps_us.tolist() == [0, 10, 25]
