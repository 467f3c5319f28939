import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etapkit.errors import EmptyWindow
from etapkit.events import EventStream, EventWindow, rotate_events, select_window
from etapkit.representation import (
    EventStack,
    StackBatch,
    add_noise,
    build_event_stack,
    build_voxel_grid,
    channel_event_counts,
    export_stack,
    load_stack,
    normalize_batch,
)

from oracles import stack_by_loops


def window_from(xs, ys, ps, width=12, height=10, ts=None):
    n = len(xs)
    ts = np.arange(1, n + 1) if ts is None else ts
    return EventStream(width, height, ts, xs, ys, ps).as_window(t_start_us=0, t_end_us=int(ts[-1]))


def random_window(rng, n, width=12, height=10, integer=False):
    xs = rng.integers(0, width, n).astype(float) if integer else rng.uniform(0, width - 1, n)
    ys = rng.integers(0, height, n).astype(float) if integer else rng.uniform(0, height - 1, n)
    ps = rng.choice([-1, 1], n)
    return window_from(xs, ys, ps, width, height)


def test_channel_counts_reference():
    assert channel_event_counts(20000, 10) == [20000, 10000, 5000, 2500, 1250, 625, 312, 156, 78, 39]


def test_single_integer_event():
    st_ = build_event_stack(window_from([5.0], [5.0], [1]))
    assert st_.data[5, 5, 0] == 1.0
    assert st_.data[:, :, 0].sum() == 1.0
    # floor(1 / 2**c) is zero for every later channel
    assert not st_.data[:, :, 1:].any()
    two = build_event_stack(window_from([5.0, 5.0], [5.0, 5.0], [1, 1]), 2).data
    assert two[5, 5, 0] == 2.0 and two[5, 5, 1] == 1.0


def test_half_pixel_event_splits():
    st_ = build_event_stack(window_from([5.5], [5.0], [1]))
    assert st_.data[5, 5, 0] == 0.5 and st_.data[5, 6, 0] == 0.5
    assert np.count_nonzero(st_.data[:, :, 0]) == 2


def test_empty_window_raises():
    w = EventWindow(4, 4, [], [], [], [], t_end_us=1, span_us=1)
    with pytest.raises(EmptyWindow):
        build_event_stack(w)
    with pytest.raises(EmptyWindow):
        build_voxel_grid(w)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 300), st.integers(1, 10))
def test_stack_matches_loop_oracle(seed, n, bins):
    rng = np.random.default_rng(seed)
    w = random_window(rng, n)
    got = build_event_stack(w, bins).data
    ref = stack_by_loops(w.x, w.y, w.p, w.width, w.height, bins)
    assert np.allclose(got, ref, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 400))
def test_channel_mass_equals_polarity_sum(seed, n):
    rng = np.random.default_rng(seed)
    w = random_window(rng, n)
    data = build_event_stack(w).data
    for c, k in enumerate(channel_event_counts(n, 10)):
        assert abs(data[:, :, c].sum() - w.p[n - k:].sum()) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 300), st.sampled_from([90, 180, 270]))
def test_rotation_equivariance_integer_events(seed, n, theta):
    rng = np.random.default_rng(seed)
    w = random_window(rng, n, integer=True)
    lhs = build_event_stack(rotate_events(w, theta)).data
    rhs = np.rot90(build_event_stack(w).data, theta // 90, axes=(0, 1))
    assert np.array_equal(lhs, rhs)


def test_channels_are_nested_suffixes():
    rng = np.random.default_rng(0)
    w = random_window(rng, 257)
    data = build_event_stack(w, 4).data
    counts = channel_event_counts(257, 4)
    for c in range(3):
        # the difference between channels is exactly the older events dropped
        older = stack_by_loops(w.x[257 - counts[c]:257 - counts[c + 1]], w.y[257 - counts[c]:257 - counts[c + 1]],
                               w.p[257 - counts[c]:257 - counts[c + 1]], w.width, w.height, 1)[:, :, 0]
        assert np.allclose(data[:, :, c] - data[:, :, c + 1], older)


def test_voxel_grid_bin_centres_and_mass():
    # span 90 us and 10 bins: centres every 10 us starting at t_start
    ts = np.array([30, 35, 90])
    w = EventStream(8, 8, ts, [1.0, 2.0, 3.0], [1.0, 1.0, 1.0], [1, -1, 1]).as_window(t_start_us=0, t_end_us=90)
    g = build_voxel_grid(w, 10).data
    assert g[1, 1, 3] == 1.0 and g[1, 1].sum() == 1.0
    assert g[1, 2, 3] == -0.5 and g[1, 2, 4] == -0.5
    assert g[1, 3, 9] == 1.0
    rng = np.random.default_rng(4)
    w = random_window(rng, 300)
    assert abs(build_voxel_grid(w, 7).data.sum() - w.p.sum()) < 1e-9


def test_normalize_batch_statistics():
    rng = np.random.default_rng(0)
    stacks = [EventStack(rng.normal(3, 2, (6, 7, 4)), 100) for _ in range(5)]
    stacks[0].data[:, :, 2] = 0
    for s in stacks:
        s.data[:, :, 2] = 7.0
    out = normalize_batch(StackBatch(stacks)).array()
    assert np.all(out[..., 2] == 0)
    for c in (0, 1, 3):
        assert abs(out[..., c].mean()) < 1e-6
        assert abs(out[..., c].std() - 1) < 1e-4


def test_normalize_keeps_unit_channel():
    vals = np.array([-1.0, 1.0] * 8).reshape(2, 2, 2, 2).transpose(0, 1, 3, 2)
    stacks = [EventStack(v, 10) for v in vals]
    out = normalize_batch(StackBatch(stacks)).array()
    assert np.allclose(out, vals)


def test_add_noise_scaling():
    rng = np.random.default_rng(0)
    base = EventStack(np.zeros((200, 200, 3)), 1000)
    assert add_noise(base, 0.0, rng) is base
    noisy = add_noise(base, 0.1, rng).data
    assert abs(noisy[:, :, 0].std() - 0.1) < 0.003
    assert abs(noisy[:, :, 1].std() - 0.05) < 0.0015
    with pytest.raises(ValueError):
        add_noise(base, -1.0, rng)


def test_export_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    s = build_event_stack(random_window(rng, 50))
    export_stack(tmp_path / "s.bin", s)
    back = load_stack(tmp_path / "s.bin")
    assert np.allclose(back.data, s.data.astype(np.float32))
    assert (back.n_events, back.t_end_us) == (s.n_events, s.t_end_us)


def test_reference_size_counts():
    rng = np.random.default_rng(2)
    s = EventStream(32, 32, np.arange(25000), rng.integers(0, 32, 25000), rng.integers(0, 32, 25000),
                    rng.choice([-1, 1], 25000))
    w = select_window(s, 24999, 20000)
    stack = build_event_stack(w)
    assert stack.channel_counts() == [20000 // 2 ** c for c in range(10)]
