import math

import numpy as np
import pytest

from etapkit.errors import ConfigInvalid, InsufficientForeground, NoMinimaFound
from etapkit.events import EventStream
from etapkit.gt import (
    SpinnerGtConfig,
    SpriteSpec,
    ToySceneConfig,
    detect_minima,
    estimate_spinner,
    generate_toy_scene,
    piecewise_angle,
    sample_query_tracks,
    spinner_frames,
    spinner_groundtruth,
    translating_texture_scene,
)
from etapkit.simulator import ContrastConfig, simulate_events

W = 48
CENTER = ((W - 1) / 2, (W - 1) / 2)


def test_static_sprite_tracks_do_not_move():
    cfg = ToySceneConfig(32, 32, 0.1, 50.0, sprites=(SpriteSpec(16.0, 16.0, 5.0),))
    scene = generate_toy_scene(cfg)
    pos = scene.tracks.positions
    assert np.array_equal(pos, np.repeat(pos[:, :1], pos.shape[1], axis=1))
    assert scene.tracks.visible.all()
    assert (scene.owner == 1).sum() == 11 * 11
    # nothing changes, so consecutive frames are identical
    assert np.array_equal(scene.frames.frames[0], scene.frames.frames[-1])


def test_translating_sprite_is_analytic():
    sp = SpriteSpec(12.0, 20.0, 4.0, vx=40.0, vy=-20.0)
    scene = generate_toy_scene(ToySceneConfig(48, 40, 0.2, 50.0, sprites=(sp,)))
    ts = scene.tracks.timestamps_us / 1e6
    idx = np.nonzero(scene.owner == 1)[0]
    x0 = scene.tracks.positions[idx, 0, 0]
    y0 = scene.tracks.positions[idx, 0, 1]
    assert np.allclose(scene.tracks.positions[idx, :, 0], x0[:, None] + 40.0 * ts)
    assert np.allclose(scene.tracks.positions[idx, :, 1], y0[:, None] - 20.0 * ts)
    # the rendered owner map follows the sprite centre
    last = scene.ids[-1]
    assert last[int(round(20.0 - 4.0)), int(round(12.0 + 8.0))] == 1


def test_rotation_keeps_distance_to_centre():
    sp = SpriteSpec(20.0, 20.0, 6.0, shape="disc", omega=3.0)
    scene = generate_toy_scene(ToySceneConfig(40, 40, 0.2, 50.0, sprites=(sp,)))
    idx = scene.owner == 1
    r = np.linalg.norm(scene.tracks.positions[idx] - [20.0, 20.0], axis=-1)
    assert np.allclose(r, r[:, :1])


def test_occlusion_by_upper_sprite():
    lower = SpriteSpec(10.0, 16.0, 3.0, vx=100.0)
    upper = SpriteSpec(24.0, 16.0, 4.0)
    scene = generate_toy_scene(ToySceneConfig(40, 32, 0.2, 50.0, sprites=(lower, upper)))
    centre = 16 * 40 + 10
    assert scene.owner[centre] == 1
    x = scene.tracks.positions[centre, :, 0]
    covered = np.abs(x - 24.0) <= 4.0
    assert covered.any() and (~covered).any()
    assert np.array_equal(scene.tracks.visible[centre], ~covered)
    # the upper sprite is never hidden
    assert scene.tracks.visible[scene.owner == 2].all()


def test_points_leaving_the_frame_become_invisible():
    scene = translating_texture_scene(16, 16, n_frames=6, fps=50.0, velocity=(100.0, 0.0))
    right = scene.tracks.positions[:, :, 0] >= 15.5
    assert right.any()
    assert not scene.tracks.visible[right].any()


def test_invalid_configs():
    with pytest.raises(ConfigInvalid):
        generate_toy_scene(ToySceneConfig(2, 32))
    with pytest.raises(ConfigInvalid):
        generate_toy_scene(ToySceneConfig(sprites=(SpriteSpec(1.0, 1.0, shape="star"),)))
    with pytest.raises(ConfigInvalid):
        generate_toy_scene(ToySceneConfig(fps=10.0, sprites=(SpriteSpec(1.0, 1.0, vx=1e5),)))
    with pytest.raises(ConfigInvalid):
        SpinnerGtConfig(lobes=0).validate()


def test_scene_generation_is_seeded():
    cfg = ToySceneConfig(32, 32, 0.1, 50.0, n_random_sprites=2, texture_seed=3)
    a = generate_toy_scene(cfg, np.random.default_rng(1))
    b = generate_toy_scene(cfg, np.random.default_rng(1))
    assert np.array_equal(a.frames.frames, b.frames.frames)
    assert np.array_equal(a.tracks.positions, b.tracks.positions)


def test_query_sampling_respects_foreground_fraction():
    cfg = ToySceneConfig(32, 32, 0.1, 50.0, sprites=(SpriteSpec(16.0, 16.0, 6.0, vx=30.0),))
    scene = generate_toy_scene(cfg)
    queries, gt = sample_query_tracks(scene, 20, 0.6, np.random.default_rng(0))
    assert len(queries) == gt.n_points == 20
    owners = scene.owner[gt.point_ids]
    assert (owners > 0).sum() >= 12
    for q, i in zip(queries, range(gt.n_points)):
        assert gt.visible[i, q.t_index]
        assert np.allclose(gt.positions[i, q.t_index], [q.x, q.y])
        assert not gt.valid[i, :q.t_index].any()


def test_query_sampling_without_enough_foreground():
    cfg = ToySceneConfig(32, 32, 0.1, 50.0, sprites=(SpriteSpec(16.0, 16.0, 1.0),))
    scene = generate_toy_scene(cfg)
    with pytest.raises(InsufficientForeground):
        sample_query_tracks(scene, 40, 0.6, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_query_tracks(scene, 4, 1.5)


def test_detect_minima_on_a_cosine():
    t = np.arange(400)
    idx, frac = detect_minima(1 + np.cos(2 * np.pi * t / 50.0 + 0.3), window=5)
    period = np.diff(idx + frac)
    assert np.allclose(period, 50.0, atol=0.1)
    assert len(detect_minima(np.ones(50))[0]) == 0


def spinner_stream(omegas, durations, fps=2000, radius=18.0, lobes=3):
    total = float(np.sum(durations))
    ts = np.round(np.arange(int(total * fps) + 1) * 1e6 / fps).astype(np.int64)
    seq = spinner_frames(W, W, CENTER, radius, lobes, piecewise_angle(omegas, durations), ts)
    return simulate_events(seq, ContrastConfig(0.2, 0.2))


def spinner_config(**kw):
    base = dict(hist_events=4000, lobes=3, center=CENTER, radii=(6.0, 12.0), angles=(0.0, 1.0))
    base.update(kw)
    return SpinnerGtConfig(**base)


def test_constant_spin_recovers_omega():
    est = estimate_spinner(spinner_stream([30.0], [1.0]), spinner_config())
    assert len(est.omega) >= 10
    assert np.all(np.abs(est.omega - 30.0) <= 0.01 * 30.0)


def test_spin_up_gives_non_decreasing_omega():
    est = estimate_spinner(spinner_stream([20.0, 40.0], [0.6, 0.6]), spinner_config())
    # allow the 1% estimation noise between neighbouring segments
    assert np.all(np.diff(est.omega) > -0.01 * est.omega[1:])
    assert est.omega[0] == pytest.approx(20.0, rel=0.01)
    assert est.omega[-1] == pytest.approx(40.0, rel=0.01)


def test_groundtruth_tracks_are_exact_circles():
    stream = spinner_stream([30.0], [0.5])
    cfg = spinner_config()
    gt = spinner_groundtruth(stream, cfg)
    r = np.linalg.norm(gt.positions - np.array(CENTER), axis=-1)
    assert np.allclose(r[0], 6.0) and np.allclose(r[1], 12.0)
    assert np.allclose(gt.positions[:, 0], [[CENTER[0] + 6.0, CENTER[1]],
                                            [CENTER[0] + 12 * math.cos(1.0), CENTER[1] + 12 * math.sin(1.0)]])
    assert np.all(np.diff(gt.timestamps_us) > 0)


def test_static_scene_has_no_minima():
    rng = np.random.default_rng(0)
    n = 20000
    pix = rng.integers(0, 50, n)
    stream = EventStream(W, W, np.arange(n) * 20, (pix % 10).astype(float), (pix // 10).astype(float),
                         rng.choice([-1, 1], n))
    # fewer events than a single histogram needs
    with pytest.raises(NoMinimaFound):
        estimate_spinner(stream, spinner_config(hist_events=n + 1))
    const = EventStream(W, W, np.arange(n) * 20, np.full(n, 3.0), np.full(n, 4.0), np.ones(n, dtype=int))
    with pytest.raises(NoMinimaFound):
        estimate_spinner(const, spinner_config())


def test_tracks_from_drops_early_timesteps():
    cfg = ToySceneConfig(32, 32, 0.1, 50.0, sprites=(SpriteSpec(16.0, 16.0, 6.0, vx=30.0),))
    scene = generate_toy_scene(cfg)
    late = scene.tracks_from(40_000)
    assert late.tracks.timestamps_us.tolist() == [40_000, 60_000, 80_000, 100_000]
    assert np.array_equal(late.tracks.positions, scene.tracks.positions[:, 2:])
    assert late.frames is scene.frames
    queries, gt = sample_query_tracks(late, 10, 0.5, np.random.default_rng(1))
    assert gt.timestamps_us[0] == 40_000 and all(q.t_index >= 0 for q in queries)
    with pytest.raises(ConfigInvalid):
        scene.tracks_from(10**6)
