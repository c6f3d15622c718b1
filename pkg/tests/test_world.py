import json

import numpy as np
import pytest

from anchorflow.errors import GeometryError
from anchorflow.prompts import parse_prompt, reduce_to_first_frame, sample_prompt
from anchorflow.rng import stream
from anchorflow.world import (
    FRAMES, GRID, SIZE, DatasetIndex, SceneObject, SceneSpec, collision_free,
    final_state_scene, gen_dataset, motion_ranges, prompt_is_feasible,
    render_frame, scene_from_ast, simulate, turn_switch_frame,
)

RED = np.array([1, 0, 0], dtype=np.float32)
BLUE = np.array([0, 0, 1], dtype=np.float32)
GREEN = np.array([0, 1, 0], dtype=np.float32)


def _count(frame, rgb):
    return int(np.all(frame == rgb, axis=2).sum())


def test_scene_from_ast_deterministic():
    ast = parse_prompt("red square at center")
    a, b = scene_from_ast(ast, 42), scene_from_ast(ast, 42)
    assert a == b


def test_scene_centers_on_grid_with_unit_jitter():
    ast = parse_prompt("red square at center")
    for seed in range(100):
        (obj,) = scene_from_ast(ast, seed).objects
        assert abs(obj.center[0] - 16) <= 1 and abs(obj.center[1] - 16) <= 1
        assert float(obj.center[0]).is_integer()


def test_two_seeds_differ_only_in_jitter_and_shade():
    ast = parse_prompt("green triangle at top-right moves down")
    base = scene_from_ast(ast, 0)
    for seed in range(1, 100):
        other = scene_from_ast(ast, seed)
        for a, b in zip(base.objects, other.objects):
            assert a.color_rgb == b.color_rgb and a.shape == b.shape
            assert abs(a.center[0] - b.center[0]) <= 2
            assert abs(a.center[1] - b.center[1]) <= 2
        assert 0.85 <= other.background_shade <= 1.0


def test_render_empty_scene_is_background():
    frame = render_frame(SceneSpec([], 1.0))
    assert frame.shape == (32, 32, 3)
    assert (frame == 1.0).all()


def test_render_square_exact_64_pixels():
    frame = render_frame(SceneSpec([SceneObject((1, 0, 0), "square", (16.0, 16.0))], 1.0))
    assert _count(frame, RED) == 64


def test_render_circle_matches_lattice_enumeration():
    frame = render_frame(SceneSpec([SceneObject((1, 0, 0), "circle", (16.0, 16.0))], 1.0))
    brute = sum(1 for y in range(32) for x in range(32) if (x - 16) ** 2 + (y - 16) ** 2 <= 16)
    assert brute == 49
    assert _count(frame, RED) == brute


def test_render_painter_order_occludes():
    a = SceneObject((1, 0, 0), "square", (16.0, 16.0))
    b = SceneObject((0, 0, 1), "square", (16.0, 16.0))
    frame = render_frame(SceneSpec([a, b], 1.0))
    assert _count(frame, BLUE) == 64 and _count(frame, RED) == 0


def test_pixel_range():
    video = simulate(parse_prompt("yellow circle at center grows"), 3)
    assert video.min() >= 0.0 and video.max() <= 1.0


def test_static_prompt_all_frames_identical():
    video = simulate(parse_prompt("red square at top-left"), 11)
    for f in range(1, FRAMES):
        assert video[f].tobytes() == video[0].tobytes()


def test_frame0_equals_reduced_render():
    rng = stream("test-frame0")
    for _ in range(25):
        ast = sample_prompt(rng)
        if not prompt_is_feasible(ast):
            continue
        seed = int(rng.integers(2 ** 31))
        video = simulate(ast, seed)
        frame0 = render_frame(scene_from_ast(reduce_to_first_frame(ast), seed))
        assert video[0].tobytes() == frame0.tobytes()


def test_move_right_centroid_sequence():
    # track the color-matched centroid per frame: x = 6, 8, ..., 20 plus jitter
    ast = parse_prompt("red square at middle-left moves right")
    for seed in range(5):
        video = simulate(ast, seed)
        jx = scene_from_ast(ast, seed).objects[0].center[0] - GRID["left"]
        for f in range(FRAMES):
            xs = np.nonzero(np.all(video[f] == RED, axis=2))[1]
            assert xs.mean() == pytest.approx(6 + 2 * f + jx - 0.5)


def test_turn_switches_color_at_frame_4():
    video = simulate(parse_prompt("blue circle at center turns green"), 9)
    for f in range(FRAMES):
        blue, green = _count(video[f], BLUE), _count(video[f], GREEN)
        if f < 4:
            assert blue > 0 and green == 0
        else:
            assert green > 0 and blue == 0


def test_grow_and_shrink_change_pixel_count():
    grow = simulate(parse_prompt("red square at center grows"), 0)
    assert _count(grow[7], RED) > _count(grow[0], RED)
    shrink = simulate(parse_prompt("red square at center shrinks"), 0)
    assert _count(shrink[7], RED) < _count(shrink[0], RED)


def test_then_script_runs_in_halves():
    video = simulate(parse_prompt("red square at middle-left moves right then moves down"), 2)
    ys0, xs0 = np.nonzero(np.all(video[0] == RED, axis=2))
    ys3, xs3 = np.nonzero(np.all(video[3] == RED, axis=2))
    ys7, xs7 = np.nonzero(np.all(video[7] == RED, axis=2))
    assert xs3.mean() - xs0.mean() == pytest.approx(6)
    assert xs7.mean() == pytest.approx(xs3.mean())       # motion 1 stops after frame 3
    assert ys7.mean() - ys3.mean() == pytest.approx(6)   # motion 2 steps through frames 5..7


def test_motion_ranges_and_turn_switch():
    ast = parse_prompt("red square at center grows then shrinks")
    ranges = motion_ranges(ast.objects[0].motions)
    assert [(a, b) for _, a, b in ranges] == [(0, 3), (4, 7)]
    assert turn_switch_frame(0, 7) == 4
    assert turn_switch_frame(0, 3) == 2
    assert turn_switch_frame(4, 7) == 6


def test_geometry_error_on_out_of_frame_move():
    ast = parse_prompt("red square at middle-left moves left")
    assert not prompt_is_feasible(ast)
    with pytest.raises(GeometryError):
        simulate(ast, 0)


def test_final_state_no_motion_equals_base_scene():
    ast = parse_prompt("red square at top-left")
    assert final_state_scene(ast, 5) == scene_from_ast(reduce_to_first_frame(ast), 5)


def test_final_state_move_lands_at_simulated_centroid():
    ast = parse_prompt("red square at middle-left moves right")
    for seed in range(3):
        scene = final_state_scene(ast, seed)
        video = simulate(ast, seed)
        xs = np.nonzero(np.all(video[7] == RED, axis=2))[1]
        assert scene.objects[0].center[0] == pytest.approx(xs.mean() + 0.5)
        assert scene.objects[0].center[0] == scene_from_ast(ast, seed).objects[0].center[0] + 14


def test_final_state_turn_completes():
    scene = final_state_scene(parse_prompt("blue circle at center turns green"), 1)
    assert scene.objects[0].color_rgb == (0.0, 1.0, 0.0)


def test_collision_free_rejects_overlap():
    ast = parse_prompt("red square at middle-left moves right; blue square at middle-right moves left")
    base = scene_from_ast(ast, 0)
    assert not collision_free(ast, base)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    ds = gen_dataset(24, seed=3, out_dir=out)
    return out, ds


def test_dataset_deterministic(small_dataset, tmp_path):
    out, _ = small_dataset
    gen_dataset(24, seed=3, out_dir=tmp_path)
    for name in ("videos.fvt", "prompts.jsonl", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_dataset_split_disjoint_and_sized(small_dataset):
    _, ds = small_dataset
    train = {r.prompt for r in ds.records if r.split == "train"}
    eval_ = {r.prompt for r in ds.records if r.split == "eval"}
    assert len(eval_) == 64 and not (train & eval_)
    assert len([r for r in ds.records if r.split == "train"]) == 24


def test_dataset_videos_satisfy_simulate_postconditions(small_dataset):
    _, ds = small_dataset
    for r in ds.records[:20]:
        expected = simulate(parse_prompt(r.prompt), r.jitter_seed)
        assert expected.tobytes() == ds.videos[r.id].tobytes()


def test_dataset_loads_back(small_dataset):
    out, ds = small_dataset
    loaded = DatasetIndex.load(out)
    assert loaded.videos.tobytes() == ds.videos.tobytes()
    assert [r.prompt for r in loaded.records] == [r.prompt for r in ds.records]
