import math

import numpy as np
import pytest
import torch

from anchorflow.errors import HashMismatchError, ShapeError
from anchorflow.model import (
    ModelConfig, init_adapters, init_params, save_checkpoint, file_hash,
)
from anchorflow.prompts import pad_tokens, parse_prompt, serialize_prompt, tokenize
from anchorflow.rng import stream
from anchorflow.sampling import (
    SampleConfig, cfg_velocity, load_for_sampling, make_schedule,
    run_factorized_pipeline, sample_anchored, sample_batch, sample_t2v,
)
from anchorflow.world import render_frame, scene_from_ast

TINY = ModelConfig(embed_dim=16, heads=2, blocks=1)


@pytest.fixture(scope="module")
def tiny_params():
    return init_params(TINY, seed=0)


@pytest.fixture(scope="module")
def tiny_adapters():
    return init_adapters(TINY, seed=1)


def test_schedule_n1():
    assert make_schedule(1) == [(1.0, 1.0)]


def test_schedule_n4():
    sched = make_schedule(4)
    assert [t for t, _ in sched] == [1.0, 0.75, 0.5, 0.25]
    assert [d for _, d in sched] == [0.25, 0.25, 0.25, 0.25]


def test_schedule_sums_to_one_exactly():
    for n in (1, 3, 7, 15, 50, 333):
        sched = make_schedule(n)
        assert len(sched) == n
        assert sum(d for _, d in sched) == 1.0
        assert sched[0][0] == 1.0


def test_cfg_velocity_identities():
    rng = stream("cfg", 0)
    vc = rng.standard_normal((4, 4))
    vu = rng.standard_normal((4, 4))
    assert np.array_equal(cfg_velocity(vc, vu, 1.0), vc)
    assert np.array_equal(cfg_velocity(vc, vu, 0.0), vu)
    assert np.allclose(cfg_velocity(vc, np.zeros_like(vc), 2.0), 2 * vc)


def test_cfg_velocity_shape_error():
    with pytest.raises(ShapeError):
        cfg_velocity(np.zeros((2, 2)), np.zeros((2, 3)), 1.0)


def test_constant_field_euler_recovers_data_exactly():
    # with v = data - eps substituted for the network, Euler telescopes to
    # the data endpoint for any step count
    cfg = ModelConfig(embed_dim=16, heads=2, blocks=1, dtype="float64")
    rng = stream("oracle", 0)
    data = rng.random((cfg.frames, 32, 32, 3)) * 2 - 1
    seed = 99
    eps = stream("sample-noise", seed).standard_normal((cfg.frames, 32, 32, 3))
    v_const = torch.tensor(data - eps)[None]
    for n in (1, 15, 50):
        out = sample_batch(None, cfg, [pad_tokens()], [seed], n, 0.0,
                           velocity_fn=lambda z, t: v_const.to(z.dtype))
        expected = np.clip((data + 1) / 2, 0, 1)
        assert np.abs(out[0] - expected).max() < 1e-6


def test_sampling_deterministic(tiny_params):
    toks = tokenize("red square at center")
    cfg = SampleConfig(steps=5, cfg_scale=2.0, mode="t2v", seed=3)
    a = sample_t2v(tiny_params, TINY, toks, cfg)
    b = sample_t2v(tiny_params, TINY, toks, cfg)
    assert a.tobytes() == b.tobytes()
    c = sample_t2v(tiny_params, TINY, toks, SampleConfig(steps=5, seed=4))
    assert a.tobytes() != c.tobytes()


def test_output_range_and_dtype(tiny_params):
    out = sample_t2v(tiny_params, TINY, pad_tokens(), SampleConfig(steps=3, seed=0))
    assert out.dtype == np.float32
    assert out.min() >= 0.0 and out.max() <= 1.0


def _anchor(seed=5):
    ast = parse_prompt("blue circle at center turns green")
    return render_frame(scene_from_ast(ast, seed)), ast


def test_anchored_frame0_is_anchor_bitwise(tiny_params, tiny_adapters):
    anchor, ast = _anchor()
    toks = tokenize(serialize_prompt(ast))
    for steps in (1, 15, 50):
        for seed in (0, 1, 2):
            out = sample_anchored(tiny_params, tiny_adapters, TINY, anchor, toks,
                                  SampleConfig(steps=steps, mode="i2v_text", seed=seed))
            assert out[0].tobytes() == anchor.tobytes()


def test_anchored_step_count_changes_only_later_frames(tiny_params, tiny_adapters):
    anchor, ast = _anchor()
    toks = tokenize(serialize_prompt(ast))
    a = sample_anchored(tiny_params, tiny_adapters, TINY, anchor, toks,
                        SampleConfig(steps=50, mode="i2v_text", seed=7))
    b = sample_anchored(tiny_params, tiny_adapters, TINY, anchor, toks,
                        SampleConfig(steps=15, mode="i2v_text", seed=7))
    assert a[0].tobytes() == b[0].tobytes()
    assert a[1:].tobytes() != b[1:].tobytes()


def test_i2v_vs_i2v_text_differ_only_in_tokens(tiny_params, tiny_adapters):
    # same seed: the two modes are the same computation with different text
    anchor, ast = _anchor()
    toks = tokenize(serialize_prompt(ast))
    a = sample_anchored(tiny_params, tiny_adapters, TINY, anchor, pad_tokens(),
                        SampleConfig(steps=4, mode="i2v", seed=1))
    b = sample_anchored(tiny_params, tiny_adapters, TINY, anchor, toks,
                        SampleConfig(steps=4, mode="i2v_text", seed=1))
    assert a.shape == b.shape
    assert a[0].tobytes() == b[0].tobytes()  # both pinned to the anchor
    assert a.tobytes() != b.tobytes()        # text changes the rest


def test_factorized_pipeline_artifacts(tiny_params, tiny_adapters):
    text = "blue circle at center turns green"
    video, anchor, ast = run_factorized_pipeline(
        tiny_params, tiny_adapters, TINY, text, anchor_seed=2,
        cfg=SampleConfig(steps=4, mode="factorized", seed=0))
    assert serialize_prompt(ast) == text
    assert video[0].tobytes() == anchor.tobytes()
    # anchor shows the pre-transition color: blue pixels present, green absent
    blue = np.all(anchor == np.array([0, 0, 1], dtype=np.float32), axis=2).sum()
    green = np.all(anchor == np.array([0, 1, 0], dtype=np.float32), axis=2).sum()
    assert blue > 0 and green == 0


def test_two_anchor_seeds_same_semantics(tiny_params, tiny_adapters):
    from anchorflow.metrics import decode_scene
    text = "red square at top-left moves right"
    _, anchor_a, _ = run_factorized_pipeline(
        tiny_params, tiny_adapters, TINY, text, 0, SampleConfig(steps=1, seed=0))
    _, anchor_b, _ = run_factorized_pipeline(
        tiny_params, tiny_adapters, TINY, text, 1, SampleConfig(steps=1, seed=0))
    da = [(d.color, d.shape, d.cell) for d in decode_scene(anchor_a).objects]
    db = [(d.color, d.shape, d.cell) for d in decode_scene(anchor_b).objects]
    assert da == db
    assert anchor_a.tobytes() != anchor_b.tobytes()


def test_load_for_sampling_hash_mismatch(tmp_path, tiny_params, tiny_adapters):
    base1 = tmp_path / "b1.fvgc"
    base2 = tmp_path / "b2.fvgc"
    save_checkpoint(base1, TINY, params=tiny_params)
    save_checkpoint(base2, TINY, params=init_params(TINY, seed=9))
    lora = tmp_path / "l.fvgc"
    save_checkpoint(lora, TINY, adapters=tiny_adapters,
                    extra={"base_hash": file_hash(base1)})
    load_for_sampling(base1, lora)  # ok
    with pytest.raises(HashMismatchError):
        load_for_sampling(base2, lora)


def test_sample_config_validation():
    with pytest.raises(ValueError):
        SampleConfig(steps=0)
    with pytest.raises(ValueError):
        SampleConfig(cfg_scale=-1.0)
    with pytest.raises(ValueError):
        SampleConfig(mode="video")
