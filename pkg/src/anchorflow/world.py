"""Deterministic scene rendering and motion simulation.

This is both the ground-truth generator (training/eval videos) and the
composition stage of the factorized pipeline (anchor images). Scenes live on
a 32x32 canvas with grid cell centers at {6,16,26}; objects are crisp filled
shapes with no anti-aliasing, so every probe in `metrics` can be exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from anchorflow import formats
from anchorflow.errors import GeometryError
from anchorflow.prompts import (
    GROW, MOVE, SHRINK, TURN, Motion, ObjectClause, PromptAst, parse_prompt,
    prompt_hash_bucket, reduce_to_first_frame, sample_prompt, serialize_prompt,
)
from anchorflow.rng import derive_int, stream

SIZE = 32
FRAMES = 8
HALF_SIZE = 4.0
HALF_MIN, HALF_MAX = 2.0, 8.0
GRID = {"top": 6, "middle": 16, "bottom": 26, "left": 6, "center": 16, "right": 26}
MOVE_STEP = 2.0
GROW_STEP = 0.5

COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
DIRECTION_XY = {"left": (-1.0, 0.0), "right": (1.0, 0.0), "up": (0.0, -1.0), "down": (0.0, 1.0)}

EVAL_BUCKETS = 16
EVAL_SIZE = 64


@dataclass
class SceneObject:
    color_rgb: tuple[float, float, float]
    shape: str
    center: tuple[float, float]  # (x, y) pixels
    half_size: float = HALF_SIZE


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    background_shade: float


def scene_from_ast(ast: PromptAst, jitter_seed: int) -> SceneSpec:
    """Grid-cell centers plus per-object integer jitter in {-1,0,+1} and a
    seeded background shade. Motions are ignored."""
    rng = stream("scene", jitter_seed)
    shade = 0.85 + 0.15 * rng.random()
    objects = []
    for o in ast.objects:
        jx = int(rng.integers(-1, 2))
        jy = int(rng.integers(-1, 2))
        cx = GRID[o.col] + jx
        cy = GRID[o.row] + jy
        objects.append(SceneObject(COLOR_RGB[o.color], o.shape, (float(cx), float(cy))))
    return SceneSpec(objects, shade)


# ------------------------------------------------------------ rasterizer

_YY, _XX = np.meshgrid(np.arange(SIZE), np.arange(SIZE), indexing="ij")


def _shape_mask(shape: str, cx: float, cy: float, h: float) -> np.ndarray:
    if shape == "square":
        return (_XX >= cx - h) & (_XX < cx + h) & (_YY >= cy - h) & (_YY < cy + h)
    if shape == "circle":
        return (_XX - cx) ** 2 + (_YY - cy) ** 2 <= h * h
    if shape == "triangle":
        # upward isoceles filling the box: apex on the top row of the box
        inside_box = (_XX >= cx - h) & (_XX < cx + h) & (_YY >= cy - h) & (_YY < cy + h)
        return inside_box & (np.abs(_XX - cx) <= (_YY - (cy - h)) * 0.5)
    raise ValueError(f"unknown shape {shape!r}")


def render_frame(scene: SceneSpec) -> np.ndarray:
    """Paint objects over the background in list order (later occludes
    earlier). Returns a 32x32x3 float32 frame in [0,1]."""
    frame = np.full((SIZE, SIZE, 3), np.float32(scene.background_shade), dtype=np.float32)
    for obj in scene.objects:
        mask = _shape_mask(obj.shape, obj.center[0], obj.center[1], obj.half_size)
        frame[mask] = np.asarray(obj.color_rgb, dtype=np.float32)
    return frame


# ------------------------------------------------------------- simulation

def motion_ranges(motions: tuple[Motion, ...]) -> list[tuple[Motion, int, int]]:
    """Frame range (inclusive) owned by each motion: a single motion spans
    0..7, a "then" pair splits into 0..3 and 4..7."""
    if len(motions) == 0:
        return []
    if len(motions) == 1:
        return [(motions[0], 0, FRAMES - 1)]
    half = FRAMES // 2
    return [(motions[0], 0, half - 1), (motions[1], half, FRAMES - 1)]


def turn_switch_frame(start: int, end: int) -> int:
    """First frame showing the post-turn color (midpoint of the range)."""
    return start + (end - start + 1) // 2


def object_state(clause: ObjectClause, frame: int) -> tuple[str, float, float, float]:
    """(color_name, dx, dy, half_size) of the clause at the given frame,
    relative to its frame-0 center."""
    color = clause.color
    dx = dy = 0.0
    half = HALF_SIZE
    for motion, start, end in motion_ranges(clause.motions):
        steps = max(0, min(frame, end) - start)  # whole steps taken inside the range
        if motion.kind == MOVE:
            ux, uy = DIRECTION_XY[motion.arg]
            dx += ux * MOVE_STEP * steps
            dy += uy * MOVE_STEP * steps
        elif motion.kind == TURN:
            if frame >= turn_switch_frame(start, end):
                color = motion.arg
        elif motion.kind == GROW:
            half = min(HALF_MAX, half + GROW_STEP * steps)
        elif motion.kind == SHRINK:
            half = max(HALF_MIN, half - GROW_STEP * steps)
    return color, dx, dy, half


def _scene_at_frame(ast: PromptAst, base: SceneSpec, frame: int) -> SceneSpec:
    objects = []
    for clause, obj in zip(ast.objects, base.objects):
        color, dx, dy, half = object_state(clause, frame)
        cx, cy = obj.center[0] + dx, obj.center[1] + dy
        if not (half <= cx < SIZE - half and half <= cy < SIZE - half):
            raise GeometryError(
                f"object at ({cx},{cy}) half_size {half} leaves the frame at frame {frame}")
        objects.append(SceneObject(COLOR_RGB[color], obj.shape, (cx, cy), half))
    return SceneSpec(objects, base.background_shade)


def simulate(ast: PromptAst, jitter_seed: int) -> np.ndarray:
    """Ground-truth video: frame 0 renders the reduced scene, then the
    motion script plays out. Returns (F,32,32,3) float32 in [0,1]."""
    base = scene_from_ast(ast, jitter_seed)
    frames = [render_frame(_scene_at_frame(ast, base, f)) for f in range(FRAMES)]
    return np.stack(frames)


def final_state_scene(ast: PromptAst, jitter_seed: int) -> SceneSpec:
    """Scene after every motion has run to completion (frame F-1 state)."""
    base = scene_from_ast(ast, jitter_seed)
    for f in range(FRAMES):  # surfaces GeometryError anywhere along the path
        last = _scene_at_frame(ast, base, f)
    return last


def prompt_is_feasible(ast: PromptAst) -> bool:
    """True when the script stays in frame for every jitter in {-1,0,+1}^2."""
    for clause in ast.objects:
        bx, by = GRID[clause.col], GRID[clause.row]
        for jx in (-1, 0, 1):
            for jy in (-1, 0, 1):
                for f in range(FRAMES):
                    _, dx, dy, half = object_state(clause, f)
                    cx, cy = bx + jx + dx, by + jy + dy
                    if not (half <= cx < SIZE - half and half <= cy < SIZE - half):
                        return False
    return True


def count_color_components(frame: np.ndarray, colors: set[tuple]) -> int:
    """Connected components summed over the distinct object colors present."""
    total = 0
    for rgb in colors:
        mask = np.all(np.abs(frame - np.asarray(rgb, dtype=np.float32)) < 1e-6, axis=2)
        _, n = ndimage.label(mask)
        total += n
    return total


def collision_free(ast: PromptAst, base: SceneSpec) -> bool:
    """No two object masks may overlap in any frame, and same-color objects
    must stay in separate connected components (no touching edges)."""
    for f in range(FRAMES):
        masks, colors = [], []
        for clause, obj in zip(ast.objects, base.objects):
            color, dx, dy, half = object_state(clause, f)
            masks.append(_shape_mask(obj.shape, obj.center[0] + dx, obj.center[1] + dy, half))
            colors.append(color)
        for i in range(len(masks)):
            for j in range(i + 1, len(masks)):
                if np.any(masks[i] & masks[j]):
                    return False
                if colors[i] == colors[j]:
                    _, n = ndimage.label(masks[i] | masks[j])
                    if n != 2:
                        return False
    return True


# ---------------------------------------------------------------- dataset

@dataclass
class DatasetRecord:
    id: int
    prompt: str
    jitter_seed: int
    split: str


@dataclass
class DatasetIndex:
    records: list[DatasetRecord]
    videos: np.ndarray  # (n, F, 32, 32, 3) float32, aligned with records
    manifest: dict

    def split_indices(self, split: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == split]

    def eval_prompts(self) -> list[str]:
        return [r.prompt for r in self.records if r.split == "eval"]

    @classmethod
    def load(cls, out_dir) -> "DatasetIndex":
        out_dir = Path(out_dir)
        videos = formats.read_fvt(out_dir / "videos.fvt")
        records = []
        with open(out_dir / "prompts.jsonl", "r", encoding="utf-8") as f:
            for line in f:
                d = json.loads(line)
                records.append(DatasetRecord(d["id"], d["prompt"], d["jitter_seed"], d["split"]))
        with open(out_dir / "manifest.json", "r", encoding="utf-8") as f:
            manifest = json.load(f)
        return cls(records, videos, manifest)


def _draw_sample(rng: np.random.Generator, want_eval: bool) -> tuple[str, int, np.ndarray]:
    """Rejection-sample one (prompt, jitter_seed, video) from this stream."""
    while True:
        ast = sample_prompt(rng)
        text = serialize_prompt(ast)
        in_eval = prompt_hash_bucket(text, EVAL_BUCKETS) == 0
        if in_eval != want_eval:
            continue
        if not prompt_is_feasible(ast):
            continue
        jitter_seed = int(rng.integers(0, 2 ** 31))
        if not collision_free(ast, scene_from_ast(ast, jitter_seed)):
            continue
        return text, jitter_seed, simulate(ast, jitter_seed)


def generate_sample(seed: int, split: str, index: int) -> tuple[str, int, np.ndarray]:
    """Worker-independent sample draw: each (split, index) owns a stream."""
    rng = stream("data", split, seed, index)
    return _draw_sample(rng, want_eval=(split == "eval"))


def gen_dataset(n: int, seed: int, out_dir, map_fn=map) -> DatasetIndex:
    """n train samples plus EVAL_SIZE held-out eval samples, split by prompt
    string hash so the prompt sets are disjoint. `map_fn` may be a parallel
    map; output is identical regardless."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)

    train = list(map_fn(_gen_train_sample, [(seed, i) for i in range(n)]))
    # draw extra eval candidates to survive duplicate prompt strings
    candidates = list(map_fn(_gen_eval_sample, [(seed, j) for j in range(2 * EVAL_SIZE)]))
    eval_samples, seen = [], set()
    for text, js, video in candidates:
        if text not in seen:
            seen.add(text)
            eval_samples.append((text, js, video))
        if len(eval_samples) == EVAL_SIZE:
            break
    if len(eval_samples) < EVAL_SIZE:
        raise RuntimeError("could not collect enough distinct eval prompts")

    records, videos = [], []
    for i, (text, js, video) in enumerate(train + eval_samples):
        records.append(DatasetRecord(i, text, js, "train" if i < n else "eval"))
        videos.append(video)
    videos = np.stack(videos)

    formats.write_fvt(out_dir / "videos.fvt", videos)
    with open(out_dir / "prompts.jsonl", "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps({"id": r.id, "prompt": r.prompt,
                                "jitter_seed": r.jitter_seed, "split": r.split}) + "\n")
    manifest = {
        "run_id": format(derive_int("dataset", seed, n), "08x"),
        "seed": seed, "n_train": n, "n_eval": EVAL_SIZE,
        "frames": FRAMES, "size": SIZE,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return DatasetIndex(records, videos, manifest)


def _gen_train_sample(args):
    seed, i = args
    return generate_sample(seed, "train", i)


def _gen_eval_sample(args):
    seed, j = args
    return generate_sample(seed, "eval", j)


def export_ppm_frames(video: np.ndarray, out_dir, prefix: str = "frame") -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for f in range(video.shape[0]):
        p = out_dir / f"{prefix}_{f:03d}.ppm"
        formats.write_ppm(p, video[f])
        paths.append(p)
    return paths


def parse_and_simulate(text: str, jitter_seed: int) -> np.ndarray:
    return simulate(parse_prompt(text), jitter_seed)


def ground_truth_scene(text: str, jitter_seed: int) -> SceneSpec:
    return scene_from_ast(reduce_to_first_frame(parse_prompt(text)), jitter_seed)
