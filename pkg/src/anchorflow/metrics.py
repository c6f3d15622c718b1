"""Quantitative evaluation probes.

The scene decoder is a brute-force oracle over the closed world: every
(color, shape, cell, jitter) template is scored by channel-centered
normalized cross-correlation and greedily subtracted. Channel centering
makes any gray background invisible to the probe, so clean renders decode
exactly and white/noise frames score near zero. Motion probes track each
prompted object along its predicted trajectory via per-color connected
components, which is exact on ground-truth videos because generation is
collision-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from anchorflow.errors import CountError, DimensionError
from anchorflow.prompts import (
    GROW, MOVE, SHRINK, TURN, ObjectClause, PromptAst, reduce_to_first_frame,
)
from anchorflow.rng import stream
from anchorflow.world import (
    COLOR_RGB, DIRECTION_XY, FRAMES, GRID, HALF_SIZE, SIZE, _shape_mask,
    motion_ranges, object_state, turn_switch_frame,
)

NCC_THRESHOLD = 0.5      # min template correlation to accept an object
COLOR_MASK_RADIUS = 0.35  # RGB distance for object-pixel masks
TRACK_RADIUS = 4.0        # centroid-to-prediction gate for component tracking
MIN_MOVE_PIXELS = 6.0     # displacement needed to credit a move
FEATURE_DIM = 128
CATEGORIES = ("composition", "dynamic_attribute", "motion_binding", "motion_order", "numeracy")

_CELLS = [(row, col) for row in ("top", "middle", "bottom")
          for col in ("left", "center", "right")]
_JITTERS = [(jx, jy) for jx in (-1, 0, 1) for jy in (-1, 0, 1)]


@dataclass
class DecodedObject:
    color: str
    shape: str
    cell: tuple[str, str]
    score: float


@dataclass
class SceneDecodeResult:
    objects: list[DecodedObject]
    residual: float


_TEMPLATES = None


def _template_bank():
    """(masks (T,1024) f32, counts (T,), chat (T,3), labels) for all
    color x shape x cell x jitter combinations."""
    global _TEMPLATES
    if _TEMPLATES is None:
        masks, labels, chats = [], [], []
        for color, rgb in COLOR_RGB.items():
            chat = np.asarray(rgb, dtype=np.float64)
            chat = chat - chat.mean()
            for shape in ("square", "circle", "triangle"):
                for row, col in _CELLS:
                    for jx, jy in _JITTERS:
                        cx, cy = GRID[col] + jx, GRID[row] + jy
                        m = _shape_mask(shape, float(cx), float(cy), HALF_SIZE)
                        masks.append(m.reshape(-1))
                        labels.append((color, shape, (row, col)))
                        chats.append(chat)
        masks = np.asarray(masks, dtype=np.float64)
        counts = masks.sum(axis=1)
        chats = np.asarray(chats)
        _TEMPLATES = (masks, counts, chats, labels)
    return _TEMPLATES


def decode_scene(frame: np.ndarray) -> SceneDecodeResult:
    """Greedy template matching on the channel-centered frame; stops below
    the correlation threshold or at three objects."""
    masks, counts, chats, labels = _template_bank()
    f = np.asarray(frame, dtype=np.float64).reshape(-1, 3)
    f = f - f.mean(axis=1, keepdims=True)
    cnorm = np.linalg.norm(chats, axis=1)
    found = []
    for _ in range(3):
        num = np.einsum("tc,tc->t", masks @ f, chats)
        ssq = masks @ (f * f).sum(axis=1)
        denom = np.sqrt(np.maximum(ssq, 1e-30)) * np.sqrt(counts) * cnorm
        scores = np.where(denom > 1e-12, num / denom, 0.0)
        top = float(scores.max())
        if top < NCC_THRESHOLD:
            break
        # near-ties go to the largest template: a triangle is a perfect
        # subset of the square on the same cell and would otherwise win
        tied = np.nonzero(scores >= top - 1e-9)[0]
        best = int(tied[np.argmax(counts[tied])])
        color, shape, cell = labels[best]
        found.append(DecodedObject(color, shape, cell, float(min(top, 1.0))))
        f = f - masks[best][:, None] * chats[best]
    residual = float(np.sqrt((f * f).sum(axis=1).mean()))
    return SceneDecodeResult(found, residual)


def composition_score(video: np.ndarray, ast: PromptAst) -> float:
    """Fraction of prompted objects whose (color, shape, cell) triple is
    present in the decoded first frame."""
    wanted = [(o.color, o.shape, (o.row, o.col)) for o in reduce_to_first_frame(ast).objects]
    decoded = [(d.color, d.shape, d.cell) for d in decode_scene(video[0]).objects]
    matched = 0
    for triple in wanted:
        if triple in decoded:
            decoded.remove(triple)
            matched += 1
    return matched / len(wanted)


# -------------------------------------------------------- motion tracking

def _color_mask(frame: np.ndarray, rgb) -> np.ndarray:
    d = frame - np.asarray(rgb, dtype=frame.dtype)
    return (d * d).sum(axis=2) <= COLOR_MASK_RADIUS ** 2


def _track(frame: np.ndarray, color: str, predicted: tuple[float, float]):
    """(pixel_count, centroid_xy) of same-color components whose centroid is
    within TRACK_RADIUS of the predicted center; (0, None) if absent."""
    mask = _color_mask(frame, COLOR_RGB[color])
    lab, n = ndimage.label(mask)
    if n == 0:
        return 0, None
    px, py = predicted
    total, sx, sy = 0, 0.0, 0.0
    for comp in range(1, n + 1):
        ys, xs = np.nonzero(lab == comp)
        cx, cy = xs.mean(), ys.mean()
        if (cx - px) ** 2 + (cy - py) ** 2 <= TRACK_RADIUS ** 2:
            total += len(xs)
            sx += xs.sum()
            sy += ys.sum()
    if total == 0:
        return 0, None
    return total, (sx / total, sy / total)


def _predicted_center(clause: ObjectClause, frame: int) -> tuple[float, float]:
    _, dx, dy, _ = object_state(clause, frame)
    return (GRID[clause.col] + dx, GRID[clause.row] + dy)


def _predicted_color(clause: ObjectClause, frame: int) -> str:
    color, _, _, _ = object_state(clause, frame)
    return color


def _motion_matches(video: np.ndarray, clause: ObjectClause, motion, start: int,
                    end: int) -> bool:
    if motion.kind == MOVE:
        n0, c0 = _track(video[start], _predicted_color(clause, start),
                        _predicted_center(clause, start))
        n1, c1 = _track(video[end], _predicted_color(clause, end),
                        _predicted_center(clause, end))
        if n0 == 0 or n1 == 0:
            return False
        disp = np.array([c1[0] - c0[0], c1[1] - c0[1]])
        direction = np.asarray(DIRECTION_XY[motion.arg])
        return float(disp @ direction) > 0 and \
            float(np.linalg.norm(disp)) >= MIN_MOVE_PIXELS - 1e-6
    if motion.kind == TURN:
        pre = _predicted_color(clause, start)
        post = motion.arg
        switch = turn_switch_frame(start, end)
        for f in range(start, end + 1):
            center = _predicted_center(clause, f)
            n_pre, _ = _track(video[f], pre, center)
            n_post, _ = _track(video[f], post, center)
            ok = (n_pre > n_post) if f < switch else (n_post > n_pre)
            if not ok:
                return False
        return True
    if motion.kind in (GROW, SHRINK):
        n0, _ = _track(video[start], _predicted_color(clause, start),
                       _predicted_center(clause, start))
        n1, _ = _track(video[end], _predicted_color(clause, end),
                       _predicted_center(clause, end))
        if n0 == 0 or n1 == 0:
            return False
        return n1 > n0 if motion.kind == GROW else n1 < n0
    raise ValueError(motion.kind)


def motion_scores(video: np.ndarray, ast: PromptAst) -> dict[str, float | None]:
    """Binary per-category scores; None marks a category the prompt does not
    exercise. Categories: dynamic_attribute (turns show the right color in
    the right half of their range), motion_binding (moves displace the right
    object the right way), motion_order (both motions of a 'then' script
    play out in their own halves), numeracy (frame-0 object count)."""
    turn_ok, move_ok, order_ok = [], [], []
    for clause in ast.objects:
        ranges = motion_ranges(clause.motions)
        matches = [_motion_matches(video, clause, m, a, b) for m, a, b in ranges]
        for (m, _, _), ok in zip(ranges, matches):
            if m.kind == TURN:
                turn_ok.append(ok)
            if m.kind == MOVE:
                move_ok.append(ok)
        if len(clause.motions) == 2:
            order_ok.append(all(matches))
    decoded = decode_scene(video[0])
    return {
        "dynamic_attribute": float(all(turn_ok)) if turn_ok else None,
        "motion_binding": float(all(move_ok)) if move_ok else None,
        "motion_order": float(all(order_ok)) if order_ok else None,
        "numeracy": float(len(decoded.objects) == len(ast.objects)),
    }


def score_video(video: np.ndarray, ast: PromptAst) -> dict[str, float | None]:
    scores = {"composition": composition_score(video, ast)}
    scores.update(motion_scores(video, ast))
    return scores


def overall_of(scores: dict[str, float | None]) -> float:
    vals = [v for v in scores.values() if v is not None]
    return float(np.mean(vals))


@dataclass
class ScoreReport:
    per_category: dict[str, float]
    overall: float
    sample_count: int


def aggregate_scores(score_dicts: list[dict[str, float | None]]) -> ScoreReport:
    """Per-category means over the videos where the category applies;
    overall is the unweighted mean of the category means."""
    per_category = {}
    for cat in CATEGORIES:
        vals = [s[cat] for s in score_dicts if s.get(cat) is not None]
        if vals:
            per_category[cat] = float(np.mean(vals))
    overall = float(np.mean(list(per_category.values())))
    return ScoreReport(per_category, overall, len(score_dicts))


# ----------------------------------------------------- feature statistics

_PROJECTIONS: dict = {}


def _projection(dim: int, proj_seed: int) -> np.ndarray:
    key = (dim, proj_seed)
    if key not in _PROJECTIONS:
        rng = stream("featproj", proj_seed)
        _PROJECTIONS[key] = rng.standard_normal((dim, FEATURE_DIM)) / np.sqrt(dim)
    return _PROJECTIONS[key]


def extract_features(items: np.ndarray, proj_seed: int = 42) -> np.ndarray:
    """Fixed Gaussian random projection of flattened frames/videos to
    FEATURE_DIM; reproducible across runs and platforms."""
    arr = np.asarray(items, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[0] < 2:
        raise DimensionError("need at least 2 items to featurize")
    flat = arr.reshape(arr.shape[0], -1)
    return flat @ _projection(flat.shape[1], proj_seed)


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)), square roots by
    symmetric eigendecomposition with negative eigenvalues clamped to 0."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature shapes {a.shape} vs {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise DimensionError("need at least 2 rows per side")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    dim = a.shape[1]
    shrink = 1e-6 * np.eye(dim)
    sig_a = np.cov(a, rowvar=False) + shrink
    sig_b = np.cov(b, rowvar=False) + shrink

    def sqrt_sym(m):
        w, u = np.linalg.eigh((m + m.T) / 2)
        return (u * np.sqrt(np.clip(w, 0.0, None))) @ u.T

    root_a = sqrt_sym(sig_a)
    inner = root_a @ sig_b @ root_a
    w, _ = np.linalg.eigh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(sig_a) + np.trace(sig_b) - 2.0 * tr_sqrt)
    return max(d, 0.0)


def diversity(videos: np.ndarray, proj_seed: int = 42) -> float:
    """Mean pairwise feature distance normalized by sqrt(FEATURE_DIM)."""
    arr = np.asarray(videos)
    if arr.shape[0] < 2:
        raise CountError("need at least 2 videos")
    feats = extract_features(arr, proj_seed)
    n = feats.shape[0]
    total = 0.0
    for i in range(n):
        total += np.sqrt(((feats[i + 1:] - feats[i]) ** 2).sum(axis=1)).sum()
    return float(total / (n * (n - 1) / 2) / np.sqrt(FEATURE_DIM))
