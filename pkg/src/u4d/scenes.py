"""Synthetic multi-view, multi-time scenes with paired captions and QA.

Scenes contain 1-3 colored geometric blobs moving on parametric trajectories,
rendered from V camera poses at F timestamps. The generator also emits the
exact ground truth (poses, object positions, timestamps) that the geometry
pathway consumes, plus language derived from the same geometry so every
caption/answer is checkable against the rendered pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from u4d.errors import ConfigError, ContractError, ShapeError

PAD, BOS, EOS, SEP = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<sep>")

# max() of each color is 1 so blob peak intensity equals the blob amplitude
COLORS = {
    "red": (1.0, 0.18, 0.18),
    "green": (0.18, 1.0, 0.18),
    "blue": (0.3, 0.45, 1.0),
    "yellow": (1.0, 1.0, 0.2),
    "magenta": (1.0, 0.25, 1.0),
    "cyan": (0.25, 1.0, 1.0),
}
SHAPES = ("disc", "square", "diamond")
DIRECTIONS = ("left", "right", "up", "down")
SIDES = ("left", "right", "top", "bottom")
PROMPT_WORDS = (
    "describe", "the", "scene", "what", "color", "is", "which", "way",
    "does", "move", "where", "at", "start", "end", "moves", "stays",
    "still", "a", "yes", "no",
)

# blob amplitudes; object 0 is always the brightest so "brightest blob" is well defined
AMPLITUDES = (1.0, 0.62, 0.45)
BLOB_RADIUS = 1.6  # pixels


class Vocabulary:
    """Bijective word<->id map, ids 0-3 reserved for PAD/BOS/EOS/SEP."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[:4] != list(RESERVED):
            raise ContractError("vocabulary must start with the reserved PAD/BOS/EOS/SEP tokens")
        if len(tokens) != len(set(tokens)):
            raise ContractError("vocabulary tokens must be unique")
        if len(tokens) > 256:
            raise ContractError("vocabulary is limited to 256 tokens")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, text) -> np.ndarray:
        words = text.split() if isinstance(text, str) else list(text)
        try:
            return np.array([self.ids[w] for w in words], dtype=np.int64)
        except KeyError as e:
            raise ContractError(f"word {e.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise ContractError(f"token id {i} out of range")
            out.append(self.tokens[i])
        return " ".join(out)


def build_vocab() -> Vocabulary:
    words = list(RESERVED)
    for group in (PROMPT_WORDS, tuple(COLORS), SHAPES, DIRECTIONS, SIDES):
        for w in group:
            if w not in words:
                words.append(w)
    return Vocabulary(words)


@dataclass
class SceneConfig:
    views: int = 1
    frames: int = 2
    height: int = 16
    width: int = 16
    channels: int = 3
    num_objects: int = 1
    num_scenes: int = 32
    speed: float = 1.0
    n_condition_frames: int = 1

    def validate(self):
        if min(self.views, self.frames, self.height, self.width, self.channels) <= 0:
            raise ConfigError("scene extents must be positive")
        if self.views < 1 or self.frames < 2:
            raise ConfigError(f"need views >= 1 and frames >= 2, got V={self.views} F={self.frames}")
        if self.height < 4 or self.width < 4:
            raise ConfigError(f"degenerate frame size {self.height}x{self.width} (minimum 4x4)")
        if not 1 <= self.num_objects <= 3:
            raise ConfigError("num_objects must be in 1..3")
        if self.channels != 3:
            raise ConfigError("only 3-channel rendering is supported")
        if not 0.0 <= self.speed <= 1.6:
            raise ConfigError("speed must be in [0, 1.6] to keep trajectories on-frame")


@dataclass
class QAPair:
    question: np.ndarray
    answer: np.ndarray
    time_sensitive: bool


@dataclass
class Scene4D:
    frames: np.ndarray        # [V, F, H, W, C] in [0, 1]
    poses: np.ndarray         # [V, 7] unit quaternion (w,x,y,z) + translation
    positions: np.ndarray     # [O, F, 3] object centers in world space
    timestamps: np.ndarray    # [F], strictly increasing in [0, 1]
    caption_tokens: np.ndarray
    qa_pairs: list = field(default_factory=list)

    def validate(self, vocab_size: int):
        q = self.poses[:, :4]
        if np.any(np.abs(np.linalg.norm(q, axis=1) - 1.0) > 1e-9):
            raise ContractError("camera quaternions must be unit norm")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ContractError("timestamps must be strictly increasing")
        ids = [self.caption_tokens] + [t for qa in self.qa_pairs for t in (qa.question, qa.answer)]
        for arr in ids:
            if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
                raise ContractError("token id out of vocabulary range")


# ---------------------------------------------------------------------------
# camera model (orthographic; shared between renderer, oracle tests, geometry)
# ---------------------------------------------------------------------------

def _quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def camera_pose(view: int) -> np.ndarray:
    """Yaw the camera 0.35 rad per view around the vertical axis."""
    theta = 0.35 * view
    q = np.array([np.cos(theta / 2), 0.0, np.sin(theta / 2), 0.0])
    rot = _quat_to_rot(q)
    t = rot @ np.array([0.0, 0.0, -3.0])
    return np.concatenate([q, t])


def project_point(pose: np.ndarray, point: np.ndarray, height: int, width: int):
    """World point -> (row, col) float pixel coordinates for one camera."""
    rot = _quat_to_rot(pose[:4])
    cam = rot.T @ (np.asarray(point, dtype=float) - pose[4:])
    scale = min(height, width) / 2.0 / 1.3
    col = (width - 1) / 2.0 + scale * cam[0]
    row = (height - 1) / 2.0 - scale * cam[1]
    return row, col


def _blob_kernel(shape: str, drow: np.ndarray, dcol: np.ndarray, r: float) -> np.ndarray:
    if shape == "disc":
        d2 = (drow * drow + dcol * dcol) / (r * r)
        return np.clip(1.25 * (1.0 - d2), 0.0, 1.0)
    if shape == "square":
        m = np.maximum(np.abs(drow), np.abs(dcol)) / r
        return np.clip(2.5 * (1.0 - m), 0.0, 1.0)
    if shape == "diamond":
        m = (np.abs(drow) + np.abs(dcol)) / (1.3 * r)
        return np.clip(2.0 * (1.0 - m), 0.0, 1.0)
    raise ConfigError(f"unknown blob shape {shape!r}")


def brightest_blob_centroid(frame: np.ndarray):
    """Intensity-weighted centroid around the peak pixel of one [H,W,C] frame."""
    intensity = frame.max(axis=-1)
    r0, c0 = np.unravel_index(np.argmax(intensity), intensity.shape)
    h, w = intensity.shape
    rad = int(np.ceil(BLOB_RADIUS)) + 1
    rlo, rhi = max(0, r0 - rad), min(h, r0 + rad + 1)
    clo, chi = max(0, c0 - rad), min(w, c0 + rad + 1)
    win = intensity[rlo:rhi, clo:chi]
    rows, cols = np.mgrid[rlo:rhi, clo:chi]
    total = win.sum()
    return float((rows * win).sum() / total), float((cols * win).sum() / total)


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

_CORNERS = ((-0.68, 0.68), (0.68, -0.68))
_DIR_VECS = {
    "left": np.array([-1.0, 0.0, 0.0]),
    "right": np.array([1.0, 0.0, 0.0]),
    "up": np.array([0.0, 1.0, 0.0]),
    "down": np.array([0.0, -1.0, 0.0]),
}


def _side_word(drow: float, dcol: float) -> str:
    if abs(dcol) >= abs(drow):
        return "left" if dcol < 0 else "right"
    return "top" if drow < 0 else "bottom"


def _place_objects(rng, cfg: SceneConfig):
    """Pick colors/shapes/trajectories; retry until projections stay separated and on-frame.

    The primary object is anchored on its motion axis: centered when the
    start/end displacement alone is unambiguous (so the two ends lie on
    opposite sides), off-center otherwise (both ends on the anchor's side).
    """
    color_names = list(COLORS)
    cross_span = 0.12 if cfg.num_objects == 1 else 0.06
    disp = 0.2 * cfg.speed  # primary object's displacement from anchor at t in {0,1}
    for attempt in range(800):
        shrink = 1.0 if attempt < 250 else 0.55  # relax crowded draws deterministically
        colors = list(rng.choice(color_names, size=cfg.num_objects, replace=False))
        shapes = [SHAPES[rng.integers(len(SHAPES))] for _ in range(cfg.num_objects)]
        dirs, anchors, amps = [], [], []
        for o in range(cfg.num_objects):
            if o == 0:
                d0 = "still" if cfg.speed == 0 else DIRECTIONS[rng.integers(len(DIRECTIONS))]
                if d0 == "still":
                    axis = int(rng.integers(2))
                else:
                    axis = 1 if d0 in ("up", "down") else 0
                xy = np.empty(2)
                xy[1 - axis] = rng.uniform(-cross_span, cross_span)
                if d0 != "still" and disp >= 0.13 + cross_span + 0.05:
                    xy[axis] = rng.uniform(-0.04, 0.04)
                else:
                    lo = 0.13 + disp + cross_span + 0.04
                    xy[axis] = rng.choice([-1.0, 1.0]) * rng.uniform(lo, lo + 0.10 * shrink)
                dirs.append(d0)
            else:
                cx, cy = _CORNERS[o - 1]
                xy = np.array([cx, cy]) + rng.uniform(-0.05, 0.05, size=2)
                dirs.append("still" if cfg.speed == 0 else DIRECTIONS[rng.integers(len(DIRECTIONS))])
            anchors.append(np.array([xy[0], xy[1], rng.uniform(-0.15, 0.15)]))
            amps.append(0.2 if o == 0 else 0.14 * shrink)

        def pos(o, t):
            if dirs[o] == "still":
                return anchors[o]
            return anchors[o] + cfg.speed * amps[o] * (2 * t - 1.0) * _DIR_VECS[dirs[o]]

        ok = True
        margin = BLOB_RADIUS + 0.8
        for t in (0.0, 0.5, 1.0):
            pts = [pos(o, t) for o in range(cfg.num_objects)]
            for v in range(cfg.views):
                pose = camera_pose(v)
                proj = [project_point(pose, p, cfg.height, cfg.width) for p in pts]
                for r, c in proj:
                    if not (margin <= r <= cfg.height - 1 - margin and margin <= c <= cfg.width - 1 - margin):
                        ok = False
                for i in range(len(proj)):
                    for j in range(i + 1, len(proj)):
                        d = np.hypot(proj[i][0] - proj[j][0], proj[i][1] - proj[j][1])
                        if d < (5.2 if 0 in (i, j) else 4.7):
                            ok = False
            if not ok:
                break
        # start/end side words must be unambiguous for the primary object
        if ok:
            pose0 = camera_pose(0)
            ctr = ((cfg.height - 1) / 2.0, (cfg.width - 1) / 2.0)
            for t in (0.0, 1.0):
                r, c = project_point(pose0, pos(0, t), cfg.height, cfg.width)
                if abs(abs(r - ctr[0]) - abs(c - ctr[1])) < 0.8:
                    ok = False
        if ok:
            return colors, shapes, dirs, anchors, amps, pos
    raise ConfigError("could not place objects for this scene configuration")


def gen_scene(seed: int, cfg: SceneConfig, vocab: Vocabulary | None = None) -> Scene4D:
    """Deterministic scene as a pure function of (seed, cfg)."""
    cfg.validate()
    vocab = vocab or build_vocab()
    rng = np.random.default_rng(seed)

    colors, shapes, dirs, anchors, amps, pos = _place_objects(rng, cfg)

    f = np.arange(cfg.frames)
    timestamps = (f + rng.uniform(0.15, 0.85, size=cfg.frames)) / cfg.frames
    poses = np.stack([camera_pose(v) for v in range(cfg.views)])
    positions = np.stack([
        np.stack([pos(o, t) for t in timestamps]) for o in range(len(colors))
    ])

    frames = np.zeros((cfg.views, cfg.frames, cfg.height, cfg.width, cfg.channels))
    rows, cols = np.mgrid[0:cfg.height, 0:cfg.width].astype(float)
    for v in range(cfg.views):
        for fi in range(cfg.frames):
            for o, cname in enumerate(colors):
                r, c = project_point(poses[v], positions[o, fi], cfg.height, cfg.width)
                k = _blob_kernel(shapes[o], rows - r, cols - c, BLOB_RADIUS)
                frames[v, fi] += AMPLITUDES[o] * k[:, :, None] * np.array(COLORS[cname])
    np.clip(frames, 0.0, 1.0, out=frames)

    # language is derived from the same geometry the renderer used
    pose0, ctr = poses[0], ((cfg.height - 1) / 2.0, (cfg.width - 1) / 2.0)
    p_start = project_point(pose0, positions[0, 0], cfg.height, cfg.width)
    p_end = project_point(pose0, positions[0, -1], cfg.height, cfg.width)
    motion = dirs[0]
    if motion == "still":
        caption = f"the {colors[0]} {shapes[0]} stays still"
    else:
        caption = f"the {colors[0]} {shapes[0]} moves {motion}"
    qa = [
        QAPair(vocab.encode(f"what color is the {shapes[0]}"), vocab.encode(colors[0]), False),
        QAPair(vocab.encode(f"which way does the {shapes[0]} move"),
               vocab.encode(motion), motion != "still"),
        QAPair(vocab.encode(f"where is the {shapes[0]} at the start"),
               vocab.encode(_side_word(p_start[0] - ctr[0], p_start[1] - ctr[1])), True),
        QAPair(vocab.encode(f"where is the {shapes[0]} at the end"),
               vocab.encode(_side_word(p_end[0] - ctr[0], p_end[1] - ctr[1])), True),
    ]

    scene = Scene4D(frames, poses, positions, timestamps, vocab.encode(caption), qa)
    scene.validate(len(vocab))
    return scene


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class TrainingExample:
    """One model input: a scene plus its linguistic tokens and per-task targets."""

    task: str
    frames: np.ndarray
    poses: np.ndarray
    positions: np.ndarray
    timestamps: np.ndarray
    ling_ids: np.ndarray          # [L] int64
    ar_targets: np.ndarray        # [L] int64, -1 where no AR loss applies
    cond_mask: np.ndarray | None  # [V, F] bool, True = clean condition frame (generation)
    time_sensitive: bool = False


def make_batch(scene: Scene4D, task: str, vocab: Vocabulary, cfg: SceneConfig,
               qa_index: int | None = None) -> TrainingExample:
    """Assemble one training example for the requested task pathway."""
    if task not in ("understanding", "generation"):
        raise ContractError(f"unknown task {task!r}")

    if task == "understanding":
        if qa_index is None:
            prompt = vocab.encode("describe the scene")
            target = scene.caption_tokens
            time_sensitive = False
        else:
            qa = scene.qa_pairs[qa_index]
            prompt, target, time_sensitive = qa.question, qa.answer, qa.time_sensitive
        ling = np.concatenate([[BOS], prompt, [SEP], target, [EOS]]).astype(np.int64)
        targets = np.full(ling.shape, -1, dtype=np.int64)
        sep_at = 1 + len(prompt)
        targets[sep_at:-1] = ling[sep_at + 1:]
        return TrainingExample(task, scene.frames, scene.poses, scene.positions,
                               scene.timestamps, ling, targets, None, time_sensitive)

    v, f = scene.frames.shape[:2]
    if cfg.n_condition_frames >= v * f:
        raise ContractError(
            f"generation needs at least one target frame: "
            f"{cfg.n_condition_frames} condition frames of {v * f} total"
        )
    cond = np.zeros((v, f), dtype=bool)
    flat = cond.reshape(-1)
    flat[:cfg.n_condition_frames] = True
    ling = np.concatenate([[BOS], scene.caption_tokens, [EOS]]).astype(np.int64)
    targets = np.full(ling.shape, -1, dtype=np.int64)
    return TrainingExample(task, scene.frames, scene.poses, scene.positions,
                           scene.timestamps, ling, targets, cond)


# ---------------------------------------------------------------------------
# metrics and export
# ---------------------------------------------------------------------------

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1]-valued frames, capped at 99."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def frame_grid(frames: np.ndarray, upscale: int = 8) -> np.ndarray:
    """Tile [V,F,H,W,C] frames into one uint8 image (views as rows)."""
    v, f, h, w, c = frames.shape
    grid = np.zeros((v * h, f * w, c))
    for vi in range(v):
        for fi in range(f):
            grid[vi * h:(vi + 1) * h, fi * w:(fi + 1) * w] = frames[vi, fi]
    grid = np.clip(grid, 0.0, 1.0)
    grid = np.repeat(np.repeat(grid, upscale, axis=0), upscale, axis=1)
    return (grid * 255.0 + 0.5).astype(np.uint8)


def export_scene(scene: Scene4D, out_dir, stem: str, vocab: Vocabulary):
    """Write a PNG frame grid plus a JSON sidecar for inspection."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png = out_dir / f"{stem}.png"
    Image.fromarray(frame_grid(scene.frames)).save(png)
    sidecar = {
        "poses": scene.poses.tolist(),
        "positions": scene.positions.tolist(),
        "timestamps": scene.timestamps.tolist(),
        "caption": vocab.decode(scene.caption_tokens),
        "qa": [
            {"question": vocab.decode(q.question), "answer": vocab.decode(q.answer),
             "time_sensitive": q.time_sensitive}
            for q in scene.qa_pairs
        ],
    }
    (out_dir / f"{stem}.json").write_text(json.dumps(sidecar, indent=2))
    return png


# ---------------------------------------------------------------------------
# fixed corpora used by the overfit experiments
# ---------------------------------------------------------------------------

def build_scenes(cfg: SceneConfig, seed: int, vocab: Vocabulary) -> list:
    return [gen_scene(seed * 10_000 + i, cfg, vocab) for i in range(cfg.num_scenes)]


def understanding_corpus(scenes, vocab: Vocabulary, cfg: SceneConfig, size: int | None = None):
    """Round-robin caption/QA examples over the scene list."""
    kinds = [None, 0, 1, 2, 3]  # caption plus the four QA kinds
    out = []
    size = size if size is not None else len(scenes)
    for i in range(size):
        scene = scenes[i % len(scenes)]
        out.append(make_batch(scene, "understanding", vocab, cfg, qa_index=kinds[i % len(kinds)]))
    return out


def generation_corpus(scenes, vocab: Vocabulary, cfg: SceneConfig):
    return [make_batch(s, "generation", vocab, cfg) for s in scenes]
