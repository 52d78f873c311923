"""Synthetic grid videos of moving objects with exactly known trajectories.

Each scene places 1-2 colored shapes on a G x G grid and moves them with a
per-frame velocity; objects bounce off the walls so every start/velocity
combination yields a legal path. A cell's raw feature vector is the
concatenated shape/color one-hot of its occupant (zeros when empty) plus
seeded gaussian noise. Captions are fully determined by the scene:
"{color} {shape} {verb}" per object over a closed vocabulary.

Contrast mode emits minimal pairs: each scene is followed by a twin with
every velocity reversed but identical starts and identical noise (noise is
keyed by the pair id, not the twin), so the captions differ only in the
motion verb and frame 1 is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionRecord
from .rng import Rng
from .tensor import ContractError

COLOR_NAMES = [
    "red", "green", "blue", "yellow", "purple", "orange", "cyan", "magenta",
]
SHAPE_NAMES = [
    "square", "circle", "triangle", "star", "diamond", "cross", "heart", "ring",
]
VERB_BY_VELOCITY = {
    (0, 0): "stays",
    (-1, 0): "moves-up",
    (1, 0): "moves-down",
    (0, -1): "moves-left",
    (0, 1): "moves-right",
    (-1, -1): "moves-up-left",
    (-1, 1): "moves-up-right",
    (1, -1): "moves-down-left",
    (1, 1): "moves-down-right",
}
AXIS_VELOCITIES = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)]
DIAGONAL_VELOCITIES = [(-1, -1), (-1, 1), (1, -1), (1, 1)]

PAD_TOKEN, CLS_TOKEN, MASK_TOKEN = "[PAD]", "[CLS]", "[MASK]"


@dataclass
class Vocabulary:
    """Closed token list; line number in the vocab file is the id."""

    tokens: list[str]
    n_colors: int
    n_shapes: int

    def __post_init__(self):
        self.id_of = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.id_of) != len(self.tokens):
            raise ContractError("vocabulary has duplicate tokens")

    @staticmethod
    def build(n_colors: int, n_shapes: int, allow_diagonal: bool) -> "Vocabulary":
        if n_colors > len(COLOR_NAMES) or n_shapes > len(SHAPE_NAMES):
            raise ContractError(
                f"at most {len(COLOR_NAMES)} colors / {len(SHAPE_NAMES)} shapes"
            )
        verbs = [VERB_BY_VELOCITY[v] for v in AXIS_VELOCITIES]
        if allow_diagonal:
            verbs += [VERB_BY_VELOCITY[v] for v in DIAGONAL_VELOCITIES]
        tokens = (
            [PAD_TOKEN, CLS_TOKEN, MASK_TOKEN]
            + COLOR_NAMES[:n_colors]
            + SHAPE_NAMES[:n_shapes]
            + verbs
        )
        return Vocabulary(tokens, n_colors=n_colors, n_shapes=n_shapes)

    def __len__(self) -> int:
        return len(self.tokens)

    def color_id(self, index: int) -> int:
        return 3 + index

    def shape_id(self, index: int) -> int:
        return 3 + self.n_colors + index

    def verb_id(self, verb: str) -> int:
        return self.id_of[verb]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @staticmethod
    def load(path: str | Path, n_colors: int, n_shapes: int) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        return Vocabulary(tokens, n_colors=n_colors, n_shapes=n_shapes)


@dataclass
class SceneObject:
    shape: int  # palette index
    color: int
    start: tuple[int, int]
    velocity: tuple[int, int]


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    grid: int
    frames: int
    sigma: float
    noise_key: str  # shared by contrast-mode twins
    sample_id: str


@dataclass
class VideoSample:
    features: np.ndarray  # (T, P, f)
    truth: list[list[int]]  # truth[obj][t] = occupied cell index


@dataclass
class CaptionSample:
    token_ids: list[int]
    text: str


@dataclass
class PairSample:
    sample_id: str
    scene: SceneSpec
    video: VideoSample
    caption: CaptionSample


@dataclass
class CorpusConfig:
    n_train: int = 64
    n_val: int = 64
    n_test: int = 64
    seed: int = 7
    grid: int = 4
    frames: int = 4
    sigma: float = 0.1
    n_colors: int = 8
    n_shapes: int = 8
    max_objects: int = 2
    contrast_mode: bool = False
    allow_diagonal: bool = True


@dataclass
class Corpus:
    config: CorpusConfig
    vocab: Vocabulary
    train: list[PairSample] = field(default_factory=list)
    val: list[PairSample] = field(default_factory=list)
    test: list[PairSample] = field(default_factory=list)

    def split(self, name: str) -> list[PairSample]:
        if name not in ("train", "val", "test"):
            raise ContractError(f"unknown split {name!r}")
        return getattr(self, name)


def object_path(
    start: tuple[int, int], velocity: tuple[int, int], grid: int, frames: int
) -> list[tuple[int, int]]:
    """Cell positions over time; velocity components flip at the walls."""
    r, c = start
    dr, dc = velocity
    if not (0 <= r < grid and 0 <= c < grid):
        raise ContractError(f"start {start} outside {grid}x{grid} grid")
    path = [(r, c)]
    for _ in range(frames - 1):
        if not 0 <= r + dr < grid:
            dr = -dr
            if not 0 <= r + dr < grid:  # grid of extent 1: nowhere to go
                dr = 0
        if not 0 <= c + dc < grid:
            dc = -dc
            if not 0 <= c + dc < grid:
                dc = 0
        r, c = r + dr, c + dc
        path.append((r, c))
    return path


def velocity_verb(velocity: tuple[int, int]) -> str:
    if velocity not in VERB_BY_VELOCITY:
        raise ContractError(f"unsupported velocity {velocity}")
    return VERB_BY_VELOCITY[velocity]


def render_caption(scene: SceneSpec, vocab: Vocabulary) -> CaptionSample:
    ids: list[int] = []
    words: list[str] = []
    for obj in scene.objects:
        color = COLOR_NAMES[obj.color]
        shape = SHAPE_NAMES[obj.shape]
        verb = velocity_verb(obj.velocity)
        words += [color, shape, verb]
        ids += [
            vocab.color_id(obj.color),
            vocab.shape_id(obj.shape),
            vocab.verb_id(verb),
        ]
    return CaptionSample(token_ids=ids, text=" ".join(words))


def parse_caption(ids: list[int], vocab: Vocabulary) -> list[tuple[str, str, str]]:
    """Inverse of render_caption: id triples back to (color, shape, verb)."""
    if len(ids) % 3 != 0:
        raise ContractError(f"caption length {len(ids)} is not a triple multiple")
    out = []
    for i in range(0, len(ids), 3):
        color, shape, verb = (vocab.tokens[j] for j in ids[i : i + 3])
        if color not in COLOR_NAMES or shape not in SHAPE_NAMES:
            raise ContractError(f"malformed caption triple at {i}: {ids[i:i+3]}")
        out.append((color, shape, verb))
    return out


def render_video(scene: SceneSpec, cfg: CorpusConfig) -> VideoSample:
    """Features: occupant one-hots plus noise keyed by (seed, noise_key).

    Feature layout: [0, n_shapes) shape one-hot, then [n_shapes,
    n_shapes + n_colors) color one-hot; width = n_shapes + n_colors.
    """
    g, t = scene.grid, scene.frames
    f = cfg.n_shapes + cfg.n_colors
    features = np.zeros((t, g * g, f))
    truth: list[list[int]] = []
    for obj in scene.objects:
        path = object_path(obj.start, obj.velocity, g, t)
        cells = [r * g + c for r, c in path]
        truth.append(cells)
        for frame, cell in enumerate(cells):
            features[frame, cell, obj.shape] = 1.0
            features[frame, cell, cfg.n_shapes + obj.color] = 1.0
    if scene.sigma > 0:
        noise_rng = Rng(cfg.seed).child("noise", scene.noise_key)
        features = features + noise_rng.normal(features.shape, std=scene.sigma)
    return VideoSample(features=features, truth=truth)


def trajectory_mask(sample: PairSample, t: int) -> set[int]:
    """Cells occupied by any object at frame t."""
    frames = sample.scene.frames
    if not 0 <= t < frames:
        raise ContractError(f"frame {t} out of range [0, {frames})")
    return {cells[t] for cells in sample.video.truth}


def attention_trajectory_score(
    records: list[AttentionRecord], sample: PairSample, word_index: int
) -> float:
    """Mean over frames of head-averaged attention mass on the truth cells.

    records are the step-1 per-frame attention records of one cross-modal
    layer (weights (h, n_words, P)); word_index selects the query row.
    """
    frames = sample.scene.frames
    if len(records) != frames:
        raise ContractError(
            f"expected {frames} per-frame records, got {len(records)}"
        )
    total = 0.0
    for t, rec in enumerate(records):
        cells = sorted(trajectory_mask(sample, t))
        row = rec.weights[:, word_index, :]  # (h, P)
        total += float(row[:, cells].sum(axis=-1).mean())
    return total / frames


def _draw_object(
    rng: Rng, cfg: CorpusConfig, need_reversible: bool
) -> SceneObject:
    velocities = list(AXIS_VELOCITIES)
    if cfg.allow_diagonal:
        velocities += DIAGONAL_VELOCITIES
    if need_reversible:
        velocities = [v for v in velocities if v != (0, 0)]
    for _ in range(1000):
        v = velocities[rng.integers(0, len(velocities))]
        start = (rng.integers(0, cfg.grid), rng.integers(0, cfg.grid))
        if need_reversible:
            fwd = object_path(start, v, cfg.grid, cfg.frames)
            rev = object_path(start, (-v[0], -v[1]), cfg.grid, cfg.frames)
            if fwd == rev:
                continue
        return SceneObject(
            shape=rng.integers(0, cfg.n_shapes),
            color=rng.integers(0, cfg.n_colors),
            start=start,
            velocity=v,
        )
    raise ContractError("could not place a reversible object; grid too small")


def _paths_collide(objects: list[SceneObject], cfg: CorpusConfig) -> bool:
    seen: set[tuple[int, int, int]] = set()
    for obj in objects:
        for t, (r, c) in enumerate(
            object_path(obj.start, obj.velocity, cfg.grid, cfg.frames)
        ):
            key = (t, r, c)
            if key in seen:
                return True
            seen.add(key)
    return False


def _descriptor(scene_objects: list[SceneObject]) -> tuple:
    return tuple(
        (o.shape, o.color, o.start, o.velocity) for o in scene_objects
    )


def _caption_key(scene_objects: list[SceneObject]) -> tuple:
    return tuple((o.shape, o.color, o.velocity) for o in scene_objects)


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Build disjoint train/val/test splits, deterministic under cfg.seed."""
    vocab = Vocabulary.build(cfg.n_colors, cfg.n_shapes, cfg.allow_diagonal)
    corpus = Corpus(config=cfg, vocab=vocab)
    seen_scenes: set[tuple] = set()
    seen_captions: dict[str, set] = {}

    n_verbs = len(AXIS_VELOCITIES) + (
        len(DIAGONAL_VELOCITIES) if cfg.allow_diagonal else 0
    )
    if cfg.contrast_mode:
        n_verbs -= 1  # the motionless verb has no reversed twin
    single_object_captions = cfg.n_colors * cfg.n_shapes * n_verbs
    largest_split = max(cfg.n_train, cfg.n_val, cfg.n_test)
    if cfg.max_objects == 1 and single_object_captions < largest_split:
        raise ContractError(
            f"vocabulary supports {single_object_captions} distinct "
            f"single-object captions but a split of {largest_split} was "
            f"requested; enlarge the palettes or shrink the splits"
        )

    for split_name, size in (
        ("train", cfg.n_train),
        ("val", cfg.n_val),
        ("test", cfg.n_test),
    ):
        if cfg.contrast_mode and size % 2 != 0:
            raise ContractError(
                f"contrast mode needs an even split size, got {size} for "
                f"{split_name}"
            )
        seen_captions[split_name] = set()
        samples: list[PairSample] = []
        slot = 0
        while len(samples) < size:
            rng = Rng(cfg.seed).child("scene", split_name, slot)
            slot += 1
            n_objects = 1 if cfg.max_objects == 1 else rng.integers(1, 3)
            scenes = _draw_scene_group(
                rng, cfg, n_objects, split_name, len(samples)
            )
            if scenes is None:
                continue
            keys = [_descriptor(s.objects) for s in scenes]
            cap_keys = [_caption_key(s.objects) for s in scenes]
            if any(k in seen_scenes for k in keys):
                continue
            if any(ck in seen_captions[split_name] for ck in cap_keys):
                continue
            if len(set(cap_keys)) != len(cap_keys):
                continue
            for scene in scenes:
                seen_scenes.add(_descriptor(scene.objects))
                seen_captions[split_name].add(_caption_key(scene.objects))
                samples.append(
                    PairSample(
                        sample_id=scene.sample_id,
                        scene=scene,
                        video=render_video(scene, cfg),
                        caption=render_caption(scene, vocab),
                    )
                )
            if slot > 200 * size:
                raise ContractError(
                    f"cannot fill split {split_name!r}: geometry/vocabulary "
                    f"too small for {size} distinct scenes"
                )
        corpus.split(split_name).extend(samples[:size])
    return corpus


def _draw_scene_group(
    rng: Rng, cfg: CorpusConfig, n_objects: int, split: str, index: int
) -> list[SceneSpec] | None:
    """One scene, or a (scene, reversed twin) pair in contrast mode."""
    for attempt in range(50):
        objects = [
            _draw_object(rng.child("try", attempt, "obj", k), cfg, cfg.contrast_mode)
            for k in range(n_objects)
        ]
        if len({(o.shape, o.color) for o in objects}) != len(objects):
            continue
        if _paths_collide(objects, cfg):
            continue
        noise_key = f"{split}-{index}"
        base = SceneSpec(
            objects=objects,
            grid=cfg.grid,
            frames=cfg.frames,
            sigma=cfg.sigma,
            noise_key=noise_key,
            sample_id=f"{split}-{index}",
        )
        if not cfg.contrast_mode:
            return [base]
        reversed_objects = [
            SceneObject(
                shape=o.shape,
                color=o.color,
                start=o.start,
                velocity=(-o.velocity[0], -o.velocity[1]),
            )
            for o in objects
        ]
        if _paths_collide(reversed_objects, cfg):
            continue
        twin = SceneSpec(
            objects=reversed_objects,
            grid=cfg.grid,
            frames=cfg.frames,
            sigma=cfg.sigma,
            noise_key=noise_key,
            sample_id=f"{split}-{index + 1}",
        )
        return [base, twin]
    return None


# -- JSON-lines corpus export -------------------------------------------


def dump_split(samples: list[PairSample], path: str | Path) -> None:
    """One self-describing JSON record per line; byte-stable across runs."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            record = {
                "sample_id": s.sample_id,
                "grid": s.scene.grid,
                "frames": s.scene.frames,
                "sigma": s.scene.sigma,
                "noise_key": s.scene.noise_key,
                "objects": [
                    {
                        "shape": SHAPE_NAMES[o.shape],
                        "shape_index": o.shape,
                        "color": COLOR_NAMES[o.color],
                        "color_index": o.color,
                        "start": list(o.start),
                        "velocity": list(o.velocity),
                    }
                    for o in s.scene.objects
                ],
                "caption": s.caption.text,
                "caption_ids": s.caption.token_ids,
                "truth_cells": s.video.truth,
                "feature_width": s.video.features.shape[-1],
                "features": s.video.features.reshape(-1).tolist(),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_split(path: str | Path) -> list[PairSample]:
    samples: list[PairSample] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            scene = SceneSpec(
                objects=[
                    SceneObject(
                        shape=o["shape_index"],
                        color=o["color_index"],
                        start=tuple(o["start"]),
                        velocity=tuple(o["velocity"]),
                    )
                    for o in rec["objects"]
                ],
                grid=rec["grid"],
                frames=rec["frames"],
                sigma=rec["sigma"],
                noise_key=rec["noise_key"],
                sample_id=rec["sample_id"],
            )
            t, p, f = rec["frames"], rec["grid"] ** 2, rec["feature_width"]
            video = VideoSample(
                features=np.array(rec["features"]).reshape(t, p, f),
                truth=[list(cells) for cells in rec["truth_cells"]],
            )
            caption = CaptionSample(
                token_ids=list(rec["caption_ids"]), text=rec["caption"]
            )
            samples.append(
                PairSample(
                    sample_id=rec["sample_id"],
                    scene=scene,
                    video=video,
                    caption=caption,
                )
            )
    return samples
