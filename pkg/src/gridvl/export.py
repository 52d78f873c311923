"""Attention heatmap export: structured text plus per-frame graymaps.

For one sample and one query word the trajectory attention of a chosen
cross-modal layer is written out as (a) a lossless structured text file
holding every head's step-1 grids and step-2 frame weights, and (b) one
P2 portable graymap per frame of the head-averaged step-1 grid scaled to
[0, 255].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .attention import AttentionRecord
from .data import PairSample
from .tensor import ContractError, no_grad

EXPORT_HEADER = "attention-export v1"


def trajectory_records(
    model, sample: PairSample, layer: int
) -> tuple[list[AttentionRecord], AttentionRecord]:
    """Step-1 records (one per frame) and the step-2 record of one layer."""
    if model.config.variant != "t2w":
        raise ContractError(
            "attention export requires the trajectory text side "
            f"(variant 't2w'), got {model.config.variant!r}"
        )
    if not 0 <= layer < model.config.l_cross:
        raise ContractError(
            f"layer {layer} out of range [0, {model.config.l_cross})"
        )
    with no_grad():
        video_seq = model.encoders.encode_video(sample.video.features)
        text_seq = model.encoders.encode_text(sample.caption.token_ids)
        _, _, records = model.cross_modal(video_seq, text_seq)
    prefix = f"layer{layer}.t2w"
    step1 = [r for r in records if r.label.startswith(f"{prefix}.step1.frame")]
    step2 = [r for r in records if r.label == f"{prefix}.step2"]
    if len(step1) != sample.scene.frames or len(step2) != 1:
        raise ContractError(f"missing trajectory records for layer {layer}")
    return step1, step2[0]


def export_attention(
    model,
    sample: PairSample,
    word_index: int,
    out_dir: str | Path,
    layer: int = 0,
) -> list[Path]:
    """Write the export files; returns the created paths."""
    n_words = len(sample.caption.token_ids) + 1  # [CLS] at 0
    if not 0 <= word_index < n_words:
        raise ContractError(
            f"word index {word_index} out of range [0, {n_words}) "
            f"([CLS] plus {n_words - 1} caption tokens)"
        )
    step1, step2 = trajectory_records(model, sample, layer)
    grid = sample.scene.grid
    frames = sample.scene.frames
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"sample_{sample.sample_id}_word{word_index}_layer{layer}"
    written: list[Path] = []

    text_path = out / f"{stem}.txt"
    with open(text_path, "w", encoding="utf-8") as fh:
        fh.write(f"# {EXPORT_HEADER}\n")
        fh.write(f"sample {sample.sample_id}\n")
        fh.write(f"word_index {word_index}\n")
        fh.write(f"layer {layer}\n")
        fh.write(f"caption {sample.caption.text}\n")
        for t, rec in enumerate(step1):
            _write_tensor(
                fh, f"step1_frame{t}", rec.weights[:, word_index, :].reshape(
                    rec.heads, grid, grid
                )
            )
        _write_tensor(
            fh, "step2", step2.weights[:, word_index, :].reshape(
                step2.heads, frames
            )
        )
    written.append(text_path)

    for t, rec in enumerate(step1):
        grid_mean = rec.weights[:, word_index, :].mean(axis=0).reshape(grid, grid)
        pgm_path = out / f"{stem}_frame{t}.pgm"
        _write_pgm(pgm_path, grid_mean)
        written.append(pgm_path)
    return written


def _write_tensor(fh, name: str, values: np.ndarray) -> None:
    dims = " ".join(str(d) for d in values.shape)
    fh.write(f"tensor {name} {values.ndim} {dims}\n")
    fh.write(" ".join(f"{v:.17g}" for v in values.reshape(-1)) + "\n")


def _write_pgm(path: Path, grid: np.ndarray) -> None:
    """P2 graymap, linearly scaled so the frame maximum maps to 255."""
    top = float(grid.max())
    scaled = np.zeros_like(grid, dtype=int) if top <= 0 else np.rint(
        grid / top * 255
    ).astype(int)
    lines = [
        "P2",
        f"{grid.shape[1]} {grid.shape[0]}",
        "255",
    ] + [" ".join(str(v) for v in row) for row in scaled]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def word_truth_attention(model, sample: PairSample, word_index: int, layer: int) -> float:
    """Attention mass a query word puts on the object's true cells.

    For the trajectory side this is the per-frame mean of step-1 mass on
    the frame's truth cells (uniform attention scores 1/P). For the
    baseline p2w side the single distribution over all T*P patches is
    summed over every (frame, truth-cell) pair, which scores 1/P under
    uniform attention as well, so the two variants share a baseline.
    """
    from .data import attention_trajectory_score, trajectory_mask

    if model.config.variant == "t2w":
        step1, _ = trajectory_records(model, sample, layer)
        return attention_trajectory_score(step1, sample, word_index)
    with no_grad():
        video_seq = model.encoders.encode_video(sample.video.features)
        text_seq = model.encoders.encode_text(sample.caption.token_ids)
        _, _, records = model.cross_modal(video_seq, text_seq)
    rec = next(r for r in records if r.label == f"layer{layer}.p2w")
    p = sample.scene.grid ** 2
    row = rec.weights[:, word_index, :]  # (h, T*P)
    total = 0.0
    for t in range(sample.scene.frames):
        cells = sorted(trajectory_mask(sample, t))
        total += float(row[:, [t * p + c for c in cells]].sum(axis=-1).mean())
    return total


def mean_word_truth_attention(
    model, samples: list[PairSample], word_index: int = 2, layer: int = 0
) -> float:
    """Average word_truth_attention over samples (default: the shape word)."""
    scores = [
        word_truth_attention(model, s, word_index, layer) for s in samples
    ]
    return float(np.mean(scores))


def read_attention_export(path: str | Path) -> dict[str, np.ndarray]:
    """Parse the structured text file back into name -> array."""
    tensors: dict[str, np.ndarray] = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("tensor "):
            parts = line.split()
            name, ndim = parts[1], int(parts[2])
            shape = tuple(int(x) for x in parts[3 : 3 + ndim])
            values = np.array([float(x) for x in lines[i + 1].split()])
            tensors[name] = values.reshape(shape)
            i += 2
        else:
            i += 1
    if not tensors:
        raise ContractError(f"no tensors found in {path}")
    return tensors
