"""Single-modal encoders: divided space-time video encoder and text encoder.

The video encoder projects per-patch features, adds spatial positional
embeddings shared across frames plus temporal embeddings per frame index,
and alternates temporal attention (tokens sharing a grid cell across
frames) with spatial attention (tokens within a frame, [CLS] joining every
frame and averaging its per-frame outputs). The text encoder is a plain
transformer with [PAD] keys masked out of attention. Both produce
TokenSequences with [CLS] at index 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionBlockParams,
    FeedForwardParams,
    MhaParams,
    feed_forward,
    mha,
)
from .rng import Rng
from .sequence import TextTokenBatch, TokenSequence, VideoTokenBatch
from .tensor import (
    ContractError,
    Parameter,
    ShapeError,
    Tensor,
    add,
    broadcast_to,
    concat,
    l2_normalize,
    linear,
    mean_,
    moveaxis,
    reshape,
)

PAD_ID = 0
CLS_ID = 1
MASK_ID = 2
SPECIAL_IDS = (PAD_ID, CLS_ID, MASK_ID)


@dataclass
class VideoInput:
    """Raw per-patch features: (T, P, f) with P = grid * grid."""

    features: np.ndarray
    grid: int

    def __post_init__(self):
        if self.features.ndim != 3:
            raise ContractError(
                f"video features must be (T, P, f), got {self.features.shape}"
            )
        t, p, _ = self.features.shape
        if t < 1 or p < 1:
            raise ContractError("video needs at least one frame and one patch")
        if p != self.grid * self.grid:
            raise ContractError(
                f"patch count {p} does not match grid {self.grid}x{self.grid}"
            )

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def patches(self) -> int:
        return self.features.shape[1]

    @property
    def feature_width(self) -> int:
        return self.features.shape[2]


@dataclass
class VideoEncoderParams:
    grid: int
    frames: int
    feature_width: int
    d: int
    proj_w: Parameter
    proj_b: Parameter
    pos_spatial: Parameter  # (P, d), shared across frames
    pos_temporal: Parameter  # (T, d)
    cls: Parameter  # (1, d)
    blocks: list[dict]  # each: temporal, spatial (AttentionBlockParams share ff)

    @staticmethod
    def init(
        grid: int,
        frames: int,
        feature_width: int,
        d: int,
        h: int,
        depth: int,
        rng: Rng,
        std: float = 0.02,
    ) -> "VideoEncoderParams":
        p = grid * grid
        blocks = []
        for i in range(depth):
            prefix = f"video.block{i}"
            blocks.append(
                {
                    "temporal": MhaParams.init(f"{prefix}.temporal", d, h, rng),
                    "spatial": MhaParams.init(f"{prefix}.spatial", d, h, rng),
                    "ff": FeedForwardParams.init(f"{prefix}.ff", d, rng),
                }
            )
        return VideoEncoderParams(
            grid=grid,
            frames=frames,
            feature_width=feature_width,
            d=d,
            proj_w=Parameter(
                rng.child("video.patch_proj.w").normal((feature_width, d), std=std),
                "video.patch_proj.w",
            ),
            proj_b=Parameter(np.zeros(d), "video.patch_proj.b"),
            pos_spatial=Parameter(
                rng.child("video.pos_spatial").normal((p, d), std=std),
                "video.pos_spatial",
            ),
            pos_temporal=Parameter(
                rng.child("video.pos_temporal").normal((frames, d), std=std),
                "video.pos_temporal",
            ),
            cls=Parameter(
                rng.child("video.cls").normal((1, d), std=std), "video.cls"
            ),
            blocks=blocks,
        )

    def parameters(self) -> list[Parameter]:
        params = [
            self.proj_w,
            self.proj_b,
            self.pos_spatial,
            self.pos_temporal,
            self.cls,
        ]
        for block in self.blocks:
            params += block["temporal"].parameters()
            params += block["spatial"].parameters()
            params += block["ff"].parameters()
        return params


def embed_video(video: VideoInput, p: VideoEncoderParams) -> TokenSequence:
    """Encode a video into [v_cls, patch tokens] with N = T*P + 1."""
    t, n_patches, f = video.features.shape
    if t != p.frames or n_patches != p.grid * p.grid or f != p.feature_width:
        raise ShapeError(
            f"video geometry {video.features.shape} does not match encoder "
            f"(T={p.frames}, P={p.grid * p.grid}, f={p.feature_width})"
        )
    raw = Tensor(video.features, validate=True)
    tokens = linear(raw, p.proj_w, p.proj_b)  # (T, P, d)
    tokens = add(tokens, p.pos_spatial)  # same slice at every frame
    tokens = add(tokens, reshape(p.pos_temporal, (t, 1, p.d)))
    cls = p.cls

    for block in p.blocks:
        # temporal attention: group tokens sharing a grid position
        by_pos = moveaxis(tokens, 0, 1)  # (P, T, d)
        out, _ = mha(by_pos, by_pos, by_pos, block["temporal"])
        tokens = moveaxis(out, 0, 1)  # (T, P, d)

        # spatial attention: [CLS] joins every frame, outputs averaged
        cls_rows = broadcast_to(reshape(cls, (1, 1, p.d)), (t, 1, p.d))
        frames_with_cls = concat([cls_rows, tokens], axis=1)  # (T, 1+P, d)
        out, _ = mha(
            frames_with_cls, frames_with_cls, frames_with_cls, block["spatial"]
        )
        cls = mean_(out[:, 0:1, :], axis=0)  # (1, d)
        tokens = out[:, 1:, :]

        tokens = feed_forward(tokens, block["ff"])
        cls = feed_forward(cls, block["ff"])

    flat = reshape(tokens, (t * n_patches, p.d))
    all_tokens = concat([cls, flat], axis=0)
    coords = [None] + [
        (ft, idx // p.grid, idx % p.grid)
        for ft in range(t)
        for idx in range(n_patches)
    ]
    return TokenSequence(
        tokens=all_tokens,
        modality="video",
        coords=coords,
        frame_count=t,
        patches_per_frame=n_patches,
    )


def embed_video_batch(
    features: np.ndarray, p: VideoEncoderParams
) -> VideoTokenBatch:
    """Batched embed_video over (B, T, P, f); equal to per-sample encoding."""
    if features.ndim != 4:
        raise ShapeError(
            f"batched video features must be (B, T, P, f), got {features.shape}"
        )
    b, t, n_patches, f = features.shape
    if t != p.frames or n_patches != p.grid * p.grid or f != p.feature_width:
        raise ShapeError(
            f"video geometry {features.shape} does not match encoder "
            f"(T={p.frames}, P={p.grid * p.grid}, f={p.feature_width})"
        )
    raw = Tensor(features, validate=True)
    tokens = linear(raw, p.proj_w, p.proj_b)  # (B, T, P, d)
    tokens = add(tokens, p.pos_spatial)
    tokens = add(tokens, reshape(p.pos_temporal, (t, 1, p.d)))
    cls = broadcast_to(reshape(p.cls, (1, 1, p.d)), (b, 1, p.d))

    for block in p.blocks:
        by_pos = moveaxis(tokens, 1, 2)  # (B, P, T, d)
        out, _ = mha(by_pos, by_pos, by_pos, block["temporal"])
        tokens = moveaxis(out, 1, 2)

        cls_rows = broadcast_to(reshape(cls, (b, 1, 1, p.d)), (b, t, 1, p.d))
        frames_with_cls = concat([cls_rows, tokens], axis=2)  # (B, T, 1+P, d)
        out, _ = mha(
            frames_with_cls, frames_with_cls, frames_with_cls, block["spatial"]
        )
        cls = mean_(out[:, :, 0, :], axis=1, keepdims=True)  # (B, 1, d)
        tokens = out[:, :, 1:, :]

        tokens = feed_forward(tokens, block["ff"])
        cls = feed_forward(cls, block["ff"])

    flat = reshape(tokens, (b, t * n_patches, p.d))
    return VideoTokenBatch(
        tokens=concat([cls, flat], axis=1),
        frame_count=t,
        patches_per_frame=n_patches,
    )


@dataclass
class TextEncoderParams:
    vocab_size: int
    d: int
    max_len: int
    table: Parameter  # (vocab, d)
    pos: Parameter  # (max_len, d)
    blocks: list[AttentionBlockParams]

    @staticmethod
    def init(
        vocab_size: int,
        d: int,
        h: int,
        depth: int,
        max_len: int,
        rng: Rng,
        std: float = 0.02,
    ) -> "TextEncoderParams":
        return TextEncoderParams(
            vocab_size=vocab_size,
            d=d,
            max_len=max_len,
            table=Parameter(
                rng.child("text.embed.table").normal((vocab_size, d), std=std),
                "text.embed.table",
            ),
            pos=Parameter(
                rng.child("text.pos").normal((max_len, d), std=std), "text.pos"
            ),
            blocks=[
                AttentionBlockParams.init(f"text.block{i}.attn", d, h, rng)
                for i in range(depth)
            ],
        )

    def parameters(self) -> list[Parameter]:
        params = [self.table, self.pos]
        for block in self.blocks:
            params += block.parameters()
        return params


def embed_text(ids: list[int], p: TextEncoderParams) -> TokenSequence:
    """Encode token ids into [x_cls, word tokens] with N = len(ids) + 1."""
    if len(ids) < 1:
        raise ContractError("text needs at least one token")
    for i in ids:
        if not 0 <= i < p.vocab_size:
            raise ContractError(
                f"unknown token id {i} (vocabulary size {p.vocab_size})"
            )
    full_ids = [CLS_ID] + list(ids)
    n = len(full_ids)
    if n > p.max_len:
        raise ContractError(
            f"sequence length {n} exceeds positional table {p.max_len}"
        )
    key_mask = np.array([i != PAD_ID for i in full_ids], dtype=bool)

    tokens = p.table[np.array(full_ids)]
    tokens = add(tokens, p.pos[0:n])
    for block in p.blocks:
        z, _ = mha(tokens, tokens, tokens, block.attn, key_mask=key_mask)
        tokens = feed_forward(z, block.ff)
    return TokenSequence(
        tokens=tokens,
        modality="text",
        coords=list(range(n)),
        ids=full_ids,
        key_mask=key_mask,
    )


def embed_text_batch(
    ids_list: list[list[int]], p: TextEncoderParams
) -> TextTokenBatch:
    """Batched embed_text; [PAD]-padded to the longest sequence."""
    if len(ids_list) < 1:
        raise ContractError("empty text batch")
    full = [[CLS_ID] + list(ids) for ids in ids_list]
    for ids in full:
        for i in ids:
            if not 0 <= i < p.vocab_size:
                raise ContractError(
                    f"unknown token id {i} (vocabulary size {p.vocab_size})"
                )
    b = len(full)
    n = max(len(ids) for ids in full)
    if n > p.max_len:
        raise ContractError(
            f"sequence length {n} exceeds positional table {p.max_len}"
        )
    padded = np.full((b, n), PAD_ID, dtype=int)
    for row, ids in enumerate(full):
        padded[row, : len(ids)] = ids
    key_mask = padded != PAD_ID

    tokens = p.table[padded]  # (B, L, d)
    tokens = add(tokens, p.pos[0:n])
    for block in p.blocks:
        z, _ = mha(tokens, tokens, tokens, block.attn, key_mask=key_mask)
        tokens = feed_forward(z, block.ff)
    return TextTokenBatch(tokens=tokens, ids=full, key_mask=key_mask)


@dataclass
class ContrastiveProjection:
    d: int
    d_c: int
    video_w: Parameter
    text_w: Parameter

    @staticmethod
    def init(d: int, d_c: int, rng: Rng, std: float = 0.02) -> "ContrastiveProjection":
        return ContrastiveProjection(
            d=d,
            d_c=d_c,
            video_w=Parameter(
                rng.child("proj.video.w").normal((d, d_c), std=std), "proj.video.w"
            ),
            text_w=Parameter(
                rng.child("proj.text.w").normal((d, d_c), std=std), "proj.text.w"
            ),
        )

    def parameters(self) -> list[Parameter]:
        return [self.video_w, self.text_w]


def project_contrastive(seq: TokenSequence, p: ContrastiveProjection) -> Tensor:
    """Project tokens into the shared contrastive space, unit-normalized."""
    if seq.width != p.d:
        raise ShapeError(
            f"projection width mismatch: tokens {seq.tokens.shape} vs d={p.d}"
        )
    return project_tokens(seq.tokens, seq.modality, p)


def project_tokens(
    tokens: Tensor, modality: str, p: ContrastiveProjection
) -> Tensor:
    """Projection + unit norm for raw (..., d) token tensors."""
    w = {"video": p.video_w, "text": p.text_w}.get(modality)
    if w is None:
        raise ContractError(f"unknown modality {modality!r}")
    return l2_normalize(linear(tokens, w))
