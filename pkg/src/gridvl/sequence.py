"""Token sequences exchanged between encoders and the cross-modal stack."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class TokenSequence:
    """An ordered set of d-wide embeddings with the [CLS] slot at index 0.

    For video, coords maps token index -> (frame, row, col) with None for
    [CLS]; frame_count/patches_per_frame describe the grid so per-frame
    slices can be recovered. For text, ids carries the raw token ids
    ([CLS] included) and key_mask is False at [PAD] positions.
    """

    tokens: Tensor
    modality: str  # "video" | "text"
    coords: list = field(default_factory=list)
    ids: list[int] | None = None
    key_mask: np.ndarray | None = None
    frame_count: int = 0
    patches_per_frame: int = 0

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ContractError(
                f"token sequence needs a non-empty (N, d) tensor, "
                f"got shape {self.tokens.shape}"
            )

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    def cls(self) -> Tensor:
        return self.tokens[0:1]

    def body(self) -> Tensor:
        """All tokens except [CLS]."""
        return self.tokens[1:]

    def frame(self, t: int) -> Tensor:
        """Patch tokens of frame t (video sequences only)."""
        if self.modality != "video":
            raise ContractError("frame() is only defined for video sequences")
        if not 0 <= t < self.frame_count:
            raise ContractError(
                f"frame index {t} out of range [0, {self.frame_count})"
            )
        p = self.patches_per_frame
        return self.tokens[1 + t * p : 1 + (t + 1) * p]

    def replace_tokens(self, tokens: Tensor) -> "TokenSequence":
        if tokens.shape != self.tokens.shape:
            raise ContractError(
                f"replacement shape {tokens.shape} != {self.tokens.shape}"
            )
        return TokenSequence(
            tokens=tokens,
            modality=self.modality,
            coords=self.coords,
            ids=self.ids,
            key_mask=self.key_mask,
            frame_count=self.frame_count,
            patches_per_frame=self.patches_per_frame,
        )


@dataclass
class VideoTokenBatch:
    """Batched video sequences (B, 1 + T*P, d); [CLS] at token index 0."""

    tokens: Tensor
    frame_count: int
    patches_per_frame: int

    def cls(self) -> Tensor:
        return self.tokens[:, 0, :]

    def body(self) -> Tensor:
        return self.tokens[:, 1:, :]

    def frame_block(self, t: int) -> Tensor:
        p = self.patches_per_frame
        return self.tokens[:, 1 + t * p : 1 + (t + 1) * p, :]

    def replace_tokens(self, tokens: Tensor) -> "VideoTokenBatch":
        return VideoTokenBatch(tokens, self.frame_count, self.patches_per_frame)

    def sample(self, i: int, coords: list | None = None) -> TokenSequence:
        return TokenSequence(
            tokens=self.tokens[i],
            modality="video",
            coords=coords or [],
            frame_count=self.frame_count,
            patches_per_frame=self.patches_per_frame,
        )


@dataclass
class TextTokenBatch:
    """Batched text sequences padded to (B, L, d) with a [PAD] key mask."""

    tokens: Tensor
    ids: list[list[int]]  # per sample, [CLS] included, no padding
    key_mask: np.ndarray  # (B, L) bool, False at padding

    @property
    def lengths(self) -> list[int]:
        return [len(i) for i in self.ids]

    def cls(self) -> Tensor:
        return self.tokens[:, 0, :]

    def replace_tokens(self, tokens: Tensor) -> "TextTokenBatch":
        return TextTokenBatch(tokens, self.ids, self.key_mask)

    def reindexed(self, order: list[int]) -> "TextTokenBatch":
        idx = np.asarray(order, dtype=int)
        return TextTokenBatch(
            tokens=self.tokens[idx],
            ids=[self.ids[i] for i in order],
            key_mask=self.key_mask[idx],
        )

    def sample(self, i: int) -> TokenSequence:
        n = len(self.ids[i])
        return TokenSequence(
            tokens=self.tokens[i, 0:n, :],
            modality="text",
            coords=list(range(n)),
            ids=list(self.ids[i]),
            key_mask=self.key_mask[i, 0:n],
        )
