"""Full model assembly: towers, cross-modal stack, heads, momentum state."""

from __future__ import annotations

import numpy as np

from .alignment import EmbeddingQueue, MomentumState
from .attention import (
    CrossModalLayerParams,
    cross_modal_encoder,
    cross_modal_encoder_batch,
)
from .config import RunConfig
from .encoders import (
    ContrastiveProjection,
    TextEncoderParams,
    VideoEncoderParams,
    VideoInput,
    embed_text,
    embed_text_batch,
    embed_video,
    embed_video_batch,
    project_contrastive,
    project_tokens,
)
from .objectives import MlmHead, QaHead, VtmHead
from .rng import Rng
from .sequence import TextTokenBatch, TokenSequence, VideoTokenBatch
from .tensor import ContractError, Parameter, Tensor


class EncoderStack:
    """The two single-modal towers plus the contrastive projections."""

    def __init__(self, cfg: RunConfig, rng: Rng):
        self.cfg = cfg
        self.video = VideoEncoderParams.init(
            grid=cfg.grid,
            frames=cfg.frames,
            feature_width=cfg.feature_width,
            d=cfg.d,
            h=cfg.h,
            depth=cfg.l_v,
            rng=rng,
        )
        self.text = TextEncoderParams.init(
            vocab_size=cfg.vocab_size,
            d=cfg.d,
            h=cfg.h,
            depth=cfg.l_x,
            max_len=cfg.max_text_len,
            rng=rng,
        )
        self.proj = ContrastiveProjection.init(cfg.d, cfg.d_c, rng)

    def parameters(self) -> list[Parameter]:
        return (
            self.video.parameters()
            + self.text.parameters()
            + self.proj.parameters()
        )

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def encode_video(self, features: np.ndarray) -> TokenSequence:
        return embed_video(VideoInput(features, grid=self.cfg.grid), self.video)

    def encode_text(self, ids: list[int]) -> TokenSequence:
        return embed_text(ids, self.text)

    def encode_video_batch(self, features: np.ndarray) -> VideoTokenBatch:
        return embed_video_batch(features, self.video)

    def encode_text_batch(self, ids_list: list[list[int]]) -> TextTokenBatch:
        return embed_text_batch(ids_list, self.text)

    def project(self, seq: TokenSequence) -> Tensor:
        return project_contrastive(seq, self.proj)

    def project_batch(self, tokens: Tensor, modality: str) -> Tensor:
        return project_tokens(tokens, modality, self.proj)

    def clone(self) -> "EncoderStack":
        twin = EncoderStack(self.cfg, Rng(0).child("momentum-init"))
        for name, source in self.named_parameters().items():
            twin.named_parameters()[name].data = source.data.copy()
        return twin


class VideoTextModel:
    """Everything a training step touches, with uniquely named parameters."""

    def __init__(self, cfg: RunConfig, seed: int | None = None):
        self.config = cfg
        rng = Rng(cfg.seed if seed is None else seed).child("init")
        self.encoders = EncoderStack(cfg, rng)
        self.cross_layers = [
            CrossModalLayerParams.init(
                f"cross.layer{i}", cfg.d, cfg.h, cfg.variant, rng
            )
            for i in range(cfg.l_cross)
        ]
        self.mlm_head = MlmHead.init(cfg.d, cfg.vocab_size, rng)
        vtm_width = 2 * cfg.d if cfg.concat_vtm else cfg.d
        self.vtm_head = VtmHead.init(vtm_width, rng)
        self.qa_head = QaHead.init(cfg.d, cfg.qa_answers, rng)
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ContractError(f"duplicate parameter names: {dupes}")

    def parameters(self) -> list[Parameter]:
        params = self.encoders.parameters()
        for layer in self.cross_layers:
            params += layer.parameters()
        params += self.mlm_head.parameters()
        params += self.vtm_head.parameters()
        params += self.qa_head.parameters()
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def cross_modal(
        self, video_seq: TokenSequence, text_seq: TokenSequence
    ) -> tuple[TokenSequence, TokenSequence, list]:
        return cross_modal_encoder(video_seq, text_seq, self.cross_layers)

    def cross_modal_batch(
        self, video_batch: VideoTokenBatch, text_batch: TextTokenBatch
    ) -> tuple[VideoTokenBatch, TextTokenBatch, list]:
        return cross_modal_encoder_batch(
            video_batch, text_batch, self.cross_layers
        )

    def new_momentum_state(self) -> MomentumState:
        cfg = self.config
        make_queue = lambda: EmbeddingQueue(  # noqa: E731
            capacity=cfg.queue_cap,
            token_len=cfg.queue_token_cap,
            d_c=cfg.d_c,
            keep_tokens=cfg.use_queue_tokens,
        )
        return MomentumState(
            encoders=self.encoders.clone(),
            m=cfg.momentum,
            video_queue=make_queue(),
            text_queue=make_queue(),
        )
