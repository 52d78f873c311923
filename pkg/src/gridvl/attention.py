"""Multi-head attention and the cross-modal attention forms.

Three cross-attention routes are built on one MHA primitive:

* w2p  - video patches query the words (both variants use it),
* p2w  - words query all flattened video patches (baseline text side),
* t2w  - two chained attentions: each word first extracts one salient
         embedding per frame (shared step-1 parameters across frames and
         words), then attends over its own per-frame trajectory.

A cross-modal layer updates both streams in parallel from the same layer
inputs, each side finishing with a feed-forward block. Every attention
call emits an AttentionRecord holding the per-head weight matrices for
later heatmap export and trajectory scoring.

Scaling note: logits are scaled by sqrt(d_h) per head, the standard
per-head convention, not sqrt(d).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng
from .sequence import TokenSequence
from .tensor import (
    ContractError,
    Parameter,
    ShapeError,
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    linear,
    masked_fill,
    matmul,
    moveaxis,
    reshape,
    softmax,
    swap_last2,
)


@dataclass
class AttentionRecord:
    """Per-head attention weights of one attention application.

    weights has shape (h, n_q, n_k); every row of every head sums to 1.
    Index maps translate matrix axes back to token/patch/frame coordinates.
    """

    weights: np.ndarray
    label: str
    query_index_map: list = field(default_factory=list)
    key_index_map: list = field(default_factory=list)

    @property
    def heads(self) -> int:
        return self.weights.shape[0]

    def head_mean(self) -> np.ndarray:
        return self.weights.mean(axis=0)

    def row_sum_error(self) -> float:
        return float(np.abs(self.weights.sum(axis=-1) - 1.0).max())


@dataclass
class MhaParams:
    """Projections and output norm of one multi-head attention block."""

    h: int
    d: int
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wh: Parameter
    ln_gain: Parameter
    ln_bias: Parameter

    @property
    def d_h(self) -> int:
        return self.d // self.h

    @staticmethod
    def init(prefix: str, d: int, h: int, rng: Rng, std: float = 0.02) -> "MhaParams":
        if d % h != 0:
            raise ContractError(f"model width {d} not divisible by heads {h}")

        def w(name: str) -> Parameter:
            return Parameter(
                rng.child(f"{prefix}.{name}").normal((d, d), std=std),
                f"{prefix}.{name}",
            )

        return MhaParams(
            h=h,
            d=d,
            wq=w("Wq"),
            wk=w("Wk"),
            wv=w("Wv"),
            wh=w("Wh"),
            ln_gain=Parameter(np.ones(d), f"{prefix}.ln_gain"),
            ln_bias=Parameter(np.zeros(d), f"{prefix}.ln_bias"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wh, self.ln_gain, self.ln_bias]


@dataclass
class FeedForwardParams:
    """Two-layer MLP (hidden 4d, GELU) with residual + layer norm."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter
    ln_gain: Parameter
    ln_bias: Parameter

    @staticmethod
    def init(prefix: str, d: int, rng: Rng, std: float = 0.02) -> "FeedForwardParams":
        hidden = 4 * d
        return FeedForwardParams(
            w1=Parameter(
                rng.child(f"{prefix}.w1").normal((d, hidden), std=std),
                f"{prefix}.w1",
            ),
            b1=Parameter(np.zeros(hidden), f"{prefix}.b1"),
            w2=Parameter(
                rng.child(f"{prefix}.w2").normal((hidden, d), std=std),
                f"{prefix}.w2",
            ),
            b2=Parameter(np.zeros(d), f"{prefix}.b2"),
            ln_gain=Parameter(np.ones(d), f"{prefix}.ln_gain"),
            ln_bias=Parameter(np.zeros(d), f"{prefix}.ln_bias"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2, self.ln_gain, self.ln_bias]


def feed_forward(x: Tensor, p: FeedForwardParams) -> Tensor:
    inner = linear(gelu(linear(x, p.w1, p.b1)), p.w2, p.b2)
    return layer_norm(add(x, inner), p.ln_gain, p.ln_bias)


def _split_heads(x: Tensor, h: int) -> Tensor:
    """(..., n, d) -> (..., h, n, d_h)."""
    n, d = x.shape[-2], x.shape[-1]
    split = reshape(x, x.shape[:-1] + (h, d // h))
    return moveaxis(split, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    """(..., h, n, d_h) -> (..., n, d)."""
    merged = moveaxis(x, -3, -2)
    h, d_h = merged.shape[-2], merged.shape[-1]
    return reshape(merged, merged.shape[:-2] + (h * d_h,))


def mha(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    p: MhaParams,
    key_mask: np.ndarray | None = None,
    label: str = "mha",
    query_index_map: list | None = None,
    key_index_map: list | None = None,
) -> tuple[Tensor, AttentionRecord]:
    """Multi-head attention with residual + layer norm on the query stream.

    Accepts (n, d) operands or batched (..., n, d) operands with matching
    leading axes. key_mask (broadcastable to (..., n_k), True = attend)
    removes keys before the softmax. The output shape equals the query
    shape; the record carries the per-head attention weights.
    """
    if q.shape[-1] != p.d or k.shape[-1] != p.d or v.shape[-1] != p.d:
        raise ShapeError(
            f"attention width mismatch: q {q.shape}, k {k.shape}, v {v.shape}"
            f" vs d={p.d}"
        )
    if k.shape[-2] < 1:
        raise ContractError("attention needs at least one key")
    if k.shape != v.shape:
        raise ShapeError(f"key/value shapes differ: {k.shape} vs {v.shape}")

    qh = _split_heads(matmul(q, p.wq), p.h)  # (..., h, n_q, d_h)
    kh = _split_heads(matmul(k, p.wk), p.h)
    vh = _split_heads(matmul(v, p.wv), p.h)

    logits = matmul(qh, swap_last2(kh)) * (1.0 / math.sqrt(p.d_h))
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)
        logits = masked_fill(logits, mask.reshape(mask.shape[:-1] + (1, 1) + mask.shape[-1:])
                             if mask.ndim == q.ndim - 1 else mask)
    weights = softmax(logits, axis=-1)  # (..., h, n_q, n_k)
    heads = matmul(weights, vh)
    fused = matmul(_merge_heads(heads), p.wh)
    z = layer_norm(add(fused, q), p.ln_gain, p.ln_bias)

    rec_weights = weights.data
    if rec_weights.ndim > 3:
        # batched call: fold leading axes into the query axis per head
        lead = int(np.prod(rec_weights.shape[:-3]))
        h, n_q, n_k = rec_weights.shape[-3:]
        rec_weights = (
            rec_weights.reshape(lead, h, n_q, n_k)
            .transpose(1, 0, 2, 3)
            .reshape(h, lead * n_q, n_k)
        )
    record = AttentionRecord(
        weights=rec_weights.copy(),
        label=label,
        query_index_map=query_index_map or [],
        key_index_map=key_index_map or [],
    )
    return z, record


@dataclass
class AttentionBlockParams:
    """One attention plus its feed-forward half (norms included)."""

    attn: MhaParams
    ff: FeedForwardParams

    @staticmethod
    def init(prefix: str, d: int, h: int, rng: Rng) -> "AttentionBlockParams":
        return AttentionBlockParams(
            attn=MhaParams.init(prefix, d, h, rng),
            ff=FeedForwardParams.init(f"{prefix}_ff", d, rng),
        )

    def parameters(self) -> list[Parameter]:
        return self.attn.parameters() + self.ff.parameters()


def w2p(
    video: TokenSequence,
    text: TokenSequence,
    p: AttentionBlockParams,
    label: str = "w2p",
) -> tuple[TokenSequence, AttentionRecord]:
    """Video tokens (v_cls included) query the words, then feed-forward."""
    z, rec = mha(
        video.tokens,
        text.tokens,
        text.tokens,
        p.attn,
        key_mask=text.key_mask,
        label=label,
        query_index_map=list(video.coords),
        key_index_map=list(text.coords),
    )
    return video.replace_tokens(feed_forward(z, p.ff)), rec


def p2w(
    text: TokenSequence,
    video: TokenSequence,
    p: AttentionBlockParams,
    label: str = "p2w",
) -> tuple[TokenSequence, AttentionRecord]:
    """Words query all patches of all frames flattened (baseline side)."""
    patches = video.body()  # (T*P, d), v_cls excluded
    z, rec = mha(
        text.tokens,
        patches,
        patches,
        p.attn,
        label=label,
        query_index_map=list(text.coords),
        key_index_map=list(video.coords[1:]),
    )
    return text.replace_tokens(feed_forward(z, p.ff)), rec


def t2w_trajectory(
    words: Tensor,
    frames: list[Tensor],
    p_step1: MhaParams,
    label_prefix: str = "t2w.step1",
    word_index_map: list | None = None,
) -> tuple[Tensor, list[AttentionRecord]]:
    """Per-frame salient-part extraction: one trajectory row per word.

    words is (n, d); each frame is (P, d). Step-1 parameters are shared
    across frames and words. Returns the trajectory tensor (n, T, d) and
    one record per frame with weights (h, n, P).
    """
    if len(frames) < 1:
        raise ContractError("t2w needs at least one frame")
    if words.ndim != 2:
        raise ShapeError(f"words must be (n, d), got {words.shape}")
    records = []
    per_frame = []
    for t, frame in enumerate(frames):
        if frame.ndim != 2 or frame.shape[0] < 1:
            raise ContractError(
                f"frame {t} must be a non-empty (P, d) tensor, got {frame.shape}"
            )
        y_t, rec = mha(
            words,
            frame,
            frame,
            p_step1,
            label=f"{label_prefix}.frame{t}",
            query_index_map=word_index_map or [],
        )
        rec.key_index_map = [(t, i) for i in range(frame.shape[0])]
        records.append(rec)
        per_frame.append(reshape(y_t, (words.shape[0], 1, words.shape[1])))
    trajectory = concat(per_frame, axis=1)  # (n, T, d)
    return trajectory, records


def t2w(
    words: Tensor,
    frames: list[Tensor],
    p_step1: MhaParams,
    p_step2: MhaParams,
    label_prefix: str = "t2w",
    word_index_map: list | None = None,
) -> tuple[Tensor, list[AttentionRecord]]:
    """Trajectory-to-word attention for a batch of words.

    Step 1 builds each word's trajectory; step 2 lets the word attend over
    its own T trajectory tokens. Returns (n, d) plus T step-1 records and
    one step-2 record with weights (h, n, T).
    """
    n, d = words.shape
    trajectory, records = t2w_trajectory(
        words, frames, p_step1, f"{label_prefix}.step1", word_index_map
    )
    queries = reshape(words, (n, 1, d))
    z, rec2 = mha(
        queries,
        trajectory,
        trajectory,
        p_step2,
        label=f"{label_prefix}.step2",
        query_index_map=word_index_map or [],
        key_index_map=list(range(len(frames))),
    )
    # batched record arrives as (h, n*1, T) after lead-axis folding
    records.append(rec2)
    return reshape(z, (n, d)), records


VARIANTS = ("base", "t2w")


@dataclass
class CrossModalLayerParams:
    """One asymmetric layer: W2P video side plus a variant text side."""

    d: int
    h: int
    variant: str
    w2p_block: AttentionBlockParams
    p2w_block: AttentionBlockParams | None = None
    t2w_step1: MhaParams | None = None
    t2w_step2: MhaParams | None = None
    text_ff: FeedForwardParams | None = None

    @staticmethod
    def init(prefix: str, d: int, h: int, variant: str, rng: Rng) -> "CrossModalLayerParams":
        if variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {variant!r}")
        layer = CrossModalLayerParams(
            d=d,
            h=h,
            variant=variant,
            w2p_block=AttentionBlockParams.init(f"{prefix}.w2p", d, h, rng),
            text_ff=FeedForwardParams.init(f"{prefix}.text_ff", d, rng),
        )
        if variant == "base":
            layer.p2w_block = AttentionBlockParams(
                attn=MhaParams.init(f"{prefix}.p2w", d, h, rng),
                ff=layer.text_ff,
            )
        else:
            layer.t2w_step1 = MhaParams.init(f"{prefix}.t2w.step1", d, h, rng)
            layer.t2w_step2 = MhaParams.init(f"{prefix}.t2w.step2", d, h, rng)
        return layer

    def parameters(self) -> list[Parameter]:
        params = self.w2p_block.parameters()
        if self.variant == "base":
            params += self.p2w_block.attn.parameters()
        else:
            params += self.t2w_step1.parameters() + self.t2w_step2.parameters()
        params += self.text_ff.parameters()
        return params


def cross_modal_layer(
    video: TokenSequence,
    text: TokenSequence,
    p: CrossModalLayerParams,
    label_prefix: str = "layer",
) -> tuple[TokenSequence, TokenSequence, list[AttentionRecord]]:
    """Parallel update: both attention blocks consume the layer's inputs."""
    video_out, w2p_rec = w2p(video, text, p.w2p_block, label=f"{label_prefix}.w2p")
    records = [w2p_rec]
    if p.variant == "base":
        text_out, p2w_rec = p2w(
            text, video, p.p2w_block, label=f"{label_prefix}.p2w"
        )
        records.append(p2w_rec)
    else:
        frames = [video.frame(t) for t in range(video.frame_count)]
        fused, t2w_recs = t2w(
            text.tokens,
            frames,
            p.t2w_step1,
            p.t2w_step2,
            label_prefix=f"{label_prefix}.t2w",
            word_index_map=list(text.coords),
        )
        text_out = text.replace_tokens(feed_forward(fused, p.text_ff))
        records.extend(t2w_recs)
    return video_out, text_out, records


def cross_modal_encoder(
    video: TokenSequence,
    text: TokenSequence,
    layers: list[CrossModalLayerParams],
) -> tuple[TokenSequence, TokenSequence, list[AttentionRecord]]:
    """Stack of cross-modal layers; collects every attention record."""
    if len(layers) < 1:
        raise ContractError("cross-modal encoder needs at least one layer")
    records: list[AttentionRecord] = []
    for i, layer in enumerate(layers):
        video, text, recs = cross_modal_layer(
            video, text, layer, label_prefix=f"layer{i}"
        )
        records.extend(recs)
    return video, text, records


def _cross_modal_layer_batch(video, text, p: CrossModalLayerParams, label: str):
    """Batched twin of cross_modal_layer over (B, n, d) token batches."""
    z, w2p_rec = mha(
        video.tokens,
        text.tokens,
        text.tokens,
        p.w2p_block.attn,
        key_mask=text.key_mask,
        label=f"{label}.w2p",
    )
    video_out = video.replace_tokens(feed_forward(z, p.w2p_block.ff))
    records = [w2p_rec]

    if p.variant == "base":
        patches = video.body()
        z, rec = mha(
            text.tokens, patches, patches, p.p2w_block.attn, label=f"{label}.p2w"
        )
        text_out = text.replace_tokens(feed_forward(z, p.p2w_block.ff))
        records.append(rec)
    else:
        b, n_words, d = text.tokens.shape
        per_frame = []
        for t in range(video.frame_count):
            frame = video.frame_block(t)  # (B, P, d)
            y_t, rec = mha(
                text.tokens,
                frame,
                frame,
                p.t2w_step1,
                label=f"{label}.t2w.step1.frame{t}",
            )
            records.append(rec)
            per_frame.append(reshape(y_t, (b, n_words, 1, d)))
        trajectory = concat(per_frame, axis=2)  # (B, n, T, d)
        queries = reshape(text.tokens, (b, n_words, 1, d))
        z, rec2 = mha(
            queries, trajectory, trajectory, p.t2w_step2, label=f"{label}.t2w.step2"
        )
        records.append(rec2)
        fused = reshape(z, (b, n_words, d))
        text_out = text.replace_tokens(feed_forward(fused, p.text_ff))
    return video_out, text_out, records


def cross_modal_encoder_batch(video, text, layers: list[CrossModalLayerParams]):
    """Batched cross-modal stack; numerically equal to the per-sample path."""
    if len(layers) < 1:
        raise ContractError("cross-modal encoder needs at least one layer")
    records: list[AttentionRecord] = []
    for i, layer in enumerate(layers):
        video, text, recs = _cross_modal_layer_batch(
            video, text, layer, label=f"layer{i}"
        )
        records.extend(recs)
    return video, text, records
