"""Align-before-fuse machinery: similarities, contrastive losses, momentum.

Coarse similarity compares projected [CLS] embeddings; fine-grained
similarity sums each token's best match on the other side ([CLS]/[PAD]/
[MASK] excluded) and is normalized by the token count so captions of
different lengths stay comparable (the unnormalized sum is available via
normalize=False). Candidates for both losses come from a momentum copy of
the single-modal encoders plus FIFO queues of its past outputs; gradients
flow only into the live query side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    as_tensor,
    log_softmax,
    masked_fill,
    matmul,
    mul,
    reshape,
    sum_,
)

KIND_COARSE = "coarse"
KIND_FINE_V2T = "fine_v2t"
KIND_FINE_T2V = "fine_t2v"


@dataclass
class SimilarityMatrix:
    """B queries x M candidates with the positive for row i at column i."""

    scores: Tensor
    kind: str
    tau: float

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError(f"temperature must be positive, got {self.tau}")
        if self.scores.ndim != 2:
            raise ShapeError(
                f"similarity scores must be 2-D, got {self.scores.shape}"
            )


def coarse_sim(
    video_cls: Tensor, text_cls: Tensor, tau: float, kind: str = KIND_COARSE
) -> SimilarityMatrix:
    """Dot products of unit-norm [CLS] projections: s_ij in [-1, 1]."""
    v, t = as_tensor(video_cls), as_tensor(text_cls)
    if v.shape[-1] != t.shape[-1]:
        raise ShapeError(
            f"coarse_sim width mismatch: {v.shape} vs {t.shape}"
        )
    for side, name in ((v, "video"), (t, "text")):
        norms = np.linalg.norm(side.data, axis=-1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ContractError(f"{name} [CLS] rows are not unit-norm")
    return SimilarityMatrix(matmul(v, t.T), kind=kind, tau=tau)


def fine_sim_v2t(v_tokens: Tensor, x_tokens: Tensor, normalize: bool = True) -> Tensor:
    """Sum over video tokens of the best-matching word inner product.

    The per-token maxima are reduced in sorted order, which makes the
    score bitwise invariant under permutations of either token set (plain
    left-to-right summation would drift in the last bit).
    """
    v, x = as_tensor(v_tokens), as_tensor(x_tokens)
    if v.ndim != 2 or x.ndim != 2 or v.shape[0] < 1 or x.shape[0] < 1:
        raise ContractError(
            f"fine similarity needs non-empty (N, d) token sets, got "
            f"{v.shape} and {x.shape}"
        )
    best = matmul(v, x.T).max(axis=-1)  # (N_v,)
    canonical = best[np.argsort(best.data, kind="stable")]
    return canonical.mean() if normalize else canonical.sum()


def fine_sim_t2v(x_tokens: Tensor, v_tokens: Tensor, normalize: bool = True) -> Tensor:
    """Sum over word tokens of the best-matching patch inner product."""
    return fine_sim_v2t(x_tokens, v_tokens, normalize=normalize)


def fine_sim_matrix(
    queries: Tensor,
    query_mask: np.ndarray,
    candidates: np.ndarray,
    candidate_mask: np.ndarray,
    kind: str,
    tau: float,
    normalize: bool = True,
) -> SimilarityMatrix:
    """Batched token-wise max similarity of B live query sets vs M candidates.

    queries: (B, Nq, d) live tokens, query_mask (B, Nq) marks real tokens;
    candidates: (M, Nc, d) constants with candidate_mask (M, Nc). Entry
    (i, j) equals fine_sim over the masked token sets.
    """
    b, nq, d = queries.shape
    m, nc, dc = candidates.shape
    if d != dc:
        raise ShapeError(
            f"fine_sim width mismatch: queries {queries.shape} vs "
            f"candidates {candidates.shape}"
        )
    qm = np.asarray(query_mask, dtype=float)
    cm = np.asarray(candidate_mask, dtype=bool)
    q2 = reshape(queries, (b * nq, d))
    c2 = Tensor(candidates.reshape(m * nc, d))
    sims = reshape(matmul(q2, c2.T), (b, nq, m, nc))
    sims = masked_fill(sims, cm.reshape(1, 1, m, nc))
    best = sims.max(axis=-1)  # (B, Nq, M)
    best = mul(best, qm[:, :, None])
    totals = sum_(best, axis=1)  # (B, M)
    if normalize:
        totals = mul(totals, 1.0 / qm.sum(axis=1, keepdims=True))
    return SimilarityMatrix(totals, kind=kind, tau=tau)


def contrastive_loss(s_v2t: SimilarityMatrix, s_t2v: SimilarityMatrix) -> Tensor:
    """Symmetric InfoNCE over both directions, positives on the diagonal.

    Each direction is the batch mean of -log softmax(row / tau)[row index];
    rows are queries, columns are candidates (batch first, then queue).
    """
    total = None
    for sm in (s_v2t, s_t2v):
        b, m = sm.scores.shape
        if b == 0:
            raise ContractError("contrastive loss over an empty batch")
        if m < b:
            raise ShapeError(
                f"candidate count {m} smaller than batch {b}; positives "
                f"must sit on the diagonal"
            )
        logp = log_softmax(mul(sm.scores, 1.0 / sm.tau), axis=-1)
        rows = np.arange(b)
        picked = logp[rows, rows]
        term = -picked.mean()
        total = term if total is None else total + term
    return total


def spread_indices(n_tokens: int, n_keep: int) -> np.ndarray:
    """Evenly strided subset so truncation keeps coverage across frames."""
    if n_keep >= n_tokens:
        return np.arange(n_tokens)
    return np.linspace(0, n_tokens - 1, n_keep).round().astype(int)


def pack_token_set(
    tokens: np.ndarray, cap: int, d_c: int
) -> tuple[np.ndarray, np.ndarray]:
    """Truncate (strided) or zero-pad one token set to a fixed length."""
    if tokens.ndim != 2 or tokens.shape[1] != d_c:
        raise ShapeError(f"token set must be (N, {d_c}), got {tokens.shape}")
    padded = np.zeros((cap, d_c))
    mask = np.zeros(cap, dtype=bool)
    idx = spread_indices(tokens.shape[0], min(tokens.shape[0], cap))
    padded[: len(idx)] = tokens[idx]
    mask[: len(idx)] = True
    return padded, mask


@dataclass
class EmbeddingQueue:
    """Fixed-capacity FIFO of projected [CLS] rows plus optional token sets."""

    capacity: int
    token_len: int
    d_c: int
    keep_tokens: bool = True
    cls_rows: list = field(default_factory=list)
    token_rows: list = field(default_factory=list)
    token_masks: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cls_rows)

    def push(
        self,
        cls_vec: np.ndarray,
        tokens: np.ndarray | None = None,
        token_mask: np.ndarray | None = None,
    ) -> None:
        norm = float(np.linalg.norm(cls_vec))
        if abs(norm - 1.0) > 1e-6:
            raise ContractError("queue entries must be unit-norm")
        self.cls_rows.append(np.asarray(cls_vec, dtype=np.float64).copy())
        if self.keep_tokens:
            if tokens is None:
                raise ContractError("token queue enabled but no tokens supplied")
            padded, mask = pack_token_set(tokens, self.token_len, self.d_c)
            self.token_rows.append(padded)
            self.token_masks.append(mask)
        while len(self.cls_rows) > self.capacity:
            self.cls_rows.pop(0)
            if self.keep_tokens:
                self.token_rows.pop(0)
                self.token_masks.pop(0)

    def cls_array(self) -> np.ndarray:
        if not self.cls_rows:
            return np.zeros((0, self.d_c))
        return np.stack(self.cls_rows)

    def token_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.token_rows:
            return (
                np.zeros((0, self.token_len, self.d_c)),
                np.zeros((0, self.token_len), dtype=bool),
            )
        return np.stack(self.token_rows), np.stack(self.token_masks)


@dataclass
class MomentumState:
    """Momentum copies of the single-modal towers plus candidate queues."""

    encoders: "object"  # EncoderStack; typed loosely to avoid an import cycle
    m: float
    video_queue: EmbeddingQueue
    text_queue: EmbeddingQueue

    def __post_init__(self):
        # m < 1 in real training; the m = 1 frozen-teacher limit is legal API
        if not 0.0 <= self.m <= 1.0:
            raise ContractError(f"momentum must be in [0, 1], got {self.m}")


def momentum_step(model, state: MomentumState, batch=None) -> None:
    """EMA-update the momentum copy, then enqueue the batch's embeddings.

    model is the live mirrored sub-model (anything with .parameters()) or a
    name -> Parameter dict; the name sets must match exactly. batch, when
    given, holds the already momentum-encoded projections to enqueue:
    {"video": [(cls_vec, tokens, token_mask), ...], "text": [...]}.
    """
    if hasattr(model, "parameters"):
        model_params = {p.name: p for p in model.parameters()}
    else:
        model_params = dict(model)
    momentum_params = {p.name: p for p in state.encoders.parameters()}
    if set(momentum_params) != set(model_params):
        missing = set(model_params) ^ set(momentum_params)
        raise ContractError(
            f"momentum/model parameter name sets differ: {sorted(missing)}"
        )
    m = state.m
    for name, live in model_params.items():
        target = momentum_params[name]
        target.data = m * target.data + (1.0 - m) * live.data

    if batch is not None:
        for cls_vec, tokens, mask in batch.get("video", []):
            state.video_queue.push(cls_vec, tokens, mask)
        for cls_vec, tokens, mask in batch.get("text", []):
            state.text_queue.push(cls_vec, tokens, mask)


@dataclass
class LossBreakdown:
    """The four training losses; accounting identities hold exactly."""

    l_c: float
    l_f: float
    l_mlm: float
    l_vtm: float

    @property
    def l_vtc(self) -> float:
        return self.l_c + self.l_f

    @property
    def total(self) -> float:
        return self.l_vtc + self.l_mlm + self.l_vtm

    def as_dict(self) -> dict:
        return {
            "l_c": self.l_c,
            "l_f": self.l_f,
            "l_vtc": self.l_vtc,
            "l_mlm": self.l_mlm,
            "l_vtm": self.l_vtm,
            "total": self.total,
        }
