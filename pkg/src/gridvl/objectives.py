"""Training objectives: masked word prediction, match classification, and
the combined step that also drives the contrastive losses and momentum.

The step encodes the batch with the live towers, contrasts the projections
against momentum-encoded candidates (batch + queue), runs the cross-modal
encoder on matched pairs for the masking loss and on shuffled pairs for
the matching loss, backpropagates the weighted sum, applies a decoupled
weight-decay Adam update with warmup + linear decay, and finally advances
the momentum copy and queues.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import (
    KIND_FINE_T2V,
    KIND_FINE_V2T,
    LossBreakdown,
    MomentumState,
    coarse_sim,
    contrastive_loss,
    fine_sim_matrix,
    momentum_step,
    pack_token_set,
)
from .encoders import MASK_ID, SPECIAL_IDS
from .rng import Rng
from .tensor import (
    ContractError,
    NumericError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    concat,
    gelu,
    linear,
    log_softmax,
    no_grad,
)


@dataclass
class MaskedBatch:
    original_ids: list[int]
    masked_ids: list[int]
    mask_positions: np.ndarray  # bool per position
    p_mask: float


def mlm_mask(
    ids: list[int],
    p_mask: float,
    rng: Rng,
    special_ids: tuple[int, ...] = SPECIAL_IDS,
) -> MaskedBatch:
    """Independently mask non-special tokens; force one if none were drawn."""
    if not 0 < p_mask < 1:
        raise ContractError(f"p_mask must be in (0, 1), got {p_mask}")
    eligible = [i for i, tok in enumerate(ids) if tok not in special_ids]
    if not eligible:
        raise ContractError("cannot mask an all-special token sequence")
    draws = rng.uniform(shape=len(ids))
    positions = np.zeros(len(ids), dtype=bool)
    for i in eligible:
        positions[i] = draws[i] < p_mask
    if not positions.any():
        positions[eligible[rng.integers(0, len(eligible))]] = True
    masked = [MASK_ID if positions[i] else tok for i, tok in enumerate(ids)]
    return MaskedBatch(
        original_ids=list(ids),
        masked_ids=masked,
        mask_positions=positions,
        p_mask=p_mask,
    )


@dataclass
class VtmBatch:
    video_indices: list[int]
    text_indices: list[int]
    labels: list[int]  # 1 matched, 0 mismatched


def vtm_pair(batch_size: int, rng: Rng, neg_fraction: float = 0.5) -> VtmBatch:
    """Keep each pair with probability 1 - neg_fraction, else swap in a
    different caption from the batch; at least one positive survives."""
    if batch_size < 1:
        raise ContractError("empty batch")
    if batch_size < 2 and neg_fraction > 0:
        raise ContractError("need batch >= 2 to sample mismatched captions")
    text_indices, labels = [], []
    for i in range(batch_size):
        if rng.random() < neg_fraction:
            j = rng.integers(0, batch_size - 1)
            if j >= i:
                j += 1
            text_indices.append(int(j))
            labels.append(0)
        else:
            text_indices.append(i)
            labels.append(1)
    if 1 not in labels:
        k = rng.integers(0, batch_size)
        text_indices[k] = k
        labels[k] = 1
    return VtmBatch(
        video_indices=list(range(batch_size)),
        text_indices=text_indices,
        labels=labels,
    )


@dataclass
class MlmHead:
    w: Parameter  # (d, vocab)
    b: Parameter

    @staticmethod
    def init(d: int, vocab_size: int, rng: Rng, std: float = 0.02) -> "MlmHead":
        return MlmHead(
            w=Parameter(
                rng.child("head.mlm.w").normal((d, vocab_size), std=std),
                "head.mlm.w",
            ),
            b=Parameter(np.zeros(vocab_size), "head.mlm.b"),
        )

    def logits(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


@dataclass
class VtmHead:
    w: Parameter  # (in_dim, 2)
    b: Parameter

    @property
    def in_dim(self) -> int:
        return self.w.shape[0]

    @staticmethod
    def init(in_dim: int, rng: Rng, std: float = 0.02) -> "VtmHead":
        return VtmHead(
            w=Parameter(
                rng.child("head.vtm.w").normal((in_dim, 2), std=std), "head.vtm.w"
            ),
            b=Parameter(np.zeros(2), "head.vtm.b"),
        )

    def logits(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


@dataclass
class QaHead:
    """Two-layer perceptron over the concatenated [CLS] pair."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @staticmethod
    def init(d: int, n_answers: int, rng: Rng, std: float = 0.02) -> "QaHead":
        return QaHead(
            w1=Parameter(
                rng.child("head.qa.w1").normal((2 * d, d), std=std), "head.qa.w1"
            ),
            b1=Parameter(np.zeros(d), "head.qa.b1"),
            w2=Parameter(
                rng.child("head.qa.w2").normal((d, n_answers), std=std),
                "head.qa.w2",
            ),
            b2=Parameter(np.zeros(n_answers), "head.qa.b2"),
        )

    def logits(self, x: Tensor) -> Tensor:
        return linear(gelu(linear(x, self.w1, self.b1)), self.w2, self.b2)

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


def cross_entropy(logits: Tensor, targets: list[int] | np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets."""
    targets = np.asarray(targets, dtype=int)
    if logits.shape[0] != targets.shape[0]:
        raise ShapeError(
            f"{logits.shape[0]} logit rows vs {targets.shape[0]} targets"
        )
    logp = log_softmax(logits, axis=-1)
    picked = logp[np.arange(targets.shape[0]), targets]
    return -picked.mean()


def mlm_loss(fused_text, batch: MaskedBatch, head: MlmHead) -> Tensor:
    """Mean cross-entropy at masked positions only (positions offset by
    one for the [CLS] slot in the fused sequence)."""
    positions = np.where(batch.mask_positions)[0]
    if positions.size == 0:
        raise ContractError("mlm_loss needs at least one masked position")
    rows = fused_text.tokens[positions + 1]
    targets = [batch.original_ids[i] for i in positions]
    return cross_entropy(head.logits(rows), targets)


def vtm_loss(
    video_fused_cls: Tensor | None,
    text_fused_cls: Tensor,
    labels: list[int],
    head: VtmHead,
) -> Tensor:
    """Two-way match classification over fused [CLS] features.

    When the head was built for concatenated features (in_dim == 2d) both
    [CLS] streams are joined; otherwise only the text [CLS] is used.
    """
    if video_fused_cls is not None:
        feats = concat([video_fused_cls, text_fused_cls], axis=-1)
    else:
        feats = text_fused_cls
    if feats.shape[-1] != head.in_dim:
        raise ShapeError(
            f"vtm head expects width {head.in_dim}, got {feats.shape[-1]}"
        )
    if feats.shape[0] != len(labels):
        raise ShapeError(f"{feats.shape[0]} rows vs {len(labels)} labels")
    return cross_entropy(head.logits(feats), labels)


class AdamW:
    """Adam with decoupled weight decay and warmup + linear-decay schedule."""

    def __init__(
        self,
        params: list[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.98),
        eps: float = 1e-8,
        weight_decay: float = 1e-3,
        warmup_steps: int = 0,
        total_steps: int | None = None,
    ):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ContractError("optimizer needs uniquely named parameters")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.total_steps = total_steps
        self.t = 0
        self.exp_avg = {p.name: np.zeros_like(p.data) for p in params}
        self.exp_avg_sq = {p.name: np.zeros_like(p.data) for p in params}

    def lr_at(self, t: int) -> float:
        scale = 1.0
        if self.warmup_steps > 0 and t <= self.warmup_steps:
            scale = t / self.warmup_steps
        elif self.total_steps is not None and self.total_steps > self.warmup_steps:
            remaining = self.total_steps - t
            span = self.total_steps - self.warmup_steps
            scale = max(0.0, remaining / span)
        return self.lr * scale

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        lr_t = self.lr_at(self.t)
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p in self.params:
            g = p.grad
            m = self.exp_avg[p.name]
            v = self.exp_avg_sq[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data - lr_t * (update + self.weight_decay * p.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"opt.step": np.array(float(self.t))}
        for name, arr in self.exp_avg.items():
            arrays[f"opt.exp_avg.{name}"] = arr
        for name, arr in self.exp_avg_sq.items():
            arrays[f"opt.exp_avg_sq.{name}"] = arr
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(np.asarray(arrays["opt.step"]).reshape(-1)[0])
        for name in self.exp_avg:
            self.exp_avg[name] = np.array(arrays[f"opt.exp_avg.{name}"])
            self.exp_avg_sq[name] = np.array(arrays[f"opt.exp_avg_sq.{name}"])


def _pad_rows(t: Tensor, target: int) -> Tensor:
    n = t.shape[0]
    if n == target:
        return t
    return concat([t, Tensor(np.zeros((target - n, t.shape[1])))], axis=0)


def _fine_text_indices(ids: list[int]) -> np.ndarray:
    """Row indices usable for fine-grained similarity (specials excluded).

    ids is the full encoded sequence including [CLS] at 0, so the returned
    indices address token rows directly."""
    keep = [i for i, tok in enumerate(ids) if tok not in SPECIAL_IDS]
    return np.array(keep, dtype=int)


def momentum_candidates(state: MomentumState, samples: list, cfg) -> dict:
    """Encode the batch with the momentum towers (no tape) and assemble the
    candidate arrays: batch entries first, queue entries after."""
    b = len(samples)
    with no_grad():
        vb = state.encoders.encode_video_batch(
            np.stack([s.video.features for s in samples])
        )
        tb = state.encoders.encode_text_batch(
            [s.caption.token_ids for s in samples]
        )
        v_proj = state.encoders.project_batch(vb.tokens, "video").data
        t_proj = state.encoders.project_batch(tb.tokens, "text").data
    v_cls = v_proj[:, 0, :]
    t_cls = t_proj[:, 0, :]
    v_tokens = [v_proj[i, 1:, :] for i in range(b)]
    t_tokens = [
        t_proj[i, _fine_text_indices(tb.ids[i]), :] for i in range(b)
    ]

    cap, d_c = cfg.queue_token_cap, cfg.d_c

    def packed(cands: list[np.ndarray], queue) -> tuple[np.ndarray, np.ndarray]:
        packs = [pack_token_set(tok, cap, d_c) for tok in cands]
        toks = np.stack([p[0] for p in packs])
        mask = np.stack([p[1] for p in packs])
        q_toks, q_mask = queue.token_arrays()
        return np.concatenate([toks, q_toks]), np.concatenate([mask, q_mask])

    out = {
        "v_cls": v_cls,
        "t_cls": t_cls,
        "v_tokens": v_tokens,
        "t_tokens": t_tokens,
        "v_cls_cand": np.concatenate([v_cls, state.video_queue.cls_array()]),
        "t_cls_cand": np.concatenate([t_cls, state.text_queue.cls_array()]),
    }
    if cfg.use_queue_tokens or cfg.fine_grained:
        out["t_tok_cand"], out["t_tok_mask"] = packed(t_tokens, state.text_queue)
        out["v_tok_cand"], out["v_tok_mask"] = packed(v_tokens, state.video_queue)
    return out


def batch_losses(
    model,
    state: MomentumState,
    samples: list,
    rng: Rng,
    which: tuple[str, ...] = ("coarse", "fine", "mlm", "vtm"),
    candidates: dict | None = None,
) -> dict[str, Tensor]:
    """Compute the requested loss components for one batch.

    Components are keyed "coarse"/"fine"/"mlm"/"vtm". All randomness is
    drawn from children of rng, so repeated calls with an equally seeded
    rng reproduce the same masks and pairings (finite differencing relies
    on this). candidates, when given, is a precomputed
    momentum_candidates() result.
    """
    cfg = model.config
    b = len(samples)
    if b < 2:
        raise ContractError("training needs a batch of at least 2 samples")

    video_batch = model.encoders.encode_video_batch(
        np.stack([s.video.features for s in samples])
    )
    text_batch = model.encoders.encode_text_batch(
        [s.caption.token_ids for s in samples]
    )
    losses: dict[str, Tensor] = {}

    if "coarse" in which or "fine" in which:
        cand = candidates or momentum_candidates(state, samples, cfg)
        v_proj = model.encoders.project_batch(video_batch.tokens, "video")
        t_proj = model.encoders.project_batch(text_batch.tokens, "text")

        if "coarse" in which:
            s_c_v2t = coarse_sim(
                v_proj[:, 0, :], Tensor(cand["t_cls_cand"]), cfg.tau
            )
            s_c_t2v = coarse_sim(
                t_proj[:, 0, :], Tensor(cand["v_cls_cand"]), cfg.tau
            )
            losses["coarse"] = contrastive_loss(s_c_v2t, s_c_t2v)

        if "fine" in which:
            live_v_tokens = v_proj[:, 1:, :]
            v_query_mask = np.ones((b, live_v_tokens.shape[1]), dtype=bool)

            keep_idx = [_fine_text_indices(ids) for ids in text_batch.ids]
            n_max = max(len(k) for k in keep_idx)
            t_rows = []
            t_query_mask = np.zeros((b, n_max), dtype=bool)
            for i, keep in enumerate(keep_idx):
                rows = t_proj[i, keep, :]
                t_query_mask[i, : len(keep)] = True
                t_rows.append(_pad_rows(rows, n_max).reshape(1, n_max, cfg.d_c))
            live_t_tokens = concat(t_rows, axis=0)

            s_f_v2t = fine_sim_matrix(
                live_v_tokens,
                v_query_mask,
                cand["t_tok_cand"],
                cand["t_tok_mask"],
                KIND_FINE_V2T,
                cfg.tau,
                normalize=cfg.normalize_fine,
            )
            s_f_t2v = fine_sim_matrix(
                live_t_tokens,
                t_query_mask,
                cand["v_tok_cand"],
                cand["v_tok_mask"],
                KIND_FINE_T2V,
                cfg.tau,
                normalize=cfg.normalize_fine,
            )
            losses["fine"] = contrastive_loss(s_f_v2t, s_f_t2v)

    if "mlm" in which:
        masked = [
            mlm_mask(s.caption.token_ids, cfg.p_mask, rng.child("mlm", i))
            for i, s in enumerate(samples)
        ]
        masked_batch = model.encoders.encode_text_batch(
            [mb.masked_ids for mb in masked]
        )
        _, fused_text, _ = model.cross_modal_batch(video_batch, masked_batch)
        terms = []
        for i, mb in enumerate(masked):
            positions = np.where(mb.mask_positions)[0]
            rows = fused_text.tokens[i, positions + 1, :]
            targets = [mb.original_ids[j] for j in positions]
            terms.append(cross_entropy(model.mlm_head.logits(rows), targets))
        losses["mlm"] = sum(terms[1:], terms[0]) * (1.0 / b)

    if "vtm" in which:
        vb = vtm_pair(b, rng.child("vtm"), cfg.neg_fraction)
        fused_video, fused_text, _ = model.cross_modal_batch(
            video_batch, text_batch.reindexed(vb.text_indices)
        )
        video_cls = fused_video.cls() if cfg.concat_vtm else None
        losses["vtm"] = vtm_loss(
            video_cls, fused_text.cls(), vb.labels, model.vtm_head
        )

    return losses


def training_step(
    model,
    state: MomentumState,
    samples: list,
    rng: Rng,
    optimizer: AdamW,
) -> LossBreakdown:
    """One full optimization step over a batch of (video, caption) samples."""
    cfg = model.config
    weights = {
        "coarse": cfg.weight_coarse,
        "fine": cfg.weight_fine if cfg.fine_grained else 0.0,
        "mlm": 0.0 if cfg.finetune else cfg.weight_mlm,
        "vtm": cfg.weight_vtm,
    }
    which = tuple(name for name, w in weights.items() if w > 0)
    cand = momentum_candidates(state, samples, cfg)
    losses = batch_losses(
        model, state, samples, rng, which=which, candidates=cand
    )

    weighted = None
    for name, term in losses.items():
        piece = term * weights[name]
        weighted = piece if weighted is None else weighted + piece
    if weighted is not None:
        if not np.isfinite(weighted.data).all():
            diag = ", ".join(
                f"{k}={float(v.item()):.6g}" for k, v in losses.items()
            )
            raise NumericError(f"non-finite training loss; components: {diag}")
        model.zero_grad()
        backward(weighted)
        bad = [
            p.name for p in model.parameters() if not np.isfinite(p.grad).all()
        ]
        if bad:
            raise NumericError(f"non-finite gradients in parameters: {bad}")
        optimizer.step()

    # momentum update + enqueue the momentum-encoded batch
    batch_entries = None
    if state.video_queue.capacity > 0:
        batch_entries = {
            "video": [
                (cand["v_cls"][i], cand["v_tokens"][i], None)
                for i in range(len(samples))
            ],
            "text": [
                (cand["t_cls"][i], cand["t_tokens"][i], None)
                for i in range(len(samples))
            ],
        }
    momentum_step(model.encoders, state, batch_entries)

    def value(name: str) -> float:
        return float(losses[name].item()) if name in losses else 0.0

    return LossBreakdown(
        l_c=value("coarse"),
        l_f=value("fine"),
        l_mlm=value("mlm"),
        l_vtm=value("vtm"),
    )
