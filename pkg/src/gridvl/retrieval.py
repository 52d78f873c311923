"""Text-video retrieval evaluation: R@K and median rank.

Zero-shot mode ranks candidates by the contrastive score (coarse [CLS]
similarity plus the averaged fine-grained token scores when the model was
built with them). Reranked mode takes the contrastive top-k and reorders
it by the match head's positive logit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .alignment import KIND_FINE_T2V, KIND_FINE_V2T, fine_sim_matrix
from .objectives import _fine_text_indices
from .tensor import ContractError, Tensor, concat, no_grad, softmax

MODES = ("vtc_zero_shot", "vtm_reranked")


@dataclass
class RetrievalReport:
    mode: str
    direction: str  # "t2v" | "v2t"
    ranks: list[int] = field(default_factory=list)
    r1: float = 0.0
    r5: float = 0.0
    r10: float = 0.0
    med_r: float = 0.0

    @staticmethod
    def from_ranks(ranks: list[int], mode: str, direction: str) -> "RetrievalReport":
        if not ranks:
            raise ContractError("no queries evaluated")
        arr = np.asarray(ranks)
        return RetrievalReport(
            mode=mode,
            direction=direction,
            ranks=list(int(r) for r in ranks),
            r1=float((arr <= 1).mean() * 100.0),
            r5=float((arr <= 5).mean() * 100.0),
            r10=float((arr <= 10).mean() * 100.0),
            med_r=float(np.median(arr)),
        )

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "direction": self.direction,
            "R@1": self.r1,
            "R@5": self.r5,
            "R@10": self.r10,
            "MedR": self.med_r,
        }


def rank_of_true(scores: np.ndarray, true_index: int) -> int:
    """1-based rank by strict-greater counting (ties resolve optimistically)."""
    return int(1 + (scores > scores[true_index]).sum())


def vtc_score_matrix(model, samples: list) -> np.ndarray:
    """(N_videos, N_texts) contrastive scores; no gradients recorded."""
    cfg = model.config
    with no_grad():
        video_batch = model.encoders.encode_video_batch(
            np.stack([s.video.features for s in samples])
        )
        text_batch = model.encoders.encode_text_batch(
            [s.caption.token_ids for s in samples]
        )
        v_proj = model.encoders.project_batch(video_batch.tokens, "video").data
        t_proj = model.encoders.project_batch(text_batch.tokens, "text").data

        scores = v_proj[:, 0, :] @ t_proj[:, 0, :].T
        if cfg.fine_grained:
            b = len(samples)
            keep = [_fine_text_indices(ids) for ids in text_batch.ids]
            n_max = max(len(k) for k in keep)
            t_tokens = np.zeros((b, n_max, cfg.d_c))
            t_mask = np.zeros((b, n_max), dtype=bool)
            for i, k in enumerate(keep):
                t_tokens[i, : len(k)] = t_proj[i, k, :]
                t_mask[i, : len(k)] = True
            v_tokens = v_proj[:, 1:, :]
            v_mask = np.ones((b, v_tokens.shape[1]), dtype=bool)
            s_v2t = fine_sim_matrix(
                Tensor(v_tokens), v_mask, t_tokens, t_mask,
                KIND_FINE_V2T, cfg.tau, normalize=cfg.normalize_fine,
            ).scores.data
            s_t2v = fine_sim_matrix(
                Tensor(t_tokens), t_mask, v_tokens, v_mask,
                KIND_FINE_T2V, cfg.tau, normalize=cfg.normalize_fine,
            ).scores.data
            scores = scores + 0.5 * (s_v2t + s_t2v.T)
    return scores


def vtm_positive_logits(model, samples: list, video_idx: list[int], text_idx: list[int]) -> np.ndarray:
    """Match-head positive logits for explicit (video, text) index pairs."""
    with no_grad():
        video_batch = model.encoders.encode_video_batch(
            np.stack([samples[i].video.features for i in video_idx])
        )
        text_batch = model.encoders.encode_text_batch(
            [samples[i].caption.token_ids for i in text_idx]
        )
        fused_v, fused_t, _ = model.cross_modal_batch(video_batch, text_batch)
        if model.config.concat_vtm:
            feats = concat([fused_v.cls(), fused_t.cls()], axis=-1)
        else:
            feats = fused_t.cls()
        logits = model.vtm_head.logits(feats)
        probs = softmax(logits, axis=-1)
    return probs.data[:, 1]


def eval_retrieval(
    model,
    samples: list,
    mode: str = "vtc_zero_shot",
    rerank_k: int = 16,
    direction: str = "t2v",
) -> RetrievalReport:
    """Rank the true match for every query; text->video by default."""
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    if direction not in ("t2v", "v2t"):
        raise ContractError(f"direction must be t2v or v2t, got {direction!r}")
    n = len(samples)
    if n < 1:
        raise ContractError("empty evaluation split")
    scores = vtc_score_matrix(model, samples)  # (videos, texts)
    if direction == "t2v":
        per_query = scores.T  # row j: scores of all videos for text j
    else:
        per_query = scores

    ranks = []
    for q in range(n):
        row = per_query[q]
        if mode == "vtc_zero_shot":
            ranks.append(rank_of_true(row, q))
            continue
        k = min(rerank_k, n)
        top = np.argsort(-row, kind="stable")[:k]
        if q not in top:
            ranks.append(rank_of_true(row, q))
            continue
        if direction == "t2v":
            logits = vtm_positive_logits(model, samples, list(top), [q] * k)
        else:
            logits = vtm_positive_logits(model, samples, [q] * k, list(top))
        order = top[np.argsort(-logits, kind="stable")]
        ranks.append(int(np.where(order == q)[0][0]) + 1)
    return RetrievalReport.from_ranks(ranks, mode=mode, direction=direction)
