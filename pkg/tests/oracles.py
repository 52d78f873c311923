"""Independent brute-force oracles used by the test suite.

Everything here is written as explicit loops over heads, rows, and
columns, sharing no code with the library's vectorized implementations.
"""

from __future__ import annotations

import math

import numpy as np


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def softmax_rows_oracle(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x, dtype=float)
    for i in range(x.shape[0]):
        row = x[i]
        top = max(row)
        exps = [math.exp(v - top) for v in row]
        z = sum(exps)
        out[i] = [e / z for e in exps]
    return out


def layer_norm_oracle(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    flat = x.reshape(-1, x.shape[-1])
    out = np.zeros_like(flat, dtype=float)
    for i, row in enumerate(flat):
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        inv = 1.0 / math.sqrt(var + eps)
        out[i] = [(v - mu) * inv * g + b for v, g, b in zip(row, gain, bias)]
    return out.reshape(x.shape)


def gelu_oracle(x: np.ndarray) -> np.ndarray:
    flat = x.reshape(-1)
    vals = [v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0))) for v in flat]
    return np.array(vals).reshape(x.shape)


class MhaArrays:
    """Plain-array view of MhaParams for oracle computation."""

    def __init__(self, p):
        self.h = p.h
        self.d = p.d
        self.d_h = p.d_h
        self.wq = p.wq.data
        self.wk = p.wk.data
        self.wv = p.wv.data
        self.wh = p.wh.data
        self.ln_gain = p.ln_gain.data
        self.ln_bias = p.ln_bias.data


def mha_oracle(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, p: MhaArrays,
    key_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-head loop attention; returns (z, weights (h, n_q, n_k))."""
    h, d_h = p.h, p.d_h
    n_q, n_k = q.shape[0], k.shape[0]
    heads = []
    weights = np.zeros((h, n_q, n_k))
    for i in range(h):
        wq_i = p.wq[:, i * d_h : (i + 1) * d_h]
        wk_i = p.wk[:, i * d_h : (i + 1) * d_h]
        wv_i = p.wv[:, i * d_h : (i + 1) * d_h]
        qi = matmul_oracle(q, wq_i)
        ki = matmul_oracle(k, wk_i)
        vi = matmul_oracle(v, wv_i)
        logits = matmul_oracle(qi, ki.T) / math.sqrt(d_h)
        if key_mask is not None:
            logits = logits.copy()
            for col in range(n_k):
                if not key_mask[col]:
                    logits[:, col] = -1e30
        a = softmax_rows_oracle(logits)
        weights[i] = a
        heads.append(matmul_oracle(a, vi))
    concat = np.concatenate(heads, axis=1)
    fused = matmul_oracle(concat, p.wh)
    z = layer_norm_oracle(fused + q, p.ln_gain, p.ln_bias)
    return z, weights


def feed_forward_oracle(x: np.ndarray, ff) -> np.ndarray:
    inner = gelu_oracle(x @ ff.w1.data + ff.b1.data) @ ff.w2.data + ff.b2.data
    return layer_norm_oracle(x + inner, ff.ln_gain.data, ff.ln_bias.data)


def w2p_oracle(video: np.ndarray, text: np.ndarray, block,
               text_mask: np.ndarray | None = None) -> np.ndarray:
    z, _ = mha_oracle(video, text, text, MhaArrays(block.attn), key_mask=text_mask)
    return feed_forward_oracle(z, block.ff)


def p2w_oracle(text: np.ndarray, patches: np.ndarray, block) -> np.ndarray:
    z, _ = mha_oracle(text, patches, patches, MhaArrays(block.attn))
    return feed_forward_oracle(z, block.ff)


def t2w_oracle(
    words: np.ndarray, frames: list[np.ndarray], p_step1, p_step2
) -> tuple[np.ndarray, np.ndarray]:
    """Word-by-word two-step trajectory attention; returns (z, step2 weights)."""
    n, d = words.shape
    t_count = len(frames)
    out = np.zeros((n, d))
    step2_weights = np.zeros((p_step2.h, n, t_count))
    for w in range(n):
        x = words[w : w + 1]
        trajectory = np.zeros((t_count, d))
        for t, frame in enumerate(frames):
            y, _ = mha_oracle(x, frame, frame, MhaArrays(p_step1))
            trajectory[t] = y[0]
        z, a2 = mha_oracle(x, trajectory, trajectory, MhaArrays(p_step2))
        out[w] = z[0]
        step2_weights[:, w, :] = a2[:, 0, :]
    return out, step2_weights


def fine_sim_oracle(
    queries: np.ndarray, candidates: np.ndarray, normalize: bool
) -> float:
    total = 0.0
    for qrow in queries:
        best = -math.inf
        for crow in candidates:
            dot = 0.0
            for a, b in zip(qrow, crow):
                dot += a * b
            best = max(best, dot)
        total += best
    return total / len(queries) if normalize else total


def contrastive_oracle(s_v2t: np.ndarray, s_t2v: np.ndarray, tau: float) -> float:
    def direction(scores: np.ndarray) -> float:
        b = scores.shape[0]
        acc = 0.0
        for i in range(b):
            logits = [s / tau for s in scores[i]]
            top = max(logits)
            z = sum(math.exp(v - top) for v in logits)
            acc += -(logits[i] - top - math.log(z))
        return acc / b

    return direction(s_v2t) + direction(s_t2v)


def cross_entropy_oracle(logits: np.ndarray, targets: list[int]) -> float:
    acc = 0.0
    for row, y in zip(logits, targets):
        top = max(row)
        z = sum(math.exp(v - top) for v in row)
        acc += -(row[y] - top - math.log(z))
    return acc / len(targets)
