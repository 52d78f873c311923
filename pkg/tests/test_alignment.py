"""Similarities, contrastive losses, momentum mechanics, FIFO queue."""

import math

import numpy as np
import pytest

from gridvl.alignment import (
    EmbeddingQueue,
    KIND_FINE_V2T,
    LossBreakdown,
    MomentumState,
    SimilarityMatrix,
    coarse_sim,
    contrastive_loss,
    fine_sim_matrix,
    fine_sim_t2v,
    fine_sim_v2t,
    momentum_step,
    pack_token_set,
)
from gridvl.rng import Rng
from gridvl.tensor import ContractError, Parameter, ShapeError, Tensor, set_precision

from oracles import contrastive_oracle, fine_sim_oracle

set_precision(64)


def unit_rows(rng: Rng, shape) -> np.ndarray:
    x = rng.normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


class TestCoarseSim:
    def test_identical_unit_vectors_score_one(self):
        v = unit_rows(Rng(1), (1, 6))
        sm = coarse_sim(Tensor(v), Tensor(v.copy()), tau=0.05)
        assert sm.scores.data[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_vectors_score_zero(self):
        a = np.zeros((1, 4)); a[0, 0] = 1.0
        b = np.zeros((1, 4)); b[0, 1] = 1.0
        sm = coarse_sim(Tensor(a), Tensor(b), tau=0.05)
        assert sm.scores.data[0, 0] == pytest.approx(0.0, abs=1e-15)

    def test_matches_double_loop(self):
        v = unit_rows(Rng(2), (3, 5))
        t = unit_rows(Rng(3), (4, 5))
        sm = coarse_sim(Tensor(v), Tensor(t), tau=0.05)
        for i in range(3):
            for j in range(4):
                ref = sum(v[i, k] * t[j, k] for k in range(5))
                assert abs(sm.scores.data[i, j] - ref) <= 1e-12

    def test_non_unit_rows_rejected(self):
        v = Rng(4).normal((2, 5)) * 3.0
        with pytest.raises(ContractError):
            coarse_sim(Tensor(v), Tensor(unit_rows(Rng(5), (2, 5))), tau=0.05)

    def test_width_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            coarse_sim(
                Tensor(unit_rows(Rng(6), (2, 5))),
                Tensor(unit_rows(Rng(7), (2, 4))),
                tau=0.05,
            )

    def test_tau_must_be_positive(self):
        with pytest.raises(ContractError):
            SimilarityMatrix(Tensor(np.zeros((2, 2))), kind="coarse", tau=0.0)


class TestFineSim:
    def test_one_token_each_side_is_dot_product(self):
        a, b = Rng(10).normal((1, 4)), Rng(11).normal((1, 4))
        got = fine_sim_v2t(Tensor(a), Tensor(b)).item()
        assert got == pytest.approx(float((a @ b.T)[0, 0]), abs=1e-12)

    def test_duplicate_candidate_token_is_idempotent(self):
        v = Rng(12).normal((3, 4))
        x = Rng(13).normal((5, 4))
        x_dup = np.concatenate([x, x[2:3]], axis=0)
        s1 = fine_sim_v2t(Tensor(v), Tensor(x)).item()
        s2 = fine_sim_v2t(Tensor(v), Tensor(x_dup)).item()
        assert s1 == pytest.approx(s2, abs=1e-12)

    def test_matches_loop_oracle(self):
        v = Rng(14).normal((4, 6))
        x = Rng(15).normal((3, 6))
        for normalize in (True, False):
            got = fine_sim_v2t(Tensor(v), Tensor(x), normalize=normalize).item()
            assert got == pytest.approx(
                fine_sim_oracle(v, x, normalize), abs=1e-12
            )
            got_t = fine_sim_t2v(Tensor(x), Tensor(v), normalize=normalize).item()
            assert got_t == pytest.approx(
                fine_sim_oracle(x, v, normalize), abs=1e-12
            )

    def test_exact_permutation_invariance(self):
        rng = Rng(16)
        v, x = rng.normal((5, 4)), rng.normal((6, 4))
        base_v = fine_sim_v2t(Tensor(v), Tensor(x)).item()
        base_t = fine_sim_t2v(Tensor(x), Tensor(v)).item()
        for seed in range(5):
            pv = Rng(seed).permutation(5)
            px = Rng(seed + 50).permutation(6)
            assert fine_sim_v2t(Tensor(v[pv]), Tensor(x[px])).item() == base_v
            assert fine_sim_t2v(Tensor(x[px]), Tensor(v[pv])).item() == base_t

    def test_adding_a_candidate_never_decreases_unnormalized_score(self):
        rng = Rng(17)
        v, x = rng.normal((4, 5)), rng.normal((3, 5))
        extra = np.concatenate([x, rng.normal((1, 5))], axis=0)
        s_before = fine_sim_v2t(Tensor(v), Tensor(x), normalize=False).item()
        s_after = fine_sim_v2t(Tensor(v), Tensor(extra), normalize=False).item()
        assert s_after >= s_before - 1e-12

    def test_empty_side_rejected(self):
        with pytest.raises(ContractError):
            fine_sim_v2t(Tensor(np.zeros((0, 4))), Tensor(np.ones((2, 4))))

    def test_matrix_form_equals_per_pair_scalars(self):
        rng = Rng(18)
        b, m, d_c = 3, 4, 5
        queries = [rng.normal((2 + i, d_c)) for i in range(b)]
        candidates = [rng.normal((3 + j % 2, d_c)) for j in range(m)]
        nq = max(q.shape[0] for q in queries)
        q_arr = np.zeros((b, nq, d_c))
        q_mask = np.zeros((b, nq), dtype=bool)
        for i, q in enumerate(queries):
            q_arr[i, : q.shape[0]] = q
            q_mask[i, : q.shape[0]] = True
        cap = max(c.shape[0] for c in candidates)
        packs = [pack_token_set(c, cap, d_c) for c in candidates]
        c_arr = np.stack([p[0] for p in packs])
        c_mask = np.stack([p[1] for p in packs])
        for normalize in (True, False):
            sm = fine_sim_matrix(
                Tensor(q_arr), q_mask, c_arr, c_mask,
                KIND_FINE_V2T, tau=0.05, normalize=normalize,
            )
            for i in range(b):
                for j in range(m):
                    ref = fine_sim_oracle(queries[i], candidates[j], normalize)
                    assert sm.scores.data[i, j] == pytest.approx(ref, abs=1e-12)


def matrix(scores: np.ndarray, tau: float = 0.05) -> SimilarityMatrix:
    return SimilarityMatrix(Tensor(scores), kind="coarse", tau=tau)


class TestContrastiveLoss:
    def test_single_pair_no_queue_is_zero(self):
        loss = contrastive_loss(matrix(np.array([[3.0]])), matrix(np.array([[3.0]])))
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_all_equal_scores_is_two_log_batch(self):
        s = np.full((4, 4), 0.7)
        loss = contrastive_loss(matrix(s), matrix(s.copy()))
        assert loss.item() == pytest.approx(2 * math.log(4), abs=1e-9)

    def test_matches_log_sum_exp_oracle(self):
        rng = Rng(20)
        a, b = rng.normal((4, 4)), rng.normal((4, 4))
        loss = contrastive_loss(matrix(a, 0.07), matrix(b, 0.07))
        assert loss.item() == pytest.approx(
            contrastive_oracle(a, b, 0.07) / 1.0, abs=1e-10
        )

    def test_mean_reduction_with_queue_columns(self):
        rng = Rng(21)
        a, b = rng.normal((3, 9)), rng.normal((3, 9))
        loss = contrastive_loss(matrix(a, 0.05), matrix(b, 0.05))
        assert loss.item() == pytest.approx(
            contrastive_oracle(a, b, 0.05), abs=1e-10
        )

    def test_raising_the_positive_score_lowers_the_loss(self):
        rng = Rng(22)
        base = rng.normal((3, 5))
        previous = None
        for bump in (0.0, 0.5, 1.0, 2.0, 4.0):
            s = base.copy()
            s[np.arange(3), np.arange(3)] += bump
            val = contrastive_loss(matrix(s), matrix(s.copy())).item()
            if previous is not None:
                assert val < previous
            previous = val

    def test_temperature_preserves_argmax(self):
        rng = Rng(23)
        s = rng.normal((4, 6))
        for tau in (0.01, 0.05, 1.0, 10.0):
            soft = np.exp(s / tau)
            soft /= soft.sum(axis=-1, keepdims=True)
            assert np.array_equal(
                soft.argmax(axis=-1), (s / 0.05).argmax(axis=-1)
            )

    def test_empty_batch_rejected(self):
        with pytest.raises(ContractError):
            contrastive_loss(
                matrix(np.zeros((0, 3))), matrix(np.zeros((0, 3)))
            )

    def test_fewer_candidates_than_batch_rejected(self):
        with pytest.raises(ShapeError):
            contrastive_loss(
                matrix(np.zeros((4, 2))), matrix(np.zeros((4, 4)))
            )


class FakeStack:
    """Minimal parameters() holder for momentum mechanics tests."""

    def __init__(self, values: dict[str, float]):
        self.params = [Parameter(np.array([v]), name) for name, v in values.items()]

    def parameters(self):
        return self.params


def make_state(momentum_value: float, stack: FakeStack) -> MomentumState:
    q = lambda: EmbeddingQueue(capacity=4, token_len=2, d_c=3, keep_tokens=False)  # noqa: E731
    return MomentumState(
        encoders=stack, m=momentum_value, video_queue=q(), text_queue=q()
    )


class TestMomentum:
    def test_m_zero_copies_exactly(self):
        live = FakeStack({"a": 5.0, "b": -2.0})
        state = make_state(0.0, FakeStack({"a": 1.0, "b": 1.0}))
        momentum_step(live, state)
        assert state.encoders.params[0].data[0] == 5.0
        assert state.encoders.params[1].data[0] == -2.0

    def test_m_one_keeps_the_copy(self):
        live = FakeStack({"a": 5.0})
        state = make_state(1.0, FakeStack({"a": 1.5}))
        momentum_step(live, state)
        assert state.encoders.params[0].data[0] == 1.5

    def test_geometric_recurrence(self):
        live = FakeStack({"a": 1.0})
        state = make_state(0.5, FakeStack({"a": 0.0}))
        seen = []
        for _ in range(3):
            momentum_step(live, state)
            seen.append(float(state.encoders.params[0].data[0]))
        assert seen == [0.5, 0.75, 0.875]

    def test_name_set_mismatch_rejected(self):
        live = FakeStack({"a": 1.0, "c": 2.0})
        state = make_state(0.5, FakeStack({"a": 0.0, "b": 0.0}))
        with pytest.raises(ContractError, match="name sets differ"):
            momentum_step(live, state)

    def test_momentum_outside_unit_interval_rejected(self):
        with pytest.raises(ContractError):
            make_state(1.5, FakeStack({"a": 0.0}))


class TestQueue:
    def unit(self, seed: int, d: int = 3) -> np.ndarray:
        v = Rng(seed).normal(d)
        return v / np.linalg.norm(v)

    def test_fifo_order_and_capacity_over_ten_times_cap(self):
        cap = 4
        q = EmbeddingQueue(capacity=cap, token_len=2, d_c=3, keep_tokens=False)
        for i in range(10 * cap):
            q.push(self.unit(i))
            assert len(q) <= cap
        expected = [self.unit(i) for i in range(10 * cap - cap, 10 * cap)]
        assert np.allclose(q.cls_array(), np.stack(expected))

    def test_token_sets_are_padded_and_masked(self):
        q = EmbeddingQueue(capacity=2, token_len=4, d_c=3, keep_tokens=True)
        tokens = Rng(1).normal((2, 3))
        q.push(self.unit(0), tokens)
        toks, mask = q.token_arrays()
        assert toks.shape == (1, 4, 3)
        assert mask.tolist() == [[True, True, False, False]]
        assert np.allclose(toks[0, :2], tokens)

    def test_token_truncation_is_strided(self):
        q = EmbeddingQueue(capacity=1, token_len=3, d_c=1, keep_tokens=True)
        tokens = np.arange(9.0).reshape(9, 1)
        q.push(np.array([1.0]), tokens)
        toks, mask = q.token_arrays()
        assert mask.all()
        assert toks[0, :, 0].tolist() == [0.0, 4.0, 8.0]

    def test_non_unit_entry_rejected(self):
        q = EmbeddingQueue(capacity=2, token_len=2, d_c=3, keep_tokens=False)
        with pytest.raises(ContractError):
            q.push(np.array([2.0, 0.0, 0.0]))


def test_loss_breakdown_accounting_identity():
    lb = LossBreakdown(l_c=0.125, l_f=0.25, l_mlm=1.5, l_vtm=0.75)
    assert lb.l_vtc == lb.l_c + lb.l_f
    assert lb.total == lb.l_vtc + lb.l_mlm + lb.l_vtm
    assert lb.as_dict()["total"] == lb.total
