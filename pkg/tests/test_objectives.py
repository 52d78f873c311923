"""Masking, match pairing, heads, optimizer, and the full training step."""

import math

import numpy as np
import pytest

from gridvl.config import RunConfig
from gridvl.data import CorpusConfig, generate_corpus
from gridvl.encoders import CLS_ID, MASK_ID, PAD_ID
from gridvl.gradcheck import grad_check
from gridvl.model import VideoTextModel
from gridvl.objectives import (
    AdamW,
    MlmHead,
    QaHead,
    VtmHead,
    batch_losses,
    mlm_loss,
    mlm_mask,
    training_step,
    vtm_loss,
    vtm_pair,
)
from gridvl.rng import Rng
from gridvl.sequence import TokenSequence
from gridvl.tensor import ContractError, ShapeError, Tensor, set_precision

from oracles import cross_entropy_oracle

set_precision(64)

SMALL = RunConfig(
    d=8, h=2, l_v=1, l_x=1, l_cross=1, d_c=8, grid=2, frames=3,
    n_colors=2, n_shapes=2, allow_diagonal=False, max_objects=1,
    corpus_train=8, corpus_val=4, corpus_test=4, queue_cap=8,
    queue_token_cap=6, steps=50, batch_size=4, warmup_steps=5,
    lr=2e-3, seed=123,
)


def small_setup(cfg: RunConfig = SMALL, corpus_seed: int | None = None):
    corpus = generate_corpus(
        CorpusConfig(
            n_train=cfg.corpus_train, n_val=cfg.corpus_val, n_test=cfg.corpus_test,
            seed=corpus_seed if corpus_seed is not None else cfg.corpus_seed,
            grid=cfg.grid, frames=cfg.frames, sigma=cfg.sigma,
            n_colors=cfg.n_colors, n_shapes=cfg.n_shapes,
            max_objects=cfg.max_objects, contrast_mode=cfg.contrast_mode,
            allow_diagonal=cfg.allow_diagonal,
        )
    )
    model = VideoTextModel(cfg)
    optimizer = AdamW(
        model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay, warmup_steps=cfg.warmup_steps,
        total_steps=cfg.steps,
    )
    state = model.new_momentum_state()
    return corpus, model, optimizer, state


class TestMlmMask:
    def test_empirical_rate_hits_fifteen_percent(self):
        n = 100_000
        batch = mlm_mask([5] * n, 0.15, Rng(1))
        rate = batch.mask_positions.mean()
        assert 0.14 <= rate <= 0.16

    def test_same_seed_identical_pattern(self):
        ids = [4, 5, 6, 7, 8, 9] * 10
        a = mlm_mask(ids, 0.15, Rng(7))
        b = mlm_mask(ids, 0.15, Rng(7))
        assert np.array_equal(a.mask_positions, b.mask_positions)
        assert a.masked_ids == b.masked_ids

    def test_special_tokens_never_masked(self):
        ids = [PAD_ID, CLS_ID, MASK_ID, 5] * 200
        batch = mlm_mask(ids, 0.9, Rng(2))
        for i, tok in enumerate(ids):
            if tok in (PAD_ID, CLS_ID, MASK_ID):
                assert not batch.mask_positions[i]
                assert batch.masked_ids[i] == tok

    def test_masked_positions_hold_mask_id(self):
        batch = mlm_mask([5, 6, 7, 8], 0.5, Rng(3))
        for i, masked in enumerate(batch.mask_positions):
            expected = MASK_ID if masked else batch.original_ids[i]
            assert batch.masked_ids[i] == expected

    def test_at_least_one_position_is_forced(self):
        for seed in range(50):
            batch = mlm_mask([5, 6], 0.01, Rng(seed))
            assert batch.mask_positions.any()

    def test_all_special_rejected(self):
        with pytest.raises(ContractError):
            mlm_mask([PAD_ID, CLS_ID], 0.15, Rng(4))

    def test_bad_probability_rejected(self):
        with pytest.raises(ContractError):
            mlm_mask([5], 0.0, Rng(5))


class TestMlmLoss:
    def make_fused(self, rng: Rng, n: int, d: int = 8) -> TokenSequence:
        return TokenSequence(
            tokens=Tensor(rng.normal((n, d))),
            modality="text",
            coords=list(range(n)),
            ids=[CLS_ID] + [5] * (n - 1),
        )

    def test_uniform_logits_give_log_vocab(self):
        vocab = 40
        head = MlmHead.init(8, vocab, Rng(10))
        head.w.data[:] = 0.0
        head.b.data[:] = 0.0
        fused = self.make_fused(Rng(11), 5)
        batch = mlm_mask([5, 6, 7, 8], 0.5, Rng(12))
        loss = mlm_loss(fused, batch, head)
        assert loss.item() == pytest.approx(math.log(vocab), abs=1e-12)

    def test_only_masked_positions_enter_the_loss(self):
        head = MlmHead.init(8, 12, Rng(13))
        fused = self.make_fused(Rng(14), 5)
        batch = mlm_mask([5, 6, 7, 8], 0.4, Rng(15))
        base = mlm_loss(fused, batch, head).item()
        tampered = [
            tok if batch.mask_positions[i] else (tok % 11) + 1
            for i, tok in enumerate(batch.original_ids)
        ]
        batch2 = type(batch)(
            original_ids=tampered,
            masked_ids=batch.masked_ids,
            mask_positions=batch.mask_positions,
            p_mask=batch.p_mask,
        )
        assert mlm_loss(fused, batch2, head).item() == pytest.approx(base, abs=0)

    def test_matches_log_softmax_oracle(self):
        head = MlmHead.init(8, 12, Rng(16))
        fused = self.make_fused(Rng(17), 6)
        batch = mlm_mask([4, 5, 6, 7, 8], 0.5, Rng(18))
        positions = np.where(batch.mask_positions)[0]
        logits = fused.tokens.data[positions + 1] @ head.w.data + head.b.data
        targets = [batch.original_ids[i] for i in positions]
        assert mlm_loss(fused, batch, head).item() == pytest.approx(
            cross_entropy_oracle(logits, targets), abs=1e-10
        )

    def test_no_masked_positions_rejected(self):
        head = MlmHead.init(8, 12, Rng(19))
        fused = self.make_fused(Rng(20), 4)
        batch = mlm_mask([5, 6, 7], 0.5, Rng(21))
        batch.mask_positions[:] = False
        with pytest.raises(ContractError):
            mlm_loss(fused, batch, head)


class TestVtmPair:
    def test_zero_negative_fraction_keeps_all_positive(self):
        batch = vtm_pair(6, Rng(30), neg_fraction=0.0)
        assert batch.labels == [1] * 6
        assert batch.text_indices == list(range(6))

    def test_negatives_never_self_paired(self):
        for seed in range(40):
            batch = vtm_pair(5, Rng(seed), neg_fraction=0.9)
            for i, (ti, label) in enumerate(zip(batch.text_indices, batch.labels)):
                if label == 0:
                    assert ti != i

    def test_at_least_one_positive(self):
        for seed in range(60):
            batch = vtm_pair(4, Rng(seed), neg_fraction=0.999)
            assert 1 in batch.labels

    def test_seeded_reproducibility(self):
        a = vtm_pair(8, Rng(31), 0.5)
        b = vtm_pair(8, Rng(31), 0.5)
        assert a.text_indices == b.text_indices and a.labels == b.labels

    def test_single_sample_with_negatives_rejected(self):
        with pytest.raises(ContractError):
            vtm_pair(1, Rng(32), neg_fraction=0.5)


class TestVtmLoss:
    def test_uniform_logits_give_log_two(self):
        head = VtmHead.init(16, Rng(40))
        head.w.data[:] = 0.0
        head.b.data[:] = 0.0
        v = Tensor(Rng(41).normal((3, 8)))
        t = Tensor(Rng(42).normal((3, 8)))
        loss = vtm_loss(v, t, [1, 0, 1], head)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_class_swap_symmetry(self):
        head = VtmHead.init(16, Rng(43))
        v = Tensor(Rng(44).normal((4, 8)))
        t = Tensor(Rng(45).normal((4, 8)))
        labels = [1, 0, 0, 1]
        base = vtm_loss(v, t, labels, head).item()
        swapped = VtmHead(
            w=type(head.w)(head.w.data[:, ::-1].copy(), "head.vtm.w"),
            b=type(head.b)(head.b.data[::-1].copy(), "head.vtm.b"),
        )
        flipped = vtm_loss(v, t, [1 - y for y in labels], swapped).item()
        assert flipped == pytest.approx(base, abs=1e-12)

    def test_matches_direct_oracle(self):
        head = VtmHead.init(16, Rng(46))
        v = Rng(47).normal((3, 8))
        t = Rng(48).normal((3, 8))
        labels = [0, 1, 1]
        got = vtm_loss(Tensor(v), Tensor(t), labels, head).item()
        logits = np.concatenate([v, t], axis=-1) @ head.w.data + head.b.data
        assert got == pytest.approx(cross_entropy_oracle(logits, labels), abs=1e-10)

    def test_text_only_head(self):
        head = VtmHead.init(8, Rng(49))
        t = Tensor(Rng(50).normal((3, 8)))
        loss = vtm_loss(None, t, [1, 0, 1], head)
        assert np.isfinite(loss.item())

    def test_width_mismatch_rejected(self):
        head = VtmHead.init(16, Rng(51))
        with pytest.raises(ShapeError):
            vtm_loss(None, Tensor(Rng(52).normal((3, 8))), [1, 0, 1], head)


class TestHeadsGradients:
    def test_all_heads_pass_grad_check(self):
        rng = Rng(60)
        mlm = MlmHead.init(8, 12, rng)
        vtm = VtmHead.init(16, rng)
        qa = QaHead.init(8, n_answers=6, rng=rng)
        x = Tensor(Rng(61).normal((4, 8)))
        pair = Tensor(Rng(62).normal((4, 16)))
        targets = [3, 1, 0, 5]

        def loss():
            from gridvl.objectives import cross_entropy

            a = cross_entropy(mlm.logits(x), [2, 4, 8, 11])
            b = cross_entropy(vtm.logits(pair), [1, 0, 0, 1])
            c = cross_entropy(qa.logits(pair), targets)
            return a + b + c

        params = mlm.parameters() + vtm.parameters() + qa.parameters()
        report = grad_check(loss, params, tol=1e-4, max_entries_per_param=6)
        assert report.passed, report.summary()

    def test_qa_head_output_shape(self):
        qa = QaHead.init(8, n_answers=6, rng=Rng(63))
        out = qa.logits(Tensor(Rng(64).normal((5, 16))))
        assert out.shape == (5, 6)


class TestAdamW:
    def test_warmup_and_linear_decay(self):
        p = type("P", (), {})  # placeholder; schedule is pure
        opt = AdamW([], lr=1.0, warmup_steps=10, total_steps=110)
        assert opt.lr_at(5) == pytest.approx(0.5)
        assert opt.lr_at(10) == pytest.approx(1.0)
        assert opt.lr_at(60) == pytest.approx(0.5)
        assert opt.lr_at(110) == pytest.approx(0.0)

    def test_descends_a_quadratic(self):
        from gridvl.tensor import Parameter, backward

        p = Parameter(np.array([4.0, -3.0]), "p")
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        for _ in range(200):
            p.zero_grad()
            backward((p * p).sum() * 0.5)
            opt.step()
        assert np.abs(p.data).max() < 0.15

    def test_duplicate_names_rejected(self):
        from gridvl.tensor import Parameter

        with pytest.raises(ContractError):
            AdamW([Parameter([1.0], "x"), Parameter([2.0], "x")])


class TestTrainingStep:
    def test_batch_of_one_rejected(self):
        corpus, model, opt, state = small_setup()
        with pytest.raises(ContractError):
            training_step(model, state, corpus.train[:1], Rng(0), opt)

    def test_breakdown_accounting_and_positive_losses(self):
        corpus, model, opt, state = small_setup()
        lb = training_step(model, state, corpus.train[:4], Rng(1), opt)
        assert lb.total == lb.l_c + lb.l_f + lb.l_mlm + lb.l_vtm
        for value in (lb.l_c, lb.l_f, lb.l_mlm, lb.l_vtm):
            assert value >= 0.0

    def test_zero_weights_leave_parameters_unchanged(self):
        cfg = SMALL.replaced(
            weight_coarse=0.0, weight_fine=0.0, weight_mlm=0.0, weight_vtm=0.0
        )
        corpus, model, opt, state = small_setup(cfg)
        before = {p.name: p.data.copy() for p in model.parameters()}
        lb = training_step(model, state, corpus.train[:4], Rng(2), opt)
        assert lb.total == 0.0
        for p in model.parameters():
            assert np.array_equal(p.data, before[p.name])

    def test_no_gradient_reaches_momentum_copy_or_queue(self):
        corpus, model, opt, state = small_setup()
        training_step(model, state, corpus.train[:4], Rng(3), opt)
        first_batch_rows = state.video_queue.cls_array().copy()
        training_step(model, state, corpus.train[:4], Rng(4), opt)
        for p in state.encoders.parameters():
            assert np.array_equal(p.grad, np.zeros_like(p.grad))
        # rows enqueued by step 1 sit at the front and must be untouched
        assert np.array_equal(
            state.video_queue.cls_array()[: len(first_batch_rows)],
            first_batch_rows,
        )

    def test_fifty_seeded_steps_descend_on_fixed_toy_batch(self):
        # queue disabled so the candidate count (and hence the loss scale)
        # is constant across steps; teacher sped up to follow 50 steps
        cfg = SMALL.replaced(queue_cap=0, momentum=0.5, lr=3e-3)
        corpus, model, opt, state = small_setup(cfg)
        batch = corpus.train[:4]
        first = training_step(model, state, batch, Rng(0).child("step", 0), opt)
        last = None
        for k in range(1, 50):
            last = training_step(model, state, batch, Rng(0).child("step", k), opt)
        assert last.total < first.total

    def test_identical_seeds_identical_trajectories(self):
        def run():
            corpus, model, opt, state = small_setup()
            batch = corpus.train[:4]
            return [
                training_step(model, state, batch, Rng(9).child("step", k), opt)
                for k in range(5)
            ]

        a, b = run(), run()
        for lb1, lb2 in zip(a, b):
            assert lb1.total == lb2.total
            assert (lb1.l_c, lb1.l_f, lb1.l_mlm, lb1.l_vtm) == (
                lb2.l_c, lb2.l_f, lb2.l_mlm, lb2.l_vtm,
            )

    def test_finetune_mode_skips_mlm(self):
        cfg = SMALL.replaced(finetune=True)
        corpus, model, opt, state = small_setup(cfg)
        lb = training_step(model, state, corpus.train[:4], Rng(5), opt)
        assert lb.l_mlm == 0.0
        assert lb.l_c > 0.0 and lb.l_vtm > 0.0


def test_full_loss_gradients_via_batch_losses():
    corpus, model, opt, state = small_setup()
    samples = corpus.train[:2]
    rng = Rng(77)

    def total_loss():
        parts = batch_losses(model, state, samples, rng)
        out = None
        for term in parts.values():
            out = term if out is None else out + term
        return out

    report = grad_check(
        total_loss, model.parameters(), tol=1e-4, max_entries_per_param=2
    )
    assert report.passed, report.summary()
