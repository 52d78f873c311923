"""Calibration runs for the desk-scale learning experiments.

Trains the full-preset model in finetune mode on the 64-pair corpus and
prints train/held-out retrieval plus trajectory-attention scores along
the way, for several seeds, so the acceptance thresholds and budgets can
be frozen against observed behavior.
"""

from __future__ import annotations

import sys
import time

import numpy as np

from gridvl.config import RunConfig
from gridvl.data import generate_corpus
from gridvl.export import mean_word_truth_attention
from gridvl.model import VideoTextModel
from gridvl.objectives import training_step
from gridvl.retrieval import eval_retrieval
from gridvl.rng import Rng
from gridvl.trainer import build_training, corpus_config


def run(seed: int, cfg: RunConfig, eval_every: int = 100) -> dict:
    cfg = cfg.replaced(seed=seed)
    corpus = generate_corpus(corpus_config(cfg))
    model, optimizer, state = build_training(cfg)
    t0 = time.time()
    for k in range(cfg.steps):
        step_rng = Rng(cfg.seed).child("step", k)
        picks = step_rng.child("batch").integers(
            0, len(corpus.train), shape=cfg.batch_size
        )
        samples = [corpus.train[i] for i in picks]
        training_step(model, state, samples, step_rng, optimizer)
        if (k + 1) % eval_every == 0 or k + 1 == cfg.steps:
            train_rep = eval_retrieval(model, corpus.train)
            val_rep = eval_retrieval(model, corpus.val)
            traj0 = mean_word_truth_attention(model, corpus.train[:16], layer=0)
            traj1 = (
                mean_word_truth_attention(model, corpus.train[:16], layer=1)
                if cfg.l_cross > 1
                else float("nan")
            )
            print(
                f"  seed {seed} step {k + 1:4d}: train R@1={train_rep.r1:5.1f} "
                f"val R@1={val_rep.r1:5.1f} MedR={val_rep.med_r:4.1f} "
                f"traj L0={traj0:.3f} L1={traj1:.3f} "
                f"({time.time() - t0:6.1f}s)"
            )
    return {
        "train_r1": train_rep.r1,
        "val_r1": val_rep.r1,
        "traj0": traj0,
        "traj1": traj1,
        "seconds": time.time() - t0,
    }


def main() -> None:
    steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
    lr = float(sys.argv[2]) if len(sys.argv) > 2 else 2e-3
    momentum = float(sys.argv[3]) if len(sys.argv) > 3 else 0.99
    queue = int(sys.argv[4]) if len(sys.argv) > 4 else 64
    seeds = [int(s) for s in sys.argv[5].split(",")] if len(sys.argv) > 5 else [0, 1, 2]

    cfg = RunConfig(
        finetune=True,
        steps=steps,
        lr=lr,
        momentum=momentum,
        queue_cap=queue,
        warmup_steps=max(10, steps // 20),
        batch_size=8,
        corpus_train=64,
        corpus_val=64,
        corpus_test=0,
        n_colors=4,
        n_shapes=4,
        contrast_mode=False,
        corpus_seed=7,
    ).with_preset("full").replaced(finetune=True, steps=steps, lr=lr,
                                   momentum=momentum, queue_cap=queue)
    print(
        f"config: steps={cfg.steps} lr={cfg.lr} m={cfg.momentum} "
        f"queue={cfg.queue_cap} batch={cfg.batch_size}"
    )
    results = [run(seed, cfg) for seed in seeds]
    print("\nmedians over seeds:")
    for key in ("train_r1", "val_r1", "traj0", "traj1", "seconds"):
        vals = [r[key] for r in results]
        print(f"  {key}: median={np.median(vals):.3f} all={np.round(vals, 3)}")


if __name__ == "__main__":
    main()
