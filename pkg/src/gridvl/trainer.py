"""Training orchestration: seeded step loop, loss CSV, checkpoint cadence.

Every step derives its randomness from (seed, step index) alone, so a run
resumed from a checkpoint replays the remaining steps bitwise-identically
to an uninterrupted run (the checkpoint carries optimizer moments, the
momentum copy, and the queues along with the parameters).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import LossBreakdown
from .checkpoint import (
    load_checkpoint,
    restore_training_state,
    save_checkpoint,
    training_state_arrays,
)
from .config import RunConfig
from .data import Corpus, CorpusConfig, generate_corpus
from .model import VideoTextModel
from .objectives import AdamW, training_step
from .rng import Rng
from .tensor import set_precision

LOSS_CSV_NAME = "loss_log.csv"
CSV_HEADER = "step,l_c,l_f,l_mlm,l_vtm,total"


def corpus_config(cfg: RunConfig) -> CorpusConfig:
    return CorpusConfig(
        n_train=cfg.corpus_train,
        n_val=cfg.corpus_val,
        n_test=cfg.corpus_test,
        seed=cfg.corpus_seed,
        grid=cfg.grid,
        frames=cfg.frames,
        sigma=cfg.sigma,
        n_colors=cfg.n_colors,
        n_shapes=cfg.n_shapes,
        max_objects=cfg.max_objects,
        contrast_mode=cfg.contrast_mode,
        allow_diagonal=cfg.allow_diagonal,
    )


def loss_csv_row(step: int, lb: LossBreakdown) -> str:
    return ",".join(
        [str(step)]
        + [repr(v) for v in (lb.l_c, lb.l_f, lb.l_mlm, lb.l_vtm, lb.total)]
    )


@dataclass
class TrainResult:
    config: RunConfig
    checkpoint_dir: Path
    losses: list[LossBreakdown] = field(default_factory=list)
    csv_rows: list[str] = field(default_factory=list)
    model: VideoTextModel | None = None
    corpus: Corpus | None = None

    @property
    def final_total(self) -> float:
        return self.losses[-1].total if self.losses else float("nan")


def build_training(cfg: RunConfig):
    """Model, optimizer, and momentum state for a config (fresh)."""
    set_precision(cfg.precision)
    model = VideoTextModel(cfg)
    optimizer = AdamW(
        model.parameters(),
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
        warmup_steps=cfg.warmup_steps,
        total_steps=cfg.steps,
    )
    state = model.new_momentum_state()
    return model, optimizer, state


def run_pretraining(
    cfg: RunConfig,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
    corpus: Corpus | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Run the step budget; writes loss_log.csv and checkpoints under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if corpus is None:
        corpus = generate_corpus(corpus_config(cfg))
    train_split = corpus.train
    model, optimizer, state = build_training(cfg)

    start_step = 0
    if resume_from is not None:
        arrays, manifest = load_checkpoint(resume_from)
        restore_training_state(model, optimizer, state, arrays)
        start_step = int(manifest["step"])

    result = TrainResult(config=cfg, checkpoint_dir=out / "checkpoint")
    csv_path = out / LOSS_CSV_NAME
    mode = "a" if (resume_from is not None and csv_path.exists()) else "w"
    with open(csv_path, mode, encoding="utf-8") as csv:
        if mode == "w":
            csv.write(CSV_HEADER + "\n")
        for k in range(start_step, cfg.steps):
            step_rng = Rng(cfg.seed).child("step", k)
            picks = step_rng.child("batch").integers(
                0, len(train_split), shape=cfg.batch_size
            )
            samples = [train_split[i] for i in picks]
            lb = training_step(model, state, samples, step_rng, optimizer)
            result.losses.append(lb)
            row = loss_csv_row(k, lb)
            result.csv_rows.append(row)
            csv.write(row + "\n")
            if log_every and (k + 1) % log_every == 0:
                print(f"step {k + 1}/{cfg.steps}: total={lb.total:.4f}")
            if cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
                _save(model, optimizer, state, cfg, k + 1, out / f"step{k + 1:06d}")
    _save(model, optimizer, state, cfg, cfg.steps, result.checkpoint_dir)
    result.model = model
    result.corpus = corpus
    return result


def _save(model, optimizer, state, cfg: RunConfig, step: int, path: Path) -> Path:
    return save_checkpoint(
        path,
        training_state_arrays(model, optimizer, state),
        config=cfg.to_dict(),
        seed=cfg.seed,
        step=step,
        precision=cfg.precision,
    )


def load_model(checkpoint_path: str | Path) -> tuple[VideoTextModel, dict]:
    """Rebuild the model recorded in a checkpoint and load its parameters."""
    from .checkpoint import restore_model

    arrays, manifest = load_checkpoint(checkpoint_path)
    cfg = RunConfig.from_dict(manifest["config"])
    set_precision(cfg.precision)
    model = VideoTextModel(cfg)
    restore_model(model, arrays)
    return model, manifest


ABLATION_COLUMNS = ("R@1", "R@5", "R@10", "MedR", "traj_score")


def run_ablation(
    cfg: RunConfig,
    variants: list[str],
    seeds: list[int],
    out_dir: str | Path,
    eval_split: str = "val",
    eval_mode: str = "vtc_zero_shot",
) -> list[dict]:
    """Train every preset at every seed with an identical budget and report
    per-variant medians of held-out retrieval plus the trajectory score."""
    from .export import mean_word_truth_attention
    from .retrieval import eval_retrieval

    if not seeds:
        raise ValueError("at least one seed is required")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(corpus_config(cfg))
    rows: list[dict] = []
    for preset in variants:
        per_seed = {col: [] for col in ABLATION_COLUMNS}
        for seed in seeds:
            run_cfg = cfg.with_preset(preset).replaced(seed=seed)
            result = run_pretraining(
                run_cfg, out / f"{preset}_seed{seed}", corpus=corpus
            )
            report = eval_retrieval(
                result.model,
                corpus.split(eval_split),
                mode=eval_mode,
                rerank_k=cfg.eval_rerank_k,
            )
            per_seed["R@1"].append(report.r1)
            per_seed["R@5"].append(report.r5)
            per_seed["R@10"].append(report.r10)
            per_seed["MedR"].append(report.med_r)
            per_seed["traj_score"].append(
                mean_word_truth_attention(
                    result.model, corpus.train, layer=cfg.export_layer
                )
            )
        rows.append(
            {"variant": preset}
            | {col: float(np.median(per_seed[col])) for col in ABLATION_COLUMNS}
        )
    _write_ablation_tables(rows, out)
    return rows


def _write_ablation_tables(rows: list[dict], out: Path) -> None:
    header = ["variant", *ABLATION_COLUMNS]
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    csv = [",".join(header)]
    for row in rows:
        values = [row["variant"]] + [f"{row[c]:.3f}" for c in ABLATION_COLUMNS]
        md.append("| " + " | ".join(values) + " |")
        csv.append(",".join(values))
    (out / "ablation.md").write_text("\n".join(md) + "\n", encoding="utf-8")
    (out / "ablation.csv").write_text("\n".join(csv) + "\n", encoding="utf-8")
