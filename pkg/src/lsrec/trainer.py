"""Supervised fine-tuning with sequence packing and early stopping.

Examples are packed first-fit into rows of the context length (see
:mod:`lsrec.packing`).

Training log schema (tab-separated, one header line)::

    epoch  steps  examples  train_loss  val_loss  val_hr@10  wall_s
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as tc
from .checkpoint import save_checkpoint
from .dataset import Corpus
from .evaluator import movie_ranks_from_logits
from .model import ModelConfig, hidden_states, init_params, output_logits
from .packing import PackedBatch, first_fit, pack
from .promptgen import (
    SINGLE_TASK,
    TaskKind,
    TrainingExample,
    enumerate_training_set,
    validation_examples,
)
from .tensor import Tensor

__all__ = [
    "PackedBatch",
    "TrainOptions",
    "TrainState",
    "TrainResult",
    "EarlyStopping",
    "TrainingDivergedError",
    "first_fit",
    "pack",
    "batch_loss",
    "example_losses",
    "validation_loss",
    "train",
    "LOG_HEADER",
]

log = logging.getLogger(__name__)

LOG_HEADER = "epoch\tsteps\texamples\ttrain_loss\tval_loss\tval_hr@10\twall_s"


class TrainingDivergedError(RuntimeError):
    pass


def _selected_logits(
    batch: PackedBatch,
    params: dict[str, Tensor],
    config: ModelConfig,
    positions_of_interest: np.ndarray,
    train: bool,
    rng: np.random.Generator | None,
) -> Tensor:
    h = hidden_states(
        batch.tokens, params, config, batch.positions, batch.attention_mask, train, rng
    )
    b, t, d = h.shape
    h2 = tc.take_rows(tc.reshape(h, (b * t, d)), positions_of_interest)
    return output_logits(h2, params)


def batch_loss(
    batch: PackedBatch,
    params: dict[str, Tensor],
    config: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
    reduction: str = "mean",
) -> Tensor:
    """Cross-entropy over the batch's ``loss_mask == 1`` positions.

    Output logits are only formed at those positions.
    """
    sel = np.flatnonzero(batch.loss_mask.reshape(-1))
    if sel.size == 0:
        raise ValueError("batch has no trainable positions")
    logits = _selected_logits(batch, params, config, sel, train, rng)
    return tc.cross_entropy(logits, batch.targets.reshape(-1)[sel], None, reduction)


def example_losses(
    batch: PackedBatch, params: dict[str, Tensor], config: ModelConfig
) -> dict[int, float]:
    """Per-example mean loss (eval mode), keyed by example index."""
    t = batch.tokens.shape[1]
    flat_mask = batch.loss_mask.reshape(-1)
    sel = np.flatnonzero(flat_mask)
    with tc.no_grad():
        logits = _selected_logits(batch, params, config, sel, False, None).data
    z = logits.astype(np.float64)
    lse = np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)) + z.max(1)
    tok_loss = lse - z[np.arange(len(sel)), batch.targets.reshape(-1)[sel]]
    where = {int(p): i for i, p in enumerate(sel)}
    out = {}
    for r, start, n, idx in batch.spans:
        rows = [where[r * t + j] for j in range(start, start + n) if r * t + j in where]
        out[idx] = float(np.mean(tok_loss[rows]))
    return out


@dataclass
class TrainOptions:
    """Run options. Defaults are the SFT settings used for all presets."""

    tasks: tuple[TaskKind, ...] = SINGLE_TASK
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 100
    grad_clip: float = 1.0
    batch_rows: int = 16
    max_epochs: int = 100
    patience: int = 20
    max_steps: int | None = None
    full_loss: bool = False
    deterministic: bool = True
    init_seed: int | None = None
    val_every: int = 1
    hr_k: int = 10


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_best: int = 0
    optimizer: tc.AdamWState | None = None
    rng_state: dict | None = None

    def summary(self) -> dict:
        return {
            "epoch": self.epoch,
            "step": self.step,
            "best_val_loss": self.best_val_loss,
            "best_epoch": self.best_epoch,
        }


class EarlyStopping:
    """Tracks the best validation loss; stop once ``epochs_since_best > patience``."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epochs_since_best = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record one epoch; True if it is a new best."""
        if value < self.best:
            self.best, self.best_epoch, self.epochs_since_best = value, epoch, 0
            return True
        self.epochs_since_best += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.epochs_since_best > self.patience


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    examples: int
    train_loss: float
    val_loss: float
    val_hr: float
    wall_s: float

    def line(self) -> str:
        return (
            f"{self.epoch}\t{self.steps}\t{self.examples}\t{self.train_loss:.6f}\t"
            f"{self.val_loss:.6f}\t{self.val_hr:.6f}\t{self.wall_s:.3f}"
        )


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    config: ModelConfig
    state: TrainState
    history: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    final_params: dict[str, Tensor] | None = None  # weights after the last step


def validation_loss(
    batches: Sequence[PackedBatch],
    params: dict[str, Tensor],
    config: ModelConfig,
    corpus: Corpus,
    examples: Sequence[TrainingExample],
    hr_k: int = 10,
) -> tuple[float, float]:
    """Mean masked loss and HR@k (history excluded) over validation batches."""
    vocab = corpus.vocab
    total, count, hits = 0.0, 0, 0
    t = batches[0].tokens.shape[1] if batches else 0
    with tc.no_grad():
        for batch in batches:
            sel = np.flatnonzero(batch.loss_mask.reshape(-1))
            logits = _selected_logits(batch, params, config, sel, False, None)
            loss = tc.cross_entropy(logits, batch.targets.reshape(-1)[sel], None, "sum")
            total += float(loss.data)
            count += sel.size
            # row of the START position of each example = first masked position
            where = {int(p): i for i, p in enumerate(sel)}
            for r, start, n, idx in batch.spans:
                ex = examples[idx]
                row = where[r * t + start + n - 3]
                seq = corpus.user(ex.user_id)
                history = [vocab.movie_token(m) for m in seq.movie_ids[: seq.val_target_index]]
                rank = movie_ranks_from_logits(logits.data[row], history, ex.target, vocab)
                hits += rank is not None and rank <= hr_k
    n_ex = len(examples)
    return total / max(count, 1), hits / max(n_ex, 1)


def _lr_at(step: int, options: TrainOptions) -> float:
    if options.warmup_steps <= 0:
        return options.lr
    return options.lr * min(1.0, step / options.warmup_steps)


def _grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    out = {}
    for k, p in params.items():
        out[k] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    return out


def train(
    corpus: Corpus,
    config: ModelConfig,
    options: TrainOptions | None = None,
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train from scratch; return the parameters with the lowest validation loss."""
    options = options or TrainOptions()
    if not corpus.sequences:
        raise ValueError("corpus has no sequences")
    if config.vocab_size != len(corpus.vocab):
        raise ValueError(f"config vocab_size {config.vocab_size} != vocabulary {len(corpus.vocab)}")
    limiter = None
    if options.deterministic:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=1)
    try:
        return _train(corpus, config, options, checkpoint_path, log_path, on_epoch)
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


def _train(corpus, config, options, checkpoint_path, log_path, on_epoch) -> TrainResult:
    t_len = config.context_length
    init_seed = options.seed if options.init_seed is None else options.init_seed
    params = init_params(config, init_seed)
    opt = tc.AdamWState(params)
    rng = np.random.default_rng([options.seed, 0x5EED])
    state = TrainState(optimizer=opt)
    stopper = EarlyStopping(options.patience)
    val_ex = validation_examples(corpus, "val", t_len)
    val_batches = pack(val_ex, t_len, options.batch_rows)
    best = {k: p.data.copy() for k, p in params.items()}
    result = TrainResult(params, config, state)
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", encoding="utf-8")
        log_file.write(LOG_HEADER + "\n")
    t0 = time.perf_counter()
    try:
        for epoch in range(1, options.max_epochs + 1):
            state.epoch = epoch
            examples = list(
                enumerate_training_set(
                    corpus, options.tasks, options.seed, epoch, t_len, options.full_loss
                )
            )
            batches = pack(examples, t_len, options.batch_rows)
            order = rng.permutation(len(batches))
            tot, cnt = 0.0, 0
            for bi in order:
                batch = batches[bi]
                n_tok = int(batch.loss_mask.sum())
                loss = batch_loss(batch, params, config, train=True, rng=rng)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss {value} at epoch {epoch}, batch {int(bi)}, step {state.step}"
                    )
                tc.backward(loss)
                grads = _grads(params)
                tc.clip_grad_norm(grads, options.grad_clip)
                state.step += 1
                tc.adamw_step(
                    params, grads, opt, _lr_at(state.step, options), options.beta1,
                    options.beta2, options.eps, options.weight_decay,
                )
                result.step_losses.append(value)
                tot += value * n_tok
                cnt += n_tok
                if options.max_steps is not None and state.step >= options.max_steps:
                    break
            val_loss, val_hr = validation_loss(
                val_batches, params, config, corpus, val_ex, options.hr_k
            )
            rec = EpochRecord(
                epoch, state.step, len(examples), tot / max(cnt, 1), val_loss, val_hr,
                time.perf_counter() - t0,
            )
            result.history.append(rec)
            log.info(rec.line())
            if log_file is not None:
                log_file.write(rec.line() + "\n")
                log_file.flush()
            if on_epoch is not None:
                on_epoch(rec)
            if stopper.update(val_loss, epoch):
                best = {k: p.data.copy() for k, p in params.items()}
                state.best_val_loss, state.best_epoch = val_loss, epoch
            state.epochs_since_best = stopper.epochs_since_best
            if stopper.should_stop:
                break
            if options.max_steps is not None and state.step >= options.max_steps:
                break
    finally:
        if log_file is not None:
            log_file.close()
    state.rng_state = rng.bit_generator.state
    result.final_params = {k: Tensor(p.data.copy()) for k, p in params.items()}
    result.params = {k: Tensor(v, requires_grad=True) for k, v in best.items()}
    if checkpoint_path is not None:
        save_checkpoint(result.params, config, checkpoint_path, corpus.vocab.hash(), state.summary())
    return result
