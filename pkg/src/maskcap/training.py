"""Optimization loop: Adam with global-norm gradient clipping, plateau
learning-rate schedule, teacher forcing, best-validation checkpointing.

Defaults follow the reference recipe exactly: lr 0.001, mini-batch 50,
25 epochs, clip norm 1.0, lr divided by 10 after 3 consecutive epochs
without validation improvement. Validation loss is the caption NLL alone
for both model kinds, so runs are comparable; the mask BCE is logged
separately. Training is bit-reproducible for a fixed seed and dataset:
samples are visited in seeded-permutation order and gradients are reduced
in a fixed order.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .autodiff import CellParams, Tape, Tensor, zero_grads
from .errors import DomainError, TrainingError

LOG_COLUMNS = ["epoch", "train_nll", "train_bce", "val_nll", "lr", "seconds"]


@dataclass
class TrainConfig:
    lr0: float = 0.001
    batch: int = 50
    epochs: int = 25
    clip_max_norm: float = 1.0
    plateau_factor: float = 10.0
    plateau_patience: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lambda_mask: float = 1.0
    precision: str = "double"

    def __post_init__(self):
        if self.lr0 < 0:
            raise DomainError("lr0 must be non-negative")
        for name in ("batch", "epochs", "plateau_patience"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        if self.clip_max_norm <= 0 or self.plateau_factor <= 1:
            raise DomainError("clip_max_norm must be > 0 and plateau_factor > 1")
        if self.precision not in ("double", "single"):
            raise DomainError("precision must be 'double' or 'single'")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32


@dataclass
class TrainState:
    params: M.ModelParams
    config: TrainConfig
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    lr_divisions: int = 0
    best_val: float = float("inf")
    epochs_since_improvement: int = 0

    def __post_init__(self):
        for name, t in self.params.named():
            self.m.setdefault(name, np.zeros_like(t.data))
            self.v.setdefault(name, np.zeros_like(t.data))

    @property
    def lr(self):
        return self.config.lr0 / self.config.plateau_factor ** self.lr_divisions


def clip_gradients(grads, max_norm):
    """Scale all gradients by max_norm/g when the global L2 norm g exceeds it."""
    if max_norm <= 0:
        raise DomainError("max_norm must be positive")
    total = 0.0
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in parameter {name}")
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


def adam_step(state, grads):
    """Bias-corrected Adam update, applied in place to the state's parameters."""
    cfg = state.config
    state.step += 1
    t = state.step
    lr = state.lr
    for name, param in state.params.named():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        param.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return state


def plateau_schedule(state, val_loss):
    """Divide lr by the plateau factor after `patience` non-improving epochs.

    Improvement means a strict decrease of the best validation loss seen.
    """
    if val_loss < state.best_val:
        state.best_val = val_loss
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement >= state.config.plateau_patience:
            state.lr_divisions += 1
            state.epochs_since_improvement = 0
    return state


def clone_params(params):
    cloned = {name: Tensor(t.data.copy(), requires_grad=True) for name, t in params.named()}
    return M.ModelParams(
        config=params.config,
        word_embedding=cloned["word_embedding"],
        cell1=CellParams(w=cloned["cell1.w"], b=cloned["cell1.b"]),
        cell2=CellParams(w=cloned["cell2.w"], b=cloned["cell2.b"]),
        w_ae=cloned["w_ae"], w_he=cloned["w_he"], w_reduce=cloned["w_reduce"],
        w_vocab=cloned["w_vocab"],
        mask_w1=cloned["mask_w1"], mask_b1=cloned["mask_b1"],
        mask_w2=cloned["mask_w2"], mask_b2=cloned["mask_b2"],
        entity_proj=cloned.get("entity_proj"),
    )


@dataclass
class EpochLog:
    epoch: int
    train_nll: float
    train_bce: float
    val_nll: float
    lr: float
    seconds: float

    def row(self):
        return [self.epoch, repr(self.train_nll), repr(self.train_bce),
                repr(self.val_nll), repr(self.lr), f"{self.seconds:.3f}"]


@dataclass
class TrainResult:
    state: TrainState
    best_params: M.ModelParams
    best_val: float
    log: list
    vocab: object
    checkpoint_path: str | None = None


def _resolve_mask(sample, caption_index, masks):
    if masks is not None:
        entry = masks.get((sample.id, caption_index))
        if entry is None:
            raise TrainingError(f"no mask for ({sample.id}, {caption_index})")
        return getattr(entry, "bits", entry)
    if sample.masks is None:
        raise TrainingError(f"sample {sample.id} has no masks and none were supplied")
    return sample.masks[caption_index]


def _example_loss(kind, sample, ci, params, vocab, masks, lambda_mask):
    caption = sample.captions[ci]
    if kind == "base":
        loss, trace = M.forward_base(sample, caption, params, vocab)
    else:
        gt = _resolve_mask(sample, ci, masks)
        loss, trace = M.forward_interpret(sample, caption, gt, params, vocab,
                                          lambda_mask=lambda_mask)
    return loss, trace


def validation_nll(dataset, params, vocab, kind):
    """Mean per-caption NLL, masked forward for the interpretable kind."""
    pairs = dataset.caption_pairs()
    if not pairs:
        return float("nan")
    total = 0.0
    for sample, ci in pairs:
        trace = M.forward_inference(sample, sample.captions[ci], params, vocab, kind=kind)
        total += trace.nll
    return total / len(pairs)


def teacher_forced_accuracy(dataset, params, vocab, kind):
    """Fraction of next-token argmax hits under teacher forcing."""
    hits = total = 0
    for sample, ci in dataset.caption_pairs():
        caption = sample.captions[ci]
        trace = M.forward_inference(sample, caption, params, vocab, kind=kind)
        targets = vocab.encode(caption) + [vocab.eos]
        for probs, target in zip(trace.probs, targets):
            hits += int(int(np.argmax(probs)) == target)
            total += 1
    return hits / total if total else 0.0


def train(train_dataset, val_dataset, kind, model_config, train_config,
          vocab=None, masks=None, out_dir=None, seed_for_checkpoint=None):
    """Run the full optimization loop; returns the best-validation model.

    ``masks`` optionally maps (sample_id, caption_index) to bit vectors and
    overrides the gold masks embedded in the dataset (interpret kind only).
    With ``out_dir`` set, writes log.csv, best.ckpt and last.ckpt there.
    """
    if kind not in ("base", "interpret"):
        raise DomainError(f"unknown model kind {kind!r}")
    if vocab is None:
        from .data import build_vocab
        vocab = build_vocab(train_dataset.all_captions())
    if model_config.vocab_size != len(vocab):
        raise TrainingError(f"config vocab_size {model_config.vocab_size} != "
                            f"vocabulary size {len(vocab)}")
    if train_dataset.entity_dim != model_config.entity_dim:
        raise TrainingError(f"dataset entity dim {train_dataset.entity_dim} != "
                            f"config {model_config.entity_dim}")
    if train_dataset.global_dim != model_config.global_dim:
        raise TrainingError(f"dataset global dim {train_dataset.global_dim} != "
                            f"config {model_config.global_dim}")

    params = M.init_params(model_config, seed=train_config.seed, dtype=train_config.dtype)
    state = TrainState(params=params, config=train_config)
    rng = np.random.default_rng(train_config.seed)
    examples = train_dataset.caption_pairs()
    if not examples:
        raise TrainingError("training dataset has no captions")

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "log.csv", "w", newline="", encoding="utf-8")
        csv.writer(log_fh).writerow(LOG_COLUMNS)
        log_fh.flush()

    best_params = clone_params(params)
    best_val = float("inf")
    log_rows = []
    try:
        for epoch in range(1, train_config.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(examples))
            nll_sum = bce_sum = 0.0
            for start in range(0, len(order), train_config.batch):
                batch = [examples[i] for i in order[start:start + train_config.batch]]
                zero_grads(params.tensors())
                for sample, ci in batch:
                    with Tape() as tape:
                        loss, trace = _example_loss(kind, sample, ci, params, vocab,
                                                    masks, train_config.lambda_mask)
                    tape.backward(loss)
                    nll_sum += trace.nll
                    bce_sum += trace.bce
                grads = {}
                inv = 1.0 / len(batch)
                for name, t in params.named():
                    grads[name] = (t.grad * inv) if t.grad is not None \
                        else np.zeros_like(t.data)
                grads = clip_gradients(grads, train_config.clip_max_norm)
                adam_step(state, grads)

            val_nll = validation_nll(val_dataset, params, vocab, kind)
            row = EpochLog(
                epoch=epoch,
                train_nll=nll_sum / len(examples),
                train_bce=bce_sum / len(examples),
                val_nll=val_nll,
                lr=state.lr,
                seconds=time.perf_counter() - t0,
            )
            log_rows.append(row)
            if log_fh is not None:
                csv.writer(log_fh).writerow(row.row())
                log_fh.flush()

            if val_nll < best_val:
                best_val = val_nll
                best_params = clone_params(params)
                if out is not None:
                    M.save_checkpoint(out / "best.ckpt", best_params, vocab,
                                      seed=seed_for_checkpoint if seed_for_checkpoint
                                      is not None else train_config.seed,
                                      kind=kind)
            plateau_schedule(state, val_nll)
    finally:
        if log_fh is not None:
            log_fh.close()

    ckpt_path = None
    if out is not None:
        M.save_checkpoint(out / "last.ckpt", params, vocab,
                          seed=train_config.seed, kind=kind)
        ckpt_path = str(out / "best.ckpt")
    return TrainResult(state=state, best_params=best_params, best_val=best_val,
                       log=log_rows, vocab=vocab, checkpoint_path=ckpt_path)
