"""Caption decoder forward passes: plain and mask-gated soft attention.

Architecture, per decoding step t (teacher-forced during training):

    x_t   = I_v ++ w_t                      (global feature ++ word embedding)
    h1_t  = LSTM-1(x_t, h1_{t-1})
    e_tj  = reduce(tanh(W_ae a_vj + W_he h1_t))     per entity slot j
    alpha = softmax(e)                       or the mask-gated variant below
    a_hat = sum_j alpha_j a_vj
    x'_t  = a_hat + h1_t                     (requires entity dim == hidden1,
                                              or the optional learned projection)
    h2_t  = LSTM-2(x'_t, h2_{t-1})
    p     = softmax(W_vocab (I_v ++ h2_t))

Masked attention multiplies the unnormalized weights per slot by a mask value
in [0, 1] before normalizing:

    alpha_j = exp(e_j) m_j / sum_k exp(e_k) m_k

computed stably as softmax(e) * m renormalized, which is algebraically
identical. If the renormalizer falls below ``DEGENERATE_EPS`` (an all-zero
mask), the step falls back to unmasked attention and is flagged rather than
producing NaN. Multiplying the whole mask by any c > 0 leaves alpha unchanged,
so only relative mask magnitudes matter.

The caption loss is the sum over steps of the negative log-likelihood of the
ground-truth token (BOS-fed, EOS-inclusive targets). The interpretable model
adds a binary cross-entropy term pulling the per-slot predicted mask toward
the rule-built ground-truth mask; the two terms are summed with a weight
knob that defaults to 1 (a plain unweighted sum).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import CellParams, Tensor
from .data import Vocabulary
from .errors import DomainError, ParseError, ShapeError

DEGENERATE_EPS = 1e-12
MASK_PRED_CLAMP = 1e-7

CHECKPOINT_MAGIC = b"MASKCAP\x01"


@dataclass
class ModelConfig:
    """Dimensions of every learnable tensor.

    Paper-scale reference values: hidden1 = hidden2 = mask_hidden = 512,
    entity features 500-dim over 15 slots (or 2048-dim over 36 region slots),
    2048-dim global features, vocab 9989. Desk-scale defaults are small
    enough for finite-difference checks and laptop training.
    """

    global_dim: int = 16
    entity_dim: int = 16
    entity_slots: int = 4
    word_dim: int = 16
    hidden1: int = 32
    hidden2: int = 32
    attn_dim: int = 16
    vocab_size: int = 64
    mask_hidden: int = 32
    project_entities: bool = False

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name != "project_entities" and value < 1:
                raise DomainError(f"config field {name} must be positive, got {value}")
        if not self.project_entities and self.entity_dim != self.hidden1:
            raise ShapeError(
                f"attended features (dim {self.entity_dim}) are added to hidden1 "
                f"(dim {self.hidden1}); set project_entities=True or make them equal")

    @classmethod
    def paper_scale(cls, vocab_size=9989, region_features=False):
        if region_features:
            entity_dim, slots = 2048, 36
        else:
            entity_dim, slots = 500, 15
        return cls(global_dim=2048, entity_dim=entity_dim, entity_slots=slots,
                   word_dim=300, hidden1=512, hidden2=512, attn_dim=512,
                   vocab_size=vocab_size, mask_hidden=512, project_entities=True)


@dataclass
class ModelParams:
    """Every learnable tensor of both model variants.

    The mask MLP is always present; the plain model simply never touches it,
    which keeps checkpoints interchangeable for shared-parameter comparisons.
    """

    config: ModelConfig
    word_embedding: Tensor
    cell1: CellParams
    cell2: CellParams
    w_ae: Tensor
    w_he: Tensor
    w_reduce: Tensor
    w_vocab: Tensor
    mask_w1: Tensor
    mask_b1: Tensor
    mask_w2: Tensor
    mask_b2: Tensor
    entity_proj: Tensor | None = None

    def named(self):
        pairs = [
            ("word_embedding", self.word_embedding),
            ("cell1.w", self.cell1.w), ("cell1.b", self.cell1.b),
            ("cell2.w", self.cell2.w), ("cell2.b", self.cell2.b),
            ("w_ae", self.w_ae), ("w_he", self.w_he), ("w_reduce", self.w_reduce),
            ("w_vocab", self.w_vocab),
            ("mask_w1", self.mask_w1), ("mask_b1", self.mask_b1),
            ("mask_w2", self.mask_w2), ("mask_b2", self.mask_b2),
        ]
        if self.entity_proj is not None:
            pairs.append(("entity_proj", self.entity_proj))
        return pairs

    def tensors(self):
        return [t for _, t in self.named()]

    @property
    def dtype(self):
        return self.word_embedding.data.dtype


def init_params(config, seed=0, dtype=np.float64):
    """Uniform(-0.08, 0.08) weights, zero biases, forget-gate bias 1.0."""
    rng = np.random.default_rng(seed)

    def weight(*shape):
        return Tensor(rng.uniform(-0.08, 0.08, size=shape).astype(dtype),
                      requires_grad=True)

    def cell(n_in, hidden):
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden:2 * hidden] = 1.0
        return CellParams(w=weight(4 * hidden, n_in + hidden),
                          b=Tensor(b, requires_grad=True))

    c = config
    return ModelParams(
        config=c,
        word_embedding=weight(c.vocab_size, c.word_dim),
        cell1=cell(c.global_dim + c.word_dim, c.hidden1),
        cell2=cell(c.hidden1, c.hidden2),
        w_ae=weight(c.attn_dim, c.entity_dim),
        w_he=weight(c.attn_dim, c.hidden1),
        w_reduce=weight(c.attn_dim),
        w_vocab=weight(c.vocab_size, c.global_dim + c.hidden2),
        mask_w1=weight(c.mask_hidden, c.entity_dim),
        mask_b1=Tensor(np.zeros(c.mask_hidden, dtype=dtype), requires_grad=True),
        mask_w2=weight(c.mask_hidden),
        mask_b2=Tensor(np.zeros((), dtype=dtype), requires_grad=True),
        entity_proj=weight(c.hidden1, c.entity_dim) if c.project_entities else None,
    )


def _const(value, params):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=params.dtype))


# ---------------------------------------------------------------------------
# attention


def _entity_projection(entities, params):
    return ad.matmul(entities, ad.transpose(params.w_ae))


def _attention_scores(e_proj, h1, params):
    q = ad.matmul(params.w_he, h1)
    return ad.matmul(ad.tanh(ad.add(e_proj, q)), params.w_reduce)


def _normalize_masked(scores, mask):
    """softmax(scores) gated by mask; returns (alpha, degenerate_flag)."""
    s = ad.softmax(scores)
    if mask is None:
        return s, False
    gated = ad.mul(s, mask)
    denom = ad.tensor_sum(gated)
    if float(denom.data) < DEGENERATE_EPS:
        return s, True
    return ad.div(gated, denom), False


def attend(h1, entities, params):
    """Soft attention over entity slots: (alpha, attended feature)."""
    h1 = _const(h1, params)
    entities = _const(entities, params)
    if entities.data.ndim != 2 or entities.data.shape[0] < 1:
        raise ShapeError(f"entities must be (L, D) with L >= 1, got {entities.data.shape}")
    scores = _attention_scores(_entity_projection(entities, params), h1, params)
    alpha = ad.softmax(scores)
    return alpha, ad.matmul(alpha, entities)


def attend_masked(h1, entities, mask, params):
    """Mask-gated attention: (alpha, attended feature, degenerate_flag)."""
    h1 = _const(h1, params)
    entities = _const(entities, params)
    mask_t = _const(mask, params)
    if mask_t.data.shape != (entities.data.shape[0],):
        raise ShapeError(f"mask length {mask_t.data.shape} does not match "
                         f"{entities.data.shape[0]} entity slots")
    if not isinstance(mask, Tensor):
        if ((mask_t.data < 0) | (mask_t.data > 1)).any():
            raise DomainError("mask entries must lie in [0, 1]")
    scores = _attention_scores(_entity_projection(entities, params), h1, params)
    alpha, degenerate = _normalize_masked(scores, mask_t)
    return alpha, ad.matmul(alpha, entities), degenerate


def predict_mask(entities, params):
    """Per-slot selection scores in (0, 1); slots are scored independently."""
    entities = _const(entities, params)
    hidden = ad.tanh(ad.add(ad.matmul(entities, ad.transpose(params.mask_w1)),
                            params.mask_b1))
    return ad.sigmoid(ad.add(ad.matmul(hidden, params.mask_w2), params.mask_b2))


# ---------------------------------------------------------------------------
# full passes


@dataclass
class ForwardTrace:
    """Per-step inspection data; plain numpy, detached from the tape."""

    alphas: list = field(default_factory=list)
    probs: list = field(default_factory=list)
    h1s: list = field(default_factory=list)
    h2s: list = field(default_factory=list)
    degenerate_steps: list = field(default_factory=list)
    mask_pred: np.ndarray | None = None
    mask_used: np.ndarray | None = None
    nll: float = 0.0
    bce: float = 0.0

    @property
    def degenerate(self):
        return any(self.degenerate_steps)

    def attention_matrix(self):
        return np.stack(self.alphas) if self.alphas else np.zeros((0, 0))


def _check_sample(sample, config):
    if len(sample.global_feature) != config.global_dim:
        raise ShapeError(f"sample {sample.id}: global dim {len(sample.global_feature)} "
                         f"!= config {config.global_dim}")
    if len(sample.entities[0].feature) != config.entity_dim:
        raise ShapeError(f"sample {sample.id}: entity dim "
                         f"{len(sample.entities[0].feature)} != config {config.entity_dim}")


def _teacher_forced(params, sample, input_ids, target_ids, attn_mask, trace):
    """Shared decode loop; returns the summed NLL over EOS-inclusive targets."""
    c = params.config
    dtype = params.dtype
    iv = Tensor(np.asarray(sample.global_feature, dtype=dtype))
    entities = Tensor(np.asarray(sample.entity_matrix(), dtype=dtype))
    e_proj = _entity_projection(entities, params)
    h1 = Tensor(np.zeros(c.hidden1, dtype=dtype))
    c1 = Tensor(np.zeros(c.hidden1, dtype=dtype))
    h2 = Tensor(np.zeros(c.hidden2, dtype=dtype))
    c2 = Tensor(np.zeros(c.hidden2, dtype=dtype))

    loss = None
    for tok_in, tok_out in zip(input_ids, target_ids):
        w = ad.take_row(params.word_embedding, tok_in)
        x = ad.concat(iv, w)
        h1, c1 = ad.lstm_cell(x, h1, c1, params.cell1)
        scores = _attention_scores(e_proj, h1, params)
        alpha, degenerate = _normalize_masked(scores, attn_mask)
        a_hat = ad.matmul(alpha, entities)
        if params.entity_proj is not None:
            a_hat = ad.matmul(params.entity_proj, a_hat)
        xp = ad.add(a_hat, h1)
        h2, c2 = ad.lstm_cell(xp, h2, c2, params.cell2)
        logits = ad.matmul(params.w_vocab, ad.concat(iv, h2))
        logp = ad.log_softmax(logits)
        step_loss = ad.mul(ad.pick(logp, tok_out), _const(-1.0, params))
        loss = step_loss if loss is None else ad.add(loss, step_loss)

        trace.alphas.append(alpha.data.copy())
        trace.probs.append(np.exp(logp.data))
        trace.h1s.append(h1.data.copy())
        trace.h2s.append(h2.data.copy())
        trace.degenerate_steps.append(degenerate)
    return loss


def _encode_caption(caption, vocab):
    ids = vocab.encode(caption)
    return [vocab.bos] + ids, ids + [vocab.eos]


def forward_base(sample, caption, params, vocab):
    """Teacher-forced caption NLL of the plain model, plus its trace."""
    _check_sample(sample, params.config)
    input_ids, target_ids = _encode_caption(caption, vocab)
    trace = ForwardTrace()
    loss = _teacher_forced(params, sample, input_ids, target_ids, None, trace)
    trace.nll = float(loss.data)
    return loss, trace


def forward_interpret(sample, caption, mask_gt, params, vocab, lambda_mask=1.0,
                      mask_override=None):
    """Joint loss: masked-attention caption NLL + lambda * mask BCE.

    Attention is gated by the predicted mask (computed once per sample, not
    per step) unless ``mask_override`` pins it, e.g. for neutrality checks or
    human-in-the-loop decoding. BCE always compares the predicted mask to
    ``mask_gt``, with predictions clamped away from {0, 1}.
    """
    _check_sample(sample, params.config)
    n_slots = sample.num_entities
    bits = np.asarray(getattr(mask_gt, "bits", mask_gt), dtype=params.dtype)
    if bits.shape != (n_slots,):
        raise ShapeError(f"ground-truth mask has shape {bits.shape}, "
                         f"sample has {n_slots} entity slots")

    entities = Tensor(np.asarray(sample.entity_matrix(), dtype=params.dtype))
    mask_pred = predict_mask(entities, params)
    if mask_override is not None:
        override = np.asarray(mask_override, dtype=params.dtype)
        if override.shape != (n_slots,):
            raise ShapeError(f"mask override has shape {override.shape}, "
                             f"sample has {n_slots} entity slots")
        if ((override < 0) | (override > 1)).any():
            raise DomainError("mask override entries must lie in [0, 1]")
        attn_mask = Tensor(override)
    else:
        attn_mask = mask_pred

    input_ids, target_ids = _encode_caption(caption, vocab)
    trace = ForwardTrace()
    nll = _teacher_forced(params, sample, input_ids, target_ids, attn_mask, trace)

    gt = Tensor(bits)
    one = _const(np.ones(n_slots), params)
    p_hit = ad.clip(mask_pred, MASK_PRED_CLAMP, 1.0 - MASK_PRED_CLAMP)
    p_miss = ad.clip(ad.sub(one, mask_pred), MASK_PRED_CLAMP, 1.0 - MASK_PRED_CLAMP)
    bce_terms = ad.add(ad.mul(gt, ad.log(p_hit)), ad.mul(ad.sub(one, gt), ad.log(p_miss)))
    bce = ad.mul(ad.tensor_sum(bce_terms), _const(-1.0, params))

    loss = ad.add(nll, ad.mul(bce, _const(float(lambda_mask), params)))
    trace.nll = float(nll.data)
    trace.bce = float(bce.data)
    trace.mask_pred = mask_pred.data.copy()
    trace.mask_used = attn_mask.data.copy()
    return loss, trace


def forward_inference(sample, caption, params, vocab, kind="base", mask_override=None):
    """Trace-only teacher-forced pass (no loss tensor needed)."""
    if kind == "base":
        _, trace = forward_base(sample, caption, params, vocab)
    else:
        zeros = np.zeros(sample.num_entities)
        _, trace = forward_interpret(sample, caption, zeros, params, vocab,
                                     lambda_mask=0.0, mask_override=mask_override)
    return trace


# ---------------------------------------------------------------------------
# stepwise decoding interface (used by beam search and the service)


@dataclass
class DecodeContext:
    iv: Tensor
    entities: Tensor
    e_proj: Tensor
    mask: Tensor | None
    mask_pred: np.ndarray | None


def prepare_decode(params, sample, mode="base", mask_override=None):
    """Precompute per-sample constants; resolves the mask for interpret mode."""
    _check_sample(sample, params.config)
    dtype = params.dtype
    entities = Tensor(np.asarray(sample.entity_matrix(), dtype=dtype))
    mask = None
    mask_pred = None
    if mode == "interpret":
        mask_pred = predict_mask(entities, params).data.copy()
        if mask_override is not None:
            override = np.asarray(mask_override, dtype=dtype)
            if override.shape != (sample.num_entities,):
                raise ShapeError(f"mask override has shape {override.shape}, sample has "
                                 f"{sample.num_entities} entity slots")
            if ((override < 0) | (override > 1)).any():
                raise DomainError("mask override entries must lie in [0, 1]")
            mask = Tensor(override)
        else:
            mask = Tensor(mask_pred.copy())
    elif mask_override is not None:
        raise DomainError("mask_override is only valid in interpret mode")
    return DecodeContext(
        iv=Tensor(np.asarray(sample.global_feature, dtype=dtype)),
        entities=entities,
        e_proj=_entity_projection(entities, params),
        mask=mask,
        mask_pred=mask_pred,
    )


def initial_state(params):
    c = params.config
    dtype = params.dtype
    return (np.zeros(c.hidden1, dtype=dtype), np.zeros(c.hidden1, dtype=dtype),
            np.zeros(c.hidden2, dtype=dtype), np.zeros(c.hidden2, dtype=dtype))


def decode_step(params, ctx, state, token_id):
    """One inference step: (new_state, log-probs, alpha, degenerate_flag)."""
    h1, c1, h2, c2 = (Tensor(s) for s in state)
    w = ad.take_row(params.word_embedding, token_id)
    x = ad.concat(ctx.iv, w)
    h1, c1 = ad.lstm_cell(x, h1, c1, params.cell1)
    scores = _attention_scores(ctx.e_proj, h1, params)
    alpha, degenerate = _normalize_masked(scores, ctx.mask)
    a_hat = ad.matmul(alpha, ctx.entities)
    if params.entity_proj is not None:
        a_hat = ad.matmul(params.entity_proj, a_hat)
    xp = ad.add(a_hat, h1)
    h2, c2 = ad.lstm_cell(xp, h2, c2, params.cell2)
    logits = ad.matmul(params.w_vocab, ad.concat(ctx.iv, h2))
    logp = ad.log_softmax(logits)
    new_state = (h1.data, c1.data, h2.data, c2.data)
    return new_state, logp.data, alpha.data, degenerate


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, vocab, seed, kind):
    """Versioned binary container; layout documented in docs/FORMATS.md.

    magic `MASKCAP\\x01`, uint32-LE header length, JSON header carrying the
    config, vocabulary, seed, kind and tensor manifest, then each tensor's
    values as raw little-endian float64 in C order, manifest order.
    """
    named = params.named()
    header = {
        "version": 1,
        "kind": kind,
        "seed": int(seed),
        "config": asdict(params.config),
        "vocab": list(vocab.tokens),
        "tensors": [{"name": n, "shape": list(t.data.shape)} for n, t in named],
    }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    params: ModelParams
    vocab: Vocabulary
    seed: int
    kind: str


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: not a maskcap checkpoint (bad magic)")
        (length,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(length).decode("utf-8"))
        config = ModelConfig(**header["config"])
        tensors = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ParseError(f"{path}: truncated tensor {spec['name']}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            tensors[spec["name"]] = Tensor(arr, requires_grad=True)

    params = ModelParams(
        config=config,
        word_embedding=tensors["word_embedding"],
        cell1=CellParams(w=tensors["cell1.w"], b=tensors["cell1.b"]),
        cell2=CellParams(w=tensors["cell2.w"], b=tensors["cell2.b"]),
        w_ae=tensors["w_ae"], w_he=tensors["w_he"], w_reduce=tensors["w_reduce"],
        w_vocab=tensors["w_vocab"],
        mask_w1=tensors["mask_w1"], mask_b1=tensors["mask_b1"],
        mask_w2=tensors["mask_w2"], mask_b2=tensors["mask_b2"],
        entity_proj=tensors.get("entity_proj"),
    )
    vocab = Vocabulary(header["vocab"][4:])
    return Checkpoint(params=params, vocab=vocab, seed=header["seed"], kind=header["kind"])
