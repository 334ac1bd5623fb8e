"""Caption generation: greedy and beam search, with optional mask override.

Search semantics (mirrored exactly by the exhaustive oracle in the tests):
a hypothesis emits word tokens one per step; emitting EOS finishes it and
adds the EOS log-probability; a hypothesis reaching ``max_len`` words
without EOS is terminal with no EOS term. The decoder never emits PAD, BOS
or UNK. The returned caption is the terminal hypothesis with the highest
cumulative log-probability, ties broken toward the lexicographically
smaller token-id sequence. Scores are raw sums (no length normalization).

The greedy rollout always competes in the terminal pool, so for any beam
width the returned score is at least the greedy score. The search stops
early only when the best ongoing score is strictly below the best terminal
score (extensions never increase a score, but an equal-score continuation
could still win the lexicographic tie-break).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from .errors import DomainError

CAPTION_FILE_HEADER = "#maskcap-captions v1"


@dataclass
class BeamHypothesis:
    tokens: list
    logp: float
    state: tuple
    alphas: list
    finished: bool = False


@dataclass
class GenerationResult:
    tokens: list
    token_ids: list
    logp: float
    attention: np.ndarray
    mask_used: np.ndarray | None
    mask_pred: np.ndarray | None
    degenerate: bool


def _terminal_key(hyp):
    return (-hyp.logp, tuple(hyp.tokens))


def _better(a, b):
    """Terminal preference: higher logp, then lexicographically smaller ids."""
    if b is None:
        return True
    return _terminal_key(a) < _terminal_key(b)


def _greedy_rollout(params, ctx, vocab, max_len):
    state = M.initial_state(params)
    tokens, alphas = [], []
    logp_total = 0.0
    degenerate = False
    token = vocab.bos
    banned = (vocab.pad, vocab.bos, vocab.unk)
    for _ in range(max_len):
        state, logp, alpha, degen = M.decode_step(params, ctx, state, token)
        degenerate = degenerate or degen
        masked = logp.copy()
        masked[list(banned)] = -np.inf
        choice = int(np.argmax(masked))
        logp_total += float(logp[choice])
        alphas.append(alpha)
        if choice == vocab.eos:
            return BeamHypothesis(tokens, logp_total, state, alphas, True), degenerate
        tokens.append(choice)
        token = choice
    return BeamHypothesis(tokens, logp_total, state, alphas, True), degenerate


def generate(sample, params, vocab, mode="base", mask_override=None, beam=5,
             max_len=20):
    """Best caption for one sample under the requested decoding mode."""
    if beam < 1:
        raise DomainError(f"beam width must be >= 1, got {beam}")
    if max_len < 1:
        raise DomainError(f"max_len must be >= 1, got {max_len}")
    if mode not in ("base", "interpret"):
        raise DomainError(f"unknown decode mode {mode!r}")

    ctx = M.prepare_decode(params, sample, mode=mode, mask_override=mask_override)
    banned = (vocab.pad, vocab.bos, vocab.unk)
    degenerate_seen = False

    best, greedy_degen = _greedy_rollout(params, ctx, vocab, max_len)
    degenerate_seen = degenerate_seen or greedy_degen

    if beam > 1:
        start = BeamHypothesis(tokens=[], logp=0.0, state=M.initial_state(params),
                               alphas=[])
        ongoing = [start]
        for _ in range(max_len):
            candidates = []
            for hyp in ongoing:
                prev = hyp.tokens[-1] if hyp.tokens else vocab.bos
                state, logp, alpha, degen = M.decode_step(params, ctx, hyp.state, prev)
                degenerate_seen = degenerate_seen or degen
                for tok in range(len(vocab)):
                    if tok in banned:
                        continue
                    cand = BeamHypothesis(
                        tokens=hyp.tokens + ([] if tok == vocab.eos else [tok]),
                        logp=hyp.logp + float(logp[tok]),
                        state=state,
                        alphas=hyp.alphas + [alpha],
                        finished=(tok == vocab.eos),
                    )
                    if cand.finished:
                        if _better(cand, best):
                            best = cand
                    else:
                        candidates.append(cand)
            candidates.sort(key=_terminal_key)
            ongoing = candidates[:beam]
            if not ongoing or ongoing[0].logp < best.logp:
                break
        # anything still ongoing at max_len is terminal without an EOS term
        for hyp in ongoing:
            hyp.finished = True
            if _better(hyp, best):
                best = hyp

    return GenerationResult(
        tokens=vocab.decode(best.tokens),
        token_ids=list(best.tokens),
        logp=best.logp,
        attention=np.stack(best.alphas) if best.alphas else np.zeros((0, 0)),
        mask_used=(ctx.mask.data.copy() if ctx.mask is not None else None),
        mask_pred=ctx.mask_pred,
        degenerate=degenerate_seen,
    )


def random_binary_mask(n_slots, rng, ensure_nonzero=True):
    """Uniform random subset mask; re-drawn until non-empty when requested."""
    while True:
        mask = (rng.random(n_slots) < 0.5).astype(np.float64)
        if not ensure_nonzero or mask.sum() > 0:
            return mask


def generate_batch(samples, params, vocab, mode="base", mask_policy="predicted",
                   beam=5, max_len=20, mask_seed=0, path=None):
    """One best caption per sample, deterministic order; optionally written
    as `sample_id TAB tokens TAB logp` records under the caption header.

    ``mask_policy`` applies to interpret mode: "predicted" uses the model's
    mask, "random" draws a per-scene non-degenerate binary mask from
    ``mask_seed``, "ones" pins an all-selected mask.
    """
    rng = np.random.default_rng(mask_seed)
    records = []
    for sample in samples:
        override = None
        if mode == "interpret":
            if mask_policy == "random":
                override = random_binary_mask(sample.num_entities, rng)
            elif mask_policy == "ones":
                override = np.ones(sample.num_entities)
            elif mask_policy != "predicted":
                raise DomainError(f"unknown mask policy {mask_policy!r}")
        result = generate(sample, params, vocab, mode=mode, mask_override=override,
                          beam=beam, max_len=max_len)
        records.append((sample.id, result))
    if path is not None:
        write_caption_file(path, records)
    return records


def write_caption_file(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CAPTION_FILE_HEADER + "\n")
        for sample_id, result in records:
            fh.write(f"{sample_id}\t{' '.join(result.tokens)}\t{result.logp!r}\n")


def read_caption_file(path):
    from .errors import ParseError

    out = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != CAPTION_FILE_HEADER:
            raise ParseError(f"expected header {CAPTION_FILE_HEADER!r}, got {header!r}",
                             line=1)
        for lineno, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError("expected `sample_id TAB caption TAB logp`", line=lineno)
            tokens = parts[1].split(" ") if parts[1] else []
            out.append((parts[0], tokens, float(parts[2])))
    return out
