"""Question generation from a trained model: greedy and beam decoding.

Decoding is deterministic eval-mode inference. Every request carries a
category name; answer-conditioned variants run with all-pad answer slots
(generation never sees the answer). Per-step log-probabilities are taken
from the full softmax, so their sum equals the teacher-forced
log-likelihood of the emitted sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import CATEGORY_IDS, FeatureStore
from .errors import ConfigError, DataError
from .model import VqgModel
from .text import END, PAD, START, decode as decode_ids, detokenize

MAX_BEAM = 5

# never emitted: pads and the start marker are structural, not words
_SUPPRESSED = (PAD, START)


@dataclass
class GenRequest:
    category: str
    image_id: int | None = None
    features: np.ndarray | None = None
    max_len: int = 20
    beam: int = 1


@dataclass
class GenResult:
    ids: list[int]
    text: str
    log_probs: list[float]
    stop_reason: str  # "end-token" | "length"


def _log_softmax(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    return shifted - np.log(np.exp(shifted).sum())


def _setup(model: VqgModel, request: GenRequest, store: FeatureStore | None):
    """Resolve features, encode image and context once; returns (x, mask, i)."""
    cfg = model.config
    if request.category not in CATEGORY_IDS:
        raise DataError(
            f"unknown category {request.category!r}; valid: {sorted(CATEGORY_IDS)}"
        )
    if not 1 <= request.beam <= MAX_BEAM:
        raise ConfigError(f"beam width must be in [1, {MAX_BEAM}], got {request.beam}")
    if not 1 <= request.max_len <= cfg.question_len:
        raise ConfigError(
            f"max_len must be in [1, {cfg.question_len}], got {request.max_len}"
        )
    i = None
    if cfg.uses_image:
        if request.features is not None and request.image_id is not None:
            raise DataError("give image_id or features, not both")
        if request.features is not None:
            feats = np.asarray(request.features, dtype=np.float64).reshape(1, -1)
        elif request.image_id is not None:
            if store is None:
                raise DataError("request names an image_id but no feature store was given")
            feats = store.get(request.image_id)[None, :]
        else:
            raise DataError(f"variant {cfg.variant} needs image_id or features")
        i, _ = model.encode_image(feats, train=False)
    s = text_mask = None
    if cfg.uses_text:
        cat_ids = np.array([CATEGORY_IDS[request.category]])
        answers = None
        if cfg.variant in ("image-ans-cat", "text-only"):
            answers = np.full((1, cfg.answer_len), PAD, dtype=np.int64)
        ctx_ids, text_mask = model.build_context(answers, cat_ids)
        s = model.encode_text(ctx_ids, text_mask)
    x, src_mask = model.fuse(s, i, text_mask)
    return x, src_mask, i


def _step_logits(model: VqgModel, x, src_mask, i, prefix: list[int]) -> np.ndarray:
    """Logits for the next token after prefix; suffix pads cannot leak in."""
    q = np.full((1, model.config.question_len), PAD, dtype=np.int64)
    if prefix:
        q[0, : len(prefix)] = prefix
    logits = model.decode(x, src_mask, q, i)
    return logits.data[0, len(prefix)]


def _pick(row: np.ndarray) -> int:
    cand = row.copy()
    cand[list(_SUPPRESSED)] = -np.inf
    return int(np.argmax(cand))  # ties resolve to the lowest token id


def _finish(model: VqgModel, ids: list[int], log_probs: list[float], reason: str) -> GenResult:
    return GenResult(
        ids=list(ids),
        text=detokenize(decode_ids(ids, model.vocab)),
        log_probs=list(log_probs),
        stop_reason=reason,
    )


def _greedy(model: VqgModel, x, src_mask, i, max_len: int) -> GenResult:
    ids: list[int] = []
    log_probs: list[float] = []
    for _ in range(max_len):
        row = _step_logits(model, x, src_mask, i, ids)
        nxt = _pick(row)
        if nxt == END:
            return _finish(model, ids, log_probs, "end-token")
        ids.append(nxt)
        log_probs.append(float(_log_softmax(row)[nxt]))
    return _finish(model, ids, log_probs, "length")


@dataclass
class _Beam:
    ids: list[int] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    score: float = 0.0  # cumulative log-prob including the end token
    done: bool = False


def _beam_search(model: VqgModel, x, src_mask, i, max_len: int, width: int) -> GenResult:
    beams = [_Beam()]
    for _ in range(max_len):
        if all(b.done for b in beams):
            break
        candidates: list[tuple[float, int, int, _Beam]] = []
        for b_idx, b in enumerate(beams):
            if b.done:
                candidates.append((b.score, -1, b_idx, b))
                continue
            row = _step_logits(model, x, src_mask, i, b.ids)
            logp = _log_softmax(row)
            order = np.argsort(-logp, kind="stable")  # ties keep lowest id first
            taken = 0
            for tok in order:
                tok = int(tok)
                if tok in _SUPPRESSED:
                    continue
                nb = _Beam(
                    ids=b.ids + ([] if tok == END else [tok]),
                    log_probs=b.log_probs + ([] if tok == END else [float(logp[tok])]),
                    score=b.score + float(logp[tok]),
                    done=tok == END,
                )
                candidates.append((nb.score, tok, b_idx, nb))
                taken += 1
                if taken >= width:
                    break
        # highest score wins; ties prefer the lower token id, then order
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        beams = [c[3] for c in candidates[:width]]
    best = max(range(len(beams)), key=lambda k: (beams[k].score, -k))
    winner = beams[best]
    return _finish(
        model, winner.ids, winner.log_probs, "end-token" if winner.done else "length"
    )


def generate(
    model: VqgModel, request: GenRequest, store: FeatureStore | None = None
) -> GenResult:
    """Decode one question for the request's image and category."""
    x, src_mask, i = _setup(model, request, store)
    if request.beam == 1:
        return _greedy(model, x, src_mask, i, request.max_len)
    return _beam_search(model, x, src_mask, i, request.max_len, request.beam)


def generate_batch(
    model: VqgModel, requests: list[GenRequest], store: FeatureStore | None = None
) -> list[GenResult]:
    """Requests decoded independently, in order; identical to one-at-a-time."""
    return [generate(model, request, store) for request in requests]


def sequence_log_likelihood(
    model: VqgModel,
    request: GenRequest,
    ids: list[int],
    store: FeatureStore | None = None,
) -> float:
    """Teacher-forced log-likelihood of ids under the request's conditioning."""
    if len(ids) > model.config.question_len:
        raise DataError(
            f"sequence of {len(ids)} tokens exceeds question length "
            f"{model.config.question_len}"
        )
    x, src_mask, i = _setup(model, request, store)
    q = np.full((1, model.config.question_len), PAD, dtype=np.int64)
    if ids:
        q[0, : len(ids)] = ids
    logits = model.decode(x, src_mask, q, i).data[0]
    total = 0.0
    for pos, tok in enumerate(ids):
        total += float(_log_softmax(logits[pos])[tok])
    return total
