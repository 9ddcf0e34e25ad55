"""Generation quality metrics and the evaluation driver.

All metrics consume (hypothesis tokens, [reference token lists]) pairs.
Pinned variants:
  bleu-n    corpus-level pooled clipped counts, cumulative geometric mean
            of orders 1..n, no smoothing; brevity = exp(1 - r/c) with r the
            closest reference length per pair (ties to the shorter).
  rouge_l   per-pair F1 over the longest common subsequence, best
            reference kept, corpus mean.
  cider     orders 1..4, raw term counts weighted by log(N/df) with df
            counted over evaluation groups, mean cosine to each reference,
            mean over orders, x10.
  meteor    exact-match alignment maximizing matches then minimizing
            chunks, F = 10PR/(R+9P), fragmentation penalty
            0.5*(chunks/matches)^3, best reference kept, corpus mean.
All scores except cider are scaled to 0..100; cider is conventionally x10.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from typing import Sequence

from .checkpoint import config_hash, vocab_hash
from .data import FeatureStore, RawSample
from .errors import DataError
from .generate import GenRequest, generate
from .model import VqgModel
from .text import decode as decode_ids, tokenize

Pair = tuple[list[str], list[list[str]]]

METRIC_VARIANTS = {
    "bleu": "corpus-level, cumulative geometric mean, closest-ref brevity, no smoothing",
    "rouge_l": "LCS F1, max over references, corpus mean, x100",
    "cider": "raw tf x idf over groups, orders 1-4, mean cosine, x10",
    "meteor": "exact match, F=10PR/(R+9P), 0.5*(chunks/matches)^3 penalty, x100",
}


def ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


# ---- bleu ----


def bleu_scores(pairs: Sequence[Pair], max_n: int = 3) -> list[float]:
    """[bleu-1 .. bleu-max_n], each 0..100."""
    if not pairs:
        raise DataError("bleu over zero pairs")
    clipped = [0] * (max_n + 1)
    totals = [0] * (max_n + 1)
    hyp_len = 0
    ref_len = 0
    for hyp, refs in pairs:
        if not refs:
            raise DataError("pair with zero references")
        hyp_len += len(hyp)
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = Counter(ngrams(hyp, n))
            best = Counter()
            for ref in refs:
                for gram, c in Counter(ngrams(ref, n)).items():
                    if c > best[gram]:
                        best[gram] = c
            clipped[n] += sum(min(c, best[g]) for g, c in counts.items())
            totals[n] += max(0, len(hyp) - n + 1)
    if hyp_len == 0:
        return [0.0] * max_n
    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    out = []
    for n in range(1, max_n + 1):
        if any(clipped[k] == 0 or totals[k] == 0 for k in range(1, n + 1)):
            out.append(0.0)
            continue
        log_mean = sum(math.log(clipped[k] / totals[k]) for k in range(1, n + 1)) / n
        out.append(100.0 * brevity * math.exp(log_mean))
    return out


# ---- rouge-l ----


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_pair(hyp: Sequence[str], refs: Sequence[Sequence[str]]) -> float:
    """Best-reference LCS F1 in [0, 1]."""
    best = 0.0
    for ref in refs:
        lcs = _lcs_len(hyp, ref)
        if lcs == 0:
            continue
        p = lcs / len(hyp)
        r = lcs / len(ref)
        best = max(best, 2.0 * p * r / (p + r))
    return best


def rouge_l_corpus(pairs: Sequence[Pair]) -> float:
    if not pairs:
        raise DataError("rouge over zero pairs")
    return 100.0 * sum(rouge_l_pair(h, rs) for h, rs in pairs) / len(pairs)


# ---- cider ----


def cider_corpus(pairs: Sequence[Pair], max_n: int = 4) -> float:
    if not pairs:
        raise DataError("cider over zero pairs")
    n_groups = len(pairs)
    order_means = []
    for n in range(1, max_n + 1):
        df = Counter()
        for _, refs in pairs:
            seen = set()
            for ref in refs:
                seen.update(ngrams(ref, n))
            df.update(seen)

        def weighted(tokens: Sequence[str]) -> dict:
            vec = {}
            for gram, c in Counter(ngrams(tokens, n)).items():
                idf = math.log(n_groups / max(df[gram], 1))
                if idf != 0.0:
                    vec[gram] = c * idf
            return vec

        def cosine(a: dict, b: dict) -> float:
            dot = sum(v * b[g] for g, v in a.items() if g in b)
            na = math.sqrt(sum(v * v for v in a.values()))
            nb = math.sqrt(sum(v * v for v in b.values()))
            if na == 0.0 or nb == 0.0:
                return 0.0
            return dot / (na * nb)

        total = 0.0
        for hyp, refs in pairs:
            h_vec = weighted(hyp)
            total += sum(cosine(h_vec, weighted(r)) for r in refs) / len(refs)
        order_means.append(total / n_groups)
    return 10.0 * sum(order_means) / max_n


# ---- meteor ----


def _alignment(hyp: Sequence[str], ref: Sequence[str]) -> tuple[int, int]:
    """(matches, chunks) of the max-match, then min-chunk exact alignment."""
    hyp_counts = Counter(hyp)
    ref_counts = Counter(ref)
    quota = {w: min(c, ref_counts[w]) for w, c in hyp_counts.items() if w in ref_counts}
    m_max = sum(quota.values())
    if m_max == 0:
        return 0, 0
    positions = defaultdict(list)
    for j, w in enumerate(ref):
        positions[w].append(j)
    best = [m_max + 1]  # chunks upper bound
    used = [False] * len(ref)
    remaining_hyp = Counter(hyp)

    def dfs(i: int, matched: dict, chunks: int, prev_ref: int, prev_matched: bool):
        if chunks >= best[0]:
            return
        if i == len(hyp):
            best[0] = min(best[0], chunks)
            return
        w = hyp[i]
        remaining_hyp[w] -= 1
        if w in quota and matched[w] < quota[w]:
            # chunk-extending candidate first finds tight alignments early
            cands = [j for j in positions[w] if not used[j]]
            if prev_matched and prev_ref + 1 < len(ref) and ref[prev_ref + 1] == w:
                if not used[prev_ref + 1]:
                    cands.remove(prev_ref + 1)
                    cands.insert(0, prev_ref + 1)
            for j in cands:
                used[j] = True
                matched[w] += 1
                extends = prev_matched and j == prev_ref + 1
                dfs(i + 1, matched, chunks + (0 if extends else 1), j, True)
                matched[w] -= 1
                used[j] = False
        # skipping is allowed only if the word's quota stays reachable
        if w not in quota or remaining_hyp[w] >= quota[w] - matched[w]:
            dfs(i + 1, matched, chunks, prev_ref, False)
        remaining_hyp[w] += 1

    dfs(0, defaultdict(int), 0, -2, False)
    return m_max, best[0]


def meteor_pair(hyp: Sequence[str], refs: Sequence[Sequence[str]]) -> float:
    """Best-reference score in [0, 1]."""
    best = 0.0
    for ref in refs:
        if not hyp or not ref:
            continue
        matches, chunks = _alignment(hyp, ref)
        if matches == 0:
            continue
        p = matches / len(hyp)
        r = matches / len(ref)
        f = 10.0 * p * r / (r + 9.0 * p)
        penalty = 0.5 * (chunks / matches) ** 3
        best = max(best, f * (1.0 - penalty))
    return best


def meteor_corpus(pairs: Sequence[Pair]) -> float:
    if not pairs:
        raise DataError("meteor over zero pairs")
    return 100.0 * sum(meteor_pair(h, rs) for h, rs in pairs) / len(pairs)


# ---- bundled computation and evaluation ----


def compute_metrics(pairs: Sequence[Pair]) -> dict:
    bleu = bleu_scores(pairs, max_n=3)
    return {
        "bleu1": bleu[0],
        "bleu2": bleu[1],
        "bleu3": bleu[2],
        "rouge_l": rouge_l_corpus(pairs),
        "cider": cider_corpus(pairs),
        "meteor": meteor_corpus(pairs),
    }


def check_bleu_monotone(metrics: dict) -> None:
    """Higher orders can only lose precision; a rise means a metric bug."""
    if not metrics["bleu1"] >= metrics["bleu2"] >= metrics["bleu3"]:
        raise DataError(
            "bleu order monotonicity violated: "
            f"{metrics['bleu1']}, {metrics['bleu2']}, {metrics['bleu3']}"
        )


def group_references(raw_samples: Sequence[RawSample]) -> dict[tuple[int, str], list[str]]:
    """Question texts keyed by (image_id, category), first-seen order."""
    groups: dict[tuple[int, str], list[str]] = {}
    for s in raw_samples:
        groups.setdefault((s.image_id, s.category), []).append(s.question)
    return groups


def evaluate_model(
    model: VqgModel,
    raw_samples: Sequence[RawSample],
    store: FeatureStore | None,
    beam: int = 1,
) -> dict:
    """Generate one question per (image, category) group and score it
    against every ground-truth question of the group."""
    if not raw_samples:
        raise DataError("evaluation over zero samples")
    groups = group_references(raw_samples)
    pairs: list[Pair] = []
    for (image_id, category), questions in groups.items():
        result = generate(
            model, GenRequest(category=category, image_id=image_id, beam=beam), store
        )
        hyp = decode_ids(result.ids, model.vocab)
        refs = [tokenize(q) for q in questions]
        pairs.append((hyp, refs))
    metrics = compute_metrics(pairs)
    check_bleu_monotone(metrics)
    return {
        "metrics": metrics,
        "pairs": len(pairs),
        "metadata": {
            "config_hash": config_hash(model.config.to_json_dict()),
            "vocab_sha": vocab_hash(model.vocab),
            "eval_questions": len(raw_samples),
            "variant": model.config.variant,
            "beam": beam,
            "metric_variants": METRIC_VARIANTS,
        },
    }
