"""Word-level reconstruction metrics: ROUGE-1, ROUGE-L, METEOR-lite and token recovery rate."""

from __future__ import annotations

from collections import Counter
from typing import Iterable, Sequence

from ._validation import ContractError
from .minilm.tokenizer import PAD, detokenize

WordSeq = Sequence[str]


def words(text: str) -> list[str]:
    """Lowercased whitespace words."""
    return text.lower().split()


def words_from_ids(ids: Iterable[int]) -> list[str]:
    return words(detokenize(ids))


def _as_words(x) -> list[str]:
    if isinstance(x, str):
        return words(x)
    return [w for w in x if w]


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_f1(candidate, reference) -> float:
    c, r = _as_words(candidate), _as_words(reference)
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    return _f1(lcs / len(c), lcs / len(r))


def rouge_1_f1(candidate, reference) -> float:
    c, r = _as_words(candidate), _as_words(reference)
    if not c or not r:
        return 0.0
    overlap = sum((Counter(c) & Counter(r)).values())
    return _f1(overlap / len(c), overlap / len(r))


def token_recovery_rate(candidate: Iterable[int], reference: Iterable[int], pad: int = PAD) -> float:
    """Multiset overlap of model token ids divided by the reference length, pads excluded."""
    c = [int(t) for t in candidate if int(t) != pad]
    r = [int(t) for t in reference if int(t) != pad]
    if not r:
        raise ContractError("token_recovery_rate needs a non-empty reference")
    return sum((Counter(c) & Counter(r)).values()) / len(r)


# --------------------------------------------------------------- METEOR-lite

def _chunks(pairs: Sequence[tuple[int, int]]) -> int:
    if not pairs:
        return 0
    pairs = sorted(pairs)
    n = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            n += 1
    return n


def _tiling_alignment(c: list[str], r: list[str]) -> list[tuple[int, int]]:
    """Greedy tiling: repeatedly take the longest common run among unmatched positions."""
    used_c, used_r = [False] * len(c), [False] * len(r)
    pairs: list[tuple[int, int]] = []
    while True:
        best = (0, 0, 0)
        for i in range(len(c)):
            for j in range(len(r)):
                k = 0
                while (i + k < len(c) and j + k < len(r) and not used_c[i + k] and not used_r[j + k]
                       and c[i + k] == r[j + k]):
                    k += 1
                if k > best[0]:
                    best = (k, i, j)
        k, i, j = best
        if k == 0:
            return pairs
        for d in range(k):
            used_c[i + d] = used_r[j + d] = True
            pairs.append((i + d, j + d))


def _exact_alignment(c: list[str], r: list[str], budget: int) -> list[tuple[int, int]] | None:
    """Max-match alignment with fewest chunks by exhaustive search; None if over budget."""
    target = sum((Counter(c) & Counter(r)).values())
    positions: dict[str, list[int]] = {}
    for j, w in enumerate(r):
        positions.setdefault(w, []).append(j)
    remaining = Counter(r)
    best: list = [None, float("inf")]
    nodes = [0]

    def search(i, pairs, used, chunks, last):
        nodes[0] += 1
        if nodes[0] > budget:
            raise _Budget
        if chunks >= best[1]:
            return
        if len(pairs) == target:
            best[0], best[1] = list(pairs), chunks
            return
        if i == len(c):
            return
        need = target - len(pairs)
        left = Counter(c[i:]) & Counter({w: n for w, n in remaining.items() if n > 0})
        if sum(left.values()) < need:
            return
        w = c[i]
        for j in positions.get(w, []):
            if j in used:
                continue
            cont = last is not None and last == (i - 1, j - 1)
            used.add(j)
            remaining[w] -= 1
            pairs.append((i, j))
            search(i + 1, pairs, used, chunks + (0 if cont else 1), (i, j))
            pairs.pop()
            remaining[w] += 1
            used.discard(j)
        search(i + 1, pairs, used, chunks, None)

    try:
        search(0, [], set(), 0, None)
    except _Budget:
        return None
    return best[0] or []


class _Budget(Exception):
    pass


def meteor_alignment(candidate, reference, budget: int = 20000) -> tuple[int, int]:
    """(matches, chunks) of the exact unigram alignment with most matches, then fewest chunks.

    Falls back to greedy tiling when the exhaustive search exceeds ``budget`` nodes.
    """
    c, r = _as_words(candidate), _as_words(reference)
    pairs = _exact_alignment(c, r, budget)
    if pairs is None:
        pairs = _tiling_alignment(c, r)
    return len(pairs), _chunks(pairs)


def meteor_lite(candidate, reference) -> float:
    """F_mean = 10PR/(R+9P), penalty 0.5·(chunks/matches)³; exact matches only."""
    c, r = _as_words(candidate), _as_words(reference)
    if not c or not r:
        return 0.0
    m, ch = meteor_alignment(c, r)
    if m == 0:
        return 0.0
    p, rec = m / len(c), m / len(r)
    f_mean = 10 * p * rec / (rec + 9 * p)
    return f_mean * (1 - 0.5 * (ch / m) ** 3)


# ---------------------------------------------------------- span restriction

def span_words(marked_reference: str) -> list[str]:
    """Words inside the ⟦TYPE|surface⟧ annotations of a marked line."""
    from .lab.corpus import marked_spans
    return [w for _, surface in marked_spans(marked_reference) for w in words(surface)]


def span_recall(candidate, marked_reference: str) -> float:
    """Fraction of annotated entity words that appear in the candidate (multiset)."""
    ref = span_words(marked_reference)
    if not ref:
        raise ContractError("reference carries no annotated spans")
    cand = _as_words(candidate)
    return sum((Counter(cand) & Counter(ref)).values()) / len(ref)


def score_pair(candidate_ids, reference_ids) -> dict[str, float]:
    """All four metrics for one reconstructed row against its reference row."""
    cw, rw = words_from_ids(candidate_ids), words_from_ids(reference_ids)
    return {
        "rouge1_f1": rouge_1_f1(cw, rw),
        "rougeL_f1": rouge_l_f1(cw, rw),
        "meteor_lite": meteor_lite(cw, rw),
        "trr": token_recovery_rate(candidate_ids, reference_ids),
    }
