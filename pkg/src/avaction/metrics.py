"""Sequence and task metrics for decoded action sequences.

BLEU is corpus-level (n-gram counts pooled over all segments before taking
precisions). METEOR is the exact-match variant: unigram alignment, harmonic
mean weighted towards recall, and a fragmentation penalty; the corpus value
is the mean of segment scores.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

from avaction.data import ActionSequence, DataError

METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hyp: Sequence[str], ref: Sequence[str], n: int) -> list[tuple[int, int]]:
    """Per order ``1..n``: (clipped matches, hypothesis n-gram count)."""
    out = []
    for k in range(1, n + 1):
        h, r = _ngrams(hyp, k), _ngrams(ref, k)
        out.append((sum(min(c, r[g]) for g, c in h.items()), max(len(hyp) - k + 1, 0)))
    return out


def corpus_bleu(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]], n: int = 2) -> float:
    if n not in (1, 2, 3, 4):
        raise ValueError(f"unsupported BLEU order {n}")
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    matches = [0] * n
    totals = [0] * n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        if not r:
            raise DataError("BLEU is undefined for an empty reference")
        for k, (m, t) in enumerate(bleu_stats(h, r, n)):
            matches[k] += m
            totals[k] += t
        hyp_len += len(h)
        ref_len += len(r)
    if hyp_len == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / n
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def bleu(hyp: Sequence[str], ref: Sequence[str], n: int = 2) -> float:
    return corpus_bleu([hyp], [ref], n)


def align_exact(hyp: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Maximal exact unigram alignment, each hypothesis token taking the leftmost free match."""
    used = [False] * len(ref)
    pairs = []
    for i, t in enumerate(hyp):
        for j, r in enumerate(ref):
            if not used[j] and r == t:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def count_chunks(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor(
    hyp: Sequence[str],
    ref: Sequence[str],
    alpha: float = METEOR_ALPHA,
    beta: float = METEOR_BETA,
    gamma: float = METEOR_GAMMA,
) -> float:
    if not ref:
        raise DataError("METEOR is undefined for an empty reference")
    pairs = align_exact(hyp, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    P = m / len(hyp)
    R = m / len(ref)
    fmean = P * R / (alpha * P + (1.0 - alpha) * R)
    penalty = gamma * (count_chunks(pairs) / m) ** beta
    return fmean * (1.0 - penalty)


def corpus_meteor(hyps, refs) -> float:
    if not refs:
        return 0.0
    return sum(meteor(h, r) for h, r in zip(hyps, refs)) / len(refs)


def levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _lcs(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def error_counts(hyp: ActionSequence, ref: ActionSequence) -> tuple[int, int, int, int]:
    """(token edits, reference tokens, unmatched reference steps, reference steps)."""
    ht, rt = hyp.tokens(), ref.tokens()
    hk = [s.key() for s in hyp.steps]
    rk = [s.key() for s in ref.steps]
    return levenshtein(ht, rt), len(rt), len(rk) - _lcs(rk, hk), len(rk)


def error_rates(hyp: ActionSequence, ref: ActionSequence) -> tuple[float, float]:
    """Word error % (token Levenshtein) and action error % (reference steps left unmatched)."""
    if not ref.steps:
        raise DataError("error rates need a non-empty reference")
    e, n, u, k = error_counts(hyp, ref)
    return 100.0 * e / n, 100.0 * u / k


def clip_success(hyps: Sequence[ActionSequence], refs: Sequence[ActionSequence]) -> bool:
    """True iff every segment's predicted steps equal its reference steps."""
    return all([s.key() for s in h.steps] == [s.key() for s in r.steps] for h, r in zip(hyps, refs))


def task_success(predictions: dict, references: dict) -> float:
    """Percentage of clips whose reference steps are all predicted exactly.

    Both arguments map a clip id to its per-segment ActionSequences, in order.
    """
    if not references:
        return 0.0
    ok = sum(clip_success(predictions.get(c, [ActionSequence()] * len(refs)), refs) for c, refs in references.items())
    return 100.0 * ok / len(references)


@dataclass
class EvalRow:
    video_id: str
    segment: int
    hyp: list[str]
    ref: list[str]
    bleu1: float
    bleu2: float
    meteor: float
    word_edits: int
    ref_tokens: int
    unmatched_steps: int
    ref_steps: int
    exact: bool


@dataclass
class EvalReport:
    bleu1: float
    bleu2: float
    meteor: float
    wer: float
    action_error: float
    task_success: float
    n_segments: int
    n_clips: int
    label: str = ""
    rows: list[EvalRow] = field(default_factory=list)

    def to_json(self, detail: bool = True) -> dict:
        d = asdict(self)
        if not detail:
            d.pop("rows")
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)


def evaluate(pairs: list[tuple[str, int, ActionSequence, ActionSequence]], label: str = "") -> EvalReport:
    """Score ``(video_id, segment, hyp, ref)`` tuples."""
    rows = []
    clips_h: dict[str, list] = {}
    clips_r: dict[str, list] = {}
    for vid, seg, hyp, ref in pairs:
        h, r = hyp.tokens(), ref.tokens()
        e, n, u, k = error_counts(hyp, ref)
        rows.append(EvalRow(vid, seg, h, r, bleu(h, r, 1), bleu(h, r, 2), meteor(h, r), e, n, u, k,
                            [s.key() for s in hyp.steps] == [s.key() for s in ref.steps]))
        clips_h.setdefault(vid, []).append(hyp)
        clips_r.setdefault(vid, []).append(ref)
    return report_from_rows(rows, label, task_success(clips_h, clips_r))


def report_from_rows(rows: list[EvalRow], label: str = "", success: float | None = None) -> EvalReport:
    """Corpus values recomputed from detail rows."""
    hyps = [r.hyp for r in rows]
    refs = [r.ref for r in rows]
    if success is None:
        clips: dict[str, bool] = {}
        for r in rows:
            clips[r.video_id] = clips.get(r.video_id, True) and r.exact
        success = 100.0 * sum(clips.values()) / len(clips) if clips else 0.0
    tok = sum(r.ref_tokens for r in rows)
    steps = sum(r.ref_steps for r in rows)
    return EvalReport(
        bleu1=corpus_bleu(hyps, refs, 1) if rows else 0.0,
        bleu2=corpus_bleu(hyps, refs, 2) if rows else 0.0,
        meteor=corpus_meteor(hyps, refs),
        wer=100.0 * sum(r.word_edits for r in rows) / tok if tok else 0.0,
        action_error=100.0 * sum(r.unmatched_steps for r in rows) / steps if steps else 0.0,
        task_success=success,
        n_segments=len(rows),
        n_clips=len({r.video_id for r in rows}),
        label=label,
        rows=rows,
    )


def format_table(reports: list[EvalReport], columns: str = "quality") -> str:
    """Plain-text table: ``quality`` gives BLEU-1/BLEU-2/METEOR, ``task`` the error and success rates."""
    if columns == "quality":
        head = ["Model", "BLEU-1", "BLEU-2", "METEOR"]
        body = [[r.label, f"{r.bleu1:.3f}", f"{r.bleu2:.3f}", f"{r.meteor:.3f}"] for r in reports]
    else:
        head = ["Model", "Word error [%]", "Action error [%]", "Task success rate [%]"]
        body = [[r.label, f"{r.wer:.1f}", f"{r.action_error:.1f}", f"{r.task_success:.1f}"] for r in reports]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    line = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    rule = "-" * len(line(head))
    return "\n".join([line(head), rule, *map(line, body)])
