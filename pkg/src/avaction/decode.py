"""Autoregressive decoding with optional task-knowledge vocabulary masks."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from avaction.data import EOS, SOS, SPECIALS, ActionSequence, Lexicon, Step
from avaction.model import Encodings, ModelParams, decode_step
from avaction.numerics import ConfigurationError, Tensor, log_softmax, no_grad


class StructuralWarning(UserWarning):
    """Decoded tokens do not form well-shaped action steps."""


@dataclass(frozen=True)
class TaskKnowledge:
    """Objects on the workbench (and optionally the verbs the robot can do).

    Ids index the action vocabulary. Nouns in ``noun_vocab`` but not in
    ``allowed_nouns`` are excluded; verbs likewise when ``allowed_verbs`` is
    given.
    """

    allowed_nouns: frozenset[int]
    noun_vocab: frozenset[int]
    allowed_verbs: frozenset[int] | None = None
    verb_vocab: frozenset[int] = frozenset()
    name: str = ""

    @classmethod
    def from_names(cls, lexicon: Lexicon, nouns, verbs=None, name: str = "") -> "TaskKnowledge":
        idx = lexicon.action_index
        unknown = [w for w in [*nouns, *(verbs or [])] if w not in idx]
        if unknown:
            raise ConfigurationError(f"task knowledge names not in the action vocabulary: {unknown}")
        return cls(
            allowed_nouns=frozenset(idx[n] for n in nouns),
            noun_vocab=frozenset(lexicon.noun_ids),
            allowed_verbs=None if verbs is None else frozenset(idx[v] for v in verbs),
            verb_vocab=frozenset(lexicon.verb_ids),
            name=name,
        )

    def excluded(self) -> np.ndarray:
        out = set(self.noun_vocab - self.allowed_nouns)
        if self.allowed_verbs is not None:
            out |= self.verb_vocab - self.allowed_verbs
        return np.array(sorted(out), dtype=np.int64)


@dataclass
class DecodeConfig:
    strategy: str = "beam"
    beam_width: int = 4
    max_length: int = 16
    length_penalty: float = 0.0
    mask: TaskKnowledge | None = None

    def validate(self) -> None:
        if self.strategy not in ("greedy", "beam"):
            raise ConfigurationError(f"unknown decoding strategy {self.strategy!r}")
        if self.beam_width < 1 or self.max_length < 1:
            raise ConfigurationError("beam width and max length must be >= 1")


@dataclass
class Hypothesis:
    tokens: list[int]  # without <sos>/<eos>
    score: float  # total log-probability, including <eos> when finished
    finished: bool

    @property
    def truncated(self) -> bool:
        return not self.finished

    def ranking(self, length_penalty: float) -> float:
        n = len(self.tokens) + int(self.finished)
        return self.score / (max(n, 1) ** length_penalty) if length_penalty else self.score


@dataclass
class DecodedSegment:
    video_id: str
    segment: int
    tokens: list[str]
    steps: ActionSequence
    score: float
    truncated: bool
    mask_id: str | None = None
    orphans: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "segment": self.segment,
            "tokens": self.tokens,
            "steps": self.steps.to_json(),
            "score": self.score,
            "truncated": self.truncated,
            "mask_id": self.mask_id,
        }


def apply_task_mask(logits, mask: TaskKnowledge | None):
    """Set logits of excluded tokens to ``-inf`` (last axis indexes the vocabulary)."""
    if mask is None:
        return logits
    excl = mask.excluded()
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    V = data.shape[-1]
    if excl.size and (excl.min() < 0 or excl.max() >= V):
        raise ConfigurationError("task mask refers to ids outside the vocabulary")
    if EOS in set(excl.tolist()):
        raise ConfigurationError("task mask may not exclude <eos>")
    if not excl.size:
        return logits
    out = data.copy()
    out[..., excl] = -np.inf
    return Tensor(out) if isinstance(logits, Tensor) else out


def _step_logprobs(enc: Encodings, prefixes: np.ndarray, head: str, params: ModelParams, mask) -> np.ndarray:
    logits = decode_step(enc, prefixes, head, params).data
    logits = apply_task_mask(logits, mask)
    return log_softmax(Tensor(logits), axis=-1).data


def greedy_decode(enc: Encodings, head: str, params: ModelParams, config: DecodeConfig) -> list[Hypothesis]:
    """Greedy decoding of every row of ``enc`` in one batch."""
    B = len(enc)
    with no_grad():
        prefixes = np.full((B, 1), SOS, dtype=np.int64)
        scores = np.zeros(B)
        done = np.zeros(B, dtype=bool)
        for _ in range(config.max_length):
            lp = _step_logprobs(enc, prefixes, head, params, config.mask)
            nxt = lp.argmax(axis=-1)
            gain = lp[np.arange(B), nxt]
            scores = np.where(done, scores, scores + gain)
            nxt = np.where(done, EOS, nxt)
            done = done | (nxt == EOS)
            prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
            if done.all():
                break
    out = []
    for b in range(B):
        seq = prefixes[b, 1:].tolist()
        finished = EOS in seq
        toks = seq[: seq.index(EOS)] if finished else seq
        out.append(Hypothesis(toks, float(scores[b]), finished))
    return out


def beam_decode(enc: Encodings, head: str, params: ModelParams, config: DecodeConfig) -> Hypothesis:
    """Beam search for a single encoded segment (``len(enc) == 1``)."""
    W = config.beam_width
    lpen = config.length_penalty
    alive = [Hypothesis([], 0.0, False)]
    finished: list[Hypothesis] = []
    with no_grad():
        for _ in range(config.max_length):
            prefixes = np.array([[SOS, *h.tokens] for h in alive], dtype=np.int64)
            lp = _step_logprobs(enc.repeat(len(alive)), prefixes, head, params, config.mask)
            cands = []
            for i, h in enumerate(alive):
                row = lp[i]
                top = np.argsort(-row, kind="stable")[: W + 1]
                for t in top:
                    if np.isfinite(row[t]):
                        cands.append((h.score + float(row[t]), i, int(t)))
            cands.sort(key=lambda c: (-c[0], c[1], c[2]))
            alive = []
            for score, i, t in cands:
                base = prefixes[i, 1:].tolist()
                if t == EOS:
                    finished.append(Hypothesis(base, score, True))
                else:
                    alive.append(Hypothesis(base + [t], score, False))
                if len(alive) == W:
                    break
            if len(finished) >= W or not alive:
                break
            if not lpen and finished and max(h.score for h in finished) >= max(h.score for h in alive):
                break
    pool = finished if finished else alive
    return max(pool, key=lambda h: (h.ranking(lpen), -len(h.tokens)))


def decode_sequence(enc: Encodings, head: str, params: ModelParams, config: DecodeConfig) -> list[Hypothesis]:
    """Decode every row of ``enc``; beam results never score below greedy ones."""
    config.validate()
    greedy = greedy_decode(enc, head, params, config)
    if config.strategy == "greedy" or config.beam_width == 1:
        return greedy
    out = []
    for b in range(len(enc)):
        best = beam_decode(enc.select([b]), head, params, config)
        g = greedy[b]
        # the greedy path can fall off the beam; keep whichever ranks higher,
        # finished hypotheses first
        lp = config.length_penalty
        if (g.finished, g.ranking(lp)) > (best.finished, best.ranking(lp)):
            best = g
        out.append(best)
    return out


def detokenize_actions(tokens, lexicon: Lexicon, return_orphans: bool = False):
    """Group action tokens into steps: each verb opens a step, nouns attach to it.

    Decoding stops at ``<eos>``; other special tokens are skipped. Nouns seen
    before any verb are dropped, with a :class:`StructuralWarning` unless
    ``return_orphans`` asks for them to be returned instead.
    """
    verbs = set(lexicon.verbs)
    nouns = set(lexicon.nouns)
    steps: list[tuple[str, list[str]]] = []
    orphans: list[str] = []
    for t in tokens:
        if not isinstance(t, str):
            t = lexicon.actions[int(t)]
        if t == "<eos>":
            break
        if t in SPECIALS:
            continue
        if t in verbs:
            steps.append((t, []))
        elif t in nouns:
            if steps:
                steps[-1][1].append(t)
            else:
                orphans.append(t)
    if orphans and not return_orphans:
        warnings.warn(f"nouns before any verb were dropped: {orphans}", StructuralWarning, stacklevel=2)
    seq = ActionSequence(tuple(Step(v, tuple(ns)) for v, ns in steps))
    return (seq, orphans) if return_orphans else seq


def write_decoded(path, rows: list[DecodedSegment]) -> Path:
    path = Path(path)
    path.write_text("".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    return path


def read_decoded(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
