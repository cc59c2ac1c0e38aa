"""Training phases: baseline, multi-task, classifier pre-training and weak supervision.

The multi-task loss is teacher-forced cross-entropy through the caption
decoder for records that carry a caption plus the same through the action
decoder for records that carry actions; a missing annotation contributes
neither loss nor gradient. The weakly-supervised loss draws relaxed
(Gumbel-softmax) action sequences from the action decoder, embeds them as
expectations over the semantic lexicon and asks the frozen semantic
classifier to call them equivalent to the record's caption.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from avaction.data import EOS, PAD, SOS, UNK, DataError, Dataset, SegmentRecord
from avaction.decode import DecodeConfig, decode_sequence, detokenize_actions
from avaction.metrics import EvalReport, evaluate
from avaction.model import (
    ModelParams,
    classify_semantic,
    collate,
    decoder_forward,
    decoder_logits,
    embedding_table,
    encode,
    init_params,
    save_checkpoint,
    teacher_forcing_arrays,
)
from avaction.model.params import ModelConfig
from avaction.numerics import (
    AdamState,
    ConfigurationError,
    RngState,
    Tensor,
    adam_step,
    binary_cross_entropy,
    concat,
    cross_entropy,
    gumbel_softmax_sample,
    masked_fill,
    no_grad,
    stack,
)

log = logging.getLogger(__name__)

PHASES = ("baseline", "multitask", "finetune-weak")
FLAG_MULTITASK = "multitask"
FLAG_CLASSIFIER = "classifier"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    steps: int = 500
    temperature: float = 1.0
    samples: int = 1
    weight_caption: float = 1.0
    weight_action: float = 1.0
    weight_weak: float = 1.0
    seed: int = 0
    eval_every: int = 100
    weak_max_len: int = 8
    classifier_steps: int = 300

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        if self.steps <= 0 or self.batch_size <= 0 or self.samples <= 0 or self.eval_every <= 0:
            raise ConfigurationError("steps, batch_size, samples and eval_every must be positive")
        if min(self.weight_caption, self.weight_action, self.weight_weak) < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass
class LossReport:
    caption: float | None = None
    action: float | None = None
    weak: float | None = None
    classifier: float | None = None
    n_caption: int = 0
    n_action: int = 0
    n_weak: int = 0
    n_classifier: int = 0

    @property
    def total(self) -> float:
        return sum(v for v in (self.caption, self.action, self.weak, self.classifier) if v is not None)

    def merge(self, other: "LossReport") -> "LossReport":
        out = LossReport(**asdict(self))
        for k in ("caption", "action", "weak", "classifier"):
            if getattr(other, k) is not None:
                setattr(out, k, getattr(other, k))
                setattr(out, f"n_{k}", getattr(other, f"n_{k}"))
        return out


# --------------------------------------------------------------------------
# multi-task loss


def _bundles(records: list[SegmentRecord]):
    for r in records:
        if r.features is None:
            raise DataError(f"{r.video_id}/{r.segment}: features not loaded")
    return collate([r.features for r in records])


def multitask_loss(
    records: list[SegmentRecord],
    params: ModelParams,
    lexicon,
    config: TrainConfig,
    heads=("caption", "action"),
) -> tuple[Tensor | None, LossReport]:
    for r in records:
        r.check_trainable()
    report = LossReport()
    cap_idx = [i for i, r in enumerate(records) if r.caption is not None] if "caption" in heads else []
    act_idx = [i for i, r in enumerate(records) if r.actions is not None] if "action" in heads else []
    if not cap_idx and not act_idx:
        return None, report
    enc = encode(_bundles(records), params)
    total = None
    if cap_idx:
        inp, tgt = teacher_forcing_arrays([lexicon.encode_words(records[i].caption) for i in cap_idx])
        loss = cross_entropy(decoder_logits(enc.select(cap_idx), inp, "caption", params), tgt, ignore_id=PAD)
        report.caption, report.n_caption = loss.item(), len(cap_idx)
        total = loss * config.weight_caption
    if act_idx:
        inp, tgt = teacher_forcing_arrays([lexicon.encode_actions(records[i].actions) for i in act_idx])
        loss = cross_entropy(decoder_logits(enc.select(act_idx), inp, "action", params), tgt, ignore_id=PAD)
        report.action, report.n_action = loss.item(), len(act_idx)
        term = loss * config.weight_action
        total = term if total is None else total + term
    return total, report


def multitask_step(records, params: ModelParams, config: TrainConfig, lexicon, heads=("caption", "action")):
    """Gradients of the multi-task loss; owners other than S all receive an entry."""
    params.zero_grad()
    loss, report = multitask_loss(records, params, lexicon, config, heads)
    if loss is not None:
        loss.backward()
    return params.grads(owners=("E", "T", "D", "D'")), report


# --------------------------------------------------------------------------
# semantic classifier


def _padded_embeddings(seqs: list[list[int]], table: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    w = np.zeros((len(seqs), L))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        w[i, : len(s)] = 1.0
    return table[ids], w


def classifier_probability(params: ModelParams, lexicon, action_ids: list[list[int]], caption_ids: list[list[int]]) -> Tensor:
    y, yw = _padded_embeddings(action_ids, lexicon.action_embedding)
    c, cw = _padded_embeddings(caption_ids, lexicon.word_embedding)
    return classify_semantic(Tensor(y), Tensor(c), params, yw, cw)


def stream(seed: int, purpose: int) -> RngState:
    """An independent random stream for one use within a run."""
    return RngState(int(np.random.SeedSequence([seed, purpose]).generate_state(1, np.uint64)[0]))


def sample_negatives(positives: list[tuple], pool: list[tuple], rng: RngState) -> list[int]:
    """For each positive caption, the index of a uniformly drawn pool caption that differs from it."""
    if len(set(pool)) < 2:
        raise ConfigurationError("negative sampling needs at least two distinct captions")
    out = []
    for c in positives:
        while True:
            j = int(rng.integers(0, len(pool)))
            if pool[j] != c:
                out.append(j)
                break
    return out


def classifier_loss(params, lexicon, records: list[SegmentRecord], pool: list[SegmentRecord], rng: RngState):
    """``BCE(S(y, c+), 1) + BCE(S(y, c-), 0)`` averaged over records, with ``c-`` drawn from ``pool``."""
    pool_caps = [tuple(r.caption) for r in pool]
    y = [lexicon.encode_actions(r.actions) for r in records]
    pos = [lexicon.encode_words(r.caption) for r in records]
    neg = [lexicon.encode_words(pool[j].caption)
           for j in sample_negatives([tuple(r.caption) for r in records], pool_caps, rng)]
    p = classifier_probability(params, lexicon, y + y, pos + neg)
    B = len(records)
    ones = binary_cross_entropy(p[:B], 1).mean()
    zeros = binary_cross_entropy(p[B:], 0).mean()
    return ones + zeros


def pretrain_classifier(dataset: Dataset, params: ModelParams, config: TrainConfig, log_path=None) -> ModelParams:
    """Fit S on (action sequence, caption) pairs against random other captions."""
    pairs = [r for r in dataset.records if r.actions is not None and r.caption is not None]
    if not pairs:
        raise ConfigurationError("classifier pre-training needs records with both actions and captions")
    if len({tuple(r.caption) for r in pairs}) < 2:
        raise ConfigurationError("classifier pre-training needs at least two distinct captions")
    rng = stream(config.seed, 10)
    state = AdamState()
    names = params.names("S")
    arrays = params.arrays()
    logf = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for step in range(config.classifier_steps):
            idx = rng.integers(0, len(pairs), size=min(config.batch_size, len(pairs)))
            batch = [pairs[i] for i in idx]
            params.zero_grad()
            loss = classifier_loss(params, dataset.lexicon, batch, pairs, rng)
            loss.backward()
            grads = {n: params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data) for n in names}
            adam_step(arrays, grads, state, lr=config.lr)
            if logf:
                rep = LossReport(classifier=loss.item(), n_classifier=len(batch))
                logf.write(json.dumps({"phase": "classifier", "step": step, **asdict(rep)}, sort_keys=True) + "\n")
    finally:
        if logf:
            logf.close()
    params.flags.add(FLAG_CLASSIFIER)
    return params


# --------------------------------------------------------------------------
# weak supervision


_NEVER_SAMPLED = np.array([PAD, SOS, UNK])


def sample_soft_actions(enc, params: ModelParams, config: TrainConfig, rng: RngState, max_len: int | None = None):
    """Autoregressively draw relaxed one-hot action tokens from D'.

    Returns the ``[B, L, V]`` soft tokens and the ``[B, L]`` survival weights
    ``prod_{s<=t} (1 - y_s[<eos>])`` that softly mark the sequence length.
    """
    L = max_len or config.weak_max_len
    table = embedding_table(params, "action")
    B = len(enc)
    V = table.shape[0]
    allowed = np.ones(V, dtype=bool)
    allowed[_NEVER_SAMPLED] = False
    inputs = [table[np.full(B, SOS)].reshape(B, 1, -1)]
    soft = []
    for _ in range(L):
        x = concat(inputs, axis=1)
        logits = decoder_forward(enc, x, "action", params)[:, -1, :]
        y = gumbel_softmax_sample(masked_fill(logits, allowed), config.temperature, rng)
        soft.append(y)
        inputs.append((y @ table).reshape(B, 1, -1))
    y = stack(soft, axis=1)
    alive = 1.0 - y[:, :, EOS]
    weights = [alive[:, 0]]
    for t in range(1, L):
        weights.append(weights[-1] * alive[:, t])
    return y, stack(weights, axis=1)


def weak_loss(records: list[SegmentRecord], params: ModelParams, lexicon, config: TrainConfig, rng: RngState):
    """Mean ``BCE(S(y', c), 1)`` over records and samples, S held fixed."""
    if FLAG_CLASSIFIER not in params.flags:
        raise ConfigurationError("weak supervision needs a pre-trained semantic classifier")
    for r in records:
        if r.caption is None:
            raise DataError(f"{r.video_id}/{r.segment}: weak supervision needs a caption")
    K = config.samples
    enc = encode(_bundles(records), params)
    if K > 1:
        enc = enc.repeat(K)
    soft, weights = sample_soft_actions(enc, params, config, rng)
    y_sem = soft @ lexicon.action_embedding
    caps = [lexicon.encode_words(r.caption) for r in records for _ in range(K)]
    c, cw = _padded_embeddings(caps, lexicon.word_embedding)
    p = classify_semantic(y_sem, Tensor(c), params, weights, cw)
    return binary_cross_entropy(p, 1).mean()


class _Frozen:
    """Temporarily stop gradient tracking for a set of parameter tensors."""

    def __init__(self, params: ModelParams, owners):
        self.tensors = [params[n] for n in params.names(owners)]

    def __enter__(self):
        for t in self.tensors:
            t.requires_grad = False

    def __exit__(self, *exc):
        for t in self.tensors:
            t.requires_grad = True


def weak_sup_step(records, params: ModelParams, config: TrainConfig, lexicon, rng: RngState):
    """Gradients of the weakly-supervised loss; S is frozen and gets exact zeros."""
    params.zero_grad()
    with _Frozen(params, "S"):
        loss = weak_loss(records, params, lexicon, config, rng)
        (loss * config.weight_weak).backward()
    report = LossReport(weak=loss.item(), n_weak=len(records))
    return params.grads(owners=("E", "T", "D", "D'", "S")), report


def finetune_step(records, params: ModelParams, config: TrainConfig, lexicon, rng: RngState):
    """``L_mt + L_weak`` on a caption-only batch, ``L_mt`` alone otherwise."""
    g_mt, rep = multitask_step(records, params, config, lexicon)
    if any(r.actions is not None for r in records):
        return g_mt, rep
    g_weak, rep_w = weak_sup_step(records, params, config, lexicon, rng)
    grads = {n: g_mt.get(n, 0.0) + g_weak[n] for n in g_weak}
    return grads, rep.merge(rep_w)


# --------------------------------------------------------------------------
# evaluation and the training loop


def decode_actions(params: ModelParams, dataset: Dataset, config: DecodeConfig | None = None,
                   masks: dict | None = None, batch_size: int = 32):
    """Decode the action head for every record; ``masks`` maps video id to TaskKnowledge."""
    config = config or DecodeConfig(strategy="greedy")
    records = dataset.records
    groups: dict = {}
    for i, r in enumerate(records):
        key = None if masks is None else r.video_id
        groups.setdefault(key, []).append(i)
    results = [None] * len(records)
    for key, idx in groups.items():
        cfg = config if key is None else replace(config, mask=masks.get(key))
        for s in range(0, len(idx), batch_size):
            chunk = idx[s : s + batch_size]
            with no_grad():
                enc = encode(_bundles([records[i] for i in chunk]), params)
            hyps = decode_sequence(enc, "action", params, cfg)
            for i, h in zip(chunk, hyps):
                results[i] = h
    return [(r, h, detokenize_actions(h.tokens, dataset.lexicon, return_orphans=True)[0])
            for r, h in zip(records, results)]


def evaluate_model(params: ModelParams, dataset: Dataset, config: DecodeConfig | None = None,
                   masks: dict | None = None, label: str = "") -> EvalReport:
    decoded = decode_actions(params, dataset, config, masks)
    pairs = [(r.video_id, r.segment, seq, r.actions) for r, _, seq in decoded if r.actions is not None]
    return evaluate(pairs, label)


@dataclass
class TrainResult:
    params: ModelParams
    best_step: int
    best_meteor: float
    history: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def iter_batches(records: list, batch_size: int, rng: RngState, mode: str = "plain"):
    """Endless shuffled mini-batches.

    ``plain`` cycles through random permutations of all records.
    ``balanced`` fills half of every batch with action-annotated records and
    the rest with the others, so scarce action labels are not outvoted.
    ``stratified`` alternates whole batches of action-annotated records with
    whole caption-only batches, so the weak loss sees caption-only batches.
    """
    if mode not in ("plain", "balanced", "stratified"):
        raise ConfigurationError(f"unknown batching mode {mode!r}")
    pools = [[r for r in records if r.actions is not None], [r for r in records if r.actions is None]]
    if mode == "plain" or not all(pools):
        order: list[int] = []
        while True:
            if len(order) < batch_size:
                order.extend(rng.permutation(len(records)).tolist())
            yield [records[i] for i in order[:batch_size]]
            del order[:batch_size]
    if mode == "balanced":
        half = (batch_size + 1) // 2
        first, second = iter_batches(pools[0], half, rng), iter_batches(pools[1], batch_size - half, rng)
        while True:
            yield next(first) + next(second)
    streams = [iter_batches(pool, batch_size, rng) for pool in pools]
    while True:
        for it in streams:
            yield next(it)


def _eligible(dataset: Dataset, phase: str) -> list[SegmentRecord]:
    if phase == "baseline":
        return [r for r in dataset.records if r.actions is not None]
    return [r for r in dataset.records if r.actions is not None or r.caption is not None]


def train(
    train_set: Dataset,
    val_set: Dataset | None,
    phase: str,
    config: TrainConfig,
    params: ModelParams | None = None,
    model_config: ModelConfig | None = None,
    out_dir=None,
    select_initial: bool = False,
) -> TrainResult:
    """Run one phase and keep the parameters with the best validation METEOR.

    ``baseline`` and ``multitask`` start from fresh parameters unless
    ``params`` is given; ``finetune-weak`` needs parameters that went through
    multi-task training and classifier pre-training. With
    ``select_initial`` the starting parameters compete in model selection.
    """
    config.validate()
    if phase not in PHASES:
        raise ConfigurationError(f"unknown phase {phase!r}")
    lexicon = train_set.lexicon
    if phase == "finetune-weak":
        if params is None or FLAG_MULTITASK not in params.flags:
            raise ConfigurationError("finetune-weak needs a multitask checkpoint")
        if FLAG_CLASSIFIER not in params.flags:
            raise ConfigurationError("finetune-weak needs a pre-trained semantic classifier")
    if params is None:
        mc = model_config or ModelConfig(word_vocab=len(lexicon.words), action_vocab=len(lexicon.actions),
                                         d_audio=train_set.dims["audio"], d_visual=train_set.dims["visual"],
                                         d_text=train_set.dims["text"])
        params = init_params(mc, seed=config.seed)
    records = _eligible(train_set, phase)
    if not records:
        raise ConfigurationError(f"no training records usable by phase {phase!r}")
    heads = ("action",) if phase == "baseline" else ("caption", "action")
    trainable = params.names(("E", "T", "D'") if phase == "baseline" else ("E", "T", "D", "D'"))
    rng = stream(config.seed, 1)
    weak_rng = stream(config.seed, 2)
    state = AdamState()
    arrays = params.arrays()
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("", encoding="utf-8")
    result = TrainResult(params, -1, -np.inf)
    best_arrays: dict = {}

    def validate(step: int) -> None:
        if val_set is None:
            score = float(step)  # no validation set: keep the last step
        else:
            score = evaluate_model(params, val_set).meteor
        result.history.append({"step": step, "val_meteor": score})
        if score > result.best_meteor:
            result.best_meteor, result.best_step = score, step
            best_arrays.update({n: a.copy() for n, a in arrays.items()})
        if out:
            path = save_checkpoint(out / f"step{step:06d}.ckpt", params, rng,
                                   meta={"phase": phase, "step": step, "val_meteor": score})
            result.checkpoints.append(path)

    if select_initial:
        validate(0)
    mode = {"baseline": "plain", "multitask": "plain", "finetune-weak": "stratified"}[phase]
    batches = iter_batches(records, config.batch_size, rng, mode)
    for step in range(1, config.steps + 1):
        batch = next(batches)
        if phase == "finetune-weak":
            grads, rep = finetune_step(batch, params, config, lexicon, weak_rng)
        else:
            grads, rep = multitask_step(batch, params, config, lexicon, heads)
        adam_step(arrays, {n: grads[n] for n in trainable}, state, lr=config.lr)
        if out:
            with open(out / "train_log.jsonl", "a", encoding="utf-8") as f:
                f.write(json.dumps({"phase": phase, "step": step, **asdict(rep)}, sort_keys=True) + "\n")
        if step % config.eval_every == 0 or step == config.steps:
            validate(step)
    for n, a in best_arrays.items():
        arrays[n][...] = a
    if phase in ("multitask", "finetune-weak"):
        params.flags.add(FLAG_MULTITASK)
    if out:
        save_checkpoint(out / "best.ckpt", params, rng,
                        meta={"phase": phase, "selected_step": result.best_step,
                              "val_meteor": result.best_meteor, "history": result.history})
    log.info("phase %s: best step %d (val METEOR %.4f)", phase, result.best_step, result.best_meteor)
    return result
