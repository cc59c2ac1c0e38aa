import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avaction.data import EOS, SOS, ActionSequence, Step
from avaction.decode import (
    DecodeConfig,
    DecodedSegment,
    StructuralWarning,
    TaskKnowledge,
    apply_task_mask,
    decode_sequence,
    detokenize_actions,
    greedy_decode,
    read_decoded,
    write_decoded,
)
from avaction.model import decode_step, encode
from avaction.numerics import ConfigurationError, no_grad


def random_encodings(params, seed, n=1):
    rng = np.random.default_rng(seed)
    c = params.config
    from avaction.data import FeatureBundle

    bundles = [
        FeatureBundle(rng.normal(size=(4, c.d_audio)), rng.normal(size=(5, c.d_visual)), rng.normal(size=(2, c.d_text)))
        for _ in range(n)
    ]
    with no_grad():
        return encode(bundles, params)


def sharpen(params, eos_bias=1.5):
    """Scale up the action head so untrained decoding is decisive and often finishes."""
    params["D'.vocab.w"].data *= 6.0
    params["D'.vocab.b"].data[EOS] += eos_bias


def test_config_validation():
    with pytest.raises(ConfigurationError):
        DecodeConfig(beam_width=0).validate()
    with pytest.raises(ConfigurationError):
        DecodeConfig(strategy="sample").validate()


def test_beam_width_one_equals_greedy(params):
    sharpen(params)
    for seed in range(20):
        enc = random_encodings(params, seed)
        g = decode_sequence(enc, "action", params, DecodeConfig(strategy="greedy"))[0]
        b = decode_sequence(enc, "action", params, DecodeConfig(strategy="beam", beam_width=1))[0]
        assert (g.tokens, g.score, g.finished) == (b.tokens, b.score, b.finished)


def test_beam_never_scores_below_greedy(params):
    sharpen(params)
    n_finished = 0
    for seed in range(20):
        enc = random_encodings(params, 100 + seed)
        g = decode_sequence(enc, "action", params, DecodeConfig(strategy="greedy", max_length=6))[0]
        b = decode_sequence(enc, "action", params, DecodeConfig(beam_width=4, max_length=6))[0]
        assert b.finished >= g.finished
        if b.finished == g.finished:
            assert b.score >= g.score
        n_finished += b.finished
    assert n_finished > 0


def test_max_length_one_is_argmax_first_token(params):
    enc = random_encodings(params, 7)
    with no_grad():
        logits = decode_step(enc, [SOS], "action", params).data
    h = decode_sequence(enc, "action", params, DecodeConfig(strategy="greedy", max_length=1))[0]
    first = int(np.argmax(logits))
    assert (h.tokens or [EOS])[0] == first
    assert h.truncated == (first != EOS)


def test_batched_greedy_matches_single(params):
    sharpen(params)
    enc = random_encodings(params, 3, n=4)
    batched = greedy_decode(enc, "action", params, DecodeConfig(strategy="greedy"))
    for i in range(4):
        single = greedy_decode(enc.select([i]), "action", params, DecodeConfig(strategy="greedy"))[0]
        assert single.tokens == batched[i].tokens
        assert single.score == pytest.approx(batched[i].score, abs=1e-12)


def test_mask_allowing_everything_is_identity(tiny):
    lex = tiny.lexicon
    mask = TaskKnowledge.from_names(lex, lex.nouns)
    logits = np.random.default_rng(0).normal(size=(3, len(lex.actions)))
    assert np.array_equal(apply_task_mask(logits, mask), logits)


def test_mask_sets_excluded_nouns_to_minus_inf(tiny):
    lex = tiny.lexicon
    mask = TaskKnowledge.from_names(lex, ["bowl", "milk"])
    logits = np.zeros(len(lex.actions))
    out = apply_task_mask(logits, mask)
    for n in lex.nouns:
        assert (out[lex.action_index[n]] == -np.inf) == (n not in ("bowl", "milk"))
    for v in lex.verbs:
        assert out[lex.action_index[v]] == 0.0


def test_mask_rejects_eos_and_unknown_names(tiny):
    lex = tiny.lexicon
    with pytest.raises(ConfigurationError):
        TaskKnowledge.from_names(lex, ["spaceship"])
    bad = TaskKnowledge(frozenset(), frozenset({EOS}))
    with pytest.raises(ConfigurationError):
        apply_task_mask(np.zeros(len(lex.actions)), bad)


def test_masked_nouns_never_decoded(params, tiny):
    lex = tiny.lexicon
    sharpen(params, eos_bias=0.0)
    mask = TaskKnowledge.from_names(lex, ["bowl", "cereal"], name="cereal")
    excluded = set(mask.excluded().tolist())
    for seed in range(100):
        enc = random_encodings(params, 1000 + seed)
        cfg = DecodeConfig(strategy="greedy" if seed % 2 else "beam", beam_width=3, max_length=5, mask=mask)
        h = decode_sequence(enc, "action", params, cfg)[0]
        assert not excluded & set(h.tokens)


def test_detokenize_examples(tiny):
    lex = tiny.lexicon
    seq = detokenize_actions(["turn-on", "tap", "take", "celery"], lex)
    assert seq == ActionSequence((Step("turn-on", ("tap",)), Step("take", ("celery",))))
    assert detokenize_actions([EOS], lex) == ActionSequence()
    assert detokenize_actions([], lex) == ActionSequence()


def test_detokenize_orphan_noun_warns(tiny):
    lex = tiny.lexicon
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        seq = detokenize_actions(["celery", "take", "tap"], lex)
    assert any(issubclass(w.category, StructuralWarning) for w in rec)
    assert seq == ActionSequence((Step("take", ("tap",)),))
    seq2, orphans = detokenize_actions(["celery", "take", "tap"], lex, return_orphans=True)
    assert seq2 == seq and orphans == ["celery"]


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_detokenize_inverts_serialization(tiny, data):
    lex = tiny.lexicon
    n = data.draw(st.integers(0, 5))
    steps = []
    for _ in range(n):
        verb = data.draw(st.sampled_from(lex.verbs))
        nouns = data.draw(st.lists(st.sampled_from(lex.nouns), max_size=3))
        steps.append(Step(verb, tuple(nouns)))
    seq = ActionSequence(tuple(steps))
    assert detokenize_actions(lex.encode_actions(seq), lex) == seq


def test_decoded_file_round_trip(tmp_path):
    row = DecodedSegment("v1", 2, ["take", "bowl"], ActionSequence.parse("take bowl"), -0.5, False, "cereal")
    path = write_decoded(tmp_path / "d.jsonl", [row])
    back = read_decoded(path)[0]
    assert back == {"video_id": "v1", "segment": 2, "tokens": ["take", "bowl"], "steps": [["take", ["bowl"]]],
                    "score": -0.5, "truncated": False, "mask_id": "cereal"}
