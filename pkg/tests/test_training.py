import dataclasses
import json
import math

import numpy as np
import pytest
from conftest import config_for

from avaction.data import EOS, DataError, generate_dataset, with_annotations
from avaction.model import classify_semantic, encode, init_params, load_checkpoint
from avaction.numerics import ConfigurationError, RngState, Tensor
from avaction.training import (
    FLAG_CLASSIFIER,
    FLAG_MULTITASK,
    LossReport,
    TrainConfig,
    _bundles,
    classifier_loss,
    classifier_probability,
    decode_actions,
    finetune_step,
    multitask_loss,
    multitask_step,
    pretrain_classifier,
    sample_negatives,
    sample_soft_actions,
    stream,
    train,
    weak_loss,
    weak_sup_step,
)

CFG = TrainConfig(batch_size=4, steps=4, eval_every=2, seed=0)


def caption_only(ds):
    return [dataclasses.replace(r, actions=None) for r in ds.records]


def action_only(ds):
    return [dataclasses.replace(r, caption=None) for r in ds.records]


def copy_rng(r: RngState) -> RngState:
    return RngState(r.seed, r.position)


def test_config_validation():
    for bad in (dict(temperature=0.0), dict(steps=0), dict(weight_weak=-1.0)):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad).validate()


def test_unannotated_record_is_data_error(tiny, params):
    rec = dataclasses.replace(tiny.records[0], caption=None, actions=None)
    with pytest.raises(DataError):
        multitask_step([rec], params, CFG, tiny.lexicon)


def test_caption_only_batch_skips_action_decoder(tiny, params):
    grads, rep = multitask_step(caption_only(tiny)[:4], params, CFG, tiny.lexicon)
    assert rep.action is None and rep.n_action == 0 and rep.n_caption == 4
    assert max(np.abs(g).max() for n, g in grads.items() if params.owner[n] == "D'") == 0.0
    assert any(np.abs(g).max() > 0 for n, g in grads.items() if params.owner[n] == "D")


def test_action_only_batch_skips_caption_decoder(tiny, params):
    grads, rep = multitask_step(action_only(tiny)[:4], params, CFG, tiny.lexicon)
    assert rep.caption is None and rep.n_caption == 0
    assert max(np.abs(g).max() for n, g in grads.items() if params.owner[n] == "D") == 0.0


def test_both_terms_positive_and_counts(tiny, params):
    _, rep = multitask_step(tiny.records[:4], params, CFG, tiny.lexicon)
    assert rep.caption > 0 and rep.action > 0
    assert rep.n_caption == rep.n_action == 4
    assert rep.total == pytest.approx(rep.caption + rep.action)


@pytest.mark.parametrize("seed", range(3))
def test_every_encoder_parameter_gets_gradient(tiny, seed):
    params = init_params(config_for(tiny), seed=seed)
    grads, _ = multitask_step(tiny.records[:4], params, CFG, tiny.lexicon)
    dead = [n for n, g in grads.items() if params.owner[n] in ("E", "T") and not np.any(g)]
    assert not dead


@pytest.mark.parametrize("head,owner", [("action", "D'"), ("caption", "D")])
def test_uniform_head_loss_is_ln_vocab(tiny, params, head, owner):
    params[f"{owner}.vocab.w"].data[...] = 0.0
    params[f"{owner}.vocab.b"].data[...] = 0.0
    _, rep = multitask_step(tiny.records[:4], params, CFG, tiny.lexicon, heads=(head,))
    V = params.config.vocab(head)
    assert getattr(rep, head) == pytest.approx(math.log(V), abs=1e-12)


def test_classifier_loss_at_half_is_two_ln2(tiny, params):
    params["S.out.w"].data[...] = 0.0
    params["S.out.b"].data[...] = 0.0
    loss = classifier_loss(params, tiny.lexicon, tiny.records[:4], tiny.records, stream(0, 3))
    assert loss.item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_negatives_never_equal_positive():
    pool = [("a",), ("b",), ("a",), ("c",)]
    rng = stream(5, 0)
    for _ in range(50):
        idx = sample_negatives([("a",), ("b",), ("c",)], pool, rng)
        assert pool[idx[0]] != ("a",) and pool[idx[1]] != ("b",) and pool[idx[2]] != ("c",)


def test_negative_sampling_needs_two_captions(tiny, params):
    with pytest.raises(ConfigurationError):
        sample_negatives([("a",)], [("a",), ("a",)], stream(0, 0))
    same = [dataclasses.replace(r, caption=["x"]) for r in tiny.records]
    with pytest.raises(ConfigurationError):
        pretrain_classifier(tiny.subset(same), params, TrainConfig(classifier_steps=1))


def test_pretrain_classifier_updates_only_s(tiny, params):
    before = {n: params[n].data.copy() for n in params.names()}
    pretrain_classifier(tiny, params, TrainConfig(classifier_steps=3, batch_size=4))
    assert FLAG_CLASSIFIER in params.flags
    changed = {n for n in params.names() if not np.array_equal(before[n], params[n].data)}
    assert changed and all(params.owner[n] == "S" for n in changed)


def with_classifier(params):
    params.flags.add(FLAG_CLASSIFIER)
    return params


def test_weak_needs_pretrained_classifier(tiny, params):
    with pytest.raises(ConfigurationError):
        weak_loss(caption_only(tiny)[:2], params, tiny.lexicon, CFG, stream(0, 2))


def test_weak_needs_captions(tiny, params):
    with pytest.raises(DataError):
        weak_loss(action_only(tiny)[:2], with_classifier(params), tiny.lexicon, CFG, stream(0, 2))


def test_freeze_invariant(tiny, params):
    with_classifier(params)
    before = {n: params[n].data.copy() for n in params.names("S")}
    grads, rep = weak_sup_step(caption_only(tiny)[:4], params, CFG, tiny.lexicon, stream(0, 2))
    assert rep.n_weak == 4 and rep.weak > 0
    for n in params.names("S"):
        assert params[n].data.tobytes() == before[n].tobytes()
        assert not np.any(grads[n])
        assert params[n].requires_grad
    assert any(np.any(grads[n]) for n in params.names("D'"))


def test_single_sample_hand_check(tiny, params):
    with_classifier(params)
    recs = caption_only(tiny)[:1]
    lex = tiny.lexicon
    rng = stream(0, 4)
    loss = weak_loss(recs, params, lex, CFG, copy_rng(rng)).item()
    soft, w = sample_soft_actions(encode(_bundles(recs), params), params, CFG, copy_rng(rng))
    cap = Tensor(lex.word_embedding[lex.encode_words(recs[0].caption)])
    ones = np.ones((1, cap.shape[0]))
    p = classify_semantic(soft.data[0] @ lex.action_embedding, cap, params, w.data[0:1], ones).item()
    assert loss == pytest.approx(-math.log(p), abs=1e-12)


def test_soft_samples_are_distributions_and_skip_specials(tiny, params):
    enc = encode(_bundles(tiny.records[:3]), params)
    soft, w = sample_soft_actions(enc, params, CFG, stream(0, 5))
    assert np.allclose(soft.data.sum(-1), 1.0, atol=1e-12)
    assert np.all(soft.data[..., :2] == 0.0) and np.all(soft.data[..., 3] == 0.0)  # PAD, SOS, UNK
    assert np.all(np.diff(w.data, axis=1) <= 1e-15) and np.all((w.data >= 0) & (w.data <= 1))


def test_low_temperature_limit_matches_ground_truth(tiny):
    rec = tiny.records[0]
    params = train(tiny.subset([rec]), None, "baseline",
                   TrainConfig(steps=150, lr=3e-3, batch_size=1, eval_every=150)).params
    with_classifier(params)
    lex = tiny.lexicon
    cap = dataclasses.replace(rec, actions=None)
    cold = TrainConfig(temperature=0.01, weak_max_len=len(rec.actions.tokens()) + 1)
    lw = weak_loss([cap], params, lex, cold, stream(1, 1)).item()
    p_gt = classifier_probability(params, lex, [lex.encode_actions(rec.actions)], [lex.encode_words(rec.caption)])
    assert lw == pytest.approx(-math.log(p_gt.data[0]), rel=1e-3)


def test_loss_additivity(tiny, params):
    with_classifier(params)
    recs = caption_only(tiny)[:3]
    lex = tiny.lexicon
    g, rep = finetune_step(recs, params, CFG, lex, stream(0, 6))
    mt, _ = multitask_loss(recs, params, lex, CFG)
    wk = weak_loss(recs, params, lex, CFG, stream(0, 6))
    assert rep.total == pytest.approx(mt.item() + wk.item(), abs=1e-12)
    params.zero_grad()
    (mt + wk).backward()
    for n in g:
        if params.owner[n] == "S":
            assert not np.any(g[n])  # frozen inside the weak term
            continue
        ref = params[n].grad if params[n].grad is not None else 0.0
        assert np.allclose(g[n], ref, atol=1e-12, rtol=0)


def test_finetune_mixed_batch_is_multitask_only(tiny, params):
    with_classifier(params)
    _, rep = finetune_step(tiny.records[:3], params, CFG, tiny.lexicon, stream(0, 6))
    assert rep.weak is None and rep.n_weak == 0


def test_loss_report_counts_match_presence():
    r = LossReport(caption=1.0, n_caption=2).merge(LossReport(weak=0.5, n_weak=3))
    for k in ("caption", "action", "weak", "classifier"):
        assert (getattr(r, k) is None) == (getattr(r, f"n_{k}") == 0)


def test_phase_order_enforced(tiny, params):
    with pytest.raises(ConfigurationError):
        train(tiny, None, "finetune-weak", CFG)
    with pytest.raises(ConfigurationError):
        train(tiny, None, "finetune-weak", CFG, params=params)
    params.flags.add(FLAG_MULTITASK)
    with pytest.raises(ConfigurationError):
        train(tiny, None, "finetune-weak", CFG, params=params)
    with pytest.raises(ConfigurationError):
        train(tiny, None, "pretrain", CFG)


def test_baseline_touches_only_its_owners(tiny):
    res = train(tiny, None, "baseline", CFG)
    fresh = init_params(config_for(tiny), seed=CFG.seed)
    for n in res.params.names():
        same = np.array_equal(fresh[n].data, res.params[n].data)
        assert same == (res.params.owner[n] in ("D", "G", "S"))
    assert FLAG_MULTITASK not in res.params.flags


def test_baseline_ignores_caption_only_records(tiny):
    low = with_annotations(tiny, actions=0.0, captions=1.0)
    with pytest.raises(ConfigurationError):
        train(low, None, "baseline", CFG)


def test_training_is_deterministic_and_records_selection(tiny, tmp_path):
    a = train(tiny, tiny, "multitask", CFG, out_dir=tmp_path / "a")
    train(tiny, tiny, "multitask", CFG, out_dir=tmp_path / "b")
    for name in ("best.ckpt", "step000002.ckpt", "step000004.ckpt", "train_log.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    _, _, meta = load_checkpoint(tmp_path / "a" / "best.ckpt")
    assert meta["selected_step"] == a.best_step in (2, 4)
    assert [h["step"] for h in meta["history"]] == [2, 4]
    log = [json.loads(x) for x in (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()]
    assert [x["step"] for x in log] == [1, 2, 3, 4]
    assert all(x["n_caption"] > 0 for x in log)


def test_finetune_weak_leaves_classifier_untouched(tiny):
    res = train(tiny, None, "multitask", CFG)
    pretrain_classifier(tiny, res.params, TrainConfig(classifier_steps=2, batch_size=4))
    low = with_annotations(tiny, actions=0.5, captions=1.0)
    s_before = {n: res.params[n].data.copy() for n in res.params.names("S")}
    ft = train(low, None, "finetune-weak", CFG, params=res.params)
    for n, a in s_before.items():
        assert ft.params[n].data.tobytes() == a.tobytes()


def test_select_initial_keeps_starting_point_when_best(tiny):
    res = train(tiny, tiny, "multitask", CFG)
    start = res.params.copy()
    pretrain_classifier(tiny, res.params, TrainConfig(classifier_steps=2, batch_size=4))
    ft = train(tiny, tiny, "finetune-weak", dataclasses.replace(CFG, lr=0.5), params=res.params, select_initial=True)
    assert ft.history[0]["step"] == 0
    if ft.best_step == 0:
        for n in start.names(("E", "T", "D", "D'")):
            assert np.array_equal(ft.params[n].data, start[n].data)


def test_overfit_small_set_smoothed_loss_decreases(world, tmp_path):
    ds = generate_dataset(world, 4, 2, seed=2)
    res = train(ds, ds, "baseline", TrainConfig(steps=200, lr=3e-3, batch_size=8, eval_every=200),
                out_dir=tmp_path)
    losses = [json.loads(x)["action"] for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    window = 20
    smooth = [np.mean(losses[i : i + window]) for i in range(0, len(losses), window)]
    assert all(b <= a for a, b in zip(smooth, smooth[1:]))
    for rec, hyp, seq in decode_actions(res.params, ds):
        assert seq == rec.actions and hyp.finished
        assert EOS not in hyp.tokens
