"""Attack mechanics: substitution, white-box, greedy distractor, removal, replay."""

import dataclasses

import numpy as np
import pytest

from caqa import corpus
from caqa.attacks import (
    AttackOutcome,
    addany_attack,
    apply_rules,
    build_pools,
    lexsub_attack,
    load_outcomes,
    replay_outcome,
    save_outcomes,
    sentence_removal_attack,
    transfer_eval,
    whitebox_word_attack,
)
from caqa.corpus import SubstitutionRule
from caqa.errors import ConfigError, ReportError
from caqa.model import forward, init_model
from caqa.optim import Rng
from tests.conftest import tiny_config


def _rule(pattern, replacement):
    return SubstitutionRule(tuple(pattern.split()), tuple(replacement.split()))


# -- rule application ----------------------------------------------------------


def test_apply_rules_longest_pattern_first():
    rules = [_rule("a", "y"), _rule("a b", "x")]
    out, applied = apply_rules(["a", "b", "a"], rules)
    assert out == ["x", "y"]
    assert [a["pos"] for a in applied] == [0, 2]


def test_apply_rules_never_rescans_output():
    rules = [_rule("a", "b"), _rule("b", "c")]
    assert apply_rules(["a", "b"], rules)[0] == ["b", "c"]


def test_apply_rules_non_overlapping():
    rules = [_rule("a a", "x")]
    out, applied = apply_rules(["a", "a", "a"], rules)
    assert out == ["x", "a"]
    assert len(applied) == 1


def test_apply_rules_multiword_replacement():
    out, applied = apply_rules(["kills"], [_rule("kills", "puts an end to")])
    assert out == ["puts", "an", "end", "to"]
    assert applied[0]["replacement"] == ["puts", "an", "end", "to"]


def test_apply_rules_no_match_is_identity():
    tokens = ["q", "w", "e"]
    out, applied = apply_rules(tokens, [_rule("z", "y")])
    assert out == tokens and out is not tokens
    assert applied == []


# -- lexsub ----------------------------------------------------------------------


def test_lexsub_empty_rules_changes_nothing(tiny_ds, tiny_table, tiny_params):
    outcomes, frac = lexsub_attack(tiny_ds.val, tiny_ds, tiny_table, tiny_params, [])
    assert frac == 0.0
    for o, inst in zip(outcomes, tiny_ds.val):
        assert o.post_prob_gold == o.pre_prob_gold
        assert o.post_correct == o.pre_correct
        assert o.perturbation["question"] == inst.question
        assert o.perturbation["applied"] == []


def test_lexsub_rewrites_questions_only(tiny_ds, tiny_table, tiny_params):
    # every synthetic question starts with "what does the ..."
    rules = [_rule("what does", "tell me what")]
    before = [list(i.question) for i in tiny_ds.val]
    outcomes, frac = lexsub_attack(tiny_ds.val, tiny_ds, tiny_table, tiny_params, rules)
    assert frac == 1.0
    assert [list(i.question) for i in tiny_ds.val] == before  # inputs untouched
    for o in outcomes:
        assert o.perturbation["question"][:3] == ["tell", "me", "what"]
        assert o.kind == "lexsub"


# -- white-box word replacement ----------------------------------------------------


def test_whitebox_k0_is_identity(tiny_ds, tiny_table, tiny_params):
    inst = tiny_ds.val[0]
    o = whitebox_word_attack(inst, tiny_ds.plot_of(inst), tiny_table, tiny_params, 0, Rng(0))
    assert o.post_prob_gold == o.pre_prob_gold
    assert o.post_correct == o.pre_correct
    assert o.perturbation == {"k": 0, "sentence": None, "positions": [], "tokens": []}


def test_whitebox_replaces_k_words(tiny_ds, tiny_table, tiny_params):
    inst = tiny_ds.val[0]
    plot = tiny_ds.plot_of(inst)
    snapshot = [list(s) for s in plot.sentences]
    o = whitebox_word_attack(inst, plot, tiny_table, tiny_params, 3, Rng(1))
    assert [list(s) for s in plot.sentences] == snapshot  # no mutation
    assert len(o.perturbation["positions"]) == 3
    assert o.perturbation["positions"] == sorted(o.perturbation["positions"])
    s_idx = o.perturbation["sentence"]
    trace = forward(inst, plot, tiny_table, tiny_params, condition="gold")
    assert s_idx == int(np.argmax(trace.relevance))
    vocab = set(tiny_table.vocabulary())
    assert all(t in vocab for t in o.perturbation["tokens"])


def test_whitebox_k_clamps_to_sentence_length(tiny_ds, tiny_table, tiny_params):
    inst = tiny_ds.val[0]
    plot = tiny_ds.plot_of(inst)
    o = whitebox_word_attack(inst, plot, tiny_table, tiny_params, 999, Rng(2))
    m = len(plot.sentences[o.perturbation["sentence"]])
    assert len(o.perturbation["positions"]) == m


def test_whitebox_is_rng_deterministic(tiny_ds, tiny_table, tiny_params):
    inst = tiny_ds.val[1]
    plot = tiny_ds.plot_of(inst)
    a = whitebox_word_attack(inst, plot, tiny_table, tiny_params, 2, Rng(9))
    b = whitebox_word_attack(inst, plot, tiny_table, tiny_params, 2, Rng(9))
    assert a.to_dict() == b.to_dict()


# -- distractor pools ----------------------------------------------------------------


def test_pool_modes(tiny_ds, tiny_table):
    inst = tiny_ds.val[0]
    # a controlled common list keeps the mode differences observable
    common = [f"word{i}" for i in range(20) if f"word{i}" in tiny_table.known]
    qwords = set(inst.question)
    wrong = {t for j, c in enumerate(inst.candidates) if j != inst.correct_index for t in c}
    gold_only = set(inst.candidates[inst.correct_index]) - wrong - set(common) - qwords

    pc = build_pools(inst, "addc", common, Rng(0), table=tiny_table)
    assert len(pc.positions) == 10
    for pool in pc.positions:
        assert len(pool) == min(20, len(common))
        assert len(set(pool)) == len(pool)
        assert set(pool) <= set(common)

    pq = build_pools(inst, "addq", common, Rng(0), table=tiny_table)
    for pool in pq.positions:
        assert qwords <= set(pool)
        assert set(pool) <= set(common) | qwords

    pqa = build_pools(inst, "addqa", common, Rng(0), table=tiny_table)
    for pool in pqa.positions:
        assert (qwords | wrong) <= set(pool)
        assert not (set(pool) & gold_only)
        assert set(pool) <= set(common) | qwords | wrong


def test_pool_rejects_bad_input(tiny_ds, tiny_table):
    inst = tiny_ds.val[0]
    with pytest.raises(ConfigError):
        build_pools(inst, "addall", ["a"], Rng(0))
    with pytest.raises(ConfigError):
        build_pools(inst, "addc", [], Rng(0))


def test_pool_drops_out_of_vocabulary_extras(tiny_ds, tiny_table):
    inst = dataclasses.replace(
        tiny_ds.val[0], question=list(tiny_ds.val[0].question) + ["zzz-unknown"]
    )
    p = build_pools(inst, "addq", corpus.common_words(tiny_ds), Rng(0), table=tiny_table)
    assert all("zzz-unknown" not in pool for pool in p.positions)


# -- addany ---------------------------------------------------------------------------


def test_addany_greedy_invariants(tiny_ds, tiny_table, tiny_params):
    inst = tiny_ds.val[0]
    plot = tiny_ds.plot_of(inst)
    common = corpus.common_words(tiny_ds)
    o = addany_attack(inst, plot, tiny_table, tiny_params, "addqa", common, Rng(3), epochs=2)
    assert len(o.perturbation["distractor"]) == 10
    # greedy keeps the current word on ties: the gold probability never rises
    assert all(b <= a + 1e-15 for a, b in zip(o.commit_probs, o.commit_probs[1:]))
    assert len(o.commit_probs) == 1 + 2 * 10
    assert o.post_prob_gold <= o.commit_probs[0] + 1e-12
    # the recorded distractor reproduces the post state exactly
    prob, correct = replay_outcome(o, inst, plot, tiny_table, tiny_params)
    assert prob == o.post_prob_gold
    assert correct == o.post_correct


def test_addany_deterministic(tiny_ds, tiny_table, tiny_params):
    inst = tiny_ds.val[1]
    plot = tiny_ds.plot_of(inst)
    common = corpus.common_words(tiny_ds)
    a = addany_attack(inst, plot, tiny_table, tiny_params, "addc", common, Rng(5), epochs=1)
    b = addany_attack(inst, plot, tiny_table, tiny_params, "addc", common, Rng(5), epochs=1)
    assert a.to_dict() == b.to_dict()


# -- sentence removal -------------------------------------------------------------------


def test_sentrm_removes_most_relevant(tiny_ds, tiny_table, tiny_params):
    inst = tiny_ds.val[0]
    plot = tiny_ds.plot_of(inst)
    o = sentence_removal_attack(inst, plot, tiny_table, tiny_params)
    trace = forward(inst, plot, tiny_table, tiny_params, condition="gold")
    assert o.perturbation["removed"] == int(np.argmax(trace.relevance))
    assert not o.skipped
    prob, correct = replay_outcome(o, inst, plot, tiny_table, tiny_params)
    assert prob == o.post_prob_gold


def test_sentrm_skips_single_sentence_plots(tiny_ds, tiny_table, tiny_params):
    inst = tiny_ds.val[0]
    plot = tiny_ds.plot_of(inst)
    stub = dataclasses.replace(plot, sentences=plot.sentences[:1])
    inst1 = dataclasses.replace(inst, evidence_sentences=[0])
    o = sentence_removal_attack(inst1, stub, tiny_table, tiny_params)
    assert o.skipped
    assert o.perturbation["removed"] is None
    assert o.post_prob_gold == o.pre_prob_gold


# -- persistence and replay ----------------------------------------------------------------


def _all_kind_outcomes(tiny_ds, tiny_table, tiny_params):
    inst = tiny_ds.val[0]
    plot = tiny_ds.plot_of(inst)
    common = corpus.common_words(tiny_ds)
    rules = [_rule("what does", "say what")]
    outs = [
        lexsub_attack([inst], tiny_ds, tiny_table, tiny_params, rules)[0][0],
        whitebox_word_attack(inst, plot, tiny_table, tiny_params, 2, Rng(0)),
        addany_attack(inst, plot, tiny_table, tiny_params, "addq", common, Rng(1), epochs=1),
        sentence_removal_attack(inst, plot, tiny_table, tiny_params),
    ]
    return inst, plot, outs


def test_outcomes_round_trip_and_replay_bit_exact(tmp_path, tiny_ds, tiny_table, tiny_params):
    inst, plot, outs = _all_kind_outcomes(tiny_ds, tiny_table, tiny_params)
    path = tmp_path / "outcomes.jsonl"
    save_outcomes(outs, path)
    loaded = load_outcomes(path)
    assert [o.to_dict() for o in loaded] == [o.to_dict() for o in outs]
    for o in loaded:
        prob, correct = replay_outcome(o, inst, plot, tiny_table, tiny_params)
        assert prob == o.post_prob_gold
        assert correct == o.post_correct


def test_outcome_schema_version_checked():
    with pytest.raises(ReportError, match="version"):
        AttackOutcome.from_dict({"v": 99, "qid": "q", "kind": "lexsub"})


def test_replay_unknown_kind_rejected(tiny_ds, tiny_table, tiny_params):
    inst = tiny_ds.val[0]
    bad = AttackOutcome(inst.qid, "gradient", {}, 0.5, 0.5, 1, 1)
    with pytest.raises(ReportError, match="kind"):
        replay_outcome(bad, inst, tiny_ds.plot_of(inst), tiny_table, tiny_params)


def test_transfer_eval_cross_model(tiny_ds, tiny_table, tiny_params):
    _, _, outs = _all_kind_outcomes(tiny_ds, tiny_table, tiny_params)
    other = init_model(tiny_config("cnn", seed=77), tiny_table)
    acc, bits = transfer_eval(outs, tiny_ds, tiny_table, other)
    assert len(bits) == len(outs)
    assert acc == 100.0 * sum(bits) / len(bits)
    # replaying against the attacked model reproduces recorded decisions
    acc_self, bits_self = transfer_eval(outs, tiny_ds, tiny_table, tiny_params)
    assert bits_self == [o.post_correct for o in outs]


def test_transfer_eval_errors(tiny_ds, tiny_table, tiny_params):
    ghost = AttackOutcome("no-such-qid", "sentrm", {"removed": 0}, 0.5, 0.5, 1, 1)
    with pytest.raises(ReportError, match="not in dataset"):
        transfer_eval([ghost], tiny_ds, tiny_table, tiny_params)
    with pytest.raises(ReportError, match="no outcomes"):
        transfer_eval([], tiny_ds, tiny_table, tiny_params)


def test_attack_requires_gold(tiny_ds, tiny_table, tiny_params):
    inst = dataclasses.replace(tiny_ds.val[0], correct_index=None)
    with pytest.raises(ConfigError, match="gold"):
        whitebox_word_attack(inst, tiny_ds.plot_of(inst), tiny_table, tiny_params, 1, Rng(0))
