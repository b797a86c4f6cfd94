"""Adversarial evaluations: lexical substitution, white-box word replacement,
greedy distractor-sentence search, sentence removal, and cross-model replay.

Every attack emits an :class:`AttackOutcome` whose perturbation record fully
reproduces the perturbed instance, so outcomes optimized against one model
can be replayed bit-exactly against any other (transferability).
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import Plot
from .errors import ConfigError, ReportError
from .model import Scorer, forward

log = logging.getLogger(__name__)

OUTCOME_SCHEMA_VERSION = 1
DISTRACTOR_LENGTH = 10
ADDANY_MODES = ("addc", "addq", "addqa")


@dataclass
class AttackOutcome:
    qid: str
    kind: str
    perturbation: dict
    pre_prob_gold: float
    post_prob_gold: float
    pre_correct: int
    post_correct: int
    skipped: bool = False
    commit_probs: list = field(default_factory=list)  # addany greedy trail

    def to_dict(self) -> dict:
        return {
            "v": OUTCOME_SCHEMA_VERSION,
            "qid": self.qid,
            "kind": self.kind,
            "perturbation": self.perturbation,
            "pre_prob_gold": self.pre_prob_gold,
            "post_prob_gold": self.post_prob_gold,
            "pre_correct": self.pre_correct,
            "post_correct": self.post_correct,
            "skipped": self.skipped,
            "commit_probs": self.commit_probs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackOutcome":
        if d.get("v") != OUTCOME_SCHEMA_VERSION:
            raise ReportError(f"outcome schema version {d.get('v')!r} unsupported")
        return cls(
            d["qid"], d["kind"], d["perturbation"], d["pre_prob_gold"],
            d["post_prob_gold"], d["pre_correct"], d["post_correct"],
            d.get("skipped", False), d.get("commit_probs", []),
        )


def save_outcomes(outcomes, path):
    with open(path, "w", encoding="utf-8") as fh:
        for o in outcomes:
            fh.write(json.dumps(o.to_dict(), sort_keys=True))
            fh.write("\n")


def load_outcomes(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(AttackOutcome.from_dict(json.loads(line)))
    return out


def _gold(inst) -> int:
    if inst.correct_index is None:
        raise ConfigError(f"instance {inst.qid}: attack needs the gold label")
    return inst.correct_index


def _stats(trace, gold):
    return float(trace.probabilities[gold]), int(trace.selected == gold)


# -- lexical substitution ----------------------------------------------------


def apply_rules(tokens, rules):
    """Longest-pattern-first, left-to-right, non-overlapping substitution.

    Replacement output is never rescanned. Returns (new tokens, applied
    rule descriptions).
    """
    by_first = {}
    for r in rules:
        # normalize to lists so tuple-built rules still compare equal to slices
        pair = (list(r.pattern), list(r.replacement))
        by_first.setdefault(pair[0][0], []).append(pair)
    for lst in by_first.values():
        lst.sort(key=lambda pr: -len(pr[0]))
    out, applied = [], []
    i = 0
    while i < len(tokens):
        hit = None
        for pattern, replacement in by_first.get(tokens[i], ()):
            if list(tokens[i : i + len(pattern)]) == pattern:
                hit = (pattern, replacement)
                break
        if hit is None:
            out.append(tokens[i])
            i += 1
        else:
            applied.append({"pos": i, "pattern": list(hit[0]), "replacement": list(hit[1])})
            out.extend(hit[1])
            i += len(hit[0])
    return out, applied


def lexsub_attack(instances, ds, table, params, rules):
    """Rewrite questions only; returns (outcomes, fraction modified)."""
    outcomes = []
    modified = 0
    for inst in instances:
        gold = _gold(inst)
        plot = ds.plot_of(inst)
        new_q, applied = apply_rules(inst.question, rules)
        pre = _stats(forward(inst, plot, table, params), gold)
        if applied:
            modified += 1
            perturbed = _with_question(inst, new_q)
            post = _stats(forward(perturbed, plot, table, params), gold)
        else:
            post = pre
        outcomes.append(
            AttackOutcome(
                inst.qid, "lexsub",
                {"question": list(new_q), "applied": applied},
                pre[0], post[0], pre[1], post[1],
            )
        )
    return outcomes, (modified / len(instances) if instances else 0.0)


def _with_question(inst, new_q):
    return dataclasses.replace(inst, question=list(new_q))


# -- white-box word replacement ----------------------------------------------


def whitebox_word_attack(inst, plot, table, params, k: int, rng) -> AttackOutcome:
    """Replace the k most important words of the most relevant sentence
    (both conditioned on the gold answer) with random vocabulary words."""
    gold = _gold(inst)
    trace = forward(inst, plot, table, params, condition="gold")
    pre = _stats(trace, gold)
    if k <= 0:
        return AttackOutcome(
            inst.qid, "wordwb", {"k": 0, "sentence": None, "positions": [], "tokens": []},
            pre[0], pre[0], pre[1], pre[1],
        )
    s_idx = int(np.argmax(trace.relevance))
    importance = trace.word_importance(s_idx)
    order = np.argsort(-importance, kind="stable")  # ties → earlier position
    positions = sorted(int(v) for v in order[: min(k, importance.shape[0])])
    vocab = table.vocabulary()
    draws = [str(vocab[int(i)]) for i in rng.integers(0, len(vocab), size=len(positions))]
    sentences = [list(s) for s in plot.sentences]
    for pos, tok in zip(positions, draws):
        sentences[s_idx][pos] = tok
    perturbation = {"k": k, "sentence": s_idx, "positions": positions, "tokens": draws}
    post_plot = Plot(plot.movie_id, sentences)
    post = _stats(forward(inst, post_plot, table, params), gold)
    return AttackOutcome(inst.qid, "wordwb", perturbation, pre[0], post[0], pre[1], post[1])


# -- greedy distractor sentence ------------------------------------------------


@dataclass
class WordPool:
    mode: str
    positions: list  # one candidate token list per distractor position


def build_pools(inst, mode: str, common, rng, table=None,
                length: int = DISTRACTOR_LENGTH) -> WordPool:
    """Per-position candidate pools: 20 common words (addc) or 10 common
    words plus all question words (addq) plus all wrong-answer words
    (addqa). Sampling is per-position and seeded."""
    mode = mode.lower()
    if mode not in ADDANY_MODES:
        raise ConfigError(f"unknown addany mode {mode!r}")
    if not common:
        raise ConfigError("empty common-word list")
    known = table.known if table is not None else None

    def in_vocab(tokens):
        if known is None:
            return list(tokens)
        return [t for t in tokens if t in known]

    extras = []
    if mode in ("addq", "addqa"):
        extras.extend(in_vocab(inst.question))
    if mode == "addqa":
        gold = _gold(inst)
        for j, cand in enumerate(inst.candidates):
            if j != gold:
                extras.extend(in_vocab(cand))
    n_common = 20 if mode == "addc" else 10
    n_common = min(n_common, len(common))
    positions = []
    for _ in range(length):
        sample = [str(t) for t in rng.choice(common, size=n_common, replace=False)]
        pool = list(sample)
        seen = set(pool)
        for t in extras:
            if t not in seen:
                seen.add(t)
                pool.append(t)
        positions.append(pool)
    return WordPool(mode, positions)


def addany_attack(inst, plot, table, params, mode, common, rng,
                  epochs: int = 2) -> AttackOutcome:
    """Greedily optimize a 10-word distractor sentence appended to the plot.

    Each epoch sweeps the positions in order; at each position every pool
    token is scored and the one minimizing the gold-answer probability is
    committed, keeping the current word on ties — so the gold probability
    never increases across commits.
    """
    gold = _gold(inst)
    pool = build_pools(inst, mode, common, rng.derive("pool"), table=table)
    init_rng = rng.derive("init")
    n_init = min(DISTRACTOR_LENGTH, len(common))
    words = [str(t) for t in init_rng.choice(common, size=n_init, replace=False)]
    while len(words) < DISTRACTOR_LENGTH:
        words.append(words[len(words) % n_init])

    scorer = Scorer(inst, plot, table, params)
    pre_prob = float(scorer.base_probs[gold])
    pre_correct = int(np.argmax(scorer.base_probs) == gold)

    cur_prob = float(scorer.probabilities(words)[gold])
    trail = [cur_prob]
    for _ in range(epochs):
        for pos in range(DISTRACTOR_LENGTH):
            best_tok, best_prob = words[pos], cur_prob
            for tok in pool.positions[pos]:
                if tok == words[pos]:
                    continue
                words[pos] = tok
                p = float(scorer.probabilities(words)[gold])
                if p < best_prob:
                    best_tok, best_prob = tok, p
            words[pos] = best_tok
            cur_prob = best_prob
            trail.append(cur_prob)

    post_plot = Plot(plot.movie_id, [list(s) for s in plot.sentences] + [list(words)])
    post = _stats(forward(inst, post_plot, table, params), gold)
    return AttackOutcome(
        inst.qid, "addany", {"mode": mode, "distractor": list(words)},
        pre_prob, post[0], pre_correct, post[1], commit_probs=trail,
    )


# -- sentence removal ----------------------------------------------------------


def sentence_removal_attack(inst, plot, table, params) -> AttackOutcome:
    """Drop the sentence most relevant to the gold answer and re-evaluate.
    Single-sentence plots are skipped (flagged, not failed)."""
    gold = _gold(inst)
    trace = forward(inst, plot, table, params, condition="gold")
    pre = _stats(trace, gold)
    if len(plot.sentences) < 2:
        return AttackOutcome(
            inst.qid, "sentrm", {"removed": None}, pre[0], pre[0], pre[1], pre[1],
            skipped=True,
        )
    rm = int(np.argmax(trace.relevance))
    sentences = [s for i, s in enumerate(plot.sentences) if i != rm]
    post = _stats(forward(inst, Plot(plot.movie_id, sentences), table, params), gold)
    return AttackOutcome(inst.qid, "sentrm", {"removed": rm}, pre[0], post[0], pre[1], post[1])


# -- replay / transferability ---------------------------------------------------


def replay_outcome(outcome: AttackOutcome, inst, plot, table, params):
    """Re-run one recorded perturbation against (possibly different) params;
    returns (post_prob_gold, post_correct)."""
    gold = _gold(inst)
    kind, pert = outcome.kind, outcome.perturbation
    if outcome.skipped:
        return _stats(forward(inst, plot, table, params), gold)
    if kind == "lexsub":
        perturbed = _with_question(inst, pert["question"])
        return _stats(forward(perturbed, plot, table, params), gold)
    if kind == "wordwb":
        if pert["sentence"] is None:
            return _stats(forward(inst, plot, table, params), gold)
        sentences = [list(s) for s in plot.sentences]
        for pos, tok in zip(pert["positions"], pert["tokens"]):
            sentences[pert["sentence"]][pos] = tok
        return _stats(forward(inst, Plot(plot.movie_id, sentences), table, params), gold)
    if kind == "addany":
        post_plot = Plot(
            plot.movie_id, [list(s) for s in plot.sentences] + [list(pert["distractor"])]
        )
        return _stats(forward(inst, post_plot, table, params), gold)
    if kind == "sentrm":
        sentences = [s for i, s in enumerate(plot.sentences) if i != pert["removed"]]
        return _stats(forward(inst, Plot(plot.movie_id, sentences), table, params), gold)
    raise ReportError(f"outcome {outcome.qid}: unknown attack kind {kind!r}")


def transfer_eval(outcomes, ds, table, params):
    """Replay recorded perturbations against another model; returns
    (accuracy percentage, per-question bits in outcome order)."""
    by_qid = {}
    for split in ("train", "val", "test"):
        for inst in ds.split(split):
            by_qid[inst.qid] = inst
    bits = []
    for outcome in outcomes:
        inst = by_qid.get(outcome.qid)
        if inst is None:
            raise ReportError(f"outcome {outcome.qid}: instance not in dataset")
        _, correct = replay_outcome(outcome, inst, ds.plot_of(inst), table, params)
        bits.append(correct)
    if not bits:
        raise ReportError("no outcomes to replay")
    return 100.0 * sum(bits) / len(bits), bits
