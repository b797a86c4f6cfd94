"""Top-k model selection, majority voting, and the McNemar test."""

import math

import numpy as np

from .errors import ConfigError
from .model import forward
from .training import EvalRecord


def select_top(members, k: int) -> list:
    """The k pool members with the highest best-epoch validation accuracy.

    Ties keep pool order (i.e. the earlier seed), via stable sort.
    """
    if k > len(members):
        raise ConfigError(f"cannot select top {k} of {len(members)} members")
    ranked = sorted(members, key=lambda m: -m.best_record.accuracy)
    return ranked[:k]


def majority_vote(probability_rows) -> int:
    """Plurality answer over per-model probability vectors.

    Ties are broken by the highest probability mass summed over the tied
    candidates, then by the lowest candidate index.
    """
    rows = [np.asarray(r, dtype=np.float64) for r in probability_rows]
    if not rows:
        raise ConfigError("majority_vote: no voters")
    k = rows[0].shape[0]
    votes = np.zeros(k, dtype=np.int64)
    mass = np.zeros(k, dtype=np.float64)
    for r in rows:
        votes[int(np.argmax(r))] += 1
        mass += r
    leaders = np.flatnonzero(votes == votes.max())
    if leaders.size == 1:
        return int(leaders[0])
    best = leaders[np.argmax(mass[leaders])]  # argmax → lowest index on ties
    return int(best)


def ensemble_evaluate(models, ds, table, instances="val", model_id="ensemble") -> EvalRecord:
    """Majority-vote accuracy of a model list over a split or instance list."""
    split = instances if isinstance(instances, str) else "custom"
    if isinstance(instances, str):
        instances = ds.split(instances)
    qids, bits = [], []
    for inst in instances:
        if inst.correct_index is None:
            raise ConfigError(f"instance {inst.qid}: cannot score without gold label")
        rows = [
            forward(inst, ds.plot_of(inst), table, params).probabilities
            for params in models
        ]
        qids.append(inst.qid)
        bits.append(int(majority_vote(rows) == inst.correct_index))
    return EvalRecord(model_id, split, qids, bits)


def mcnemar(bits_a, bits_b):
    """Continuity-corrected McNemar test on paired correctness vectors.

    Returns (chi-square statistic, p-value); χ² = (|b−c|−1)²/(b+c) on the
    discordant counts, with the χ²₁ upper tail p = erfc(√(χ²/2)).
    Identical vectors (b+c = 0) give p = 1 by convention.
    """
    if len(bits_a) != len(bits_b):
        raise ConfigError(f"paired vectors differ in length: {len(bits_a)} vs {len(bits_b)}")
    b = c = 0
    for x, y in zip(bits_a, bits_b):
        if x and not y:
            b += 1
        elif y and not x:
            c += 1
    if b + c == 0:
        return 0.0, 1.0
    stat = (abs(b - c) - 1.0) ** 2 / (b + c)
    return stat, math.erfc(math.sqrt(stat / 2.0))
